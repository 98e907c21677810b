//! Genetic search for the highest-compute architecture near a size budget.
//!
//! A chromosome holds the five searched hyperparameters in a fixed order
//! (layers, hidden, heads, ffn, vocab). Fitness is forward GFLOPs minus the
//! absolute gap in megabytes between the estimated fp32 size and the target,
//! taken literally with no weighting between the two terms.
//!
//! Each generation produces `child_size` children. With probability
//! `crossover_rate` a child is a one-point crossover of two distinct parents,
//! otherwise a one-point mutation of a single parent; parents are picked
//! uniformly. Children are merged with the population and the fittest
//! `population_size` survive, so the incumbent best is never lost.

use std::cmp::Ordering;
use std::time::Instant;

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::{ArchConfig, Gene, SearchSpace, DEFAULT_MAX_SEQ_LEN, DEFAULT_NUM_CLASSES};
use crate::error::{Error, Result};
use crate::estimators::{forward_flops, model_size_fp32};

/// Gene values in [`Gene::ALL`] order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Chromosome(pub [usize; 5]);

impl Chromosome {
    pub const LEN: usize = 5;

    pub fn from_config(config: &ArchConfig) -> Self {
        Chromosome(config.genes())
    }

    pub fn get(&self, gene: Gene) -> usize {
        self.0[gene.index()]
    }

    pub fn to_config(&self, max_seq_len: usize, num_classes: usize) -> ArchConfig {
        ArchConfig::with_genes(self.0, max_seq_len, num_classes)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GaParams {
    pub population_size: usize,
    pub crossover_rate: f64,
    pub max_iter: usize,
    pub child_size: usize,
    /// Size budget in megabytes (2^20 bytes, fp32 weights).
    pub target_size_mb: f64,
    /// Sequence length at which forward GFLOPs are evaluated.
    pub fitness_seq_len: usize,
    pub rng_seed: u64,
    /// Task context copied onto every candidate; not searched.
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl Default for GaParams {
    fn default() -> Self {
        Self {
            population_size: 50,
            crossover_rate: 0.6,
            max_iter: 100,
            child_size: 50,
            target_size_mb: 3.0,
            fitness_seq_len: 400,
            rng_seed: 0,
            max_seq_len: DEFAULT_MAX_SEQ_LEN,
            num_classes: DEFAULT_NUM_CLASSES,
        }
    }
}

impl GaParams {
    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument(msg));
        if self.population_size < 2 {
            return bad(format!("population_size must be >= 2, got {}", self.population_size));
        }
        if !(0.0..=1.0).contains(&self.crossover_rate) {
            return bad(format!("crossover_rate must lie in [0, 1], got {}", self.crossover_rate));
        }
        if self.max_iter < 1 {
            return bad("max_iter must be >= 1".into());
        }
        if self.child_size < 1 {
            return bad("child_size must be >= 1".into());
        }
        if !(self.target_size_mb > 0.0 && self.target_size_mb.is_finite()) {
            return bad(format!("target size must be positive, got {}", self.target_size_mb));
        }
        if self.num_classes == 0 {
            return bad("num_classes must be >= 1".into());
        }
        if self.fitness_seq_len == 0 || self.fitness_seq_len > self.max_seq_len {
            return bad(format!(
                "fitness_seq_len {} must lie in [1, max_seq_len = {}]",
                self.fitness_seq_len, self.max_seq_len
            ));
        }
        Ok(())
    }
}

/// A chromosome with its cached fitness and size gap.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Scored {
    pub chromosome: Chromosome,
    pub fitness: f64,
    pub size_gap: f64,
}

impl Scored {
    pub fn new(chromosome: Chromosome, params: &GaParams) -> Self {
        let (gflops, size_mb) = evaluate(&chromosome, params);
        Self {
            chromosome,
            fitness: gflops - (size_mb - params.target_size_mb).abs(),
            size_gap: (size_mb - params.target_size_mb).abs(),
        }
    }

    /// Survival order: higher fitness, then smaller size gap, then smaller genes.
    fn rank(&self, other: &Self) -> Ordering {
        other
            .fitness
            .total_cmp(&self.fitness)
            .then(self.size_gap.total_cmp(&other.size_gap))
            .then(self.chromosome.cmp(&other.chromosome))
    }
}

fn evaluate(s: &Chromosome, params: &GaParams) -> (f64, f64) {
    let config = s.to_config(params.max_seq_len, params.num_classes);
    let gflops = forward_flops(&config, params.fitness_seq_len)
        .expect("fitness_seq_len is checked by GaParams::validate")
        .gflops;
    (gflops, model_size_fp32(&config).megabytes)
}

/// `GFLOPs(s) - |size_mb(s) - target|`.
pub fn fitness(s: &Chromosome, params: &GaParams) -> f64 {
    let (gflops, size_mb) = evaluate(s, params);
    gflops - (size_mb - params.target_size_mb).abs()
}

/// Draws one value uniformly from every gene's domain.
pub fn random_chromosome<R: Rng + ?Sized>(space: &SearchSpace, rng: &mut R) -> Chromosome {
    let mut genes = [0; Chromosome::LEN];
    for gene in Gene::ALL {
        genes[gene.index()] = sample_gene(space, gene, rng);
    }
    Chromosome(genes)
}

fn sample_gene<R: Rng + ?Sized>(space: &SearchSpace, gene: Gene, rng: &mut R) -> usize {
    let domain = space.domain(gene);
    domain.nth(rng.gen_range(0..domain.len())).unwrap()
}

pub fn random_initialization<R: Rng + ?Sized>(
    space: &SearchSpace,
    params: &GaParams,
    rng: &mut R,
) -> Vec<Chromosome> {
    (0..params.population_size)
        .map(|_| random_chromosome(space, rng))
        .collect()
}

/// Cut positions are 1-based; `h = 5` would copy the first parent verbatim.
fn random_cut<R: Rng + ?Sized>(rng: &mut R) -> usize {
    rng.gen_range(1..Chromosome::LEN)
}

/// Keeps `c1`'s genes at positions `<= cut` and takes `c2`'s after it.
pub fn crossover_at(c1: &Chromosome, c2: &Chromosome, cut: usize) -> Chromosome {
    let mut genes = c1.0;
    genes[cut..].copy_from_slice(&c2.0[cut..]);
    Chromosome(genes)
}

pub fn crossover<R: Rng + ?Sized>(c1: &Chromosome, c2: &Chromosome, rng: &mut R) -> Chromosome {
    let cut = random_cut(rng);
    crossover_at(c1, c2, cut)
}

/// Keeps `c1`'s genes at positions `<= cut` and resamples every later gene.
pub fn mutation_at<R: Rng + ?Sized>(
    c1: &Chromosome,
    cut: usize,
    space: &SearchSpace,
    rng: &mut R,
) -> Chromosome {
    let mut genes = c1.0;
    for gene in &Gene::ALL[cut..] {
        genes[gene.index()] = sample_gene(space, *gene, rng);
    }
    Chromosome(genes)
}

pub fn mutation<R: Rng + ?Sized>(c1: &Chromosome, space: &SearchSpace, rng: &mut R) -> Chromosome {
    let cut = random_cut(rng);
    mutation_at(c1, cut, space, rng)
}

/// Top `population_size` of `merged` under the survival order. Duplicates are kept.
pub fn selection(mut merged: Vec<Scored>, population_size: usize) -> Vec<Scored> {
    assert!(
        merged.len() >= population_size,
        "cannot select {population_size} from {}",
        merged.len()
    );
    merged.sort_by(Scored::rank);
    merged.truncate(population_size);
    merged
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GaResult {
    pub best: ArchConfig,
    pub best_fitness: f64,
    pub size_mb: f64,
    pub gflops: f64,
    /// Best fitness after each generation's selection.
    pub history: Vec<f64>,
    pub evaluations: usize,
    pub elapsed_seconds: f64,
    pub seed: u64,
}

impl GaResult {
    pub fn chromosome(&self) -> Chromosome {
        Chromosome::from_config(&self.best)
    }
}

pub fn search(space: &SearchSpace, params: &GaParams) -> Result<GaResult> {
    params.validate()?;
    let started = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let mut evaluations = 0usize;
    let mut score = |c: Chromosome| {
        evaluations += 1;
        Scored::new(c, params)
    };

    let mut population: Vec<Scored> = random_initialization(space, params, &mut rng)
        .into_iter()
        .map(&mut score)
        .collect();
    let mut history = Vec::with_capacity(params.max_iter);

    for _ in 0..params.max_iter {
        let mut children = Vec::with_capacity(params.child_size);
        while children.len() < params.child_size {
            let child = if rng.gen::<f64>() < params.crossover_rate {
                let n = population.len();
                let i = rng.gen_range(0..n);
                let mut j = rng.gen_range(0..n - 1);
                if j >= i {
                    j += 1;
                }
                crossover(&population[i].chromosome, &population[j].chromosome, &mut rng)
            } else {
                let i = rng.gen_range(0..population.len());
                mutation(&population[i].chromosome, space, &mut rng)
            };
            children.push(child);
        }
        population.extend(children.into_iter().map(&mut score));
        population = selection(population, params.population_size);
        history.push(population[0].fitness);
    }

    let winner = population[0];
    let best = winner.chromosome.to_config(params.max_seq_len, params.num_classes);
    let (gflops, size_mb) = evaluate(&winner.chromosome, params);
    Ok(GaResult {
        best,
        best_fitness: winner.fitness,
        size_mb,
        gflops,
        history,
        evaluations,
        elapsed_seconds: started.elapsed().as_secs_f64(),
        seed: params.rng_seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn space() -> SearchSpace {
        SearchSpace::default_table1()
    }

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn exact_size_match_scores_its_gflops() {
        let c = Chromosome([3, 512, 4, 1024, 10000]);
        let mut params = GaParams::default();
        let (gflops, size_mb) = evaluate(&c, &params);
        params.target_size_mb = size_mb;
        assert_eq!(fitness(&c, &params), gflops);
    }

    #[test]
    fn smaller_gap_wins_at_equal_flops() {
        // vocab changes size without changing FLOPs
        let params = GaParams::default();
        let base = [1, 32, 1, 32];
        let size_of = |v: usize| {
            model_size_fp32(&Chromosome([base[0], base[1], base[2], base[3], v]).to_config(512, 2))
                .megabytes
        };
        let near = (1000..=50000).step_by(1000).min_by(|a, b| {
            (size_of(*a) - 2.9).abs().total_cmp(&(size_of(*b) - 2.9).abs())
        });
        let near = near.unwrap();
        let far = (1000..=50000)
            .step_by(1000)
            .find(|v| size_of(*v) > 3.4)
            .unwrap();
        assert!(size_of(near) < 3.0 && size_of(far) > 3.0);
        assert!((size_of(near) - 3.0).abs() < (size_of(far) - 3.0).abs());
        let f_near = fitness(&Chromosome([1, 32, 1, 32, near]), &params);
        let f_far = fitness(&Chromosome([1, 32, 1, 32, far]), &params);
        assert!(f_near > f_far);
    }

    #[test]
    fn example_chromosome_fitness_regression() {
        // Evaluated by hand from the two estimator formulas (S = 512, C = 2, seq 400):
        //   params = 11,955,202  -> 45.6054... MiB
        //   flops  = 6,016,731,136
        let params = GaParams {
            target_size_mb: 3.0,
            ..GaParams::default()
        };
        let f = fitness(&Chromosome([3, 512, 4, 1024, 10000]), &params);
        let expected = 6.016_731_136 - (11_955_202.0 * 4.0 / 1_048_576.0 - 3.0);
        assert!((f - expected).abs() < 1e-12, "{f} vs {expected}");
        assert!((f - (-36.588_745_243_394_53)).abs() < 1e-9, "{f}");
    }

    #[test]
    fn initialization_is_seeded_and_on_grid() {
        let params = GaParams::default();
        let a = random_initialization(&space(), &params, &mut rng(7));
        let b = random_initialization(&space(), &params, &mut rng(7));
        assert_eq!(a, b);
        assert_eq!(a.len(), 50);
        for c in &a {
            assert!(space().contains(&c.to_config(512, 2)));
        }
    }

    #[test]
    fn heads_are_sampled_uniformly() {
        let mut r = rng(11);
        let mut counts = [0usize; 4];
        let n = 10_000;
        for _ in 0..n {
            let c = random_chromosome(&space(), &mut r);
            let slot = [1, 2, 4, 8].iter().position(|&h| h == c.get(Gene::Heads)).unwrap();
            counts[slot] += 1;
        }
        let expected = n as f64 / 4.0;
        let chi2: f64 = counts
            .iter()
            .map(|&o| (o as f64 - expected).powi(2) / expected)
            .sum();
        // 3 degrees of freedom, p = 0.001
        assert!(chi2 < 16.27, "chi2 {chi2} counts {counts:?}");
        for &o in &counts {
            assert!((o as f64 / n as f64 - 0.25).abs() < 0.02, "{counts:?}");
        }
    }

    #[test]
    fn crossover_cut_semantics() {
        let c1 = Chromosome([3, 512, 4, 1024, 10000]);
        let c2 = Chromosome([6, 256, 8, 2048, 20000]);
        assert_eq!(crossover_at(&c1, &c2, 2), Chromosome([3, 512, 8, 2048, 20000]));
        let mut r = rng(3);
        assert_eq!(crossover(&c1, &c1, &mut r), c1);
        for _ in 0..1000 {
            let child = crossover(&c1, &c2, &mut r);
            for i in 0..5 {
                assert!(child.0[i] == c1.0[i] || child.0[i] == c2.0[i]);
            }
            // never a verbatim copy of c1 since every gene differs and the cut is <= 4
            assert_ne!(child, c1);
            assert_eq!(child.0[0], c1.0[0]);
        }
    }

    #[test]
    fn mutation_keeps_prefix() {
        let c1 = Chromosome([3, 512, 4, 1024, 10000]);
        let mut r = rng(5);
        for cut in 1..5 {
            for _ in 0..200 {
                let m = mutation_at(&c1, cut, &space(), &mut r);
                assert_eq!(&m.0[..cut], &c1.0[..cut]);
                assert!(space().contains(&m.to_config(512, 2)));
            }
        }
        for _ in 0..200 {
            let m = mutation_at(&c1, 4, &space(), &mut r);
            assert_eq!(&m.0[..4], &c1.0[..4]);
        }
    }

    #[test]
    fn selection_is_top_k_and_keeps_duplicates() {
        let params = GaParams::default();
        let mut r = rng(9);
        let pop: Vec<Scored> = (0..30)
            .map(|_| Scored::new(random_chromosome(&space(), &mut r), &params))
            .collect();
        let mut merged = pop.clone();
        merged.push(pop[0]);
        merged.push(pop[0]);
        let kept = selection(merged.clone(), 10);
        let min_kept = kept.iter().map(|s| s.fitness).fold(f64::INFINITY, f64::min);
        let mut sorted = merged.clone();
        sorted.sort_by(Scored::rank);
        let max_dropped = sorted[10..]
            .iter()
            .map(|s| s.fitness)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(min_kept >= max_dropped);

        let dup = sorted[0];
        let worst = *sorted.last().unwrap();
        let kept = selection(vec![worst, dup, dup], 2);
        assert_eq!(kept, vec![dup, dup]);

        let already = selection(sorted[..10].to_vec(), 10);
        assert_eq!(already, sorted[..10].to_vec());
    }

    #[test]
    fn ties_fall_back_to_lexicographic_genes() {
        let params = GaParams::default();
        let a = Scored {
            chromosome: Chromosome([2, 16, 1, 32, 1000]),
            fitness: 1.0,
            size_gap: 0.5,
        };
        let b = Scored {
            chromosome: Chromosome([1, 16, 1, 32, 1000]),
            ..a
        };
        let c = Scored { size_gap: 0.1, ..a };
        let _ = params;
        let kept = selection(vec![a, b, c], 3);
        assert_eq!(kept, vec![c, b, a]);
    }

    #[test]
    fn search_is_deterministic_and_elitist() {
        let params = GaParams {
            max_iter: 20,
            rng_seed: 42,
            ..GaParams::default()
        };
        let a = search(&space(), &params).unwrap();
        let b = search(&space(), &params).unwrap();
        assert_eq!(a.best, b.best);
        assert_eq!(a.history, b.history);
        assert_eq!(a.history.len(), 20);
        assert!(a.history.windows(2).all(|w| w[1] >= w[0]));
        assert_eq!(a.evaluations, 50 + 20 * 50);
        assert_eq!(a.best_fitness, *a.history.last().unwrap());
        assert_eq!(a.best_fitness, fitness(&a.chromosome(), &params));
    }

    #[test]
    fn invalid_params_are_rejected() {
        let base = GaParams::default();
        for bad in [
            GaParams { population_size: 1, ..base.clone() },
            GaParams { crossover_rate: 1.5, ..base.clone() },
            GaParams { max_iter: 0, ..base.clone() },
            GaParams { child_size: 0, ..base.clone() },
            GaParams { target_size_mb: 0.0, ..base.clone() },
            GaParams { target_size_mb: -3.0, ..base.clone() },
            GaParams { fitness_seq_len: 513, ..base.clone() },
        ] {
            assert!(search(&space(), &bad).is_err(), "{bad:?}");
        }
    }
}
