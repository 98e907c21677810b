//! Synthetic sequence-classification task and teacher training.
//!
//! Every sequence starts with [`CLS_ID`]; content tokens are drawn uniformly
//! from `[FIRST_CONTENT_ID, vocab)`. Under the default rule a sequence is
//! positive iff a designated trigger bigram occurs in it. Negatives are
//! rejection-sampled so they never contain the bigram; positives get it planted
//! at a random content position.
//!
//! Training data is split into a labeled half for supervised teacher training
//! and an unlabeled half whose labels are erased before it is handed to
//! distillation.

use std::collections::HashSet;
use std::io::{BufRead, Write};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::archspace::ArchConfig;
use crate::error::{Error, Result};
use crate::nn::{argmax, cross_entropy, fit, Classifier, EncoderModel, FitParams, Gradients, TrainState};

/// Reserved for tokens outside a truncated vocabulary.
pub const UNK_ID: u32 = 0;
/// First token of every sequence; its final hidden state feeds the pooler.
pub const CLS_ID: u32 = 1;
pub const FIRST_CONTENT_ID: u32 = 2;

const BALANCE_RANGE: (f64, f64) = (0.45, 0.55);
const MAX_SPLIT_ATTEMPTS: usize = 32;
const MAX_SAMPLE_ATTEMPTS: usize = 10_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClassRule {
    /// Label 1 iff `first` is immediately followed by `second`.
    TriggerBigram { first: u32, second: u32 },
}

impl ClassRule {
    pub fn num_classes(&self) -> usize {
        match self {
            ClassRule::TriggerBigram { .. } => 2,
        }
    }

    pub fn label(&self, ids: &[u32]) -> usize {
        match *self {
            ClassRule::TriggerBigram { first, second } => {
                ids.windows(2).any(|w| w[0] == first && w[1] == second) as usize
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SyntheticTaskSpec {
    pub vocab_size: usize,
    /// Inclusive sequence-length range, counting the leading CLS token.
    pub min_len: usize,
    pub max_len: usize,
    pub rule: ClassRule,
    pub labeled: usize,
    pub unlabeled: usize,
    pub validation: usize,
    pub test: usize,
    pub rng_seed: u64,
}

impl Default for SyntheticTaskSpec {
    fn default() -> Self {
        Self {
            vocab_size: 2000,
            min_len: 8,
            max_len: 16,
            rule: ClassRule::TriggerBigram { first: 17, second: 42 },
            labeled: 4000,
            unlabeled: 4000,
            validation: 1000,
            test: 1000,
            rng_seed: 0,
        }
    }
}

impl SyntheticTaskSpec {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidArgument(m));
        if self.vocab_size <= FIRST_CONTENT_ID as usize + 1 {
            return bad(format!("vocab_size {} leaves too few content tokens", self.vocab_size));
        }
        if self.vocab_size > u32::MAX as usize {
            return bad("vocab_size does not fit a u32 token id".into());
        }
        if self.min_len < 3 || self.min_len > self.max_len {
            return bad(format!(
                "sequence length range [{}, {}] must start at 3 or more",
                self.min_len, self.max_len
            ));
        }
        let ClassRule::TriggerBigram { first, second } = self.rule;
        for t in [first, second] {
            if t < FIRST_CONTENT_ID || t as usize >= self.vocab_size {
                return bad(format!("trigger token {t} is not a content token"));
            }
        }
        if self.labeled == 0 {
            return bad("labeled split must be nonempty".into());
        }
        Ok(())
    }

    /// Model context implied by the task.
    pub fn max_seq_len(&self) -> usize {
        self.max_len
    }

    pub fn num_classes(&self) -> usize {
        self.rule.num_classes()
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Example {
    pub ids: Vec<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<usize>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Corpus {
    pub labeled: Vec<Example>,
    /// Labels erased.
    pub unlabeled: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

impl Corpus {
    pub fn splits(&self) -> [(&'static str, &[Example]); 4] {
        [
            ("labeled", &self.labeled),
            ("unlabeled", &self.unlabeled),
            ("validation", &self.validation),
            ("test", &self.test),
        ]
    }
}

struct Sampler<'a> {
    spec: &'a SyntheticTaskSpec,
    rng: ChaCha8Rng,
    seen: HashSet<Vec<u32>>,
}

impl Sampler<'_> {
    fn random_sequence(&mut self) -> Vec<u32> {
        let len = self.rng.gen_range(self.spec.min_len..=self.spec.max_len);
        let mut ids = Vec::with_capacity(len);
        ids.push(CLS_ID);
        for _ in 1..len {
            ids.push(self.rng.gen_range(FIRST_CONTENT_ID..self.spec.vocab_size as u32));
        }
        ids
    }

    fn example(&mut self, label: usize) -> Result<Vec<u32>> {
        let ClassRule::TriggerBigram { first, second } = self.spec.rule;
        for _ in 0..MAX_SAMPLE_ATTEMPTS {
            let mut ids = self.random_sequence();
            if self.spec.rule.label(&ids) == 1 {
                continue;
            }
            if label == 1 {
                let at = self.rng.gen_range(1..ids.len() - 1);
                ids[at] = first;
                ids[at + 1] = second;
            }
            if self.spec.rule.label(&ids) == label && self.seen.insert(ids.clone()) {
                return Ok(ids);
            }
        }
        Err(Error::InvalidArgument(format!(
            "could not draw a fresh example of class {label} in {MAX_SAMPLE_ATTEMPTS} attempts"
        )))
    }

    fn split(&mut self, size: usize) -> Result<Vec<Example>> {
        for _ in 0..MAX_SPLIT_ATTEMPTS {
            let labels: Vec<usize> = (0..size).map(|_| self.rng.gen_range(0..2)).collect();
            let frac = labels.iter().sum::<usize>() as f64 / size.max(1) as f64;
            if size > 0 && !(BALANCE_RANGE.0..=BALANCE_RANGE.1).contains(&frac) {
                continue;
            }
            return labels
                .into_iter()
                .map(|label| {
                    Ok(Example {
                        ids: self.example(label)?,
                        label: Some(label),
                    })
                })
                .collect();
        }
        Err(Error::InvalidArgument(format!(
            "split of {size} examples stayed outside the {BALANCE_RANGE:?} class balance after {MAX_SPLIT_ATTEMPTS} draws"
        )))
    }
}

/// Draws all four splits. Deterministic in the spec; no sequence appears twice.
pub fn generate(spec: &SyntheticTaskSpec) -> Result<Corpus> {
    spec.validate()?;
    let mut sampler = Sampler {
        spec,
        rng: ChaCha8Rng::seed_from_u64(spec.rng_seed),
        seen: HashSet::new(),
    };
    let labeled = sampler.split(spec.labeled)?;
    let mut unlabeled = sampler.split(spec.unlabeled)?;
    unlabeled.iter_mut().for_each(|e| e.label = None);
    let validation = sampler.split(spec.validation)?;
    let test = sampler.split(spec.test)?;
    Ok(Corpus {
        labeled,
        unlabeled,
        validation,
        test,
    })
}

/// Writes one JSON object per line.
pub fn write_examples<W: Write>(examples: &[Example], mut out: W) -> std::io::Result<()> {
    for e in examples {
        serde_json::to_writer(&mut out, e)?;
        out.write_all(b"\n")?;
    }
    out.flush()
}

/// Parses line-delimited examples; blank lines are skipped.
pub fn read_examples<R: BufRead>(input: R) -> Result<Vec<Example>> {
    let mut out = Vec::new();
    for (n, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let e: Example = serde_json::from_str(&line)
            .map_err(|err| Error::format("corpus record", format!("line {}: {err}", n + 1)))?;
        out.push(e);
    }
    Ok(out)
}

/// Splits examples into token sequences and labels; every example must be labeled.
pub fn labeled_pairs(examples: &[Example]) -> Result<(Vec<&[u32]>, Vec<usize>)> {
    let mut ids = Vec::with_capacity(examples.len());
    let mut labels = Vec::with_capacity(examples.len());
    for (i, e) in examples.iter().enumerate() {
        let label = e
            .label
            .ok_or_else(|| Error::InvalidArgument(format!("example {i} has no label")))?;
        ids.push(e.ids.as_slice());
        labels.push(label);
    }
    Ok((ids, labels))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TeacherParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub rng_seed: u64,
}

impl Default for TeacherParams {
    fn default() -> Self {
        Self {
            epochs: 2,
            batch_size: 32,
            learning_rate: 5e-4,
            rng_seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TeacherOutcome {
    pub model: EncoderModel,
    pub loss_trace: Vec<f64>,
    pub train_accuracy: f64,
    /// `None` when no validation examples were supplied.
    pub validation_accuracy: Option<f64>,
}

/// Fraction of `examples` whose argmax logit equals the stored label.
pub fn accuracy(model: &dyn Classifier, examples: &[Example]) -> Result<f64> {
    let (ids, labels) = labeled_pairs(examples)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("accuracy over an empty set".into()));
    }
    let mut hits = 0;
    for (seq, label) in ids.iter().zip(&labels) {
        hits += (argmax(&model.logits(seq)?) == *label) as usize;
    }
    Ok(hits as f64 / ids.len() as f64)
}

/// Supervised cross-entropy training from a fresh initialization.
pub fn train_teacher(
    config: &ArchConfig,
    labeled: &[Example],
    validation: &[Example],
    params: &TeacherParams,
) -> Result<TeacherOutcome> {
    let (ids, labels) = labeled_pairs(labeled)?;
    if ids.is_empty() {
        return Err(Error::InvalidArgument("labeled split is empty".into()));
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= config.num_classes) {
        return Err(Error::InvalidArgument(format!(
            "label {bad} outside {} classes",
            config.num_classes
        )));
    }
    let mut init_rng = ChaCha8Rng::seed_from_u64(params.rng_seed);
    let model = EncoderModel::init(config, &mut init_rng)?;
    let mut state = TrainState::new(model, params.rng_seed);
    let fit_params = FitParams {
        epochs: params.epochs,
        batch_size: params.batch_size,
        learning_rate: params.learning_rate,
        seed: params.rng_seed.wrapping_add(1),
    };
    let c = config.num_classes;
    let loss_trace = fit(&mut state, ids.len(), &fit_params, |model, idx| {
        let batch: Vec<&[u32]> = idx.iter().map(|&i| ids[i]).collect();
        let (logits, cache) = model.forward_cached(&batch)?;
        let scale = 1.0 / idx.len() as f64;
        let mut dlogits = vec![0.0; logits.len()];
        let mut loss = 0.0;
        for (k, &i) in idx.iter().enumerate() {
            let (l, g) = cross_entropy(&logits[k * c..(k + 1) * c], labels[i]);
            loss += l * scale;
            for (d, gv) in dlogits[k * c..(k + 1) * c].iter_mut().zip(g) {
                *d = gv * scale;
            }
        }
        let mut grads = Gradients::zeros(model.num_params());
        model.backward_into(&cache, &dlogits, &mut grads);
        Ok((loss, grads))
    })?;
    let model = state.model;
    let train_accuracy = accuracy(&model, labeled)?;
    let validation_accuracy = if validation.is_empty() {
        None
    } else {
        Some(accuracy(&model, validation)?)
    };
    Ok(TeacherOutcome {
        model,
        loss_trace,
        train_accuracy,
        validation_accuracy,
    })
}
