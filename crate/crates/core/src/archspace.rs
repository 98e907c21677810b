//! Architecture configurations and the grid the search is allowed to explore.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Default position-embedding length for BERT-family encoders.
pub const DEFAULT_MAX_SEQ_LEN: usize = 512;
pub const DEFAULT_NUM_CLASSES: usize = 2;

/// One encoder-classifier architecture.
///
/// The five searched hyperparameters are `layers`, `hidden`, `heads`, `ffn`
/// and `vocab`. `max_seq_len` and `num_classes` describe the task and are
/// carried along unchanged by the search.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArchConfig {
    pub layers: usize,
    pub hidden: usize,
    pub heads: usize,
    pub ffn: usize,
    pub vocab: usize,
    pub max_seq_len: usize,
    pub num_classes: usize,
}

impl ArchConfig {
    /// Builds a config from the five searched values plus the task context.
    pub fn new(
        layers: usize,
        hidden: usize,
        heads: usize,
        ffn: usize,
        vocab: usize,
        max_seq_len: usize,
        num_classes: usize,
    ) -> Self {
        Self {
            layers,
            hidden,
            heads,
            ffn,
            vocab,
            max_seq_len,
            num_classes,
        }
    }

    /// The 12-layer, 768-wide reference encoder with a binary head.
    ///
    /// `heads = 12` and `vocab = 50265` sit outside [`SearchSpace::default_table1`],
    /// so this config is only meaningful for estimation.
    pub fn pretrained_reference() -> Self {
        Self::new(12, 768, 12, 3072, 50265, DEFAULT_MAX_SEQ_LEN, DEFAULT_NUM_CLASSES)
    }

    /// Per-head width. Only meaningful once [`ArchConfig::check_shape`] passes.
    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Positivity and head divisibility, independent of any search grid.
    pub fn check_shape(&self) -> Result<(), Violation> {
        for gene in Gene::ALL {
            if gene.get(self) == 0 {
                return Err(Violation::NonPositive { gene });
            }
        }
        if self.max_seq_len == 0 {
            return Err(Violation::NonPositiveContext { field: "max_seq_len" });
        }
        if self.num_classes == 0 {
            return Err(Violation::NonPositiveContext { field: "num_classes" });
        }
        if !self.hidden.is_multiple_of(self.heads) {
            return Err(Violation::HeadsDoNotDivideHidden {
                hidden: self.hidden,
                heads: self.heads,
            });
        }
        Ok(())
    }

    /// Searched values in gene order.
    pub fn genes(&self) -> [usize; 5] {
        [self.layers, self.hidden, self.heads, self.ffn, self.vocab]
    }

    /// Rebuilds a config from gene values and a template's context fields.
    pub fn with_genes(genes: [usize; 5], max_seq_len: usize, num_classes: usize) -> Self {
        let [layers, hidden, heads, ffn, vocab] = genes;
        Self::new(layers, hidden, heads, ffn, vocab, max_seq_len, num_classes)
    }

    pub fn from_json_slice(bytes: &[u8]) -> Result<Self> {
        serde_json::from_slice(bytes).map_err(|e| Error::format("architecture config", e))
    }

    pub fn to_json_pretty(&self) -> String {
        serde_json::to_string_pretty(self).expect("ArchConfig serialization is infallible")
    }
}

impl fmt::Display for ArchConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{{L: {}, H: {}, A: {}, D: {}, V: {}}}",
            self.layers, self.hidden, self.heads, self.ffn, self.vocab
        )
    }
}

/// A searched hyperparameter. Declaration order is the chromosome gene order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Gene {
    Layers,
    Hidden,
    Heads,
    Ffn,
    Vocab,
}

impl Gene {
    pub const ALL: [Gene; 5] = [Gene::Layers, Gene::Hidden, Gene::Heads, Gene::Ffn, Gene::Vocab];

    pub fn name(self) -> &'static str {
        match self {
            Gene::Layers => "layers",
            Gene::Hidden => "hidden",
            Gene::Heads => "heads",
            Gene::Ffn => "ffn",
            Gene::Vocab => "vocab",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn get(self, config: &ArchConfig) -> usize {
        config.genes()[self.index()]
    }
}

impl fmt::Display for Gene {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Why a config was rejected. Only the first violated rule is reported.
#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum Violation {
    #[error("{gene} must be at least 1")]
    NonPositive { gene: Gene },
    #[error("{field} must be at least 1")]
    NonPositiveContext { field: &'static str },
    #[error("{gene} = {value} is below the lower bound {lower}")]
    BelowLower { gene: Gene, value: usize, lower: usize },
    #[error("{gene} = {value} is above the upper bound {upper}")]
    AboveUpper { gene: Gene, value: usize, upper: usize },
    #[error("{gene} = {value} is off the grid (lower {lower}, step {step})")]
    OffGrid {
        gene: Gene,
        value: usize,
        lower: usize,
        step: usize,
    },
    #[error("{gene} = {value} is not one of {allowed:?}")]
    NotInSet {
        gene: Gene,
        value: usize,
        allowed: Vec<usize>,
    },
    #[error("hidden = {hidden} is not divisible by heads = {heads}")]
    HeadsDoNotDivideHidden { hidden: usize, heads: usize },
}

impl Violation {
    /// The offending searched field, when there is one.
    pub fn gene(&self) -> Option<Gene> {
        match self {
            Violation::NonPositive { gene }
            | Violation::BelowLower { gene, .. }
            | Violation::AboveUpper { gene, .. }
            | Violation::OffGrid { gene, .. }
            | Violation::NotInSet { gene, .. } => Some(*gene),
            Violation::NonPositiveContext { .. } | Violation::HeadsDoNotDivideHidden { .. } => None,
        }
    }
}

/// Legal values for one hyperparameter.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    /// `lower, lower + step, ..., upper` (inclusive).
    Grid { lower: usize, upper: usize, step: usize },
    /// An explicit list of values.
    Set(Vec<usize>),
}

impl Domain {
    pub fn grid(lower: usize, upper: usize, step: usize) -> Self {
        assert!(step > 0 && lower <= upper, "empty or degenerate grid");
        Domain::Grid { lower, upper, step }
    }

    pub fn len(&self) -> usize {
        match self {
            Domain::Grid { lower, upper, step } => (upper - lower) / step + 1,
            Domain::Set(values) => values.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// The `i`-th legal value in ascending grid order (or list order for sets).
    pub fn nth(&self, i: usize) -> Option<usize> {
        if i >= self.len() {
            return None;
        }
        match self {
            Domain::Grid { lower, step, .. } => Some(lower + i * step),
            Domain::Set(values) => Some(values[i]),
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = usize> + '_ {
        (0..self.len()).map(|i| self.nth(i).unwrap())
    }

    fn check(&self, gene: Gene, value: usize) -> Result<(), Violation> {
        match self {
            Domain::Grid { lower, upper, step } => {
                if value < *lower {
                    Err(Violation::BelowLower {
                        gene,
                        value,
                        lower: *lower,
                    })
                } else if value > *upper {
                    Err(Violation::AboveUpper {
                        gene,
                        value,
                        upper: *upper,
                    })
                } else if !(value - lower).is_multiple_of(*step) {
                    Err(Violation::OffGrid {
                        gene,
                        value,
                        lower: *lower,
                        step: *step,
                    })
                } else {
                    Ok(())
                }
            }
            Domain::Set(values) => {
                if values.contains(&value) {
                    Ok(())
                } else {
                    Err(Violation::NotInSet {
                        gene,
                        value,
                        allowed: values.clone(),
                    })
                }
            }
        }
    }
}

/// Per-hyperparameter legal values for student architectures.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SearchSpace {
    pub layers: Domain,
    pub hidden: Domain,
    pub heads: Domain,
    pub ffn: Domain,
    pub vocab: Domain,
}

impl SearchSpace {
    /// The student grid: every searched value bounded by the 12-layer reference.
    pub fn default_table1() -> Self {
        Self {
            layers: Domain::grid(1, 12, 1),
            hidden: Domain::grid(16, 768, 16),
            heads: Domain::Set(vec![1, 2, 4, 8]),
            ffn: Domain::grid(32, 3072, 32),
            vocab: Domain::grid(1000, 50000, 1000),
        }
    }

    pub fn domain(&self, gene: Gene) -> &Domain {
        match gene {
            Gene::Layers => &self.layers,
            Gene::Hidden => &self.hidden,
            Gene::Heads => &self.heads,
            Gene::Ffn => &self.ffn,
            Gene::Vocab => &self.vocab,
        }
    }

    /// Number of distinct gene combinations.
    pub fn cardinality(&self) -> u64 {
        Gene::ALL
            .iter()
            .map(|&g| self.domain(g).len() as u64)
            .product()
    }

    /// Accepts iff every searched field is on its grid and heads divide hidden.
    pub fn validate(&self, config: &ArchConfig) -> Result<(), Violation> {
        for gene in Gene::ALL {
            let value = gene.get(config);
            if value == 0 {
                return Err(Violation::NonPositive { gene });
            }
            self.domain(gene).check(gene, value)?;
        }
        config.check_shape()
    }

    pub fn contains(&self, config: &ArchConfig) -> bool {
        self.validate(config).is_ok()
    }
}

impl Default for SearchSpace {
    fn default() -> Self {
        Self::default_table1()
    }
}

/// Free-function form of [`SearchSpace::validate`].
pub fn validate(config: &ArchConfig, space: &SearchSpace) -> Result<(), Violation> {
    space.validate(config)
}
