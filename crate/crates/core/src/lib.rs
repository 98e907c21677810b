//! Size-targeted simplification of BERT-style encoder classifiers.
//!
//! The pipeline has two halves. A genetic search over a grid of encoder
//! hyperparameters picks the architecture with the most forward-pass compute
//! whose byte size lands near a budget ([`gasearch`]); the chosen student is
//! then trained to mimic a fixed teacher's temperature-softened outputs on
//! unlabeled data ([`distill`]).
//!
//! Everything needed to run that loop at desk scale lives here: closed-form
//! size and FLOP estimators, a small dense transformer encoder with
//! hand-written reverse-mode gradients, and a synthetic classification task.

pub mod archspace;
pub mod corpus;
pub mod distill;
pub mod error;
pub mod estimators;
pub mod gasearch;
pub mod nn;

pub use archspace::{ArchConfig, SearchSpace, Violation};
pub use error::{Error, Result};
