//! A small dense transformer-encoder classifier with hand-written gradients.
//!
//! Parameters live in one flat `f64` buffer described by a [`ParamLayout`], so
//! the optimizer, gradient checks and checkpoint code can treat the model as a
//! single vector. Forward passes stack every sequence of a batch row-wise;
//! only attention is computed per sequence.

mod adam;
mod checkpoint;
mod linalg;
mod model;
mod train;

pub use adam::{TrainState, ADAM_BETA1, ADAM_BETA2, ADAM_EPS};
pub use checkpoint::{decode as decode_checkpoint, read_checkpoint, write_checkpoint, CHECKPOINT_MAGIC};
pub use linalg::count_flops;
pub use train::{cross_entropy, fit, FitParams};
pub use model::{
    softmax_in_place, EncoderModel, ForwardCache, Gradients, ParamLayout, TensorKind, TensorSpec,
};

/// Anything that maps a token sequence to class logits.
pub trait Classifier {
    fn num_classes(&self) -> usize;
    fn logits(&self, ids: &[u32]) -> crate::Result<Vec<f64>>;
}

impl Classifier for EncoderModel {
    fn num_classes(&self) -> usize {
        self.config().num_classes
    }

    fn logits(&self, ids: &[u32]) -> crate::Result<Vec<f64>> {
        self.forward(ids)
    }
}

/// Index of the largest logit; the first one wins ties.
pub fn argmax(values: &[f64]) -> usize {
    values
        .iter()
        .enumerate()
        .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, &v)| if v > bv { (i, v) } else { (bi, bv) })
        .0
}
