use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::adam::TrainState;
use super::model::{EncoderModel, Gradients};
use crate::error::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitParams {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    /// Seeds the per-epoch shuffle.
    pub seed: u64,
}

/// Minibatch Adam over `n_examples` items.
///
/// `batch_loss` receives the current model and the example indices of one
/// batch and returns the batch's mean loss and its gradient. Returns the mean
/// training loss of each epoch (averaged over examples, as seen during the
/// epoch).
pub fn fit<F>(state: &mut TrainState, n_examples: usize, params: &FitParams, mut batch_loss: F) -> Result<Vec<f64>>
where
    F: FnMut(&EncoderModel, &[usize]) -> Result<(f64, Gradients)>,
{
    if params.batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    if !(params.learning_rate > 0.0 && params.learning_rate.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {}",
            params.learning_rate
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let mut order: Vec<usize> = (0..n_examples).collect();
    let mut trace = Vec::with_capacity(params.epochs);
    for epoch in 0..params.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        for (batch, idx) in order.chunks(params.batch_size).enumerate() {
            let (loss, grads) = batch_loss(&state.model, idx)?;
            if !loss.is_finite() || grads.0.iter().any(|g| !g.is_finite()) {
                return Err(Error::Diverged { epoch, batch, loss });
            }
            total += loss * idx.len() as f64;
            state.sgd_adam_step(&grads, params.learning_rate);
        }
        trace.push(total / n_examples.max(1) as f64);
    }
    Ok(trace)
}

/// Softmax cross-entropy against a hard label: `(loss, d loss / d logits)`.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let lse = max + logits.iter().map(|z| (z - max).exp()).sum::<f64>().ln();
    let mut grad: Vec<f64> = logits.iter().map(|z| (z - lse).exp()).collect();
    grad[label] -= 1.0;
    (lse - logits[label], grad)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cross_entropy_of_uniform_logits() {
        let (loss, grad) = cross_entropy(&[0.0, 0.0], 1);
        assert!((loss - std::f64::consts::LN_2).abs() < 1e-15);
        assert_eq!(grad, vec![0.5, -0.5]);
    }

    #[test]
    fn cross_entropy_is_stable() {
        let (loss, grad) = cross_entropy(&[800.0, -800.0], 0);
        assert!(loss.abs() < 1e-12);
        assert!(grad.iter().all(|g| g.is_finite()));
    }
}
