use super::model::{EncoderModel, Gradients};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// A model together with its Adam moments.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub model: EncoderModel,
    pub first_moment: Vec<f64>,
    pub second_moment: Vec<f64>,
    pub step: u64,
    pub rng_seed: u64,
}

impl TrainState {
    pub fn new(model: EncoderModel, rng_seed: u64) -> Self {
        let n = model.num_params();
        Self {
            model,
            first_moment: vec![0.0; n],
            second_moment: vec![0.0; n],
            step: 0,
            rng_seed,
        }
    }

    /// One bias-corrected Adam update.
    pub fn sgd_adam_step(&mut self, grads: &Gradients, lr: f64) {
        assert_eq!(grads.0.len(), self.first_moment.len(), "gradient shape");
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - ADAM_BETA1.powi(t);
        let c2 = 1.0 - ADAM_BETA2.powi(t);
        let params = self.model.params_mut();
        for (((w, m), v), &g) in params
            .iter_mut()
            .zip(self.first_moment.iter_mut())
            .zip(self.second_moment.iter_mut())
            .zip(&grads.0)
        {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
}
