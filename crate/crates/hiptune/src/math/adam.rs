//! First-order adaptive-moment optimizer with fixed defaults
//! (beta1 0.9, beta2 0.999, eps 1e-8) and a constant learning rate.

use super::Tensor;

#[derive(Clone, Debug)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamConfig {
    pub fn with_lr(learning_rate: f64) -> Self {
        AdamConfig {
            learning_rate,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Moment state for one parameter tensor.
#[derive(Clone)]
pub struct AdamState {
    m: Tensor,
    v: Tensor,
    step: u64,
}

impl AdamState {
    pub fn new(shape: &[usize]) -> Self {
        AdamState {
            m: Tensor::zeros(shape),
            v: Tensor::zeros(shape),
            step: 0,
        }
    }

    pub fn apply(&mut self, cfg: &AdamConfig, param: &mut Tensor, grad: &Tensor) {
        assert!(param.same_shape(grad), "adam grad shape mismatch");
        self.step += 1;
        let b1t = 1.0 - cfg.beta1.powi(self.step as i32);
        let b2t = 1.0 - cfg.beta2.powi(self.step as i32);
        let md = self.m.data_mut();
        let vd = self.v.data_mut();
        let pd = param.data_mut();
        for ((p, (m, v)), g) in pd
            .iter_mut()
            .zip(md.iter_mut().zip(vd.iter_mut()))
            .zip(grad.data().iter())
        {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mhat = *m / b1t;
            let vhat = *v / b2t;
            *p -= cfg.learning_rate * mhat / (vhat.sqrt() + cfg.eps);
        }
    }
}
