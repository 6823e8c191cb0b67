//! Adam and the piecewise learning-rate law.

use crate::config::OptimizerConfig;
use crate::error::Result;
use crate::tensor::{GradStore, Tensor};

/// Learning rate at `epoch` (0-based) out of `total_epochs`: constant
/// at `lr0` for the first half, then linear per-epoch decay reaching
/// `lr_min` exactly at the final epoch.
pub fn learning_rate(lr0: f64, lr_min: f64, total_epochs: usize, epoch: usize) -> f64 {
    let boundary = total_epochs / 2;
    if epoch < boundary || total_epochs <= 1 {
        lr0
    } else {
        let steps = (total_epochs - boundary) as f64;
        let k = (epoch - boundary + 1) as f64;
        lr0 + (lr_min - lr0) * (k / steps).min(1.0)
    }
}

/// Adam with bias correction; moment buffers are indexed by the
/// stable parameter order of the model.
#[derive(Debug)]
pub struct Adam {
    pub cfg: OptimizerConfig,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
    pub step_count: u64,
}

impl Adam {
    pub fn new(cfg: OptimizerConfig, params: &[(String, Tensor)]) -> Adam {
        let m = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        let v = params.iter().map(|(_, t)| vec![0.0; t.numel()]).collect();
        Adam {
            cfg,
            m,
            v,
            step_count: 0,
        }
    }

    /// Applies one update in place; parameters missing from the grad
    /// store are treated as zero-gradient.
    pub fn step(&mut self, params: &[(String, Tensor)], grads: &GradStore, lr: f64) -> Result<()> {
        self.step_count += 1;
        let t = self.step_count as f64;
        let bc1 = 1.0 - self.cfg.beta1.powf(t);
        let bc2 = 1.0 - self.cfg.beta2.powf(t);
        for (i, (_, p)) in params.iter().enumerate() {
            let grad = grads.grad_or_zeros(p);
            let m = &mut self.m[i];
            let v = &mut self.v[i];
            let mut data = p.data_mut();
            for j in 0..grad.len() {
                m[j] = self.cfg.beta1 * m[j] + (1.0 - self.cfg.beta1) * grad[j];
                v[j] = self.cfg.beta2 * v[j] + (1.0 - self.cfg.beta2) * grad[j] * grad[j];
                let m_hat = m[j] / bc1;
                let v_hat = v[j] / bc2;
                data[j] -= lr * m_hat / (v_hat.sqrt() + self.cfg.eps);
            }
        }
        Ok(())
    }
}
