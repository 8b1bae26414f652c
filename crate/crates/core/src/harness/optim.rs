//! Plain SGD and Adam over flat parameter slices.

use super::config::OptimizerConfig;
use crate::autodiff::Tensor;

pub struct Optimizer {
    config: OptimizerConfig,
    lr: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl Optimizer {
    pub fn new(config: OptimizerConfig, lr: f64) -> Self {
        Self {
            config,
            lr,
            m: Vec::new(),
            v: Vec::new(),
            t: 0,
        }
    }

    /// Applies one update. `params` and `grads` must be aligned and keep the
    /// same shapes across calls.
    pub fn step(&mut self, params: Vec<&mut [f64]>, grads: &[Tensor]) {
        debug_assert_eq!(params.len(), grads.len());
        match self.config {
            OptimizerConfig::Sgd => {
                for (p, g) in params.into_iter().zip(grads) {
                    for (w, d) in p.iter_mut().zip(g.data()) {
                        *w -= self.lr * d;
                    }
                }
            }
            OptimizerConfig::Adam { beta1, beta2, eps } => {
                if self.m.is_empty() {
                    self.m = grads.iter().map(|g| vec![0.0; g.numel()]).collect();
                    self.v = self.m.clone();
                }
                self.t += 1;
                let c1 = 1.0 - beta1.powi(self.t);
                let c2 = 1.0 - beta2.powi(self.t);
                for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
                    for (((w, d), mk), vk) in p.iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mk = beta1 * *mk + (1.0 - beta1) * d;
                        *vk = beta2 * *vk + (1.0 - beta2) * d * d;
                        *w -= self.lr * (*mk / c1) / ((*vk / c2).sqrt() + eps);
                    }
                }
            }
        }
    }
}
