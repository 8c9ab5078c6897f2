//! Parameter update rules.

use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase", deny_unknown_fields)]
pub enum OptimizerConfig {
    AdamW {
        lr: f64,
        beta1: f64,
        beta2: f64,
        eps: f64,
        weight_decay: f64,
    },
    Sgd {
        lr: f64,
    },
}

impl Default for OptimizerConfig {
    /// AdamW with β = (0.99, 0.999), weight decay 0.03, lr 2e-4.
    fn default() -> Self {
        OptimizerConfig::AdamW {
            lr: 2e-4,
            beta1: 0.99,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
    }
}

impl OptimizerConfig {
    pub fn lr(&self) -> f64 {
        match self {
            Self::AdamW { lr, .. } | Self::Sgd { lr } => *lr,
        }
    }

    pub fn build(&self) -> OptimizerState {
        OptimizerState {
            config: *self,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }
}

/// Optimizer with per-parameter moment buffers, matched to parameters by
/// position. Parameters must be passed in the same order on every step.
#[derive(Clone, Debug)]
pub struct OptimizerState {
    config: OptimizerConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl OptimizerState {
    pub fn config(&self) -> &OptimizerConfig {
        &self.config
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// Applies one update to every parameter carrying a gradient.
    pub fn step(&mut self, params: &mut [&mut Tensor]) {
        if self.first.len() != params.len() {
            self.first = params.iter().map(|p| vec![0.0; p.len()]).collect();
            self.second = params.iter().map(|p| vec![0.0; p.len()]).collect();
        }
        self.step += 1;
        match self.config {
            OptimizerConfig::Sgd { lr } => {
                for p in params.iter_mut() {
                    let Some(g) = p.grad.take() else { continue };
                    if !p.requires_grad {
                        continue;
                    }
                    for (w, gv) in p.data_mut().iter_mut().zip(&g) {
                        *w -= lr * gv;
                    }
                    p.grad = Some(g);
                }
            }
            OptimizerConfig::AdamW {
                lr,
                beta1,
                beta2,
                eps,
                weight_decay,
            } => {
                let t = self.step as i32;
                let c1 = 1.0 - beta1.powi(t);
                let c2 = 1.0 - beta2.powi(t);
                for (k, p) in params.iter_mut().enumerate() {
                    let Some(g) = p.grad.take() else { continue };
                    if !p.requires_grad {
                        p.grad = Some(g);
                        continue;
                    }
                    let (m, v) = (&mut self.first[k], &mut self.second[k]);
                    for (((w, gv), mi), vi) in p.data_mut().iter_mut().zip(&g).zip(m.iter_mut()).zip(v.iter_mut()) {
                        *mi = beta1 * *mi + (1.0 - beta1) * gv;
                        *vi = beta2 * *vi + (1.0 - beta2) * gv * gv;
                        let update = (*mi / c1) / ((*vi / c2).sqrt() + eps);
                        *w -= lr * (update + weight_decay * *w);
                    }
                    p.grad = Some(g);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_lr_keeps_params() {
        let mut p = Tensor::vector(vec![1.0, -2.0]).with_requires_grad(true);
        p.grad = Some(vec![0.5, 0.5]);
        let mut opt = OptimizerConfig::AdamW {
            lr: 0.0,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 0.03,
        }
        .build();
        opt.step(&mut [&mut p]);
        assert_eq!(p.data(), &[1.0, -2.0]);
    }

    #[test]
    fn sgd_moves_against_gradient() {
        let mut p = Tensor::vector(vec![1.0]).with_requires_grad(true);
        p.grad = Some(vec![2.0]);
        OptimizerConfig::Sgd { lr: 0.1 }.build().step(&mut [&mut p]);
        assert!((p.item() - 0.8).abs() < 1e-15);
    }

    #[test]
    fn adam_first_step_is_lr_sized() {
        let mut p = Tensor::vector(vec![0.0]).with_requires_grad(true);
        p.grad = Some(vec![123.0]);
        let mut opt = OptimizerConfig::AdamW {
            lr: 0.01,
            beta1: 0.99,
            beta2: 0.999,
            eps: 0.0,
            weight_decay: 0.0,
        }
        .build();
        opt.step(&mut [&mut p]);
        assert!((p.item() + 0.01).abs() < 1e-12);
    }

    #[test]
    fn frozen_params_untouched() {
        let mut p = Tensor::vector(vec![1.0]);
        p.grad = Some(vec![1.0]);
        OptimizerConfig::Sgd { lr: 0.1 }.build().step(&mut [&mut p]);
        assert_eq!(p.item(), 1.0);
    }
}
