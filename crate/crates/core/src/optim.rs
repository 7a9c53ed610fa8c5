//! Adam with bias correction.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{Real, Tensor};

fn default_lr() -> f64 {
    3e-4
}
fn default_betas() -> (f64, f64) {
    (0.9, 0.999)
}
fn default_eps() -> f64 {
    1e-8
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamConfig {
    #[serde(default = "default_lr")]
    pub lr: f64,
    #[serde(default = "default_betas")]
    pub betas: (f64, f64),
    #[serde(default = "default_eps")]
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            lr: default_lr(),
            betas: default_betas(),
            eps: default_eps(),
        }
    }
}

impl AdamConfig {
    pub fn validate(&self) -> Result<()> {
        let (b1, b2) = self.betas;
        let ok = self.lr.is_finite()
            && self.lr > 0.0
            && (0.0..1.0).contains(&b1)
            && (0.0..1.0).contains(&b2)
            && self.eps.is_finite()
            && self.eps > 0.0;
        if ok {
            Ok(())
        } else {
            Err(Error::Config(format!("invalid optimizer settings {self:?}")))
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub cfg: AdamConfig,
    step: u64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    lr_scale: Vec<f64>,
}

impl Adam {
    pub fn new<T: Real>(cfg: AdamConfig, params: &[Tensor<T>]) -> Self {
        Adam {
            cfg,
            step: 0,
            m: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            v: params.iter().map(|p| vec![0.0; p.numel()]).collect(),
            lr_scale: vec![1.0; params.len()],
        }
    }

    /// Multiplies the learning rate of tensor `index` by `scale`.
    pub fn set_lr_scale(&mut self, index: usize, scale: f64) {
        self.lr_scale[index] = scale;
    }

    pub fn steps(&self) -> u64 {
        self.step
    }

    /// One update of every parameter from the matching gradient slice.
    pub fn step<T: Real>(&mut self, params: &mut [Tensor<T>], grads: &[&[T]]) -> Result<()> {
        if params.len() != self.m.len() || grads.len() != params.len() {
            return Err(Error::Tensor(crate::error::TensorError::InvalidArgument {
                op: "adam_step",
                reason: format!(
                    "optimizer tracks {} tensors, got {} parameters and {} gradients",
                    self.m.len(),
                    params.len(),
                    grads.len()
                ),
            }));
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.numel() != self.m[i].len() || g.len() != p.numel() {
                return Err(Error::Tensor(crate::error::TensorError::Shape {
                    op: "adam_step",
                    lhs: p.shape().to_vec(),
                    rhs: vec![g.len()],
                }));
            }
        }
        self.step += 1;
        let (b1, b2) = self.cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let lr = self.cfg.lr * self.lr_scale[i];
            for (k, w) in p.data_mut().iter_mut().enumerate() {
                let gk = g[k].as_f64();
                m[k] = b1 * m[k] + (1.0 - b1) * gk;
                v[k] = b2 * v[k] + (1.0 - b2) * gk * gk;
                let update = lr * (m[k] / c1) / ((v[k] / c2).sqrt() + self.cfg.eps);
                *w = T::lit(w.as_f64() - update);
            }
        }
        Ok(())
    }
}
