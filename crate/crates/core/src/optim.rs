//! AdamW with decoupled weight decay and a step-wise learning-rate schedule.

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{ensure, Error, Result};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamWConfig {
    pub lr: f64,
    pub weight_decay: f64,
    #[serde(default = "default_beta1")]
    pub beta1: f64,
    #[serde(default = "default_beta2")]
    pub beta2: f64,
    #[serde(default = "default_eps")]
    pub eps: f64,
}

fn default_beta1() -> f64 {
    0.9
}
fn default_beta2() -> f64 {
    0.999
}
fn default_eps() -> f64 {
    1e-8
}

impl AdamWConfig {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Self {
            lr,
            weight_decay,
            beta1: default_beta1(),
            beta2: default_beta2(),
            eps: default_eps(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        ensure!(self.lr > 0.0 && self.lr.is_finite(), Validation, "optim.lr must be positive");
        ensure!(self.weight_decay >= 0.0, Validation, "optim.weight_decay must be >= 0");
        ensure!(
            (0.0..1.0).contains(&self.beta1) && (0.0..1.0).contains(&self.beta2),
            Validation,
            "optim betas must lie in [0, 1)"
        );
        ensure!(self.eps > 0.0, Validation, "optim.eps must be positive");
        Ok(())
    }
}

/// `lr(epoch) = base · factor^k` where `k` counts milestones `<= epoch`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MultiStep {
    pub milestones: Vec<usize>,
    pub factor: f64,
}

impl MultiStep {
    pub fn lr(&self, base: f64, epoch: usize) -> f64 {
        let k = self.milestones.iter().filter(|&&m| m <= epoch).count();
        base * self.factor.powi(k as i32)
    }
}

#[derive(Clone, Debug)]
pub struct AdamW {
    cfg: AdamWConfig,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: u64,
}

impl AdamW {
    pub fn new(cfg: AdamWConfig, shapes: &[usize]) -> Self {
        Self {
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            cfg,
            t: 0,
        }
    }

    pub fn for_params(cfg: AdamWConfig, params: &[Tensor]) -> Self {
        let shapes: Vec<usize> = params.iter().map(Tensor::len).collect();
        Self::new(cfg, &shapes)
    }

    pub fn steps(&self) -> u64 {
        self.t
    }

    /// One update at learning rate `lr`. Non-finite gradients abort before any
    /// parameter is touched.
    pub fn step(&mut self, params: &mut [&mut Tensor], grads: &[Tensor], lr: f64) -> Result<()> {
        ensure!(
            params.len() == self.m.len() && grads.len() == self.m.len(),
            Dimension,
            "optimizer tracks {} tensors, got {} params / {} grads",
            self.m.len(),
            params.len(),
            grads.len()
        );
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            ensure!(
                p.len() == self.m[i].len() && g.len() == self.m[i].len(),
                Dimension,
                "tensor {i}: state {} vs param {} vs grad {}",
                self.m[i].len(),
                p.len(),
                g.len()
            );
            if let Some(k) = g.data().iter().position(|v| !v.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in tensor {i} at index {k}: {}",
                    g.data()[k]
                )));
            }
        }
        self.t += 1;
        let c = &self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.t as i32);
        let bc2 = 1.0 - c.beta2.powi(self.t as i32);
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (k, (w, &gk)) in p.data_mut().iter_mut().zip(g.data()).enumerate() {
                m[k] = c.beta1 * m[k] + (1.0 - c.beta1) * gk;
                v[k] = c.beta2 * v[k] + (1.0 - c.beta2) * gk * gk;
                let mhat = m[k] / bc1;
                let vhat = v[k] / bc2;
                *w *= 1.0 - lr * c.weight_decay;
                *w -= lr * mhat / (vhat.sqrt() + c.eps);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_gradient_no_decay_is_identity() {
        let mut w = Tensor::row(vec![1.0, -2.0]);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &[2]);
        opt.step(&mut [&mut w], &[Tensor::zeros(1, 2)], 0.1).unwrap();
        assert_eq!(w.data(), &[1.0, -2.0]);
    }

    #[test]
    fn first_step_moves_by_lr() {
        let mut w = Tensor::scalar(1.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.0), &[1]);
        opt.step(&mut [&mut w], &[Tensor::scalar(1.0)], 0.1).unwrap();
        let want = 1.0 - 0.1 / (1.0 + 1e-8);
        assert!((w.item() - want).abs() < 1e-15);
        assert!((w.item() - 0.9).abs() < 1e-8);
    }

    #[test]
    fn decoupled_decay_and_nan_abort() {
        let mut w = Tensor::scalar(2.0);
        let mut opt = AdamW::new(AdamWConfig::new(0.1, 0.5), &[1]);
        opt.step(&mut [&mut w], &[Tensor::scalar(0.0)], 0.1).unwrap();
        assert!((w.item() - 2.0 * 0.95).abs() < 1e-15);
        let before = w.clone();
        let nan = Tensor::raw(vec![1, 1], vec![f64::NAN]);
        assert!(matches!(opt.step(&mut [&mut w], &[nan], 0.1), Err(Error::Numerical(_))));
        assert_eq!(w, before);
    }

    #[test]
    fn multistep_schedule() {
        let s = MultiStep { milestones: vec![40], factor: 0.1 };
        assert_eq!(s.lr(1e-4, 39), 1e-4);
        assert!((s.lr(1e-4, 40) - 1e-5).abs() < 1e-20);
        assert!((s.lr(2e-4, 55) / 2e-4 - 0.1).abs() < 1e-15);
    }
}
