//! AdamW and SGD with decoupled weight decay, and the warmup-cosine schedule.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OptimizerKind {
    Adamw,
    Sgd,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OptimConfig {
    pub kind: OptimizerKind,
    pub weight_decay: f64,
    pub momentum: f64,
    pub betas: [f64; 2],
    pub eps: f64,
}

impl OptimConfig {
    pub fn adamw(weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Adamw,
            weight_decay,
            momentum: 0.0,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }

    pub fn sgd(momentum: f64, weight_decay: f64) -> Self {
        Self {
            kind: OptimizerKind::Sgd,
            weight_decay,
            momentum,
            betas: [0.9, 0.999],
            eps: 1e-8,
        }
    }
}

/// Optimizer state for a fixed, ordered list of parameter slots.
#[derive(Clone, Debug)]
pub struct Optimizer {
    cfg: OptimConfig,
    step: u64,
    first: Vec<Vec<f64>>,
    second: Vec<Vec<f64>>,
}

impl Optimizer {
    pub fn new(cfg: OptimConfig) -> Self {
        Self {
            cfg,
            step: 0,
            first: Vec::new(),
            second: Vec::new(),
        }
    }

    pub fn steps_taken(&self) -> u64 {
        self.step
    }

    /// One update of every `(param, grad)` slot, in the same order each call.
    pub fn step<'a, I>(&mut self, lr: f64, slots: I) -> Result<()>
    where
        I: IntoIterator<Item = (&'a mut [f64], &'a [f64])>,
    {
        self.step += 1;
        let c = self.cfg;
        let t = self.step as i32;
        let (bc1, bc2) = (1.0 - c.betas[0].powi(t), 1.0 - c.betas[1].powi(t));
        for (i, (p, g)) in slots.into_iter().enumerate() {
            if p.len() != g.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: vec![p.len()],
                    rhs: vec![g.len()],
                });
            }
            if self.first.len() == i {
                self.first.push(vec![0.0; p.len()]);
                self.second.push(vec![0.0; p.len()]);
            }
            let (m, v) = (&mut self.first[i], &mut self.second[i]);
            if m.len() != p.len() {
                return Err(Error::Shape {
                    op: "optimizer_step",
                    lhs: vec![m.len()],
                    rhs: vec![p.len()],
                });
            }
            let shrink = 1.0 - lr * c.weight_decay;
            match c.kind {
                OptimizerKind::Adamw => {
                    for j in 0..p.len() {
                        m[j] = c.betas[0] * m[j] + (1.0 - c.betas[0]) * g[j];
                        v[j] = c.betas[1] * v[j] + (1.0 - c.betas[1]) * g[j] * g[j];
                        let mhat = m[j] / bc1;
                        let vhat = v[j] / bc2;
                        p[j] = p[j] * shrink - lr * mhat / (vhat.sqrt() + c.eps);
                    }
                }
                OptimizerKind::Sgd => {
                    for j in 0..p.len() {
                        m[j] = c.momentum * m[j] + g[j];
                        p[j] = p[j] * shrink - lr * m[j];
                    }
                }
            }
        }
        Ok(())
    }
}

/// Linear warmup from 0 to `base_lr` over `warmup_steps`, then cosine decay
/// over the remaining steps.
pub fn lr_at(step: usize, total_steps: usize, warmup_steps: usize, base_lr: f64) -> f64 {
    if step < warmup_steps {
        return base_lr * step as f64 / warmup_steps as f64;
    }
    let span = total_steps.saturating_sub(warmup_steps).max(1);
    let progress = ((step - warmup_steps) as f64 / span as f64).min(1.0);
    base_lr * 0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one(cfg: OptimConfig, p: f64, g: f64, lr: f64) -> f64 {
        let mut opt = Optimizer::new(cfg);
        let mut v = [p];
        opt.step(lr, [(&mut v[..], &[g][..])]).unwrap();
        v[0]
    }

    #[test]
    fn adamw_first_step() {
        let p = one(OptimConfig::adamw(0.0), 1.0, 1.0, 0.1);
        assert!((p - 0.9).abs() < 1e-7);
    }

    #[test]
    fn sgd_step_and_decay() {
        assert!((one(OptimConfig::sgd(0.0, 0.0), 1.0, 2.0, 0.1) - 0.8).abs() < 1e-15);
        let p = one(OptimConfig::sgd(0.9, 0.1), 2.0, 0.0, 0.5);
        assert!((p - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
        let p = one(OptimConfig::adamw(0.1), 2.0, 0.0, 0.5);
        assert!((p - 2.0 * (1.0 - 0.05)).abs() < 1e-15);
    }

    #[test]
    fn sgd_momentum_accumulates() {
        let mut opt = Optimizer::new(OptimConfig::sgd(0.5, 0.0));
        let mut v = [0.0];
        opt.step(1.0, [(&mut v[..], &[1.0][..])]).unwrap();
        opt.step(1.0, [(&mut v[..], &[1.0][..])]).unwrap();
        assert_eq!(v[0], -2.5);
    }

    #[test]
    fn shape_mismatch() {
        let mut opt = Optimizer::new(OptimConfig::sgd(0.0, 0.0));
        let mut v = [0.0, 1.0];
        assert!(opt.step(1.0, [(&mut v[..], &[1.0][..])]).is_err());
    }

    #[test]
    fn schedule() {
        assert_eq!(lr_at(0, 100, 10, 1.0), 0.0);
        assert!((lr_at(5, 100, 10, 1.0) - 0.5).abs() < 1e-15);
        assert_eq!(lr_at(10, 100, 10, 1.0), 1.0);
        assert!((lr_at(55, 100, 10, 1.0) - 0.5).abs() < 1e-9);
        let last = lr_at(99, 100, 10, 1.0);
        let increment = 1.0 - lr_at(11, 100, 10, 1.0);
        assert!(last >= 0.0 && last <= increment + 1e-12);
        let left = 1.0 * (10.0 - 1e-9) / 10.0;
        assert!((left - lr_at(10, 100, 10, 1.0)).abs() < 1e-9);
        assert_eq!(lr_at(0, 10, 0, 0.3), 0.3);
    }
}
