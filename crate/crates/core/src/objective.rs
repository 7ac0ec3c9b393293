//! Classification losses, the nearest-neighbor entropy estimator and the
//! entropy regularizer, and their sum.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::datakit::seed;
use crate::diffcore::{nearest_other_row, Graph, Tensor, Var, NORMALIZE_EPS};
use crate::error::{Error, Result};

/// Euler–Mascheroni constant.
pub const EULER_GAMMA: f64 = 0.5772156649015329;

/// Default clamp on nearest-neighbor distances.
pub const REG_EPSILON: f64 = 1e-8;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ClsKind {
    CrossEntropy,
    RescaledMse,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct LossConfig {
    pub cls_kind: ClsKind,
    pub label_smoothing: f64,
    pub mse_kappa: f64,
    pub mse_target: f64,
    pub reg_alpha: f64,
    pub reg_epsilon: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            cls_kind: ClsKind::CrossEntropy,
            label_smoothing: 0.1,
            mse_kappa: 15.0,
            mse_target: 60.0,
            reg_alpha: 0.05,
            reg_epsilon: REG_EPSILON,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::Config("label_smoothing must be in [0, 1)".into()));
        }
        if !(self.reg_alpha >= 0.0) || !self.reg_alpha.is_finite() {
            return Err(Error::Config("reg_alpha must be >= 0".into()));
        }
        if !(self.reg_epsilon > 0.0) {
            return Err(Error::Config("reg_epsilon must be > 0".into()));
        }
        if self.cls_kind == ClsKind::RescaledMse && !(self.mse_kappa > 0.0) {
            return Err(Error::Config("mse_kappa must be > 0".into()));
        }
        Ok(())
    }

    /// Whether the loss needs at least two samples per batch.
    pub fn needs_pairs(&self) -> bool {
        self.reg_alpha > 0.0
    }
}

fn check_labels(labels: &[usize], n: usize, k: usize) -> Result<()> {
    if labels.len() != n {
        return Err(Error::Shape {
            op: "labels",
            lhs: vec![n],
            rhs: vec![labels.len()],
        });
    }
    if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
        return Err(Error::domain(format!("label {bad} out of range for {k} classes")));
    }
    Ok(())
}

/// Mean cross-entropy against `q = (1 - s)·onehot + s/K`.
pub fn ce_label_smoothing(g: &mut Graph, logits: Var, labels: &[usize], s: f64) -> Result<Var> {
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    check_labels(labels, n, k)?;
    // −Σ q log softmax = lse − Σ q·x because Σ q = 1
    let mut q = vec![s / k as f64; n * k];
    for (i, &l) in labels.iter().enumerate() {
        q[i * k + l] += 1.0 - s;
    }
    let q = g.constant(Tensor::matrix(n, k, q));
    let lse = g.log_sum_exp(logits)?;
    let weighted = g.mul(logits, q)?;
    let target = g.row_sum(weighted)?;
    let per = g.sub(lse, target)?;
    g.mean(per)
}

/// Mean over the batch of `κ·(f_y − M)² + Σ_{k≠y} f_k²`.
pub fn rescaled_mse(g: &mut Graph, logits: Var, labels: &[usize], kappa: f64, target: f64) -> Result<Var> {
    if !(kappa > 0.0) {
        return Err(Error::domain("rescaled_mse requires kappa > 0"));
    }
    let (n, k) = (g.value(logits).rows(), g.value(logits).cols());
    check_labels(labels, n, k)?;
    let mut weights = vec![1.0; n * k];
    let mut targets = vec![0.0; n * k];
    for (i, &l) in labels.iter().enumerate() {
        weights[i * k + l] = kappa;
        targets[i * k + l] = target;
    }
    let t = g.constant(Tensor::matrix(n, k, targets));
    let w = g.constant(Tensor::matrix(n, k, weights));
    let diff = g.sub(logits, t)?;
    let sq = g.square(diff)?;
    let weighted = g.mul(sq, w)?;
    let total = g.sum(weighted)?;
    g.scale(total, 1.0 / n as f64)
}

/// `(1/N) Σₙ log(N · ρₙ) + ln 2 + γ`, where ρₙ is the distance from row n to
/// its nearest other row, clamped below at `eps`.
pub fn knn_entropy_estimate_clamped(z: &Tensor, eps: f64) -> Result<f64> {
    let (n, d) = (z.rows(), z.cols());
    if z.shape().len() > 2 || n < 2 {
        return Err(Error::domain(format!(
            "entropy estimate needs at least 2 samples, got {n}"
        )));
    }
    let mut acc = 0.0;
    for i in 0..n {
        let (_, rho) = nearest_other_row(z.data(), n, d, i);
        acc += (n as f64 * rho.max(eps)).ln();
    }
    Ok(acc / n as f64 + std::f64::consts::LN_2 + EULER_GAMMA)
}

pub fn knn_entropy_estimate(z: &Tensor) -> Result<f64> {
    knn_entropy_estimate_clamped(z, REG_EPSILON)
}

/// `−(1/N) Σₙ log max(ρₙ, ε)` on L2-normalized rows.
pub fn entropy_reg_loss(g: &mut Graph, z: Var, eps: f64) -> Result<Var> {
    let n = g.value(z).rows();
    if n < 2 {
        return Err(Error::domain(format!(
            "entropy regularizer needs at least 2 samples, got {n}"
        )));
    }
    let unit = g.row_l2_normalize(z, NORMALIZE_EPS)?;
    let rho = g.nearest_distance(unit, eps)?;
    let logs = g.log(rho)?;
    let m = g.mean(logs)?;
    g.scale(m, -1.0)
}

/// Loss nodes of one batch. `reg` is absent when α = 0.
#[derive(Clone, Copy, Debug)]
pub struct LossParts {
    pub cls: Var,
    pub reg: Option<Var>,
    pub total: Var,
}

pub fn cls_loss(g: &mut Graph, logits: Var, labels: &[usize], cfg: &LossConfig) -> Result<Var> {
    match cfg.cls_kind {
        ClsKind::CrossEntropy => ce_label_smoothing(g, logits, labels, cfg.label_smoothing),
        ClsKind::RescaledMse => rescaled_mse(g, logits, labels, cfg.mse_kappa, cfg.mse_target),
    }
}

/// Classification loss on the logits plus α times the entropy regularizer on
/// the encoder output.
pub fn total_loss(
    g: &mut Graph,
    logits: Var,
    encoder_out: Var,
    labels: &[usize],
    cfg: &LossConfig,
) -> Result<LossParts> {
    let cls = cls_loss(g, logits, labels, cfg)?;
    if cfg.reg_alpha == 0.0 {
        return Ok(LossParts {
            cls,
            reg: None,
            total: cls,
        });
    }
    let reg = entropy_reg_loss(g, encoder_out, cfg.reg_epsilon)?;
    let weighted = g.scale(reg, cfg.reg_alpha)?;
    let total = g.add(cls, weighted)?;
    Ok(LossParts {
        cls,
        reg: Some(reg),
        total,
    })
}

/// Gaussian mixture with isotropic within-class scale.
#[derive(Clone, Debug, PartialEq)]
pub struct MixtureSpec {
    pub priors: Vec<f64>,
    /// `K × d` class means.
    pub means: Tensor,
    pub sigma: f64,
}

impl MixtureSpec {
    pub fn new(priors: Vec<f64>, means: Tensor, sigma: f64) -> Result<Self> {
        if priors.len() != means.rows() || priors.is_empty() {
            return Err(Error::domain("one prior per class mean is required"));
        }
        if priors.iter().any(|&p| !(p >= 0.0)) || (priors.iter().sum::<f64>() - 1.0).abs() > 1e-12 {
            return Err(Error::domain("priors must be nonnegative and sum to 1"));
        }
        if !(sigma >= 0.0) {
            return Err(Error::domain("sigma must be nonnegative"));
        }
        Ok(Self { priors, means, sigma })
    }

    /// `k` equiprobable classes with means evenly spaced on a circle of the
    /// given radius in the first two coordinates of `R^dim`.
    pub fn ring(k: usize, dim: usize, radius: f64, sigma: f64) -> Result<Self> {
        if dim < 2 || k == 0 {
            return Err(Error::domain("ring mixture needs dim >= 2 and k >= 1"));
        }
        let mut means = vec![0.0; k * dim];
        for c in 0..k {
            let t = 2.0 * std::f64::consts::PI * c as f64 / k as f64;
            means[c * dim] = radius * t.cos();
            means[c * dim + 1] = radius * t.sin();
        }
        Self::new(vec![1.0 / k as f64; k], Tensor::matrix(k, dim, means), sigma)
    }

    /// Draws `n` points with class labels sampled from the priors, using
    /// `sigma` in place of the spec's own scale.
    pub fn sample_with_sigma(&self, n: usize, sigma: f64, rng: &mut impl Rng) -> (Tensor, Vec<usize>) {
        let d = self.means.cols();
        let mut data = Vec::with_capacity(n * d);
        let mut labels = Vec::with_capacity(n);
        for _ in 0..n {
            let u: f64 = rng.random();
            let mut acc = 0.0;
            let mut class = self.priors.len() - 1;
            for (c, p) in self.priors.iter().enumerate() {
                acc += p;
                if u < acc {
                    class = c;
                    break;
                }
            }
            for &m in self.means.row(class) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + sigma * z);
            }
            labels.push(class);
        }
        (Tensor::matrix(n, d, data), labels)
    }
}

/// Entropy estimate of `n` mixture samples at each σ of a strictly decreasing
/// grid. Every σ reuses the same labels and standard-normal draws, so only
/// the within-class spread changes along the grid.
pub fn collapse_entropy_trend(spec: &MixtureSpec, sigma_grid: &[f64], n: usize, seed_value: u64) -> Result<Vec<f64>> {
    if n < 2 {
        return Err(Error::domain(format!("entropy trend needs N >= 2, got {n}")));
    }
    if sigma_grid.iter().any(|&s| !(s > 0.0)) || sigma_grid.windows(2).any(|w| !(w[1] < w[0])) {
        return Err(Error::domain("sigma grid must be positive and strictly decreasing"));
    }
    let mut out = Vec::with_capacity(sigma_grid.len());
    for &sigma in sigma_grid {
        let (z, _) = spec.sample_with_sigma(n, sigma, &mut seed::rng(seed_value, "entropy-trend"));
        out.push(knn_entropy_estimate(&z)?);
    }
    Ok(out)
}
