//! Neural-collapse metrics, effective rank, and the summary statistics used to
//! compare layers.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::datakit::Split;
use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Relative singular-value cutoff for the pseudo-inverse, scaled by `max(N, d)`.
pub const PINV_RCOND: f64 = 1e-12;
pub const RANKME_EPSILON: f64 = 1e-7;

/// Embeddings of one layer with their labels.
#[derive(Clone, Debug, PartialEq)]
pub struct EmbeddingSet {
    pub features: Tensor,
    pub labels: Vec<usize>,
    pub num_classes: usize,
    pub layer_name: String,
    pub split: Split,
}

impl EmbeddingSet {
    pub fn new(
        features: Tensor,
        labels: Vec<usize>,
        num_classes: usize,
        layer_name: impl Into<String>,
        split: Split,
    ) -> Result<Self> {
        if features.shape().len() != 2 || features.rows() != labels.len() {
            return Err(Error::Shape {
                op: "embedding_set",
                lhs: features.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= num_classes) {
            return Err(Error::domain(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            features,
            labels,
            num_classes,
            layer_name: layer_name.into(),
            split,
        })
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn global_mean(&self) -> Vec<f64> {
        let d = self.dim();
        let mut mu = vec![0.0; d];
        for row in self.features.data().chunks(d) {
            mu.iter_mut().zip(row).for_each(|(m, v)| *m += v);
        }
        let n = self.len() as f64;
        mu.iter_mut().for_each(|m| *m /= n);
        mu
    }

    /// `K × d` class means. Every class must be present.
    pub fn class_means(&self) -> Result<Tensor> {
        let (k, d) = (self.num_classes, self.dim());
        let mut sums = vec![0.0; k * d];
        let mut counts = vec![0usize; k];
        for (row, &l) in self.features.data().chunks(d).zip(&self.labels) {
            counts[l] += 1;
            sums[l * d..(l + 1) * d].iter_mut().zip(row).for_each(|(s, v)| *s += v);
        }
        if let Some(c) = counts.iter().position(|&c| c == 0) {
            return Err(Error::domain(format!(
                "class {c} has no samples in {}",
                self.layer_name
            )));
        }
        for (c, &n) in counts.iter().enumerate() {
            sums[c * d..(c + 1) * d].iter_mut().for_each(|s| *s /= n as f64);
        }
        Ok(Tensor::matrix(k, d, sums))
    }
}

/// Linear classifier `W z + b`.
#[derive(Clone, Debug, PartialEq)]
pub struct ClassifierSnapshot {
    /// `K × d`
    pub weight: Tensor,
    pub bias: Vec<f64>,
}

impl ClassifierSnapshot {
    pub fn new(weight: Tensor, bias: Vec<f64>) -> Result<Self> {
        if weight.shape().len() != 2 || weight.rows() < 2 || bias.len() != weight.rows() {
            return Err(Error::Shape {
                op: "classifier",
                lhs: weight.shape().to_vec(),
                rhs: vec![bias.len()],
            });
        }
        Ok(Self { weight, bias })
    }

    pub fn num_classes(&self) -> usize {
        self.weight.rows()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NcReport {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
    pub rankme: f64,
    pub entropy_est: f64,
    #[serde(skip)]
    pub class_means: Option<Tensor>,
    pub global_mean: Vec<f64>,
}

fn to_na(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

/// Moore–Penrose pseudo-inverse of a symmetric PSD matrix via SVD, dropping
/// singular values below `scale · σ_max · PINV_RCOND`.
fn pinv(m: &DMatrix<f64>, scale: usize) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let cutoff = scale as f64 * smax * PINV_RCOND;
    let inv = svd
        .singular_values
        .map(|s| if s > cutoff && s > 0.0 { 1.0 / s } else { 0.0 });
    let u = svd.u.expect("requested U");
    let vt = svd.v_t.expect("requested V^T");
    vt.transpose() * DMatrix::from_diagonal(&inv) * u.transpose()
}

/// `(1/K) tr(Σ_W Σ_B†)`.
pub fn nc1(e: &EmbeddingSet) -> Result<f64> {
    let k = e.num_classes;
    if k < 2 {
        return Err(Error::domain("nc1 needs at least 2 classes"));
    }
    let means = e.class_means()?;
    let d = e.dim();
    let n = e.len();
    let mu_g = e.global_mean();

    let mut within = DMatrix::<f64>::zeros(d, d);
    let mut centered = DMatrix::<f64>::zeros(n, d);
    for (i, (row, &l)) in e.features.data().chunks(d).zip(&e.labels).enumerate() {
        for (j, (v, m)) in row.iter().zip(means.row(l)).enumerate() {
            centered[(i, j)] = v - m;
        }
    }
    within.gemm(1.0 / n as f64, &centered.transpose(), &centered, 0.0);

    let mut between_c = DMatrix::<f64>::zeros(k, d);
    for c in 0..k {
        for j in 0..d {
            between_c[(c, j)] = means.get(c, j) - mu_g[j];
        }
    }
    let between = between_c.transpose() * &between_c / k as f64;
    if between.iter().all(|&v| v == 0.0) {
        return Err(Error::domain("between-class covariance is zero"));
    }
    let prod = within * pinv(&between, n.max(d));
    Ok((prod.trace() / k as f64).max(0.0))
}

/// Frobenius distance between `M/‖M‖_F` and the normalized centering matrix.
fn etf_distance(m: &DMatrix<f64>, what: &str) -> Result<f64> {
    let k = m.nrows();
    let norm = m.norm();
    if norm == 0.0 || !norm.is_finite() {
        return Err(Error::domain(format!("{what} has zero Frobenius norm")));
    }
    let scale = 1.0 / ((k - 1) as f64).sqrt();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let target = scale * (f64::from(u8::from(i == j)) - 1.0 / k as f64);
            let diff = m[(i, j)] / norm - target;
            acc += diff * diff;
        }
    }
    Ok(acc.sqrt())
}

pub fn nc2(c: &ClassifierSnapshot) -> Result<f64> {
    let w = to_na(&c.weight);
    etf_distance(&(&w * w.transpose()), "W W^T")
}

pub fn nc3(c: &ClassifierSnapshot, e: &EmbeddingSet) -> Result<f64> {
    if c.weight.cols() != e.dim() || c.num_classes() != e.num_classes {
        return Err(Error::Shape {
            op: "nc3",
            lhs: c.weight.shape().to_vec(),
            rhs: vec![e.num_classes, e.dim()],
        });
    }
    let means = e.class_means()?;
    let mu_g = e.global_mean();
    let (k, d) = (e.num_classes, e.dim());
    let z = DMatrix::from_fn(d, k, |j, cl| means.get(cl, j) - mu_g[j]);
    etf_distance(&(to_na(&c.weight) * z), "W Z")
}

pub fn nc4(c: &ClassifierSnapshot, e: &EmbeddingSet) -> Result<f64> {
    if c.weight.cols() != e.dim() {
        return Err(Error::Shape {
            op: "nc4",
            lhs: c.weight.shape().to_vec(),
            rhs: vec![e.dim()],
        });
    }
    let mu_g = e.global_mean();
    let mut acc = 0.0;
    for (k, b) in c.bias.iter().enumerate() {
        let v = b + c.weight.row(k).iter().zip(&mu_g).map(|(w, m)| w * m).sum::<f64>();
        acc += v * v;
    }
    Ok(acc.sqrt())
}

/// `exp(−Σ pₖ log pₖ)` with `pₖ = σₖ / Σσ + ε` over the singular values of
/// the feature matrix. Singular values under the pseudo-inverse cutoff count
/// as structural zeros and are left out, so an exactly rank-r matrix scores r
/// whatever its ambient size.
pub fn rankme(features: &Tensor, epsilon: f64) -> Result<f64> {
    let sv = to_na(features).singular_values();
    let smax = sv.iter().copied().fold(0.0, f64::max);
    if !(smax > 0.0) {
        return Err(Error::domain("rankme of an all-zero matrix"));
    }
    let cutoff = features.rows().max(features.cols()) as f64 * smax * PINV_RCOND;
    let kept: Vec<f64> = sv.iter().copied().filter(|&s| s > cutoff).collect();
    let total: f64 = kept.iter().sum();
    let h: f64 = kept
        .iter()
        .map(|s| {
            let p = s / total + epsilon;
            -p * p.ln()
        })
        .sum();
    Ok(h.exp())
}

/// All metrics of one layer. With no classifier, `nc2`–`nc4` are NaN.
pub fn nc_report(e: &EmbeddingSet, classifier: Option<&ClassifierSnapshot>) -> Result<NcReport> {
    let (nc2v, nc3v, nc4v) = match classifier {
        Some(c) => (nc2(c)?, nc3(c, e)?, nc4(c, e)?),
        None => (f64::NAN, f64::NAN, f64::NAN),
    };
    Ok(NcReport {
        nc1: nc1(e)?,
        nc2: nc2v,
        nc3: nc3v,
        nc4: nc4v,
        rankme: rankme(&e.features, RANKME_EPSILON)?,
        entropy_est: crate::objective::knn_entropy_estimate(&e.features)?,
        class_means: Some(e.class_means()?),
        global_mean: e.global_mean(),
    })
}

/// Sample Pearson correlation.
pub fn pearson(x: &[f64], y: &[f64]) -> Result<f64> {
    if x.len() != y.len() || x.len() < 2 {
        return Err(Error::domain("pearson needs two equal-length sequences of length >= 2"));
    }
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return Err(Error::domain("pearson: zero variance input"));
    }
    Ok((sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0))
}

/// Min-max scaled values plus a flag set when the input is constant (then
/// every value maps to 0).
pub fn minmax_normalize(values: &[f64]) -> (Vec<f64>, bool) {
    let lo = values.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if values.is_empty() || hi == lo {
        return (vec![0.0; values.len()], true);
    }
    (values.iter().map(|v| (v - lo) / (hi - lo)).collect(), false)
}

/// Percentage change from the encoder value to the projector value.
pub fn pct_change(encoder_value: f64, projector_value: f64) -> Result<f64> {
    if encoder_value == 0.0 {
        return Err(Error::domain("percentage change from zero"));
    }
    Ok((projector_value - encoder_value) / encoder_value.abs() * 100.0)
}
