use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::{seed, Dataset, Provenance, Split};
use crate::diffcore::{gemm_acc, Tensor};
use crate::error::{Error, Result};

/// Fixed random two-layer map `x + s·W₂ tanh(W₁ x)` shared by every dataset
/// generated with the same warp seed. `W₁` has entries of standard deviation
/// `gain/√d` and `W₂` of `1/√hidden`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpSpec {
    pub seed: u64,
    pub hidden: usize,
    pub strength: f64,
    /// Scale of the first layer's weights.
    #[serde(default = "default_gain")]
    pub gain: f64,
}

fn default_gain() -> f64 {
    1.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BlobSpec {
    pub num_classes: usize,
    pub dim: usize,
    /// Class means are placed on the sphere of this radius.
    pub radius: f64,
    /// Within-class standard deviation per coordinate.
    pub sigma: f64,
    /// Class means span only the first `latent_dim` coordinates when set;
    /// noise is always full-dimensional.
    #[serde(default)]
    pub latent_dim: Option<usize>,
    /// Class priors; `None` means uniform.
    #[serde(default)]
    pub priors: Option<Vec<f64>>,
    #[serde(default)]
    pub warp: Option<WarpSpec>,
}

impl BlobSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.dim == 0 {
            return Err(Error::Config(
                "blob spec needs at least one class and one dimension".into(),
            ));
        }
        if !(self.radius > 0.0) || !(self.sigma >= 0.0) {
            return Err(Error::Config("blob spec needs radius > 0 and sigma >= 0".into()));
        }
        if let Some(m) = self.latent_dim {
            if m == 0 || m > self.dim {
                return Err(Error::Config(format!("latent_dim must be in 1..={}", self.dim)));
            }
        }
        if let Some(p) = &self.priors {
            if p.len() != self.num_classes || p.iter().any(|&v| v < 0.0) || (p.iter().sum::<f64>() - 1.0).abs() > 1e-12
            {
                return Err(Error::Config(
                    "priors must be nonnegative, one per class, and sum to 1".into(),
                ));
            }
        }
        Ok(())
    }

    fn priors(&self) -> Vec<f64> {
        self.priors
            .clone()
            .unwrap_or_else(|| vec![1.0 / self.num_classes as f64; self.num_classes])
    }
}

#[derive(Clone, Debug)]
pub struct Warp {
    first: Tensor,
    second: Tensor,
    strength: f64,
}

impl Warp {
    pub fn new(spec: &WarpSpec, dim: usize) -> Self {
        let mut rng = seed::rng(spec.seed, "warp");
        let mut draw =
            |n: usize, sd: f64| -> Vec<f64> { (0..n).map(|_| sd * rng.sample::<f64, _>(StandardNormal)).collect() };
        // first: dim×hidden (applied as x·first), second: hidden×dim
        let first = Tensor::matrix(
            dim,
            spec.hidden,
            draw(dim * spec.hidden, spec.gain / (dim as f64).sqrt()),
        );
        let second = Tensor::matrix(
            spec.hidden,
            dim,
            draw(spec.hidden * dim, 1.0 / (spec.hidden as f64).sqrt()),
        );
        Self {
            first,
            second,
            strength: spec.strength,
        }
    }

    pub fn apply(&self, x: &Tensor) -> Tensor {
        let (n, d) = (x.rows(), x.cols());
        let h = self.first.cols();
        let mut hidden = vec![0.0; n * h];
        gemm_acc(x.data(), self.first.data(), &mut hidden, n, d, h);
        hidden.iter_mut().for_each(|v| *v = v.tanh());
        let mut out = vec![0.0; n * d];
        gemm_acc(&hidden, self.second.data(), &mut out, n, h, d);
        let data = x.data().iter().zip(&out).map(|(a, b)| a + self.strength * b).collect();
        Tensor::matrix(n, d, data)
    }
}

/// Largest-remainder rounding of `n · priors`.
fn class_counts(priors: &[f64], n: usize) -> Vec<usize> {
    let raw: Vec<f64> = priors.iter().map(|p| p * n as f64).collect();
    let mut counts: Vec<usize> = raw.iter().map(|r| r.floor() as usize).collect();
    let mut rest = n - counts.iter().sum::<usize>();
    let mut order: Vec<usize> = (0..priors.len()).collect();
    order.sort_by(|&a, &b| {
        let (fa, fb) = (raw[a] - raw[a].floor(), raw[b] - raw[b].floor());
        fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
    });
    for &i in order.iter().cycle() {
        if rest == 0 {
            break;
        }
        counts[i] += 1;
        rest -= 1;
    }
    counts
}

fn place_means(spec: &BlobSpec, rng: &mut impl Rng) -> Tensor {
    let mut data = Vec::with_capacity(spec.num_classes * spec.dim);
    for _ in 0..spec.num_classes {
        let m = spec.latent_dim.unwrap_or(spec.dim);
        let v: Vec<f64> = (0..spec.dim)
            .map(|j| if j < m { rng.sample(StandardNormal) } else { 0.0 })
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(1e-300);
        data.extend(v.iter().map(|x| spec.radius * x / norm));
    }
    Tensor::matrix(spec.num_classes, spec.dim, data)
}

fn sample(spec: &BlobSpec, means: &Tensor, n: usize, seed_value: u64) -> Result<Dataset> {
    let counts = class_counts(&spec.priors(), n);
    let mut rng = seed::rng(seed_value, "samples");
    let mut data = Vec::with_capacity(n * spec.dim);
    let mut labels = Vec::with_capacity(n);
    for (class, &count) in counts.iter().enumerate() {
        for _ in 0..count {
            for &m in means.row(class) {
                let z: f64 = rng.sample(StandardNormal);
                data.push(m + spec.sigma * z);
            }
            labels.push(class);
        }
    }
    let mut features = Tensor::matrix(n, spec.dim, data);
    if let Some(w) = &spec.warp {
        features = Warp::new(w, spec.dim).apply(&features);
    }
    let mut ds = Dataset::new(features, labels, Split::IdTrain, Provenance::Synthetic)?;
    ds.num_classes = spec.num_classes;
    ds.seed = Some(seed_value);
    Ok(ds)
}

/// Samples `n` points from the mixture described by `spec`.
pub fn gen_gaussian_mixture(spec: &BlobSpec, n: usize, seed_value: u64) -> Result<Dataset> {
    spec.validate()?;
    if n < spec.num_classes {
        return Err(Error::domain(format!(
            "need at least one sample per class: n={n} < K={}",
            spec.num_classes
        )));
    }
    let means = place_means(spec, &mut seed::rng(seed_value, "means"));
    sample(spec, &means, n, seed_value)
}

/// An ID dataset and OOD datasets whose class means are disjoint from it.
#[derive(Clone, Debug)]
pub struct IdOodData {
    pub id: Dataset,
    pub oods: Vec<Dataset>,
    pub id_means: Tensor,
    pub ood_means: Vec<Tensor>,
}

impl IdOodData {
    /// Smallest distance between an ID class mean and any OOD class mean.
    pub fn min_mean_separation(&self) -> f64 {
        let mut best = f64::INFINITY;
        for om in &self.ood_means {
            for i in 0..self.id_means.rows() {
                for j in 0..om.rows() {
                    let d: f64 = self
                        .id_means
                        .row(i)
                        .iter()
                        .zip(om.row(j))
                        .map(|(a, b)| (a - b) * (a - b))
                        .sum();
                    best = best.min(d.sqrt());
                }
            }
        }
        best
    }
}

/// Generates an ID mixture and OOD mixtures from independent sub-seeds.
/// OOD datasets are tagged [`Split::Ood`].
pub fn gen_id_ood(
    id_spec: &BlobSpec,
    n_id: usize,
    ood_specs: &[(BlobSpec, usize)],
    seed_value: u64,
) -> Result<IdOodData> {
    id_spec.validate()?;
    let id_seed = seed::derive_seed(seed_value, "id");
    let id_means = place_means(id_spec, &mut seed::rng(id_seed, "means"));
    let id = sample(id_spec, &id_means, n_id, id_seed)?;
    let mut oods = Vec::new();
    let mut ood_means = Vec::new();
    for (i, (spec, n)) in ood_specs.iter().enumerate() {
        spec.validate()?;
        if spec.dim != id_spec.dim {
            return Err(Error::Config(
                "OOD and ID mixtures must share the input dimension".into(),
            ));
        }
        let s = seed::derive_seed(seed_value, &format!("ood/{i}"));
        let means = place_means(spec, &mut seed::rng(s, "means"));
        oods.push(sample(spec, &means, *n, s)?.with_split(Split::Ood));
        ood_means.push(means);
    }
    let data = IdOodData {
        id,
        oods,
        id_means,
        ood_means,
    };
    if data.min_mean_separation() <= 0.0 {
        return Err(Error::domain("ID and OOD class means coincide"));
    }
    Ok(data)
}
