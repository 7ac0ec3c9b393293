//! Independent reference implementations shared by the integration tests.
//! Nothing here calls into the metric code it checks.

#![allow(dead_code, clippy::needless_range_loop)]

use ncc::diffcore::{Graph, Tensor, Var};
use ncc::Result;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(
        rows,
        cols,
        (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
}

/// Labels covering every class at least once, then uniform.
pub fn random_labels(rng: &mut ChaCha8Rng, n: usize, k: usize) -> Vec<usize> {
    (0..n).map(|i| if i < k { i } else { rng.random_range(0..k) }).collect()
}

type Mat = Vec<Vec<f64>>;

fn zeros(r: usize, c: usize) -> Mat {
    vec![vec![0.0; c]; r]
}

fn mat_mul(a: &Mat, b: &Mat) -> Mat {
    let mut out = zeros(a.len(), b[0].len());
    for i in 0..a.len() {
        for j in 0..b[0].len() {
            for (t, bt) in b.iter().enumerate() {
                out[i][j] += a[i][t] * bt[j];
            }
        }
    }
    out
}

fn transpose(a: &Mat) -> Mat {
    (0..a[0].len()).map(|j| a.iter().map(|r| r[j]).collect()).collect()
}

/// Cyclic Jacobi eigen-decomposition of a symmetric matrix. Returns
/// (eigenvalues, eigenvectors as columns).
pub fn jacobi_eigen(m: &Mat) -> (Vec<f64>, Mat) {
    let n = m.len();
    let mut a = m.clone();
    let mut v = zeros(n, n);
    for (i, row) in v.iter_mut().enumerate() {
        row[i] = 1.0;
    }
    for _sweep in 0..100 {
        let off: f64 = (0..n)
            .flat_map(|i| (0..n).filter(move |&j| j != i).map(move |j| (i, j)))
            .map(|(i, j)| a[i][j] * a[i][j])
            .sum();
        let scale: f64 = (0..n).map(|i| a[i][i] * a[i][i]).sum::<f64>().max(1e-300);
        if off <= 1e-30 * scale {
            break;
        }
        for p in 0..n {
            for q in p + 1..n {
                if a[p][q].abs() < 1e-300 {
                    continue;
                }
                let theta = (a[q][q] - a[p][p]) / (2.0 * a[p][q]);
                let t = theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt());
                let t = if theta == 0.0 { 1.0 } else { t };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    let (akp, akq) = (a[k][p], a[k][q]);
                    a[k][p] = c * akp - s * akq;
                    a[k][q] = s * akp + c * akq;
                }
                for k in 0..n {
                    let (apk, aqk) = (a[p][k], a[q][k]);
                    a[p][k] = c * apk - s * aqk;
                    a[q][k] = s * apk + c * aqk;
                }
                for row in v.iter_mut() {
                    let (vkp, vkq) = (row[p], row[q]);
                    row[p] = c * vkp - s * vkq;
                    row[q] = s * vkp + c * vkq;
                }
            }
        }
    }
    ((0..n).map(|i| a[i][i]).collect(), v)
}

/// Pseudo-inverse of a symmetric PSD matrix through its eigenvalues.
pub fn psd_pinv(m: &Mat) -> Mat {
    let (vals, vecs) = jacobi_eigen(m);
    let top = vals.iter().fold(0.0f64, |a, &b| a.max(b.abs()));
    let n = m.len();
    let mut out = zeros(n, n);
    for (k, &lam) in vals.iter().enumerate() {
        if lam.abs() <= top * 1e-10 {
            continue;
        }
        for i in 0..n {
            for j in 0..n {
                out[i][j] += vecs[i][k] * vecs[j][k] / lam;
            }
        }
    }
    out
}

fn rows_of(t: &Tensor) -> Mat {
    (0..t.rows()).map(|i| t.row(i).to_vec()).collect()
}

pub struct NaiveNc {
    pub nc1: f64,
    pub nc2: f64,
    pub nc3: f64,
    pub nc4: f64,
}

fn normalized_etf_gap(m: &Mat) -> f64 {
    let k = m.len();
    let norm: f64 = m.iter().flatten().map(|v| v * v).sum::<f64>().sqrt();
    let mut acc = 0.0;
    for i in 0..k {
        for j in 0..k {
            let id = if i == j { 1.0 } else { 0.0 };
            let target = (id - 1.0 / k as f64) / ((k - 1) as f64).sqrt();
            acc += (m[i][j] / norm - target).powi(2);
        }
    }
    acc.sqrt()
}

/// All four collapse statistics by direct loops over the definitions.
pub fn naive_nc(z: &Tensor, labels: &[usize], k: usize, w: &Tensor, b: &[f64]) -> NaiveNc {
    let (n, d) = (z.rows(), z.cols());
    let x = rows_of(z);
    let mut mu_g = vec![0.0; d];
    for row in &x {
        for j in 0..d {
            mu_g[j] += row[j] / n as f64;
        }
    }
    let mut means = zeros(k, d);
    let mut counts = vec![0usize; k];
    for (row, &l) in x.iter().zip(labels) {
        counts[l] += 1;
        for j in 0..d {
            means[l][j] += row[j];
        }
    }
    for c in 0..k {
        for j in 0..d {
            means[c][j] /= counts[c] as f64;
        }
    }
    let mut sw = zeros(d, d);
    for (row, &l) in x.iter().zip(labels) {
        for i in 0..d {
            for j in 0..d {
                sw[i][j] += (row[i] - means[l][i]) * (row[j] - means[l][j]) / n as f64;
            }
        }
    }
    let mut sb = zeros(d, d);
    for mc in &means {
        for i in 0..d {
            for j in 0..d {
                sb[i][j] += (mc[i] - mu_g[i]) * (mc[j] - mu_g[j]) / k as f64;
            }
        }
    }
    let prod = mat_mul(&sw, &psd_pinv(&sb));
    let nc1 = (0..d).map(|i| prod[i][i]).sum::<f64>() / k as f64;

    let wm = rows_of(w);
    let nc2 = normalized_etf_gap(&mat_mul(&wm, &transpose(&wm)));
    let zc: Mat = (0..d)
        .map(|j| (0..k).map(|c| means[c][j] - mu_g[j]).collect())
        .collect();
    let nc3 = normalized_etf_gap(&mat_mul(&wm, &zc));
    let nc4 = (0..k)
        .map(|c| {
            let v = b[c] + (0..d).map(|j| wm[c][j] * mu_g[j]).sum::<f64>();
            v * v
        })
        .sum::<f64>()
        .sqrt();
    NaiveNc { nc1, nc2, nc3, nc4 }
}

/// FPR at `num/den` TPR by enumerating every candidate threshold, with
/// integer arithmetic for the TPR constraint.
pub fn brute_force_fpr(id: &[f64], ood: &[f64], num: usize, den: usize) -> (f64, f64) {
    let mut candidates: Vec<f64> = id.iter().chain(ood).copied().collect();
    candidates.sort_by(|a, b| a.total_cmp(b));
    let mut best: Option<f64> = None;
    for &t in &candidates {
        let tp = id.iter().filter(|&&s| s >= t).count();
        if tp * den >= num * id.len() {
            best = Some(best.map_or(t, |b: f64| b.max(t)));
        }
    }
    let t = best.expect("the smallest ID score always qualifies");
    let fp = ood.iter().filter(|&&s| s >= t).count();
    (t, fp as f64 / ood.len() as f64)
}

/// ‖a − b‖ / max(‖a‖, ‖b‖), or ‖a − b‖ when both are tiny.
pub fn rel_err(a: &[f64], b: &[f64]) -> f64 {
    let num = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
    let den = a
        .iter()
        .map(|x| x * x)
        .sum::<f64>()
        .sqrt()
        .max(b.iter().map(|x| x * x).sum::<f64>().sqrt());
    if den < 1e-10 {
        num
    } else {
        num / den
    }
}

pub const FD_STEP: f64 = 1e-5;

/// Worst relative error between reverse-mode and central-difference
/// gradients of the scalar built by `f` with respect to each input.
pub fn grad_check(inputs: &[Tensor], f: &dyn Fn(&mut Graph, &[Var]) -> Result<Var>) -> f64 {
    let eval = |xs: &[Tensor]| -> f64 {
        let mut g = Graph::new();
        let vars: Vec<Var> = xs.iter().map(|t| g.constant(t.clone())).collect();
        let y = f(&mut g, &vars).unwrap();
        g.value(y).item()
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.param(t.clone())).collect();
    let y = f(&mut g, &vars).unwrap();
    g.backward(y).unwrap();
    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(|t| t.data().to_vec())
            .unwrap_or(vec![0.0; inputs[i].numel()]);
        let mut numeric = vec![0.0; inputs[i].numel()];
        for (j, slot) in numeric.iter_mut().enumerate() {
            let mut plus = inputs.to_vec();
            plus[i].data_mut()[j] += FD_STEP;
            let mut minus = inputs.to_vec();
            minus[i].data_mut()[j] -= FD_STEP;
            *slot = (eval(&plus) - eval(&minus)) / (2.0 * FD_STEP);
        }
        worst = worst.max(rel_err(&analytic, &numeric));
    }
    worst
}
