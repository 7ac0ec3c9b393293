//! Normalization layers, both as graph builders used by the model and as
//! standalone functions on plain tensors.

use crate::diffcore::{Graph, Tensor, Var};
use crate::error::{Error, Result};

pub const GROUP_NORM_EPS: f64 = 1e-5;
pub const BATCH_NORM_EPS: f64 = 1e-5;
pub const WEIGHT_STANDARDIZE_EPS: f64 = 1e-8;

/// Largest group count `<= 32` that divides `dim` with at least four channels
/// per group; single-channel groups would standardize every activation to 0.
pub fn default_groups(dim: usize) -> usize {
    (1..=dim.min(32))
        .rev()
        .find(|g| dim.is_multiple_of(*g) && dim / g >= 4)
        .unwrap_or(1)
}

pub(crate) fn group_norm_graph(g: &mut Graph, x: Var, groups: usize, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
    let (n, d) = (g.value(x).rows(), g.value(x).cols());
    if groups == 0 || d % groups != 0 {
        return Err(Error::Spec(format!(
            "group_norm: dim {d} not divisible by {groups} groups"
        )));
    }
    let grouped = g.reshape(x, vec![n * groups, d / groups])?;
    let z = g.standardize_rows(grouped, eps)?;
    let z = g.reshape(z, vec![n, d])?;
    let z = g.mul_row_vector(z, gamma)?;
    g.add_row_vector(z, beta)
}

pub fn group_norm(x: &Tensor, groups: usize, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let y = group_norm_graph(&mut g, vx, groups, vg, vb, eps)?;
    Ok(g.value(y).clone())
}

pub fn weight_standardize(w: &Tensor, eps: f64) -> Result<Tensor> {
    let mut g = Graph::new();
    let v = g.constant(w.clone());
    let y = g.standardize_rows(v, eps)?;
    Ok(g.value(y).clone())
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics of one batch-norm layer.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(dim: usize) -> Self {
        Self {
            running_mean: vec![0.0; dim],
            running_var: vec![1.0; dim],
        }
    }
}

/// Per-feature (mean, variance) of a batch.
pub(crate) type Moments = (Vec<f64>, Vec<f64>);

/// Batch mean and unbiased variance per feature.
pub(crate) fn batch_moments(x: &Tensor) -> Moments {
    let (n, d) = (x.rows(), x.cols());
    let mut mean = vec![0.0; d];
    for row in x.data().chunks(d) {
        mean.iter_mut().zip(row).for_each(|(m, v)| *m += v);
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);
    let mut var = vec![0.0; d];
    for row in x.data().chunks(d) {
        for ((s, v), m) in var.iter_mut().zip(row).zip(&mean) {
            *s += (v - m) * (v - m);
        }
    }
    let denom = (n.max(2) - 1) as f64;
    var.iter_mut().for_each(|s| *s /= denom);
    (mean, var)
}

/// Batch norm on the graph. In train mode the batch is standardized with its
/// own (population) statistics and the returned moments are for the running
/// update; in eval mode the running statistics are used.
pub(crate) fn batch_norm_graph(
    g: &mut Graph,
    x: Var,
    state: &BatchNormState,
    gamma: Var,
    beta: Var,
    mode: Mode,
    eps: f64,
) -> Result<(Var, Option<Moments>)> {
    let n = g.value(x).rows();
    let (z, moments) = match mode {
        Mode::Train => {
            if n < 2 {
                return Err(Error::domain("batch_norm in train mode needs at least 2 samples"));
            }
            let moments = batch_moments(g.value(x));
            let t = g.transpose(x)?;
            let t = g.standardize_rows(t, eps)?;
            (g.transpose(t)?, Some(moments))
        }
        Mode::Eval => {
            let scale: Vec<f64> = state.running_var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
            let shift: Vec<f64> = state.running_mean.iter().zip(&scale).map(|(m, s)| -m * s).collect();
            let vs = g.constant(Tensor::vector(scale));
            let vh = g.constant(Tensor::vector(shift));
            let z = g.mul_row_vector(x, vs)?;
            (g.add_row_vector(z, vh)?, None)
        }
    };
    let z = g.mul_row_vector(z, gamma)?;
    Ok((g.add_row_vector(z, beta)?, moments))
}

/// Standalone batch norm; updates `state` with `momentum` in train mode.
pub fn batch_norm(
    x: &Tensor,
    state: &mut BatchNormState,
    gamma: &Tensor,
    beta: &Tensor,
    mode: Mode,
    momentum: f64,
    eps: f64,
) -> Result<Tensor> {
    let mut g = Graph::new();
    let (vx, vg, vb) = (
        g.constant(x.clone()),
        g.constant(gamma.clone()),
        g.constant(beta.clone()),
    );
    let (y, moments) = batch_norm_graph(&mut g, vx, state, vg, vb, mode, eps)?;
    if let Some((mean, var)) = moments {
        update_running(state, &mean, &var, momentum);
    }
    Ok(g.value(y).clone())
}

pub(crate) fn update_running(state: &mut BatchNormState, mean: &[f64], var: &[f64], momentum: f64) {
    for (r, m) in state.running_mean.iter_mut().zip(mean) {
        *r = (1.0 - momentum) * *r + momentum * m;
    }
    for (r, v) in state.running_var.iter_mut().zip(var) {
        *r = (1.0 - momentum) * *r + momentum * v;
    }
}
