//! Dense tensors with tape-based reverse-mode differentiation.
//!
//! The engine covers exactly the primitives the networks and losses in this
//! crate need. Broadcasting is limited to row-vector add/multiply.

mod graph;
mod tensor;

pub use graph::{Graph, Var};
pub use tensor::Tensor;

pub(crate) use graph::{log_sum_exp_row, nearest_other_row};
pub(crate) use tensor::gemm_acc;

/// Default clamp for [`Graph::row_l2_normalize`].
pub const NORMALIZE_EPS: f64 = 1e-12;

/// Row-wise log-sum-exp on plain values, for callers that do not need a graph.
pub fn log_sum_exp(logits: &Tensor) -> Vec<f64> {
    logits.data().chunks(logits.cols()).map(log_sum_exp_row).collect()
}

/// Plain `a · b` without recording.
pub fn matmul(a: &Tensor, b: &Tensor) -> crate::Result<Tensor> {
    let mut g = Graph::new();
    let (va, vb) = (g.constant(a.clone()), g.constant(b.clone()));
    let c = g.matmul(va, vb)?;
    Ok(g.value(c).clone())
}
