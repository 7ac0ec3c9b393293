//! Canonical simplex equiangular tight frames and the frozen projector built
//! from them.

use crate::diffcore::Tensor;
use crate::error::{Error, Result};

/// Order-`D` canonical simplex ETF, `sqrt(D/(D-1)) · (I - 11ᵀ/D)`.
#[derive(Clone, Debug, PartialEq)]
pub struct EtfMatrix {
    order: usize,
    matrix: Tensor,
}

impl EtfMatrix {
    pub fn order(&self) -> usize {
        self.order
    }

    pub fn matrix(&self) -> &Tensor {
        &self.matrix
    }

    pub fn into_tensor(self) -> Tensor {
        self.matrix
    }

    /// Leading `rows × cols` block; both must not exceed the order.
    pub fn block(&self, rows: usize, cols: usize) -> Tensor {
        assert!(rows <= self.order && cols <= self.order);
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            data.extend_from_slice(&self.matrix.row(i)[..cols]);
        }
        Tensor::matrix(rows, cols, data)
    }
}

pub fn simplex_etf(order: usize) -> Result<EtfMatrix> {
    if order < 2 {
        return Err(Error::domain(format!("simplex ETF needs order >= 2, got {order}")));
    }
    let d = order as f64;
    let scale = (d / (d - 1.0)).sqrt();
    let off = -scale / d;
    let diag = scale * (1.0 - 1.0 / d);
    let mut data = vec![off; order * order];
    for i in 0..order {
        data[i * order + i] = diag;
    }
    Ok(EtfMatrix {
        order,
        matrix: Tensor::matrix(order, order, data),
    })
}

/// Weights of the frozen two-layer projector.
#[derive(Clone, Debug, PartialEq)]
pub struct FrozenProjector {
    /// `d_hidden × d_in`
    pub first: Tensor,
    /// `d_out × d_hidden`
    pub second: Tensor,
}

/// Each weight is the leading block of the canonical ETF whose order is the
/// larger of the weight's two dimensions. No biases.
pub fn make_frozen_projector(d_in: usize, d_hidden: usize, d_out: usize) -> Result<FrozenProjector> {
    if d_in < 2 || d_hidden < 2 || d_out < 2 {
        return Err(Error::domain(format!(
            "projector dims must be >= 2, got {d_in}->{d_hidden}->{d_out}"
        )));
    }
    Ok(FrozenProjector {
        first: etf_weight(d_hidden, d_in)?,
        second: etf_weight(d_out, d_hidden)?,
    })
}

/// `rows × cols` weight cut from the ETF of order `max(rows, cols)`.
pub fn etf_weight(rows: usize, cols: usize) -> Result<Tensor> {
    Ok(simplex_etf(rows.max(cols))?.block(rows, cols))
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EtfCheck {
    pub unit_norm_ok: bool,
    pub equiangular_ok: bool,
    pub max_deviation: f64,
}

impl EtfCheck {
    pub fn ok(&self) -> bool {
        self.unit_norm_ok && self.equiangular_ok
    }
}

/// Checks the equinorm / equiangular pattern of an ETF or a leading block of
/// one.
///
/// The parent order is `max(rows, cols)`. For square and tall blocks the
/// columns are full-length frame vectors; for wide blocks the rows are (the
/// canonical ETF is symmetric). Those vectors must have unit norm and pairwise
/// inner product `-1/(D-1)`.
pub fn verify_etf(m: &Tensor, tol: f64) -> EtfCheck {
    let (rows, cols) = (m.rows(), m.cols());
    let order = rows.max(cols);
    let vectors: Vec<Vec<f64>> = if rows >= cols {
        (0..cols).map(|j| (0..rows).map(|i| m.get(i, j)).collect()).collect()
    } else {
        (0..rows).map(|i| m.row(i).to_vec()).collect()
    };
    let target = if order > 1 { -1.0 / (order as f64 - 1.0) } else { 0.0 };

    let mut norm_dev: f64 = 0.0;
    let mut angle_dev: f64 = 0.0;
    for (a, va) in vectors.iter().enumerate() {
        let nn: f64 = va.iter().map(|v| v * v).sum();
        norm_dev = norm_dev.max((nn.sqrt() - 1.0).abs());
        for vb in &vectors[a + 1..] {
            let ip: f64 = va.iter().zip(vb).map(|(x, y)| x * y).sum();
            angle_dev = angle_dev.max((ip - target).abs());
        }
    }
    EtfCheck {
        unit_norm_ok: norm_dev <= tol,
        equiangular_ok: angle_dev <= tol,
        max_deviation: norm_dev.max(angle_dev),
    }
}

/// CSV text with one matrix row per line, no header.
pub fn to_csv(m: &Tensor) -> String {
    let mut out = String::new();
    for i in 0..m.rows() {
        let line: Vec<String> = m.row(i).iter().map(|v| v.to_string()).collect();
        out.push_str(&line.join(","));
        out.push('\n');
    }
    out
}
