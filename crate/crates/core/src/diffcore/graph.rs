use super::tensor::{gemm_acc, gemm_tn_acc, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddRowVector(Var, Var),
    MulRowVector(Var, Var),
    Relu(Var),
    Log(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    RowSum(Var),
    RowL2Normalize { x: Var, eps: f64, norms: Vec<f64> },
    LogSumExp(Var),
    StandardizeRows { x: Var, inv_std: Vec<f64> },
    NearestDistance { x: Var, partner: Vec<Option<usize>> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Computation record for reverse-mode differentiation.
///
/// Nodes are appended in execution order, so the node list is already a
/// topological order and [`Graph::backward`] is a single reverse sweep.
/// Leaf gradients accumulate across `backward` calls until
/// [`Graph::zero_grad`] is called.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Leaf that receives a gradient.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of a leaf, if `backward` reached it.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad = None;
        }
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var], name: &str) -> Result<Var> {
        if !value.all_finite() {
            return Err(Error::NonFinite(name.to_string()));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let t = self.value(v);
        if t.shape().len() != 2 {
            return Err(Error::Shape {
                op,
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        }
        Ok((t.rows(), t.cols()))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let mut out = vec![0.0; m * n];
        gemm_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        self.push(Tensor::matrix(m, n, out), Op::MatMul(a, b), &[a, b], "matmul")
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        self.matrix_dims(x, "transpose")?;
        let t = self.value(x).transposed();
        self.push(t, Op::Transpose(x), &[x], "transpose")
    }

    pub fn reshape(&mut self, x: Var, shape: Vec<usize>) -> Result<Var> {
        let t = self.value(x).reshaped(shape)?;
        self.push(t, Op::Reshape(x), &[x], "reshape")
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    fn zip_with(&mut self, a: Var, b: Var, op: Op, name: &'static str, f: fn(f64, f64) -> f64) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let t = Tensor::new(ta.shape().to_vec(), data)?;
        self.push(t, op, &[a, b], name)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_with(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    fn map(&mut self, x: Var, op: Op, name: &'static str, f: impl Fn(f64) -> f64) -> Result<Var> {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        let t = Tensor::new(t.shape().to_vec(), data)?;
        self.push(t, op, &[x], name)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        self.map(x, Op::Scale(x, c), "scale", |v| v * c)
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Relu(x), "relu", |v| if v > 0.0 { v } else { 0.0 })
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Log(x), "log", f64::ln)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.map(x, Op::Square(x), "square", |v| v * v)
    }

    fn row_vector_check(&self, x: Var, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let (n, d) = self.matrix_dims(x, op)?;
        if self.value(v).numel() != d {
            return Err(Error::Shape {
                op,
                lhs: vec![n, d],
                rhs: self.value(v).shape().to_vec(),
            });
        }
        Ok((n, d))
    }

    /// `x[i, j] + v[j]`; the only broadcast the engine supports besides
    /// [`Graph::mul_row_vector`].
    pub fn add_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.row_vector_check(x, v, "add_row_vector")?;
        let (tx, tv) = (self.value(x).data(), self.value(v).data());
        let mut out = tx.to_vec();
        for row in out.chunks_mut(d) {
            for (o, b) in row.iter_mut().zip(tv) {
                *o += b;
            }
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::AddRowVector(x, v),
            &[x, v],
            "add_row_vector",
        )
    }

    /// `x[i, j] * v[j]`.
    pub fn mul_row_vector(&mut self, x: Var, v: Var) -> Result<Var> {
        let (n, d) = self.row_vector_check(x, v, "mul_row_vector")?;
        let (tx, tv) = (self.value(x).data(), self.value(v).data());
        let mut out = tx.to_vec();
        for row in out.chunks_mut(d) {
            for (o, s) in row.iter_mut().zip(tv) {
                *o *= s;
            }
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::MulRowVector(x, v),
            &[x, v],
            "mul_row_vector",
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x], "sum")
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x), &[x], "mean")
    }

    /// Per-row sum of an N×d matrix, giving a length-N vector.
    pub fn row_sum(&mut self, x: Var) -> Result<Var> {
        let (_, d) = self.matrix_dims(x, "row_sum")?;
        let out = self.value(x).data().chunks(d).map(|r| r.iter().sum()).collect();
        self.push(Tensor::vector(out), Op::RowSum(x), &[x], "row_sum")
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn row_l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        if !(eps > 0.0) {
            return Err(Error::domain("row_l2_normalize requires epsilon > 0"));
        }
        let (n, d) = self.matrix_dims(x, "row_l2_normalize")?;
        let mut out = self.value(x).data().to_vec();
        let mut norms = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            row.iter_mut().for_each(|v| *v /= denom);
            norms.push(norm);
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::RowL2Normalize { x, eps, norms },
            &[x],
            "row_l2_normalize",
        )
    }

    /// Row-wise `log Σₖ exp(x[i, k])`, evaluated with a max shift.
    pub fn log_sum_exp(&mut self, x: Var) -> Result<Var> {
        let (_, k) = self.matrix_dims(x, "log_sum_exp")?;
        let out = self.value(x).data().chunks(k).map(log_sum_exp_row).collect();
        self.push(Tensor::vector(out), Op::LogSumExp(x), &[x], "log_sum_exp")
    }

    /// Shifts each row to mean 0 and scales it by `1/sqrt(var + eps)` with the
    /// population variance.
    pub fn standardize_rows(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "standardize_rows")?;
        let mut out = self.value(x).data().to_vec();
        let mut inv_std = Vec::with_capacity(n);
        for row in out.chunks_mut(d) {
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let r = 1.0 / (var + eps).sqrt();
            row.iter_mut().for_each(|v| *v = (*v - mean) * r);
            inv_std.push(r);
        }
        self.push(
            Tensor::matrix(n, d, out),
            Op::StandardizeRows { x, inv_std },
            &[x],
            "standardize_rows",
        )
    }

    /// For each row, the Euclidean distance to its nearest other row, clamped
    /// below at `eps`. Ties resolve to the lowest row index; a clamped distance
    /// passes no gradient.
    pub fn nearest_distance(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.matrix_dims(x, "nearest_distance")?;
        if n < 2 {
            return Err(Error::domain("nearest_distance needs at least two rows"));
        }
        let data = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        let mut partner = Vec::with_capacity(n);
        for i in 0..n {
            let (j, dist) = nearest_other_row(data, n, d, i);
            if dist > eps {
                out.push(dist);
                partner.push(Some(j));
            } else {
                out.push(eps);
                partner.push(None);
            }
        }
        self.push(
            Tensor::vector(out),
            Op::NearestDistance { x, partner },
            &[x],
            "nearest_distance",
        )
    }

    /// Reverse sweep from a scalar root, accumulating into leaf gradients.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if !self.value(root).is_scalar() {
            return Err(Error::domain(format!(
                "backward root must be scalar, got shape {:?}",
                self.value(root).shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(vec![1.0]);

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else { continue };
            if !self.nodes[id].requires_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[id].op {
                let node = &mut self.nodes[id];
                match &mut node.grad {
                    Some(acc) => acc.data_mut().iter_mut().zip(&g).for_each(|(a, b)| *a += b),
                    None => node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?),
                }
                continue;
            }
            self.propagate(id, &g, &mut grads);
        }
        Ok(())
    }

    fn propagate(&self, id: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let out = &node.value;
        let mut send = |v: Var, f: &dyn Fn() -> Vec<f64>| {
            if self.nodes[v.0].requires_grad {
                let contrib = f();
                match &mut grads[v.0] {
                    Some(acc) => acc.iter_mut().zip(&contrib).for_each(|(a, b)| *a += b),
                    slot @ None => *slot = Some(contrib),
                }
            }
        };

        match &node.op {
            Op::Leaf => unreachable!(),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                // dA = dC·Bᵀ
                send(*a, &|| {
                    let bt = tb.transposed();
                    let mut da = vec![0.0; m * k];
                    gemm_acc(g, bt.data(), &mut da, m, n, k);
                    da
                });
                // dB = Aᵀ·dC
                send(*b, &|| {
                    let mut db = vec![0.0; k * n];
                    gemm_tn_acc(ta.data(), g, &mut db, m, k, n);
                    db
                });
            }
            Op::Transpose(x) => {
                let gt = Tensor::matrix(out.rows(), out.cols(), g.to_vec()).transposed();
                send(*x, &|| gt.data().to_vec());
            }
            Op::Reshape(x) => send(*x, &|| g.to_vec()),
            Op::Add(a, b) => {
                send(*a, &|| g.to_vec());
                send(*b, &|| g.to_vec());
            }
            Op::Sub(a, b) => {
                send(*a, &|| g.to_vec());
                send(*b, &|| g.iter().map(|v| -v).collect());
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &|| g.iter().zip(tb).map(|(g, y)| g * y).collect());
                send(*b, &|| g.iter().zip(ta).map(|(g, x)| g * x).collect());
            }
            Op::Scale(x, c) => send(*x, &|| g.iter().map(|v| v * c).collect()),
            Op::AddRowVector(x, v) => {
                let d = out.cols();
                send(*x, &|| g.to_vec());
                send(*v, &|| {
                    let mut dv = vec![0.0; d];
                    for row in g.chunks(d) {
                        dv.iter_mut().zip(row).for_each(|(a, b)| *a += b);
                    }
                    dv
                });
            }
            Op::MulRowVector(x, v) => {
                let d = out.cols();
                let (tx, tv) = (self.value(*x).data(), self.value(*v).data());
                send(*x, &|| {
                    g.chunks(d)
                        .flat_map(|row| row.iter().zip(tv).map(|(g, s)| g * s))
                        .collect()
                });
                send(*v, &|| {
                    let mut dv = vec![0.0; d];
                    for (grow, xrow) in g.chunks(d).zip(tx.chunks(d)) {
                        for ((a, gv), xv) in dv.iter_mut().zip(grow).zip(xrow) {
                            *a += gv * xv;
                        }
                    }
                    dv
                });
            }
            Op::Relu(x) => {
                let tx = self.value(*x).data();
                send(*x, &|| {
                    g.iter().zip(tx).map(|(g, &v)| if v > 0.0 { *g } else { 0.0 }).collect()
                });
            }
            Op::Log(x) => {
                let tx = self.value(*x).data();
                send(*x, &|| g.iter().zip(tx).map(|(g, v)| g / v).collect());
            }
            Op::Square(x) => {
                let tx = self.value(*x).data();
                send(*x, &|| g.iter().zip(tx).map(|(g, v)| 2.0 * g * v).collect());
            }
            Op::Sum(x) => {
                let n = self.value(*x).numel();
                send(*x, &|| vec![g[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).numel();
                send(*x, &|| vec![g[0] / n as f64; n]);
            }
            Op::RowSum(x) => {
                let d = self.value(*x).cols();
                send(*x, &|| g.iter().flat_map(|&gi| std::iter::repeat_n(gi, d)).collect());
            }
            Op::RowL2Normalize { x, eps, norms } => {
                let d = out.cols();
                send(*x, &|| {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, yrow), &norm) in g.chunks(d).zip(out.data().chunks(d)).zip(norms) {
                        if norm > *eps {
                            let gy: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| (gv - yv * gy) / norm));
                        } else {
                            dx.extend(grow.iter().map(|gv| gv / eps));
                        }
                    }
                    dx
                });
            }
            Op::LogSumExp(x) => {
                let tx = self.value(*x);
                let k = tx.cols();
                send(*x, &|| {
                    let mut dx = Vec::with_capacity(tx.numel());
                    for ((row, &lse), &gi) in tx.data().chunks(k).zip(out.data()).zip(g) {
                        dx.extend(row.iter().map(|v| gi * (v - lse).exp()));
                    }
                    dx
                });
            }
            Op::StandardizeRows { x, inv_std } => {
                let d = out.cols();
                send(*x, &|| {
                    let mut dx = Vec::with_capacity(g.len());
                    for ((grow, yrow), &r) in g.chunks(d).zip(out.data().chunks(d)).zip(inv_std) {
                        let gm = grow.iter().sum::<f64>() / d as f64;
                        let gym = grow.iter().zip(yrow).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        dx.extend(grow.iter().zip(yrow).map(|(gv, yv)| r * (gv - gm - yv * gym)));
                    }
                    dx
                });
            }
            Op::NearestDistance { x, partner } => {
                let tx = self.value(*x);
                let d = tx.cols();
                send(*x, &|| {
                    let mut dx = vec![0.0; tx.numel()];
                    for (i, p) in partner.iter().enumerate() {
                        let Some(j) = *p else { continue };
                        let scale = g[i] / out.data()[i];
                        for c in 0..d {
                            let diff = tx.data()[i * d + c] - tx.data()[j * d + c];
                            dx[i * d + c] += scale * diff;
                            dx[j * d + c] -= scale * diff;
                        }
                    }
                    dx
                });
            }
        }
    }
}

pub(crate) fn log_sum_exp_row(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Index and distance of the closest row to row `i`, lowest index on ties.
pub(crate) fn nearest_other_row(data: &[f64], n: usize, d: usize, i: usize) -> (usize, f64) {
    let ri = &data[i * d..(i + 1) * d];
    let mut best = (usize::MAX, f64::INFINITY);
    for j in 0..n {
        if j == i {
            continue;
        }
        let rj = &data[j * d..(j + 1) * d];
        let sq: f64 = ri.iter().zip(rj).map(|(a, b)| (a - b) * (a - b)).sum();
        if sq < best.1 {
            best = (j, sq);
        }
    }
    (best.0, best.1.sqrt())
}
