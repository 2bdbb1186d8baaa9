//! The recording tape and its operations.

use std::f64::consts::{FRAC_1_SQRT_2, PI};

use statrs::function::erf::erf;

use super::kernels::gemm;
use super::{DiffError, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, f64),
    Shift(Var),
    Exp(Var),
    Log(Var),
    Abs(Var),
    Pow(Var, f64),
    Sigmoid(Var),
    Softplus(Var),
    LeakyRelu(Var, f64),
    Gelu(Var),
    Clamp(Var, f64, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Sum(Var, Option<usize>),
    Mean(Var, Option<usize>),
    LogSumExp(Var, usize),
    Concat(Vec<Var>, usize),
    MeanCenter(Var),
    BatchNorm { x: Var, gamma: Var, beta: Var, xhat: Vec<f64>, inv_std: Vec<f64>, train: bool },
    GatherRows(Var, Vec<usize>),
    OffDiagonal(Var),
    PairwiseLp { a: Var, b: Var, beta: f64, inv_scale: Vec<f64> },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Neg(_) => "neg",
            Op::Scale(..) => "scale",
            Op::Shift(_) => "shift",
            Op::Exp(_) => "exp",
            Op::Log(_) => "log",
            Op::Abs(_) => "abs",
            Op::Pow(..) => "pow",
            Op::Sigmoid(_) => "sigmoid",
            Op::Softplus(_) => "softplus",
            Op::LeakyRelu(..) => "leaky_relu",
            Op::Gelu(_) => "gelu",
            Op::Clamp(..) => "clamp",
            Op::MatMul(..) => "matmul",
            Op::Transpose(_) => "transpose",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::LogSumExp(..) => "logsumexp",
            Op::Concat(..) => "concat",
            Op::MeanCenter(_) => "mean_center",
            Op::BatchNorm { .. } => "batch_norm",
            Op::GatherRows(..) => "gather_rows",
            Op::OffDiagonal(_) => "off_diagonal",
            Op::PairwiseLp { .. } => "pairwise_lp",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

/// Per-column batch statistics from a training-mode batch norm.
#[derive(Clone, Debug, PartialEq)]
pub struct BatchStats {
    pub mean: Vec<f64>,
    /// Unbiased (n - 1) variance, the estimate fed to running statistics.
    pub var: Vec<f64>,
}

/// Gradients of a scalar with respect to the tracked leaves of a graph.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A define-by-run computation graph. Node ids are assigned in creation
/// order, which is a valid topological order.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn gelu_cdf(x: f64) -> f64 {
    0.5 * (1.0 + erf(x * FRAC_1_SQRT_2))
}

fn gelu_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * PI).sqrt()
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Output dims of a broadcast between two rank-2 views, or `None` when the
/// pair is neither equal, scalar, nor singleton-broadcastable.
fn broadcast_dims(a: (usize, usize), b: (usize, usize)) -> Option<(usize, usize)> {
    let dim = |x: usize, y: usize| match (x, y) {
        _ if x == y => Some(x),
        (1, y) => Some(y),
        (x, 1) => Some(x),
        _ => None,
    };
    Some((dim(a.0, b.0)?, dim(a.1, b.1)?))
}

/// Sums a full-size gradient down to a broadcast operand's dims.
fn reduce_to(grad: Vec<f64>, out: (usize, usize), target: (usize, usize)) -> Vec<f64> {
    if out == target {
        return grad;
    }
    let (tr, tc) = target;
    let mut acc = vec![0.0; tr * tc];
    for i in 0..out.0 {
        let ti = if tr == 1 { 0 } else { i };
        for j in 0..out.1 {
            let tj = if tc == 1 { 0 } else { j };
            acc[ti * tc + tj] += grad[i * out.1 + j];
        }
    }
    acc
}

fn add_into(slot: &mut Option<Tensor>, delta: Tensor) {
    match slot {
        Some(t) => t.data_mut().iter_mut().zip(delta.data()).for_each(|(a, b)| *a += b),
        None => *slot = Some(delta),
    }
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A tracked leaf: gradients are reported for it.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: true });
        Var(self.nodes.len() - 1)
    }

    /// An untracked leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, tracked: false });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var, DiffError> {
        if !value.all_finite() {
            return Err(DiffError::NonFinite { op: op.name() });
        }
        let tracked = inputs.iter().any(|v| self.nodes[v.0].tracked);
        self.nodes.push(Node { value, op, tracked });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, x: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let value = self.value(x).map(f);
        self.push(value, op, &[x])
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var, DiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let value = if ta.shape() == tb.shape() {
            ta.zip_map(tb, f)?
        } else {
            let (da, db) = (ta.dims2(), tb.dims2());
            let out = broadcast_dims(da, db).ok_or_else(|| {
                DiffError::Shape(format!(
                    "{}: cannot broadcast {:?} with {:?}",
                    op.name(),
                    ta.shape(),
                    tb.shape()
                ))
            })?;
            let mut data = Vec::with_capacity(out.0 * out.1);
            let (xa, xb) = (ta.data(), tb.data());
            for i in 0..out.0 {
                let ia = if da.0 == 1 { 0 } else { i };
                let ib = if db.0 == 1 { 0 } else { i };
                for j in 0..out.1 {
                    let ja = if da.1 == 1 { 0 } else { j };
                    let jb = if db.1 == 1 { 0 } else { j };
                    data.push(f(xa[ia * da.1 + ja], xb[ib * db.1 + jb]));
                }
            }
            Tensor::matrix(out.0, out.1, data)?
        };
        self.push(value, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Neg(x), |v| -v)
    }

    /// Multiplies by a constant.
    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(x, Op::Scale(x, c), |v| c * v)
    }

    /// Adds a constant.
    pub fn shift(&mut self, x: Var, c: f64) -> Result<Var, DiffError> {
        self.unary(x, Op::Shift(x), |v| v + c)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Exp(x), f64::exp)
    }

    pub fn log(&mut self, x: Var) -> Result<Var, DiffError> {
        if let Some(bad) = self.value(x).data().iter().find(|&&v| v <= 0.0) {
            return Err(DiffError::Domain(format!("log of non-positive value {bad}")));
        }
        self.unary(x, Op::Log(x), f64::ln)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Abs(x), f64::abs)
    }

    /// `x^p` for a constant exponent. Negative bases need an integer
    /// exponent; zero needs a non-negative one.
    pub fn pow(&mut self, x: Var, p: f64) -> Result<Var, DiffError> {
        let integral = p.fract() == 0.0;
        for &v in self.value(x).data() {
            if (v < 0.0 && !integral) || (v == 0.0 && p < 0.0) {
                return Err(DiffError::Domain(format!("pow({v}, {p}) is undefined")));
            }
        }
        let f = move |v: f64| if integral && p.abs() < 64.0 { v.powi(p as i32) } else { v.powf(p) };
        self.unary(x, Op::Pow(x, p), f)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    /// `ln(1 + e^x)` evaluated without overflow.
    pub fn softplus(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Softplus(x), softplus)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, DiffError> {
        self.unary(x, Op::LeakyRelu(x, slope), move |v| if v >= 0.0 { v } else { slope * v })
    }

    /// Exact GELU, `x Φ(x)` with the Gaussian CDF.
    pub fn gelu(&mut self, x: Var) -> Result<Var, DiffError> {
        self.unary(x, Op::Gelu(x), |v| v * gelu_cdf(v))
    }

    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, DiffError> {
        if lo > hi {
            return Err(DiffError::Domain(format!("clamp bounds [{lo}, {hi}] are empty")));
        }
        self.unary(x, Op::Clamp(x, lo, hi), move |v| v.clamp(lo, hi))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let value = self.value(a).matmul(self.value(b))?;
        self.push(value, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var, DiffError> {
        let value = self.value(x).transpose();
        self.push(value, Op::Transpose(x), &[x])
    }

    fn check_axis(&self, x: Var, axis: usize) -> Result<(), DiffError> {
        let rank = self.value(x).shape().len().max(2);
        if axis >= 2 {
            return Err(DiffError::Axis { axis, rank });
        }
        Ok(())
    }

    fn reduce(t: &Tensor, axis: Option<usize>) -> Tensor {
        let (r, c) = t.dims2();
        match axis {
            None => Tensor::scalar(t.sum()),
            Some(0) => {
                let mut acc = vec![0.0; c];
                for i in 0..r {
                    acc.iter_mut().zip(t.row_slice(i)).for_each(|(a, v)| *a += v);
                }
                Tensor::row(acc)
            }
            Some(_) => Tensor::column((0..r).map(|i| t.row_slice(i).iter().sum()).collect()),
        }
    }

    /// Sum over an axis (`0`: rows collapse to `[1, C]`, `1`: columns
    /// collapse to `[R, 1]`) or over everything (`None`, a scalar).
    pub fn sum(&mut self, x: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        if let Some(a) = axis {
            self.check_axis(x, a)?;
        }
        let value = Self::reduce(self.value(x), axis);
        self.push(value, Op::Sum(x, axis), &[x])
    }

    pub fn mean(&mut self, x: Var, axis: Option<usize>) -> Result<Var, DiffError> {
        if let Some(a) = axis {
            self.check_axis(x, a)?;
        }
        let t = self.value(x);
        let (r, c) = t.dims2();
        let count = match axis {
            None => (r * c) as f64,
            Some(0) => r as f64,
            Some(_) => c as f64,
        };
        let value = Self::reduce(t, axis).map(|v| v / count);
        self.push(value, Op::Mean(x, axis), &[x])
    }

    /// `log Σ exp` along an axis, shifted by the running maximum.
    pub fn logsumexp(&mut self, x: Var, axis: usize) -> Result<Var, DiffError> {
        self.check_axis(x, axis)?;
        let t = self.value(x);
        let (r, c) = t.dims2();
        let lse = |vals: &mut dyn Iterator<Item = f64>, buf: &mut Vec<f64>| {
            buf.clear();
            buf.extend(vals);
            let m = buf.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            m + buf.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
        };
        let mut buf = Vec::new();
        let value = if axis == 1 {
            Tensor::column((0..r).map(|i| lse(&mut t.row_slice(i).iter().copied(), &mut buf)).collect())
        } else {
            Tensor::row((0..c).map(|j| lse(&mut (0..r).map(|i| t.get(i, j)), &mut buf)).collect())
        };
        self.push(value, Op::LogSumExp(x, axis), &[x])
    }

    /// Concatenates rank-2 tensors along `axis` (0 stacks rows, 1 appends
    /// columns).
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, DiffError> {
        if parts.is_empty() {
            return Err(DiffError::Shape("concat of zero tensors".into()));
        }
        self.check_axis(parts[0], axis)?;
        let dims: Vec<(usize, usize)> = parts.iter().map(|&p| self.value(p).dims2()).collect();
        let value = if axis == 0 {
            let refs: Vec<&Tensor> = parts.iter().map(|&p| self.value(p)).collect();
            Tensor::vstack(&refs)?
        } else {
            let r = dims[0].0;
            if dims.iter().any(|d| d.0 != r) {
                return Err(DiffError::Shape("concat: row counts differ".into()));
            }
            let c: usize = dims.iter().map(|d| d.1).sum();
            let mut data = Vec::with_capacity(r * c);
            for i in 0..r {
                for &p in parts {
                    data.extend_from_slice(self.value(p).row_slice(i));
                }
            }
            Tensor::matrix(r, c, data)?
        };
        self.push(value, Op::Concat(parts.to_vec(), axis), parts)
    }

    /// Subtracts each column's mean.
    pub fn mean_center(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let means = t.column_means();
        let c = t.cols();
        let mut value = t.clone();
        for (k, v) in value.data_mut().iter_mut().enumerate() {
            *v -= means[k % c];
        }
        self.push(value, Op::MeanCenter(x), &[x])
    }

    fn bn_check(&self, x: Var, gamma: Var, beta: Var) -> Result<(usize, usize), DiffError> {
        let (r, c) = self.value(x).dims2();
        for p in [gamma, beta] {
            if self.value(p).len() != c {
                return Err(DiffError::Shape(format!(
                    "batch norm affine parameters need {c} entries, got {}",
                    self.value(p).len()
                )));
            }
        }
        Ok((r, c))
    }

    fn bn_apply(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        inv_std: Vec<f64>,
        train: bool,
    ) -> Result<Var, DiffError> {
        let (r, c) = self.value(x).dims2();
        let xs = self.value(x).data();
        let g = self.value(gamma).data();
        let b = self.value(beta).data();
        let mut xhat = vec![0.0; r * c];
        let mut out = vec![0.0; r * c];
        for ((xr, hr), or) in xs.chunks_exact(c).zip(xhat.chunks_exact_mut(c)).zip(out.chunks_exact_mut(c)) {
            for j in 0..c {
                let h = (xr[j] - mean[j]) * inv_std[j];
                hr[j] = h;
                or[j] = g[j] * h + b[j];
            }
        }
        let value = Tensor::matrix(r, c, out)?;
        self.push(value, Op::BatchNorm { x, gamma, beta, xhat, inv_std, train }, &[x, gamma, beta])
    }

    /// Batch normalization with batch statistics. Returns the output and
    /// the statistics for updating running estimates.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, BatchStats), DiffError> {
        let (r, c) = self.bn_check(x, gamma, beta)?;
        if r < 2 {
            return Err(DiffError::BatchTooSmall(r));
        }
        let t = self.value(x);
        let mean = t.column_means();
        let mut var = vec![0.0; c];
        for i in 0..r {
            for (j, v) in t.row_slice(i).iter().enumerate() {
                var[j] += (v - mean[j]).powi(2);
            }
        }
        let inv_std = var.iter().map(|s| 1.0 / (s / r as f64 + eps).sqrt()).collect();
        let unbiased = var.iter().map(|s| s / (r - 1) as f64).collect();
        let out = self.bn_apply(x, gamma, beta, &mean, inv_std, true)?;
        Ok((out, BatchStats { mean, var: unbiased }))
    }

    /// Batch normalization with fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        mean: &[f64],
        var: &[f64],
        eps: f64,
    ) -> Result<Var, DiffError> {
        let (_, c) = self.bn_check(x, gamma, beta)?;
        if mean.len() != c || var.len() != c {
            return Err(DiffError::Shape("running statistics have the wrong length".into()));
        }
        let inv_std = var.iter().map(|v| 1.0 / (v + eps).sqrt()).collect();
        self.bn_apply(x, gamma, beta, mean, inv_std, false)
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var, DiffError> {
        let value = self.value(x).gather_rows(idx)?;
        self.push(value, Op::GatherRows(x, idx.to_vec()), &[x])
    }

    /// Drops the diagonal of a square `[B, B]` matrix, giving `[B, B - 1]`.
    pub fn off_diagonal(&mut self, x: Var) -> Result<Var, DiffError> {
        let t = self.value(x);
        let (r, c) = t.dims2();
        if r != c || r < 2 {
            return Err(DiffError::Shape(format!("off_diagonal needs a square matrix, got [{r}, {c}]")));
        }
        let mut data = Vec::with_capacity(r * (r - 1));
        for i in 0..r {
            data.extend(t.row_slice(i).iter().enumerate().filter(|(j, _)| *j != i).map(|(_, v)| *v));
        }
        let value = Tensor::matrix(r, r - 1, data)?;
        self.push(value, Op::OffDiagonal(x), &[x])
    }

    /// `out[i, j] = Σ_d (|a[i, d] - b[j, d]| / scale[d])^beta` for
    /// `a: [B, n]`, `b: [K, n]`.
    pub fn pairwise_lp(&mut self, a: Var, b: Var, beta: f64, scale: &[f64]) -> Result<Var, DiffError> {
        if !(beta > 0.0) {
            return Err(DiffError::Domain(format!("exponent must be positive, got {beta}")));
        }
        let (ta, tb) = (self.value(a), self.value(b));
        let ((ra, n), (rb, nb)) = (ta.dims2(), tb.dims2());
        if n != nb || scale.len() != n {
            return Err(DiffError::Shape(format!(
                "pairwise_lp: dims {n} vs {nb}, {} scales",
                scale.len()
            )));
        }
        if let Some(s) = scale.iter().find(|&&s| !(s > 0.0)) {
            return Err(DiffError::Domain(format!("scale must be positive, got {s}")));
        }
        let inv_scale: Vec<f64> = scale.iter().map(|s| 1.0 / s).collect();
        // Column at a time so the inner loop runs over contiguous `j`; the
        // per-entry sum still adds dimensions in order.
        let mut data = vec![0.0; ra * rb];
        for d in 0..n {
            let (ys, s) = (tb.column_values(d), inv_scale[d]);
            for i in 0..ra {
                let x = ta.get(i, d);
                let row = &mut data[i * rb..(i + 1) * rb];
                if beta == 1.0 {
                    for (o, &y) in row.iter_mut().zip(&ys) {
                        *o += (x - y).abs() * s;
                    }
                } else {
                    for (o, &y) in row.iter_mut().zip(&ys) {
                        *o += lp_term((x - y).abs() * s, beta);
                    }
                }
            }
        }
        let value = Tensor::matrix(ra, rb, data)?;
        self.push(value, Op::PairwiseLp { a, b, beta, inv_scale }, &[a, b])
    }

    /// Reverse-mode sweep from a scalar node. Every node is visited once,
    /// in reverse creation order.
    pub fn backward(&self, loss: Var) -> Result<Gradients, DiffError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(DiffError::NotScalar(root.value.shape().to_vec()));
        }
        if !root.value.all_finite() {
            return Err(DiffError::NonFinite { op: root.op.name() });
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        if root.tracked {
            grads[loss.0] = Some(Tensor::new(root.value.shape().to_vec(), vec![1.0])?);
        }
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if matches!(node.op, Op::Leaf) || !node.tracked {
                continue;
            }
            let Some(grad) = grads[id].take() else { continue };
            for (input, delta) in self.input_grads(node, &grad)? {
                if !self.nodes[input.0].tracked {
                    continue;
                }
                if !delta.all_finite() {
                    return Err(DiffError::NonFiniteGradient { op: node.op.name(), node: id });
                }
                add_into(&mut grads[input.0], delta);
            }
        }
        for (id, g) in grads.iter_mut().enumerate() {
            if !(matches!(self.nodes[id].op, Op::Leaf) && self.nodes[id].tracked) {
                *g = None;
            }
        }
        Ok(Gradients { grads })
    }

    fn like(&self, v: Var, data: Vec<f64>) -> Tensor {
        Tensor::new(self.value(v).shape().to_vec(), data).expect("gradient matches input shape")
    }

    /// `d(input, output)` is the local derivative.
    fn unary_grad(&self, x: Var, out: &Tensor, grad: &Tensor, d: impl Fn(f64, f64) -> f64) -> Tensor {
        let xs = self.value(x).data();
        let data = xs
            .iter()
            .zip(out.data())
            .zip(grad.data())
            .map(|((&xv, &yv), &g)| g * d(xv, yv))
            .collect();
        self.like(x, data)
    }

    fn broadcast_grads(&self, a: Var, b: Var, out: &Tensor, ga: Vec<f64>, gb: Vec<f64>) -> Vec<(Var, Tensor)> {
        let od = out.dims2();
        let mut res = Vec::with_capacity(2);
        for (v, g) in [(a, ga), (b, gb)] {
            if !self.nodes[v.0].tracked {
                continue;
            }
            let data = reduce_to(g, od, self.value(v).dims2());
            res.push((v, self.like(v, data)));
        }
        res
    }

    /// Value of a (possibly broadcast) operand at output position `(i, j)`.
    fn bget(t: &Tensor, i: usize, j: usize) -> f64 {
        let (r, c) = t.dims2();
        t.data()[(if r == 1 { 0 } else { i }) * c + if c == 1 { 0 } else { j }]
    }

    fn input_grads(&self, node: &Node, grad: &Tensor) -> Result<Vec<(Var, Tensor)>, DiffError> {
        let out = &node.value;
        let g = grad.data();
        Ok(match &node.op {
            Op::Leaf => Vec::new(),
            Op::Add(a, b) => self.broadcast_grads(*a, *b, out, g.to_vec(), g.to_vec()),
            Op::Sub(a, b) => self.broadcast_grads(*a, *b, out, g.to_vec(), g.iter().map(|v| -v).collect()),
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (r, c) = out.dims2();
                let mut ga = Vec::with_capacity(r * c);
                let mut gb = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gij = g[i * c + j];
                        ga.push(gij * Self::bget(tb, i, j));
                        gb.push(gij * Self::bget(ta, i, j));
                    }
                }
                if ta.shape() == tb.shape() {
                    vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
                } else {
                    self.broadcast_grads(*a, *b, out, ga, gb)
                }
            }
            Op::Neg(x) => vec![(*x, self.like(*x, g.iter().map(|v| -v).collect()))],
            Op::Scale(x, c) => vec![(*x, self.like(*x, g.iter().map(|v| c * v).collect()))],
            Op::Shift(x) => vec![(*x, self.like(*x, g.to_vec()))],
            Op::Exp(x) => vec![(*x, self.unary_grad(*x, out, grad, |_, y| y))],
            Op::Log(x) => vec![(*x, self.unary_grad(*x, out, grad, |v, _| 1.0 / v))],
            Op::Abs(x) => vec![(*x, self.unary_grad(*x, out, grad, |v, _| sign(v)))],
            Op::Pow(x, p) => {
                let p = *p;
                vec![(*x, self.unary_grad(*x, out, grad, move |v, _| pow_grad(v, p)))]
            }
            Op::Sigmoid(x) => vec![(*x, self.unary_grad(*x, out, grad, |_, y| y * (1.0 - y)))],
            Op::Softplus(x) => vec![(*x, self.unary_grad(*x, out, grad, |v, _| sigmoid(v)))],
            Op::LeakyRelu(x, s) => {
                let s = *s;
                vec![(*x, self.unary_grad(*x, out, grad, move |v, _| if v >= 0.0 { 1.0 } else { s }))]
            }
            Op::Gelu(x) => {
                vec![(*x, self.unary_grad(*x, out, grad, |v, _| gelu_cdf(v) + v * gelu_pdf(v)))]
            }
            Op::Clamp(x, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                vec![(*x, self.unary_grad(*x, out, grad, move |v, _| if v >= lo && v <= hi { 1.0 } else { 0.0 }))]
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((m, k), (_, n)) = (ta.dims2(), tb.dims2());
                let mut ga = vec![0.0; m * k];
                gemm(m, n, k, g, false, tb.data(), true, &mut ga, 0.0);
                let mut gb = vec![0.0; k * n];
                gemm(k, m, n, ta.data(), true, g, false, &mut gb, 0.0);
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
            Op::Transpose(x) => {
                let t = grad.transpose();
                vec![(*x, self.like(*x, t.into_data()))]
            }
            Op::Sum(x, axis) | Op::Mean(x, axis) => {
                let (r, c) = self.value(*x).dims2();
                let norm = match (&node.op, axis) {
                    (Op::Sum(..), _) => 1.0,
                    (_, None) => (r * c) as f64,
                    (_, Some(0)) => r as f64,
                    _ => c as f64,
                };
                let mut data = Vec::with_capacity(r * c);
                for i in 0..r {
                    for j in 0..c {
                        let gv = match axis {
                            None => g[0],
                            Some(0) => g[j],
                            Some(_) => g[i],
                        };
                        data.push(gv / norm);
                    }
                }
                vec![(*x, self.like(*x, data))]
            }
            Op::LogSumExp(x, axis) => {
                let t = self.value(*x);
                let (r, c) = t.dims2();
                let lse = out.data();
                let mut data = Vec::with_capacity(r * c);
                if *axis == 1 {
                    for i in 0..r {
                        data.extend(t.row_slice(i).iter().map(|&v| g[i] * (v - lse[i]).exp()));
                    }
                } else {
                    for i in 0..r {
                        data.extend(t.row_slice(i).iter().enumerate().map(|(j, &v)| g[j] * (v - lse[j]).exp()));
                    }
                }
                vec![(*x, self.like(*x, data))]
            }
            Op::Concat(parts, axis) => {
                let mut res = Vec::with_capacity(parts.len());
                let (_, total_c) = out.dims2();
                let mut offset = 0;
                for &p in parts {
                    let (r, c) = self.value(p).dims2();
                    let data = if *axis == 0 {
                        g[offset * total_c..(offset + r) * total_c].to_vec()
                    } else {
                        (0..r).flat_map(|i| g[i * total_c + offset..i * total_c + offset + c].iter().copied()).collect()
                    };
                    offset += if *axis == 0 { r } else { c };
                    res.push((p, self.like(p, data)));
                }
                res
            }
            Op::MeanCenter(x) => {
                let means = grad.column_means();
                let c = grad.cols();
                let data = g.iter().enumerate().map(|(k, v)| v - means[k % c]).collect();
                vec![(*x, self.like(*x, data))]
            }
            Op::BatchNorm { x, gamma, beta, xhat, inv_std, train } => {
                let (r, c) = out.dims2();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; c];
                let mut dbeta = vec![0.0; c];
                for i in 0..r {
                    for j in 0..c {
                        dgamma[j] += g[i * c + j] * xhat[i * c + j];
                        dbeta[j] += g[i * c + j];
                    }
                }
                let mut dx = vec![0.0; r * c];
                let rf = r as f64;
                for i in 0..r {
                    for j in 0..c {
                        let k = i * c + j;
                        dx[k] = if *train {
                            // Σ_i dxhat = γ Σ dy and Σ_i dxhat·xhat = γ dγ.
                            gam[j] * inv_std[j] * (g[k] - dbeta[j] / rf - xhat[k] * dgamma[j] / rf)
                        } else {
                            gam[j] * inv_std[j] * g[k]
                        };
                    }
                }
                vec![
                    (*x, self.like(*x, dx)),
                    (*gamma, self.like(*gamma, dgamma)),
                    (*beta, self.like(*beta, dbeta)),
                ]
            }
            Op::GatherRows(x, idx) => {
                let (r, c) = self.value(*x).dims2();
                let mut data = vec![0.0; r * c];
                for (k, &i) in idx.iter().enumerate() {
                    for j in 0..c {
                        data[i * c + j] += g[k * c + j];
                    }
                }
                vec![(*x, self.like(*x, data))]
            }
            Op::OffDiagonal(x) => {
                let (r, _) = self.value(*x).dims2();
                let mut data = vec![0.0; r * r];
                for i in 0..r {
                    let mut k = 0;
                    for j in 0..r {
                        if j != i {
                            data[i * r + j] = g[i * (r - 1) + k];
                            k += 1;
                        }
                    }
                }
                vec![(*x, self.like(*x, data))]
            }
            Op::PairwiseLp { a, b, beta, inv_scale } => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let ((ra, n), (rb, _)) = (ta.dims2(), tb.dims2());
                let mut ga = vec![0.0; ra * n];
                let mut gb = vec![0.0; rb * n];
                let mut t = vec![0.0; rb];
                let mut gcol = vec![0.0; rb];
                for d in 0..n {
                    let (ys, s) = (tb.column_values(d), inv_scale[d]);
                    gcol.fill(0.0);
                    for i in 0..ra {
                        let x = ta.get(i, d);
                        let grow = &g[i * rb..(i + 1) * rb];
                        if *beta == 1.0 {
                            for ((t, &gij), &y) in t.iter_mut().zip(grow).zip(&ys) {
                                *t = gij * sign(x - y);
                            }
                        } else {
                            for ((t, &gij), &y) in t.iter_mut().zip(grow).zip(&ys) {
                                let diff = x - y;
                                *t = gij * lp_term_grad(diff.abs() * s, *beta) * sign(diff);
                            }
                        }
                        for (c, &v) in gcol.iter_mut().zip(&t) {
                            *c -= v;
                        }
                        ga[i * n + d] = lane_sum(&t) * s;
                    }
                    for (j, &c) in gcol.iter().enumerate() {
                        gb[j * n + d] = c * s;
                    }
                }
                vec![(*a, self.like(*a, ga)), (*b, self.like(*b, gb))]
            }
        })
    }
}

/// `-1`, `0` or `1`; branch-free so loops over it vectorize.
fn sign(v: f64) -> f64 {
    f64::from(u8::from(v > 0.0)) - f64::from(u8::from(v < 0.0))
}

/// Sum with eight independent accumulators.
fn lane_sum(xs: &[f64]) -> f64 {
    let mut acc = [0.0f64; 8];
    let chunks = xs.chunks_exact(8);
    let tail: f64 = chunks.remainder().iter().sum();
    for c in chunks {
        for k in 0..8 {
            acc[k] += c[k];
        }
    }
    acc.iter().sum::<f64>() + tail
}

/// `u^beta` for `u >= 0`.
fn lp_term(u: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        u
    } else if beta == 2.0 {
        u * u
    } else {
        u.powf(beta)
    }
}

/// `d/du u^beta`, taken as zero at `u = 0` (its subgradient for `beta >= 1`).
fn lp_term_grad(u: f64, beta: f64) -> f64 {
    if beta == 1.0 {
        1.0
    } else if u == 0.0 {
        0.0
    } else if beta == 2.0 {
        2.0 * u
    } else {
        beta * u.powf(beta - 1.0)
    }
}

fn pow_grad(v: f64, p: f64) -> f64 {
    if p == 0.0 || (v == 0.0 && p < 1.0) {
        0.0
    } else if p == 1.0 {
        1.0
    } else {
        p * if p.fract() == 0.0 && p.abs() < 64.0 { v.powi(p as i32 - 1) } else { v.powf(p - 1.0) }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffmath::{Distribution, Rng};

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    fn randn(rng: &mut Rng, r: usize, c: usize) -> Tensor {
        rng.sample(Distribution::StandardNormal, &[r, c]).unwrap()
    }

    #[test]
    fn values_of_elementwise_ops() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(0.0));
        let sp = g.softplus(x).unwrap();
        assert!((g.value(sp).item() - 2f64.ln()).abs() < 1e-15);
        let m = g.constant(Tensor::scalar(-2.0));
        let lr = g.leaky_relu(m, 0.2).unwrap();
        assert!((g.value(lr).item() + 0.4).abs() < 1e-15);
        let big = g.constant(Tensor::scalar(800.0));
        let sp = g.softplus(big).unwrap();
        assert_eq!(g.value(sp).item(), 800.0);
        let e = g.exp(big);
        assert_eq!(e.unwrap_err(), DiffError::NonFinite { op: "exp" });
    }

    #[test]
    fn logsumexp_is_shift_stable() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1000.0, 1000.0, 1000.0]]));
        let l = g.logsumexp(x, 1).unwrap();
        assert!((g.value(l).item() - (1000.0 + 3f64.ln())).abs() < 1e-9);
    }

    #[test]
    fn mean_center_zeroes_column_means() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[1.0, 5.0], &[3.0, -1.0], &[8.0, 2.0]]));
        let c = g.mean_center(x).unwrap();
        for m in g.value(c).column_means() {
            assert!(m.abs() < 1e-15);
        }
    }

    #[test]
    fn square_gradient() {
        let mut g = Graph::new();
        let x = g.param(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap().item(), 6.0);
    }

    #[test]
    fn linear_form_gradient_is_column_sums() {
        let a = t(&[&[1.0, 2.0], &[3.0, 4.0]]);
        let mut g = Graph::new();
        let av = g.constant(a);
        let x = g.param(Tensor::column(vec![0.5, -1.0]));
        let y = g.matmul(av, x).unwrap();
        let s = g.sum(y, None).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap().data(), &[4.0, 6.0]);
        assert!(grads.get(av).is_none());
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.backward(x), Err(DiffError::NotScalar(_))));
    }

    #[test]
    fn domain_errors() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, -1.0]]));
        assert!(matches!(g.log(x), Err(DiffError::Domain(_))));
        assert!(matches!(g.pow(x, 0.5), Err(DiffError::Domain(_))));
        assert!(g.pow(x, 2.0).is_ok());
        assert!(matches!(g.sum(x, Some(2)), Err(DiffError::Axis { .. })));
    }

    #[test]
    fn broadcast_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[3, 2]));
        let row = g.constant(Tensor::row(vec![1.0, 2.0]));
        let col = g.constant(Tensor::column(vec![1.0, 2.0, 3.0]));
        let s = g.constant(Tensor::scalar(1.0));
        assert_eq!(g.add(a, row).map(|v| g.value(v).shape().to_vec()).unwrap(), vec![3, 2]);
        assert_eq!(g.add(a, col).map(|v| g.value(v).shape().to_vec()).unwrap(), vec![3, 2]);
        assert_eq!(g.mul(s, a).map(|v| g.value(v).shape().to_vec()).unwrap(), vec![3, 2]);
        let bad = g.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(g.add(a, bad), Err(DiffError::Shape(_))));
    }

    #[test]
    fn batch_norm_standardizes() {
        let mut rng = Rng::new(6);
        let x = randn(&mut rng, 64, 3).map(|v| 4.0 * v + 7.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let one = g.constant(Tensor::row(vec![1.0; 3]));
        let zero = g.constant(Tensor::row(vec![0.0; 3]));
        let (y, stats) = g.batch_norm_train(xv, one, zero, 1e-12).unwrap();
        let y = g.value(y);
        for j in 0..3 {
            let col = y.column_values(j);
            let m = col.iter().sum::<f64>() / 64.0;
            let v = col.iter().map(|c| (c - m).powi(2)).sum::<f64>() / 64.0;
            assert!(m.abs() < 1e-12);
            assert!((v - 1.0).abs() < 1e-10);
            assert!(stats.var[j] > 0.0);
        }
        let mut g = Graph::new();
        let xv = g.constant(Tensor::zeros(&[1, 3]));
        let one = g.constant(Tensor::row(vec![1.0; 3]));
        let zero = g.constant(Tensor::row(vec![0.0; 3]));
        assert_eq!(g.batch_norm_train(xv, one, zero, 1e-5).unwrap_err(), DiffError::BatchTooSmall(1));
    }

    #[test]
    fn untracked_graph_reports_no_gradients() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::scalar(2.0));
        let y = g.exp(x).unwrap();
        assert!(g.backward(y).unwrap().is_empty());
    }
}
