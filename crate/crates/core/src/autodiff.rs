//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Every operation appends one node to the tape; node indices are therefore a
//! topological order and [`Tape::backward`] simply walks them in reverse.
//! Gradients of nodes marked `requires_grad` accumulate across calls until
//! [`Tape::zero_grad`].

use crate::error::{Error, Result};
use crate::tensor::{matmul_nt, matmul_raw, matmul_tn, Real, Tensor};

/// Sigmoid inputs are clamped to this magnitude.
pub const SIGMOID_CLAMP: f64 = 500.0;
/// Lower clamp applied to `log` inputs.
pub const LOG_EPS: f64 = 1e-12;
/// Row norms below this are treated as this value in `l2_normalize_rows`.
pub const NORM_EPS: f64 = 1e-12;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Zero-padding mode for [`Tape::conv1d`]. Both keep the output length equal
/// to the input length.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Padding {
    /// Taps centred on the output step, `⌊k/2⌋·dilation` zeros on each side.
    #[default]
    Same,
    /// Taps end at the output step; only past inputs contribute.
    Causal,
}

impl Padding {
    #[inline]
    fn offset(self, tap: usize, k: usize, dilation: usize) -> isize {
        let centre = match self {
            Padding::Same => k / 2,
            Padding::Causal => k - 1,
        };
        (tap as isize - centre as isize) * dilation as isize
    }
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    Conv1d {
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        padding: Padding,
    },
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Sigmoid(Var),
    Relu(Var),
    Abs(Var),
    Log(Var),
    Clamp { x: Var, lo: T, hi: T },
    Concat(Vec<Var>),
    SliceRows { x: Var, start: usize },
    StackRows(Vec<Var>),
    L2NormalizeRows(Var),
    Sum(Var),
    Mean(Var),
    NeighborMean { h: Var, adj: Var },
    PairSumUpper(Var, Var),
    ScatterUpper { pairs: Var, n: usize },
}

impl<T> Op<T> {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Conv1d { .. } => "conv1d",
            Op::AddRowBias(..) => "add_row_bias",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::Sigmoid(_) => "sigmoid",
            Op::Relu(_) => "relu",
            Op::Abs(_) => "abs",
            Op::Log(_) => "log",
            Op::Clamp { .. } => "clamp",
            Op::Concat(_) => "concat_features",
            Op::SliceRows { .. } => "slice_rows",
            Op::StackRows(_) => "stack_rows",
            Op::L2NormalizeRows(_) => "l2_normalize_rows",
            Op::Sum(_) => "sum",
            Op::Mean(_) => "mean",
            Op::NeighborMean { .. } => "neighbor_mean",
            Op::PairSumUpper(..) => "pair_sum_upper",
            Op::ScatterUpper { .. } => "scatter_upper",
        }
    }
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Tensor<T>>,
}

/// Records a differentiable computation.
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Number of strictly upper-triangular pairs `(i, j)`, `i < j`, among `n` nodes.
pub fn pair_count(n: usize) -> usize {
    n * n.saturating_sub(1) / 2
}

/// Enumerates upper pairs in the row-major order used by pair ops.
pub fn upper_pairs(n: usize) -> impl Iterator<Item = (usize, usize)> {
    (0..n).flat_map(move |i| (i + 1..n).map(move |j| (i, j)))
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient, present once a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    /// First node holding a NaN or infinite value, with its op name.
    pub fn first_non_finite(&self) -> Option<(Var, &'static str)> {
        self.nodes
            .iter()
            .enumerate()
            .find(|(_, n)| !n.value.all_finite())
            .map(|(i, n)| (Var(i), n.op.name()))
    }

    pub fn op_name(&self, v: Var) -> &'static str {
        self.nodes[v.0].op.name()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.value(v).dims2(op)
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != sb.len() {
            return Err(Error::shape(op, "rank", sa.len(), sb.len()));
        }
        for (axis, (&x, &y)) in sa.iter().zip(sb).enumerate() {
            if x != y {
                return Err(Error::shape(op, format!("axis {axis}"), x, y));
            }
        }
        Ok(())
    }

    fn unary(&mut self, x: Var, op: Op<T>, f: impl Fn(T) -> T) -> Var {
        let value = self.value(x).map(f);
        let rg = self.requires_grad(x);
        self.push(value, op, rg)
    }

    fn binary(&mut self, a: Var, b: Var, op: Op<T>, name: &'static str, f: impl Fn(T, T) -> T) -> Result<Var> {
        self.same_shape(a, b, name)?;
        let va = self.value(a);
        let data = va
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let value = Tensor::new(va.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, op, rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (p, q) = self.dims2(a, "matmul")?;
        let (q2, r) = self.dims2(b, "matmul")?;
        if q != q2 {
            return Err(Error::shape("matmul", "inner dimension", q, q2));
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), p, q, r);
        let value = Tensor::new(vec![p, r], data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    /// 1-D convolution over the time axis of a `τ×c_in` input with a
    /// `k×c_in×c_out` kernel. Out-of-range taps read zeros.
    pub fn conv1d(
        &mut self,
        input: Var,
        kernel: Var,
        bias: Var,
        dilation: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (tau, c_in) = self.dims2(input, "conv1d")?;
        let (k, kc_in, c_out) = match self.shape(kernel) {
            [k, ci, co] => (*k, *ci, *co),
            other => return Err(Error::shape("conv1d", "kernel rank", 3, other.len())),
        };
        if kc_in != c_in {
            return Err(Error::shape("conv1d", "input channels", kc_in, c_in));
        }
        if self.value(bias).numel() != c_out {
            return Err(Error::shape("conv1d", "bias length", c_out, self.value(bias).numel()));
        }
        if dilation == 0 {
            return Err(Error::invalid("conv1d", "dilation must be at least 1"));
        }
        let x = self.value(input).data();
        let w = self.value(kernel).data();
        let b = self.value(bias).data();
        let mut out = Vec::with_capacity(tau * c_out);
        for _ in 0..tau {
            out.extend_from_slice(b);
        }
        for t in 0..tau {
            let orow = &mut out[t * c_out..(t + 1) * c_out];
            for j in 0..k {
                let s = t as isize + padding.offset(j, k, dilation);
                if s < 0 || s >= tau as isize {
                    continue;
                }
                let xrow = &x[s as usize * c_in..(s as usize + 1) * c_in];
                for (c, &xv) in xrow.iter().enumerate() {
                    let wrow = &w[(j * c_in + c) * c_out..(j * c_in + c + 1) * c_out];
                    for (o, &wv) in orow.iter_mut().zip(wrow) {
                        *o = *o + xv * wv;
                    }
                }
            }
        }
        let value = Tensor::new(vec![tau, c_out], out)?;
        let rg = self.any_grad(&[input, kernel, bias]);
        Ok(self.push(
            value,
            Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
                padding,
            },
            rg,
        ))
    }

    /// Adds a length-`c` bias to every row of an `n×c` matrix.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "add_row_bias")?;
        let b = self.value(bias);
        if b.numel() != c {
            return Err(Error::shape("add_row_bias", "bias length", c, b.numel()));
        }
        let b = b.data();
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, &bv) in row.iter_mut().zip(b) {
                *v = *v + bv;
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, Op::AddRowBias(x, bias), rg))
    }

    /// `x·W + b`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xw = self.matmul(x, weight)?;
        self.add_row_bias(xw, bias)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Op::Mul(a, b), "mul", |x, y| x * y)
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, Op::Scale(x, c), |v| v * c)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, Op::Sigmoid(x), sigmoid)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, Op::Relu(x), |v| if v > T::zero() { v } else { T::zero() })
    }

    pub fn abs(&mut self, x: Var) -> Var {
        self.unary(x, Op::Abs(x), |v| v.abs())
    }

    /// Natural log with inputs clamped to `[LOG_EPS, ∞)`.
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::lit(LOG_EPS);
        self.unary(x, Op::Log(x), move |v| v.max(eps).ln())
    }

    pub fn clamp(&mut self, x: Var, lo: T, hi: T) -> Var {
        self.unary(x, Op::Clamp { x, lo, hi }, move |v| v.max(lo).min(hi))
    }

    /// Feature-axis concatenation of matrices sharing their row count.
    pub fn concat_features(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat_features", "no parts given"));
        };
        let (rows, _) = self.dims2(first, "concat_features")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_features")?;
            if r != rows {
                return Err(Error::shape("concat_features", "leading extent", rows, r));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(rows * total);
        for t in 0..rows {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[t * w..(t + 1) * w]);
            }
        }
        let value = Tensor::new(vec![rows, total], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::Concat(parts.to_vec()), rg))
    }

    /// Rows `start..end` of a matrix.
    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (n, c) = self.dims2(x, "slice_rows")?;
        if start >= end || end > n {
            return Err(Error::invalid(
                "slice_rows",
                format!("range {start}..{end} out of bounds for {n} rows"),
            ));
        }
        let data = self.value(x).data()[start * c..end * c].to_vec();
        let value = Tensor::new(vec![end - start, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::SliceRows { x, start }, rg))
    }

    /// Row `i` as a `1×c` matrix.
    pub fn select_row(&mut self, x: Var, i: usize) -> Result<Var> {
        self.slice_rows(x, i, i + 1)
    }

    /// Vertical concatenation of matrices sharing their column count.
    pub fn stack_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("stack_rows", "no parts given"));
        };
        let (_, cols) = self.dims2(first, "stack_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p, "stack_rows")?;
            if c != cols {
                return Err(Error::shape("stack_rows", "columns", cols, c));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let value = Tensor::new(vec![rows, cols], data)?;
        let rg = self.any_grad(parts);
        Ok(self.push(value, Op::StackRows(parts.to_vec()), rg))
    }

    /// Divides each row by `max(‖row‖₂, NORM_EPS)`.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "l2_normalize_rows")?;
        let eps = T::lit(NORM_EPS);
        let mut data = self.value(x).data().to_vec();
        for row in data.chunks_mut(c) {
            let norm = row_norm(row).max(eps);
            for v in row.iter_mut() {
                *v = *v / norm;
            }
        }
        let value = Tensor::new(vec![n, c], data)?;
        let rg = self.requires_grad(x);
        Ok(self.push(value, Op::L2NormalizeRows(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.value(x).data().iter().copied().sum();
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let s: T = v.data().iter().copied().sum::<T>() / T::lit(v.numel() as f64);
        let rg = self.requires_grad(x);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Weighted mean of each node's own state and its in-neighbours' states.
    ///
    /// `h` is `n×d`, `adj` is `n×n` with `adj[i, u]` the weight of edge `i → u`.
    /// Row `u` of the output is `(h_u + Σ_{i≠u} adj[i,u]·h_i) / (1 + Σ_{i≠u} adj[i,u])`.
    /// The diagonal of `adj` is ignored.
    pub fn neighbor_mean(&mut self, h: Var, adj: Var) -> Result<Var> {
        let (n, d) = self.dims2(h, "neighbor_mean")?;
        let (ar, ac) = self.dims2(adj, "neighbor_mean")?;
        if ar != n {
            return Err(Error::shape("neighbor_mean", "adjacency rows", n, ar));
        }
        if ac != n {
            return Err(Error::shape("neighbor_mean", "adjacency columns", n, ac));
        }
        let hv = self.value(h).data();
        let a = self.value(adj).data();
        let mut out = hv.to_vec();
        for u in 0..n {
            let mut weight = T::one();
            let orow = &mut out[u * d..(u + 1) * d];
            for i in 0..n {
                let w = a[i * n + u];
                if i == u || w == T::zero() {
                    continue;
                }
                weight = weight + w;
                for (o, &hv) in orow.iter_mut().zip(&hv[i * d..(i + 1) * d]) {
                    *o = *o + w * hv;
                }
            }
            for o in orow.iter_mut() {
                *o = *o / weight;
            }
        }
        let value = Tensor::new(vec![n, d], out)?;
        let rg = self.any_grad(&[h, adj]);
        Ok(self.push(value, Op::NeighborMean { h, adj }, rg))
    }

    /// For `n×k` inputs `p`, `q`, emits one row `p_i + q_j` per upper pair
    /// `(i, j)`, `i < j`, in [`upper_pairs`] order.
    pub fn pair_sum_upper(&mut self, p: Var, q: Var) -> Result<Var> {
        self.same_shape(p, q, "pair_sum_upper")?;
        let (n, k) = self.dims2(p, "pair_sum_upper")?;
        if n < 2 {
            return Err(Error::invalid("pair_sum_upper", "need at least two nodes"));
        }
        let pv = self.value(p).data();
        let qv = self.value(q).data();
        let mut data = Vec::with_capacity(pair_count(n) * k);
        for (i, j) in upper_pairs(n) {
            let pi = &pv[i * k..(i + 1) * k];
            let qj = &qv[j * k..(j + 1) * k];
            data.extend(pi.iter().zip(qj).map(|(&a, &b)| a + b));
        }
        let value = Tensor::new(vec![pair_count(n), k], data)?;
        let rg = self.any_grad(&[p, q]);
        Ok(self.push(value, Op::PairSumUpper(p, q), rg))
    }

    /// Places one value per upper pair into an `n×n` matrix; every entry on or
    /// below the diagonal is zero.
    pub fn scatter_upper(&mut self, pairs: Var, n: usize) -> Result<Var> {
        let len = self.value(pairs).numel();
        if len != pair_count(n) {
            return Err(Error::shape("scatter_upper", "pair count", pair_count(n), len));
        }
        let v = self.value(pairs).data();
        let mut data = vec![T::zero(); n * n];
        for (idx, (i, j)) in upper_pairs(n).enumerate() {
            data[i * n + j] = v[idx];
        }
        let value = Tensor::new(vec![n, n], data)?;
        let rg = self.requires_grad(pairs);
        Ok(self.push(value, Op::ScatterUpper { pairs, n }, rg))
    }

    /// Populates gradients of every `requires_grad` node reachable from `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if self.value(loss).numel() != 1 {
            return Err(Error::NonScalarLoss(shape.to_vec()));
        }
        if !self.requires_grad(loss) {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, &gv) in acc.data_mut().iter_mut().zip(&g) {
                        *a = *a + gv;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g)?);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], v: Var, g: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.iter_mut().zip(g) {
                    *a = *a + b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let out = &node.value;
        let rg = |v: Var| self.nodes[v.0].requires_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let va = self.value(a);
                let vb = self.value(b);
                let (p, q) = (va.shape()[0], va.shape()[1]);
                let r = vb.shape()[1];
                if rg(a) {
                    self.accumulate(grads, a, matmul_nt(g, vb.data(), p, q, r));
                }
                if rg(b) {
                    self.accumulate(grads, b, matmul_tn(va.data(), g, p, q, r));
                }
            }
            &Op::Conv1d {
                input,
                kernel,
                bias,
                dilation,
                padding,
            } => {
                let x = self.value(input);
                let w = self.value(kernel);
                let (tau, c_in) = (x.shape()[0], x.shape()[1]);
                let (k, c_out) = (w.shape()[0], w.shape()[2]);
                let (x, w) = (x.data(), w.data());
                let mut dx = vec![T::zero(); x.len()];
                let mut dw = vec![T::zero(); w.len()];
                for t in 0..tau {
                    let grow = &g[t * c_out..(t + 1) * c_out];
                    for j in 0..k {
                        let s = t as isize + padding.offset(j, k, dilation);
                        if s < 0 || s >= tau as isize {
                            continue;
                        }
                        let s = s as usize;
                        for c in 0..c_in {
                            let base = (j * c_in + c) * c_out;
                            let wrow = &w[base..base + c_out];
                            let dot: T = grow.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                            dx[s * c_in + c] = dx[s * c_in + c] + dot;
                            let xv = x[s * c_in + c];
                            for (dwv, &gv) in dw[base..base + c_out].iter_mut().zip(grow) {
                                *dwv = *dwv + xv * gv;
                            }
                        }
                    }
                }
                if rg(input) {
                    self.accumulate(grads, input, dx);
                }
                if rg(kernel) {
                    self.accumulate(grads, kernel, dw);
                }
                if rg(bias) {
                    self.accumulate(grads, bias, column_sums(g, c_out));
                }
            }
            &Op::AddRowBias(x, b) => {
                if rg(x) {
                    self.accumulate(grads, x, g.to_vec());
                }
                if rg(b) {
                    let c = out.shape()[1];
                    self.accumulate(grads, b, column_sums(g, c));
                }
            }
            &Op::Add(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                self.accumulate(grads, a, g.to_vec());
                self.accumulate(grads, b, g.iter().map(|&v| -v).collect());
            }
            &Op::Mul(a, b) => {
                let (va, vb) = (self.value(a).data(), self.value(b).data());
                if rg(a) {
                    self.accumulate(grads, a, g.iter().zip(vb).map(|(&gv, &y)| gv * y).collect());
                }
                if rg(b) {
                    self.accumulate(grads, b, g.iter().zip(va).map(|(&gv, &x)| gv * x).collect());
                }
            }
            &Op::Scale(x, c) => self.accumulate(grads, x, g.iter().map(|&v| v * c).collect()),
            &Op::Sigmoid(x) => {
                let dx = g
                    .iter()
                    .zip(out.data())
                    .map(|(&gv, &y)| gv * y * (T::one() - y))
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Relu(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Abs(x) => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &v)| {
                        if v > T::zero() {
                            gv
                        } else if v < T::zero() {
                            -gv
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Log(x) => {
                let eps = T::lit(LOG_EPS);
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &v)| if v > eps { gv / v } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            &Op::Clamp { x, lo, hi } => {
                let dx = g
                    .iter()
                    .zip(self.value(x).data())
                    .map(|(&gv, &v)| if v >= lo && v <= hi { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, x, dx);
            }
            Op::Concat(parts) => {
                let (rows, total) = (out.shape()[0], out.shape()[1]);
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).shape()[1];
                    if rg(p) {
                        let mut dp = Vec::with_capacity(rows * w);
                        for t in 0..rows {
                            dp.extend_from_slice(&g[t * total + col..t * total + col + w]);
                        }
                        self.accumulate(grads, p, dp);
                    }
                    col += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let c = out.shape()[1];
                let mut dx = vec![T::zero(); self.value(x).numel()];
                dx[start * c..start * c + g.len()].copy_from_slice(g);
                self.accumulate(grads, x, dx);
            }
            Op::StackRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if rg(p) {
                        self.accumulate(grads, p, g[offset..offset + len].to_vec());
                    }
                    offset += len;
                }
            }
            &Op::L2NormalizeRows(x) => {
                let c = out.shape()[1];
                let eps = T::lit(NORM_EPS);
                let xv = self.value(x).data();
                let mut dx = Vec::with_capacity(xv.len());
                for ((xr, yr), gr) in xv.chunks(c).zip(out.data().chunks(c)).zip(g.chunks(c)) {
                    let norm = row_norm(xr);
                    if norm > eps {
                        let dot: T = yr.iter().zip(gr).map(|(&y, &gv)| y * gv).sum();
                        dx.extend(yr.iter().zip(gr).map(|(&y, &gv)| (gv - y * dot) / norm));
                    } else {
                        dx.extend(gr.iter().map(|&gv| gv / eps));
                    }
                }
                self.accumulate(grads, x, dx);
            }
            &Op::Sum(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0]; n]);
            }
            &Op::Mean(x) => {
                let n = self.value(x).numel();
                self.accumulate(grads, x, vec![g[0] / T::lit(n as f64); n]);
            }
            &Op::NeighborMean { h, adj } => {
                let hv = self.value(h).data();
                let a = self.value(adj).data();
                let (n, d) = (out.shape()[0], out.shape()[1]);
                let agg = out.data();
                // gw_u = g_u / w_u
                let mut gw = g.to_vec();
                for u in 0..n {
                    let w = (0..n)
                        .filter(|&i| i != u)
                        .fold(T::one(), |acc, i| acc + a[i * n + u]);
                    for v in &mut gw[u * d..(u + 1) * d] {
                        *v = *v / w;
                    }
                }
                if rg(h) {
                    let mut dh = gw.clone();
                    for i in 0..n {
                        let dhi = &mut dh[i * d..(i + 1) * d];
                        for u in 0..n {
                            let w = a[i * n + u];
                            if u == i || w == T::zero() {
                                continue;
                            }
                            for (o, &gv) in dhi.iter_mut().zip(&gw[u * d..(u + 1) * d]) {
                                *o = *o + w * gv;
                            }
                        }
                    }
                    self.accumulate(grads, h, dh);
                }
                if rg(adj) {
                    // dadj[i,u] = gw_u · (h_i − agg_u)
                    let mut da = matmul_nt(hv, &gw, n, n, d);
                    for u in 0..n {
                        let c: T = gw[u * d..(u + 1) * d]
                            .iter()
                            .zip(&agg[u * d..(u + 1) * d])
                            .map(|(&x, &y)| x * y)
                            .sum();
                        for i in 0..n {
                            da[i * n + u] = if i == u { T::zero() } else { da[i * n + u] - c };
                        }
                    }
                    self.accumulate(grads, adj, da);
                }
            }
            &Op::PairSumUpper(p, q) => {
                let (n, k) = (self.value(p).shape()[0], self.value(p).shape()[1]);
                let mut dp = vec![T::zero(); n * k];
                let mut dq = vec![T::zero(); n * k];
                for (idx, (i, j)) in upper_pairs(n).enumerate() {
                    let grow = &g[idx * k..(idx + 1) * k];
                    for ((a, b), &gv) in dp[i * k..(i + 1) * k]
                        .iter_mut()
                        .zip(&mut dq[j * k..(j + 1) * k])
                        .zip(grow)
                    {
                        *a = *a + gv;
                        *b = *b + gv;
                    }
                }
                if rg(p) {
                    self.accumulate(grads, p, dp);
                }
                if rg(q) {
                    self.accumulate(grads, q, dq);
                }
            }
            &Op::ScatterUpper { pairs, n } => {
                let dv = upper_pairs(n).map(|(i, j)| g[i * n + j]).collect();
                self.accumulate(grads, pairs, dv);
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Real>(x: T) -> T {
    let lim = T::lit(SIGMOID_CLAMP);
    let x = x.max(-lim).min(lim);
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

fn row_norm<T: Real>(row: &[T]) -> T {
    row.iter().map(|&v| v * v).sum::<T>().sqrt()
}

fn column_sums<T: Real>(g: &[T], c: usize) -> Vec<T> {
    let mut out = vec![T::zero(); c];
    for row in g.chunks(c) {
        for (o, &v) in out.iter_mut().zip(row) {
            *o = *o + v;
        }
    }
    out
}
