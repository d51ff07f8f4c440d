use super::{matmul_raw, split_axis, Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    Scale(Var, f64),
    MatMul(Var, Var),
    Transpose(Var),
    Concat { inputs: Vec<Var>, axis: usize },
    Slice { input: Var, axis: usize, start: usize },
    Rows { table: Var, ids: Vec<usize> },
    Softmax { input: Var, axis: usize },
    LogSoftmax { input: Var, axis: usize },
    LayerNorm { input: Var, gain: Var, bias: Var, normed: Vec<f64>, inv_std: Vec<f64> },
    Gelu(Var),
    Ln(Var),
    Sum(Var),
    Mean(Var),
    Pick { input: Var, indices: Vec<usize> },
    /// Scalar whose gradient with respect to `input` was computed alongside its value.
    Fused { input: Var, local_grad: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Tensor>,
}

/// Append-only record of one forward pass.
///
/// Nodes are stored in creation order, which is a topological order: an
/// operation can only reference nodes that already exist.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn std_normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn std_normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
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

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// A leaf that accumulates gradients.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf that does not participate in differentiation.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    /// Accumulated gradient, present after a backward pass reached `v`.
    pub fn grad(&self, v: Var) -> Option<&Tensor> {
        self.nodes[v.0].grad.as_ref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn elementwise(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        make: impl FnOnce(Var, Var) -> Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(op, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, make(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul)
    }

    /// Adds a length-`n` vector to every row of an `m×n` matrix.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        if tx.rank() != 2 || tr.len() != tx.shape()[1] {
            return Err(mismatch("add_row", tx, tr));
        }
        let n = tr.len();
        let mut data = tx.data().to_vec();
        for chunk in data.chunks_mut(n) {
            for (d, &r) in chunk.iter_mut().zip(tr.data()) {
                *d += r;
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), data);
        let rg = self.rg(x) || self.rg(row);
        Ok(self.push(value, Op::AddRow(x, row), rg))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x * s).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Scale(a, s), rg))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(value, Op::MatMul(a, b), rg))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(TensorError::InvalidShape {
                op: "transpose",
                shape: ta.shape().to_vec(),
                reason: "expected a matrix".into(),
            });
        }
        let (m, n) = (ta.shape()[0], ta.shape()[1]);
        let value = Tensor::from_parts(vec![n, m], transpose_raw(ta.data(), m, n));
        let rg = self.rg(a);
        Ok(self.push(value, Op::Transpose(a), rg))
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = *inputs.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat",
            shape: vec![],
            reason: "no inputs".into(),
        })?;
        let base = self.value(first).shape().to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut total = 0;
        for &v in inputs {
            let s = self.value(v).shape();
            let same_rank = s.len() == base.len();
            if !same_rank || s.iter().zip(&base).enumerate().any(|(i, (x, y))| i != axis && x != y) {
                return Err(mismatch("concat", self.value(first), self.value(v)));
            }
            total += s[axis];
        }
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &v in inputs {
                let t = self.value(v);
                let width = t.shape()[axis] * inner;
                data.extend_from_slice(&t.data()[o * width..(o + 1) * width]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let rg = inputs.iter().any(|&v| self.rg(v));
        Ok(self.push(
            Tensor::from_parts(shape, data),
            Op::Concat {
                inputs: inputs.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Elements `start..end` along `axis`.
    pub fn slice(&mut self, a: Var, axis: usize, start: usize, end: usize) -> Result<Var> {
        let ta = self.value(a);
        let (outer, len, inner) = split_axis("slice", ta.shape(), axis)?;
        if start >= end || end > len {
            return Err(TensorError::InvalidShape {
                op: "slice",
                shape: ta.shape().to_vec(),
                reason: format!("range {start}..{end} invalid on axis {axis}"),
            });
        }
        let width = end - start;
        let mut data = Vec::with_capacity(outer * width * inner);
        for o in 0..outer {
            let base = o * len * inner;
            data.extend_from_slice(&ta.data()[base + start * inner..base + end * inner]);
        }
        let mut shape = ta.shape().to_vec();
        shape[axis] = width;
        let rg = self.rg(a);
        Ok(self.push(Tensor::from_parts(shape, data), Op::Slice { input: a, axis, start }, rg))
    }

    /// Embedding lookup: gathers rows of a matrix.
    pub fn rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let tt = self.value(table);
        if tt.rank() != 2 || ids.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "rows",
                shape: tt.shape().to_vec(),
                reason: "expected a matrix and at least one id".into(),
            });
        }
        let (n, d) = (tt.shape()[0], tt.shape()[1]);
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= n {
                return Err(TensorError::IndexOutOfRange {
                    op: "rows",
                    index: id,
                    bound: n,
                });
            }
            data.extend_from_slice(tt.row(id));
        }
        let rg = self.rg(table);
        Ok(self.push(
            Tensor::from_parts(vec![ids.len(), d], data),
            Op::Rows {
                table,
                ids: ids.to_vec(),
            },
            rg,
        ))
    }

    /// Flat-index gather into a vector.
    pub fn pick(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let ta = self.value(a);
        if indices.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "pick",
                shape: ta.shape().to_vec(),
                reason: "no indices".into(),
            });
        }
        let mut data = Vec::with_capacity(indices.len());
        for &i in indices {
            if i >= ta.len() {
                return Err(TensorError::IndexOutOfRange {
                    op: "pick",
                    index: i,
                    bound: ta.len(),
                });
            }
            data.push(ta.data()[i]);
        }
        let rg = self.rg(a);
        Ok(self.push(
            Tensor::from_parts(vec![indices.len()], data),
            Op::Pick {
                input: a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    fn softmax_values(&self, op: &'static str, a: Var, axis: usize, log: bool) -> Result<Tensor> {
        let ta = self.value(a);
        let (outer, len, inner) = split_axis(op, ta.shape(), axis)?;
        let src = ta.data();
        let mut out = vec![0.0; src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |k: usize| (o * len + k) * inner + i;
                let max = (0..len).map(|k| src[idx(k)]).fold(f64::NEG_INFINITY, f64::max);
                let sum: f64 = (0..len).map(|k| (src[idx(k)] - max).exp()).sum();
                if log {
                    let lse = max + sum.ln();
                    for k in 0..len {
                        out[idx(k)] = src[idx(k)] - lse;
                    }
                } else {
                    for k in 0..len {
                        out[idx(k)] = (src[idx(k)] - max).exp() / sum;
                    }
                }
            }
        }
        Ok(Tensor::from_parts(ta.shape().to_vec(), out))
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_values("softmax", a, axis, false)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::Softmax { input: a, axis }, rg))
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let value = self.softmax_values("log_softmax", a, axis, true)?;
        let rg = self.rg(a);
        Ok(self.push(value, Op::LogSoftmax { input: a, axis }, rg))
    }

    /// Normalizes each row over the last axis, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let tx = self.value(x);
        let n = *tx.shape().last().expect("non-empty shape");
        for p in [gain, bias] {
            if self.value(p).len() != n {
                return Err(mismatch("layer_norm", tx, self.value(p)));
            }
        }
        let (g, b) = (self.value(gain).data(), self.value(bias).data());
        let rows = tx.len() / n;
        let mut normed = vec![0.0; tx.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; tx.len()];
        for r in 0..rows {
            let row = &tx.data()[r * n..(r + 1) * n];
            let mean = row.iter().sum::<f64>() / n as f64;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for j in 0..n {
                let h = (row[j] - mean) * is;
                normed[r * n + j] = h;
                out[r * n + j] = h * g[j] + b[j];
            }
        }
        let value = Tensor::from_parts(tx.shape().to_vec(), out);
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            value,
            Op::LayerNorm {
                input: x,
                gain,
                bias,
                normed,
                inv_std,
            },
            rg,
        ))
    }

    /// Exact (erf-based) GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x * std_normal_cdf(x)).collect();
        let value = Tensor::from_parts(ta.shape().to_vec(), data);
        let rg = self.rg(a);
        Ok(self.push(value, Op::Gelu(a), rg))
    }

    /// Natural logarithm. Zero inputs give `-inf`.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let value = Tensor::from_parts(ta.shape().to_vec(), ta.data().iter().map(|x| x.ln()).collect());
        let rg = self.rg(a);
        Ok(self.push(value, Op::Ln(a), rg))
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum();
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(s), Op::Sum(a), rg))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Records a scalar computed outside the tape together with its exact
    /// gradient with respect to `input`.
    pub fn fused_scalar(&mut self, input: Var, value: f64, local_grad: Vec<f64>) -> Result<Var> {
        let ti = self.value(input);
        if local_grad.len() != ti.len() {
            return Err(TensorError::DataLength {
                shape: ti.shape().to_vec(),
                expected: ti.len(),
                actual: local_grad.len(),
            });
        }
        let rg = self.rg(input);
        Ok(self.push(Tensor::scalar(value), Op::Fused { input, local_grad }, rg))
    }

    /// Reverse sweep from a scalar root. Gradients are added to whatever the
    /// nodes already hold; call [`Graph::zero_grad`] to reset.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(TensorError::NonScalarRoot(root_value.shape().to_vec()));
        }
        if !self.rg(root) {
            return Ok(());
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(vec![1.0]);
        for idx in (0..=root.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut adj);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => node.grad = Some(Tensor::from_parts(node.value.shape().to_vec(), g)),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, 1.0));
            }
            Op::Sub(a, b) => {
                send(*a, &mut |s| axpy(s, g, 1.0));
                send(*b, &mut |s| axpy(s, g, -1.0));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                send(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * vb[i];
                    }
                });
                send(*b, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * va[i];
                    }
                });
            }
            Op::AddRow(x, row) => {
                send(*x, &mut |s| axpy(s, g, 1.0));
                send(*row, &mut |s| {
                    let n = s.len();
                    for chunk in g.chunks(n) {
                        axpy(s, chunk, 1.0);
                    }
                });
            }
            Op::Scale(a, k) => send(*a, &mut |s| axpy(s, g, *k)),
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                send(*a, &mut |s| {
                    // dA = G · Bᵀ
                    let bt = transpose_raw(tb.data(), k, n);
                    axpy(s, &matmul_raw(g, &bt, m, n, k), 1.0);
                });
                send(*b, &mut |s| {
                    // dB = Aᵀ · G
                    let at = transpose_raw(ta.data(), m, k);
                    axpy(s, &matmul_raw(&at, g, k, m, n), 1.0);
                });
            }
            Op::Transpose(a) => {
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                send(*a, &mut |s| axpy(s, &transpose_raw(g, m, n), 1.0));
            }
            Op::Concat { inputs, axis } => {
                let shape = node.value.shape();
                let inner: usize = shape[axis + 1..].iter().product();
                let outer: usize = shape[..*axis].iter().product();
                let total_width = shape[*axis] * inner;
                let mut offset = 0;
                for &v in inputs {
                    let width = self.value(v).shape()[*axis] * inner;
                    send(v, &mut |s| {
                        for o in 0..outer {
                            let src = &g[o * total_width + offset..o * total_width + offset + width];
                            axpy(&mut s[o * width..(o + 1) * width], src, 1.0);
                        }
                    });
                    offset += width;
                }
            }
            Op::Slice { input, axis, start } => {
                let in_shape = self.value(*input).shape();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let len = in_shape[*axis];
                let width = node.value.shape()[*axis] * inner;
                let outer = node.value.len() / width;
                send(*input, &mut |s| {
                    for o in 0..outer {
                        let base = o * len * inner + start * inner;
                        axpy(&mut s[base..base + width], &g[o * width..(o + 1) * width], 1.0);
                    }
                });
            }
            Op::Rows { table, ids } => {
                let d = node.value.shape()[1];
                send(*table, &mut |s| {
                    for (r, &id) in ids.iter().enumerate() {
                        axpy(&mut s[id * d..(id + 1) * d], &g[r * d..(r + 1) * d], 1.0);
                    }
                });
            }
            Op::Pick { input, indices } => send(*input, &mut |s| {
                for (k, &i) in indices.iter().enumerate() {
                    s[i] += g[k];
                }
            }),
            Op::Softmax { input, axis } | Op::LogSoftmax { input, axis } => {
                let log = matches!(node.op, Op::LogSoftmax { .. });
                let y = node.value.data();
                let (outer, len, inner) =
                    split_axis("softmax", node.value.shape(), *axis).expect("validated in forward");
                send(*input, &mut |s| {
                    for o in 0..outer {
                        for i in 0..inner {
                            let idx = |k: usize| (o * len + k) * inner + i;
                            if log {
                                let gsum: f64 = (0..len).map(|k| g[idx(k)]).sum();
                                for k in 0..len {
                                    s[idx(k)] += g[idx(k)] - y[idx(k)].exp() * gsum;
                                }
                            } else {
                                let dot: f64 = (0..len).map(|k| g[idx(k)] * y[idx(k)]).sum();
                                for k in 0..len {
                                    s[idx(k)] += y[idx(k)] * (g[idx(k)] - dot);
                                }
                            }
                        }
                    }
                });
            }
            Op::LayerNorm {
                input,
                gain,
                bias,
                normed,
                inv_std,
            } => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                send(*gain, &mut |s| {
                    for (gr, hr) in g.chunks(n).zip(normed.chunks(n)) {
                        for j in 0..n {
                            s[j] += gr[j] * hr[j];
                        }
                    }
                });
                send(*bias, &mut |s| {
                    for gr in g.chunks(n) {
                        axpy(s, gr, 1.0);
                    }
                });
                send(*input, &mut |s| {
                    for (r, (gr, hr)) in g.chunks(n).zip(normed.chunks(n)).enumerate() {
                        let gh: Vec<f64> = gr.iter().zip(gv).map(|(a, b)| a * b).collect();
                        let mean_gh = gh.iter().sum::<f64>() / n as f64;
                        let mean_ghh = gh.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / n as f64;
                        for j in 0..n {
                            s[r * n + j] += inv_std[r] * (gh[j] - mean_gh - hr[j] * mean_ghh);
                        }
                    }
                });
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                send(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] * (std_normal_cdf(x[i]) + x[i] * std_normal_pdf(x[i]));
                    }
                });
            }
            Op::Ln(a) => {
                let x = self.value(*a).data();
                send(*a, &mut |s| {
                    for i in 0..s.len() {
                        s[i] += g[i] / x[i];
                    }
                });
            }
            Op::Sum(a) => send(*a, &mut |s| s.iter_mut().for_each(|v| *v += g[0])),
            Op::Mean(a) => send(*a, &mut |s| {
                let k = g[0] / s.len() as f64;
                s.iter_mut().for_each(|v| *v += k);
            }),
            Op::Fused { input, local_grad } => send(*input, &mut |s| axpy(s, local_grad, g[0])),
        }
    }
}

fn axpy(dst: &mut [f64], src: &[f64], k: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += k * s;
    }
}

fn transpose_raw(a: &[f64], m: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a[i * n + j];
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn m(rows: &[Vec<f64>]) -> Tensor {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_case() {
        let mut g = Graph::new();
        let i2 = g.constant(Tensor::identity(2));
        let a = g.constant(m(&[vec![1.0, 2.0], vec![3.0, 4.0]]));
        let b = g.constant(m(&[vec![5.0, 6.0], vec![7.0, 8.0]]));
        let ia = g.matmul(i2, a).unwrap();
        assert_eq!(g.value(ia), g.value(a));
        let ab = g.matmul(a, b).unwrap();
        assert_eq!(g.value(ab).data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn shape_mismatch_names_op_and_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
        let c = g.constant(Tensor::zeros(&[3]));
        assert!(g.add(a, c).unwrap_err().to_string().contains("add"));
    }

    #[test]
    fn add_zero_is_identity() {
        let mut g = Graph::new();
        let x = g.constant(m(&[vec![1.5, -2.0]]));
        let z = g.constant(Tensor::zeros(&[1, 2]));
        let y = g.add(x, z).unwrap();
        assert_eq!(g.value(y), g.value(x));
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0; 4]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.25; 4]);

        let x = g.constant(Tensor::vector(vec![1000.0, 1000.0]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(s).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::vector(vec![0.0, 3f64.ln()]).unwrap());
        let s = g.softmax(x, 0).unwrap();
        assert!((g.value(s).data()[0] - 0.25).abs() < 1e-15);
        assert!((g.value(s).data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_rows_sum_to_one_and_log_matches() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(Tensor::randn(&[7, 5, 3], 4.0, &mut rng));
        for axis in 0..3 {
            let s = g.softmax(x, axis).unwrap();
            let ls = g.log_softmax(x, axis).unwrap();
            let (outer, len, inner) = split_axis("t", g.shape(x), axis).unwrap();
            let sv = g.value(s).data();
            for o in 0..outer {
                for i in 0..inner {
                    let total: f64 = (0..len).map(|k| sv[(o * len + k) * inner + i]).sum();
                    assert!((total - 1.0).abs() < 1e-12);
                }
            }
            for (a, b) in sv.iter().zip(g.value(ls).data()) {
                assert!((a.ln() - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let x = g.constant(Tensor::vector(vec![1.0, 1.0, 1.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 0.0]);

        let gain = g.constant(Tensor::full(&[2], 1.0));
        let bias = g.constant(Tensor::zeros(&[2]));
        let x = g.constant(Tensor::vector(vec![-1.0, 1.0]).unwrap());
        let y = g.layer_norm(x, gain, bias).unwrap();
        let v = g.value(y).data();
        // Only the 1e-5 stabilizer separates this from exactly [-1, 1].
        assert!((v[0] + 1.0).abs() < 1e-5 && (v[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn gelu_at_zero_and_known_value() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::vector(vec![0.0, 1.0]).unwrap());
        let y = g.gelu(x).unwrap();
        assert_eq!(g.value(y).data()[0], 0.0);
        // 1 · Φ(1) = 0.841344746...
        assert!((g.value(y).data()[1] - 0.841_344_746_068_543).abs() < 1e-12);
    }

    #[test]
    fn backward_examples() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert_eq!(g.grad(s).unwrap().data(), &[1.0]);

        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 4.0]);

        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(3.0));
        g.backward(c).unwrap();
        assert!(g.grad(c).is_none());
    }

    #[test]
    fn backward_rejects_non_scalar_root() {
        let mut g = Graph::new();
        let x = g.param(Tensor::zeros(&[2]));
        assert!(matches!(g.backward(x), Err(TensorError::NonScalarRoot(_))));
    }

    #[test]
    fn backward_accumulates_until_zeroed() {
        let mut g = Graph::new();
        let x = g.param(Tensor::vector(vec![1.0, 2.0]).unwrap());
        let s = g.sum(x).unwrap();
        g.backward(s).unwrap();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[2.0, 2.0]);
        g.zero_grad();
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn backward_is_linear_over_subgraphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let xv = Tensor::randn(&[3, 4], 1.0, &mut rng);
        let wv = Tensor::randn(&[4, 2], 1.0, &mut rng);
        let branch_a = |g: &mut Graph, x: Var, w: Var| {
            let y = g.matmul(x, w).unwrap();
            let y = g.gelu(y).unwrap();
            g.sum(y).unwrap()
        };
        let branch_b = |g: &mut Graph, x: Var| {
            let s = g.softmax(x, 1).unwrap();
            let l = g.ln(s).unwrap();
            g.mean(l).unwrap()
        };
        let mut g = Graph::new();
        let x = g.param(xv.clone());
        let w = g.constant(wv.clone());
        let a = branch_a(&mut g, x, w);
        let b = branch_b(&mut g, x);
        let total = g.add(a, b).unwrap();
        g.backward(total).unwrap();
        let joint = g.grad(x).unwrap().clone();

        let mut g = Graph::new();
        let x = g.param(xv);
        let w = g.constant(wv);
        let a = branch_a(&mut g, x, w);
        let b = branch_b(&mut g, x);
        g.backward(a).unwrap();
        g.backward(b).unwrap();
        assert!(joint.max_abs_diff(g.grad(x).unwrap()) < 1e-12);
    }

    #[test]
    fn softmax_then_index_grad_check() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = Tensor::randn(&[6], 1.0, &mut rng);
        let err = grad_check(
            |g, x| {
                let s = g.softmax(x, 0)?;
                g.pick(s, &[2])
            },
            &p,
            1e-5,
        )
        .unwrap();
        assert!(err <= 1e-6, "{err}");
    }

    #[test]
    fn slice_concat_rows_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2, 3], (0..6).map(f64::from).collect()).unwrap());
        let a = g.slice(x, 1, 1, 3).unwrap();
        assert_eq!(g.value(a).data(), &[1.0, 2.0, 4.0, 5.0]);
        let b = g.slice(x, 1, 0, 1).unwrap();
        let c = g.concat(&[b, a], 1).unwrap();
        assert_eq!(g.value(c), g.value(x));
        let r = g.rows(x, &[1, 0, 1]).unwrap();
        assert_eq!(g.value(r).data(), &[3.0, 4.0, 5.0, 0.0, 1.0, 2.0, 3.0, 4.0, 5.0]);
        assert!(g.rows(x, &[2]).is_err());
        assert!(g.slice(x, 1, 2, 4).is_err());
    }
}
