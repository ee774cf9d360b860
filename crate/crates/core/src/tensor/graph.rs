use super::kernels::{gelu_grad_scalar, gelu_scalar, gemm, softmax_row, MatRef, LAYER_NORM_EPS};
use super::{Result, Tensor, TensorError};

/// Handle to a node on a [`Graph`]. Only meaningful for the graph that
/// created it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Vector-Jacobian product for a custom operation: receives the gradient of
/// the op's output and returns one optional gradient buffer per input.
pub type BackwardFn = Box<dyn Fn(&[f64]) -> Vec<Option<Vec<f64>>> + Send + Sync>;

enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Scale(NodeId, f64),
    AddBias(NodeId, NodeId),
    MatMul {
        a: NodeId,
        b: NodeId,
        ta: bool,
        tb: bool,
    },
    Gelu(NodeId),
    LayerNorm {
        x: NodeId,
        gain: NodeId,
        bias: NodeId,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SoftmaxRows(NodeId),
    SliceCols {
        x: NodeId,
        start: usize,
    },
    ConcatCols(Vec<NodeId>),
    Reshape(NodeId),
    MaxPoolGroups {
        x: NodeId,
        argmax: Vec<usize>,
    },
    RepeatRows {
        x: NodeId,
        times: usize,
    },
    MeanRows(NodeId),
    Sum(NodeId),
    SoftmaxCrossEntropy {
        logits: NodeId,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Custom {
        inputs: Vec<NodeId>,
        backward: BackwardFn,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is a topological order of the
/// dataflow graph, so backward is a single reverse sweep.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
    grads: Vec<Option<Vec<f64>>>,
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
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

    /// Drops every node and gradient.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.grads.clear();
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        debug_assert!(
            !value.data().iter().any(|v| v.is_nan()),
            "NaN produced by forward op"
        );
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        NodeId(self.nodes.len() - 1)
    }

    fn rg(&self, ids: &[NodeId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].requires_grad)
    }

    /// Differentiable input.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Input that never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    pub fn requires_grad(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    /// Gradient accumulated by the last [`Graph::backward`] call.
    pub fn grad(&self, id: NodeId) -> Option<Tensor> {
        let g = self.grads.get(id.0)?.as_ref()?;
        Some(Tensor::new(self.nodes[id.0].value.shape(), g.clone()).expect("grad shape"))
    }

    /// Gradient buffer; zeros when the node was unreachable from the loss.
    pub fn grad_or_zeros(&self, id: NodeId) -> Tensor {
        self.grad(id)
            .unwrap_or_else(|| Tensor::zeros(self.nodes[id.0].value.shape()))
    }

    fn binary_same(
        &mut self,
        op: &'static str,
        a: NodeId,
        b: NodeId,
        f: impl Fn(f64, f64) -> f64,
        mk: impl FnOnce(NodeId, NodeId) -> Op,
    ) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.shape() != vb.shape() {
            return Err(shape_err(op, va, vb));
        }
        let data = va.data().iter().zip(vb.data()).map(|(&x, &y)| f(x, y)).collect();
        let out = Tensor::new(va.shape(), data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, mk(a, b), rg))
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub)
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, x: NodeId, factor: f64) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|a| a * factor).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Scale(x, factor), rg)
    }

    /// Adds a length-`c` vector to every row of an `r×c` matrix.
    pub fn add_bias(&mut self, x: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vb) = (self.value(x), self.value(bias));
        if vb.len() != vx.cols() {
            return Err(shape_err("add_bias", vx, vb));
        }
        let c = vx.cols();
        let mut data = vx.data().to_vec();
        for row in data.chunks_mut(c) {
            for (v, b) in row.iter_mut().zip(vb.data()) {
                *v += b;
            }
        }
        let out = Tensor::new(vx.shape(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(out, Op::AddBias(x, bias), rg))
    }

    fn matmul_impl(&mut self, a: NodeId, b: NodeId, ta: bool, tb: bool) -> Result<NodeId> {
        let (va, vb) = (self.value(a), self.value(b));
        let ma = MatRef {
            data: va.data(),
            rows: va.rows(),
            cols: va.cols(),
            transposed: ta,
        };
        let mb = MatRef {
            data: vb.data(),
            rows: vb.rows(),
            cols: vb.cols(),
            transposed: tb,
        };
        let (m, k) = if ta { (ma.cols, ma.rows) } else { (ma.rows, ma.cols) };
        let (k2, n) = if tb { (mb.cols, mb.rows) } else { (mb.rows, mb.cols) };
        if va.rank() != 2 || vb.rank() != 2 || k != k2 {
            return Err(shape_err("matmul", va, vb));
        }
        let mut out = vec![0.0; m * n];
        gemm(ma, mb, &mut out, 0.0);
        let out = Tensor::new(&[m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(out, Op::MatMul { a, b, ta, tb }, rg))
    }

    /// Matrix product `a · b` of an m×k and a k×n matrix.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false, false)
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        self.matmul_impl(a, b, false, true)
    }

    pub fn gelu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let out = Tensor::new(v.shape(), v.data().iter().map(|&a| gelu_scalar(a)).collect())
            .expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::Gelu(x), rg)
    }

    /// Per-row normalization to zero mean and unit variance followed by an
    /// affine map with `gain` and `bias` of length `D`.
    pub fn layer_norm(&mut self, x: NodeId, gain: NodeId, bias: NodeId) -> Result<NodeId> {
        let (vx, vg, vb) = (self.value(x), self.value(gain), self.value(bias));
        let d = vx.cols();
        if d < 2 {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: format!("row width {d} < 2"),
            });
        }
        if vg.len() != d || vb.len() != d {
            return Err(shape_err("layer_norm", vx, vg));
        }
        let rows = vx.rows();
        let mut xhat = vec![0.0; rows * d];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; rows * d];
        for r in 0..rows {
            let row = vx.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let h = (row[c] - mean) * is;
                xhat[r * d + c] = h;
                out[r * d + c] = h * vg.data()[c] + vb.data()[c];
            }
        }
        let out = Tensor::new(vx.shape(), out)?;
        let rg = self.rg(&[x, gain, bias]);
        Ok(self.push(
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            },
            rg,
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let c = v.cols();
        let mut data = v.data().to_vec();
        for row in data.chunks_mut(c) {
            softmax_row(row);
        }
        let out = Tensor::new(v.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::SoftmaxRows(x), rg)
    }

    /// Columns `start..start+len` of a matrix.
    pub fn slice_cols(&mut self, x: NodeId, start: usize, len: usize) -> Result<NodeId> {
        let v = self.value(x);
        let c = v.cols();
        if len == 0 || start + len > c {
            return Err(TensorError::Invalid {
                op: "slice_cols",
                msg: format!("columns {start}..{} out of 0..{c}", start + len),
            });
        }
        let rows = v.rows();
        let mut data = Vec::with_capacity(rows * len);
        for r in 0..rows {
            data.extend_from_slice(&v.row(r)[start..start + len]);
        }
        let out = Tensor::new(&[rows, len], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::SliceCols { x, start }, rg))
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[NodeId]) -> Result<NodeId> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat_cols",
            msg: "no inputs".into(),
        })?;
        let rows = self.value(*first).rows();
        for p in parts {
            let v = self.value(*p);
            if v.rows() != rows {
                return Err(shape_err("concat_cols", self.value(*first), v));
            }
        }
        let total: usize = parts.iter().map(|p| self.value(*p).cols()).sum();
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(self.value(*p).row(r));
            }
        }
        let out = Tensor::new(&[rows, total], data)?;
        let rg = self.rg(parts);
        Ok(self.push(out, Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> Result<NodeId> {
        let out = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::Reshape(x), rg))
    }

    /// Column-wise max over consecutive blocks of `group` rows:
    /// `(g·group)×c → g×c`. Ties resolve to the earliest row.
    pub fn max_pool_groups(&mut self, x: NodeId, group: usize) -> Result<NodeId> {
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        if group == 0 || rows % group != 0 {
            return Err(TensorError::Invalid {
                op: "max_pool_groups",
                msg: format!("{rows} rows not divisible into groups of {group}"),
            });
        }
        let groups = rows / group;
        let mut out = vec![f64::NEG_INFINITY; groups * c];
        let mut argmax = vec![0usize; groups * c];
        for gi in 0..groups {
            for r in gi * group..(gi + 1) * group {
                let row = v.row(r);
                for j in 0..c {
                    let slot = gi * c + j;
                    if row[j] > out[slot] {
                        out[slot] = row[j];
                        argmax[slot] = r;
                    }
                }
            }
        }
        let out = Tensor::new(&[groups, c], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::MaxPoolGroups { x, argmax }, rg))
    }

    /// Repeats every row `times` times consecutively: `g×c → (g·times)×c`.
    pub fn repeat_rows(&mut self, x: NodeId, times: usize) -> Result<NodeId> {
        if times == 0 {
            return Err(TensorError::Invalid {
                op: "repeat_rows",
                msg: "times must be positive".into(),
            });
        }
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        let mut data = Vec::with_capacity(rows * times * c);
        for r in 0..rows {
            for _ in 0..times {
                data.extend_from_slice(v.row(r));
            }
        }
        let out = Tensor::new(&[rows * times, c], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(out, Op::RepeatRows { x, times }, rg))
    }

    /// Column means of a matrix, as a 1×c matrix.
    pub fn mean_rows(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x);
        let (rows, c) = (v.rows(), v.cols());
        let mut out = vec![0.0; c];
        for r in 0..rows {
            for (o, a) in out.iter_mut().zip(v.row(r)) {
                *o += a;
            }
        }
        for o in &mut out {
            *o /= rows as f64;
        }
        let out = Tensor::new(&[1, c], out).expect("shape");
        let rg = self.rg(&[x]);
        self.push(out, Op::MeanRows(x), rg)
    }

    pub fn sum(&mut self, x: NodeId) -> NodeId {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: NodeId) -> NodeId {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of
    /// `logits` (b×C).
    pub fn softmax_cross_entropy(&mut self, logits: NodeId, labels: &[usize]) -> Result<NodeId> {
        let v = self.value(logits);
        let (b, c) = (v.rows(), v.cols());
        if labels.len() != b || labels.iter().any(|&l| l >= c) {
            return Err(TensorError::Invalid {
                op: "softmax_cross_entropy",
                msg: format!("{} labels for {b}×{c} logits", labels.len()),
            });
        }
        let mut probs = v.data().to_vec();
        let mut loss = 0.0;
        for (r, row) in probs.chunks_mut(c).enumerate() {
            let lrow = v.row(r);
            let max = lrow.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + lrow.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            loss += lse - lrow[labels[r]];
            softmax_row(row);
        }
        let out = Tensor::scalar(loss / b as f64);
        let rg = self.rg(&[logits]);
        Ok(self.push(
            out,
            Op::SoftmaxCrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Records an operation whose forward value was computed by the caller.
    pub fn custom(&mut self, inputs: &[NodeId], value: Tensor, backward: BackwardFn) -> NodeId {
        let rg = self.rg(inputs);
        self.push(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                backward,
            },
            rg,
        )
    }

    /// Reverse sweep from a scalar `loss`, leaving gradients on every node
    /// that requires one and lies upstream of the loss.
    pub fn backward(&mut self, loss: NodeId) -> Result<()> {
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(TensorError::NotScalar(lv.shape().to_vec()));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        self.grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn propagate(&mut self, i: usize, g: &[f64]) {
        let (nodes, grads) = (&self.nodes, &mut self.grads);
        match &nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                for id in [*a, *b] {
                    if let Some(s) = slot(nodes, grads, id) {
                        s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::Sub(a, b) => {
                if let Some(s) = slot(nodes, grads, *a) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s -= g);
                }
            }
            Op::Mul(a, b) => {
                let va = nodes[a.0].value.data();
                let vb = nodes[b.0].value.data();
                if let Some(s) = slot(nodes, grads, *a) {
                    for j in 0..s.len() {
                        s[j] += g[j] * vb[j];
                    }
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    for j in 0..s.len() {
                        s[j] += g[j] * va[j];
                    }
                }
            }
            Op::Scale(x, f) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g * f);
                }
            }
            Op::AddBias(x, b) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
                if let Some(s) = slot(nodes, grads, *b) {
                    let c = s.len();
                    for row in g.chunks(c) {
                        s.iter_mut().zip(row).for_each(|(s, g)| *s += g);
                    }
                }
            }
            Op::MatMul { a, b, ta, tb } => matmul_backward(nodes, grads, *a, *b, *ta, *tb, i, g),
            Op::Gelu(x) => {
                let vx = nodes[x.0].value.data();
                if let Some(s) = slot(nodes, grads, *x) {
                    for j in 0..s.len() {
                        s[j] += g[j] * gelu_grad_scalar(vx[j]);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                inv_std,
            } => {
                let d = nodes[gain.0].value.len();
                let gv = nodes[gain.0].value.data();
                if let Some(s) = slot(nodes, grads, *gain) {
                    for (row_g, row_h) in g.chunks(d).zip(xhat.chunks(d)) {
                        for c in 0..d {
                            s[c] += row_g[c] * row_h[c];
                        }
                    }
                }
                if let Some(s) = slot(nodes, grads, *bias) {
                    for row_g in g.chunks(d) {
                        s.iter_mut().zip(row_g).for_each(|(s, g)| *s += g);
                    }
                }
                if let Some(s) = slot(nodes, grads, *x) {
                    let mut dxhat = vec![0.0; d];
                    for (r, (row_g, row_h)) in g.chunks(d).zip(xhat.chunks(d)).enumerate() {
                        for c in 0..d {
                            dxhat[c] = row_g[c] * gv[c];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(row_h).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for c in 0..d {
                            s[r * d + c] += inv_std[r] * (dxhat[c] - mean_d - row_h[c] * mean_dh);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                let y = nodes[i].value.data();
                let c = nodes[i].value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for ((srow, grow), yrow) in s.chunks_mut(c).zip(g.chunks(c)).zip(y.chunks(c)) {
                        let dot: f64 = grow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                        for j in 0..c {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = nodes[i].value.cols();
                let c = nodes[x.0].value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, grow) in g.chunks(len).enumerate() {
                        for j in 0..len {
                            s[r * c + start + j] += grow[j];
                        }
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = nodes[i].value.cols();
                let mut offset = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(s) = slot(nodes, grads, *p) {
                        for (r, grow) in g.chunks(total).enumerate() {
                            for j in 0..w {
                                s[r * w + j] += grow[offset + j];
                            }
                        }
                    }
                    offset += w;
                }
            }
            Op::Reshape(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().zip(g).for_each(|(s, g)| *s += g);
                }
            }
            Op::MaxPoolGroups { x, argmax } => {
                let c = nodes[i].value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for (slot, &r) in argmax.iter().enumerate() {
                        s[r * c + slot % c] += g[slot];
                    }
                }
            }
            Op::RepeatRows { x, times } => {
                let c = nodes[x.0].value.cols();
                if let Some(s) = slot(nodes, grads, *x) {
                    for (r, grow) in g.chunks(c).enumerate() {
                        let src = r / times;
                        for j in 0..c {
                            s[src * c + j] += grow[j];
                        }
                    }
                }
            }
            Op::MeanRows(x) => {
                let rows = nodes[x.0].value.rows();
                let c = g.len();
                if let Some(s) = slot(nodes, grads, *x) {
                    for srow in s.chunks_mut(c) {
                        for j in 0..c {
                            srow[j] += g[j] / rows as f64;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(s) = slot(nodes, grads, *x) {
                    s.iter_mut().for_each(|s| *s += g[0]);
                }
            }
            Op::SoftmaxCrossEntropy {
                logits,
                labels,
                probs,
            } => {
                let b = labels.len();
                let c = probs.len() / b;
                if let Some(s) = slot(nodes, grads, *logits) {
                    for r in 0..b {
                        for j in 0..c {
                            let onehot = if j == labels[r] { 1.0 } else { 0.0 };
                            s[r * c + j] += g[0] * (probs[r * c + j] - onehot) / b as f64;
                        }
                    }
                }
            }
            Op::Custom { inputs, backward } => {
                let contributions = backward(g);
                for (id, contrib) in inputs.iter().zip(contributions) {
                    if let (Some(contrib), Some(s)) = (contrib, slot(nodes, grads, *id)) {
                        s.iter_mut().zip(&contrib).for_each(|(s, c)| *s += c);
                    }
                }
            }
        }
    }
}

fn slot<'a>(
    nodes: &[Node],
    grads: &'a mut [Option<Vec<f64>>],
    id: NodeId,
) -> Option<&'a mut Vec<f64>> {
    if !nodes[id.0].requires_grad {
        return None;
    }
    let len = nodes[id.0].value.len();
    Some(accumulate(&mut grads[id.0], len))
}

#[allow(clippy::too_many_arguments)]
fn matmul_backward(
nodes: &[Node],
grads: &mut [Option<Vec<f64>>],
a: NodeId,
b: NodeId,
ta: bool,
tb: bool,
out: usize,
g: &[f64],
) {
    let (m, n) = (nodes[out].value.rows(), nodes[out].value.cols());
    let need_a = nodes[a.0].requires_grad;
    let need_b = nodes[b.0].requires_grad;
    let va = &nodes[a.0].value;
    let vb = &nodes[b.0].value;
    let ma = MatRef {
        data: va.data(),
        rows: va.rows(),
        cols: va.cols(),
        transposed: ta,
    };
    let mb = MatRef {
        data: vb.data(),
        rows: vb.rows(),
        cols: vb.cols(),
        transposed: tb,
    };
    let dc = MatRef::new(g, m, n);
    if need_a {
        let s = slot(nodes, grads, a).expect("requires grad");
        if ta {
            gemm(mb, dc.t(), s, 1.0);
        } else {
            gemm(dc, mb.t(), s, 1.0);
        }
    }
    if need_b {
        let s = slot(nodes, grads, b).expect("requires grad");
        if tb {
            gemm(dc.t(), ma, s, 1.0);
        } else {
            gemm(ma.t(), dc, s, 1.0);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(rows: &[&[f64]]) -> Tensor {
        Tensor::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_and_annihilating_products() {
        let mut g = Graph::new();
        let i2 = g.constant(t(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let m = g.constant(t(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let p = g.matmul(i2, m).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = g.constant(t(&[&[1.0, 0.0], &[0.0, 0.0]]));
        let b = g.constant(t(&[&[0.0], &[5.0]]));
        let p = g.matmul(a, b).unwrap();
        assert_eq!(g.value(p).shape(), &[2, 1]);
        assert_eq!(g.value(p).data(), &[0.0, 0.0]);
    }

    #[test]
    fn matmul_shape_mismatch_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("[2, 3]") && msg.contains("matmul"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[0.0, 0.0], &[1000.0, 1000.0], &[0.0, 3f64.ln()]]));
        let y = g.softmax_rows(x);
        let v = g.value(y).data();
        assert_eq!(&v[..4], &[0.5, 0.5, 0.5, 0.5]);
        assert!((v[4] - 0.25).abs() < 1e-15 && (v[5] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_reference_rows() {
        let mut g = Graph::new();
        let x = g.constant(t(&[&[3.0, 3.0, 3.0], &[1.0, -1.0, 0.0]]));
        let gain = g.constant(Tensor::full(&[3], 1.0));
        let bias = g.constant(Tensor::zeros(&[3]));
        let y = g.layer_norm(x, gain, bias).unwrap();
        assert_eq!(g.value(y).row(0), &[0.0, 0.0, 0.0]);

        let x2 = g.constant(t(&[&[1.0, -1.0]]));
        let gain2 = g.constant(Tensor::full(&[2], 1.0));
        let bias2 = g.constant(Tensor::zeros(&[2]));
        let y2 = g.layer_norm(x2, gain2, bias2).unwrap();
        let expected = 1.0 / (1.0 + LAYER_NORM_EPS).sqrt();
        assert!((g.value(y2).data()[0] - expected).abs() < 1e-15);
        assert!((g.value(y2).data()[1] + expected).abs() < 1e-15);
    }

    #[test]
    fn layer_norm_rejects_width_one() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 1]));
        let gain = g.constant(Tensor::full(&[1], 1.0));
        let bias = g.constant(Tensor::zeros(&[1]));
        assert!(g.layer_norm(x, gain, bias).is_err());
    }

    #[test]
    fn sum_gradient_is_all_ones() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::new(&[2, 3, 2], (0..12).map(f64::from).collect()).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 12]);
    }

    #[test]
    fn square_of_scalar_has_gradient_six_at_three() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::scalar(3.0));
        let y = g.mul(x, x).unwrap();
        g.backward(y).unwrap();
        assert_eq!(g.value(y).item(), 9.0);
        assert_eq!(g.grad(x).unwrap().item(), 6.0);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2, 2]));
        let y = g.gelu(x);
        assert_eq!(g.backward(y), Err(TensorError::NotScalar(vec![2, 2])));
    }

    #[test]
    fn constants_receive_no_gradient() {
        let mut g = Graph::new();
        let c = g.constant(Tensor::scalar(2.0));
        let x = g.leaf(Tensor::scalar(5.0));
        let y = g.mul(c, x).unwrap();
        g.backward(y).unwrap();
        assert!(g.grad(c).is_none());
        assert_eq!(g.grad(x).unwrap().item(), 2.0);
    }

    #[test]
    fn max_pool_routes_ties_to_first_row() {
        let mut g = Graph::new();
        let x = g.leaf(t(&[&[1.0, 5.0], &[1.0, 2.0], &[0.0, 7.0], &[4.0, 7.0]]));
        let p = g.max_pool_groups(x, 2).unwrap();
        assert_eq!(g.value(p).data(), &[1.0, 5.0, 4.0, 7.0]);
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(
            g.grad(x).unwrap().data(),
            &[1.0, 1.0, 0.0, 0.0, 0.0, 1.0, 1.0, 0.0]
        );
    }

    #[test]
    fn reset_clears_tape() {
        let mut g = Graph::new();
        g.leaf(Tensor::scalar(1.0));
        g.reset();
        assert!(g.is_empty());
    }
}
