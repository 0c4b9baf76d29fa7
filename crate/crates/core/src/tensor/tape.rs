use super::{gemm_nt, gemm_tn, Result, Tensor, TensorError};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
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
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulScalar(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Exp(Var),
    Softplus(Var),
    Abs(Var),
    Clamp(Var, f64, f64),
    Maximum(Var, Var),
    Minimum(Var, Var),
    SoftmaxRows(Var),
    LogSoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    MinLast(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    GatherRows(Var, Vec<usize>),
    Reshape(Var),
    MaxRows(Var, Vec<usize>),
    SegmentMax(Var, Vec<usize>),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Ordered record of primitive operations for one forward pass.
///
/// A tape belongs to a single logical step; build a fresh one per forward.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients produced by one backward pass, indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

fn slot<'g>(grads: &'g mut [Option<Tensor>], v: Var, shape: &[usize]) -> &'g mut [f64] {
    grads[v.0]
        .get_or_insert_with(|| Tensor::zeros(shape.to_vec()))
        .data_mut()
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records an input. Gradients are tracked iff `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        let needs_grad = t.requires_grad();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records an input that never receives gradient.
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.set_requires_grad(false);
        self.leaf(t)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    pub fn needs_grad(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn push(&mut self, name: &'static str, value: Tensor, op: Op, parents: &[Var]) -> Result<Var> {
        if !value.is_finite() {
            return Err(TensorError::NonFinite { op: name });
        }
        let needs_grad = parents.iter().any(|p| self.nodes[p.0].needs_grad);
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn unary(&mut self, name: &'static str, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a).map(f);
        self.push(name, v, op, &[a])
    }

    fn binary_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push(name, out, op, &[a, b])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(b))?;
        self.push("matmul", out, Op::MatMul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).transpose()?;
        self.push("transpose", out, Op::Transpose(a), &[a])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same("div", a, b, |x, y| x / y, Op::Div(a, b))
    }

    /// Elementwise max; ties go to `a`.
    pub fn maximum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(
            "maximum",
            a,
            b,
            |x, y| if x >= y { x } else { y },
            Op::Maximum(a, b),
        )
    }

    /// Elementwise min; ties go to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary_same(
            "minimum",
            a,
            b,
            |x, y| if x <= y { x } else { y },
            Op::Minimum(a, b),
        )
    }

    /// Adds a vector with `cols(a)` entries to every row of `a`.
    pub fn add_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(mismatch("add_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x += y;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("add_row", out, Op::AddRow(a, b), &[a, b])
    }

    /// Multiplies every row of `a` elementwise by a vector with `cols(a)` entries.
    pub fn mul_row(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let n = ta.cols();
        if tb.numel() != n {
            return Err(mismatch("mul_row", ta, tb));
        }
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            for (x, y) in row.iter_mut().zip(tb.data()) {
                *x *= y;
            }
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("mul_row", out, Op::MulRow(a, b), &[a, b])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("scale", a, |x| x * c, Op::Scale(a, c))
    }

    pub fn neg(&mut self, a: Var) -> Result<Var> {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Result<Var> {
        self.unary("add_scalar", a, |x| x + c, Op::AddScalar(a))
    }

    /// `a * s` where `s` holds a single element.
    pub fn mul_scalar(&mut self, a: Var, s: Var) -> Result<Var> {
        let ts = self.value(s);
        if ts.numel() != 1 {
            return Err(mismatch("mul_scalar", self.value(a), ts));
        }
        let c = ts.data()[0];
        let out = self.value(a).map(|x| x * c);
        self.push("mul_scalar", out, Op::MulScalar(a, s), &[a, s])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.unary("relu", a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var> {
        self.unary("sigmoid", a, sigmoid, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        self.unary("exp", a, f64::exp, Op::Exp(a))
    }

    /// ln(1 + e^x), evaluated stably.
    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        self.unary("softplus", a, softplus, Op::Softplus(a))
    }

    pub fn abs(&mut self, a: Var) -> Result<Var> {
        self.unary("abs", a, f64::abs, Op::Abs(a))
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        self.unary("clamp", a, |x| x.clamp(lo, hi), Op::Clamp(a, lo, hi))
    }

    /// Row-wise softmax over the last axis with max subtraction.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            softmax_in_place(row);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("softmax_rows", out, Op::SoftmaxRows(a), &[a])
    }

    pub fn log_softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ta = self.value(a);
        let n = ta.cols();
        let mut data = ta.data().to_vec();
        for row in data.chunks_mut(n) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + row.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
            row.iter_mut().for_each(|x| *x -= lse);
        }
        let out = Tensor::from_parts(ta.shape().to_vec(), data);
        self.push("log_softmax_rows", out, Op::LogSoftmaxRows(a), &[a])
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gain` and `bias` (each with `cols(x)` entries).
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let d = tx.cols();
        if tg.numel() != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if tb.numel() != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let rows = tx.rows();
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * tg.data()[j] + tb.data()[j];
            }
        }
        let out = Tensor::from_parts(tx.shape().to_vec(), out);
        self.push(
            "layer_norm",
            out,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Sum of all elements, shape `[1]`.
    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data().iter().sum::<f64>();
        self.push("sum", Tensor::scalar(s), Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push("mean", Tensor::scalar(s), Op::Mean(a), &[a])
    }

    /// Sums the last axis: `[.. × n] → [rows × 1]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let data: Vec<f64> = t.data().chunks(n).map(|r| r.iter().sum()).collect();
        let out = Tensor::from_parts(vec![data.len(), 1], data);
        self.push("sum_last", out, Op::SumLast(a), &[a])
    }

    /// Minimum over the last axis: `[.. × n] → [rows × 1]`; ties go to the lowest column.
    pub fn min_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let n = t.cols();
        let mut arg = Vec::with_capacity(t.rows());
        let mut data = Vec::with_capacity(t.rows());
        for row in t.data().chunks(n) {
            let mut best = 0;
            for j in 1..n {
                if row[j] < row[best] {
                    best = j;
                }
            }
            arg.push(best);
            data.push(row[best]);
        }
        let out = Tensor::from_parts(vec![data.len(), 1], data);
        self.push("min_last", out, Op::MinLast(a, arg), &[a])
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("slice_cols")?;
        if start >= end || end > n {
            return Err(TensorError::IndexOutOfRange {
                op: "slice_cols",
                index: end,
                len: n,
            });
        }
        let w = end - start;
        let mut data = Vec::with_capacity(m * w);
        for r in 0..m {
            data.extend_from_slice(&t.data()[r * n + start..r * n + end]);
        }
        let out = Tensor::from_parts(vec![m, w], data);
        self.push("slice_cols", out, Op::SliceCols(a, start), &[a])
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_cols",
            shape: vec![],
            reason: "no inputs".into(),
        })?);
        let (m, _) = first.dims2("concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.dims2("concat_cols")?;
            if pm != m {
                return Err(mismatch("concat_cols", first, t));
            }
            widths.push(pn);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(m * total);
        for r in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[r * w..(r + 1) * w]);
            }
        }
        let out = Tensor::from_parts(vec![m, total], data);
        self.push("concat_cols", out, Op::ConcatCols(parts.to_vec()), parts)
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = self.value(*parts.first().ok_or_else(|| TensorError::InvalidShape {
            op: "concat_rows",
            shape: vec![],
            reason: "no inputs".into(),
        })?);
        let (_, n) = first.dims2("concat_rows")?;
        let mut data = Vec::new();
        let mut m = 0;
        for &p in parts {
            let t = self.value(p);
            let (pm, pn) = t.dims2("concat_rows")?;
            if pn != n {
                return Err(mismatch("concat_rows", first, t));
            }
            m += pm;
            data.extend_from_slice(t.data());
        }
        let out = Tensor::from_parts(vec![m, n], data);
        self.push("concat_rows", out, Op::ConcatRows(parts.to_vec()), parts)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("gather_rows")?;
        if idx.is_empty() {
            return Err(TensorError::InvalidShape {
                op: "gather_rows",
                shape: vec![0, n],
                reason: "empty index list".into(),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            if i >= m {
                return Err(TensorError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: m,
                });
            }
            data.extend_from_slice(&t.data()[i * n..(i + 1) * n]);
        }
        let out = Tensor::from_parts(vec![idx.len(), n], data);
        self.push("gather_rows", out, Op::GatherRows(a, idx.to_vec()), &[a])
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let idx: Vec<usize> = (start..end).collect();
        self.gather_rows(a, &idx)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).reshape(shape.to_vec())?;
        self.push("reshape", out, Op::Reshape(a), &[a])
    }

    /// Column-wise max over rows: `[m × n] → [1 × n]`; ties go to the lowest row.
    pub fn max_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("max_rows")?;
        let (data, arg) = segment_max(t.data(), m, n, m);
        let out = Tensor::from_parts(vec![1, n], data);
        self.push("max_rows", out, Op::MaxRows(a, arg), &[a])
    }

    /// Max over consecutive groups of `seg` rows: `[g·seg × n] → [g × n]`.
    pub fn segment_max(&mut self, a: Var, seg: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = t.dims2("segment_max")?;
        if seg == 0 || m % seg != 0 {
            return Err(TensorError::InvalidShape {
                op: "segment_max",
                shape: t.shape().to_vec(),
                reason: format!("rows not divisible by segment size {seg}"),
            });
        }
        let (data, arg) = segment_max(t.data(), m, n, seg);
        let out = Tensor::from_parts(vec![m / seg, n], data);
        self.push("segment_max", out, Op::SegmentMax(a, arg), &[a])
    }

    /// Reverse pass from a single-element `root`, seeded with 1.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let t = self.value(root);
        if t.numel() != 1 {
            return Err(TensorError::InvalidShape {
                op: "backward",
                shape: t.shape().to_vec(),
                reason: "root must hold one element".into(),
            });
        }
        let seed = Tensor::ones(t.shape().to_vec());
        self.backward_with(root, seed)
    }

    pub fn backward_with(&self, root: Var, seed: Tensor) -> Result<Gradients> {
        if seed.shape() != self.shape(root) {
            return Err(mismatch("backward_with", self.value(root), &seed));
        }
        let mask: Vec<bool> = self.nodes.iter().map(|n| n.needs_grad).collect();
        let grads = self.run_backward(root, seed, 0, &mask)?;
        Ok(Gradients { grads })
    }

    /// Gradients of a scalar `root` with respect to `wrt` only. The reverse
    /// pass stops at the earliest node in `wrt`, so asking for gradients of
    /// late intermediates is cheap. Variables with no path to `root` get zeros.
    pub fn grads_wrt(&self, root: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let floor = wrt.iter().map(|v| v.0).min().unwrap_or(root.0);
        let mut relevant = vec![false; self.nodes.len()];
        for &w in wrt {
            relevant[w.0] = true;
        }
        for i in floor..=root.0 {
            if relevant[i] {
                continue;
            }
            relevant[i] = parents(&self.nodes[i].op)
                .iter()
                .any(|p| p.0 >= floor && relevant[p.0]);
        }
        let seed = Tensor::ones(self.shape(root).to_vec());
        let mut grads = self.run_backward(root, seed, floor, &relevant)?;
        Ok(wrt
            .iter()
            .map(|w| {
                grads[w.0]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.shape(*w).to_vec()))
            })
            .collect())
    }

    fn run_backward(
        &self,
        root: Var,
        seed: Tensor,
        floor: usize,
        mask: &[bool],
    ) -> Result<Vec<Option<Tensor>>> {
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(seed);
        for i in (floor..=root.0).rev() {
            if !mask[i] {
                continue;
            }
            let g = match grads[i].take() {
                Some(g) => g,
                None => continue,
            };
            self.backprop_node(i, &g, &mut grads, mask);
            grads[i] = Some(g);
        }
        for g in grads.iter().flatten() {
            if !g.is_finite() {
                return Err(TensorError::NonFinite { op: "backward" });
            }
        }
        Ok(grads)
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>], mask: &[bool]) {
        let node = &self.nodes[i];
        let y = &node.value;
        let gd = g.data();
        let want = |v: &Var| mask[v.0];
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = val(a).dims2("matmul").unwrap();
                let n = val(b).cols();
                if want(a) {
                    let mut tmp = vec![0.0; m * k];
                    gemm_nt(gd, val(b).data(), &mut tmp, m, n, k);
                    add_into(slot(grads, *a, val(a).shape()), &tmp);
                }
                if want(b) {
                    let mut tmp = vec![0.0; k * n];
                    gemm_tn(val(a).data(), gd, &mut tmp, m, k, n);
                    add_into(slot(grads, *b, val(b).shape()), &tmp);
                }
            }
            Op::Transpose(a) => {
                if want(a) {
                    let gt = g.transpose().unwrap();
                    add_into(slot(grads, *a, val(a).shape()), gt.data());
                }
            }
            Op::Add(a, b) => {
                if want(a) {
                    add_into(slot(grads, *a, y.shape()), gd);
                }
                if want(b) {
                    add_into(slot(grads, *b, y.shape()), gd);
                }
            }
            Op::Sub(a, b) => {
                if want(a) {
                    add_into(slot(grads, *a, y.shape()), gd);
                }
                if want(b) {
                    let s = slot(grads, *b, y.shape());
                    for (o, x) in s.iter_mut().zip(gd) {
                        *o -= x;
                    }
                }
            }
            Op::Mul(a, b) => {
                if want(a) {
                    let bv = val(b).data();
                    let s = slot(grads, *a, y.shape());
                    for ((o, x), w) in s.iter_mut().zip(gd).zip(bv) {
                        *o += x * w;
                    }
                }
                if want(b) {
                    let av = val(a).data();
                    let s = slot(grads, *b, y.shape());
                    for ((o, x), w) in s.iter_mut().zip(gd).zip(av) {
                        *o += x * w;
                    }
                }
            }
            Op::Div(a, b) => {
                let (av, bv) = (val(a).data(), val(b).data());
                if want(a) {
                    let s = slot(grads, *a, y.shape());
                    for ((o, x), w) in s.iter_mut().zip(gd).zip(bv) {
                        *o += x / w;
                    }
                }
                if want(b) {
                    let s = slot(grads, *b, y.shape());
                    for (j, o) in s.iter_mut().enumerate() {
                        *o -= gd[j] * av[j] / (bv[j] * bv[j]);
                    }
                }
            }
            Op::Maximum(a, b) | Op::Minimum(a, b) => {
                let is_max = matches!(node.op, Op::Maximum(..));
                let (av, bv) = (val(a).data(), val(b).data());
                let pick_a = |j: usize| {
                    if is_max {
                        av[j] >= bv[j]
                    } else {
                        av[j] <= bv[j]
                    }
                };
                if want(a) {
                    let s = slot(grads, *a, y.shape());
                    for (j, o) in s.iter_mut().enumerate() {
                        if pick_a(j) {
                            *o += gd[j];
                        }
                    }
                }
                if want(b) {
                    let s = slot(grads, *b, y.shape());
                    for (j, o) in s.iter_mut().enumerate() {
                        if !pick_a(j) {
                            *o += gd[j];
                        }
                    }
                }
            }
            Op::AddRow(a, b) => {
                if want(a) {
                    add_into(slot(grads, *a, y.shape()), gd);
                }
                if want(b) {
                    let n = y.cols();
                    let s = slot(grads, *b, val(b).shape());
                    for row in gd.chunks(n) {
                        add_into(s, row);
                    }
                }
            }
            Op::MulRow(a, b) => {
                let n = y.cols();
                if want(a) {
                    let bv = val(b).data();
                    let s = slot(grads, *a, y.shape());
                    for (srow, grow) in s.chunks_mut(n).zip(gd.chunks(n)) {
                        for j in 0..n {
                            srow[j] += grow[j] * bv[j];
                        }
                    }
                }
                if want(b) {
                    let av = val(a).data();
                    let s = slot(grads, *b, val(b).shape());
                    for (arow, grow) in av.chunks(n).zip(gd.chunks(n)) {
                        for j in 0..n {
                            s[j] += grow[j] * arow[j];
                        }
                    }
                }
            }
            Op::Scale(a, c) => {
                if want(a) {
                    let s = slot(grads, *a, y.shape());
                    for (o, x) in s.iter_mut().zip(gd) {
                        *o += c * x;
                    }
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if want(a) {
                    add_into(slot(grads, *a, val(a).shape()), gd);
                }
            }
            Op::MulScalar(a, sv) => {
                let c = val(sv).data()[0];
                if want(a) {
                    let s = slot(grads, *a, y.shape());
                    for (o, x) in s.iter_mut().zip(gd) {
                        *o += c * x;
                    }
                }
                if want(sv) {
                    let dot: f64 = gd.iter().zip(val(a).data()).map(|(x, w)| x * w).sum();
                    slot(grads, *sv, val(sv).shape())[0] += dot;
                }
            }
            Op::Relu(a) => elementwise(
                grads,
                *a,
                y,
                gd,
                mask,
                |_, _, xa| if xa > 0.0 { 1.0 } else { 0.0 },
                val(a),
            ),
            Op::Sigmoid(a) => {
                elementwise(grads, *a, y, gd, mask, |_, yv, _| yv * (1.0 - yv), val(a))
            }
            Op::Exp(a) => elementwise(grads, *a, y, gd, mask, |_, yv, _| yv, val(a)),
            Op::Softplus(a) => elementwise(grads, *a, y, gd, mask, |_, _, xa| sigmoid(xa), val(a)),
            Op::Abs(a) => elementwise(
                grads,
                *a,
                y,
                gd,
                mask,
                |_, _, xa| {
                    if xa > 0.0 {
                        1.0
                    } else if xa < 0.0 {
                        -1.0
                    } else {
                        0.0
                    }
                },
                val(a),
            ),
            Op::Clamp(a, lo, hi) => {
                let (lo, hi) = (*lo, *hi);
                elementwise(
                    grads,
                    *a,
                    y,
                    gd,
                    mask,
                    move |_, _, xa| if xa >= lo && xa <= hi { 1.0 } else { 0.0 },
                    val(a),
                )
            }
            Op::SoftmaxRows(a) => {
                if want(a) {
                    let n = y.cols();
                    let s = slot(grads, *a, y.shape());
                    for ((srow, yrow), grow) in
                        s.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n))
                    {
                        let dot: f64 = yrow.iter().zip(grow).map(|(p, q)| p * q).sum();
                        for j in 0..n {
                            srow[j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::LogSoftmaxRows(a) => {
                if want(a) {
                    let n = y.cols();
                    let s = slot(grads, *a, y.shape());
                    for ((srow, yrow), grow) in
                        s.chunks_mut(n).zip(y.data().chunks(n)).zip(gd.chunks(n))
                    {
                        let gsum: f64 = grow.iter().sum();
                        for j in 0..n {
                            srow[j] += grow[j] - yrow[j].exp() * gsum;
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = y.cols();
                let gv = val(gain).data();
                if want(x) {
                    let s = slot(grads, *x, y.shape());
                    let mut gg = vec![0.0; d];
                    for (r, rs) in rstd.iter().enumerate() {
                        let grow = &gd[r * d..(r + 1) * d];
                        let hrow = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            gg[j] = grow[j] * gv[j];
                        }
                        let mean_gg = gg.iter().sum::<f64>() / d as f64;
                        let mean_ggh =
                            gg.iter().zip(hrow).map(|(p, q)| p * q).sum::<f64>() / d as f64;
                        let srow = &mut s[r * d..(r + 1) * d];
                        for j in 0..d {
                            srow[j] += rs * (gg[j] - mean_gg - hrow[j] * mean_ggh);
                        }
                    }
                }
                if want(gain) {
                    let s = slot(grads, *gain, val(gain).shape());
                    for (grow, hrow) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            s[j] += grow[j] * hrow[j];
                        }
                    }
                }
                if want(bias) {
                    let s = slot(grads, *bias, val(bias).shape());
                    for grow in gd.chunks(d) {
                        add_into(s, grow);
                    }
                }
            }
            Op::Sum(a) => {
                if want(a) {
                    let s = slot(grads, *a, val(a).shape());
                    s.iter_mut().for_each(|o| *o += gd[0]);
                }
            }
            Op::Mean(a) => {
                if want(a) {
                    let s = slot(grads, *a, val(a).shape());
                    let c = gd[0] / s.len() as f64;
                    s.iter_mut().for_each(|o| *o += c);
                }
            }
            Op::SumLast(a) => {
                if want(a) {
                    let n = val(a).cols();
                    let s = slot(grads, *a, val(a).shape());
                    for (srow, gv) in s.chunks_mut(n).zip(gd) {
                        srow.iter_mut().for_each(|o| *o += gv);
                    }
                }
            }
            Op::MinLast(a, arg) => {
                if want(a) {
                    let n = val(a).cols();
                    let s = slot(grads, *a, val(a).shape());
                    for (r, &j) in arg.iter().enumerate() {
                        s[r * n + j] += gd[r];
                    }
                }
            }
            Op::SliceCols(a, start) => {
                if want(a) {
                    let n = val(a).cols();
                    let w = y.cols();
                    let s = slot(grads, *a, val(a).shape());
                    for (r, grow) in gd.chunks(w).enumerate() {
                        add_into(&mut s[r * n + start..r * n + start + w], grow);
                    }
                }
            }
            Op::ConcatCols(parts) => {
                let total = y.cols();
                let mut offset = 0;
                for p in parts {
                    let w = val(p).cols();
                    if want(p) {
                        let s = slot(grads, *p, val(p).shape());
                        for (r, srow) in s.chunks_mut(w).enumerate() {
                            add_into(srow, &gd[r * total + offset..r * total + offset + w]);
                        }
                    }
                    offset += w;
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = val(p).numel();
                    if want(p) {
                        add_into(slot(grads, *p, val(p).shape()), &gd[offset..offset + len]);
                    }
                    offset += len;
                }
            }
            Op::GatherRows(a, idx) => {
                if want(a) {
                    let n = y.cols();
                    let s = slot(grads, *a, val(a).shape());
                    for (r, &src) in idx.iter().enumerate() {
                        add_into(&mut s[src * n..(src + 1) * n], &gd[r * n..(r + 1) * n]);
                    }
                }
            }
            Op::MaxRows(a, arg) | Op::SegmentMax(a, arg) => {
                if want(a) {
                    let n = y.cols();
                    let s = slot(grads, *a, val(a).shape());
                    for (k, &src_row) in arg.iter().enumerate() {
                        let j = k % n;
                        s[src_row * n + j] += gd[k];
                    }
                }
            }
        }
    }
}

fn parents(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul(a, b)
        | Op::Add(a, b)
        | Op::Sub(a, b)
        | Op::Mul(a, b)
        | Op::Div(a, b)
        | Op::AddRow(a, b)
        | Op::MulRow(a, b)
        | Op::MulScalar(a, b)
        | Op::Maximum(a, b)
        | Op::Minimum(a, b) => vec![*a, *b],
        Op::Transpose(a)
        | Op::Scale(a, _)
        | Op::AddScalar(a)
        | Op::Relu(a)
        | Op::Sigmoid(a)
        | Op::Exp(a)
        | Op::Softplus(a)
        | Op::Abs(a)
        | Op::Clamp(a, _, _)
        | Op::SoftmaxRows(a)
        | Op::LogSoftmaxRows(a)
        | Op::Sum(a)
        | Op::Mean(a)
        | Op::SumLast(a)
        | Op::MinLast(a, _)
        | Op::SliceCols(a, _)
        | Op::GatherRows(a, _)
        | Op::Reshape(a)
        | Op::MaxRows(a, _)
        | Op::SegmentMax(a, _) => vec![*a],
        Op::LayerNorm { x, gain, bias, .. } => vec![*x, *gain, *bias],
        Op::ConcatCols(p) | Op::ConcatRows(p) => p.clone(),
    }
}

fn elementwise(
    grads: &mut [Option<Tensor>],
    a: Var,
    y: &Tensor,
    gd: &[f64],
    mask: &[bool],
    dydx: impl Fn(usize, f64, f64) -> f64,
    xa: &Tensor,
) {
    if !mask[a.0] {
        return;
    }
    let s = slot(grads, a, y.shape());
    for (j, o) in s.iter_mut().enumerate() {
        *o += gd[j] * dydx(j, y.data()[j], xa.data()[j]);
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn segment_max(data: &[f64], m: usize, n: usize, seg: usize) -> (Vec<f64>, Vec<usize>) {
    let groups = m / seg;
    let mut out = vec![0.0; groups * n];
    let mut arg = vec![0; groups * n];
    for g in 0..groups {
        for j in 0..n {
            let mut best = g * seg;
            for r in g * seg + 1..(g + 1) * seg {
                if data[r * n + j] > data[best * n + j] {
                    best = r;
                }
            }
            out[g * n + j] = data[best * n + j];
            arg[g * n + j] = best;
        }
    }
    (out, arg)
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - mx).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}
