//! Wengert-list reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive evaluates eagerly, appends its output to the tape and
//! records what it needs for the backward sweep. Nodes are only ever appended,
//! so the tape is topologically ordered by construction and [`Tape::backward`]
//! is a single reverse pass.
//!
//! Elementwise binary primitives accept equal shapes, or a right operand whose
//! shape is a trailing suffix of the left operand's shape (it is then repeated
//! over the left operand's leading axes).
//!
//! Piecewise primitives (`relu`, `abs`, `clamp`, `minimum`) use the zero
//! subgradient at their kinks and fold the branch each element takes into
//! [`Tape::branch_signature`], which the gradient checker uses to detect
//! central differences that straddle a kink.

use super::{NumericsError, Tensor};

/// Handle to a value recorded on a [`Tape`].
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
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, c: f64 },
    AddScalar { a: usize },
    MatMul { a: usize, b: usize, m: usize, k: usize, n: usize },
    Transpose { a: usize, rows: usize, cols: usize },
    Relu { a: usize },
    Abs { a: usize },
    Exp { a: usize },
    Log { a: usize },
    Sigmoid { a: usize },
    Softplus { a: usize },
    Recip { a: usize },
    Clamp { a: usize, lo: f64, hi: f64 },
    Minimum { a: usize, b: usize },
    LayerNorm { a: usize, inv_std: Vec<f64> },
    Softmax { a: usize },
    Sum { a: usize },
    Mean { a: usize },
    RowSums { a: usize, cols: usize },
    ColSums { a: usize, cols: usize },
    ScaleRows { a: usize, s: usize, cols: usize },
    GatherRows { a: usize, idx: Vec<usize>, cols: usize },
    ScatterRows { a: usize, idx: Vec<usize>, cols: usize },
    Gather { a: usize, idx: Vec<usize> },
    SliceCols { a: usize, start: usize, cols: usize },
    ConcatCols { parts: Vec<(usize, usize)> },
    Reshape { a: usize },
}

struct Node {
    value: Tensor,
    op: Op,
}

/// Records primitive operations for one forward pass.
///
/// A tape is single-threaded; independent forward passes use independent
/// tapes.
pub struct Tape {
    nodes: Vec<Node>,
    branch_hash: u64,
}

const FNV_OFFSET: u64 = 0xcbf2_9ce4_8422_2325;
const FNV_PRIME: u64 = 0x0000_0100_0000_01b3;

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            branch_hash: FNV_OFFSET,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Hash of the branch taken by every piecewise primitive so far.
    pub fn branch_signature(&self) -> u64 {
        self.branch_hash
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> Result<f64, NumericsError> {
        self.value(v).item()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    fn note_branch(&mut self, code: u8) {
        self.branch_hash ^= code as u64;
        self.branch_hash = self.branch_hash.wrapping_mul(FNV_PRIME);
    }

    /// Records an input (parameter or constant).
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn constant_scalar(&mut self, value: f64) -> Var {
        self.leaf(Tensor::scalar(value))
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn check_broadcast(&self, op: &'static str, a: Var, b: Var) -> Result<(), NumericsError> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() <= sa.len() && sa[sa.len() - sb.len()..] == *sb {
            Ok(())
        } else {
            Err(NumericsError::ShapeMismatch {
                op,
                left: sa.to_vec(),
                right: sb.to_vec(),
            })
        }
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, NumericsError> {
        self.check_broadcast(name, a, b)?;
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let nb = vb.len();
        let data = va
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| f(x, vb.data()[i % nb]))
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        Ok(self.push(value, op))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("add", a, b, |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    /// `a / b` composed from `recip` and `mul`.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        self.check_broadcast("div", a, b)?;
        let r = self.recip(b);
        self.mul(a, r)
    }

    /// Elementwise minimum of two same-shaped tensors. The gradient goes to
    /// the smaller operand; ties go to `a`.
    pub fn minimum(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        if self.shape(a) != self.shape(b) {
            return Err(NumericsError::ShapeMismatch {
                op: "minimum",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let mut codes = Vec::with_capacity(va.len());
        let data = va
            .data()
            .iter()
            .zip(vb.data())
            .map(|(&x, &y)| {
                codes.push((x <= y) as u8);
                if x <= y {
                    x
                } else {
                    y
                }
            })
            .collect();
        let value = Tensor::from_parts(va.shape().to_vec(), data);
        for c in codes {
            self.note_branch(c);
        }
        Ok(self.push(value, Op::Minimum { a: a.0, b: b.0 }))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x * c);
        self.push(value, Op::Scale { a: a.0, c })
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        self.push(value, Op::AddScalar { a: a.0 })
    }

    /// `a @ b` where `a` is `[.., k]` (leading axes flattened into rows) and
    /// `b` is `[k, n]`. The result keeps `a`'s leading axes.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumericsError> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.is_empty() || sb.len() != 2 || sa[sa.len() - 1] != sb[0] {
            return Err(NumericsError::ShapeMismatch {
                op: "matmul",
                left: sa,
                right: sb,
            });
        }
        let va = &self.nodes[a.0].value;
        let vb = &self.nodes[b.0].value;
        let (m, k, n) = (va.rows(), sb[0], sb[1]);
        let out = matmul_kernel(va.data(), vb.data(), m, k, n);
        let mut shape = sa;
        *shape.last_mut().expect("rank checked") = n;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::MatMul { a: a.0, b: b.0, m, k, n }))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, NumericsError> {
        let s = self.shape(a).to_vec();
        if s.len() != 2 {
            return Err(NumericsError::RankMismatch {
                op: "transpose",
                expected: 2,
                shape: s,
            });
        }
        let (rows, cols) = (s[0], s[1]);
        let src = self.value(a).data();
        let mut out = vec![0.0; rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = src[r * cols + c];
            }
        }
        let value = Tensor::from_parts(vec![cols, rows], out);
        Ok(self.push(value, Op::Transpose { a: a.0, rows, cols }))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        let codes: Vec<u8> = self.value(a).data().iter().map(|&x| (x > 0.0) as u8).collect();
        for c in codes {
            self.note_branch(c);
        }
        self.push(value, Op::Relu { a: a.0 })
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::abs);
        let codes: Vec<u8> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x > 0.0 { 2 } else if x < 0.0 { 0 } else { 1 })
            .collect();
        for c in codes {
            self.note_branch(c);
        }
        self.push(value, Op::Abs { a: a.0 })
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::exp);
        self.push(value, Op::Exp { a: a.0 })
    }

    pub fn log(&mut self, a: Var) -> Var {
        let value = self.value(a).map(f64::ln);
        self.push(value, Op::Log { a: a.0 })
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let value = self.value(a).map(sigmoid);
        self.push(value, Op::Sigmoid { a: a.0 })
    }

    /// `ln(1 + e^x)`, evaluated without overflow.
    pub fn softplus(&mut self, a: Var) -> Var {
        let value = self.value(a).map(softplus);
        self.push(value, Op::Softplus { a: a.0 })
    }

    pub fn recip(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| 1.0 / x);
        self.push(value, Op::Recip { a: a.0 })
    }

    /// Clamp into `[lo, hi]`; the gradient is zero outside the band.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let codes: Vec<u8> = self
            .value(a)
            .data()
            .iter()
            .map(|&x| if x < lo { 0 } else if x > hi { 2 } else { 1 })
            .collect();
        for c in codes {
            self.note_branch(c);
        }
        let value = self.value(a).map(|x| x.clamp(lo, hi));
        self.push(value, Op::Clamp { a: a.0, lo, hi })
    }

    /// Normalizes the last axis to zero mean and unit population variance.
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        let mut out = vec![0.0; va.len()];
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let x = va.row(r);
            let mean = x.iter().sum::<f64>() / cols as f64;
            let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let inv = 1.0 / (var + eps).sqrt();
            for (o, v) in out[r * cols..(r + 1) * cols].iter_mut().zip(x) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(value, Op::LayerNorm { a: a.0, inv_std })
    }

    /// Softmax over the last axis, with max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = va.to_vec();
        for row in out.chunks_mut(cols) {
            softmax_in_place(row);
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        self.push(value, Op::Softmax { a: a.0 })
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum { a: a.0 })
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let s = va.data().iter().sum::<f64>() / va.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean { a: a.0 })
    }

    /// Sums over the last axis: `[.., n] -> [..]`.
    pub fn row_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let out = va.data().chunks(cols).map(|r| r.iter().sum()).collect();
        let shape = va.shape()[..va.rank().saturating_sub(1)].to_vec();
        let value = Tensor::from_parts(shape, out);
        self.push(value, Op::RowSums { a: a.0, cols })
    }

    /// Sums over all leading axes: `[.., n] -> [n]`.
    pub fn col_sums(&mut self, a: Var) -> Var {
        let va = self.value(a);
        let cols = va.cols();
        let mut out = vec![0.0; cols];
        for r in va.data().chunks(cols) {
            for (o, v) in out.iter_mut().zip(r) {
                *o += v;
            }
        }
        self.push(Tensor::vector(out), Op::ColSums { a: a.0, cols })
    }

    /// Multiplies row `r` of `a` (leading axes flattened) by `s[r]`.
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let vs = self.value(s);
        if vs.len() != va.rows() || va.rank() == 0 {
            return Err(NumericsError::ShapeMismatch {
                op: "scale_rows",
                left: va.shape().to_vec(),
                right: vs.shape().to_vec(),
            });
        }
        let cols = va.cols();
        let mut out = va.to_vec();
        for (row, &f) in out.chunks_mut(cols).zip(vs.data()) {
            for v in row {
                *v *= f;
            }
        }
        let value = Tensor::from_parts(va.shape().to_vec(), out);
        Ok(self.push(value, Op::ScaleRows { a: a.0, s: s.0, cols }))
    }

    /// Selects rows of `a` (viewed as a matrix) by index.
    pub fn gather_rows(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let (rows, cols) = (va.rows(), va.cols());
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather_rows",
                index: bad,
                bound: rows,
            });
        }
        let mut out = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            out.extend_from_slice(va.row(i));
        }
        let value = Tensor::from_parts(vec![idx.len(), cols], out);
        Ok(self.push(
            value,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Inverse of `gather_rows`: places row `j` of `a` at row `idx[j]` of a
    /// zero `[rows, cols]` matrix (repeated indices accumulate).
    pub fn scatter_rows(&mut self, a: Var, idx: &[usize], rows: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let cols = va.cols();
        if va.rows() != idx.len() {
            return Err(NumericsError::ShapeMismatch {
                op: "scatter_rows",
                left: va.shape().to_vec(),
                right: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(NumericsError::IndexOutOfRange {
                op: "scatter_rows",
                index: bad,
                bound: rows,
            });
        }
        let mut out = vec![0.0; rows * cols];
        for (j, &i) in idx.iter().enumerate() {
            for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(va.row(j)) {
                *o += v;
            }
        }
        let value = Tensor::from_parts(vec![rows, cols], out);
        Ok(self.push(
            value,
            Op::ScatterRows {
                a: a.0,
                idx: idx.to_vec(),
                cols,
            },
        ))
    }

    /// Selects individual elements by flat index.
    pub fn gather(&mut self, a: Var, idx: &[usize]) -> Result<Var, NumericsError> {
        let va = self.value(a);
        if let Some(&bad) = idx.iter().find(|&&i| i >= va.len()) {
            return Err(NumericsError::IndexOutOfRange {
                op: "gather",
                index: bad,
                bound: va.len(),
            });
        }
        let out = idx.iter().map(|&i| va.data()[i]).collect();
        Ok(self.push(
            Tensor::vector(out),
            Op::Gather {
                a: a.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Columns `start..start + len` of the last axis.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var, NumericsError> {
        let va = self.value(a);
        let cols = va.cols();
        if va.rank() == 0 || start + len > cols {
            return Err(NumericsError::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                bound: cols,
            });
        }
        let mut out = Vec::with_capacity(va.rows() * len);
        for r in va.data().chunks(cols) {
            out.extend_from_slice(&r[start..start + len]);
        }
        let mut shape = va.shape().to_vec();
        *shape.last_mut().expect("rank checked") = len;
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::SliceCols { a: a.0, start, cols }))
    }

    /// Concatenates along the last axis; all parts share their leading axes.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var, NumericsError> {
        let first = parts.first().ok_or(NumericsError::Empty { op: "concat_cols" })?;
        let lead = self.shape(*first)[..self.shape(*first).len() - 1].to_vec();
        let rows = self.value(*first).rows();
        let mut widths = Vec::with_capacity(parts.len());
        for p in parts {
            let s = self.shape(*p);
            if s.is_empty() || s[..s.len() - 1] != lead[..] {
                return Err(NumericsError::ShapeMismatch {
                    op: "concat_cols",
                    left: self.shape(*first).to_vec(),
                    right: s.to_vec(),
                });
            }
            widths.push((p.0, *s.last().expect("rank checked")));
        }
        let total: usize = widths.iter().map(|w| w.1).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &(p, w) in &widths {
                out.extend_from_slice(&self.nodes[p].value.data()[r * w..(r + 1) * w]);
            }
        }
        let mut shape = lead;
        shape.push(total);
        let value = Tensor::from_parts(shape, out);
        Ok(self.push(value, Op::ConcatCols { parts: widths }))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var, NumericsError> {
        let value = self.value(a).reshape(shape)?;
        Ok(self.push(value, Op::Reshape { a: a.0 }))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients, NumericsError> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(NumericsError::NotScalar {
                op: "backward",
                shape: lv.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(vec![1.0]);
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
        }
        let grads = grads
            .into_iter()
            .enumerate()
            .map(|(i, g)| {
                g.filter(|_| matches!(self.nodes[i].op, Op::Leaf))
                    .map(|g| Tensor::from_parts(self.nodes[i].value.shape().to_vec(), g))
            })
            .collect();
        Ok(Gradients { grads })
    }

    fn propagate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        let val = |j: usize| self.nodes[j].value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add { a, b } => {
                accumulate(grads, *a, val(*a).len(), |d| add_into(d, g));
                accumulate(grads, *b, val(*b).len(), |d| reduce_broadcast(d, g, |_| 1.0));
            }
            Op::Sub { a, b } => {
                accumulate(grads, *a, val(*a).len(), |d| add_into(d, g));
                accumulate(grads, *b, val(*b).len(), |d| reduce_broadcast(d, g, |_| -1.0));
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                let nb = vb.len();
                accumulate(grads, *a, va.len(), |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k] * vb[k % nb];
                    }
                });
                accumulate(grads, *b, nb, |d| reduce_broadcast(d, g, |k| va[k]));
            }
            Op::Scale { a, c } => {
                accumulate(grads, *a, g.len(), |d| {
                    for (x, gi) in d.iter_mut().zip(g) {
                        *x += gi * c;
                    }
                });
            }
            Op::AddScalar { a } | Op::Reshape { a } => {
                accumulate(grads, *a, g.len(), |d| add_into(d, g));
            }
            Op::MatMul { a, b, m, k, n } => {
                let (va, vb) = (val(*a), val(*b));
                // dA = dY · Bᵀ
                accumulate(grads, *a, m * k, |d| {
                    for r in 0..*m {
                        let gr = &g[r * n..(r + 1) * n];
                        let dr = &mut d[r * k..(r + 1) * k];
                        for (p, dp) in dr.iter_mut().enumerate() {
                            let br = &vb[p * n..(p + 1) * n];
                            *dp += dot(gr, br);
                        }
                    }
                });
                // dB = Aᵀ · dY
                accumulate(grads, *b, k * n, |d| {
                    for r in 0..*m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..*k {
                            let av = va[r * k + p];
                            if av != 0.0 {
                                axpy(&mut d[p * n..(p + 1) * n], av, gr);
                            }
                        }
                    }
                });
            }
            Op::Transpose { a, rows, cols } => {
                accumulate(grads, *a, rows * cols, |d| {
                    for r in 0..*rows {
                        for c in 0..*cols {
                            d[r * cols + c] += g[c * rows + r];
                        }
                    }
                });
            }
            Op::Relu { a } => {
                let va = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        }
                    }
                });
            }
            Op::Abs { a } => {
                let va = val(*a);
                accumulate(grads, *a, g.len(), |d| {
                    for k in 0..g.len() {
                        if va[k] > 0.0 {
                            d[k] += g[k];
                        } else if va[k] < 0.0 {
                            d[k] -= g[k];
                        }
                    }
                });
            }
            Op::Exp { a } => elementwise(grads, *a, g, |k| out[k]),
            Op::Log { a } => {
                let va = val(*a);
                elementwise(grads, *a, g, |k| 1.0 / va[k]);
            }
            Op::Sigmoid { a } => elementwise(grads, *a, g, |k| out[k] * (1.0 - out[k])),
            Op::Softplus { a } => {
                let va = val(*a);
                elementwise(grads, *a, g, |k| sigmoid(va[k]));
            }
            Op::Recip { a } => elementwise(grads, *a, g, |k| -out[k] * out[k]),
            Op::Clamp { a, lo, hi } => {
                let va = val(*a);
                elementwise(grads, *a, g, |k| {
                    if va[k] >= *lo && va[k] <= *hi {
                        1.0
                    } else {
                        0.0
                    }
                });
            }
            Op::Minimum { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                elementwise(grads, *a, g, |k| if va[k] <= vb[k] { 1.0 } else { 0.0 });
                elementwise(grads, *b, g, |k| if va[k] <= vb[k] { 0.0 } else { 1.0 });
            }
            Op::LayerNorm { a, inv_std } => {
                let cols = node.value.cols();
                accumulate(grads, *a, g.len(), |d| {
                    for (r, inv) in inv_std.iter().enumerate() {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &out[r * cols..(r + 1) * cols];
                        let mean_g = gr.iter().sum::<f64>() / cols as f64;
                        let mean_gy = dot(gr, yr) / cols as f64;
                        for c in 0..cols {
                            d[r * cols + c] += inv * (gr[c] - mean_g - yr[c] * mean_gy);
                        }
                    }
                });
            }
            Op::Softmax { a } => {
                let cols = node.value.cols();
                accumulate(grads, *a, g.len(), |d| {
                    for r in 0..g.len() / cols {
                        let gr = &g[r * cols..(r + 1) * cols];
                        let yr = &out[r * cols..(r + 1) * cols];
                        let s = dot(gr, yr);
                        for c in 0..cols {
                            d[r * cols + c] += yr[c] * (gr[c] - s);
                        }
                    }
                });
            }
            Op::Sum { a } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| d.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = val(*a).len();
                let s = g[0] / n as f64;
                accumulate(grads, *a, n, |d| d.iter_mut().for_each(|x| *x += s));
            }
            Op::RowSums { a, cols } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k / cols];
                    }
                });
            }
            Op::ColSums { a, cols } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k % cols];
                    }
                });
            }
            Op::ScaleRows { a, s, cols } => {
                let (va, vs) = (val(*a), val(*s));
                accumulate(grads, *a, va.len(), |d| {
                    for (k, x) in d.iter_mut().enumerate() {
                        *x += g[k] * vs[k / cols];
                    }
                });
                accumulate(grads, *s, vs.len(), |d| {
                    for (r, x) in d.iter_mut().enumerate() {
                        *x += dot(&g[r * cols..(r + 1) * cols], &va[r * cols..(r + 1) * cols]);
                    }
                });
            }
            Op::GatherRows { a, idx, cols } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut d[i * cols..(i + 1) * cols], &g[j * cols..(j + 1) * cols]);
                    }
                });
            }
            Op::ScatterRows { a, idx, cols } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        add_into(&mut d[j * cols..(j + 1) * cols], &g[i * cols..(i + 1) * cols]);
                    }
                });
            }
            Op::Gather { a, idx } => {
                let n = val(*a).len();
                accumulate(grads, *a, n, |d| {
                    for (j, &i) in idx.iter().enumerate() {
                        d[i] += g[j];
                    }
                });
            }
            Op::SliceCols { a, start, cols } => {
                let n = val(*a).len();
                let len = node.value.cols();
                accumulate(grads, *a, n, |d| {
                    for r in 0..n / cols {
                        add_into(
                            &mut d[r * cols + start..r * cols + start + len],
                            &g[r * len..(r + 1) * len],
                        );
                    }
                });
            }
            Op::ConcatCols { parts } => {
                let total: usize = parts.iter().map(|p| p.1).sum();
                let rows = g.len() / total.max(1);
                let mut offset = 0;
                for &(p, w) in parts {
                    accumulate(grads, p, rows * w, |d| {
                        for r in 0..rows {
                            add_into(
                                &mut d[r * w..(r + 1) * w],
                                &g[r * total + offset..r * total + offset + w],
                            );
                        }
                    });
                    offset += w;
                }
            }
        }
    }
}

/// Gradients of a scalar with respect to every leaf it depends on.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// `None` when the loss does not depend on `v`.
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn get_or_zeros(&self, v: Var, shape: &[usize]) -> Tensor {
        self.get(v).cloned().unwrap_or_else(|| Tensor::zeros(shape))
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], idx: usize, len: usize, f: impl FnOnce(&mut [f64])) {
    let slot = grads[idx].get_or_insert_with(|| vec![0.0; len]);
    f(slot);
}

fn elementwise(grads: &mut [Option<Vec<f64>>], idx: usize, g: &[f64], local: impl Fn(usize) -> f64) {
    accumulate(grads, idx, g.len(), |d| {
        for (k, x) in d.iter_mut().enumerate() {
            *x += g[k] * local(k);
        }
    });
}

/// Accumulates `g[k] * local(k)` into the (possibly broadcast) operand slot.
fn reduce_broadcast(d: &mut [f64], g: &[f64], local: impl Fn(usize) -> f64) {
    let nb = d.len();
    for (k, gk) in g.iter().enumerate() {
        d[k % nb] += gk * local(k);
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

fn axpy(d: &mut [f64], a: f64, x: &[f64]) {
    for (y, v) in d.iter_mut().zip(x) {
        *y += a * v;
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for r in 0..m {
        let orow = &mut out[r * n..(r + 1) * n];
        for p in 0..k {
            let av = a[r * k + p];
            if av != 0.0 {
                axpy(orow, av, &b[p * n..(p + 1) * n]);
            }
        }
    }
    out
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

/// Max-subtracted softmax of one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
}
