//! Dense `f64` matrices with reverse-mode automatic differentiation.
//!
//! The engine is deliberately small: two-dimensional row-major tensors, a
//! [`Tape`] that records every operation, and a backward sweep that produces
//! gradients for all tracked leaves. That covers everything the simulator
//! trains — fixed two-layer architectures at desk scale — without general
//! broadcasting machinery.
//!
//! Determinism: every kernel accumulates each output element in a fixed order
//! that does not depend on vector width or thread count, so results are
//! bitwise reproducible across runs and across `workers` settings.

mod adam;
mod kernels;

pub use adam::{adam_step, AdamHyper, AdamState, Optimizer};

use std::sync::Arc;

/// Two-dimensional row-major matrix of `f64`.
#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

#[derive(Debug, thiserror::Error)]
pub enum TensorError {
    #[error("{op}: shape mismatch: left is {lr}x{lc}, right is {rr}x{rc}")]
    ShapeMismatch { op: &'static str, lr: usize, lc: usize, rr: usize, rc: usize },
    #[error("{op}: invalid shape {rows}x{cols} (data length {len})")]
    InvalidShape { op: &'static str, rows: usize, cols: usize, len: usize },
    #[error("{op}: index {index} out of bounds ({bound})")]
    IndexOutOfBounds { op: &'static str, index: usize, bound: usize },
    #[error("backward target must be a 1x1 scalar, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
    #[error("tape is in inference mode; no gradients were recorded")]
    NoGrad,
    #[error("{op}: produced a non-finite value")]
    NonFinite { op: &'static str },
}

impl Tensor {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self, TensorError> {
        if data.len() != rows * cols {
            return Err(TensorError::InvalidShape { op: "from_vec", rows, cols, len: data.len() });
        }
        Ok(Tensor { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self, TensorError> {
        let r = rows.len();
        let c = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(r * c);
        for row in rows {
            if row.len() != c {
                return Err(TensorError::InvalidShape { op: "from_rows", rows: r, cols: c, len: row.len() });
            }
            data.extend_from_slice(row);
        }
        Ok(Tensor { rows: r, cols: c, data })
    }

    /// I.i.d. normal entries with the given standard deviation.
    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl rand::Rng) -> Self {
        use rand_distr::Distribution;
        let dist = rand_distr::Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..rows * cols).map(|_| dist.sample(rng)).collect();
        Tensor { rows, cols, data }
    }

    /// I.i.d. uniform entries in `[-bound, bound)`; the usual fan-in init.
    pub fn rand_uniform(rows: usize, cols: usize, bound: f64, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-bound..bound)).collect();
        Tensor { rows, cols, data }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        debug_assert!(r < self.rows && c < self.cols);
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// Mean over all rows, as a `1 x cols` tensor. Zero rows give a zero mean.
    pub fn mean_row(&self) -> Tensor {
        let mut out = vec![0.0; self.cols];
        for r in 0..self.rows {
            for (o, v) in out.iter_mut().zip(self.row(r)) {
                *o += v;
            }
        }
        if self.rows > 0 {
            let inv = 1.0 / self.rows as f64;
            for o in &mut out {
                *o *= inv;
            }
        }
        Tensor { rows: 1, cols: self.cols, data: out }
    }
}

/// Row-group specification in CSR form: group `g` covers
/// `indices[offsets[g]..offsets[g+1]]`. Groups may be empty.
#[derive(Clone, Debug, Default)]
pub struct Groups {
    pub offsets: Vec<usize>,
    pub indices: Vec<usize>,
}

impl Groups {
    pub fn from_lists<L: AsRef<[usize]>>(lists: &[L]) -> Self {
        let mut offsets = Vec::with_capacity(lists.len() + 1);
        let mut indices = Vec::new();
        offsets.push(0);
        for l in lists {
            indices.extend_from_slice(l.as_ref());
            offsets.push(indices.len());
        }
        Groups { offsets, indices }
    }

    pub fn len(&self) -> usize {
        self.offsets.len().saturating_sub(1)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn group(&self, g: usize) -> &[usize] {
        &self.indices[self.offsets[g]..self.offsets[g + 1]]
    }
}

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Tid(usize);

enum Op {
    /// Tracked leaf (parameter or differentiable input).
    Leaf,
    /// Untracked constant.
    Constant,
    MatMul { a: Tid, b: Tid },
    /// `a · bᵀ` without materialising the transpose.
    MatMulBt { a: Tid, b: Tid },
    Add { a: Tid, b: Tid },
    Sub { a: Tid, b: Tid },
    Mul { a: Tid, b: Tid },
    /// `a + row` with `row` of shape `1 x cols`, added to every row.
    AddRow { a: Tid, row: Tid },
    /// `a + col` with `col` of shape `rows x 1`, added to every column.
    AddCol { a: Tid, col: Tid },
    /// `a ⊙ col` with `col` of shape `rows x 1`, scaling each row.
    ScaleRows { a: Tid, col: Tid },
    ScaleConst { a: Tid, k: f64 },
    Relu { a: Tid },
    Silu { a: Tid },
    Sigmoid { a: Tid },
    Exp { a: Tid },
    Log { a: Tid },
    /// Per-row squared L2 norm, `rows x 1`.
    SqNormRows { a: Tid },
    /// Per-row L2 norm, `rows x 1`.
    NormRows { a: Tid },
    /// Row-wise softmax.
    Softmax { a: Tid },
    /// Sum of all entries, `1 x 1`.
    Sum { a: Tid },
    /// Per-row sum, `rows x 1`.
    RowSum { a: Tid },
    GatherRows { a: Tid, idx: Arc<Vec<usize>> },
    /// Pick one column per row: `out[i, 0] = a[i, cols[i]]`.
    GatherPerRow { a: Tid, cols: Arc<Vec<usize>> },
    /// Mean of each row group; empty groups produce a zero row.
    GroupMeanRows { a: Tid, groups: Arc<Groups> },
    ConcatCols { a: Tid, b: Tid },
    Reshape { a: Tid },
    /// `out[(i, j), c] = base[i, c] + coeff[i, j] * vec[0, c]` — the fused
    /// "append one scalar feature and apply the first linear layer" step.
    ExpandAddScale { base: Tid, coeff: Tid, vec: Tid },
    Dropout { a: Tid, mask: Vec<f64> },
}

struct Node {
    rows: usize,
    cols: usize,
    value: Vec<f64>,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], addressed by tensor handle.
pub struct Grads {
    buffers: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn get(&self, t: Tid) -> Option<&[f64]> {
        self.buffers.get(t.0).and_then(|b| b.as_deref())
    }

    pub fn take(&mut self, t: Tid) -> Option<Vec<f64>> {
        self.buffers.get_mut(t.0).and_then(Option::take)
    }
}

/// Records operations for one forward pass.
///
/// A tape built with [`Tape::new`] tracks gradients for every [`Tape::leaf`];
/// one built with [`Tape::inference`] records values only and refuses
/// `backward`, which keeps evaluation passes cheap.
pub struct Tape {
    nodes: Vec<Node>,
    inference: bool,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new(), inference: false }
    }

    pub fn inference() -> Self {
        Tape { nodes: Vec::new(), inference: true }
    }

    pub fn rows(&self, t: Tid) -> usize {
        self.nodes[t.0].rows
    }

    pub fn cols(&self, t: Tid) -> usize {
        self.nodes[t.0].cols
    }

    pub fn value(&self, t: Tid) -> &[f64] {
        &self.nodes[t.0].value
    }

    pub fn value_tensor(&self, t: Tid) -> Tensor {
        let n = &self.nodes[t.0];
        Tensor { rows: n.rows, cols: n.cols, data: n.value.clone() }
    }

    fn push(&mut self, rows: usize, cols: usize, value: Vec<f64>, op: Op) -> Result<Tid, TensorError> {
        debug_assert_eq!(value.len(), rows * cols);
        #[cfg(debug_assertions)]
        {
            if value.iter().any(|v| !v.is_finite()) {
                return Err(TensorError::NonFinite { op: op_name(&op) });
            }
        }
        let needs_grad = !self.inference
            && match &op {
                Op::Leaf => true,
                Op::Constant => false,
                other => op_inputs(other).iter().any(|t| self.nodes[t.0].needs_grad),
            };
        self.nodes.push(Node { rows, cols, value, op, needs_grad });
        Ok(Tid(self.nodes.len() - 1))
    }

    /// Insert a tracked leaf (parameter or differentiable input).
    pub fn leaf(&mut self, t: &Tensor) -> Tid {
        let op = if self.inference { Op::Constant } else { Op::Leaf };
        self.push(t.rows, t.cols, t.data.clone(), op).expect("leaf values must be finite")
    }

    /// Insert an untracked constant.
    pub fn constant(&mut self, t: &Tensor) -> Tid {
        self.push(t.rows, t.cols, t.data.clone(), Op::Constant).expect("constant values must be finite")
    }

    fn shape_err(&self, op: &'static str, a: Tid, b: Tid) -> TensorError {
        TensorError::ShapeMismatch {
            op,
            lr: self.rows(a),
            lc: self.cols(a),
            rr: self.rows(b),
            rc: self.cols(b),
        }
    }

    pub fn matmul(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        let (m, k) = (self.rows(a), self.cols(a));
        let (k2, n) = (self.rows(b), self.cols(b));
        if k != k2 {
            return Err(self.shape_err("matmul", a, b));
        }
        let mut out = vec![0.0; m * n];
        kernels::mm(&mut out, self.value(a), self.value(b), m, k, n);
        self.push(m, n, out, Op::MatMul { a, b })
    }

    /// `a · bᵀ`: `(m x c) · (p x c)ᵀ = m x p`.
    pub fn matmul_bt(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        let (m, c) = (self.rows(a), self.cols(a));
        let (p, c2) = (self.rows(b), self.cols(b));
        if c != c2 {
            return Err(self.shape_err("matmul_bt", a, b));
        }
        let mut out = vec![0.0; m * p];
        kernels::mm_a_bt(&mut out, self.value(a), self.value(b), m, c, p);
        self.push(m, p, out, Op::MatMulBt { a, b })
    }

    fn elementwise(&mut self, opname: &'static str, a: Tid, b: Tid, f: impl Fn(f64, f64) -> f64, op: Op) -> Result<Tid, TensorError> {
        if self.rows(a) != self.rows(b) || self.cols(a) != self.cols(b) {
            return Err(self.shape_err(opname, a, b));
        }
        let out = self.value(a).iter().zip(self.value(b)).map(|(&x, &y)| f(x, y)).collect();
        self.push(self.rows(a), self.cols(a), out, op)
    }

    pub fn add(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add { a, b })
    }

    pub fn sub(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub { a, b })
    }

    pub fn mul(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul { a, b })
    }

    pub fn add_row(&mut self, a: Tid, row: Tid) -> Result<Tid, TensorError> {
        if self.rows(row) != 1 || self.cols(row) != self.cols(a) {
            return Err(self.shape_err("add_row", a, row));
        }
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = self.value(a).to_vec();
        let rv = self.value(row);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += rv[j];
            }
        }
        self.push(r, c, out, Op::AddRow { a, row })
    }

    pub fn add_col(&mut self, a: Tid, col: Tid) -> Result<Tid, TensorError> {
        if self.cols(col) != 1 || self.rows(col) != self.rows(a) {
            return Err(self.shape_err("add_col", a, col));
        }
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = self.value(a).to_vec();
        let cv = self.value(col);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] += cv[i];
            }
        }
        self.push(r, c, out, Op::AddCol { a, col })
    }

    pub fn scale_rows(&mut self, a: Tid, col: Tid) -> Result<Tid, TensorError> {
        if self.cols(col) != 1 || self.rows(col) != self.rows(a) {
            return Err(self.shape_err("scale_rows", a, col));
        }
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = self.value(a).to_vec();
        let cv = self.value(col);
        for i in 0..r {
            for j in 0..c {
                out[i * c + j] *= cv[i];
            }
        }
        self.push(r, c, out, Op::ScaleRows { a, col })
    }

    pub fn scale_const(&mut self, a: Tid, k: f64) -> Result<Tid, TensorError> {
        let out = self.value(a).iter().map(|&x| x * k).collect();
        self.push(self.rows(a), self.cols(a), out, Op::ScaleConst { a, k })
    }

    fn unary(&mut self, a: Tid, f: impl Fn(f64) -> f64, op: Op) -> Result<Tid, TensorError> {
        let out = self.value(a).iter().map(|&x| f(x)).collect();
        self.push(self.rows(a), self.cols(a), out, op)
    }

    pub fn relu(&mut self, a: Tid) -> Result<Tid, TensorError> {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu { a })
    }

    pub fn silu(&mut self, a: Tid) -> Result<Tid, TensorError> {
        self.unary(a, |x| x * sigmoid(x), Op::Silu { a })
    }

    pub fn sigmoid(&mut self, a: Tid) -> Result<Tid, TensorError> {
        self.unary(a, sigmoid, Op::Sigmoid { a })
    }

    pub fn exp(&mut self, a: Tid) -> Result<Tid, TensorError> {
        self.unary(a, f64::exp, Op::Exp { a })
    }

    pub fn log(&mut self, a: Tid) -> Result<Tid, TensorError> {
        self.unary(a, f64::ln, Op::Log { a })
    }

    pub fn sq_norm_rows(&mut self, a: Tid) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().map(|x| x * x).sum()).collect();
        self.push(r, 1, out, Op::SqNormRows { a })
    }

    pub fn norm_rows(&mut self, a: Tid) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        let v = self.value(a);
        let out = (0..r)
            .map(|i| v[i * c..(i + 1) * c].iter().map(|x| x * x).sum::<f64>().sqrt())
            .collect();
        self.push(r, 1, out, Op::NormRows { a })
    }

    /// Row-wise softmax with max subtraction for stability.
    pub fn softmax(&mut self, a: Tid) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        if c == 0 {
            return Err(TensorError::InvalidShape { op: "softmax", rows: r, cols: c, len: 0 });
        }
        let v = self.value(a);
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            let row = &v[i * c..(i + 1) * c];
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let orow = &mut out[i * c..(i + 1) * c];
            let mut z = 0.0;
            for (o, &x) in orow.iter_mut().zip(row) {
                *o = (x - mx).exp();
                z += *o;
            }
            for o in orow.iter_mut() {
                *o /= z;
            }
        }
        self.push(r, c, out, Op::Softmax { a })
    }

    pub fn sum(&mut self, a: Tid) -> Result<Tid, TensorError> {
        let total = self.value(a).iter().sum();
        self.push(1, 1, vec![total], Op::Sum { a })
    }

    pub fn row_sum(&mut self, a: Tid) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        let v = self.value(a);
        let out = (0..r).map(|i| v[i * c..(i + 1) * c].iter().sum()).collect();
        self.push(r, 1, out, Op::RowSum { a })
    }

    pub fn gather_rows(&mut self, a: Tid, idx: Arc<Vec<usize>>) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in idx.iter() {
            if i >= r {
                return Err(TensorError::IndexOutOfBounds { op: "gather_rows", index: i, bound: r });
            }
            out.extend_from_slice(&self.value(a)[i * c..(i + 1) * c]);
        }
        self.push(idx.len(), c, out, Op::GatherRows { a, idx })
    }

    pub fn gather_per_row(&mut self, a: Tid, cols: Arc<Vec<usize>>) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        if cols.len() != r {
            return Err(TensorError::InvalidShape { op: "gather_per_row", rows: r, cols: c, len: cols.len() });
        }
        let v = self.value(a);
        let mut out = Vec::with_capacity(r);
        for (i, &j) in cols.iter().enumerate() {
            if j >= c {
                return Err(TensorError::IndexOutOfBounds { op: "gather_per_row", index: j, bound: c });
            }
            out.push(v[i * c + j]);
        }
        self.push(r, 1, out, Op::GatherPerRow { a, cols })
    }

    /// Mean of each row group (CSR); an empty group yields a zero row. This is
    /// the neighbor-mean primitive: group `g` lists the rows averaged into
    /// output row `g`.
    pub fn group_mean_rows(&mut self, a: Tid, groups: Arc<Groups>) -> Result<Tid, TensorError> {
        let (r, c) = (self.rows(a), self.cols(a));
        let g = groups.len();
        let v = self.value(a);
        let mut out = vec![0.0; g * c];
        for gi in 0..g {
            let members = groups.group(gi);
            if members.is_empty() {
                continue;
            }
            let orow = &mut out[gi * c..(gi + 1) * c];
            for &m in members {
                if m >= r {
                    return Err(TensorError::IndexOutOfBounds { op: "group_mean_rows", index: m, bound: r });
                }
                for (o, x) in orow.iter_mut().zip(&v[m * c..(m + 1) * c]) {
                    *o += x;
                }
            }
            let inv = 1.0 / members.len() as f64;
            for o in orow.iter_mut() {
                *o *= inv;
            }
        }
        self.push(g, c, out, Op::GroupMeanRows { a, groups })
    }

    pub fn concat_cols(&mut self, a: Tid, b: Tid) -> Result<Tid, TensorError> {
        if self.rows(a) != self.rows(b) {
            return Err(self.shape_err("concat_cols", a, b));
        }
        let (r, ca, cb) = (self.rows(a), self.cols(a), self.cols(b));
        let (va, vb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(r * (ca + cb));
        for i in 0..r {
            out.extend_from_slice(&va[i * ca..(i + 1) * ca]);
            out.extend_from_slice(&vb[i * cb..(i + 1) * cb]);
        }
        self.push(r, ca + cb, out, Op::ConcatCols { a, b })
    }

    /// Reinterpret the row-major buffer under a new shape of equal size.
    pub fn reshape(&mut self, a: Tid, rows: usize, cols: usize) -> Result<Tid, TensorError> {
        if rows * cols != self.rows(a) * self.cols(a) {
            return Err(TensorError::InvalidShape { op: "reshape", rows, cols, len: self.value(a).len() });
        }
        let out = self.value(a).to_vec();
        self.push(rows, cols, out, Op::Reshape { a })
    }

    /// `out[(i, j), c] = base[i, c] + coeff[i, j] * vec[0, c]`, producing an
    /// `(n * p) x c` tensor with the row for pair `(i, j)` at index `i * p + j`.
    pub fn expand_add_scale(&mut self, base: Tid, coeff: Tid, vec: Tid) -> Result<Tid, TensorError> {
        let (n, c) = (self.rows(base), self.cols(base));
        let (n2, p) = (self.rows(coeff), self.cols(coeff));
        if n != n2 {
            return Err(self.shape_err("expand_add_scale", base, coeff));
        }
        if self.rows(vec) != 1 || self.cols(vec) != c {
            return Err(self.shape_err("expand_add_scale", base, vec));
        }
        let (bv, cv, vv) = (self.value(base), self.value(coeff), self.value(vec));
        let mut out = vec![0.0; n * p * c];
        for i in 0..n {
            let brow = &bv[i * c..(i + 1) * c];
            for j in 0..p {
                let k = cv[i * p + j];
                let orow = &mut out[(i * p + j) * c..(i * p + j + 1) * c];
                for ((o, &b), &v) in orow.iter_mut().zip(brow).zip(vv) {
                    *o = b + k * v;
                }
            }
        }
        self.push(n * p, c, out, Op::ExpandAddScale { base, coeff, vec })
    }

    /// Inverted dropout: each entry is zeroed with probability `p`, survivors
    /// are scaled by `1 / (1 - p)`. The mask is drawn from `rng` at record
    /// time, so reproducibility is the caller's stream discipline.
    pub fn dropout(&mut self, a: Tid, p: f64, rng: &mut impl rand::Rng) -> Result<Tid, TensorError> {
        assert!((0.0..1.0).contains(&p), "dropout probability must be in [0, 1)");
        let keep = 1.0 / (1.0 - p);
        let mask: Vec<f64> = (0..self.value(a).len())
            .map(|_| if rng.gen::<f64>() < p { 0.0 } else { keep })
            .collect();
        let out = self.value(a).iter().zip(&mask).map(|(&x, &m)| x * m).collect();
        self.push(self.rows(a), self.cols(a), out, Op::Dropout { a, mask })
    }

    /// Reverse sweep from a scalar loss; returns gradients for every tracked
    /// node (leaves included).
    pub fn backward(&self, loss: Tid) -> Result<Grads, TensorError> {
        if self.inference {
            return Err(TensorError::NoGrad);
        }
        let ln = &self.nodes[loss.0];
        if ln.rows != 1 || ln.cols != 1 {
            return Err(TensorError::NonScalarLoss { rows: ln.rows, cols: ln.cols });
        }
        let mut buffers: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        buffers[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if buffers[id].is_none() || !self.nodes[id].needs_grad {
                continue;
            }
            let g = buffers[id].take().expect("checked above");
            self.accumulate_inputs(id, &g, &mut buffers);
            buffers[id] = Some(g);
        }
        Ok(Grads { buffers })
    }

    fn grad_buf<'a>(&self, buffers: &'a mut [Option<Vec<f64>>], t: Tid) -> Option<&'a mut Vec<f64>> {
        if !self.nodes[t.0].needs_grad {
            return None;
        }
        let n = &self.nodes[t.0];
        Some(buffers[t.0].get_or_insert_with(|| vec![0.0; n.rows * n.cols]))
    }

    fn accumulate_inputs(&self, id: usize, g: &[f64], buffers: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[id];
        let (r, c) = (node.rows, node.cols);
        match &node.op {
            Op::Leaf | Op::Constant => {}
            Op::MatMul { a, b } => {
                let (m, k) = (self.rows(*a), self.cols(*a));
                let n = self.cols(*b);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    kernels::mm_a_bt(ga, g, self.value(*b), m, n, k);
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    kernels::mm_at_b(gb, self.value(*a), g, m, k, n);
                }
            }
            Op::MatMulBt { a, b } => {
                // out (m x p) = a (m x c) · b (p x c)ᵀ
                let (m, cc) = (self.rows(*a), self.cols(*a));
                let p = self.rows(*b);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    kernels::mm(ga, g, self.value(*b), m, p, cc);
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    kernels::mm_at_b(gb, g, self.value(*a), m, p, cc);
                }
            }
            Op::Add { a, b } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    axpy(gb, 1.0, g);
                }
            }
            Op::Sub { a, b } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    axpy(gb, -1.0, g);
                }
            }
            Op::Mul { a, b } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &bv) in ga.iter_mut().zip(g).zip(self.value(*b)) {
                        *o += gv * bv;
                    }
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    for ((o, &gv), &av) in gb.iter_mut().zip(g).zip(self.value(*a)) {
                        *o += gv * av;
                    }
                }
            }
            Op::AddRow { a, row } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gr) = self.grad_buf(buffers, *row) {
                    for i in 0..r {
                        for j in 0..c {
                            gr[j] += g[i * c + j];
                        }
                    }
                }
            }
            Op::AddCol { a, col } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, 1.0, g);
                }
                if let Some(gc) = self.grad_buf(buffers, *col) {
                    for i in 0..r {
                        gc[i] += g[i * c..(i + 1) * c].iter().sum::<f64>();
                    }
                }
            }
            Op::ScaleRows { a, col } => {
                let cv = self.value(*col);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[i * c + j] * cv[i];
                        }
                    }
                }
                let av = self.value(*a);
                if let Some(gc) = self.grad_buf(buffers, *col) {
                    for i in 0..r {
                        let mut s = 0.0;
                        for j in 0..c {
                            s += g[i * c + j] * av[i * c + j];
                        }
                        gc[i] += s;
                    }
                }
            }
            Op::ScaleConst { a, k } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, *k, g);
                }
            }
            Op::Relu { a } => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        if x > 0.0 {
                            *o += gv;
                        }
                    }
                }
            }
            Op::Silu { a } => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        let s = sigmoid(x);
                        *o += gv * (s * (1.0 + x * (1.0 - s)));
                    }
                }
            }
            Op::Sigmoid { a } => {
                let yv = &node.value;
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *o += gv * y * (1.0 - y);
                    }
                }
            }
            Op::Exp { a } => {
                let yv = &node.value;
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &y) in ga.iter_mut().zip(g).zip(yv) {
                        *o += gv * y;
                    }
                }
            }
            Op::Log { a } => {
                let av = self.value(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &x) in ga.iter_mut().zip(g).zip(av) {
                        *o += gv / x;
                    }
                }
            }
            Op::SqNormRows { a } => {
                let av = self.value(*a);
                let ac = self.cols(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..self.rows(*a) {
                        let gi = 2.0 * g[i];
                        for j in 0..ac {
                            ga[i * ac + j] += gi * av[i * ac + j];
                        }
                    }
                }
            }
            Op::NormRows { a } => {
                let av = self.value(*a);
                let ac = self.cols(*a);
                let yv = &node.value;
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..self.rows(*a) {
                        if yv[i] == 0.0 {
                            continue; // subgradient 0 at the origin
                        }
                        let gi = g[i] / yv[i];
                        for j in 0..ac {
                            ga[i * ac + j] += gi * av[i * ac + j];
                        }
                    }
                }
            }
            Op::Softmax { a } => {
                let yv = &node.value;
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..r {
                        let yrow = &yv[i * c..(i + 1) * c];
                        let grow = &g[i * c..(i + 1) * c];
                        let dot: f64 = yrow.iter().zip(grow).map(|(&y, &gv)| y * gv).sum();
                        for j in 0..c {
                            ga[i * c + j] += yrow[j] * (grow[j] - dot);
                        }
                    }
                }
            }
            Op::Sum { a } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for o in ga.iter_mut() {
                        *o += g[0];
                    }
                }
            }
            Op::RowSum { a } => {
                let ac = self.cols(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..self.rows(*a) {
                        for j in 0..ac {
                            ga[i * ac + j] += g[i];
                        }
                    }
                }
            }
            Op::GatherRows { a, idx } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for (out_r, &src_r) in idx.iter().enumerate() {
                        for j in 0..c {
                            ga[src_r * c + j] += g[out_r * c + j];
                        }
                    }
                }
            }
            Op::GatherPerRow { a, cols } => {
                let ac = self.cols(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for (i, &j) in cols.iter().enumerate() {
                        ga[i * ac + j] += g[i];
                    }
                }
            }
            Op::GroupMeanRows { a, groups } => {
                let ac = self.cols(*a);
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for gi in 0..groups.len() {
                        let members = groups.group(gi);
                        if members.is_empty() {
                            continue;
                        }
                        let inv = 1.0 / members.len() as f64;
                        let grow = &g[gi * ac..(gi + 1) * ac];
                        for &m in members {
                            for j in 0..ac {
                                ga[m * ac + j] += grow[j] * inv;
                            }
                        }
                    }
                }
            }
            Op::ConcatCols { a, b } => {
                let (ca, cb) = (self.cols(*a), self.cols(*b));
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for i in 0..r {
                        for j in 0..ca {
                            ga[i * ca + j] += g[i * c + j];
                        }
                    }
                }
                if let Some(gb) = self.grad_buf(buffers, *b) {
                    for i in 0..r {
                        for j in 0..cb {
                            gb[i * cb + j] += g[i * c + ca + j];
                        }
                    }
                }
            }
            Op::Reshape { a } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    axpy(ga, 1.0, g);
                }
            }
            Op::ExpandAddScale { base, coeff, vec } => {
                let (n, bc) = (self.rows(*base), self.cols(*base));
                let p = self.cols(*coeff);
                let vv = self.value(*vec);
                let cv = self.value(*coeff);
                if let Some(gb) = self.grad_buf(buffers, *base) {
                    for i in 0..n {
                        for j in 0..p {
                            let grow = &g[(i * p + j) * bc..(i * p + j + 1) * bc];
                            for (o, &gv) in gb[i * bc..(i + 1) * bc].iter_mut().zip(grow) {
                                *o += gv;
                            }
                        }
                    }
                }
                if let Some(gc) = self.grad_buf(buffers, *coeff) {
                    for i in 0..n {
                        for j in 0..p {
                            let grow = &g[(i * p + j) * bc..(i * p + j + 1) * bc];
                            gc[i * p + j] += grow.iter().zip(vv).map(|(&gv, &v)| gv * v).sum::<f64>();
                        }
                    }
                }
                if let Some(gv) = self.grad_buf(buffers, *vec) {
                    for i in 0..n {
                        for j in 0..p {
                            let k = cv[i * p + j];
                            let grow = &g[(i * p + j) * bc..(i * p + j + 1) * bc];
                            for (o, &gg) in gv.iter_mut().zip(grow) {
                                *o += k * gg;
                            }
                        }
                    }
                }
            }
            Op::Dropout { a, mask } => {
                if let Some(ga) = self.grad_buf(buffers, *a) {
                    for ((o, &gv), &m) in ga.iter_mut().zip(g).zip(mask) {
                        *o += gv * m;
                    }
                }
            }
        }
    }
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn axpy(out: &mut [f64], k: f64, x: &[f64]) {
    for (o, &v) in out.iter_mut().zip(x) {
        *o += k * v;
    }
}

fn op_inputs(op: &Op) -> Vec<Tid> {
    match op {
        Op::Leaf | Op::Constant => vec![],
        Op::MatMul { a, b }
        | Op::MatMulBt { a, b }
        | Op::Add { a, b }
        | Op::Sub { a, b }
        | Op::Mul { a, b }
        | Op::ConcatCols { a, b } => vec![*a, *b],
        Op::AddRow { a, row } => vec![*a, *row],
        Op::AddCol { a, col } | Op::ScaleRows { a, col } => vec![*a, *col],
        Op::ExpandAddScale { base, coeff, vec } => vec![*base, *coeff, *vec],
        Op::ScaleConst { a, .. }
        | Op::Relu { a }
        | Op::Silu { a }
        | Op::Sigmoid { a }
        | Op::Exp { a }
        | Op::Log { a }
        | Op::SqNormRows { a }
        | Op::NormRows { a }
        | Op::Softmax { a }
        | Op::Sum { a }
        | Op::RowSum { a }
        | Op::GatherRows { a, .. }
        | Op::GatherPerRow { a, .. }
        | Op::GroupMeanRows { a, .. }
        | Op::Reshape { a }
        | Op::Dropout { a, .. } => vec![*a],
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Constant => "constant",
        Op::MatMul { .. } => "matmul",
        Op::MatMulBt { .. } => "matmul_bt",
        Op::Add { .. } => "add",
        Op::Sub { .. } => "sub",
        Op::Mul { .. } => "mul",
        Op::AddRow { .. } => "add_row",
        Op::AddCol { .. } => "add_col",
        Op::ScaleRows { .. } => "scale_rows",
        Op::ScaleConst { .. } => "scale_const",
        Op::Relu { .. } => "relu",
        Op::Silu { .. } => "silu",
        Op::Sigmoid { .. } => "sigmoid",
        Op::Exp { .. } => "exp",
        Op::Log { .. } => "log",
        Op::SqNormRows { .. } => "sq_norm_rows",
        Op::NormRows { .. } => "norm_rows",
        Op::Softmax { .. } => "softmax",
        Op::Sum { .. } => "sum",
        Op::RowSum { .. } => "row_sum",
        Op::GatherRows { .. } => "gather_rows",
        Op::GatherPerRow { .. } => "gather_per_row",
        Op::GroupMeanRows { .. } => "group_mean_rows",
        Op::ConcatCols { .. } => "concat_cols",
        Op::Reshape { .. } => "reshape",
        Op::ExpandAddScale { .. } => "expand_add_scale",
        Op::Dropout { .. } => "dropout",
    }
}
