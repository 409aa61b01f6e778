//! Tape-based reverse-mode differentiation over dense 2-D arrays.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};

use crate::error::{HrcbError, Result};
use crate::manifold::{Space, SpaceKind};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

/// Elementwise functions with their local derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Unary {
    Relu,
    Exp,
    Ln,
    Tanh,
    /// Argument clamped to `±(1 - 1e-15)`; zero derivative when clamped.
    Artanh,
    /// Argument clamped to `>= 1`; derivative bounded near 1.
    Arcosh,
    Asinh,
    /// `sqrt(max(x, 0))` with zero derivative at 0.
    Sqrt,
    Cosh,
    Sinh,
    Square,
    Softplus,
    /// Subgradient 0 at 0.
    Abs,
    Recip,
    Sigmoid,
}

const ARCOSH_FLOOR: f64 = 1e-14;

impl Unary {
    fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Relu => x.max(0.0),
            Unary::Exp => x.exp(),
            Unary::Ln => x.ln(),
            Unary::Tanh => x.tanh(),
            Unary::Artanh => crate::manifold::clamped_artanh(x),
            Unary::Arcosh => x.max(1.0).acosh(),
            Unary::Asinh => x.asinh(),
            Unary::Sqrt => x.max(0.0).sqrt(),
            Unary::Cosh => x.cosh(),
            Unary::Sinh => x.sinh(),
            Unary::Square => x * x,
            Unary::Softplus => x.max(0.0) + (-x.abs()).exp().ln_1p(),
            Unary::Abs => x.abs(),
            Unary::Recip => 1.0 / x,
            Unary::Sigmoid => sigmoid(x),
        }
    }

    /// Derivative at input `x` given output `y`.
    fn deriv(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Exp => y,
            Unary::Ln => 1.0 / x,
            Unary::Tanh => 1.0 - y * y,
            Unary::Artanh => {
                if x.abs() < crate::manifold::ARTANH_BOUND {
                    1.0 / (1.0 - x * x)
                } else {
                    0.0
                }
            }
            Unary::Arcosh => {
                if x >= 1.0 {
                    1.0 / (x * x - 1.0).max(ARCOSH_FLOOR).sqrt()
                } else {
                    0.0
                }
            }
            Unary::Asinh => 1.0 / (x * x + 1.0).sqrt(),
            Unary::Sqrt => {
                if y > 0.0 {
                    0.5 / y
                } else {
                    0.0
                }
            }
            Unary::Cosh => x.sinh(),
            Unary::Sinh => x.cosh(),
            Unary::Square => 2.0 * x,
            Unary::Softplus => sigmoid(x),
            Unary::Abs => {
                if x > 0.0 {
                    1.0
                } else if x < 0.0 {
                    -1.0
                } else {
                    0.0
                }
            }
            Unary::Recip => -y * y,
            Unary::Sigmoid => y * (1.0 - y),
        }
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Constant sparse matrix in compressed-row form.
#[derive(Debug, Clone, PartialEq)]
pub struct Csr {
    pub n_rows: usize,
    pub n_cols: usize,
    pub indptr: Vec<usize>,
    pub indices: Vec<usize>,
    pub data: Vec<f64>,
}

impl Csr {
    /// Builds from per-row `(column, weight)` lists.
    pub fn from_rows(n_cols: usize, rows: &[Vec<(usize, f64)>]) -> Self {
        let mut indptr = Vec::with_capacity(rows.len() + 1);
        let mut indices = Vec::new();
        let mut data = Vec::new();
        indptr.push(0);
        for r in rows {
            for &(j, w) in r {
                indices.push(j);
                data.push(w);
            }
            indptr.push(indices.len());
        }
        Csr { n_rows: rows.len(), n_cols, indptr, indices, data }
    }

    pub fn row(&self, i: usize) -> impl Iterator<Item = (usize, f64)> + '_ {
        let (a, b) = (self.indptr[i], self.indptr[i + 1]);
        self.indices[a..b].iter().copied().zip(self.data[a..b].iter().copied())
    }

    pub fn nnz(&self) -> usize {
        self.indices.len()
    }

    pub fn to_dense(&self) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, self.n_cols));
        for i in 0..self.n_rows {
            for (j, w) in self.row(i) {
                out[[i, j]] += w;
            }
        }
        out
    }

    fn matmul(&self, a: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_rows, a.ncols()));
        for i in 0..self.n_rows {
            let mut orow = out.row_mut(i);
            for (j, w) in self.row(i) {
                orow.scaled_add(w, &a.row(j));
            }
        }
        out
    }

    fn t_matmul(&self, g: &Array2<f64>) -> Array2<f64> {
        let mut out = Array2::zeros((self.n_cols, g.ncols()));
        for i in 0..self.n_rows {
            let grow = g.row(i);
            for (j, w) in self.row(i) {
                out.row_mut(j).scaled_add(w, &grow);
            }
        }
        out
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    /// `n×m + 1×m`
    AddRow(Var, Var),
    /// `n×m * n×1`
    MulCol(Var, Var),
    MatMul(Var, Var),
    /// `a · bᵀ`
    MatMulT(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Unary(Var, Unary),
    ClampMin(Var, f64),
    ClampMax(Var, f64),
    RowSum(Var),
    Sum(Var),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    SegmentSum(Var, Rc<Vec<usize>>),
    PickCols(Var, Rc<Vec<usize>>),
    Reshape(Var),
    SpMM(Rc<Csr>, Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>, usize),
    RowLogSumExp(Var),
    PairDistance(Var, Rc<Vec<(usize, usize)>>, Space),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

/// Records operations for one forward pass; [`Tape::backward`] walks it in reverse.
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of a scalar with respect to every node that needs one.
pub struct Grads {
    grads: Vec<Option<Array2<f64>>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> HrcbError {
    HrcbError::invalid(format!("{what}: incompatible shapes {a:?} and {b:?}"))
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A differentiable input.
    pub fn var(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A constant input; no gradient is accumulated for it.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_const(&mut self, x: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), x))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1×1` node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.ng(v)
    }

    fn binary_same(&mut self, a: Var, b: Var, what: &str, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.dim(), vb.dim(), "{}", shape_err(what, va.shape(), vb.shape()));
        let mut out = va.clone();
        Zip::from(&mut out).and(vb).for_each(|o, &y| *o = f(*o, y));
        let ng = self.ng(a) || self.ng(b);
        self.push(out, op, ng)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "add", |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "sub", |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "mul", |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary_same(a, b, "div", |x, y| x / y, Op::Div(a, b))
    }

    /// Adds a `1×m` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        let (va, vr) = (&self.nodes[a.0].value, &self.nodes[row.0].value);
        assert!(vr.nrows() == 1 && vr.ncols() == va.ncols(), "{}", shape_err("add_row", va.shape(), vr.shape()));
        let out = va + vr;
        let ng = self.ng(a) || self.ng(row);
        self.push(out, Op::AddRow(a, row), ng)
    }

    /// Scales row `i` of `a` by `s[i, 0]`.
    pub fn mul_col(&mut self, a: Var, s: Var) -> Var {
        let (va, vs) = (&self.nodes[a.0].value, &self.nodes[s.0].value);
        assert!(vs.ncols() == 1 && vs.nrows() == va.nrows(), "{}", shape_err("mul_col", va.shape(), vs.shape()));
        let out = va * vs;
        let ng = self.ng(a) || self.ng(s);
        self.push(out, Op::MulCol(a, s), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value);
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMul(a, b), ng)
    }

    /// `a · bᵀ`, so `b` is stored `out × in`.
    pub fn matmul_t(&mut self, a: Var, b: Var) -> Var {
        let out = self.nodes[a.0].value.dot(&self.nodes[b.0].value.t());
        let ng = self.ng(a) || self.ng(b);
        self.push(out, Op::MatMulT(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, f: f64) -> Var {
        let out = &self.nodes[a.0].value * f;
        let ng = self.ng(a);
        self.push(out, Op::Scale(a, f), ng)
    }

    pub fn add_scalar(&mut self, a: Var, f: f64) -> Var {
        let out = &self.nodes[a.0].value + f;
        let ng = self.ng(a);
        self.push(out, Op::AddScalar(a), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn unary(&mut self, a: Var, f: Unary) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| f.apply(x));
        let ng = self.ng(a);
        self.push(out, Op::Unary(a, f), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Relu)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Ln)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Tanh)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn recip(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Recip)
    }

    pub fn clamp_min(&mut self, a: Var, lo: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.max(lo));
        let ng = self.ng(a);
        self.push(out, Op::ClampMin(a, lo), ng)
    }

    pub fn clamp_max(&mut self, a: Var, hi: f64) -> Var {
        let out = self.nodes[a.0].value.mapv(|x| x.min(hi));
        let ng = self.ng(a);
        self.push(out, Op::ClampMax(a, hi), ng)
    }

    /// `n×m -> n×1`
    pub fn row_sum(&mut self, a: Var) -> Var {
        let out = self.nodes[a.0].value.sum_axis(Axis(1)).insert_axis(Axis(1));
        let ng = self.ng(a);
        self.push(out, Op::RowSum(a), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Array2::from_elem((1, 1), self.nodes[a.0].value.sum());
        let ng = self.ng(a);
        self.push(out, Op::Sum(a), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.nodes[a.0].value.len().max(1);
        let s = self.sum(a);
        self.scale(s, 1.0 / n as f64)
    }

    /// Euclidean norm of each row, `n×1`.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let sq = self.square(a);
        let rs = self.row_sum(sq);
        self.sqrt(rs)
    }

    /// Row-wise dot product, `n×1`.
    pub fn row_dot(&mut self, a: Var, b: Var) -> Var {
        let p = self.mul(a, b);
        self.row_sum(p)
    }

    /// Columns `start..end`.
    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Var {
        let out = self.nodes[a.0].value.slice(s![.., start..end]).to_owned();
        let ng = self.ng(a);
        self.push(out, Op::SliceCols(a, start), ng)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.nodes[p.0].value.view()).collect();
        let out = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let ng = parts.iter().any(|p| self.ng(*p));
        self.push(out, Op::ConcatCols(parts.to_vec()), ng)
    }

    /// Output row `k` is row `index[k]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Var {
        let out = self.nodes[a.0].value.select(Axis(0), &index);
        let ng = self.ng(a);
        self.push(out, Op::GatherRows(a, index), ng)
    }

    /// Repeats a `1×m` row `n` times.
    pub fn broadcast_rows(&mut self, a: Var, n: usize) -> Var {
        self.gather_rows(a, Rc::new(vec![0; n]))
    }

    /// Sums rows of `a` into `n_seg` buckets given by `seg[k]`.
    pub fn segment_sum(&mut self, a: Var, seg: Rc<Vec<usize>>, n_seg: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let mut out = Array2::zeros((n_seg, va.ncols()));
        for (k, &s) in seg.iter().enumerate() {
            out.row_mut(s).scaled_add(1.0, &va.row(k));
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentSum(a, seg), ng)
    }

    /// `out[i, 0] = a[i, idx[i]]`
    pub fn pick_cols(&mut self, a: Var, idx: Rc<Vec<usize>>) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Array2::from_shape_fn((va.nrows(), 1), |(i, _)| va[[i, idx[i]]]);
        let ng = self.ng(a);
        self.push(out, Op::PickCols(a, idx), ng)
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let va = self.nodes[a.0].value.as_standard_layout().into_owned();
        let out = va.into_shape_with_order((rows, cols)).expect("reshape: element count differs");
        let ng = self.ng(a);
        self.push(out, Op::Reshape(a), ng)
    }

    /// Constant sparse matrix times `a`.
    pub fn spmm(&mut self, m: Rc<Csr>, a: Var) -> Var {
        let out = m.matmul(&self.nodes[a.0].value);
        let ng = self.ng(a);
        self.push(out, Op::SpMM(m, a), ng)
    }

    /// Softmax of an `E×1` column within each segment.
    pub fn segment_softmax(&mut self, a: Var, seg: Rc<Vec<usize>>, n_seg: usize) -> Var {
        let va = &self.nodes[a.0].value;
        let mut mx = vec![f64::NEG_INFINITY; n_seg];
        for (k, &s) in seg.iter().enumerate() {
            mx[s] = mx[s].max(va[[k, 0]]);
        }
        let mut out = Array2::zeros(va.dim());
        let mut tot = vec![0.0; n_seg];
        for (k, &s) in seg.iter().enumerate() {
            let e = (va[[k, 0]] - mx[s]).exp();
            out[[k, 0]] = e;
            tot[s] += e;
        }
        for (k, &s) in seg.iter().enumerate() {
            out[[k, 0]] /= tot[s];
        }
        let ng = self.ng(a);
        self.push(out, Op::SegmentSoftmax(a, seg, n_seg), ng)
    }

    /// Row-wise log-sum-exp, `n×1`.
    pub fn row_logsumexp(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let out = Array2::from_shape_fn((va.nrows(), 1), |(i, _)| {
            let r = va.row(i);
            let m = r.fold(f64::NEG_INFINITY, |acc, &x| acc.max(x));
            m + r.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        });
        let ng = self.ng(a);
        self.push(out, Op::RowLogSumExp(a), ng)
    }

    /// Geodesic distance between rows `i` and `j` of `x` for each pair, `E×1`.
    pub fn pair_distance(&mut self, x: Var, pairs: Rc<Vec<(usize, usize)>>, space: Space) -> Var {
        let vx = &self.nodes[x.0].value;
        let mut out = Array2::zeros((pairs.len(), 1));
        let cols = vx.ncols();
        let flat = vx.as_standard_layout();
        let flat = flat.as_slice().expect("standard layout");
        for (k, &(i, j)) in pairs.iter().enumerate() {
            out[[k, 0]] = space.dist(&flat[i * cols..(i + 1) * cols], &flat[j * cols..(j + 1) * cols]);
        }
        let ng = self.ng(x);
        self.push(out, Op::PairDistance(x, pairs, space), ng)
    }

    /// Reverse pass from a `1×1` node.
    pub fn backward(&self, loss: Var) -> Result<Grads> {
        let lv = &self.nodes[loss.0].value;
        if lv.dim() != (1, 1) {
            return Err(HrcbError::invalid(format!("backward needs a scalar, got {:?}", lv.shape())));
        }
        if !lv[[0, 0]].is_finite() {
            return Err(HrcbError::NonFinite(format!("loss = {}", lv[[0, 0]])));
        }
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Array2::ones((1, 1)));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Grads { grads })
    }

    fn acc(&self, grads: &mut [Option<Array2<f64>>], v: Var, g: Array2<f64>) {
        if !self.nodes[v.0].needs_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => *existing += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: &Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, g.clone());
                self.acc(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * val(b));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g * val(a));
                }
            }
            Op::Div(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g / val(b));
                }
                if self.ng(*b) {
                    let gb = -(g * &node.value) / val(b);
                    self.acc(grads, *b, gb);
                }
            }
            Op::AddRow(a, r) => {
                self.acc(grads, *a, g.clone());
                if self.ng(*r) {
                    self.acc(grads, *r, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulCol(a, s) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g * val(s));
                }
                if self.ng(*s) {
                    let gs = (g * val(a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    self.acc(grads, *s, gs);
                }
            }
            Op::MatMul(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(&val(b).t()));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, val(a).t().dot(g));
                }
            }
            Op::MatMulT(a, b) => {
                if self.ng(*a) {
                    self.acc(grads, *a, g.dot(val(b)));
                }
                if self.ng(*b) {
                    self.acc(grads, *b, g.t().dot(val(a)));
                }
            }
            Op::Scale(a, f) => self.acc(grads, *a, g * *f),
            Op::AddScalar(a) => self.acc(grads, *a, g.clone()),
            Op::Unary(a, f) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(a)).and(&node.value).for_each(|o, &x, &y| *o *= f.deriv(x, y));
                self.acc(grads, *a, ga);
            }
            Op::ClampMin(a, lo) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(a)).for_each(|o, &x| {
                    if x < *lo {
                        *o = 0.0
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::ClampMax(a, hi) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(val(a)).for_each(|o, &x| {
                    if x > *hi {
                        *o = 0.0
                    }
                });
                self.acc(grads, *a, ga);
            }
            Op::RowSum(a) => {
                let ga = Array2::from_shape_fn(val(a).dim(), |(i, _)| g[[i, 0]]);
                self.acc(grads, *a, ga);
            }
            Op::Sum(a) => self.acc(grads, *a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            Op::SliceCols(a, start) => {
                let mut ga = Array2::zeros(val(a).dim());
                ga.slice_mut(s![.., *start..*start + g.ncols()]).assign(g);
                self.acc(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut off = 0;
                for p in parts {
                    let w = val(p).ncols();
                    if self.ng(*p) {
                        self.acc(grads, *p, g.slice(s![.., off..off + w]).to_owned());
                    }
                    off += w;
                }
            }
            Op::GatherRows(a, index) => {
                let mut ga = Array2::zeros(val(a).dim());
                for (k, &r) in index.iter().enumerate() {
                    ga.row_mut(r).scaled_add(1.0, &g.row(k));
                }
                self.acc(grads, *a, ga);
            }
            Op::SegmentSum(a, seg) => {
                let ga = g.select(Axis(0), seg);
                self.acc(grads, *a, ga);
            }
            Op::PickCols(a, idx) => {
                let mut ga = Array2::zeros(val(a).dim());
                for (i, &j) in idx.iter().enumerate() {
                    ga[[i, j]] = g[[i, 0]];
                }
                self.acc(grads, *a, ga);
            }
            Op::Reshape(a) => {
                let ga = g.as_standard_layout().into_owned().into_shape_with_order(val(a).dim()).expect("reshape");
                self.acc(grads, *a, ga);
            }
            Op::SpMM(m, a) => self.acc(grads, *a, m.t_matmul(g)),
            Op::SegmentSoftmax(a, seg, n_seg) => {
                let y = &node.value;
                let mut dot = vec![0.0; *n_seg];
                for (k, &s) in seg.iter().enumerate() {
                    dot[s] += y[[k, 0]] * g[[k, 0]];
                }
                let ga = Array2::from_shape_fn(y.dim(), |(k, _)| y[[k, 0]] * (g[[k, 0]] - dot[seg[k]]));
                self.acc(grads, *a, ga);
            }
            Op::RowLogSumExp(a) => {
                let va = val(a);
                let ga = Array2::from_shape_fn(va.dim(), |(i, j)| g[[i, 0]] * (va[[i, j]] - node.value[[i, 0]]).exp());
                self.acc(grads, *a, ga);
            }
            Op::PairDistance(x, pairs, space) => {
                let vx = val(x);
                let mut gx = Array2::zeros(vx.dim());
                for (k, &(i, j)) in pairs.iter().enumerate() {
                    let gk = g[[k, 0]];
                    if gk == 0.0 || i == j {
                        continue;
                    }
                    pair_distance_grad(*space, vx, i, j, gk, &mut gx);
                }
                self.acc(grads, *x, gx);
            }
        }
    }
}

/// Adds `g · ∂d(x_i, x_j)/∂x` into `gx`.
fn pair_distance_grad(space: Space, x: &Array2<f64>, i: usize, j: usize, g: f64, gx: &mut Array2<f64>) {
    let (xi, xj) = (x.row(i), x.row(j));
    let m = x.ncols();
    match space.kind() {
        SpaceKind::Euclidean => {
            let d = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt();
            if d == 0.0 {
                return;
            }
            for t in 0..m {
                let u = g * (xi[t] - xj[t]) / d;
                gx[[i, t]] += u;
                gx[[j, t]] -= u;
            }
        }
        SpaceKind::Poincare => {
            let c = space.c();
            let s: f64 = xi.iter().zip(xj.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
            let al = 1.0 - c * xi.dot(&xi);
            let be = 1.0 - c * xj.dot(&xj);
            let z = 2.0 * c * s / (al * be);
            let zz = z * (z + 2.0);
            if zz <= 0.0 {
                return;
            }
            let dd = g / (c.sqrt() * zz.sqrt());
            for t in 0..m {
                let diff = xi[t] - xj[t];
                let dzi = 4.0 * c * diff / (al * be) + 4.0 * c * c * s * xi[t] / (al * al * be);
                let dzj = -4.0 * c * diff / (al * be) + 4.0 * c * c * s * xj[t] / (al * be * be);
                gx[[i, t]] += dd * dzi;
                gx[[j, t]] += dd * dzj;
            }
        }
        SpaceKind::Hyperboloid => {
            // q = c <x_i - x_j, x_i - x_j>_L / 2,  d = sqrt(K) acosh(1 + q)
            let c = space.c();
            let diff: Vec<f64> = xi.iter().zip(xj.iter()).map(|(a, b)| a - b).collect();
            let q = 0.5 * c * (diff[1..].iter().map(|v| v * v).sum::<f64>() - diff[0] * diff[0]);
            let qq = q * (q + 2.0);
            if qq <= 0.0 {
                return;
            }
            let dd = g * space.k().sqrt() / qq.sqrt();
            for (t, dv) in diff.iter().enumerate() {
                let sign = if t == 0 { -1.0 } else { 1.0 };
                let u = dd * c * sign * dv;
                gx[[i, t]] += u;
                gx[[j, t]] -= u;
            }
        }
    }
}
