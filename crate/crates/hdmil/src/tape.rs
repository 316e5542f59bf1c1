//! Reverse-mode gradient tape over dense `f64` matrices.
//!
//! Every intermediate value is an `Array2<f64>`; scalars are 1×1 and row
//! vectors are 1×C. Ops are recorded eagerly in topological order, so the
//! backward pass is a single reverse sweep. The op set is deliberately small:
//! just what the network forward passes and losses need, each with a
//! hand-derived adjoint that is finite-difference checked in the tests below.

use ndarray::{concatenate, Array2, Axis};

/// Handle to a node on a [`Tape`]. Only valid for the tape that created it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    /// N×C plus a 1×C row broadcast over rows.
    AddRow(Var, Var),
    Scale(Var, f64),
    AddScalar(Var, f64),
    Relu(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Ln(Var),
    Abs(Var),
    SumAll(Var),
    MeanAll(Var),
    /// Elementwise division by a 1×1 scalar node.
    DivByScalar(Var, Var),
    /// Elementwise product with a constant matrix (no gradient into the constant).
    MulConst(Var, Array2<f64>),
    SelectRows(Var, Vec<usize>),
    SelectCol(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    LogSoftmaxRows(Var),
    /// Forward: 1 where input > threshold, else 0. Backward: identity.
    StBinarize(Var, f64),
    /// Piecewise-linear activation on a uniform grid over [lo, hi].
    /// Inputs: x (1×Q), knot values (Q×(segments+1)). Output 1×Q.
    Pwl {
        x: Var,
        knots: Var,
        lo: f64,
        hi: f64,
    },
}

struct Node {
    value: Array2<f64>,
    op: Op,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradients of one scalar node with respect to every node on the tape.
pub struct Grads {
    g: Vec<Option<Array2<f64>>>,
}

impl Grads {
    /// Gradient with respect to `v`, or `None` if `v` does not influence the root.
    pub fn wrt(&self, v: Var) -> Option<&Array2<f64>> {
        self.g[v.0].as_ref()
    }

    /// Gradient with respect to `v`, materializing zeros for unused nodes.
    pub fn wrt_or_zeros(&self, v: Var, shape: (usize, usize)) -> Array2<f64> {
        match self.g[v.0].as_ref() {
            Some(g) => g.clone(),
            None => Array2::zeros(shape),
        }
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        debug_assert_eq!(self.nodes[v.0].value.dim(), (1, 1));
        self.nodes[v.0].value[(0, 0)]
    }

    fn push(&mut self, value: Array2<f64>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Register an input matrix (parameter or data constant).
    pub fn leaf(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) - self.value(b);
        self.push(v, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let v = self.value(a).t().to_owned();
        self.push(v, Op::Transpose(a))
    }

    pub fn add_row(&mut self, x: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        debug_assert_eq!(self.value(x).ncols(), self.value(row).ncols());
        let v = self.value(x) + self.value(row);
        self.push(v, Op::AddRow(x, row))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        self.push(v, Op::AddScalar(a, c))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::exp);
        self.push(v, Op::Exp(a))
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        self.push(v, Op::Ln(a))
    }

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::abs);
        self.push(v, Op::Abs(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s = self.value(a).sum();
        self.push(Array2::from_elem((1, 1), s), Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a).sum() / self.value(a).len() as f64;
        self.push(Array2::from_elem((1, 1), m), Op::MeanAll(a))
    }

    pub fn div_by_scalar(&mut self, x: Var, s: Var) -> Var {
        debug_assert_eq!(self.value(s).dim(), (1, 1));
        let d = self.value(s)[(0, 0)];
        let v = self.value(x) / d;
        self.push(v, Op::DivByScalar(x, s))
    }

    pub fn mul_const(&mut self, x: Var, c: Array2<f64>) -> Var {
        debug_assert_eq!(self.value(x).dim(), c.dim());
        let v = self.value(x) * &c;
        self.push(v, Op::MulConst(x, c))
    }

    pub fn select_rows(&mut self, x: Var, rows: Vec<usize>) -> Var {
        let src = self.value(x);
        let mut v = Array2::zeros((rows.len(), src.ncols()));
        for (i, &r) in rows.iter().enumerate() {
            v.row_mut(i).assign(&src.row(r));
        }
        self.push(v, Op::SelectRows(x, rows))
    }

    pub fn select_col(&mut self, x: Var, col: usize) -> Var {
        let v = self
            .value(x)
            .column(col)
            .to_owned()
            .insert_axis(Axis(1))
            .to_owned();
        self.push(v, Op::SelectCol(x, col))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(v, Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(v, Op::ConcatCols(parts.to_vec()))
    }

    /// Numerically stable row-wise log-softmax.
    pub fn log_softmax_rows(&mut self, x: Var) -> Var {
        let src = self.value(x);
        let mut v = src.clone();
        for mut row in v.rows_mut() {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|&z| (z - m).exp()).sum::<f64>().ln();
            row.mapv_inplace(|z| z - lse);
        }
        self.push(v, Op::LogSoftmaxRows(x))
    }

    /// Straight-through binarization: forward `1[x > threshold]`, backward identity.
    pub fn st_binarize(&mut self, x: Var, threshold: f64) -> Var {
        let v = self
            .value(x)
            .mapv(|s| if s > threshold { 1.0 } else { 0.0 });
        self.push(v, Op::StBinarize(x, threshold))
    }

    /// Per-dimension piecewise-linear activation with learnable knot values.
    ///
    /// `x` is 1×Q with entries in `[lo, hi]`; `knots` is Q×(S+1) where S is the
    /// number of grid segments. Inputs outside the grid are clamped.
    pub fn pwl(&mut self, x: Var, knots: Var, lo: f64, hi: f64) -> Var {
        let q = self.value(x).ncols();
        debug_assert_eq!(self.value(x).nrows(), 1);
        debug_assert_eq!(self.value(knots).nrows(), q);
        let segments = self.value(knots).ncols() - 1;
        let mut v = Array2::zeros((1, q));
        for j in 0..q {
            let (i, frac) = pwl_locate(self.value(x)[(0, j)], lo, hi, segments);
            let k = self.value(knots);
            v[(0, j)] = k[(j, i)] * (1.0 - frac) + k[(j, i + 1)] * frac;
        }
        self.push(v, Op::Pwl { x, knots, lo, hi })
    }

    /// Reverse sweep from a 1×1 root node.
    pub fn backward(&self, root: Var) -> Grads {
        assert_eq!(
            self.nodes[root.0].value.dim(),
            (1, 1),
            "backward root must be scalar"
        );
        let mut g: Vec<Option<Array2<f64>>> = vec![None; self.nodes.len()];
        g[root.0] = Some(Array2::from_elem((1, 1), 1.0));

        for i in (0..=root.0).rev() {
            // take to satisfy the borrow checker; restored after dispatch
            let Some(gi) = g[i].take() else { continue };
            match &self.nodes[i].op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    acc(&mut g, a.0, &gi);
                    acc(&mut g, b.0, &gi);
                }
                Op::Sub(a, b) => {
                    acc(&mut g, a.0, &gi);
                    acc_neg(&mut g, b.0, &gi);
                }
                Op::Mul(a, b) => {
                    let da = &gi * &self.nodes[b.0].value;
                    let db = &gi * &self.nodes[a.0].value;
                    acc(&mut g, a.0, &da);
                    acc(&mut g, b.0, &db);
                }
                Op::MatMul(a, b) => {
                    let da = gi.dot(&self.nodes[b.0].value.t());
                    let db = self.nodes[a.0].value.t().dot(&gi);
                    acc(&mut g, a.0, &da);
                    acc(&mut g, b.0, &db);
                }
                Op::Transpose(a) => {
                    let da = gi.t().to_owned();
                    acc(&mut g, a.0, &da);
                }
                Op::AddRow(x, row) => {
                    acc(&mut g, x.0, &gi);
                    let dr = gi.sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut g, row.0, &dr);
                }
                Op::Scale(a, c) => {
                    let da = &gi * *c;
                    acc(&mut g, a.0, &da);
                }
                Op::AddScalar(a, _) => {
                    acc(&mut g, a.0, &gi);
                }
                Op::Relu(a) => {
                    let da = &gi * &self.nodes[a.0].value.mapv(|x| if x > 0.0 { 1.0 } else { 0.0 });
                    acc(&mut g, a.0, &da);
                }
                Op::Tanh(a) => {
                    let da = &gi * &self.nodes[i].value.mapv(|y| 1.0 - y * y);
                    acc(&mut g, a.0, &da);
                }
                Op::Sigmoid(a) => {
                    let da = &gi * &self.nodes[i].value.mapv(|y| y * (1.0 - y));
                    acc(&mut g, a.0, &da);
                }
                Op::Exp(a) => {
                    let da = &gi * &self.nodes[i].value;
                    acc(&mut g, a.0, &da);
                }
                Op::Ln(a) => {
                    let da = &gi / &self.nodes[a.0].value;
                    acc(&mut g, a.0, &da);
                }
                Op::Abs(a) => {
                    let da = &gi * &self.nodes[a.0].value.mapv(f64::signum);
                    acc(&mut g, a.0, &da);
                }
                Op::SumAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    let da = Array2::from_elem(shape, gi[(0, 0)]);
                    acc(&mut g, a.0, &da);
                }
                Op::MeanAll(a) => {
                    let shape = self.nodes[a.0].value.dim();
                    let n = self.nodes[a.0].value.len() as f64;
                    let da = Array2::from_elem(shape, gi[(0, 0)] / n);
                    acc(&mut g, a.0, &da);
                }
                Op::DivByScalar(x, s) => {
                    let sv = self.nodes[s.0].value[(0, 0)];
                    let dx = &gi / sv;
                    let ds = -(&gi * &self.nodes[x.0].value).sum() / (sv * sv);
                    acc(&mut g, x.0, &dx);
                    acc(&mut g, s.0, &Array2::from_elem((1, 1), ds));
                }
                Op::MulConst(x, c) => {
                    let dx = &gi * c;
                    acc(&mut g, x.0, &dx);
                }
                Op::SelectRows(x, rows) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    for (k, &r) in rows.iter().enumerate() {
                        let mut row = dx.row_mut(r);
                        row += &gi.row(k);
                    }
                    acc(&mut g, x.0, &dx);
                }
                Op::SelectCol(x, col) => {
                    let mut dx = Array2::zeros(self.nodes[x.0].value.dim());
                    let mut c = dx.column_mut(*col);
                    c += &gi.column(0);
                    acc(&mut g, x.0, &dx);
                }
                Op::ConcatRows(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let rows = self.nodes[p.0].value.nrows();
                        let slice = gi.slice(ndarray::s![offset..offset + rows, ..]).to_owned();
                        acc(&mut g, p.0, &slice);
                        offset += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let cols = self.nodes[p.0].value.ncols();
                        let slice = gi.slice(ndarray::s![.., offset..offset + cols]).to_owned();
                        acc(&mut g, p.0, &slice);
                        offset += cols;
                    }
                }
                Op::LogSoftmaxRows(x) => {
                    // d/dx_ij of ls_ik is delta_jk - p_ij
                    let mut dx = gi.clone();
                    for (mut drow, lsrow) in dx.rows_mut().into_iter().zip(self.nodes[i].value.rows()) {
                        let gsum: f64 = drow.iter().sum();
                        for (d, &ls) in drow.iter_mut().zip(lsrow.iter()) {
                            *d -= ls.exp() * gsum;
                        }
                    }
                    acc(&mut g, x.0, &dx);
                }
                Op::StBinarize(x, _) => {
                    acc(&mut g, x.0, &gi);
                }
                Op::Pwl { x, knots, lo, hi } => {
                    let q = self.nodes[x.0].value.ncols();
                    let segments = self.nodes[knots.0].value.ncols() - 1;
                    let h = (hi - lo) / segments as f64;
                    let mut dx = Array2::zeros((1, q));
                    let mut dk = Array2::zeros(self.nodes[knots.0].value.dim());
                    for j in 0..q {
                        let (seg, frac) = pwl_locate(self.nodes[x.0].value[(0, j)], *lo, *hi, segments);
                        let kv = &self.nodes[knots.0].value;
                        let gj = gi[(0, j)];
                        dx[(0, j)] = gj * (kv[(j, seg + 1)] - kv[(j, seg)]) / h;
                        dk[(j, seg)] += gj * (1.0 - frac);
                        dk[(j, seg + 1)] += gj * frac;
                    }
                    acc(&mut g, x.0, &dx);
                    acc(&mut g, knots.0, &dk);
                }
            }
            g[i] = Some(gi);
        }
        Grads { g }
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn pwl_locate(x: f64, lo: f64, hi: f64, segments: usize) -> (usize, f64) {
    let h = (hi - lo) / segments as f64;
    let t = ((x - lo) / h).clamp(0.0, segments as f64);
    let mut i = t.floor() as usize;
    if i >= segments {
        i = segments - 1;
    }
    (i, t - i as f64)
}

fn acc(g: &mut [Option<Array2<f64>>], idx: usize, delta: &Array2<f64>) {
    match &mut g[idx] {
        Some(a) => *a += delta,
        None => g[idx] = Some(delta.clone()),
    }
}

fn acc_neg(g: &mut [Option<Array2<f64>>], idx: usize, delta: &Array2<f64>) {
    match &mut g[idx] {
        Some(a) => *a -= delta,
        None => g[idx] = Some(-delta),
    }
}
