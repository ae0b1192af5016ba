//! Reverse-mode differentiation on a flat tape.
//!
//! Each training query builds a fresh tape: leaves for the model parameters
//! and the clip features, then one node per primitive op, then a single
//! backward sweep from the scalar loss. Ops are matrix-level rather than
//! scalar-level so a forward pass is a few hundred nodes, not millions.
//!
//! Besides the usual linear-algebra primitives there are a few fused ops
//! whose forward results feed discrete choices (warping paths, nearest
//! neighbours). Those choices are made once per forward pass and treated as
//! constants by the backward sweep, which makes the gradients exact almost
//! everywhere: the choice is piecewise constant in the inputs.

use crate::error::Result;
use crate::matching;
use crate::tensor::{dot, softmax_rows, Matrix, Scalar};

/// Probability floor inside `-log(p)`; keeps the loss finite if a branch
/// drives some class probability to numerical zero.
pub const LOG_FLOOR: f64 = 1e-30;

/// Handle to a tape node. Valid only for the tape that produced it.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

enum Op<F> {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Scale(Var, F),
    MulScalar(Var, Var),
    Transpose(Var),
    Relu(Var),
    SoftmaxRows(Var),
    AddRowBias(Var, Var),
    MeanRows(Var),
    BroadcastRow(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows(Var, usize),
    /// Pairwise cosine distances between rows of the two parents.
    CosineMatrix(Var, Var),
    /// Mean of the parent's entries over a fixed set of cells.
    PathMean(Var, Vec<(usize, usize)>),
    /// Directed chamfer distance; per-row nearest-neighbour indices frozen.
    ChamferDirected(Var, Var, Vec<usize>),
    /// Sum over rows of the euclidean distance between paired rows.
    RowDistSum(Var, Var),
    /// `-log(max(p[0, idx], LOG_FLOOR))`.
    NegLogEntry(Var, usize),
}

struct Node<F> {
    value: Matrix<F>,
    op: Op<F>,
}

pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Matrix<F>, op: Op<F>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Inputs and parameters enter the graph as leaves.
    pub fn leaf(&mut self, value: Matrix<F>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Matrix<F> {
        &self.nodes[v.0].value
    }

    pub fn scalar_value(&self, v: Var) -> F {
        self.value(v).item()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).matmul(self.value(b));
        self.push(value, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).add(self.value(b));
        self.push(value, Op::Add(a, b))
    }

    pub fn scale(&mut self, a: Var, k: F) -> Var {
        let value = self.value(a).scale(k);
        self.push(value, Op::Scale(a, k))
    }

    /// Multiply by a learnable 1x1 scalar.
    pub fn mul_scalar(&mut self, s: Var, a: Var) -> Var {
        let sv = self.scalar_value(s);
        let value = self.value(a).scale(sv);
        self.push(value, Op::MulScalar(s, a))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let value = self.value(a).transpose();
        self.push(value, Op::Transpose(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let value = self.value(a).map(|x| if x > F::zero() { x } else { F::zero() });
        self.push(value, Op::Relu(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let value = softmax_rows(self.value(a));
        self.push(value, Op::SoftmaxRows(a))
    }

    /// Adds a 1xC bias row to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(bias));
        assert_eq!(bv.rows(), 1, "bias must be a row");
        assert_eq!(av.cols(), bv.cols(), "bias width");
        let mut value = av.clone();
        for r in 0..value.rows() {
            for (x, &b) in value.row_mut(r).iter_mut().zip(bv.row(0)) {
                *x = *x + b;
            }
        }
        self.push(value, Op::AddRowBias(a, bias))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).mean_rows();
        self.push(value, Op::MeanRows(a))
    }

    /// Repeats a 1xC row `rows` times.
    pub fn broadcast_row(&mut self, a: Var, rows: usize) -> Var {
        let av = self.value(a);
        assert_eq!(av.rows(), 1, "broadcast source must be a row");
        let row: Vec<F> = av.row(0).to_vec();
        let value = Matrix::from_fn(rows, row.len(), |_, c| row[c]);
        self.push(value, Op::BroadcastRow(a))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let cols = self.value(parts[0]).cols();
        let total: usize = parts.iter().map(|&p| self.value(p).rows()).sum();
        let mut data = Vec::with_capacity(total * cols);
        for &p in parts {
            let pv = self.value(p);
            assert_eq!(pv.cols(), cols, "concat_rows widths");
            data.extend_from_slice(pv.data());
        }
        self.push(Matrix::from_vec(total, cols, data), Op::ConcatRows(parts.to_vec()))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let rows = self.value(parts[0]).rows();
        let total: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut value = Matrix::zeros(rows, total);
        let mut base = 0;
        for &p in parts {
            let pv = self.value(p).clone();
            assert_eq!(pv.rows(), rows, "concat_cols heights");
            for r in 0..rows {
                value.row_mut(r)[base..base + pv.cols()].copy_from_slice(pv.row(r));
            }
            base += pv.cols();
        }
        self.push(value, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let av = self.value(a);
        assert!(start + len <= av.rows(), "slice_rows range");
        let mut value = Matrix::zeros(len, av.cols());
        for r in 0..len {
            value.row_mut(r).copy_from_slice(av.row(start + r));
        }
        self.push(value, Op::SliceRows(a, start))
    }

    /// Pairwise cosine distance between rows of `a` and rows of `b`.
    /// Fails if any row has (numerically) zero norm.
    pub fn cosine_matrix(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = matching::cosine_matrix_checked(self.value(a), self.value(b))?;
        Ok(self.push(value, Op::CosineMatrix(a, b)))
    }

    /// Mean of the entries of `m` along a fixed cell path.
    pub fn path_mean(&mut self, m: Var, cells: Vec<(usize, usize)>) -> Var {
        assert!(!cells.is_empty());
        let mv = self.value(m);
        let mut acc = F::zero();
        for &(x, y) in &cells {
            acc = acc + mv[(x, y)];
        }
        let value = Matrix::scalar(acc / F::from_usize(cells.len()).unwrap());
        self.push(value, Op::PathMean(m, cells))
    }

    /// Directed chamfer distance from rows of `a` to rows of `b`.
    pub fn chamfer_directed(&mut self, a: Var, b: Var) -> Var {
        let (value, argmins) = matching::chamfer_with_argmins(self.value(a), self.value(b));
        self.push(Matrix::scalar(value), Op::ChamferDirected(a, b, argmins))
    }

    /// Sum over paired rows of the euclidean distance between them.
    pub fn row_dist_sum(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape(), "row_dist_sum shapes");
        let mut acc = F::zero();
        for r in 0..av.rows() {
            let mut sq = F::zero();
            for (&x, &y) in av.row(r).iter().zip(bv.row(r)) {
                let d = x - y;
                sq = sq + d * d;
            }
            acc = acc + sq.sqrt();
        }
        self.push(Matrix::scalar(acc), Op::RowDistSum(a, b))
    }

    /// Negative log of one entry of a probability row, floored for stability.
    pub fn neg_log_entry(&mut self, probs: Var, idx: usize) -> Var {
        let pv = self.value(probs);
        assert_eq!(pv.rows(), 1, "probabilities must be a row");
        assert!(idx < pv.cols(), "class index in range");
        let floor = F::lit(LOG_FLOOR);
        let p = pv[(0, idx)].max(floor);
        self.push(Matrix::scalar(-p.ln()), Op::NegLogEntry(probs, idx))
    }

    /// Reverse sweep from a scalar output. Returns one gradient slot per
    /// node; untouched slots read back as zeros.
    pub fn backward(&self, out: Var) -> Grads<F> {
        assert_eq!(self.value(out).shape(), (1, 1), "backward needs a scalar root");
        let mut g: Vec<Option<Matrix<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[out.0] = Some(Matrix::scalar(F::one()));

        for id in (0..=out.0).rev() {
            let gout = match &g[id] {
                Some(m) => m.clone(),
                None => continue,
            };
            match &self.nodes[id].op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = gout.matmul_nt(self.value(*b));
                    let db = self.value(*a).matmul_tn(&gout);
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::Add(a, b) => {
                    acc(&mut g, *a, gout.clone());
                    acc(&mut g, *b, gout);
                }
                Op::Scale(a, k) => acc(&mut g, *a, gout.scale(*k)),
                Op::MulScalar(s, a) => {
                    let av = self.value(*a);
                    let ds = dot(gout.data(), av.data());
                    acc(&mut g, *s, Matrix::scalar(ds));
                    acc(&mut g, *a, gout.scale(self.scalar_value(*s)));
                }
                Op::Transpose(a) => acc(&mut g, *a, gout.transpose()),
                Op::Relu(a) => {
                    let av = self.value(*a);
                    let da = Matrix::from_fn(av.rows(), av.cols(), |r, c| {
                        if av[(r, c)] > F::zero() {
                            gout[(r, c)]
                        } else {
                            F::zero()
                        }
                    });
                    acc(&mut g, *a, da);
                }
                Op::SoftmaxRows(a) => {
                    let s = &self.nodes[id].value;
                    let mut da = Matrix::zeros(s.rows(), s.cols());
                    for r in 0..s.rows() {
                        let srow = s.row(r);
                        let grow = gout.row(r);
                        let proj = dot(grow, srow);
                        for c in 0..s.cols() {
                            da[(r, c)] = srow[c] * (grow[c] - proj);
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::AddRowBias(a, bias) => {
                    let mut db = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, &x) in db.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *o = *o + x;
                        }
                    }
                    acc(&mut g, *a, gout);
                    acc(&mut g, *bias, db);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let inv = F::one() / F::from_usize(av.rows()).unwrap();
                    let da =
                        Matrix::from_fn(av.rows(), av.cols(), |_, c| gout[(0, c)] * inv);
                    acc(&mut g, *a, da);
                }
                Op::BroadcastRow(a) => {
                    let mut da = Matrix::zeros(1, gout.cols());
                    for r in 0..gout.rows() {
                        for (o, &x) in da.row_mut(0).iter_mut().zip(gout.row(r)) {
                            *o = *o + x;
                        }
                    }
                    acc(&mut g, *a, da);
                }
                Op::ConcatRows(parts) => {
                    let mut base = 0;
                    for &p in parts {
                        let rows = self.value(p).rows();
                        let mut dp = Matrix::zeros(rows, gout.cols());
                        for r in 0..rows {
                            dp.row_mut(r).copy_from_slice(gout.row(base + r));
                        }
                        acc(&mut g, p, dp);
                        base += rows;
                    }
                }
                Op::ConcatCols(parts) => {
                    let mut base = 0;
                    for &p in parts {
                        let cols = self.value(p).cols();
                        let mut dp = Matrix::zeros(gout.rows(), cols);
                        for r in 0..gout.rows() {
                            dp.row_mut(r).copy_from_slice(&gout.row(r)[base..base + cols]);
                        }
                        acc(&mut g, p, dp);
                        base += cols;
                    }
                }
                Op::SliceRows(a, start) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..gout.rows() {
                        da.row_mut(start + r).copy_from_slice(gout.row(r));
                    }
                    acc(&mut g, *a, da);
                }
                Op::CosineMatrix(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    let na: Vec<F> = (0..av.rows()).map(|r| crate::tensor::norm(av.row(r))).collect();
                    let nb: Vec<F> = (0..bv.rows()).map(|r| crate::tensor::norm(bv.row(r))).collect();
                    for x in 0..av.rows() {
                        for y in 0..bv.rows() {
                            let go = gout[(x, y)];
                            if go == F::zero() {
                                continue;
                            }
                            let prod = na[x] * nb[y];
                            let cos = dot(av.row(x), bv.row(y)) / prod;
                            for k in 0..av.cols() {
                                let u = av[(x, k)];
                                let v = bv[(y, k)];
                                da[(x, k)] =
                                    da[(x, k)] - go * (v / prod - cos * u / (na[x] * na[x]));
                                db[(y, k)] =
                                    db[(y, k)] - go * (u / prod - cos * v / (nb[y] * nb[y]));
                            }
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::PathMean(m, cells) => {
                    let mv = self.value(*m);
                    let share = gout.item() / F::from_usize(cells.len()).unwrap();
                    let mut dm = Matrix::zeros(mv.rows(), mv.cols());
                    for &(x, y) in cells {
                        dm[(x, y)] = dm[(x, y)] + share;
                    }
                    acc(&mut g, *m, dm);
                }
                Op::ChamferDirected(a, b, argmins) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let go = gout.item();
                    let inv_rows = F::one() / F::from_usize(av.rows()).unwrap();
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for (x, &j) in argmins.iter().enumerate() {
                        let mut sq = F::zero();
                        for (&u, &v) in av.row(x).iter().zip(bv.row(j)) {
                            let d = u - v;
                            sq = sq + d * d;
                        }
                        let n = sq.sqrt();
                        if n <= F::lit(1e-12) {
                            continue; // distance kink; subgradient zero
                        }
                        let coef = go * inv_rows / n;
                        for k in 0..av.cols() {
                            let d = (av[(x, k)] - bv[(j, k)]) * coef;
                            da[(x, k)] = da[(x, k)] + d;
                            db[(j, k)] = db[(j, k)] - d;
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::RowDistSum(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let go = gout.item();
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    let mut db = Matrix::zeros(bv.rows(), bv.cols());
                    for r in 0..av.rows() {
                        let mut sq = F::zero();
                        for (&u, &v) in av.row(r).iter().zip(bv.row(r)) {
                            let d = u - v;
                            sq = sq + d * d;
                        }
                        let n = sq.sqrt();
                        if n <= F::lit(1e-12) {
                            continue;
                        }
                        let coef = go / n;
                        for k in 0..av.cols() {
                            let d = (av[(r, k)] - bv[(r, k)]) * coef;
                            da[(r, k)] = d;
                            db[(r, k)] = -d;
                        }
                    }
                    acc(&mut g, *a, da);
                    acc(&mut g, *b, db);
                }
                Op::NegLogEntry(p, idx) => {
                    let pv = self.value(*p);
                    let mut dp = Matrix::zeros(1, pv.cols());
                    let prob = pv[(0, *idx)];
                    if prob > F::lit(LOG_FLOOR) {
                        dp[(0, *idx)] = -gout.item() / prob;
                    }
                    acc(&mut g, *p, dp);
                }
            }
        }
        Grads { g }
    }
}

fn acc<F: Scalar>(g: &mut [Option<Matrix<F>>], v: Var, delta: Matrix<F>) {
    match &mut g[v.0] {
        Some(m) => m.add_assign(&delta),
        slot => *slot = Some(delta),
    }
}

/// Gradients from one backward sweep.
pub struct Grads<F: Scalar> {
    g: Vec<Option<Matrix<F>>>,
}

impl<F: Scalar> Grads<F> {
    /// Gradient with respect to `v`, zeros if the loss never touched it.
    pub fn wrt(&self, tape: &Tape<F>, v: Var) -> Matrix<F> {
        match &self.g[v.0] {
            Some(m) => m.clone(),
            None => {
                let (r, c) = tape.value(v).shape();
                Matrix::zeros(r, c)
            }
        }
    }
}
