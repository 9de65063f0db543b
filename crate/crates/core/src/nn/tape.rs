//! Reverse-mode differentiation over matrix-valued operations.
//!
//! Operations are appended to a [`Tape`] in evaluation order, so node
//! indices are a topological order and the backward pass is a single reverse
//! sweep.

use std::sync::Arc;

use super::matrix::Matrix;
use crate::sparse::CsrMatrix;

/// Probabilities are clamped to `[BCE_EPS, 1 - BCE_EPS]` inside the loss.
pub const BCE_EPS: f64 = 1e-7;

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
    MatMul(Var, Var),
    SpMM(Arc<CsrMatrix>, Var),
    Gather(Var, Vec<Option<usize>>),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Relu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Cols(Var, usize),
    ConcatCols(Vec<Var>),
    StackRows(Vec<Var>),
    Row(Var, usize),
    MeanRows(Var),
    RowDots(Var, Vec<(usize, usize)>),
    LogSigmoidSum(Var),
    BceLogit(Var, f64),
    BceLogProb(Var, f64),
    Sum(Var),
}

#[derive(Debug)]
struct Node {
    value: Arc<Matrix>,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln σ(x)` without overflow.
fn log_sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        -(-x).exp().ln_1p()
    } else {
        x - x.exp().ln_1p()
    }
}

pub fn bce_value(z: f64, y: f64) -> f64 {
    let z = z.clamp(BCE_EPS, 1.0 - BCE_EPS);
    -(y * z.ln() + (1.0 - y) * (1.0 - z).ln())
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

    fn push(&mut self, value: Matrix, op: Op) -> Var {
        self.push_arc(Arc::new(value), op)
    }

    fn push_arc(&mut self, value: Arc<Matrix>, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).shape()
    }

    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Leaf sharing storage with the caller.
    pub fn leaf_shared(&mut self, value: Arc<Matrix>) -> Var {
        self.push_arc(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).matmul(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// Constant sparse matrix times `b`.
    pub fn spmm(&mut self, s: Arc<CsrMatrix>, b: Var) -> Var {
        let bv = self.value(b);
        assert_eq!(s.cols(), bv.rows(), "spmm shape");
        let width = bv.cols();
        let v = Matrix::new(s.rows(), width, s.mul_dense(bv.data(), width));
        self.push(v, Op::SpMM(s, b))
    }

    /// Rows of `a` in the given order; `None` yields a zero row.
    pub fn gather_rows(&mut self, a: Var, rows: Vec<Option<usize>>) -> Var {
        let av = self.value(a);
        let mut out = Matrix::zeros(rows.len(), av.cols());
        for (k, r) in rows.iter().enumerate() {
            if let Some(r) = *r {
                out.row_mut(k).copy_from_slice(av.row(r));
            }
        }
        self.push(out, Op::Gather(a, rows))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        self.push(v, Op::Add(a, b))
    }

    /// Adds the `1 x c` row `bias` to every row of `a`.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let mut v = self.value(a).clone();
        let b = self.value(bias);
        assert_eq!(b.shape(), (1, v.cols()), "bias shape");
        for r in 0..v.rows() {
            v.row_mut(r).iter_mut().zip(b.data()).for_each(|(x, y)| *x += y);
        }
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape(), bv.shape());
        let data = av.data().iter().zip(bv.data()).map(|(x, y)| x * y).collect();
        let v = Matrix::new(av.rows(), av.cols(), data);
        self.push(v, Op::Mul(a, b))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.max(0.0));
        self.push(v, Op::Relu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    /// Columns `start..start + width`.
    pub fn cols(&mut self, a: Var, start: usize, width: usize) -> Var {
        let av = self.value(a);
        let v = Matrix::from_fn(av.rows(), width, |r, c| av.get(r, start + c));
        self.push(v, Op::Cols(a, start))
    }

    pub fn concat_cols(&mut self, parts: Vec<Var>) -> Var {
        let rows = self.value(parts[0]).rows();
        let width: usize = parts.iter().map(|&p| self.value(p).cols()).sum();
        let mut v = Matrix::zeros(rows, width);
        let mut off = 0;
        for &p in &parts {
            let pv = self.value(p);
            assert_eq!(pv.rows(), rows, "concat_cols row mismatch");
            for r in 0..rows {
                v.row_mut(r)[off..off + pv.cols()].copy_from_slice(pv.row(r));
            }
            off += pv.cols();
        }
        self.push(v, Op::ConcatCols(parts))
    }

    /// Stacks `1 x c` rows into an `n x c` matrix.
    pub fn stack_rows(&mut self, rows: Vec<Var>) -> Var {
        let width = self.value(rows[0]).cols();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in &rows {
            let rv = self.value(r);
            assert_eq!(rv.shape(), (1, width), "stack_rows expects row vectors");
            data.extend_from_slice(rv.data());
        }
        let v = Matrix::new(rows.len(), width, data);
        self.push(v, Op::StackRows(rows))
    }

    pub fn row(&mut self, a: Var, i: usize) -> Var {
        let v = Matrix::row_vector(self.value(a).row(i).to_vec());
        self.push(v, Op::Row(a, i))
    }

    pub fn mean_rows(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let n = av.rows() as f64;
        let v = Matrix::from_fn(1, av.cols(), |_, c| (0..av.rows()).map(|r| av.get(r, c)).sum::<f64>() / n);
        self.push(v, Op::MeanRows(a))
    }

    /// Column vector of `row_i · row_j` for each pair.
    pub fn row_dots(&mut self, a: Var, pairs: Vec<(usize, usize)>) -> Var {
        let av = self.value(a);
        let data = pairs
            .iter()
            .map(|&(i, j)| av.row(i).iter().zip(av.row(j)).map(|(x, y)| x * y).sum())
            .collect();
        let v = Matrix::new(pairs.len(), 1, data);
        self.push(v, Op::RowDots(a, pairs))
    }

    /// Scalar `Σ ln σ(x)` over all entries.
    pub fn log_sigmoid_sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().map(|&x| log_sigmoid(x)).sum();
        self.push(Matrix::new(1, 1, vec![s]), Op::LogSigmoidSum(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Matrix::new(1, 1, vec![s]), Op::Sum(a))
    }

    /// Binary cross-entropy of `σ(logit)` against `target`, computed in the
    /// stable logit form.
    pub fn bce_with_logit(&mut self, logit: Var, target: f64) -> Var {
        let x = self.value(logit).item();
        let v = x.max(0.0) - x * target + (-x.abs()).exp().ln_1p();
        self.push(Matrix::new(1, 1, vec![v]), Op::BceLogit(logit, target))
    }

    /// Binary cross-entropy of `exp(log_prob)` against `target`, with the
    /// probability clamped to `[ε, 1-ε]`.
    pub fn bce_with_log_prob(&mut self, log_prob: Var, target: f64) -> Var {
        let s = self.value(log_prob).item();
        let v = bce_value(s.exp(), target);
        self.push(Matrix::new(1, 1, vec![v]), Op::BceLogProb(log_prob, target))
    }

    /// Gradients of the scalar `root` with respect to every node.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward from a non-scalar");
        let mut grads: Vec<Option<Matrix>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Matrix::new(1, 1, vec![1.0]));
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let out = &node.value;
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let da = g.matmul_t(self.value(*b));
                    let db = self.value(*a).t_matmul(&g);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::SpMM(s, b) => {
                    let w = g.cols();
                    let db = Matrix::new(s.cols(), w, s.transpose_mul_dense(g.data(), w));
                    accumulate(&mut grads, *b, db);
                }
                Op::Gather(a, rows) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (k, r) in rows.iter().enumerate() {
                        if let Some(r) = *r {
                            da.row_mut(r).iter_mut().zip(g.row(k)).for_each(|(x, y)| *x += y);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::Add(a, b) => {
                    accumulate(&mut grads, *b, g.clone());
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::AddRow(a, bias) => {
                    let db = Matrix::from_fn(1, g.cols(), |_, c| (0..g.rows()).map(|r| g.get(r, c)).sum());
                    accumulate(&mut grads, *bias, db);
                    accumulate(&mut grads, *a, g.clone());
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let da = zip_map(&g, bv, |x, y| x * y);
                    let db = zip_map(&g, av, |x, y| x * y);
                    accumulate(&mut grads, *a, da);
                    accumulate(&mut grads, *b, db);
                }
                Op::Relu(a) => {
                    let da = zip_map(&g, self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    accumulate(&mut grads, *a, da);
                }
                Op::Sigmoid(a) => {
                    let da = zip_map(&g, out, |x, s| x * s * (1.0 - s));
                    accumulate(&mut grads, *a, da);
                }
                Op::Tanh(a) => {
                    let da = zip_map(&g, out, |x, t| x * (1.0 - t * t));
                    accumulate(&mut grads, *a, da);
                }
                Op::Cols(a, start) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for r in 0..g.rows() {
                        da.row_mut(r)[*start..start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        let dp = Matrix::from_fn(g.rows(), w, |r, c| g.get(r, off + c));
                        accumulate(&mut grads, p, dp);
                        off += w;
                    }
                }
                Op::StackRows(rows) => {
                    for (k, &r) in rows.iter().enumerate() {
                        accumulate(&mut grads, r, Matrix::row_vector(g.row(k).to_vec()));
                    }
                }
                Op::Row(a, i) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    da.row_mut(*i).copy_from_slice(g.data());
                    accumulate(&mut grads, *a, da);
                }
                Op::MeanRows(a) => {
                    let av = self.value(*a);
                    let n = av.rows() as f64;
                    let da = Matrix::from_fn(av.rows(), av.cols(), |_, c| g.get(0, c) / n);
                    accumulate(&mut grads, *a, da);
                }
                Op::RowDots(a, pairs) => {
                    let av = self.value(*a);
                    let mut da = Matrix::zeros(av.rows(), av.cols());
                    for (k, &(i, j)) in pairs.iter().enumerate() {
                        let gk = g.get(k, 0);
                        for c in 0..av.cols() {
                            let (xi, xj) = (av.get(i, c), av.get(j, c));
                            da.set(i, c, da.get(i, c) + gk * xj);
                            da.set(j, c, da.get(j, c) + gk * xi);
                        }
                    }
                    accumulate(&mut grads, *a, da);
                }
                Op::LogSigmoidSum(a) => {
                    let gs = g.item();
                    let da = self.value(*a).map(|x| gs * sigmoid(-x));
                    accumulate(&mut grads, *a, da);
                }
                Op::Sum(a) => {
                    let gs = g.item();
                    let av = self.value(*a);
                    accumulate(&mut grads, *a, Matrix::new(av.rows(), av.cols(), vec![gs; av.len()]));
                }
                Op::BceLogit(a, y) => {
                    let x = self.value(*a).item();
                    accumulate(&mut grads, *a, Matrix::new(1, 1, vec![g.item() * (sigmoid(x) - y)]));
                }
                Op::BceLogProb(a, y) => {
                    let s = self.value(*a).item();
                    let z = s.exp();
                    // d/ds of -(y ln z + (1-y) ln(1-z)) with z = e^s; zero where clamped
                    let d = if !(BCE_EPS..=1.0 - BCE_EPS).contains(&z) {
                        0.0
                    } else {
                        -y + (1.0 - y) * z / (1.0 - z)
                    };
                    accumulate(&mut grads, *a, Matrix::new(1, 1, vec![g.item() * d]));
                }
            }
            grads[idx] = Some(g);
        }
        Gradients { grads }
    }
}

fn zip_map(a: &Matrix, b: &Matrix, f: impl Fn(f64, f64) -> f64) -> Matrix {
    debug_assert_eq!(a.shape(), b.shape());
    Matrix::new(a.rows(), a.cols(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect())
}

fn accumulate(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot => *slot = Some(g),
    }
}

pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// `None` when `v` does not influence the root.
    pub fn get(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Matrix> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}
