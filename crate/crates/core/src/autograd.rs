//! Reverse-mode automatic differentiation over dense row-major matrices.
//!
//! A [`Tape`] records every operation of a forward pass as a node holding its
//! value. [`Tape::backward`] replays the nodes in reverse and accumulates
//! gradients for every node that depends on a leaf created with
//! [`Tape::param`]. Constants and [`Tape::detach`]ed values never receive or
//! propagate gradient.
//!
//! Scalars are `1 x 1` matrices.

use ndarray::{s, Array2, Axis, Zip};

pub type Mat = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNT(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    MulConst(Var, Mat),
    AddConst(Var),
    Relu(Var),
    Gelu(Var),
    Softplus(Var),
    Sqrt(Var),
    Ln(Var),
    LayerNorm(Var, Mat),
    SoftmaxRows(Var),
    GatherRows(Var, Vec<usize>),
    SliceCols(Var, usize),
    ConcatCols(Vec<Var>),
    Sum(Var),
    LogSoftmaxPick(Var, Vec<bool>, usize),
}

struct Node {
    value: Mat,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Mat>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Mat> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Gradient of `v`, or zeros of `shape` when nothing flowed into it.
    pub fn get_or_zeros(&self, v: Var, shape: (usize, usize)) -> Mat {
        self.get(v).cloned().unwrap_or_else(|| Mat::zeros(shape))
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_C * (x + 0.044715 * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_C * (x + 0.044715 * x * x * x);
    let t = u.tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * 0.044715 * x * x)
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
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

    fn push(&mut self, value: Mat, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Mat) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar(&mut self, x: f64) -> Var {
        self.constant(Mat::from_elem((1, 1), x))
    }

    /// Same value as `v`, cut from the gradient graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.nodes[v.0].value.clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Mat {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Value of a `1 x 1` node.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.rg(v)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{what}: shape mismatch {:?} vs {:?}",
            self.shape(a),
            self.shape(b)
        );
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let v = self.value(a) + self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Add(a, b), rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let v = self.value(a) - self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Sub(a, b), rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let v = self.value(a) * self.value(b);
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::Mul(a, b), rg)
    }

    /// Adds a `1 x n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "add_row: row must be 1 x n");
        assert_eq!(self.shape(a).1, self.shape(row).1, "add_row: width");
        let v = self.value(a) + self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::AddRow(a, row), rg)
    }

    /// Multiplies every row of `a` elementwise by a `1 x n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1, "mul_row: row must be 1 x n");
        assert_eq!(self.shape(a).1, self.shape(row).1, "mul_row: width");
        let v = self.value(a) * self.value(row);
        let rg = self.rg(a) || self.rg(row);
        self.push(v, Op::MulRow(a, row), rg)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).0, "matmul: inner dims");
        let v = self.value(a).dot(self.value(b));
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMul(a, b), rg)
    }

    /// `a * b^T`
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a).1, self.shape(b).1, "matmul_nt: inner dims");
        let v = self.value(a).dot(&self.value(b).t());
        let rg = self.rg(a) || self.rg(b);
        self.push(v, Op::MatMulNT(a, b), rg)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) * c;
        let rg = self.rg(a);
        self.push(v, Op::Scale(a, c), rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddScalar(a), rg)
    }

    /// Elementwise product with a constant matrix of the same shape.
    pub fn mul_const(&mut self, a: Var, c: Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "mul_const: shape mismatch");
        let v = self.value(a) * &c;
        let rg = self.rg(a);
        self.push(v, Op::MulConst(a, c), rg)
    }

    /// Elementwise sum with a constant matrix of the same shape.
    pub fn add_const(&mut self, a: Var, c: &Mat) -> Var {
        assert_eq!(self.shape(a), c.dim(), "add_const: shape mismatch");
        let v = self.value(a) + c;
        let rg = self.rg(a);
        self.push(v, Op::AddConst(a), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x.max(0.0));
        let rg = self.rg(a);
        self.push(v, Op::Relu(a), rg)
    }

    /// Tanh approximation of GELU.
    pub fn gelu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(gelu);
        let rg = self.rg(a);
        self.push(v, Op::Gelu(a), rg)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(softplus);
        let rg = self.rg(a);
        self.push(v, Op::Softplus(a), rg)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::sqrt);
        let rg = self.rg(a);
        self.push(v, Op::Sqrt(a), rg)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(f64::ln);
        let rg = self.rg(a);
        self.push(v, Op::Ln(a), rg)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.mul(a, a)
    }

    /// Normalizes every row to zero mean and unit variance (no affine part).
    pub fn layer_norm(&mut self, a: Var, eps: f64) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        let mut out = Mat::zeros((rows, cols));
        let mut inv_std = Mat::zeros((rows, 1));
        for r in 0..rows {
            let row = x.row(r);
            let mean = row.sum() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[[r, 0]] = is;
            for c in 0..cols {
                out[[r, c]] = (row[c] - mean) * is;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::LayerNorm(a, inv_std), rg)
    }

    /// Row-wise softmax where columns with `key_mask[c] == false` get weight 0.
    ///
    /// `key_mask` must have at least one `true` entry.
    pub fn softmax_rows_masked(&mut self, a: Var, key_mask: &[bool]) -> Var {
        let x = self.value(a);
        let (rows, cols) = x.dim();
        assert_eq!(cols, key_mask.len(), "softmax: mask width");
        assert!(key_mask.iter().any(|&m| m), "softmax: fully masked row");
        let mut out = Mat::zeros((rows, cols));
        for r in 0..rows {
            let mut max = f64::NEG_INFINITY;
            for c in 0..cols {
                if key_mask[c] {
                    max = max.max(x[[r, c]]);
                }
            }
            let mut total = 0.0;
            for c in 0..cols {
                if key_mask[c] {
                    let e = (x[[r, c]] - max).exp();
                    out[[r, c]] = e;
                    total += e;
                }
            }
            for c in 0..cols {
                out[[r, c]] /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Row `i` of the output is row `ids[i]` of `table`.
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Var {
        let t = self.value(table);
        let cols = t.ncols();
        let mut out = Mat::zeros((ids.len(), cols));
        for (i, &id) in ids.iter().enumerate() {
            assert!(id < t.nrows(), "gather_rows: id {id} out of range");
            out.row_mut(i).assign(&t.row(id));
        }
        let rg = self.rg(table);
        self.push(out, Op::GatherRows(table, ids.to_vec()), rg)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        let rg = self.rg(a);
        self.push(v, Op::SliceCols(a, start), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        let rg = parts.iter().any(|&p| self.rg(p));
        self.push(v, Op::ConcatCols(parts.to_vec()), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Mat::from_elem((1, 1), self.value(a).sum());
        let rg = self.rg(a);
        self.push(v, Op::Sum(a), rg)
    }

    /// `log softmax(a)[index]` over the entries of a column vector where
    /// `valid` is true; invalid entries take no part in the normalizer.
    pub fn log_softmax_pick(&mut self, a: Var, valid: &[bool], index: usize) -> Var {
        let x = self.value(a);
        assert_eq!(x.ncols(), 1, "log_softmax_pick: expects a column vector");
        assert_eq!(x.nrows(), valid.len(), "log_softmax_pick: mask length");
        assert!(valid[index], "log_softmax_pick: index is masked");
        let lse = log_sum_exp(x.column(0).iter().zip(valid).filter(|(_, &m)| m).map(|(&v, _)| v));
        let v = Mat::from_elem((1, 1), x[[index, 0]] - lse);
        let rg = self.rg(a);
        self.push(v, Op::LogSoftmaxPick(a, valid.to_vec(), index), rg)
    }

    /// Gradients of the `1 x 1` node `out` with respect to every node.
    pub fn backward(&self, out: Var) -> Gradients {
        assert_eq!(self.shape(out), (1, 1), "backward: output must be a scalar");
        let mut grads: Vec<Option<Mat>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(Mat::ones((1, 1)));
        for i in (0..=out.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, grads: &mut [Option<Mat>], v: Var, g: Mat) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => *acc += &g,
            slot => *slot = Some(g),
        }
    }

    fn propagate(&self, i: usize, g: &Mat, grads: &mut [Option<Mat>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*b));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g * self.value(*a));
                }
            }
            Op::AddRow(a, row) => {
                self.accumulate(grads, *a, g.clone());
                if self.rg(*row) {
                    self.accumulate(grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g * self.value(*row));
                }
                if self.rg(*row) {
                    let gr = (g * self.value(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    self.accumulate(grads, *row, gr);
                }
            }
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(&self.value(*b).t()));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, self.value(*a).t().dot(g));
                }
            }
            Op::MatMulNT(a, b) => {
                if self.rg(*a) {
                    self.accumulate(grads, *a, g.dot(self.value(*b)));
                }
                if self.rg(*b) {
                    self.accumulate(grads, *b, g.t().dot(self.value(*a)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::AddScalar(a) | Op::AddConst(a) => self.accumulate(grads, *a, g.clone()),
            Op::MulConst(a, c) => self.accumulate(grads, *a, g * c),
            Op::Relu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| {
                    if x <= 0.0 {
                        *gv = 0.0
                    }
                });
                self.accumulate(grads, *a, ga);
            }
            Op::Gelu(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| *gv *= gelu_grad(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Softplus(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga)
                    .and(self.value(*a))
                    .for_each(|gv, &x| *gv *= sigmoid(x));
                self.accumulate(grads, *a, ga);
            }
            Op::Sqrt(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(&node.value).for_each(|gv, &y| *gv *= 0.5 / y);
                self.accumulate(grads, *a, ga);
            }
            Op::Ln(a) => {
                let mut ga = g.clone();
                Zip::from(&mut ga).and(self.value(*a)).for_each(|gv, &x| *gv /= x);
                self.accumulate(grads, *a, ga);
            }
            Op::LayerNorm(a, inv_std) => {
                let y = &node.value;
                let (rows, cols) = y.dim();
                let n = cols as f64;
                let mut ga = Mat::zeros((rows, cols));
                for r in 0..rows {
                    let gr = g.row(r);
                    let yr = y.row(r);
                    let mean_g = gr.sum() / n;
                    let mean_gy = gr.dot(&yr) / n;
                    for c in 0..cols {
                        ga[[r, c]] = inv_std[[r, 0]] * (gr[c] - mean_g - yr[c] * mean_gy);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::SoftmaxRows(a) => {
                let y = &node.value;
                let (rows, cols) = y.dim();
                let mut ga = Mat::zeros((rows, cols));
                for r in 0..rows {
                    let dot = g.row(r).dot(&y.row(r));
                    for c in 0..cols {
                        ga[[r, c]] = y[[r, c]] * (g[[r, c]] - dot);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
            Op::GatherRows(table, ids) => {
                let mut gt = Mat::zeros(self.shape(*table));
                for (i, &id) in ids.iter().enumerate() {
                    let mut row = gt.row_mut(id);
                    row += &g.row(i);
                }
                self.accumulate(grads, *table, gt);
            }
            Op::SliceCols(a, start) => {
                let mut ga = Mat::zeros(self.shape(*a));
                let len = g.ncols();
                ga.slice_mut(s![.., *start..*start + len]).assign(g);
                self.accumulate(grads, *a, ga);
            }
            Op::ConcatCols(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let w = self.shape(p).1;
                    if self.rg(p) {
                        self.accumulate(grads, p, g.slice(s![.., offset..offset + w]).to_owned());
                    }
                    offset += w;
                }
            }
            Op::Sum(a) => {
                let ga = Mat::from_elem(self.shape(*a), g[[0, 0]]);
                self.accumulate(grads, *a, ga);
            }
            Op::LogSoftmaxPick(a, valid, index) => {
                let x = self.value(*a);
                let lse = log_sum_exp(x.column(0).iter().zip(valid).filter(|(_, &m)| m).map(|(&v, _)| v));
                let mut ga = Mat::zeros(x.dim());
                for r in 0..x.nrows() {
                    if valid[r] {
                        let p = (x[[r, 0]] - lse).exp();
                        let onehot = if r == *index { 1.0 } else { 0.0 };
                        ga[[r, 0]] = g[[0, 0]] * (onehot - p);
                    }
                }
                self.accumulate(grads, *a, ga);
            }
        }
    }
}

/// Numerically stable `ln(sum(exp(x)))`; `-inf` for an empty iterator.
pub fn log_sum_exp<I: Iterator<Item = f64> + Clone>(xs: I) -> f64 {
    let max = xs.clone().fold(f64::NEG_INFINITY, f64::max);
    if max.is_infinite() {
        return max;
    }
    max + xs.map(|x| (x - max).exp()).sum::<f64>().ln()
}
