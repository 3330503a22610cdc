//! A small reverse-mode tape over dense `f64` matrices.
//!
//! Every value is 2-D (row vectors are `1×n`). Forward operations append nodes to
//! the tape; [`Tape::backward`] walks it once in reverse and returns the
//! gradient of a scalar with respect to every leaf.

use ndarray::{concatenate, s, Array2, Axis, Zip};

use crate::nn::{ParamId, ParamStore};

pub type Matrix = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Scale(Var, f64),
    Gelu(Var),
    Sigmoid(Var),
    Softplus(Var),
    SoftmaxRows(Var),
    LayerNormRows(Var, f64),
    L2NormalizeRows(Var),
    ConcatCols(Vec<Var>),
    ConcatRows(Vec<Var>),
    SliceCols(Var, usize),
    SliceRows(Var, usize),
    Reshape(Var),
    RowMean(Var),
    SumAll(Var),
    MeanAll(Var),
    Bce(Var, Matrix, f64),
    /// Multi-head attention over a packed `[Q | K | V]` input; keeps the
    /// per-head attention weights for the backward pass.
    Attention {
        qkv: Var,
        heads: usize,
        probs: Vec<Matrix>,
    },
}

#[derive(Debug)]
struct Node {
    value: Matrix,
    op: Op,
    param: Option<ParamId>,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

fn gelu_grad(x: f64) -> f64 {
    let t = (GELU_K * (x + GELU_C * x * x * x)).tanh();
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_K * (1.0 + 3.0 * GELU_C * x * x)
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Numerically stable softmax of each row.
pub fn softmax_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    softmax_rows_inplace(&mut out);
    out
}

fn softmax_rows_inplace(x: &mut Matrix) {
    for mut row in x.rows_mut() {
        let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|v| (v - m).exp());
        let z = row.sum();
        row.mapv_inplace(|v| v / z);
    }
}

fn head_cols(width: usize, heads: usize, part: usize, head: usize) -> std::ops::Range<usize> {
    let dh = width / heads;
    let start = part * width + head * dh;
    start..start + dh
}

fn layer_norm_rows(x: &Matrix, eps: f64) -> Matrix {
    let mut out = x.clone();
    let n = x.ncols() as f64;
    for mut row in out.rows_mut() {
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        row.mapv_inplace(|v| (v - mean) * inv);
    }
    out
}

/// Euclidean norm of each row.
pub fn row_norms(x: &Matrix) -> Vec<f64> {
    x.rows().into_iter().map(|r| r.dot(&r).sqrt()).collect()
}

fn l2_normalize_rows(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for (mut row, n) in out.rows_mut().into_iter().zip(row_norms(x)) {
        row.mapv_inplace(|v| v / n);
    }
    out
}

fn bce_terms(p: f64, m: f64, eps: f64) -> f64 {
    let q = p.clamp(eps, 1.0 - eps);
    -(m * q.ln() + (1.0 - m) * (1.0 - q).ln())
}

/// Mean binary cross-entropy with predictions clamped to `[eps, 1-eps]`.
pub fn bce_mean(pred: &Matrix, target: &Matrix, eps: f64) -> f64 {
    let total: f64 = pred.iter().zip(target).map(|(&p, &m)| bce_terms(p, m, eps)).sum();
    total / pred.len() as f64
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
        self.nodes.push(Node { value, op, param: None });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let m = self.value(v);
        assert_eq!(m.dim(), (1, 1), "scalar() on a non-scalar node");
        m[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.value(v).dim()
    }

    /// An input the gradient can be taken with respect to.
    pub fn leaf(&mut self, value: Matrix) -> Var {
        self.push(value, Op::Leaf)
    }

    /// A trainable parameter read from `store`.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let v = self.push(store.value(id).clone(), Op::Leaf);
        self.nodes[v.0].param = Some(id);
        v
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).dot(self.value(b));
        self.push(out, Op::MatMul(a, b))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().as_standard_layout().into_owned();
        self.push(out, Op::Transpose(a))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) + self.value(b);
        self.push(out, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) - self.value(b);
        self.push(out, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a) * self.value(b);
        self.push(out, Op::Mul(a, b))
    }

    /// Adds a `1×n` row to every row of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let out = self.value(a) + self.value(row);
        self.push(out, Op::AddRow(a, row))
    }

    /// Multiplies every row of `a` elementwise by a `1×n` row.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        assert_eq!(self.shape(row).0, 1);
        let out = self.value(a) * self.value(row);
        self.push(out, Op::MulRow(a, row))
    }

    /// Scales row `i` of `a` by entry `i` of an `m×1` column.
    pub fn mul_col(&mut self, a: Var, col: Var) -> Var {
        assert_eq!(self.shape(col).1, 1);
        let out = self.value(a) * self.value(col);
        self.push(out, Op::MulCol(a, col))
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Var {
        let out = self.value(a) * k;
        self.push(out, Op::Scale(a, k))
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(gelu);
        self.push(out, Op::Gelu(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sigmoid);
        self.push(out, Op::Sigmoid(a))
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(softplus);
        self.push(out, Op::Softplus(a))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Var {
        let out = softmax_rows(self.value(a));
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Zero-mean, unit-variance rows (no affine part).
    pub fn layer_norm_rows(&mut self, a: Var, eps: f64) -> Var {
        let out = layer_norm_rows(self.value(a), eps);
        self.push(out, Op::LayerNormRows(a, eps))
    }

    /// Divides each row by its Euclidean norm. Callers must rule out zero rows.
    pub fn l2_normalize_rows(&mut self, a: Var) -> Var {
        let out = l2_normalize_rows(self.value(a));
        self.push(out, Op::L2NormalizeRows(a))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(1), &views).expect("concat_cols: row counts differ");
        self.push(out, Op::ConcatCols(parts.to_vec()))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let out = concatenate(Axis(0), &views).expect("concat_rows: column counts differ");
        self.push(out, Op::ConcatRows(parts.to_vec()))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(out, Op::SliceCols(a, start))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Var {
        let out = self.value(a).slice(s![start..start + len, ..]).to_owned();
        self.push(out, Op::SliceRows(a, start))
    }

    /// Row-major reshape.
    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Var {
        let src = self.value(a);
        assert_eq!(src.len(), rows * cols, "reshape changes element count");
        let data: Vec<f64> = src.iter().copied().collect();
        let out = Matrix::from_shape_vec((rows, cols), data).expect("reshape");
        self.push(out, Op::Reshape(a))
    }

    /// Mean of each row, as an `m×1` column.
    pub fn row_mean(&mut self, a: Var) -> Var {
        let out = self
            .value(a)
            .mean_axis(Axis(1))
            .expect("row_mean of empty")
            .insert_axis(Axis(1));
        self.push(out, Op::RowMean(a))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let out = Matrix::from_elem((1, 1), self.value(a).sum());
        self.push(out, Op::SumAll(a))
    }

    pub fn mean_all(&mut self, a: Var) -> Var {
        let m = self.value(a);
        let out = Matrix::from_elem((1, 1), m.sum() / m.len() as f64);
        self.push(out, Op::MeanAll(a))
    }

    /// Mean clamped binary cross-entropy against a constant target.
    pub fn bce(&mut self, pred: Var, target: &Matrix, eps: f64) -> Var {
        assert_eq!(self.shape(pred), target.dim(), "bce shape mismatch");
        let out = Matrix::from_elem((1, 1), bce_mean(self.value(pred), target, eps));
        self.push(out, Op::Bce(pred, target.clone(), eps))
    }

    /// Scaled dot-product self-attention. `qkv` is `N×3W`, laid out as
    /// `[Q | K | V]` with each block split into `heads` equal column groups;
    /// the output is `N×W` with heads concatenated in order.
    pub fn attention(&mut self, qkv: Var, heads: usize) -> Var {
        let x = self.value(qkv);
        let (n, w3) = x.dim();
        assert!(
            heads > 0 && w3 % (3 * heads) == 0,
            "attention input width {w3} does not split into {heads} heads"
        );
        let w = w3 / 3;
        let scale = 1.0 / ((w / heads) as f64).sqrt();
        let mut out = Matrix::zeros((n, w));
        let mut probs = Vec::with_capacity(heads);
        for h in 0..heads {
            let q = x.slice(s![.., head_cols(w, heads, 0, h)]);
            let k = x.slice(s![.., head_cols(w, heads, 1, h)]);
            let v = x.slice(s![.., head_cols(w, heads, 2, h)]);
            let mut p = q.dot(&k.t());
            p *= scale;
            softmax_rows_inplace(&mut p);
            out.slice_mut(s![.., head_cols(w, heads, 0, h)]).assign(&p.dot(&v));
            probs.push(p);
        }
        self.push(out, Op::Attention { qkv, heads, probs })
    }

    /// Gradient of the scalar `root` with respect to every node that feeds it.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Matrix>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[root.0] = Some(Matrix::ones((1, 1)));

        fn acc(grads: &mut [Option<Matrix>], v: Var, g: Matrix) {
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        }

        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            let val = |v: Var| &self.nodes[v.0].value;
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::MatMul(a, b) => {
                    acc(&mut grads, *a, g.dot(&val(*b).t()));
                    acc(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Transpose(a) => acc(&mut grads, *a, g.t().as_standard_layout().into_owned()),
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Sub(a, b) => {
                    acc(&mut grads, *b, -&g);
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * val(*b));
                    acc(&mut grads, *b, &g * val(*a));
                }
                Op::AddRow(a, row) => {
                    acc(&mut grads, *row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::MulRow(a, row) => {
                    let grow = (&g * val(*a)).sum_axis(Axis(0)).insert_axis(Axis(0));
                    acc(&mut grads, *row, grow);
                    acc(&mut grads, *a, &g * val(*row));
                }
                Op::MulCol(a, col) => {
                    let gcol = (&g * val(*a)).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(&mut grads, *col, gcol);
                    acc(&mut grads, *a, &g * val(*col));
                }
                Op::Scale(a, k) => acc(&mut grads, *a, g * *k),
                Op::Gelu(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| *d *= gelu_grad(x));
                    acc(&mut grads, *a, ga);
                }
                Op::Sigmoid(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga)
                        .and(&node.value)
                        .for_each(|d, &y| *d *= y * (1.0 - y));
                    acc(&mut grads, *a, ga);
                }
                Op::Softplus(a) => {
                    let mut ga = g;
                    Zip::from(&mut ga).and(val(*a)).for_each(|d, &x| *d *= sigmoid(x));
                    acc(&mut grads, *a, ga);
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let mut ga = g;
                    for (mut grow, yrow) in ga.rows_mut().into_iter().zip(y.rows()) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow).and(&yrow).for_each(|d, &yv| *d = yv * (*d - dot));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::LayerNormRows(a, eps) => {
                    let x = val(*a);
                    let y = &node.value;
                    let n = x.ncols() as f64;
                    let mut ga = g;
                    for ((mut grow, xrow), yrow) in ga.rows_mut().into_iter().zip(x.rows()).zip(y.rows()) {
                        let mean = xrow.sum() / n;
                        let var = xrow.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
                        let inv = 1.0 / (var + eps).sqrt();
                        let gmean = grow.sum() / n;
                        let gy = grow.dot(&yrow) / n;
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|d, &yv| *d = inv * (*d - gmean - yv * gy));
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::L2NormalizeRows(a) => {
                    let norms = row_norms(val(*a));
                    let y = &node.value;
                    let mut ga = g;
                    for ((mut grow, yrow), n) in ga.rows_mut().into_iter().zip(y.rows()).zip(norms) {
                        let dot = grow.dot(&yrow);
                        Zip::from(&mut grow)
                            .and(&yrow)
                            .for_each(|d, &yv| *d = (*d - yv * dot) / n);
                    }
                    acc(&mut grads, *a, ga);
                }
                Op::ConcatCols(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let w = val(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., start..start + w]).to_owned());
                        start += w;
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for p in parts {
                        let h = val(*p).nrows();
                        acc(&mut grads, *p, g.slice(s![start..start + h, ..]).to_owned());
                        start += h;
                    }
                }
                Op::SliceCols(a, start) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    let w = g.ncols();
                    ga.slice_mut(s![.., *start..*start + w]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::SliceRows(a, start) => {
                    let mut ga = Matrix::zeros(val(*a).dim());
                    let h = g.nrows();
                    ga.slice_mut(s![*start..*start + h, ..]).assign(&g);
                    acc(&mut grads, *a, ga);
                }
                Op::Reshape(a) => {
                    let data: Vec<f64> = g.iter().copied().collect();
                    acc(
                        &mut grads,
                        *a,
                        Matrix::from_shape_vec(val(*a).dim(), data).expect("reshape grad"),
                    );
                }
                Op::RowMean(a) => {
                    let (rows, cols) = val(*a).dim();
                    let ga = Matrix::from_shape_fn((rows, cols), |(r, _)| g[[r, 0]] / cols as f64);
                    acc(&mut grads, *a, ga);
                }
                Op::SumAll(a) => acc(&mut grads, *a, Matrix::from_elem(val(*a).dim(), g[[0, 0]])),
                Op::MeanAll(a) => {
                    let m = val(*a);
                    acc(&mut grads, *a, Matrix::from_elem(m.dim(), g[[0, 0]] / m.len() as f64));
                }
                Op::Bce(p, target, eps) => {
                    let pred = val(*p);
                    let n = pred.len() as f64;
                    let scale = g[[0, 0]] / n;
                    let mut gp = Matrix::zeros(pred.dim());
                    Zip::from(&mut gp).and(pred).and(target).for_each(|d, &x, &m| {
                        // clamping is flat outside the open interval
                        if x > *eps && x < 1.0 - eps {
                            *d = scale * (-(m / x) + (1.0 - m) / (1.0 - x));
                        }
                    });
                    acc(&mut grads, *p, gp);
                }
                Op::Attention { qkv, heads, probs } => {
                    let x = val(*qkv);
                    let w = x.ncols() / 3;
                    let scale = 1.0 / ((w / heads) as f64).sqrt();
                    let mut gx = Matrix::zeros(x.dim());
                    for (h, p) in probs.iter().enumerate() {
                        let q = x.slice(s![.., head_cols(w, *heads, 0, h)]);
                        let k = x.slice(s![.., head_cols(w, *heads, 1, h)]);
                        let v = x.slice(s![.., head_cols(w, *heads, 2, h)]);
                        let go = g.slice(s![.., head_cols(w, *heads, 0, h)]);
                        gx.slice_mut(s![.., head_cols(w, *heads, 2, h)]).assign(&p.t().dot(&go));
                        // softmax backward, in place on dL/dP
                        let mut ds = go.dot(&v.t());
                        for (mut drow, prow) in ds.rows_mut().into_iter().zip(p.rows()) {
                            let dot = drow.dot(&prow);
                            Zip::from(&mut drow)
                                .and(&prow)
                                .for_each(|d, &pv| *d = pv * (*d - dot) * scale);
                        }
                        gx.slice_mut(s![.., head_cols(w, *heads, 0, h)]).assign(&ds.dot(&k));
                        gx.slice_mut(s![.., head_cols(w, *heads, 1, h)]).assign(&ds.t().dot(&q));
                    }
                    acc(&mut grads, *qkv, gx);
                }
            }
        }
        Gradients {
            grads,
            params: self.nodes.iter().map(|n| n.param).collect(),
        }
    }
}

/// Leaf gradients produced by [`Tape::backward`].
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
    params: Vec<Option<ParamId>>,
}

impl Gradients {
    /// Gradient for a leaf, or `None` if the root does not depend on it.
    pub fn wrt(&self, v: Var) -> Option<&Matrix> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    /// Per-parameter gradients, summed over every time a parameter entered the tape.
    pub fn param_grads(&self, store: &ParamStore) -> Vec<Matrix> {
        let mut out: Vec<Matrix> = store.iter().map(|p| Matrix::zeros(p.value.dim())).collect();
        for (g, p) in self.grads.iter().zip(&self.params) {
            if let (Some(g), Some(id)) = (g, p) {
                out[id.index()] += g;
            }
        }
        out
    }
}
