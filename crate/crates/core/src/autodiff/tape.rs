//! Wengert tape over dense row-major `f64` matrices.
//!
//! Every operation appends a node holding its primal value, so a node's
//! inputs always precede it. [`Tape::backward`] walks the list once in
//! reverse and accumulates adjoints. Scalars are 1×1 matrices.

use std::rc::Rc;

use ndarray::{s, Array2, Axis, Zip};
use rand::Rng;

use crate::error::{Error, Result};

pub type Tensor = Array2<f64>;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRowVector(Var, Var),
    ScaleRows(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Sum(Var),
    RowSum(Var),
    SliceCols(Var, usize, usize),
    ConcatCols(Vec<Var>),
    GatherRows(Var, Rc<Vec<usize>>),
    ScatterAddRows(Var, Rc<Vec<usize>>),
    RowNormalize {
        input: Var,
        norms: Vec<f64>,
    },
    RowNorm(Var),
    Clamp(Var, f64, f64),
    Acos(Var),
    Sin(Var),
    Cos(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    ThetaOverSin(Var),
    Sinc(Var),
    SegmentSoftmax(Var, Rc<Vec<usize>>),
    Dropout(Var, Tensor),
    CrossEntropy {
        logits: Var,
        targets: Vec<(usize, usize)>,
        probs: Tensor,
    },
    BceWithLogits {
        logits: Var,
        labels: Vec<f64>,
    },
    Opaque {
        name: String,
        inputs: Vec<Var>,
    },
}

#[derive(Clone, Debug)]
struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Rows whose norm falls below this are treated as degenerate by
/// [`Tape::row_normalize`].
pub const DEGENERATE_NORM: f64 = 1e-12;

/// Threshold below which `θ/sin θ` and `sin s / s` switch to their series.
const SERIES_THRESHOLD: f64 = 1e-4;

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    clamp_boundary_hits: usize,
    degenerate_rows: usize,
}

/// Adjoints produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<(usize, usize)>,
}

impl Gradients {
    /// Adjoint of `var`; zeros when no path reaches the loss.
    pub fn wrt(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0]),
        }
    }
}

pub(crate) fn theta_over_sin(theta: f64) -> f64 {
    if theta.abs() < SERIES_THRESHOLD {
        1.0 + theta * theta / 6.0
    } else {
        theta / theta.sin()
    }
}

fn theta_over_sin_deriv(theta: f64) -> f64 {
    if theta.abs() < SERIES_THRESHOLD {
        theta / 3.0
    } else {
        let s = theta.sin();
        (s - theta * theta.cos()) / (s * s)
    }
}

pub(crate) fn sinc(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        1.0 - x * x / 6.0
    } else {
        x.sin() / x
    }
}

fn sinc_deriv(x: f64) -> f64 {
    if x.abs() < SERIES_THRESHOLD {
        -x / 3.0
    } else {
        (x * x.cos() - x.sin()) / (x * x)
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

fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

/// Row-major data of `t`, copying only when the layout is not standard.
fn row_major(t: &Tensor) -> std::borrow::Cow<'_, [f64]> {
    match t.as_slice() {
        Some(s) => std::borrow::Cow::Borrowed(s),
        None => std::borrow::Cow::Owned(t.iter().copied().collect()),
    }
}

fn from_rows(rows: usize, cols: usize, data: Vec<f64>) -> Tensor {
    Tensor::from_shape_vec((rows, cols), data).expect("row-major buffer sized to shape")
}

/// `out[i, :] = a[i, :] * s[i]`.
fn scale_rows_raw(a: &Tensor, s: &Tensor) -> Tensor {
    let (n, d) = a.dim();
    let (a, s) = (row_major(a), row_major(s));
    let mut out = Vec::with_capacity(n * d);
    for i in 0..n {
        out.extend(a[i * d..(i + 1) * d].iter().map(|x| x * s[i]));
    }
    from_rows(n, d, out)
}

/// Elementwise `f(a, b)` for equal shapes.
fn zip_map(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
    let (n, d) = a.dim();
    let (a, b) = (row_major(a), row_major(b));
    from_rows(n, d, a.iter().zip(b.iter()).map(|(&x, &y)| f(x, y)).collect())
}

/// n×1 column of `Σ_j a[i, j] b[i, j]`.
fn row_dots(a: &Tensor, b: &Tensor) -> Tensor {
    let (n, d) = a.dim();
    let (a, b) = (row_major(a), row_major(b));
    let out = (0..n)
        .map(|i| {
            a[i * d..(i + 1) * d]
                .iter()
                .zip(&b[i * d..(i + 1) * d])
                .map(|(x, y)| x * y)
                .sum()
        })
        .collect();
    from_rows(n, 1, out)
}

fn check_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::Contract(format!(
            "{what}: shape mismatch {:?} vs {:?}",
            a.dim(),
            b.dim()
        )));
    }
    Ok(())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Value of a 1×1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        self.nodes[v.0].value.dim()
    }

    /// Number of clamp entries that sat at or beyond an interval boundary.
    pub fn clamp_boundary_hits(&self) -> usize {
        self.clamp_boundary_hits
    }

    /// Number of rows replaced by `e₁` in [`Tape::row_normalize`].
    pub fn degenerate_rows(&self) -> usize {
        self.degenerate_rows
    }

    fn push(&mut self, op: Op, value: Tensor) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            Op::Opaque { inputs, .. } | Op::ConcatCols(inputs) => inputs.iter().any(|v| self.nodes[v.0].requires_grad),
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRowVector(a, b)
            | Op::ScaleRows(a, b) => self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad,
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::Offset(a)
            | Op::Sum(a)
            | Op::RowSum(a)
            | Op::SliceCols(a, _, _)
            | Op::GatherRows(a, _)
            | Op::ScatterAddRows(a, _)
            | Op::RowNormalize { input: a, .. }
            | Op::RowNorm(a)
            | Op::Clamp(a, _, _)
            | Op::Acos(a)
            | Op::Sin(a)
            | Op::Cos(a)
            | Op::Exp(a)
            | Op::Log(a)
            | Op::Relu(a)
            | Op::ThetaOverSin(a)
            | Op::Sinc(a)
            | Op::SegmentSoftmax(a, _)
            | Op::Dropout(a, _)
            | Op::CrossEntropy { logits: a, .. }
            | Op::BceWithLogits { logits: a, .. } => self.nodes[a.0].requires_grad,
        };
        self.nodes.push(Node {
            op,
            value,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-differentiated input.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value)
    }

    /// Differentiated leaf.
    pub fn variable(&mut self, value: Tensor) -> Var {
        let v = self.push(Op::Leaf, value);
        self.nodes[v.0].requires_grad = true;
        v
    }

    pub fn scalar_constant(&mut self, x: f64) -> Var {
        self.constant(Tensor::from_elem((1, 1), x))
    }

    /// Records a value computed outside the engine. Backward fails with
    /// [`Error::UnsupportedOp`] if a gradient has to flow through it.
    pub fn opaque(&mut self, name: &str, inputs: &[Var], value: Tensor) -> Var {
        self.push(
            Op::Opaque {
                name: name.to_string(),
                inputs: inputs.to_vec(),
            },
            value,
        )
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.ncols() != bv.nrows() {
            return Err(Error::Contract(format!("matmul: {:?} x {:?}", av.dim(), bv.dim())));
        }
        let out = av.dot(bv);
        Ok(self.push(Op::MatMul(a, b), out))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let out = self.value(a).t().to_owned();
        self.push(Op::Transpose(a), out)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "add")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a, b), out))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "sub")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a, b), out))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "mul")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a, b), out))
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        check_same_shape(self.value(a), self.value(b), "div")?;
        let out = zip_map(self.value(a), self.value(b), |x, y| x / y);
        Ok(self.push(Op::Div(a, b), out))
    }

    /// `a` (n×d) plus the 1×d row `b` on every row.
    pub fn add_row_vector(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if bv.nrows() != 1 || bv.ncols() != av.ncols() {
            return Err(Error::Contract(format!(
                "add_row_vector: {:?} + {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let out = av + bv;
        Ok(self.push(Op::AddRowVector(a, b), out))
    }

    /// Row `i` of `a` (n×d) multiplied by `s[i]` (s is n×1).
    pub fn scale_rows(&mut self, a: Var, s: Var) -> Result<Var> {
        let (av, sv) = (self.value(a), self.value(s));
        if sv.ncols() != 1 || sv.nrows() != av.nrows() {
            return Err(Error::Contract(format!("scale_rows: {:?} by {:?}", av.dim(), sv.dim())));
        }
        let out = scale_rows_raw(av, sv);
        Ok(self.push(Op::ScaleRows(a, s), out))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) * c;
        self.push(Op::Scale(a, c), out)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a) + c;
        self.push(Op::Offset(a), out)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let out = Tensor::from_elem((1, 1), self.value(a).sum());
        self.push(Op::Sum(a), out)
    }

    pub fn row_sum(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (n, d) = av.dim();
        let data = row_major(av);
        let out = from_rows(n, 1, (0..n).map(|i| data[i * d..(i + 1) * d].iter().sum()).collect());
        self.push(Op::RowSum(a), out)
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, end: usize) -> Result<Var> {
        let av = self.value(a);
        if start > end || end > av.ncols() {
            return Err(Error::Contract(format!(
                "slice_cols: {start}..{end} of {} columns",
                av.ncols()
            )));
        }
        let out = av.slice(s![.., start..end]).to_owned();
        Ok(self.push(Op::SliceCols(a, start, end), out))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Contract("concat_cols: no inputs".into()));
        }
        let rows = self.value(parts[0]).nrows();
        let cols: usize = parts.iter().map(|p| self.value(*p).ncols()).sum();
        let mut out = Tensor::zeros((rows, cols));
        let mut at = 0;
        for p in parts {
            let pv = self.value(*p);
            if pv.nrows() != rows {
                return Err(Error::Contract("concat_cols: row count mismatch".into()));
            }
            out.slice_mut(s![.., at..at + pv.ncols()]).assign(pv);
            at += pv.ncols();
        }
        Ok(self.push(Op::ConcatCols(parts.to_vec()), out))
    }

    /// Output row `e` is row `index[e]` of `a`.
    pub fn gather_rows(&mut self, a: Var, index: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if let Some(&bad) = index.iter().find(|&&i| i >= av.nrows()) {
            return Err(Error::Contract(format!(
                "gather_rows: index {bad} out of {} rows",
                av.nrows()
            )));
        }
        let d = av.ncols();
        let data = row_major(av);
        let mut out = Vec::with_capacity(index.len() * d);
        for &i in index.iter() {
            out.extend_from_slice(&data[i * d..(i + 1) * d]);
        }
        let out = from_rows(index.len(), d, out);
        Ok(self.push(Op::GatherRows(a, index), out))
    }

    /// Row `e` of `a` is added into output row `index[e]`; output has `n` rows.
    pub fn scatter_add_rows(&mut self, a: Var, index: Rc<Vec<usize>>, n: usize) -> Result<Var> {
        let av = self.value(a);
        if index.len() != av.nrows() {
            return Err(Error::Contract(format!(
                "scatter_add_rows: {} indices for {} rows",
                index.len(),
                av.nrows()
            )));
        }
        if let Some(&bad) = index.iter().find(|&&i| i >= n) {
            return Err(Error::Contract(format!("scatter_add_rows: target {bad} out of {n}")));
        }
        let d = av.ncols();
        let data = row_major(av);
        let mut out = vec![0.0; n * d];
        for (e, &i) in index.iter().enumerate() {
            for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(&data[e * d..(e + 1) * d]) {
                *o += x;
            }
        }
        let out = from_rows(n, d, out);
        Ok(self.push(Op::ScatterAddRows(a, index), out))
    }

    /// Each row divided by its L2 norm. Rows with norm below
    /// [`DEGENERATE_NORM`] become `e₁` and receive no gradient.
    pub fn row_normalize(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (rows, d) = av.dim();
        let mut data = row_major(av).into_owned();
        let mut norms = Vec::with_capacity(rows);
        let mut degenerate = 0;
        for row in data.chunks_exact_mut(d.max(1)).take(rows) {
            let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if n < DEGENERATE_NORM || !n.is_finite() {
                row.fill(0.0);
                row[0] = 1.0;
                norms.push(0.0);
                degenerate += 1;
            } else {
                row.iter_mut().for_each(|x| *x /= n);
                norms.push(n);
            }
        }
        let out = from_rows(rows, d, data);
        self.degenerate_rows += degenerate;
        self.push(Op::RowNormalize { input: a, norms }, out)
    }

    /// n×1 column of row L2 norms. The gradient at a zero row is zero.
    pub fn row_norm(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let out = row_dots(av, av).mapv_into(f64::sqrt);
        self.push(Op::RowNorm(a), out)
    }

    /// Gradient passes only strictly inside `(lo, hi)`.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let av = self.value(a);
        let hits = av.iter().filter(|&&x| x <= lo || x >= hi).count();
        let out = av.mapv(|x| x.clamp(lo, hi));
        self.clamp_boundary_hits += hits;
        self.push(Op::Clamp(a, lo, hi), out)
    }

    pub fn acos(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::acos);
        self.push(Op::Acos(a), out)
    }

    pub fn sin(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::sin);
        self.push(Op::Sin(a), out)
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::cos);
        self.push(Op::Cos(a), out)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::exp);
        self.push(Op::Exp(a), out)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(f64::ln);
        self.push(Op::Log(a), out)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(|x| x.max(0.0));
        self.push(Op::Relu(a), out)
    }

    /// Elementwise `θ / sin θ` with a series near zero.
    pub fn theta_over_sin(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(theta_over_sin);
        self.push(Op::ThetaOverSin(a), out)
    }

    /// Elementwise `sin x / x` with a series near zero.
    pub fn sinc(&mut self, a: Var) -> Var {
        let out = self.value(a).mapv(sinc);
        self.push(Op::Sinc(a), out)
    }

    /// Softmax of an E×1 column within each segment
    /// `offsets[s]..offsets[s + 1]`. Empty segments are allowed.
    pub fn segment_softmax(&mut self, a: Var, offsets: Rc<Vec<usize>>) -> Result<Var> {
        let av = self.value(a);
        if av.ncols() != 1 || offsets.last().copied() != Some(av.nrows()) {
            return Err(Error::Contract(format!(
                "segment_softmax: input {:?} does not match offsets ending at {:?}",
                av.dim(),
                offsets.last()
            )));
        }
        if offsets.windows(2).any(|w| w[0] > w[1]) {
            return Err(Error::Contract("segment_softmax: offsets decrease".into()));
        }
        let mut out = Tensor::zeros(av.dim());
        for w in offsets.windows(2) {
            let (lo, hi) = (w[0], w[1]);
            if lo == hi {
                continue;
            }
            let max = (lo..hi).map(|e| av[[e, 0]]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for e in lo..hi {
                let x = (av[[e, 0]] - max).exp();
                out[[e, 0]] = x;
                total += x;
            }
            for e in lo..hi {
                out[[e, 0]] /= total;
            }
        }
        Ok(self.push(Op::SegmentSoftmax(a, offsets), out))
    }

    /// Inverted dropout: keep with probability `1 - p`, scale kept entries by
    /// `1 / (1 - p)`. Identity when not training or `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, a: Var, p: f64, training: bool, rng: &mut R) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Contract(format!("dropout rate {p} outside [0, 1)")));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let keep = 1.0 / (1.0 - p);
        let shape = self.value(a).dim();
        let mask = Tensor::from_shape_fn(shape, |_| if rng.random::<f64>() < p { 0.0 } else { keep });
        self.apply_mask(a, mask)
    }

    /// Multiplies by a fixed mask; the gradient is masked the same way.
    pub fn apply_mask(&mut self, a: Var, mask: Tensor) -> Result<Var> {
        check_same_shape(self.value(a), &mask, "apply_mask")?;
        let out = self.value(a) * &mask;
        Ok(self.push(Op::Dropout(a, mask), out))
    }

    /// Mean over `targets` of `-log softmax(logits[row])[class]`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[(usize, usize)]) -> Result<Var> {
        let lv = self.value(logits);
        if targets.is_empty() {
            return Err(Error::Contract("cross_entropy: no targets".into()));
        }
        if let Some(&(r, c)) = targets.iter().find(|&&(r, c)| r >= lv.nrows() || c >= lv.ncols()) {
            return Err(Error::Contract(format!(
                "cross_entropy: target ({r}, {c}) outside logits {:?}",
                lv.dim()
            )));
        }
        let mut probs = Tensor::zeros((targets.len(), lv.ncols()));
        let mut loss = 0.0;
        for (t, &(r, c)) in targets.iter().enumerate() {
            let row = lv.row(r);
            let max = row.fold(f64::NEG_INFINITY, |m, &x| m.max(x));
            let total: f64 = row.iter().map(|&x| (x - max).exp()).sum();
            let log_z = max + total.ln();
            for (j, &x) in row.iter().enumerate() {
                probs[[t, j]] = (x - log_z).exp();
            }
            loss += log_z - row[c];
        }
        let out = Tensor::from_elem((1, 1), loss / targets.len() as f64);
        Ok(self.push(
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            out,
        ))
    }

    /// Mean binary cross-entropy of an m×1 logit column against 0/1 labels.
    pub fn bce_with_logits(&mut self, logits: Var, labels: &[f64]) -> Result<Var> {
        let lv = self.value(logits);
        if lv.ncols() != 1 || lv.nrows() != labels.len() || labels.is_empty() {
            return Err(Error::Contract(format!(
                "bce_with_logits: logits {:?} with {} labels",
                lv.dim(),
                labels.len()
            )));
        }
        let total: f64 = lv
            .column(0)
            .iter()
            .zip(labels)
            .map(|(&s, &y)| softplus(s) - y * s)
            .sum();
        let out = Tensor::from_elem((1, 1), total / labels.len() as f64);
        Ok(self.push(
            Op::BceWithLogits {
                logits,
                labels: labels.to_vec(),
            },
            out,
        ))
    }

    /// Reverse sweep from a 1×1 `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.shape(loss) != (1, 1) {
            return Err(Error::Contract(format!(
                "backward: loss must be 1x1, got {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[loss.0] = Some(Tensor::ones((1, 1)));

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                grads[idx] = Some(g);
                continue;
            }
            self.propagate(&node.op, &node.value, &g, &mut grads)?;
            grads[idx] = Some(g);
        }

        let shapes = self.nodes.iter().map(|n| n.value.dim()).collect();
        Ok(Gradients { grads, shapes })
    }

    /// Gradients of `loss` with respect to each of `wrt`, in order.
    pub fn grad(&self, loss: Var, wrt: &[Var]) -> Result<Vec<Tensor>> {
        let grads = self.backward(loss)?;
        Ok(wrt.iter().map(|&v| grads.wrt(v)).collect())
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, delta: Tensor) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(g) => match (g.as_slice_mut(), delta.as_slice()) {
                (Some(gs), Some(ds)) => gs.iter_mut().zip(ds).for_each(|(x, y)| *x += y),
                _ => *g += &delta,
            },
            slot => *slot = Some(delta),
        }
    }

    fn propagate(&self, op: &Op, out: &Tensor, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let val = |v: &Var| &self.nodes[v.0].value;
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, g.dot(&val(b).t()));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, val(a).t().dot(g));
                }
            }
            Op::Transpose(a) => self.accumulate(grads, *a, g.t().to_owned()),
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, -g);
            }
            Op::Mul(a, b) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, zip_map(g, val(b), |x, y| x * y));
                }
                if self.nodes[b.0].requires_grad {
                    self.accumulate(grads, *b, zip_map(g, val(a), |x, y| x * y));
                }
            }
            Op::Div(a, b) => {
                let bv = val(b);
                self.accumulate(grads, *a, g / bv);
                self.accumulate(grads, *b, -(g * out) / bv);
            }
            Op::AddRowVector(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::ScaleRows(a, s) => {
                if self.nodes[a.0].requires_grad {
                    self.accumulate(grads, *a, scale_rows_raw(g, val(s)));
                }
                if self.nodes[s.0].requires_grad {
                    self.accumulate(grads, *s, row_dots(g, val(a)));
                }
            }
            Op::Scale(a, c) => self.accumulate(grads, *a, g * *c),
            Op::Offset(a) => self.accumulate(grads, *a, g.clone()),
            Op::Sum(a) => self.accumulate(grads, *a, Tensor::from_elem(val(a).dim(), g[[0, 0]])),
            Op::RowSum(a) => {
                let (n, d) = val(a).dim();
                let gs = row_major(g);
                let mut out = Vec::with_capacity(n * d);
                for &gi in gs.iter() {
                    out.extend(std::iter::repeat_n(gi, d));
                }
                self.accumulate(grads, *a, from_rows(n, d, out));
            }
            Op::SliceCols(a, start, end) => {
                let mut d = Tensor::zeros(val(a).dim());
                d.slice_mut(s![.., *start..*end]).assign(g);
                self.accumulate(grads, *a, d);
            }
            Op::ConcatCols(parts) => {
                let mut at = 0;
                for p in parts {
                    let w = val(p).ncols();
                    self.accumulate(grads, *p, g.slice(s![.., at..at + w]).to_owned());
                    at += w;
                }
            }
            Op::GatherRows(a, index) => {
                let (n, d) = val(a).dim();
                let gs = row_major(g);
                let mut out = vec![0.0; n * d];
                for (e, &i) in index.iter().enumerate() {
                    for (o, x) in out[i * d..(i + 1) * d].iter_mut().zip(&gs[e * d..(e + 1) * d]) {
                        *o += x;
                    }
                }
                self.accumulate(grads, *a, from_rows(n, d, out));
            }
            Op::ScatterAddRows(a, index) => {
                let d = g.ncols();
                let gs = row_major(g);
                let mut out = Vec::with_capacity(index.len() * d);
                for &i in index.iter() {
                    out.extend_from_slice(&gs[i * d..(i + 1) * d]);
                }
                self.accumulate(grads, *a, from_rows(index.len(), d, out));
            }
            Op::RowNormalize { input, norms } => {
                let (rows, d) = out.dim();
                let (ys, gs) = (row_major(out), row_major(g));
                let mut dx = vec![0.0; rows * d];
                for (i, &n) in norms.iter().enumerate() {
                    if n == 0.0 {
                        continue;
                    }
                    let (y, gr) = (&ys[i * d..(i + 1) * d], &gs[i * d..(i + 1) * d]);
                    let proj: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for ((o, yv), gv) in dx[i * d..(i + 1) * d].iter_mut().zip(y).zip(gr) {
                        *o = (gv - yv * proj) / n;
                    }
                }
                self.accumulate(grads, *input, from_rows(rows, d, dx));
            }
            Op::RowNorm(a) => {
                let factors = Tensor::from_shape_fn(out.dim(), |(i, _)| {
                    let n = out[[i, 0]];
                    if n > 0.0 {
                        g[[i, 0]] / n
                    } else {
                        0.0
                    }
                });
                self.accumulate(grads, *a, scale_rows_raw(val(a), &factors));
            }
            Op::Clamp(a, lo, hi) => {
                let mut d = g.clone();
                Zip::from(&mut d).and(val(a)).for_each(|d, &x| {
                    if x <= *lo || x >= *hi {
                        *d = 0.0;
                    }
                });
                self.accumulate(grads, *a, d);
            }
            Op::Acos(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(a))
                    .for_each(|d, &x| *d *= -1.0 / (1.0 - x * x).sqrt());
                self.accumulate(grads, *a, d);
            }
            Op::Sin(a) => self.accumulate(grads, *a, g * &val(a).mapv(f64::cos)),
            Op::Cos(a) => self.accumulate(grads, *a, g * &val(a).mapv(|x| -x.sin())),
            Op::Exp(a) => self.accumulate(grads, *a, g * out),
            Op::Log(a) => self.accumulate(grads, *a, g / val(a)),
            Op::Relu(a) => self.accumulate(grads, *a, g * &val(a).mapv(|x| if x > 0.0 { 1.0 } else { 0.0 })),
            Op::ThetaOverSin(a) => self.accumulate(grads, *a, g * &val(a).mapv(theta_over_sin_deriv)),
            Op::Sinc(a) => self.accumulate(grads, *a, g * &val(a).mapv(sinc_deriv)),
            Op::SegmentSoftmax(a, offsets) => {
                let mut d = Tensor::zeros(out.dim());
                for w in offsets.windows(2) {
                    let dot: f64 = (w[0]..w[1]).map(|e| out[[e, 0]] * g[[e, 0]]).sum();
                    for e in w[0]..w[1] {
                        d[[e, 0]] = out[[e, 0]] * (g[[e, 0]] - dot);
                    }
                }
                self.accumulate(grads, *a, d);
            }
            Op::Dropout(a, mask) => self.accumulate(grads, *a, g * mask),
            Op::CrossEntropy { logits, targets, probs } => {
                let scale = g[[0, 0]] / targets.len() as f64;
                let mut d = Tensor::zeros(val(logits).dim());
                for (t, &(r, c)) in targets.iter().enumerate() {
                    let mut row = d.row_mut(r);
                    row.scaled_add(scale, &probs.row(t));
                    row[c] -= scale;
                }
                self.accumulate(grads, *logits, d);
            }
            Op::BceWithLogits { logits, labels } => {
                let scale = g[[0, 0]] / labels.len() as f64;
                let lv = val(logits);
                let d = Tensor::from_shape_fn(lv.dim(), |(i, _)| scale * (sigmoid(lv[[i, 0]]) - labels[i]));
                self.accumulate(grads, *logits, d);
            }
            Op::Opaque { name, inputs } => {
                if inputs.iter().any(|v| self.nodes[v.0].requires_grad) {
                    return Err(Error::UnsupportedOp(format!(
                        "no backward rule for opaque node '{name}'"
                    )));
                }
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    #[test]
    fn square_has_derivative_six_at_three() {
        let mut t = Tape::new();
        let x = t.variable(array![[3.0]]);
        let y = t.mul(x, x).unwrap();
        let g = t.grad(y, &[x]).unwrap();
        assert_eq!(t.scalar(y), 9.0);
        assert_eq!(g[0][[0, 0]], 6.0);
    }

    #[test]
    fn cross_entropy_at_equal_logits() {
        let mut t = Tape::new();
        let z = t.variable(array![[0.0, 0.0]]);
        let loss = t.cross_entropy(z, &[(0, 0)]).unwrap();
        let g = t.grad(loss, &[z]).unwrap();
        assert!((g[0][[0, 0]] + 0.5).abs() < 1e-15);
        assert!((g[0][[0, 1]] - 0.5).abs() < 1e-15);
        assert!((t.scalar(loss) - 2f64.ln()).abs() < 1e-15);
    }

    #[test]
    fn sum_of_matrix_product() {
        // f(X) = sum(A X) with X a 2x1 column: df/dX = A^T 1 = [4, 6]^T.
        let mut t = Tape::new();
        let a = t.constant(array![[1.0, 2.0], [3.0, 4.0]]);
        let x = t.variable(array![[0.5], [-1.0]]);
        let ax = t.matmul(a, x).unwrap();
        let f = t.sum(ax);
        let g = t.grad(f, &[x]).unwrap();
        assert_eq!(g[0], array![[4.0], [6.0]]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0, 2.0]]);
        let y = t.exp(x);
        assert!(matches!(t.backward(y), Err(Error::Contract(_))));
    }

    #[test]
    fn disconnected_variable_gets_zero_gradient() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0, 2.0]]);
        let unused = t.variable(array![[5.0], [6.0]]);
        let y = t.sum(x);
        let g = t.grad(y, &[x, unused]).unwrap();
        assert_eq!(g[1], Tensor::zeros((2, 1)));
    }

    #[test]
    fn opaque_node_blocks_gradient() {
        let mut t = Tape::new();
        let x = t.variable(array![[1.0]]);
        let y = t.opaque("external", &[x], array![[2.0]]);
        let z = t.sum(y);
        assert!(matches!(t.backward(z), Err(Error::UnsupportedOp(_))));
    }

    #[test]
    fn clamp_gradient_is_zero_at_boundary() {
        let mut t = Tape::new();
        let x = t.variable(array![[-2.0, 0.0, 1.0, 0.5]]);
        let c = t.clamp(x, -1.0, 1.0);
        let s = t.sum(c);
        let g = t.grad(s, &[x]).unwrap();
        assert_eq!(g[0], array![[0.0, 1.0, 0.0, 1.0]]);
        assert_eq!(t.clamp_boundary_hits(), 2);
    }

    #[test]
    fn segment_softmax_sums_to_one_per_segment() {
        let mut t = Tape::new();
        let x = t.constant(array![[0.3], [1.0], [-2.0], [4.0], [0.0]]);
        let sm = t.segment_softmax(x, Rc::new(vec![0, 3, 3, 5])).unwrap();
        let v = t.value(sm);
        assert!(((v[[0, 0]] + v[[1, 0]] + v[[2, 0]]) - 1.0).abs() < 1e-15);
        assert!(((v[[3, 0]] + v[[4, 0]]) - 1.0).abs() < 1e-15);
    }

    #[test]
    fn row_normalize_replaces_zero_row() {
        let mut t = Tape::new();
        let x = t.variable(array![[3.0, 4.0], [0.0, 0.0]]);
        let y = t.row_normalize(x);
        assert_eq!(t.value(y), &array![[0.6, 0.8], [1.0, 0.0]]);
        assert_eq!(t.degenerate_rows(), 1);
        let s = t.sum(y);
        let g = t.grad(s, &[x]).unwrap();
        assert_eq!(g[0].row(1).to_vec(), vec![0.0, 0.0]);
    }

    #[test]
    fn dropout_is_identity_in_eval_mode() {
        let mut rng = rand::rng();
        let mut t = Tape::new();
        let x = t.variable(array![[1.0, 2.0]]);
        let y = t.dropout(x, 0.5, false, &mut rng).unwrap();
        assert_eq!(x, y);
    }

    #[test]
    fn series_branches_are_continuous() {
        let eps = 1e-4;
        assert!((theta_over_sin(eps * 0.999) - theta_over_sin(eps * 1.001)).abs() < 1e-9);
        assert!((sinc(eps * 0.999) - sinc(eps * 1.001)).abs() < 1e-9);
        assert!((theta_over_sin_deriv(eps * 0.999) - theta_over_sin_deriv(eps * 1.001)).abs() < 1e-6);
        assert!((sinc_deriv(eps * 0.999) - sinc_deriv(eps * 1.001)).abs() < 1e-6);
    }
}
