//! Dense 64-bit tensors with a define-by-run reverse-mode tape.
//!
//! [`Tensor`] is a plain row-major value. Differentiable computation goes
//! through a [`Tape`]: every op records its inputs and enough saved state to
//! replay the local backward rule, and [`Tape::backward`] walks the record in
//! reverse. The forward kernels live here as free functions so the same code
//! path serves both taped and untaped evaluation.

mod gradcheck;
mod tape;

pub use gradcheck::{finite_difference_gradient, max_relative_error, relative_error};
pub use tape::{param_name, Binder, Gradients, Tape, Var};

use smallvec::SmallVec;

use crate::error::{MoceError, Result};

/// Elementwise nonlinearity used inside adapter experts and base feed-forward blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Activation {
    #[default]
    Gelu,
    Relu,
    Silu,
}

impl Activation {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => 0.5 * x * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2)),
            Activation::Relu => x.max(0.0),
            Activation::Silu => x / (1.0 + (-x).exp()),
        }
    }

    pub fn derivative(self, x: f64) -> f64 {
        match self {
            Activation::Gelu => {
                let cdf = 0.5 * (1.0 + libm::erf(x * std::f64::consts::FRAC_1_SQRT_2));
                let pdf = (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt();
                cdf + x * pdf
            }
            Activation::Relu => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Silu => {
                let s = 1.0 / (1.0 + (-x).exp());
                s * (1.0 + x * (1.0 - s))
            }
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Activation::Gelu => "gelu",
            Activation::Relu => "relu",
            Activation::Silu => "silu",
        }
    }
}

impl std::str::FromStr for Activation {
    type Err = MoceError;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "gelu" => Ok(Activation::Gelu),
            "relu" => Ok(Activation::Relu),
            "silu" => Ok(Activation::Silu),
            other => Err(MoceError::config(format!("unknown activation '{other}'"))),
        }
    }
}

/// Dense row-major tensor of `f64`.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: SmallVec<[usize; 4]>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        if shape.contains(&0) {
            return Err(MoceError::shape(format!(
                "zero-sized dimension in {shape:?}"
            )));
        }
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(MoceError::shape(format!(
                "shape {shape:?} needs {numel} values, got {}",
                data.len()
            )));
        }
        Ok(Self {
            shape: SmallVec::from_slice(shape),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: &[usize]) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![0.0; numel]).expect("zeros shape")
    }

    pub fn filled(shape: &[usize], value: f64) -> Self {
        let numel = shape.iter().product();
        Self::new(shape, vec![value; numel]).expect("filled shape")
    }

    pub fn scalar(value: f64) -> Self {
        Self::new(&[1], vec![value]).expect("scalar shape")
    }

    pub fn vector(values: Vec<f64>) -> Result<Self> {
        let n = values.len();
        Self::new(&[n], values)
    }

    pub fn matrix(rows: usize, cols: usize, values: Vec<f64>) -> Result<Self> {
        Self::new(&[rows, cols], values)
    }

    pub fn identity(n: usize) -> Self {
        let mut t = Self::zeros(&[n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
    }

    pub fn with_requires_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, requires_grad: bool) {
        self.requires_grad = requires_grad;
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    /// Adds `g` into the stored gradient, allocating it on first use.
    pub fn accumulate_grad(&mut self, g: &[f64]) -> Result<()> {
        if g.len() != self.data.len() {
            return Err(MoceError::shape(format!(
                "gradient of length {} for tensor of shape {:?}",
                g.len(),
                self.shape
            )));
        }
        match &mut self.grad {
            Some(acc) => acc.iter_mut().zip(g).for_each(|(a, b)| *a += b),
            None => self.grad = Some(g.to_vec()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }

    pub fn take_grad(&mut self) -> Option<Vec<f64>> {
        self.grad.take()
    }

    pub fn rows(&self) -> usize {
        match self.shape.len() {
            0 | 1 => 1,
            _ => self.shape[..self.shape.len() - 1].iter().product(),
        }
    }

    /// Size of the trailing axis; a 1-D tensor is treated as a single row.
    pub fn cols(&self) -> usize {
        *self.shape.last().unwrap_or(&1)
    }

    pub fn row(&self, r: usize) -> &[f64] {
        let c = self.cols();
        &self.data[r * c..(r + 1) * c]
    }

    pub fn get2(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols() + c]
    }

    pub fn item(&self) -> Result<f64> {
        if self.numel() != 1 {
            return Err(MoceError::contract(format!(
                "item() on tensor of shape {:?}",
                self.shape
            )));
        }
        Ok(self.data[0])
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        Tensor::new(shape, self.data.clone())
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum()
    }

    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        matmul(self, other)
    }
}

fn require_2d(t: &Tensor, what: &str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        s => Err(MoceError::shape(format!(
            "{what} expects a 2-D tensor, got {s:?}"
        ))),
    }
}

fn require_same_shape(a: &Tensor, b: &Tensor, what: &str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(MoceError::shape(format!(
            "{what}: shapes {:?} and {:?} differ",
            a.shape(),
            b.shape()
        )));
    }
    Ok(())
}

/// `a[m×k] · b[k×n]`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    let (m, k) = require_2d(a, "matmul")?;
    let (k2, n) = require_2d(b, "matmul")?;
    if k != k2 {
        return Err(MoceError::shape(format!(
            "matmul inner dimensions disagree: {:?} x {:?}",
            a.shape(),
            b.shape()
        )));
    }
    let mut out = vec![0.0; m * n];
    let (ad, bd) = (a.data(), b.data());
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    Tensor::new(&[m, n], out)
}

pub fn transpose(a: &Tensor) -> Result<Tensor> {
    let (m, n) = require_2d(a, "transpose")?;
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            out[j * m + i] = a.data[i * n + j];
        }
    }
    Tensor::new(&[n, m], out)
}

pub fn zip_with(a: &Tensor, b: &Tensor, what: &str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    require_same_shape(a, b, what)?;
    let data = a.data.iter().zip(&b.data).map(|(x, y)| f(*x, *y)).collect();
    Tensor::new(a.shape(), data)
}

pub fn map(a: &Tensor, f: impl Fn(f64) -> f64) -> Tensor {
    Tensor {
        shape: a.shape.clone(),
        data: a.data.iter().map(|v| f(*v)).collect(),
        grad: None,
        requires_grad: false,
    }
}

/// Softmax over the trailing axis, with max subtraction.
pub fn softmax(v: &Tensor) -> Result<Tensor> {
    let cols = v.cols();
    if v.numel() == 0 || cols == 0 {
        return Err(MoceError::shape("softmax over an empty axis"));
    }
    let mut out = v.data.clone();
    for row in out.chunks_mut(cols) {
        softmax_in_place(row);
    }
    Tensor::new(v.shape(), out)
}

pub(crate) fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

/// Row softmax of a square score matrix where entry `(i, j)` with `j > i` is masked to zero.
pub fn causal_softmax(scores: &Tensor) -> Result<Tensor> {
    let (t, t2) = require_2d(scores, "causal_softmax")?;
    if t != t2 {
        return Err(MoceError::shape(format!(
            "causal_softmax expects a square matrix, got {:?}",
            scores.shape()
        )));
    }
    let mut out = vec![0.0; t * t];
    for i in 0..t {
        let row = &mut out[i * t..i * t + i + 1];
        row.copy_from_slice(&scores.data[i * t..i * t + i + 1]);
        softmax_in_place(row);
    }
    Tensor::new(&[t, t], out)
}

pub const RMS_EPS: f64 = 1e-6;

/// Parameter-free RMS normalization of each row.
pub fn rms_norm(x: &Tensor) -> (Tensor, Vec<f64>) {
    let cols = x.cols();
    let mut inv = Vec::with_capacity(x.rows());
    let mut out = x.data.clone();
    for row in out.chunks_mut(cols) {
        let ms = row.iter().map(|v| v * v).sum::<f64>() / cols as f64;
        // an overflowed row must not normalize to zero
        let r = if ms.is_finite() {
            1.0 / (ms + RMS_EPS).sqrt()
        } else {
            f64::NAN
        };
        row.iter_mut().for_each(|v| *v *= r);
        inv.push(r);
    }
    (
        Tensor {
            shape: x.shape.clone(),
            data: out,
            grad: None,
            requires_grad: false,
        },
        inv,
    )
}

pub fn gather_rows(x: &Tensor, idx: &[usize]) -> Result<Tensor> {
    let (rows, cols) = require_2d(x, "gather_rows")?;
    if idx.is_empty() {
        return Err(MoceError::shape("gather_rows with no indices"));
    }
    let mut out = Vec::with_capacity(idx.len() * cols);
    for &i in idx {
        if i >= rows {
            return Err(MoceError::shape(format!(
                "row index {i} out of range for {rows} rows"
            )));
        }
        out.extend_from_slice(x.row(i));
    }
    Tensor::new(&[idx.len(), cols], out)
}

/// Places row `r` of `x` at row `idx[r]` of a `total × cols` zero matrix, summing collisions.
pub fn scatter_rows(x: &Tensor, idx: &[usize], total: usize) -> Result<Tensor> {
    let (rows, cols) = require_2d(x, "scatter_rows")?;
    if rows != idx.len() {
        return Err(MoceError::shape(format!(
            "scatter_rows: {rows} rows but {} indices",
            idx.len()
        )));
    }
    let mut out = vec![0.0; total * cols];
    for (r, &i) in idx.iter().enumerate() {
        if i >= total {
            return Err(MoceError::shape(format!(
                "row index {i} out of range for {total} rows"
            )));
        }
        for (o, v) in out[i * cols..(i + 1) * cols].iter_mut().zip(x.row(r)) {
            *o += v;
        }
    }
    Tensor::new(&[total, cols], out)
}

/// Multiplies row `r` of `x` by `w[r]`.
pub fn scale_rows(x: &Tensor, w: &Tensor) -> Result<Tensor> {
    let (rows, cols) = require_2d(x, "scale_rows")?;
    if w.numel() != rows {
        return Err(MoceError::shape(format!(
            "scale_rows: {rows} rows but {} weights",
            w.numel()
        )));
    }
    let mut out = x.data.clone();
    for (row, s) in out.chunks_mut(cols).zip(w.data()) {
        row.iter_mut().for_each(|v| *v *= s);
    }
    Tensor::new(x.shape(), out)
}

pub fn column(x: &Tensor, c: usize) -> Result<Tensor> {
    let (rows, cols) = require_2d(x, "column")?;
    if c >= cols {
        return Err(MoceError::shape(format!(
            "column {c} out of range for {cols} columns"
        )));
    }
    Tensor::new(
        &[rows, 1],
        (0..rows).map(|r| x.data[r * cols + c]).collect(),
    )
}

/// Column sums of a 2-D tensor as a `1 × cols` row.
pub fn sum_rows(x: &Tensor) -> Result<Tensor> {
    let (_, cols) = require_2d(x, "sum_rows")?;
    let mut out = vec![0.0; cols];
    for row in x.data.chunks(cols) {
        out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
    }
    Tensor::new(&[1, cols], out)
}

/// Mean next-token cross-entropy over the rows listed in `positions`.
///
/// Returns the loss and the row softmax of `logits`, which the backward rule reuses.
pub fn cross_entropy(
    logits: &Tensor,
    targets: &[usize],
    positions: &[usize],
) -> Result<(f64, Tensor)> {
    let (rows, vocab) = require_2d(logits, "cross_entropy")?;
    if targets.len() != rows {
        return Err(MoceError::contract(format!(
            "cross_entropy: {} targets for {rows} logit rows",
            targets.len()
        )));
    }
    if positions.is_empty() {
        return Err(MoceError::contract("cross_entropy: empty supervised span"));
    }
    let probs = softmax(logits)?;
    let mut total = 0.0;
    for &p in positions {
        if p >= rows {
            return Err(MoceError::contract(format!(
                "supervised position {p} out of range"
            )));
        }
        let t = targets[p];
        if t >= vocab {
            return Err(MoceError::contract(format!(
                "target {t} outside vocabulary of {vocab}"
            )));
        }
        // log-sum-exp form keeps large-margin logits exact
        let row = logits.row(p);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        total += lse - row[t];
    }
    Ok((total / positions.len() as f64, probs))
}
