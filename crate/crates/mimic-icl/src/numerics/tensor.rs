//! Dense double-precision tensors, row-major. The numeric substrate for
//! everything else in the crate.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Dense multi-dimensional value with an optional gradient accumulator.
///
/// Invariants: `product(shape) == data.len()`, and `grad`, when present, has
/// the same length as `data`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    #[serde(skip)]
    pub grad: Option<Vec<f64>>,
    #[serde(skip, default)]
    pub requires_grad: bool,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(Error::shape("Tensor::new", &shape, &[data.len()]));
        }
        Ok(Tensor {
            shape,
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel: usize = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn scalar(x: f64) -> Self {
        Tensor {
            shape: vec![1],
            data: vec![x],
            grad: None,
            requires_grad: false,
        }
    }

    pub fn vector(data: Vec<f64>) -> Self {
        Tensor {
            shape: vec![data.len()],
            data,
            grad: None,
            requires_grad: false,
        }
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Tensor::new(vec![rows, cols], data)
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn is_scalar(&self) -> bool {
        self.numel() == 1
    }

    /// Scalar payload; panics if not a one-element tensor.
    pub fn item(&self) -> f64 {
        assert!(self.is_scalar(), "item() on non-scalar tensor");
        self.data[0]
    }

    /// Row count for 2-D tensors; 1-D tensors count as a single row.
    pub fn rows(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[0],
            _ => 1,
        }
    }

    /// Column count for 1-D/2-D tensors.
    pub fn cols(&self) -> usize {
        match self.shape.len() {
            2 => self.shape[1],
            1 => self.shape[0],
            _ => self.numel(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols() + j]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }

    /// Debug dump: row-major CSV, header line carries the shape.
    pub fn to_csv(&self) -> String {
        let mut out = format!(
            "# shape={}\n",
            self.shape
                .iter()
                .map(|d| d.to_string())
                .collect::<Vec<_>>()
                .join("x")
        );
        let c = self.cols();
        for row in self.data.chunks(c.max(1)) {
            let line: Vec<String> = row.iter().map(|x| format!("{x}")).collect();
            out.push_str(&line.join(","));
            out.push('\n');
        }
        out
    }
}

/// Standard matrix product, `(m×k)(k×n) -> m×n`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if a.shape.len() != 2 || b.shape.len() != 2 || a.shape[1] != b.shape[0] {
        return Err(Error::shape("matmul", &a.shape, &b.shape));
    }
    let (m, k, n) = (a.shape[0], a.shape[1], b.shape[1]);
    let mut out = vec![0.0; m * n];
    matmul_into(&a.data, &b.data, m, k, n, &mut out);
    Tensor::new(vec![m, n], out)
}

/// `out += a·b` with `a: m×k`, `b: k×n`, accumulating into `out: m×n`.
/// i-k-j loop order keeps the inner loop contiguous.
pub(crate) fn matmul_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// `out += a·bᵀ` with `a: m×k`, `b: n×k`, accumulating into `out: m×n`.
pub(crate) fn matmul_tb_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&x, &y) in arow.iter().zip(brow.iter()) {
                acc += x * y;
            }
            out[i * n + j] += acc;
        }
    }
}

/// `out += aᵀ·b` with `a: k×m`, `b: k×n`, accumulating into `out: m×n`.
pub(crate) fn matmul_ta_into(a: &[f64], b: &[f64], m: usize, k: usize, n: usize, out: &mut [f64]) {
    for p in 0..k {
        let arow = &a[p * m..(p + 1) * m];
        let brow = &b[p * n..(p + 1) * n];
        for (i, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow.iter()) {
                *o += av * bv;
            }
        }
    }
}

/// log Σ exp(xᵢ), max-shifted so it never overflows.
pub fn log_sum_exp(x: &[f64]) -> Result<f64> {
    if x.is_empty() {
        return Err(Error::EmptyInput("log_sum_exp"));
    }
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite("log_sum_exp"));
    }
    let s: f64 = x.iter().map(|&v| (v - m).exp()).sum();
    Ok(m + s.ln())
}

/// Row-wise softmax with max-shift. Each output row is nonnegative and sums
/// to 1.
pub fn softmax_rows(x: &Tensor) -> Result<Tensor> {
    if x.cols() == 0 {
        return Err(Error::EmptyInput("softmax_rows"));
    }
    let c = x.cols();
    let mut out = x.clone();
    out.grad = None;
    out.requires_grad = false;
    for row in out.data.chunks_mut(c) {
        softmax_row_in_place(row)?;
    }
    Ok(out)
}

pub(crate) fn softmax_row_in_place(row: &mut [f64]) -> Result<()> {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return Err(Error::NonFinite("softmax_rows"));
    }
    let mut s = 0.0;
    for v in row.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v /= s;
    }
    Ok(())
}
