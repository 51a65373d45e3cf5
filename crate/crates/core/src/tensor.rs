//! Dense row-major tensors and the raw kernels the autograd tape is built on.
//!
//! Training math is 64-bit floating point throughout; checkpoints narrow to
//! 32-bit on save. Every kernel is deterministic: parallel loops only split
//! work so that each output element is still produced by one sequential
//! reduction, which keeps results bit-identical regardless of thread count.

use crate::error::{Error, Result};
use rayon::prelude::*;

/// Dense tensor: positive extents, row-major `f64` payload.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    dims: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
}

impl Tensor {
    pub fn zeros(dims: &[usize]) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![0.0; n],
            requires_grad: false,
        }
    }

    pub fn filled(dims: &[usize], value: f64) -> Self {
        let n = dims.iter().product();
        Tensor {
            dims: dims.to_vec(),
            data: vec![value; n],
            requires_grad: false,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            dims: vec![1],
            data: vec![value],
            requires_grad: false,
        }
    }

    pub fn from_vec(dims: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = dims.iter().product();
        if n != data.len() {
            return Err(Error::Shape(format!(
                "payload length {} does not match dims {:?}",
                data.len(),
                dims
            )));
        }
        if dims.iter().any(|&d| d == 0) {
            return Err(Error::Shape(format!("zero extent in dims {:?}", dims)));
        }
        Ok(Tensor {
            dims: dims.to_vec(),
            data,
            requires_grad: false,
        })
    }

    pub fn with_grad(mut self, requires_grad: bool) -> Self {
        self.requires_grad = requires_grad;
        self
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn set_requires_grad(&mut self, flag: bool) {
        self.requires_grad = flag;
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
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

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    pub fn item(&self) -> Result<f64> {
        if !self.is_scalar() {
            return Err(Error::Shape(format!(
                "expected scalar, got dims {:?}",
                self.dims
            )));
        }
        Ok(self.data[0])
    }

    /// Size of the trailing axis.
    pub fn last_dim(&self) -> usize {
        *self.dims.last().unwrap_or(&1)
    }

    /// Number of rows when the tensor is viewed as `[rows, last_dim]`.
    pub fn rows(&self) -> usize {
        self.data.len() / self.last_dim()
    }

    pub fn reshaped(&self, dims: &[usize]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if n != self.data.len() {
            return Err(Error::Shape(format!(
                "cannot reshape {:?} into {:?}",
                self.dims, dims
            )));
        }
        let mut out = self.clone();
        out.dims = dims.to_vec();
        Ok(out)
    }

    pub fn check_finite(&self, context: &str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context.to_string()))
        }
    }

    /// Checkpoint payload: row-major little-endian IEEE-754 f32.
    pub fn to_f32_le_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(self.data.len() * 4);
        for &v in &self.data {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out
    }

    pub fn from_f32_le_bytes(dims: &[usize], bytes: &[u8]) -> Result<Tensor> {
        let n: usize = dims.iter().product();
        if bytes.len() != n * 4 {
            return Err(Error::Shape(format!(
                "payload byte length {} does not match dims {:?}",
                bytes.len(),
                dims
            )));
        }
        let mut data = Vec::with_capacity(n);
        for chunk in bytes.chunks_exact(4) {
            let v = f32::from_le_bytes([chunk[0], chunk[1], chunk[2], chunk[3]]);
            data.push(v as f64);
        }
        Tensor::from_vec(dims, data)
    }
}

fn lead_rows(a: &Tensor, k: usize) -> Result<usize> {
    if a.last_dim() != k {
        return Err(Error::Shape(format!(
            "matmul inner dims disagree: lhs {:?} vs rhs inner {}",
            a.dims(),
            k
        )));
    }
    Ok(a.len() / k)
}

/// `a[..., k] x b[k, n] -> [..., n]`, contracting over the trailing axis of `a`.
pub fn matmul(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.dims().len() != 2 {
        return Err(Error::Shape(format!("matmul rhs must be 2-d, got {:?}", b.dims())));
    }
    let (k, n) = (b.dims()[0], b.dims()[1]);
    let m = lead_rows(a, k)?;
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let row_fn = |i: usize, orow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &bd[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    };
    if m * k * n < PARALLEL_FLOPS {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row_fn(i, orow);
        }
    } else {
        out.par_chunks_mut(n)
            .with_min_len(rows_per_task(k, n))
            .enumerate()
            .for_each(|(i, orow)| row_fn(i, orow));
    }
    let mut dims: Vec<usize> = a.dims()[..a.dims().len() - 1].to_vec();
    dims.push(n);
    Tensor::from_vec(&dims, out)
}

/// `a[..., k] x b[n, k]^T -> [..., n]`: row-by-row dot products.
pub fn matmul_bt(a: &Tensor, b: &Tensor) -> Result<Tensor> {
    if b.dims().len() != 2 {
        return Err(Error::Shape(format!("matmul_bt rhs must be 2-d, got {:?}", b.dims())));
    }
    let (n, k) = (b.dims()[0], b.dims()[1]);
    let m = lead_rows(a, k)?;
    let mut out = vec![0.0; m * n];
    let ad = a.data();
    let bd = b.data();
    let row_fn = |i: usize, orow: &mut [f64]| {
        let arow = &ad[i * k..(i + 1) * k];
        for (j, o) in orow.iter_mut().enumerate() {
            let brow = &bd[j * k..(j + 1) * k];
            let mut acc = 0.0;
            for (&av, &bv) in arow.iter().zip(brow) {
                acc += av * bv;
            }
            *o = acc;
        }
    };
    if m * k * n < PARALLEL_FLOPS {
        for (i, orow) in out.chunks_mut(n).enumerate() {
            row_fn(i, orow);
        }
    } else {
        out.par_chunks_mut(n)
            .with_min_len(rows_per_task(k, n))
            .enumerate()
            .for_each(|(i, orow)| row_fn(i, orow));
    }
    let mut dims: Vec<usize> = a.dims()[..a.dims().len() - 1].to_vec();
    dims.push(n);
    Tensor::from_vec(&dims, out)
}

/// `a[m, k]^T x g[m, n] -> [k, n]`; the weight-gradient contraction.
pub fn matmul_ta(a: &Tensor, g: &Tensor) -> Result<Tensor> {
    let k = a.last_dim();
    let n = g.last_dim();
    let m = a.len() / k;
    if g.len() / n != m {
        return Err(Error::Shape(format!(
            "matmul_ta row counts disagree: {:?} vs {:?}",
            a.dims(),
            g.dims()
        )));
    }
    let ad = a.data();
    let gd = g.data();
    let mut out = vec![0.0; k * n];
    // Accumulate over m in ascending order for every output element.
    let row_fn = |p: usize, orow: &mut [f64]| {
        for i in 0..m {
            let av = ad[i * k + p];
            if av == 0.0 {
                continue;
            }
            let grow = &gd[i * n..(i + 1) * n];
            for (o, &gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    };
    if m * k * n < PARALLEL_FLOPS {
        for (p, orow) in out.chunks_mut(n).enumerate() {
            row_fn(p, orow);
        }
    } else {
        out.par_chunks_mut(n)
            .with_min_len(rows_per_task(m, n))
            .enumerate()
            .for_each(|(p, orow)| row_fn(p, orow));
    }
    Tensor::from_vec(&[k, n], out)
}

/// Row-wise softmax over the trailing axis, numerically stabilised.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let d = x.last_dim();
    let mut out = vec![0.0; x.len()];
    for (orow, xrow) in out.chunks_mut(d).zip(x.data().chunks(d)) {
        softmax_row_into(xrow, orow);
    }
    Tensor::from_vec(x.dims(), out).expect("softmax preserves shape")
}

/// Work threshold below which kernels stay serial: at desk scale the
/// per-call work is usually too small for thread handoff to pay off.
pub(crate) const PARALLEL_FLOPS: usize = 1 << 21;

/// Rows per parallel task, sized so a task covers roughly 256k
/// multiply-adds. Splitting only changes which thread computes a row,
/// never the result.
pub(crate) fn rows_per_task(k: usize, n: usize) -> usize {
    (262_144 / (k * n).max(1)).max(8)
}

pub(crate) fn softmax_row_into(xrow: &[f64], orow: &mut [f64]) {
    let mut max = f64::NEG_INFINITY;
    for &v in xrow {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for (o, &v) in orow.iter_mut().zip(xrow) {
        let e = (v - max).exp();
        *o = e;
        sum += e;
    }
    for o in orow.iter_mut() {
        *o /= sum;
    }
}

/// log(sum(exp(row))) with the usual max shift.
pub fn log_sum_exp(row: &[f64]) -> f64 {
    let mut max = f64::NEG_INFINITY;
    for &v in row {
        if v > max {
            max = v;
        }
    }
    let mut sum = 0.0;
    for &v in row {
        sum += (v - max).exp();
    }
    max + sum.ln()
}

pub(crate) const GELU_COEF: f64 = 0.044715;

pub(crate) fn gelu_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    0.5 * x * (1.0 + u.tanh())
}

pub(crate) fn gelu_grad_scalar(x: f64) -> f64 {
    let c = (2.0 / std::f64::consts::PI).sqrt();
    let u = c * (x + GELU_COEF * x * x * x);
    let t = u.tanh();
    let sech2 = 1.0 - t * t;
    0.5 * (1.0 + t) + 0.5 * x * sech2 * c * (1.0 + 3.0 * GELU_COEF * x * x)
}
