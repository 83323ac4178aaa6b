//! Fused CPU kernels with hand-written backward passes for the elementwise
//! and row-wise operations the networks call most often. Composing them from
//! primitive tensor ops costs one allocation and one pass per primitive, and
//! gradients of row-broadcast operands go through a slow strided reduction.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor};
use num_traits::Float;

use crate::error::Result;

type CResult<T> = candle_core::Result<T>;

fn contiguous<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> CResult<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((a, b)) => Ok(&data[a..b]),
        None => candle_core::bail!("{op}: input must be contiguous"),
    }
}

fn last_dim(l: &Layout) -> usize {
    l.shape().dims().last().copied().unwrap_or(1)
}

/// Dispatches a unary kernel over f32/f64 storage.
macro_rules! unary_fwd {
    ($s:expr, $l:expr, $name:expr, $f:expr) => {{
        let out = match $s {
            CpuStorage::F32(d) => CpuStorage::F32($f(contiguous(d, $l, $name)?)),
            CpuStorage::F64(d) => CpuStorage::F64($f(contiguous(d, $l, $name)?)),
            _ => candle_core::bail!("{}: only f32 and f64 are supported", $name),
        };
        Ok((out, $l.shape().clone()))
    }};
}

/// Dispatches a binary kernel over matching f32/f64 storages; the output
/// takes `$shape`.
macro_rules! binary_fwd {
    ($s1:expr, $l1:expr, $s2:expr, $l2:expr, $name:expr, $shape:expr, $f:expr) => {{
        let out = match ($s1, $s2) {
            (CpuStorage::F32(a), CpuStorage::F32(b)) => {
                CpuStorage::F32($f(contiguous(a, $l1, $name)?, contiguous(b, $l2, $name)?))
            }
            (CpuStorage::F64(a), CpuStorage::F64(b)) => {
                CpuStorage::F64($f(contiguous(a, $l1, $name)?, contiguous(b, $l2, $name)?))
            }
            _ => candle_core::bail!("{}: only matching f32 or f64 inputs are supported", $name),
        };
        Ok((out, $shape))
    }};
}

fn c<T: Float>(v: f64) -> T {
    T::from(v).expect("constant representable")
}

// Tanh-form GELU written as x * sigmoid(2u), u = sqrt(2/pi) (x + 0.044715 x^3).
const GELU_C: f64 = 0.797_884_560_802_865_4;
const GELU_A: f64 = 0.044_715;

fn gelu_values<T: Float>(xs: &[T]) -> Vec<T> {
    let (k, a) = (c::<T>(2.0 * GELU_C), c::<T>(GELU_A));
    xs.iter()
        .map(|&x| x / (T::one() + (-k * (x + a * x * x * x)).exp()))
        .collect()
}

fn gelu_slopes<T: Float>(xs: &[T]) -> Vec<T> {
    let (k, a, three) = (c::<T>(2.0 * GELU_C), c::<T>(GELU_A), c::<T>(3.0));
    xs.iter()
        .map(|&x| {
            let s = T::one() / (T::one() + (-k * (x + a * x * x * x)).exp());
            s + x * s * (T::one() - s) * k * (T::one() + three * a * x * x)
        })
        .collect()
}

struct Gelu;
struct GeluSlope;

impl CustomOp1 for Gelu {
    fn name(&self) -> &'static str {
        "fused-gelu"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        unary_fwd!(s, l, self.name(), gelu_values)
    }
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let slope = arg.contiguous()?.apply_op1_no_bwd(&GeluSlope)?;
        Ok(Some(grad.mul(&slope)?))
    }
}

impl CustomOp1 for GeluSlope {
    fn name(&self) -> &'static str {
        "fused-gelu-slope"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        unary_fwd!(s, l, self.name(), gelu_slopes)
    }
}

/// Tanh-approximation GELU.
pub fn gelu(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Gelu)?)
}

/// Row mean and 1/sqrt(var + eps).
fn row_stats<T: Float>(row: &[T], eps: T) -> (T, T) {
    let n = c::<T>(row.len() as f64);
    let mean = row.iter().fold(T::zero(), |s, &v| s + v) / n;
    let var = row.iter().fold(T::zero(), |s, &v| s + (v - mean) * (v - mean)) / n;
    (mean, T::one() / (var + eps).sqrt())
}

fn standardize<T: Float>(xs: &[T], width: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks_exact(width) {
        let (mean, inv) = row_stats(row, c(eps));
        out.extend(row.iter().map(|&v| (v - mean) * inv));
    }
    out
}

fn standardize_grad<T: Float>(xs: &[T], gs: &[T], width: usize, eps: f64) -> Vec<T> {
    let n = c::<T>(width as f64);
    let mut out = Vec::with_capacity(xs.len());
    let mut y = vec![T::zero(); width];
    for (row, g) in xs.chunks_exact(width).zip(gs.chunks_exact(width)) {
        let (mean, inv) = row_stats(row, c(eps));
        for (yi, &v) in y.iter_mut().zip(row) {
            *yi = (v - mean) * inv;
        }
        let g_mean = g.iter().fold(T::zero(), |s, &v| s + v) / n;
        let gy_mean = g.iter().zip(&y).fold(T::zero(), |s, (&a, &b)| s + a * b) / n;
        out.extend(g.iter().zip(&y).map(|(&gi, &yi)| inv * (gi - g_mean - yi * gy_mean)));
    }
    out
}

struct Standardize(f64);
struct StandardizeGrad(f64);

impl CustomOp1 for Standardize {
    fn name(&self) -> &'static str {
        "fused-standardize"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (w, eps) = (last_dim(l), self.0);
        unary_fwd!(s, l, self.name(), |x| standardize(x, w, eps))
    }
    fn bwd(&self, arg: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = arg
            .contiguous()?
            .apply_op2_no_bwd(&grad.contiguous()?, &StandardizeGrad(self.0))?;
        Ok(Some(g))
    }
}

impl CustomOp2 for StandardizeGrad {
    fn name(&self) -> &'static str {
        "fused-standardize-grad"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let (w, eps) = (last_dim(l1), self.0);
        binary_fwd!(s1, l1, s2, l2, self.name(), l1.shape().clone(), |x, g| {
            standardize_grad(x, g, w, eps)
        })
    }
}

/// Zero-mean, unit-variance rows over the last dimension.
pub fn standardize_last(x: &Tensor, eps: f64) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Standardize(eps))?)
}

fn softmax_rows<T: Float>(xs: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks_exact(width) {
        let max = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
        let start = out.len();
        let mut sum = T::zero();
        for &v in row {
            let e = (v - max).exp();
            sum = sum + e;
            out.push(e);
        }
        for v in &mut out[start..] {
            *v = *v / sum;
        }
    }
    out
}

fn softmax_grad<T: Float>(ys: &[T], gs: &[T], width: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(ys.len());
    for (y, g) in ys.chunks_exact(width).zip(gs.chunks_exact(width)) {
        let dot = y.iter().zip(g).fold(T::zero(), |s, (&a, &b)| s + a * b);
        out.extend(y.iter().zip(g).map(|(&a, &b)| a * (b - dot)));
    }
    out
}

struct Softmax;
struct SoftmaxGrad;

impl CustomOp1 for Softmax {
    fn name(&self) -> &'static str {
        "fused-softmax"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = last_dim(l);
        unary_fwd!(s, l, self.name(), |x| softmax_rows(x, w))
    }
    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad: &Tensor) -> CResult<Option<Tensor>> {
        let g = res
            .contiguous()?
            .apply_op2_no_bwd(&grad.contiguous()?, &SoftmaxGrad)?;
        Ok(Some(g))
    }
}

impl CustomOp2 for SoftmaxGrad {
    fn name(&self) -> &'static str {
        "fused-softmax-grad"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = last_dim(l1);
        binary_fwd!(s1, l1, s2, l2, self.name(), l1.shape().clone(), |y, g| softmax_grad(y, g, w))
    }
}

/// Softmax over the last dimension.
pub fn softmax_last(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(Softmax)?)
}

/// How a row vector `v` (length = last dim of `x`) combines with every row of `x`.
#[derive(Clone, Copy)]
enum RowOp {
    Add,
    Mul,
}

fn row_apply<T: Float>(xs: &[T], v: &[T], op: RowOp) -> Vec<T> {
    let mut out = Vec::with_capacity(xs.len());
    for row in xs.chunks_exact(v.len()) {
        match op {
            RowOp::Add => out.extend(row.iter().zip(v).map(|(&a, &b)| a + b)),
            RowOp::Mul => out.extend(row.iter().zip(v).map(|(&a, &b)| a * b)),
        }
    }
    out
}

/// Column sums of `xs` viewed as rows of length `width`, optionally of the
/// elementwise product with `weights`.
fn col_sums<T: Float>(xs: &[T], weights: Option<&[T]>, width: usize) -> Vec<T> {
    let mut acc = vec![T::zero(); width];
    match weights {
        None => {
            for row in xs.chunks_exact(width) {
                for (a, &v) in acc.iter_mut().zip(row) {
                    *a = *a + v;
                }
            }
        }
        Some(w) => {
            for (row, wr) in xs.chunks_exact(width).zip(w.chunks_exact(width)) {
                for ((a, &v), &u) in acc.iter_mut().zip(row).zip(wr) {
                    *a = *a + v * u;
                }
            }
        }
    }
    acc
}

struct RowBroadcast(RowOp);
struct ColSum;
struct ColSumProduct;

impl CustomOp2 for RowBroadcast {
    fn name(&self) -> &'static str {
        "fused-row-broadcast"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        if l2.shape().dims() != [last_dim(l1)] {
            candle_core::bail!("row operand {:?} does not match {:?}", l2.shape(), l1.shape());
        }
        let op = self.0;
        binary_fwd!(s1, l1, s2, l2, self.name(), l1.shape().clone(), |x, v| row_apply(x, v, op))
    }
    fn bwd(&self, arg1: &Tensor, arg2: &Tensor, _res: &Tensor, grad: &Tensor) -> CResult<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        match self.0 {
            RowOp::Add => Ok((Some(grad.clone()), Some(grad.apply_op1_no_bwd(&ColSum)?))),
            RowOp::Mul => {
                let gx = grad.apply_op2_no_bwd(arg2, &RowBroadcast(RowOp::Mul))?;
                let gv = grad.apply_op2_no_bwd(&arg1.contiguous()?, &ColSumProduct)?;
                Ok((Some(gx), Some(gv)))
            }
        }
    }
}

impl CustomOp1 for ColSum {
    fn name(&self) -> &'static str {
        "fused-col-sum"
    }
    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = last_dim(l);
        let out = match s {
            CpuStorage::F32(d) => CpuStorage::F32(col_sums(contiguous(d, l, self.name())?, None, w)),
            CpuStorage::F64(d) => CpuStorage::F64(col_sums(contiguous(d, l, self.name())?, None, w)),
            _ => candle_core::bail!("fused-col-sum: only f32 and f64 are supported"),
        };
        Ok((out, Shape::from(w)))
    }
}

impl CustomOp2 for ColSumProduct {
    fn name(&self) -> &'static str {
        "fused-col-sum-product"
    }
    fn cpu_fwd(&self, s1: &CpuStorage, l1: &Layout, s2: &CpuStorage, l2: &Layout) -> CResult<(CpuStorage, Shape)> {
        let w = last_dim(l1);
        binary_fwd!(s1, l1, s2, l2, self.name(), Shape::from(w), |a, b| col_sums(a, Some(b), w))
    }
}

/// `x + v` with `v` broadcast over every leading dimension of `x`.
pub fn add_row(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&v.contiguous()?, RowBroadcast(RowOp::Add))?)
}

/// `x * v` with `v` broadcast over every leading dimension of `x`.
pub fn mul_row(x: &Tensor, v: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op2(&v.contiguous()?, RowBroadcast(RowOp::Mul))?)
}
