//! Dense row-major tensors plus the small set of forward/backward kernels the
//! rest of the engine is built on.
//!
//! Inference runs in `f32`; every kernel is generic over [`Scalar`] so the
//! gradient checks can instantiate the exact same code in `f64`, where central
//! finite differences are meaningful. There are no strided views and no
//! broadcast rules: a tensor is a shape and a flat buffer, and every kernel
//! states the shapes it accepts.

use std::fmt;
use std::ops::{Add, AddAssign, Div, Mul, MulAssign, Neg, Sub, SubAssign};

use thiserror::Error;

/// Element type for tensors. Implemented for `f32` and `f64` only.
pub trait Scalar:
    Copy
    + PartialEq
    + PartialOrd
    + fmt::Debug
    + fmt::Display
    + Default
    + Send
    + Sync
    + 'static
    + Add<Output = Self>
    + Sub<Output = Self>
    + Mul<Output = Self>
    + Div<Output = Self>
    + Neg<Output = Self>
    + AddAssign
    + SubAssign
    + MulAssign
{
    const ZERO: Self;
    const ONE: Self;

    fn from_f64(v: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
    fn abs(self) -> Self;
    fn is_finite(self) -> bool;
    fn maximum(self, other: Self) -> Self;
}

macro_rules! impl_scalar {
    ($t:ty) => {
        impl Scalar for $t {
            const ZERO: Self = 0.0;
            const ONE: Self = 1.0;

            #[inline]
            fn from_f64(v: f64) -> Self {
                v as $t
            }
            #[inline]
            fn to_f64(self) -> f64 {
                self as f64
            }
            #[inline]
            fn exp(self) -> Self {
                self.exp()
            }
            #[inline]
            fn ln(self) -> Self {
                self.ln()
            }
            #[inline]
            fn sqrt(self) -> Self {
                self.sqrt()
            }
            #[inline]
            fn sin(self) -> Self {
                self.sin()
            }
            #[inline]
            fn cos(self) -> Self {
                self.cos()
            }
            #[inline]
            fn abs(self) -> Self {
                self.abs()
            }
            #[inline]
            fn is_finite(self) -> bool {
                <$t>::is_finite(self)
            }
            #[inline]
            fn maximum(self, other: Self) -> Self {
                if other > self {
                    other
                } else {
                    self
                }
            }
        }
    };
}

impl_scalar!(f32);
impl_scalar!(f64);

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: expected {expected}, got {got}")]
    ShapeMismatch {
        op: &'static str,
        expected: String,
        got: String,
    },
    #[error("data length {got} does not match shape {shape:?} (needs {expected})")]
    DataLength {
        shape: Vec<usize>,
        expected: usize,
        got: usize,
    },
    #[error("{op} requires a non-empty input")]
    Empty { op: &'static str },
    #[error("rope requires an even head dimension, got {d_head}")]
    OddHeadDim { d_head: usize },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
}

/// Row-major dense tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T = f32> {
    shape: Vec<usize>,
    data: Vec<T>,
}

impl<T: Scalar> Tensor<T> {
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![T::ZERO; n],
        }
    }

    pub fn from_vec(shape: &[usize], data: Vec<T>) -> Result<Self, TensorError> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(TensorError::DataLength {
                shape: shape.to_vec(),
                expected,
                got: data.len(),
            });
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
        })
    }

    pub fn filled(shape: &[usize], value: T) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
        }
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn rank(&self) -> usize {
        self.shape.len()
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<T> {
        self.data
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self) -> Result<(usize, usize), TensorError> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(TensorError::ShapeMismatch {
                op: "dims2",
                expected: "rank-2".into(),
                got: format!("{other:?}"),
            }),
        }
    }

    /// Row `i` of a rank-2 tensor.
    pub fn row(&self, i: usize) -> &[T] {
        let cols = self.shape[self.shape.len() - 1];
        &self.data[i * cols..(i + 1) * cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [T] {
        let cols = self.shape[self.shape.len() - 1];
        &mut self.data[i * cols..(i + 1) * cols]
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Convert element type, used by the f64 gradient-check harness.
    pub fn cast<U: Scalar>(&self) -> Tensor<U> {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|v| U::from_f64(v.to_f64())).collect(),
        }
    }
}

/// A value tensor paired with a same-shape gradient accumulator.
#[derive(Debug, Clone)]
pub struct GradPair<T = f32> {
    pub value: Tensor<T>,
    pub grad: Tensor<T>,
}

impl<T: Scalar> GradPair<T> {
    pub fn new(value: Tensor<T>) -> Self {
        let grad = Tensor::zeros(value.shape());
        GradPair { value, grad }
    }

    pub fn zero_grad(&mut self) {
        for g in self.grad.data_mut() {
            *g = T::ZERO;
        }
    }
}

// ---------------------------------------------------------------------------
// low-level slice kernels (hot path; the model calls these directly)
// ---------------------------------------------------------------------------

/// out[m x n] = a[m x k] . b[k x n]
pub fn mm<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    for row in out.iter_mut() {
        *row = T::ZERO;
    }
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::ZERO {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[m x n] += a[m x k] . b[k x n]
pub fn mm_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let out_row = &mut out[i * n..(i + 1) * n];
        let a_row = &a[i * k..(i + 1) * k];
        for (l, &a_il) in a_row.iter().enumerate() {
            if a_il == T::ZERO {
                continue;
            }
            let b_row = &b[l * n..(l + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_il * bv;
            }
        }
    }
}

/// out[m x n] = a[m x k] . b^T, where b is stored [n x k]
pub fn mm_nt<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (j, o) in out_row.iter_mut().enumerate() {
            let b_row = &b[j * k..(j + 1) * k];
            let mut acc = T::ZERO;
            for (&av, &bv) in a_row.iter().zip(b_row.iter()) {
                acc += av * bv;
            }
            *o = acc;
        }
    }
}

/// out[m x n] += a^T . b, where a is stored [k x m] and b is [k x n]
pub fn mm_tn_acc<T: Scalar>(out: &mut [T], a: &[T], b: &[T], m: usize, k: usize, n: usize) {
    debug_assert_eq!(out.len(), m * n);
    debug_assert_eq!(a.len(), k * m);
    debug_assert_eq!(b.len(), k * n);
    for l in 0..k {
        let a_row = &a[l * m..(l + 1) * m];
        let b_row = &b[l * n..(l + 1) * n];
        for (i, &a_li) in a_row.iter().enumerate() {
            if a_li == T::ZERO {
                continue;
            }
            let out_row = &mut out[i * n..(i + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row.iter()) {
                *o += a_li * bv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// tensor-level kernels
// ---------------------------------------------------------------------------

/// Standard matrix product of two rank-2 tensors.
pub fn matmul<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    let (m, ka) = a.dims2()?;
    let (kb, n) = b.dims2()?;
    if ka != kb {
        return Err(TensorError::ShapeMismatch {
            op: "matmul",
            expected: format!("inner dims to agree ({m}x{ka})"),
            got: format!("{kb}x{n}"),
        });
    }
    let mut out = Tensor::zeros(&[m, n]);
    mm(out.data_mut(), a.data(), b.data(), m, ka, n);
    Ok(out)
}

/// Gradients of `c = a . b` with respect to both inputs.
///
/// `d_a = d_c . b^T` and `d_b = a^T . d_c`.
pub fn matmul_backward<T: Scalar>(
    a: &Tensor<T>,
    b: &Tensor<T>,
    d_c: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    let (m, k) = a.dims2()?;
    let (_, n) = b.dims2()?;
    let (dm, dn) = d_c.dims2()?;
    if dm != m || dn != n {
        return Err(TensorError::ShapeMismatch {
            op: "matmul_backward",
            expected: format!("{m}x{n}"),
            got: format!("{dm}x{dn}"),
        });
    }
    let mut d_a = Tensor::zeros(&[m, k]);
    let mut d_b = Tensor::zeros(&[k, n]);
    mm_nt(d_a.data_mut(), d_c.data(), b.data(), m, n, k);
    mm_tn_acc(d_b.data_mut(), a.data(), d_c.data(), k, m, n);
    Ok((d_a, d_b))
}

/// Numerically stable softmax over a rank-1 tensor (max subtraction).
pub fn softmax_row<T: Scalar>(x: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if x.is_empty() {
        return Err(TensorError::Empty { op: "softmax_row" });
    }
    let mut out = x.clone();
    softmax_slice(out.data_mut());
    Ok(out)
}

/// In-place stable softmax over a slice. The slice must be non-empty.
pub fn softmax_slice<T: Scalar>(row: &mut [T]) {
    let mut max = row[0];
    for &v in row.iter() {
        max = max.maximum(v);
    }
    let mut sum = T::ZERO;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in row.iter_mut() {
        *v = *v / sum;
    }
}

/// Gradient of softmax given its output `y` and upstream gradient `d_y`:
/// `d_x = y * (d_y - sum(d_y * y))`.
pub fn softmax_backward<T: Scalar>(y: &Tensor<T>, d_y: &Tensor<T>) -> Result<Tensor<T>, TensorError> {
    if y.shape() != d_y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "softmax_backward",
            expected: format!("{:?}", y.shape()),
            got: format!("{:?}", d_y.shape()),
        });
    }
    let mut out = Tensor::zeros(y.shape());
    softmax_backward_slice(out.data_mut(), y.data(), d_y.data());
    Ok(out)
}

pub fn softmax_backward_slice<T: Scalar>(d_x: &mut [T], y: &[T], d_y: &[T]) {
    let mut dot = T::ZERO;
    for (&yv, &gv) in y.iter().zip(d_y.iter()) {
        dot += yv * gv;
    }
    for ((o, &yv), &gv) in d_x.iter_mut().zip(y.iter()).zip(d_y.iter()) {
        *o = yv * (gv - dot);
    }
}

/// RMS normalization: `y_i = gain_i * x_i / sqrt(mean(x^2) + eps)`.
pub fn rms_norm<T: Scalar>(x: &Tensor<T>, gain: &Tensor<T>, eps: f64) -> Result<Tensor<T>, TensorError> {
    if x.shape() != gain.shape() || x.rank() != 1 {
        return Err(TensorError::ShapeMismatch {
            op: "rms_norm",
            expected: format!("rank-1, gain shape {:?}", x.shape()),
            got: format!("{:?}", gain.shape()),
        });
    }
    let mut out = Tensor::zeros(x.shape());
    rms_norm_slice(out.data_mut(), x.data(), gain.data(), eps);
    Ok(out)
}

pub fn rms_norm_slice<T: Scalar>(out: &mut [T], x: &[T], gain: &[T], eps: f64) {
    let inv = rms_inv(x, eps);
    for ((o, &xv), &gv) in out.iter_mut().zip(x.iter()).zip(gain.iter()) {
        *o = gv * xv * inv;
    }
}

#[inline]
fn rms_inv<T: Scalar>(x: &[T], eps: f64) -> T {
    let mut ms = T::ZERO;
    for &v in x.iter() {
        ms += v * v;
    }
    ms = ms / T::from_f64(x.len() as f64) + T::from_f64(eps);
    T::ONE / ms.sqrt()
}

/// Gradient of rms_norm with respect to `x` and `gain`.
pub fn rms_norm_backward<T: Scalar>(
    x: &Tensor<T>,
    gain: &Tensor<T>,
    eps: f64,
    d_y: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>), TensorError> {
    if x.shape() != d_y.shape() {
        return Err(TensorError::ShapeMismatch {
            op: "rms_norm_backward",
            expected: format!("{:?}", x.shape()),
            got: format!("{:?}", d_y.shape()),
        });
    }
    let mut d_x = Tensor::zeros(x.shape());
    let mut d_gain = Tensor::zeros(x.shape());
    rms_norm_backward_slice(
        d_x.data_mut(),
        Some(d_gain.data_mut()),
        x.data(),
        gain.data(),
        eps,
        d_y.data(),
    );
    Ok((d_x, d_gain))
}

/// Slice form of the rms_norm backward. `d_gain` is optional because the
/// backbone gains are frozen during adapter training.
pub fn rms_norm_backward_slice<T: Scalar>(
    d_x: &mut [T],
    d_gain: Option<&mut [T]>,
    x: &[T],
    gain: &[T],
    eps: f64,
    d_y: &[T],
) {
    let n = x.len();
    let inv = rms_inv(x, eps);
    // s = sum_i d_y_i * gain_i * x_i
    let mut s = T::ZERO;
    for i in 0..n {
        s += d_y[i] * gain[i] * x[i];
    }
    let inv3_over_n = inv * inv * inv / T::from_f64(n as f64);
    for i in 0..n {
        d_x[i] = d_y[i] * gain[i] * inv - x[i] * inv3_over_n * s;
    }
    if let Some(dg) = d_gain {
        for i in 0..n {
            dg[i] += d_y[i] * x[i] * inv;
        }
    }
}

/// SiLU activation `x * sigmoid(x)`.
#[inline]
pub fn silu<T: Scalar>(x: T) -> T {
    x / (T::ONE + (-x).exp())
}

/// Derivative of SiLU: `sigmoid(x) * (1 + x * (1 - sigmoid(x)))`.
#[inline]
pub fn silu_backward<T: Scalar>(x: T) -> T {
    let sig = T::ONE / (T::ONE + (-x).exp());
    sig * (T::ONE + x * (T::ONE - sig))
}

// ---------------------------------------------------------------------------
// rotary position embedding
// ---------------------------------------------------------------------------

/// Rotation angle for position `pos` and pair index `pair` within a head of
/// width `d_head`. Computed in f64 so both precisions see the same angles.
#[inline]
pub fn rope_angle(pos: usize, pair: usize, d_head: usize, theta_base: f64) -> f64 {
    let exponent = -2.0 * pair as f64 / d_head as f64;
    pos as f64 * theta_base.powf(exponent)
}

/// Apply rotary position embedding to a `[heads, len, d_head]` tensor.
///
/// Each consecutive component pair `(2i, 2i+1)` is rotated by an angle that
/// depends on the sequence position and the pair index. Position 0 is left
/// unchanged.
pub fn rope_apply<T: Scalar>(x: &Tensor<T>, theta_base: f64) -> Result<Tensor<T>, TensorError> {
    rope_impl(x, theta_base, false)
}

/// Backward of [`rope_apply`]: rotations are orthogonal, so the gradient is
/// the same rotation applied with negated angles.
pub fn rope_backward<T: Scalar>(d_y: &Tensor<T>, theta_base: f64) -> Result<Tensor<T>, TensorError> {
    rope_impl(d_y, theta_base, true)
}

fn rope_impl<T: Scalar>(x: &Tensor<T>, theta_base: f64, inverse: bool) -> Result<Tensor<T>, TensorError> {
    let (heads, len, d_head) = match x.shape() {
        [h, l, d] => (*h, *l, *d),
        other => {
            return Err(TensorError::ShapeMismatch {
                op: "rope_apply",
                expected: "rank-3 [heads, len, d_head]".into(),
                got: format!("{other:?}"),
            })
        }
    };
    if d_head % 2 != 0 {
        return Err(TensorError::OddHeadDim { d_head });
    }
    let mut out = x.clone();
    let data = out.data_mut();
    for h in 0..heads {
        for pos in 0..len {
            let base = (h * len + pos) * d_head;
            rope_rotate_row(&mut data[base..base + d_head], pos, theta_base, inverse);
        }
    }
    Ok(out)
}

/// Rotate one row of `d_head` components in place for sequence position `pos`.
#[inline]
pub fn rope_rotate_row<T: Scalar>(row: &mut [T], pos: usize, theta_base: f64, inverse: bool) {
    let d_head = row.len();
    for pair in 0..d_head / 2 {
        let mut angle = rope_angle(pos, pair, d_head, theta_base);
        if inverse {
            angle = -angle;
        }
        let (sin, cos) = (T::from_f64(angle.sin()), T::from_f64(angle.cos()));
        let a = row[2 * pair];
        let b = row[2 * pair + 1];
        row[2 * pair] = a * cos - b * sin;
        row[2 * pair + 1] = a * sin + b * cos;
    }
}
