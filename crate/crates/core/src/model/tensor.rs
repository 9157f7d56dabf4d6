//! Minimal dense tensors and the matmul kernels the transformer needs.
//! Everything is row-major and single-threaded; loops are written so the
//! inner dimension is contiguous and autovectorizes.

use num_traits::Float;
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Scalar type for model math. f32 for training speed, f64 for the
/// finite-difference oracles.
pub trait Real:
    Float + num_traits::NumAssignOps + std::fmt::Debug + Default + Send + Sync + 'static
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    const BYTES: usize;
}

impl Real for f32 {
    fn from_f64(x: f64) -> Self {
        x as f32
    }
    fn to_f64(self) -> f64 {
        self as f64
    }
    const BYTES: usize = 4;
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }
    fn to_f64(self) -> f64 {
        self
    }
    const BYTES: usize = 8;
}

/// Which entries of a tensor the optimizer may update.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Trainability {
    All,
    Frozen,
    /// Only rows with index >= the given row are trainable (extended
    /// embedding rows under the adapter regime).
    RowsFrom(usize),
}

#[derive(Debug, Clone, PartialEq)]
pub struct Tensor<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
    pub trainable: Trainability,
}

impl<T: Real> Tensor<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Tensor {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
            trainable: Trainability::All,
        }
    }

    pub fn randn(rows: usize, cols: usize, std: f64, rng: &mut impl Rng) -> Self {
        let data = (0..rows * cols)
            .map(|_| T::from_f64(gauss(rng) * std))
            .collect();
        Tensor {
            rows,
            cols,
            data,
            trainable: Trainability::All,
        }
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn trainable_count(&self) -> usize {
        match self.trainable {
            Trainability::All => self.numel(),
            Trainability::Frozen => 0,
            Trainability::RowsFrom(k) => self.numel().saturating_sub(k * self.cols),
        }
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

/// Standard normal sample (Box-Muller); draws two uniforms per call so the
/// stream is identical regardless of the scalar type.
pub fn gauss(rng: &mut impl Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos()
}

/// C[m x n] = A[m x k] * B[n x k]^T (dot-product form; weights stored
/// [out, in]).
pub fn matmul_nt<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (j, cj) in cr.iter_mut().enumerate() {
            *cj = dot(ar, &b[j * k..(j + 1) * k]);
        }
    }
}

/// C[m x n] += A[m x k] * B[k x n] (axpy form).
pub fn matmul_nn_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(c.len(), m * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let cr = &mut c[i * n..(i + 1) * n];
        for (kk, &aik) in ar.iter().enumerate() {
            let br = &b[kk * n..(kk + 1) * n];
            axpy(aik, br, cr);
        }
    }
}

/// C[k x n] += A[m x k]^T * B[m x n] (weight-gradient form).
pub fn matmul_tn_acc<T: Real>(a: &[T], b: &[T], m: usize, k: usize, n: usize, c: &mut [T]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), m * n);
    debug_assert_eq!(c.len(), k * n);
    for i in 0..m {
        let ar = &a[i * k..(i + 1) * k];
        let br = &b[i * n..(i + 1) * n];
        for (kk, &aik) in ar.iter().enumerate() {
            axpy(aik, br, &mut c[kk * n..(kk + 1) * n]);
        }
    }
}

#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    debug_assert_eq!(a.len(), b.len());
    // lane-wise independent accumulators so the loop vectorizes
    const LANES: usize = 16;
    let mut acc = [T::zero(); LANES];
    let mut ac = a.chunks_exact(LANES);
    let mut bc = b.chunks_exact(LANES);
    for (ca, cb) in (&mut ac).zip(&mut bc) {
        for i in 0..LANES {
            acc[i] += ca[i] * cb[i];
        }
    }
    let mut s = T::zero();
    for i in 0..LANES {
        s += acc[i];
    }
    for (&x, &y) in ac.remainder().iter().zip(bc.remainder()) {
        s += x * y;
    }
    s
}

#[inline]
pub fn axpy<T: Real>(alpha: T, x: &[T], y: &mut [T]) {
    debug_assert_eq!(x.len(), y.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// In-place numerically stable softmax over a slice.
pub fn softmax_inplace<T: Real>(x: &mut [T]) {
    let mut m = T::neg_infinity();
    for &v in x.iter() {
        if v > m {
            m = v;
        }
    }
    let mut s = T::zero();
    for v in x.iter_mut() {
        *v = (*v - m).exp();
        s += *v;
    }
    for v in x.iter_mut() {
        *v /= s;
    }
}

const RMS_EPS: f64 = 1e-5;

/// y = x / rms(x); returns the reciprocal rms for the backward pass.
pub fn rmsnorm<T: Real>(x: &[T], y: &mut [T]) -> T {
    let n = T::from_f64(x.len() as f64);
    let ms = dot(x, x) / n;
    let ri = (ms + T::from_f64(RMS_EPS)).sqrt().recip();
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi = xi * ri;
    }
    ri
}

/// dx for y = x * ri, ri = (mean(x^2)+eps)^-1/2.
pub fn rmsnorm_backward<T: Real>(dy: &[T], x: &[T], ri: T, dx: &mut [T]) {
    let n = T::from_f64(x.len() as f64);
    let d = dot(dy, x);
    let c = ri * ri * ri / n;
    for ((dxi, &dyi), &xi) in dx.iter_mut().zip(dy).zip(x) {
        *dxi += ri * dyi - c * d * xi;
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044715;

pub fn gelu<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

pub fn gelu_derivative<T: Real>(x: T) -> T {
    let c = T::from_f64(GELU_C);
    let a = T::from_f64(GELU_A);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let inner = c * (x + a * x * x * x);
    let t = inner.tanh();
    let sech2 = T::one() - t * t;
    half * (T::one() + t) + half * x * sech2 * c * (T::one() + three * a * x * x)
}
