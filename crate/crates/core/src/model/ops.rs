//! Row-wise kernels shared by the transformer and the actor.

use crate::scalar::{lit, Scalar};
use crate::tensor::Matrix;

pub(crate) const LN_EPS: f64 = 1e-5;

/// Saved statistics of a layer norm.
#[derive(Clone, Debug)]
pub(crate) struct LnCache<T> {
    pub xhat: Matrix<T>,
    pub rstd: Vec<T>,
}

pub(crate) fn layer_norm<T: Scalar>(
    x: &Matrix<T>,
    gain: &[T],
    bias: &[T],
) -> (Matrix<T>, LnCache<T>) {
    let (n, d) = (x.rows(), x.cols());
    let mut xhat = Matrix::zeros(n, d);
    let mut out = Matrix::zeros(n, d);
    let mut rstd = Vec::with_capacity(n);
    let inv_d = T::one() / T::from_usize_lossy(d);
    let eps = lit::<T>(LN_EPS);
    for r in 0..n {
        let row = x.row(r);
        let mean = row.iter().fold(T::zero(), |a, &v| a + v) * inv_d;
        let var = row
            .iter()
            .fold(T::zero(), |a, &v| a + (v - mean) * (v - mean))
            * inv_d;
        let rs = T::one() / (var + eps).sqrt();
        rstd.push(rs);
        let xh = xhat.row_mut(r);
        for c in 0..d {
            xh[c] = (row[c] - mean) * rs;
        }
        let o = out.row_mut(r);
        for c in 0..d {
            o[c] = xh[c] * gain[c] + bias[c];
        }
    }
    (out, LnCache { xhat, rstd })
}

/// Returns the input gradient; accumulates gain/bias gradients.
pub(crate) fn layer_norm_backward<T: Scalar>(
    cache: &LnCache<T>,
    gain: &[T],
    dout: &Matrix<T>,
    dgain: &mut [T],
    dbias: &mut [T],
) -> Matrix<T> {
    let (n, d) = (dout.rows(), dout.cols());
    let inv_d = T::one() / T::from_usize_lossy(d);
    let mut dx = Matrix::zeros(n, d);
    let mut dxhat = vec![T::zero(); d];
    for r in 0..n {
        let dy = dout.row(r);
        let xh = cache.xhat.row(r);
        let mut mean_dxhat = T::zero();
        let mut mean_dxhat_xhat = T::zero();
        for c in 0..d {
            dgain[c] += dy[c] * xh[c];
            dbias[c] += dy[c];
            dxhat[c] = dy[c] * gain[c];
            mean_dxhat += dxhat[c];
            mean_dxhat_xhat += dxhat[c] * xh[c];
        }
        mean_dxhat *= inv_d;
        mean_dxhat_xhat *= inv_d;
        let rs = cache.rstd[r];
        let o = dx.row_mut(r);
        for c in 0..d {
            o[c] = rs * (dxhat[c] - mean_dxhat - xh[c] * mean_dxhat_xhat);
        }
    }
    dx
}

// tanh approximation
const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// `0.5 (1 + tanh(u))` written as `sigmoid(2u)`, which is cheaper than `tanh`.
fn gelu_gate<T: Scalar>(x: T) -> T {
    let u = lit::<T>(GELU_K) * (x + lit::<T>(GELU_A) * x * x * x);
    T::one() / (T::one() + (-(u + u)).exp())
}

pub(crate) fn gelu<T: Scalar>(x: T) -> T {
    x * gelu_gate(x)
}

pub(crate) fn gelu_grad<T: Scalar>(x: T) -> T {
    let s = gelu_gate(x);
    let du = lit::<T>(GELU_K) * (T::one() + lit::<T>(3.0 * GELU_A) * x * x);
    s + x * lit::<T>(2.0) * s * (T::one() - s) * du
}

/// Sinusoidal encodings of relative distances `0..count`.
pub(crate) fn sinusoid_table<T: Scalar>(count: usize, d: usize) -> Matrix<T> {
    let half = d / 2;
    Matrix::from_fn(count, d, |p, c| {
        let i = if c < half { c } else { c - half };
        let freq = 1.0 / 10000f64.powf(2.0 * i as f64 / d as f64);
        let angle = p as f64 * freq;
        T::from_f64_lossy(if c < half { angle.sin() } else { angle.cos() })
    })
}

/// In-place softmax of a row; returns nothing, row sums to one.
pub(crate) fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row
        .iter()
        .fold(T::neg_infinity(), |m, &v| if v > m { v } else { m });
    let mut sum = T::zero();
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    let inv = T::one() / sum;
    for v in row.iter_mut() {
        *v *= inv;
    }
}

pub(crate) fn add_row_bias<T: Scalar>(m: &mut Matrix<T>, bias: &[T]) {
    for r in 0..m.rows() {
        for (v, b) in m.row_mut(r).iter_mut().zip(bias) {
            *v += *b;
        }
    }
}

pub(crate) fn accumulate_col_sums<T: Scalar>(m: &Matrix<T>, out: &mut [T]) {
    for r in 0..m.rows() {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += *v;
        }
    }
}
