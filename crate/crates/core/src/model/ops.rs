//! Dense building blocks with hand-written backward passes.

use ndarray::{s, Array1, Array2, ArrayView2, Axis};

use super::{LayerNormParams, Linear};

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2 / pi)
const GELU_A: f64 = 0.044_715;

/// Tanh-approximated GELU.
#[inline]
pub fn gelu(x: f64) -> f64 {
    // 0.5 * x * (1 + tanh(u)) == x * sigmoid(2u); exp is cheaper than tanh.
    x / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp())
}

#[inline]
pub(crate) fn gelu_grad(x: f64) -> f64 {
    let t = 2.0 / (1.0 + (-2.0 * GELU_C * (x + GELU_A * x * x * x)).exp()) - 1.0;
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
}

pub(crate) fn linear_forward(x: ArrayView2<f64>, lin: &Linear) -> Array2<f64> {
    let mut y = x.dot(&lin.w);
    y += &lin.b;
    y
}

/// Accumulates parameter gradients and returns the input gradient.
pub(crate) fn linear_backward(
    x: ArrayView2<f64>,
    dy: ArrayView2<f64>,
    lin: &Linear,
    grad: &mut Linear,
) -> Array2<f64> {
    grad.w += &x.t().dot(&dy);
    grad.b += &dy.sum_axis(Axis(0));
    dy.dot(&lin.w.t())
}

/// Same as [`linear_backward`] without the input gradient.
pub(crate) fn linear_backward_params(x: ArrayView2<f64>, dy: ArrayView2<f64>, grad: &mut Linear) {
    grad.w += &x.t().dot(&dy);
    grad.b += &dy.sum_axis(Axis(0));
}

pub(crate) struct LnCache {
    pub xhat: Array2<f64>,
    pub inv_std: Array1<f64>,
}

/// Row-wise layer normalization without the affine part.
pub fn layer_norm_rows(x: ArrayView2<f64>, eps: f64) -> (Array2<f64>, Array1<f64>) {
    let d = x.ncols() as f64;
    let mut xhat = x.to_owned();
    let mut inv_std = Array1::zeros(x.nrows());
    for (mut row, is) in xhat.rows_mut().into_iter().zip(inv_std.iter_mut()) {
        let mean = row.sum() / d;
        row.mapv_inplace(|v| v - mean);
        let var = row.iter().map(|v| v * v).sum::<f64>() / d;
        *is = 1.0 / (var + eps).sqrt();
        let s = *is;
        row.mapv_inplace(|v| v * s);
    }
    (xhat, inv_std)
}

pub(crate) fn layer_norm_forward(
    x: ArrayView2<f64>,
    p: &LayerNormParams,
    eps: f64,
) -> (Array2<f64>, LnCache) {
    let (xhat, inv_std) = layer_norm_rows(x, eps);
    let mut y = &xhat * &p.gamma;
    y += &p.beta;
    (y, LnCache { xhat, inv_std })
}

pub(crate) fn layer_norm_backward(
    dy: ArrayView2<f64>,
    cache: &LnCache,
    p: &LayerNormParams,
    grad: &mut LayerNormParams,
) -> Array2<f64> {
    grad.gamma += &(&dy * &cache.xhat).sum_axis(Axis(0));
    grad.beta += &dy.sum_axis(Axis(0));
    let d = dy.ncols() as f64;
    let mut dx = &dy * &p.gamma;
    for ((mut row, xh), is) in dx
        .rows_mut()
        .into_iter()
        .zip(cache.xhat.rows())
        .zip(cache.inv_std.iter())
    {
        let m1 = row.sum() / d;
        let m2 = row.iter().zip(xh.iter()).map(|(a, b)| a * b).sum::<f64>() / d;
        for (v, x) in row.iter_mut().zip(xh.iter()) {
            *v = (*v - m1 - x * m2) * is;
        }
    }
    dx
}

/// Same-padded 1-D patches: rows are `(token, position)`, columns `(tap, channel)`.
pub(crate) fn im2col(x: ArrayView2<f64>, len: usize, kernel: usize) -> Array2<f64> {
    let rows = x.nrows();
    let c_in = x.ncols();
    let half = kernel / 2;
    let mut col = Array2::zeros((rows, kernel * c_in));
    for base in (0..rows).step_by(len) {
        for p in 0..len {
            let mut out = col.row_mut(base + p);
            for j in 0..kernel {
                let src = p as isize + j as isize - half as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                out.slice_mut(s![j * c_in..(j + 1) * c_in])
                    .assign(&x.row(base + src as usize));
            }
        }
    }
    col
}

/// Adjoint of [`im2col`].
pub(crate) fn col2im(dcol: ArrayView2<f64>, len: usize, kernel: usize, c_in: usize) -> Array2<f64> {
    let rows = dcol.nrows();
    let half = kernel / 2;
    let mut dx = Array2::zeros((rows, c_in));
    for base in (0..rows).step_by(len) {
        for p in 0..len {
            let grad = dcol.row(base + p);
            for j in 0..kernel {
                let src = p as isize + j as isize - half as isize;
                if src < 0 || src >= len as isize {
                    continue;
                }
                let mut dst = dx.row_mut(base + src as usize);
                dst += &grad.slice(s![j * c_in..(j + 1) * c_in]);
            }
        }
    }
    dx
}

/// Numerically stable in-place row softmax.
pub(crate) fn softmax_rows(x: &mut Array2<f64>) {
    for mut row in x.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.mapv_inplace(|v| v / sum);
    }
}
