//! Elementwise and row-wise kernels.
//!
//! Transcendentals go through `libm` so results do not depend on the host
//! platform's math library.

use super::matrix::Matrix;
use crate::error::{Error, Result};

const SQRT_2: f64 = std::f64::consts::SQRT_2;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

#[inline]
pub fn exp(x: f64) -> f64 {
    libm::exp(x)
}

#[inline]
pub fn ln(x: f64) -> f64 {
    libm::log(x)
}

#[inline]
pub fn softplus_scalar(x: f64) -> f64 {
    if x > 0.0 {
        // x + ln(1 + e^-x): exact for large x where e^-x underflows.
        x + libm::log1p(libm::exp(-x))
    } else {
        libm::log1p(libm::exp(x))
    }
}

#[inline]
pub fn sigmoid_scalar(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + libm::exp(-x))
    } else {
        let e = libm::exp(x);
        e / (1.0 + e)
    }
}

/// Exact (erf-based) GELU.
#[inline]
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / SQRT_2))
}

/// d/dx gelu(x) = Φ(x) + x·φ(x).
#[inline]
pub fn gelu_grad_scalar(x: f64) -> f64 {
    let cdf = 0.5 * (1.0 + libm::erf(x / SQRT_2));
    let pdf = INV_SQRT_2PI * libm::exp(-0.5 * x * x);
    cdf + x * pdf
}

pub fn softplus(a: &Matrix) -> Matrix {
    a.map(softplus_scalar)
}

pub fn sigmoid(a: &Matrix) -> Matrix {
    a.map(sigmoid_scalar)
}

pub fn gelu(a: &Matrix) -> Matrix {
    a.map(gelu_scalar)
}

pub fn gelu_grad(a: &Matrix) -> Matrix {
    a.map(gelu_grad_scalar)
}

/// Softmax of one row in place. `NEG_INF` entries map to exactly zero.
pub fn softmax_in_place(row: &mut [f64]) -> std::result::Result<(), ()> {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return Err(());
    }
    let mut total = 0.0;
    for v in row.iter_mut() {
        *v = if *v == f64::NEG_INFINITY {
            0.0
        } else {
            libm::exp(*v - max)
        };
        total += *v;
    }
    for v in row.iter_mut() {
        *v /= total;
    }
    Ok(())
}

/// Row-wise softmax with max subtraction.
pub fn row_softmax(a: &Matrix) -> Result<Matrix> {
    let mut out = a.clone();
    for i in 0..out.rows() {
        softmax_in_place(out.row_mut(i)).map_err(|()| Error::NoSelectableExpert { row: i })?;
    }
    Ok(out)
}

/// Backward of row softmax: given probabilities `p` and upstream `g`,
/// returns `p ∘ (g − ⟨p, g⟩)` per row.
pub fn softmax_backward(p: &[f64], g: &[f64], out: &mut [f64]) {
    let inner: f64 = p.iter().zip(g).map(|(a, b)| a * b).sum();
    for ((o, &pi), &gi) in out.iter_mut().zip(p).zip(g) {
        *o = pi * (gi - inner);
    }
}

/// Parameter-free layer normalisation over each row.
pub const LN_EPS: f64 = 1e-5;

pub fn layer_norm(a: &Matrix) -> Matrix {
    let mut out = a.clone();
    let n = a.cols() as f64;
    for i in 0..a.rows() {
        let row = out.row_mut(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        for v in row.iter_mut() {
            *v = (*v - mean) * inv;
        }
    }
    out
}

/// Backward of [`layer_norm`] given its input `x` and upstream gradient `g`.
pub fn layer_norm_backward(x: &Matrix, g: &Matrix) -> Matrix {
    let n = x.cols() as f64;
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for i in 0..x.rows() {
        let row = x.row(i);
        let mean = row.iter().sum::<f64>() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / libm::sqrt(var + LN_EPS);
        let xhat: Vec<f64> = row.iter().map(|v| (v - mean) * inv).collect();
        let gi = g.row(i);
        let g_mean = gi.iter().sum::<f64>() / n;
        let gx_mean = gi.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / n;
        for ((o, &gv), &xh) in out.row_mut(i).iter_mut().zip(gi).zip(&xhat) {
            *o = inv * (gv - g_mean - xh * gx_mean);
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::NEG_INF;

    #[test]
    fn softmax_symmetric_and_masked() {
        let p = row_softmax(&Matrix::from_rows(&[[0.0, 0.0]])).unwrap();
        assert_eq!(p.row(0), &[0.5, 0.5]);
        let p = row_softmax(&Matrix::from_rows(&[[1.0, NEG_INF]])).unwrap();
        assert_eq!(p.row(0), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_three_way_reference() {
        // exp(k - 3) / Σ at high precision.
        let p = row_softmax(&Matrix::from_rows(&[[1.0, 2.0, 3.0]])).unwrap();
        let expected = [
            0.090_030_573_170_380_46,
            0.244_728_471_054_797_64,
            0.665_240_955_774_821_9,
        ];
        for (a, b) in p.row(0).iter().zip(expected) {
            assert!((a - b).abs() < 1e-15, "{a} vs {b}");
        }
    }

    #[test]
    fn softmax_all_masked_is_error() {
        let err = row_softmax(&Matrix::from_rows(&[[0.0, 1.0], [NEG_INF, NEG_INF]])).unwrap_err();
        assert!(matches!(err, Error::NoSelectableExpert { row: 1 }));
    }

    #[test]
    fn softplus_values() {
        assert!((softplus_scalar(0.0) - std::f64::consts::LN_2).abs() < 1e-16);
        assert!((softplus_scalar(100.0) - 100.0).abs() < 1e-12);
        assert!(softplus_scalar(-800.0) >= 0.0);
        assert!(softplus_scalar(800.0).is_finite());
    }

    #[test]
    fn gelu_zero_and_grad_fd() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        for &x in &[-2.5, -0.3, 0.0, 0.7, 3.1] {
            let h = 1e-6;
            let fd = (gelu_scalar(x + h) - gelu_scalar(x - h)) / (2.0 * h);
            assert!((fd - gelu_grad_scalar(x)).abs() < 1e-8);
        }
    }

    #[test]
    fn sigmoid_saturates_without_nan() {
        assert_eq!(sigmoid_scalar(0.0), 0.5);
        assert!((sigmoid_scalar(1000.0) - 1.0).abs() < 1e-15);
        assert_eq!(sigmoid_scalar(-1000.0), 0.0);
    }

    #[test]
    fn layer_norm_backward_matches_fd() {
        let x = Matrix::from_rows(&[[0.3, -1.2, 2.0, 0.1], [1.0, 1.5, -0.5, 0.0]]);
        let g = Matrix::from_rows(&[[0.2, 0.1, -0.4, 1.0], [-1.0, 0.3, 0.5, 0.2]]);
        let analytic = layer_norm_backward(&x, &g);
        let h = 1e-6;
        for idx in 0..x.len() {
            let mut xp = x.clone();
            xp.data_mut()[idx] += h;
            let mut xm = x.clone();
            xm.data_mut()[idx] -= h;
            let fp: f64 = layer_norm(&xp).hadamard(&g).unwrap().sum();
            let fm: f64 = layer_norm(&xm).hadamard(&g).unwrap().sum();
            let fd = (fp - fm) / (2.0 * h);
            assert!((fd - analytic.data()[idx]).abs() < 1e-7);
        }
    }
}
