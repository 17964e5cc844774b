//! Deterministic dense kernels and seeded randomness.

mod matrix;
mod ops;
mod rng;

pub use matrix::{dot, Matrix, NEG_INF};
pub use ops::{
    exp, gelu, gelu_grad, gelu_grad_scalar, gelu_scalar, layer_norm, layer_norm_backward, ln, row_softmax, sigmoid,
    sigmoid_scalar, softmax_backward, softmax_in_place, softplus, softplus_scalar, LN_EPS,
};
pub use rng::{splitmix64, Rng};

/// Free-function form of [`Matrix::matmul`].
pub fn matmul(a: &Matrix, b: &Matrix) -> crate::Result<Matrix> {
    a.matmul(b)
}

/// Free-function form of [`Rng::normal_draws`].
pub fn normal_draws(rng: &mut Rng, n: usize) -> Vec<f64> {
    rng.normal_draws(n)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::Error;
    use proptest::prelude::{any, prop_assert, proptest};

    fn naive(a: &Matrix, b: &Matrix) -> Matrix {
        let mut c = Matrix::zeros(a.rows(), b.cols());
        for i in 0..a.rows() {
            for j in 0..b.cols() {
                let mut s = 0.0;
                for k in 0..a.cols() {
                    s += a.get(i, k) * b.get(k, j);
                }
                c.set(i, j, s);
            }
        }
        c
    }

    #[test]
    fn identity_times_a() {
        let a = Matrix::from_rows(&[[1.0, 2.0], [3.0, 4.0]]);
        assert_eq!(matmul(&Matrix::identity(2), &a).unwrap(), a);
    }

    #[test]
    fn one_by_one() {
        let c = matmul(&Matrix::from_rows(&[[2.0]]), &Matrix::from_rows(&[[3.0]])).unwrap();
        assert_eq!(c.data(), &[6.0]);
    }

    #[test]
    fn random_against_triple_loop() {
        let mut rng = Rng::new(7);
        let a = rng.normal_matrix(3, 4, 1.0);
        let b = rng.normal_matrix(4, 2, 1.0);
        let c = matmul(&a, &b).unwrap();
        assert!(c.max_abs_diff(&naive(&a, &b)).unwrap() <= 1e-12);
        assert!(
            a.t_matmul(&c)
                .unwrap()
                .max_abs_diff(&naive(&a.transpose(), &c))
                .unwrap()
                <= 1e-12
        );
        assert!(
            c.matmul_t(&b)
                .unwrap()
                .max_abs_diff(&naive(&c, &b.transpose()))
                .unwrap()
                <= 1e-12
        );
    }

    #[test]
    fn dimension_mismatch() {
        let err = matmul(&Matrix::zeros(2, 3), &Matrix::zeros(2, 3)).unwrap_err();
        assert!(matches!(err, Error::Shape { op: "matmul", .. }));
        assert!(Matrix::from_vec(2, 2, vec![1.0]).is_err());
    }

    #[test]
    fn repeated_runs_are_bit_identical() {
        let run = || {
            let mut rng = Rng::new(11);
            let a = rng.normal_matrix(5, 5, 1.0);
            let s = row_softmax(&a).unwrap();
            gelu(&softplus(&matmul(&s, &a).unwrap()))
        };
        let (x, y) = (run(), run());
        assert!(x.data().iter().zip(y.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
    }

    proptest! {
        #[test]
        fn matmul_is_associative(seed in any::<u64>(), n in 1usize..6, m in 1usize..6, p in 1usize..6, q in 1usize..6) {
            let mut rng = Rng::new(seed);
            let a = rng.normal_matrix(n, m, 1.0);
            let b = rng.normal_matrix(m, p, 1.0);
            let c = rng.normal_matrix(p, q, 1.0);
            let left = a.matmul(&b).unwrap().matmul(&c).unwrap();
            let right = a.matmul(&b.matmul(&c).unwrap()).unwrap();
            let scale = left.max_abs().max(1.0);
            prop_assert!(left.max_abs_diff(&right).unwrap() / scale <= 1e-9);
        }
    }

    #[test]
    fn softmax_rows_sum_to_one_with_sentinels() {
        let mut rng = Rng::new(2024);
        for _ in 0..1000 {
            let n = 1 + rng.below(12);
            let mut row: Vec<f64> = (0..n).map(|_| 10.0 * rng.normal()).collect();
            let keep = rng.below(n);
            for (j, v) in row.iter_mut().enumerate() {
                if j != keep && rng.uniform() < 0.3 {
                    *v = NEG_INF;
                }
            }
            let p = row_softmax(&Matrix::row_vector(&row)).unwrap();
            assert!((p.sum() - 1.0).abs() <= 1e-12);
            for (pv, lv) in p.data().iter().zip(&row) {
                if *lv == NEG_INF {
                    assert_eq!(*pv, 0.0);
                }
            }
        }
    }
}
