//! Expert, attention and output-combination sub-layers together with their
//! vector-Jacobian products.

use super::config::CombineMode;
use super::params::{AttentionParams, CombineParams, ExpertParams};
use crate::error::{Error, Result};
use crate::numkit::{gelu, gelu_grad_scalar, row_softmax, sigmoid_scalar, softmax_backward, Matrix};

#[derive(Clone, Debug)]
pub struct ExpertCache {
    pub(crate) x: Matrix,
    pub(crate) z: Matrix,
    pub(crate) a: Matrix,
}

/// `gelu(x·W1 + b1)·W2 + b2`
pub fn expert_forward(x: &Matrix, e: &ExpertParams) -> Result<Matrix> {
    Ok(expert_forward_cached(x, e)?.0)
}

pub fn expert_forward_cached(x: &Matrix, e: &ExpertParams) -> Result<(Matrix, ExpertCache)> {
    let z = x.matmul(&e.w1)?.add_row(&e.b1)?;
    let a = gelu(&z);
    let y = a.matmul(&e.w2)?.add_row(&e.b2)?;
    Ok((y, ExpertCache { x: x.clone(), z, a }))
}

/// Accumulates parameter gradients into `g` and returns the input gradient.
pub fn expert_backward(c: &ExpertCache, e: &ExpertParams, dy: &Matrix, g: &mut ExpertParams) -> Result<Matrix> {
    g.w2.add_assign(&c.a.t_matmul(dy)?)?;
    g.b2.add_assign(&dy.col_sums())?;
    let da = dy.matmul_t(&e.w2)?;
    let dz = da.zip_with(&c.z, "gelu backward", |g, z| g * gelu_grad_scalar(z))?;
    g.w1.add_assign(&c.x.t_matmul(&dz)?)?;
    g.b1.add_assign(&dz.col_sums())?;
    dz.matmul_t(&e.w1)
}

#[derive(Clone, Debug)]
pub struct AttentionCache {
    x: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    a: Matrix,
    c: Matrix,
}

/// Single-head scaled dot-product attention `softmax(QKᵀ/√d)·V·W_o`
/// (no residual; the block adds it).
pub fn attention_forward(x: &Matrix, p: &AttentionParams) -> Result<Matrix> {
    Ok(attention_forward_cached(x, p)?.0)
}

pub fn attention_forward_cached(x: &Matrix, p: &AttentionParams) -> Result<(Matrix, AttentionCache)> {
    let q = x.matmul(&p.wq)?;
    let k = x.matmul(&p.wk)?;
    let v = x.matmul(&p.wv)?;
    let scale = 1.0 / (x.cols() as f64).sqrt();
    let a = row_softmax(&q.matmul_t(&k)?.scale(scale))?;
    let c = a.matmul(&v)?;
    let out = c.matmul(&p.wo)?;
    Ok((
        out,
        AttentionCache {
            x: x.clone(),
            q,
            k,
            v,
            a,
            c,
        },
    ))
}

pub fn attention_backward(
    cache: &AttentionCache,
    p: &AttentionParams,
    dout: &Matrix,
    g: &mut AttentionParams,
) -> Result<Matrix> {
    let c = cache;
    let scale = 1.0 / (c.x.cols() as f64).sqrt();
    g.wo.add_assign(&c.c.t_matmul(dout)?)?;
    let dc = dout.matmul_t(&p.wo)?;
    let da = dc.matmul_t(&c.v)?;
    let dv = c.a.t_matmul(&dc)?;
    let mut ds = Matrix::zeros(da.rows(), da.cols());
    for t in 0..da.rows() {
        softmax_backward(c.a.row(t), da.row(t), ds.row_mut(t));
    }
    let ds = ds.scale(scale);
    let dq = ds.matmul(&c.k)?;
    let dk = ds.t_matmul(&c.q)?;
    g.wq.add_assign(&c.x.t_matmul(&dq)?)?;
    g.wk.add_assign(&c.x.t_matmul(&dk)?)?;
    g.wv.add_assign(&c.x.t_matmul(&dv)?)?;
    let mut dx = dq.matmul_t(&p.wq)?;
    dx.add_assign(&dk.matmul_t(&p.wk)?)?;
    dx.add_assign(&dv.matmul_t(&p.wv)?)?;
    Ok(dx)
}

#[derive(Clone, Debug)]
pub struct CombineCache {
    /// `T×1` (CG-1) or `T×2` (CG-2) coefficients.
    pub coef: Option<Matrix>,
}

fn check_same(op: &'static str, a: &Matrix, b: &Matrix) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Mixes the shared-expert and routed outputs.
pub fn combine(se: &Matrix, routed: &Matrix, x: &Matrix, c: &CombineParams) -> Result<Matrix> {
    Ok(combine_cached(se, routed, x, c)?.0)
}

pub fn combine_cached(se: &Matrix, routed: &Matrix, x: &Matrix, c: &CombineParams) -> Result<(Matrix, CombineCache)> {
    check_same("combine", se, routed)?;
    check_same("combine input", se, x)?;
    c.validate(Some(x.cols()))?;
    match (c.mode, &c.w_cg) {
        (CombineMode::DirectAdd, _) => Ok((se.add(routed)?, CombineCache { coef: None })),
        (CombineMode::Cg1, Some(w)) => {
            let coef = x.matmul_t(w)?.map(sigmoid_scalar);
            let mut out = routed.clone();
            for t in 0..out.rows() {
                let k = coef.get(t, 0);
                for (o, s) in out.row_mut(t).iter_mut().zip(se.row(t)) {
                    *o += k * s;
                }
            }
            Ok((out, CombineCache { coef: Some(coef) }))
        }
        (CombineMode::Cg2, Some(w)) => {
            let coef = row_softmax(&x.matmul_t(w)?)?;
            let mut out = Matrix::zeros(se.rows(), se.cols());
            for t in 0..out.rows() {
                let (k0, k1) = (coef.get(t, 0), coef.get(t, 1));
                for ((o, s), r) in out.row_mut(t).iter_mut().zip(se.row(t)).zip(routed.row(t)) {
                    *o = k0 * s + k1 * r;
                }
            }
            Ok((out, CombineCache { coef: Some(coef) }))
        }
        _ => unreachable!("validated above"),
    }
}

pub struct CombineGrads {
    pub d_se: Matrix,
    pub d_routed: Matrix,
    /// Gradient flowing into the coefficient network's input.
    pub dx: Option<Matrix>,
}

pub fn combine_backward(
    cache: &CombineCache,
    se: &Matrix,
    routed: &Matrix,
    x: &Matrix,
    c: &CombineParams,
    dout: &Matrix,
    d_w_cg: Option<&mut Matrix>,
) -> Result<CombineGrads> {
    let (w, coef) = match (c.mode, &c.w_cg, &cache.coef) {
        (CombineMode::DirectAdd, _, _) => {
            return Ok(CombineGrads {
                d_se: dout.clone(),
                d_routed: dout.clone(),
                dx: None,
            })
        }
        (_, Some(w), Some(coef)) => (w, coef),
        _ => return Err(Error::config("combine cache does not match the combine mode")),
    };
    let rows = coef.cols();
    let mut d_logits = Matrix::zeros(x.rows(), rows);
    let mut d_se = Matrix::zeros(se.rows(), se.cols());
    let mut d_routed = dout.clone();
    for t in 0..x.rows() {
        let g = dout.row(t);
        let g_se: f64 = g.iter().zip(se.row(t)).map(|(a, b)| a * b).sum();
        match c.mode {
            CombineMode::Cg1 => {
                let k = coef.get(t, 0);
                for (d, gv) in d_se.row_mut(t).iter_mut().zip(g) {
                    *d = k * gv;
                }
                d_logits.set(t, 0, g_se * k * (1.0 - k));
            }
            _ => {
                let (k0, k1) = (coef.get(t, 0), coef.get(t, 1));
                for ((ds, dr), gv) in d_se.row_mut(t).iter_mut().zip(d_routed.row_mut(t)).zip(g) {
                    *ds = k0 * gv;
                    *dr = k1 * gv;
                }
                let g_r: f64 = g.iter().zip(routed.row(t)).map(|(a, b)| a * b).sum();
                softmax_backward(coef.row(t), &[g_se, g_r], d_logits.row_mut(t));
            }
        }
    }
    if let Some(dw) = d_w_cg {
        dw.add_assign(&d_logits.t_matmul(x)?)?;
    }
    Ok(CombineGrads {
        d_se,
        d_routed,
        dx: Some(d_logits.matmul(w)?),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numkit::{gelu_scalar, Rng};

    #[test]
    fn zero_expert_is_zero() {
        let e = ExpertParams::zeros(3, 5);
        let x = Rng::new(1).normal_matrix(4, 3, 1.0);
        assert!(expert_forward(&x, &e).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn identity_expert_is_gelu() {
        let d = 3;
        let mut e = ExpertParams::zeros(d, d);
        e.w1 = Matrix::identity(d);
        e.w2 = Matrix::identity(d);
        let x = Matrix::from_rows(&[[0.0, 0.5, 2.0], [1.0, 3.0, 0.25]]);
        let y = expert_forward(&x, &e).unwrap();
        assert_eq!(y, x.map(gelu_scalar));
    }

    #[test]
    fn expert_matches_step_by_step() {
        let mut rng = Rng::new(3);
        let e = ExpertParams::random(4, 8, &mut rng, 1.0);
        let x = rng.normal_matrix(2, 4, 1.0);
        let y = expert_forward(&x, &e).unwrap();
        for t in 0..2 {
            let mut hidden = [0.0; 8];
            for (j, hv) in hidden.iter_mut().enumerate() {
                let mut s = e.b1.get(0, j);
                for i in 0..4 {
                    s += x.get(t, i) * e.w1.get(i, j);
                }
                *hv = 0.5 * s * (1.0 + libm::erf(s / std::f64::consts::SQRT_2));
            }
            for o in 0..4 {
                let mut s = e.b2.get(0, o);
                for (j, hv) in hidden.iter().enumerate() {
                    s += hv * e.w2.get(j, o);
                }
                assert!((s - y.get(t, o)).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn expert_shape_error() {
        let e = ExpertParams::zeros(3, 5);
        assert!(expert_forward(&Matrix::zeros(2, 4), &e).is_err());
    }

    #[test]
    fn direct_add_and_zero_gates() {
        let se = Matrix::from_rows(&[[1.0]]);
        let r = Matrix::from_rows(&[[2.0]]);
        let x = Matrix::from_rows(&[[0.3]]);
        assert_eq!(combine(&se, &r, &x, &CombineParams::direct()).unwrap().data(), &[3.0]);

        let mut rng = Rng::new(4);
        let se = rng.normal_matrix(3, 2, 1.0);
        let r = rng.normal_matrix(3, 2, 1.0);
        let x = rng.normal_matrix(3, 2, 1.0);
        let cg1 = CombineParams::new(CombineMode::Cg1, Some(Matrix::zeros(1, 2))).unwrap();
        let want = se.scale(0.5).add(&r).unwrap();
        assert!(combine(&se, &r, &x, &cg1).unwrap().max_abs_diff(&want).unwrap() < 1e-15);
        let cg2 = CombineParams::new(CombineMode::Cg2, Some(Matrix::zeros(2, 2))).unwrap();
        let want = se.scale(0.5).add(&r.scale(0.5)).unwrap();
        assert!(combine(&se, &r, &x, &cg2).unwrap().max_abs_diff(&want).unwrap() < 1e-15);
    }

    #[test]
    fn cg1_saturates_to_direct_add() {
        let x = Matrix::from_rows(&[[1.0, 2.0]]);
        let se = Matrix::from_rows(&[[0.7, -0.2]]);
        let r = Matrix::from_rows(&[[0.1, 0.4]]);
        let cg1 = CombineParams::new(CombineMode::Cg1, Some(Matrix::from_rows(&[[100.0, 200.0]]))).unwrap();
        let out = combine(&se, &r, &x, &cg1).unwrap();
        assert!(out.max_abs_diff(&se.add(&r).unwrap()).unwrap() < 1e-12);
    }

    #[test]
    fn cg2_matches_hand_oracle() {
        let mut rng = Rng::new(8);
        let (se, r, x) = (
            rng.normal_matrix(4, 3, 1.0),
            rng.normal_matrix(4, 3, 1.0),
            rng.normal_matrix(4, 3, 1.0),
        );
        let w = rng.normal_matrix(2, 3, 1.0);
        let c = CombineParams::new(CombineMode::Cg2, Some(w.clone())).unwrap();
        let (out, cache) = combine_cached(&se, &r, &x, &c).unwrap();
        let coef = cache.coef.unwrap();
        for t in 0..4 {
            assert!((coef.get(t, 0) + coef.get(t, 1) - 1.0).abs() < 1e-15);
            let l0: f64 = (0..3).map(|i| x.get(t, i) * w.get(0, i)).sum();
            let l1: f64 = (0..3).map(|i| x.get(t, i) * w.get(1, i)).sum();
            let k0 = 1.0 / (1.0 + (l1 - l0).exp());
            for j in 0..3 {
                let want = k0 * se.get(t, j) + (1.0 - k0) * r.get(t, j);
                assert!((out.get(t, j) - want).abs() < 1e-12);
            }
        }
        let bad = CombineParams {
            mode: CombineMode::Cg2,
            w_cg: Some(Matrix::zeros(2, 5)),
        };
        assert!(combine(&se, &r, &x, &bad).is_err());
    }

    fn fd_check(f: &dyn Fn(&Matrix) -> f64, x: &Matrix, analytic: &Matrix) {
        let h = 1e-6;
        for i in 0..x.len() {
            let mut p = x.clone();
            p.data_mut()[i] += h;
            let mut m = x.clone();
            m.data_mut()[i] -= h;
            let fd = (f(&p) - f(&m)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!((fd - a).abs() <= 1e-6 * (1.0 + a.abs()), "entry {i}: fd {fd} vs {a}");
        }
    }

    #[test]
    fn expert_and_attention_vjp_match_fd() {
        let mut rng = Rng::new(21);
        let e = ExpertParams::random(3, 5, &mut rng, 1.0);
        let a = AttentionParams::random(3, &mut rng, 1.0);
        let x = rng.normal_matrix(4, 3, 1.0);
        let dy = rng.normal_matrix(4, 3, 1.0);

        let (_, cache) = expert_forward_cached(&x, &e).unwrap();
        let mut g = ExpertParams::zeros(3, 5);
        let dx = expert_backward(&cache, &e, &dy, &mut g).unwrap();
        fd_check(
            &|x| expert_forward(x, &e).unwrap().hadamard(&dy).unwrap().sum(),
            &x,
            &dx,
        );
        fd_check(
            &|w| {
                let mut e2 = e.clone();
                e2.w1 = w.clone();
                expert_forward(&x, &e2).unwrap().hadamard(&dy).unwrap().sum()
            },
            &e.w1,
            &g.w1,
        );

        let (_, cache) = attention_forward_cached(&x, &a).unwrap();
        let mut g = AttentionParams::zeros(3);
        let dx = attention_backward(&cache, &a, &dy, &mut g).unwrap();
        fd_check(
            &|x| attention_forward(x, &a).unwrap().hadamard(&dy).unwrap().sum(),
            &x,
            &dx,
        );
        fd_check(
            &|w| {
                let mut a2 = a.clone();
                a2.wk = w.clone();
                attention_forward(&x, &a2).unwrap().hadamard(&dy).unwrap().sum()
            },
            &a.wk,
            &g.wk,
        );
    }

    #[test]
    fn combine_vjp_matches_fd() {
        let mut rng = Rng::new(33);
        let (se, r, x) = (
            rng.normal_matrix(3, 4, 1.0),
            rng.normal_matrix(3, 4, 1.0),
            rng.normal_matrix(3, 4, 1.0),
        );
        let dy = rng.normal_matrix(3, 4, 1.0);
        for mode in [CombineMode::Cg1, CombineMode::Cg2] {
            let w = rng.normal_matrix(mode.cg_rows().unwrap(), 4, 1.0);
            let c = CombineParams::new(mode, Some(w.clone())).unwrap();
            let (_, cache) = combine_cached(&se, &r, &x, &c).unwrap();
            let mut dw = Matrix::zeros(w.rows(), 4);
            let g = combine_backward(&cache, &se, &r, &x, &c, &dy, Some(&mut dw)).unwrap();
            let f = |se: &Matrix, r: &Matrix, x: &Matrix, c: &CombineParams| {
                combine(se, r, x, c).unwrap().hadamard(&dy).unwrap().sum()
            };
            fd_check(&|m| f(m, &r, &x, &c), &se, &g.d_se);
            fd_check(&|m| f(&se, m, &x, &c), &r, &g.d_routed);
            fd_check(&|m| f(&se, &r, m, &c), &x, g.dx.as_ref().unwrap());
            fd_check(
                &|m| f(&se, &r, &x, &CombineParams::new(mode, Some(m.clone())).unwrap()),
                &w,
                &dw,
            );
        }
    }
}
