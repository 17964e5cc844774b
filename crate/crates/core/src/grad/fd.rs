//! Central finite differences and analytic-vs-numeric comparison.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::backward::{backward, replayed_loss, GradientSet, LossSpec};
use crate::arch::{model_forward_with, ModelConfig, ModelParams, RoutingCtl, RoutingRecord};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

pub const DEFAULT_FD_EPS: f64 = 1e-5;

/// Relative errors are measured as `|a − f| / max(|a|, |f|, floor)`.
pub const DEFAULT_REL_FLOOR: f64 = 1e-3;

/// How numeric derivatives are formed from function values.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FdScheme {
    /// `(f(θ+ε) − f(θ−ε)) / 2ε`
    #[default]
    Central,
    /// `(4·D(ε/2) − D(ε)) / 3` over central differences `D`, cancelling
    /// the `ε²` error term.
    Richardson,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FdEntry {
    pub value: f64,
    /// A perturbation changed a discrete routing choice.
    pub flagged: bool,
}

/// A scalar function of a flat parameter vector with an analytic gradient.
pub trait Differentiable: Sync {
    fn point(&self) -> Vec<f64>;
    /// Value at `theta` and whether a discrete choice differs from the base point.
    fn value_at(&self, theta: &[f64]) -> Result<(f64, bool)>;
    fn gradient(&self) -> Result<Vec<f64>>;
}

/// `(f(θ + ε·e_i) − f(θ − ε·e_i)) / 2ε` for every coordinate. The step is
/// taken as the actually representable difference, so linear functions
/// are differentiated without rounding bias. Results are in coordinate
/// order regardless of `parallel`.
pub fn central_differences<F>(theta: &[f64], eps: f64, parallel: bool, f: F) -> Result<Vec<FdEntry>>
where
    F: Fn(&[f64]) -> Result<(f64, bool)> + Sync,
{
    if !(eps > 0.0) {
        return Err(Error::config(format!("finite-difference step must be > 0, got {eps}")));
    }
    let one = |i: usize| -> Result<FdEntry> {
        let mut p = theta.to_vec();
        let base = theta[i];
        p[i] = base + eps;
        let hp = p[i] - base;
        let (fp, flp) = f(&p)?;
        p[i] = base - eps;
        let hm = base - p[i];
        let (fm, flm) = f(&p)?;
        Ok(FdEntry {
            value: (fp - fm) / (hp + hm),
            flagged: flp || flm,
        })
    };
    if parallel {
        (0..theta.len()).into_par_iter().map(one).collect()
    } else {
        (0..theta.len()).map(one).collect()
    }
}

/// Richardson extrapolation of two central differences at `eps` and `eps/2`.
pub fn richardson_differences<F>(theta: &[f64], eps: f64, parallel: bool, f: F) -> Result<Vec<FdEntry>>
where
    F: Fn(&[f64]) -> Result<(f64, bool)> + Sync,
{
    let coarse = central_differences(theta, eps, parallel, &f)?;
    let fine = central_differences(theta, eps / 2.0, parallel, &f)?;
    Ok(coarse
        .iter()
        .zip(&fine)
        .map(|(c, h)| FdEntry {
            value: (4.0 * h.value - c.value) / 3.0,
            flagged: c.flagged || h.flagged,
        })
        .collect())
}

pub fn fd_gradient<D: Differentiable + ?Sized>(obj: &D, eps: f64, parallel: bool) -> Result<Vec<FdEntry>> {
    fd_gradient_with(obj, eps, FdScheme::Central, parallel)
}

pub fn fd_gradient_with<D: Differentiable + ?Sized>(
    obj: &D,
    eps: f64,
    scheme: FdScheme,
    parallel: bool,
) -> Result<Vec<FdEntry>> {
    let f = |t: &[f64]| obj.value_at(t);
    match scheme {
        FdScheme::Central => central_differences(&obj.point(), eps, parallel, f),
        FdScheme::Richardson => richardson_differences(&obj.point(), eps, parallel, f),
    }
}

pub fn flatten_params(p: &ModelParams) -> Vec<f64> {
    p.named().iter().flat_map(|(_, m)| m.data().iter().copied()).collect()
}

pub fn load_flat(p: &mut ModelParams, theta: &[f64]) -> Result<()> {
    let total = p.scalar_count();
    if theta.len() != total {
        return Err(Error::config(format!(
            "flat vector has {} entries, parameters {total}",
            theta.len()
        )));
    }
    let mut off = 0;
    for (_, m) in p.named_mut() {
        let n = m.len();
        m.data_mut().copy_from_slice(&theta[off..off + n]);
        off += n;
    }
    Ok(())
}

/// Model loss as a function of all parameters, with routing replayed from a
/// fixed record.
pub struct ModelObjective {
    pub cfg: ModelConfig,
    pub params: ModelParams,
    pub tokens: Matrix,
    pub loss: LossSpec,
    pub aux_coef: f64,
    pub record: RoutingRecord,
}

impl ModelObjective {
    /// Runs one forward pass (sampling gate noise from `noise_seed` when the
    /// config enables it) and freezes its routing.
    pub fn new(
        cfg: ModelConfig,
        params: ModelParams,
        tokens: Matrix,
        loss: LossSpec,
        aux_coef: f64,
        noise_seed: u64,
    ) -> Result<Self> {
        let mut rng = Rng::new(noise_seed);
        let pass = model_forward_with(&cfg, &params, &tokens, &mut RoutingCtl::sampling(&mut rng))?;
        Ok(Self {
            cfg,
            params,
            tokens,
            loss,
            aux_coef,
            record: pass.record,
        })
    }

    pub fn analytic(&self) -> Result<GradientSet> {
        let b = backward(
            &self.cfg,
            &self.params,
            &self.tokens,
            &self.loss,
            self.aux_coef,
            Some(&self.record),
        )?;
        Ok(b.gradient_set())
    }

    pub fn names(&self) -> Vec<(String, usize)> {
        self.params.named().into_iter().map(|(n, m)| (n, m.len())).collect()
    }
}

impl Differentiable for ModelObjective {
    fn point(&self) -> Vec<f64> {
        flatten_params(&self.params)
    }

    fn value_at(&self, theta: &[f64]) -> Result<(f64, bool)> {
        let mut p = self.params.clone();
        load_flat(&mut p, theta)?;
        replayed_loss(&self.cfg, &p, &self.tokens, &self.loss, self.aux_coef, &self.record)
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        Ok(self.analytic()?.flatten())
    }
}

/// `‖X·W − Y‖²_F / T` as a function of `W`; its gradient is `2/T·Xᵀ(XW − Y)`.
pub struct LinearObjective {
    pub x: Matrix,
    pub w: Matrix,
    pub y: Matrix,
}

impl LinearObjective {
    fn loss(&self, w: &Matrix) -> Result<f64> {
        Ok(self.x.matmul(w)?.sub(&self.y)?.frobenius_sq() / self.x.rows() as f64)
    }
}

impl Differentiable for LinearObjective {
    fn point(&self) -> Vec<f64> {
        self.w.data().to_vec()
    }

    fn value_at(&self, theta: &[f64]) -> Result<(f64, bool)> {
        let w = Matrix::from_vec(self.w.rows(), self.w.cols(), theta.to_vec())?;
        Ok((self.loss(&w)?, false))
    }

    fn gradient(&self) -> Result<Vec<f64>> {
        let r = self.x.matmul(&self.w)?.sub(&self.y)?;
        Ok(self.x.t_matmul(&r)?.scale(2.0 / self.x.rows() as f64).into_data())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamError {
    pub name: String,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub flagged: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub eps: f64,
    pub floor: f64,
    pub max_rel_error: f64,
    pub max_abs_error: f64,
    pub checked: usize,
    pub flagged: usize,
    pub params: Vec<ParamError>,
}

pub fn rel_error(a: f64, f: f64, floor: f64) -> f64 {
    (a - f).abs() / a.abs().max(f.abs()).max(floor)
}

/// Compares analytic and numeric gradients over named segments of the flat
/// vector. Flagged entries are counted but excluded.
pub fn compare(
    segments: &[(String, usize)],
    analytic: &[f64],
    fd: &[FdEntry],
    eps: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    if analytic.len() != fd.len() || segments.iter().map(|s| s.1).sum::<usize>() != fd.len() {
        return Err(Error::config("gradient vectors and segments disagree in length"));
    }
    let mut params = Vec::with_capacity(segments.len());
    let mut off = 0;
    for (name, len) in segments {
        let mut pe = ParamError {
            name: name.clone(),
            max_rel_error: 0.0,
            max_abs_error: 0.0,
            checked: 0,
            flagged: 0,
        };
        for i in off..off + len {
            if fd[i].flagged {
                pe.flagged += 1;
                continue;
            }
            pe.checked += 1;
            pe.max_rel_error = pe.max_rel_error.max(rel_error(analytic[i], fd[i].value, floor));
            pe.max_abs_error = pe.max_abs_error.max((analytic[i] - fd[i].value).abs());
        }
        off += len;
        params.push(pe);
    }
    Ok(GradCheckReport {
        eps,
        floor,
        max_rel_error: params.iter().map(|p| p.max_rel_error).fold(0.0, f64::max),
        max_abs_error: params.iter().map(|p| p.max_abs_error).fold(0.0, f64::max),
        checked: params.iter().map(|p| p.checked).sum(),
        flagged: params.iter().map(|p| p.flagged).sum(),
        params,
    })
}

/// Analytic gradient of a model objective checked against central differences.
pub fn check_model(
    obj: &ModelObjective,
    eps: f64,
    scheme: FdScheme,
    floor: f64,
    parallel: bool,
) -> Result<GradCheckReport> {
    let analytic = obj.gradient()?;
    let fd = fd_gradient_with(obj, eps, scheme, parallel)?;
    compare(&obj.names(), &analytic, &fd, eps, floor)
}

/// Numeric gradient of a model objective as a name-keyed set, plus flags.
pub fn fd_gradient_set(obj: &ModelObjective, eps: f64) -> Result<(GradientSet, Vec<bool>)> {
    let fd = fd_gradient(obj, eps, true)?;
    let mut g = obj.params.zeros_like();
    load_flat(&mut g, &fd.iter().map(|e| e.value).collect::<Vec<_>>())?;
    Ok((GradientSet::from_params(&g), fd.iter().map(|e| e.flagged).collect()))
}
