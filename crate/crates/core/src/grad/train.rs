//! Plain SGD on synthetic tasks.

use serde::{Deserialize, Serialize};

use super::backward::{backward_pass, LossSpec};
use crate::arch::{model_forward_with, ForwardPass, ModelConfig, ModelParams, RoutingCtl};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

fn default_aux() -> f64 {
    0.01
}

fn default_scale() -> f64 {
    1.0
}

fn default_eval() -> usize {
    64
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub steps: usize,
    pub lr: f64,
    /// Tokens per step.
    pub batch: usize,
    pub seed: u64,
    #[serde(default = "default_aux")]
    pub aux_coef: f64,
    /// Multiplier on the initial parameter standard deviations.
    #[serde(default = "default_scale")]
    pub init_scale: f64,
    /// Tokens in the fixed evaluation batch.
    #[serde(default = "default_eval")]
    pub eval_batch: usize,
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.aux_coef >= 0.0) {
            return Err(Error::config(format!("aux_coef must be >= 0, got {}", self.aux_coef)));
        }
        if !(self.lr >= 0.0) || !self.lr.is_finite() {
            return Err(Error::config(format!(
                "learning rate must be finite and >= 0, got {}",
                self.lr
            )));
        }
        if self.batch == 0 || self.eval_batch == 0 {
            return Err(Error::config("batch sizes must be positive"));
        }
        if !(self.init_scale >= 0.0) {
            return Err(Error::config("init_scale must be >= 0"));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Task {
    /// Reproduce the input.
    Copy,
    /// Fit `y = x·A` for a fixed random `A`.
    SyntheticRegression,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Task loss of each step's batch before its update.
    pub losses: Vec<f64>,
    /// Load-balancing loss of each step's batch.
    pub aux_losses: Vec<f64>,
    /// Task loss on the fixed evaluation batch before training.
    pub initial_eval: f64,
    /// Task loss on the fixed evaluation batch after training.
    pub final_eval: f64,
}

struct Data {
    rng: Rng,
    task: Task,
    a: Matrix,
    d: usize,
}

impl Data {
    fn batch(&mut self, t: usize) -> Result<(Matrix, Matrix)> {
        let x = self.rng.normal_matrix(t, self.d, 1.0);
        let y = match self.task {
            Task::Copy => x.clone(),
            Task::SyntheticRegression => x.matmul(&self.a)?,
        };
        Ok((x, y))
    }
}

fn eval_loss(cfg: &ModelConfig, p: &ModelParams, x: &Matrix, y: &Matrix) -> Result<f64> {
    let pass = model_forward_with(cfg, p, x, &mut RoutingCtl::inference())?;
    LossSpec::Mse(y.clone()).value(&pass.output)
}

pub fn train_toy(cfg: &ModelConfig, t: &TrainConfig, task: Task) -> Result<TrainReport> {
    train_toy_with(cfg, t, task, |_, _| {}).map(|(r, _)| r)
}

/// Runs the trainer, handing every step's forward pass to `hook`. Returns
/// the report and the final parameters.
pub fn train_toy_with(
    cfg: &ModelConfig,
    t: &TrainConfig,
    task: Task,
    mut hook: impl FnMut(usize, &ForwardPass),
) -> Result<(TrainReport, ModelParams)> {
    cfg.validate()?;
    t.validate()?;
    let d = cfg.d_model;
    let mut params = ModelParams::init_scaled(cfg, Rng::derive(t.seed, 0).next_u64(), t.init_scale)?;
    let a = Rng::derive(t.seed, 1).normal_matrix(d, d, 1.0 / (d as f64).sqrt());
    let mut data = Data {
        rng: Rng::derive(t.seed, 2),
        task,
        a,
        d,
    };
    let mut noise = Rng::derive(t.seed, 3);
    let (ex, ey) = Data {
        rng: Rng::derive(t.seed, 4),
        task,
        a: data.a.clone(),
        d,
    }
    .batch(t.eval_batch)?;
    let initial_eval = eval_loss(cfg, &params, &ex, &ey)?;

    let mut losses = Vec::with_capacity(t.steps);
    let mut aux_losses = Vec::with_capacity(t.steps);
    for step in 0..t.steps {
        let (x, y) = data.batch(t.batch)?;
        let pass = match model_forward_with(cfg, &params, &x, &mut RoutingCtl::sampling(&mut noise)) {
            Ok(p) => p,
            Err(Error::NoSelectableExpert { .. }) => return Err(Error::Divergence { step, loss: f64::NAN }),
            Err(e) => return Err(e),
        };
        hook(step, &pass);
        let b = backward_pass(&params, &pass, &LossSpec::Mse(y), t.aux_coef)?;
        if !b.loss.is_finite() {
            return Err(Error::Divergence { step, loss: b.loss });
        }
        losses.push(b.task_loss);
        aux_losses.push(b.aux_loss);
        for ((_, p), (_, g)) in params.named_mut().into_iter().zip(b.grads.named()) {
            p.axpy(-t.lr, g)?;
        }
        if !params.named().iter().all(|(_, m)| m.is_finite()) {
            return Err(Error::Divergence { step, loss: b.loss });
        }
    }
    let final_eval = eval_loss(cfg, &params, &ex, &ey)?;
    if !final_eval.is_finite() {
        return Err(Error::Divergence {
            step: t.steps,
            loss: final_eval,
        });
    }
    Ok((
        TrainReport {
            losses,
            aux_losses,
            initial_eval,
            final_eval,
        },
        params,
    ))
}

/// `step,loss` rows with shortest round-trip float formatting.
pub fn loss_curve_csv(r: &TrainReport) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in r.losses.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::arch::Variant;

    fn tc(steps: usize, lr: f64) -> TrainConfig {
        TrainConfig {
            steps,
            lr,
            batch: 8,
            seed: 3,
            aux_coef: 0.01,
            init_scale: 1.0,
            eval_batch: 16,
        }
    }

    #[test]
    fn zero_lr_is_flat_on_eval() {
        let cfg = ModelConfig::tiny(Variant::StandardTopK);
        let r = train_toy(&cfg, &tc(5, 0.0), Task::SyntheticRegression).unwrap();
        assert_eq!(r.initial_eval, r.final_eval);
        assert_eq!(r.losses.len(), 5);
    }

    #[test]
    fn curves_are_reproducible() {
        let mut cfg = ModelConfig::tiny(Variant::ScMoE);
        cfg.gate_noise = true;
        let a = train_toy(&cfg, &tc(20, 0.01), Task::Copy).unwrap();
        let b = train_toy(&cfg, &tc(20, 0.01), Task::Copy).unwrap();
        assert_eq!(loss_curve_csv(&a), loss_curve_csv(&b));
        assert!(loss_curve_csv(&a).starts_with("step,loss\n0,"));
    }

    #[test]
    fn divergence_reports_step() {
        let cfg = ModelConfig::tiny(Variant::StandardTopK);
        let err = train_toy(&cfg, &tc(200, 1e6), Task::SyntheticRegression).unwrap_err();
        assert!(matches!(err, Error::Divergence { .. }), "{err}");
    }
}
