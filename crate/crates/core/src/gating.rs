//! Noisy top-k softmax gating, capacity enforcement and the load-balancing
//! auxiliary loss.
//!
//! Logits are `H = x·W_gate + ε ∘ softplus(x·W_noise)` with `ε ~ N(0, 1)` per
//! entry. The top `k` logits per token survive, the rest are masked to
//! `-inf`, and the gate weights are the row softmax of the masked logits.
//! Ties are broken towards the lowest expert index.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numkit::{row_softmax, sigmoid_scalar, softmax_backward, softmax_in_place, softplus, Matrix, Rng, NEG_INF};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateParams {
    /// `d×N`
    pub w_gate: Matrix,
    /// `d×N`
    pub w_noise: Matrix,
    pub k: usize,
    pub noise_enabled: bool,
}

impl GateParams {
    pub fn new(w_gate: Matrix, w_noise: Matrix, k: usize, noise_enabled: bool) -> Result<Self> {
        let p = Self {
            w_gate,
            w_noise,
            k,
            noise_enabled,
        };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if self.w_gate.shape() != self.w_noise.shape() {
            return Err(Error::Shape {
                op: "gate params",
                left: self.w_gate.shape(),
                right: self.w_noise.shape(),
            });
        }
        if self.k == 0 || self.k > self.n_experts() {
            return Err(Error::config(format!(
                "gate k={} must satisfy 1 <= k <= N={}",
                self.k,
                self.n_experts()
            )));
        }
        Ok(())
    }

    pub fn n_experts(&self) -> usize {
        self.w_gate.cols()
    }

    pub fn dim(&self) -> usize {
        self.w_gate.rows()
    }
}

/// One routed slot of a token.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Selection {
    pub expert: usize,
    pub weight: f64,
    pub dropped: bool,
}

/// Per-token routing outcome for a batch.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GateDecision {
    /// Logits `H(x)` actually used for selection (noise included), `T×N`.
    pub logits: Matrix,
    /// Selections per token in rank order.
    pub selected: Vec<Vec<Selection>>,
    /// Recorded standard-normal draws, when noise was applied.
    pub noise: Option<Matrix>,
}

impl GateDecision {
    pub fn tokens(&self) -> usize {
        self.selected.len()
    }

    pub fn n_experts(&self) -> usize {
        self.logits.cols()
    }

    pub fn experts_of(&self, t: usize) -> Vec<usize> {
        self.selected[t].iter().map(|s| s.expert).collect()
    }

    /// Softmax over all `N` logits per token.
    pub fn full_probs(&self) -> Matrix {
        row_softmax(&self.logits).expect("logits are finite")
    }

    pub fn drop_count(&self) -> usize {
        self.selected.iter().flatten().filter(|s| s.dropped).count()
    }

    /// Routing pattern (experts and drop flags), ignoring weights.
    pub fn pattern(&self) -> Vec<Vec<(usize, bool)>> {
        self.selected
            .iter()
            .map(|row| row.iter().map(|s| (s.expert, s.dropped)).collect())
            .collect()
    }
}

/// Where the noise term comes from.
pub enum NoiseSource<'a> {
    /// No noise (inference, or noise disabled).
    Off,
    /// Fresh standard-normal draws, row-major over `T×N`.
    Sample(&'a mut Rng),
    /// Reuse previously recorded draws.
    Replay(&'a Matrix),
}

/// Logits together with the intermediates needed for backprop.
#[derive(Clone, Debug)]
pub struct GateLogits {
    pub logits: Matrix,
    /// `x·W_gate`
    pub clean: Matrix,
    /// `x·W_noise`, present when noise was applied.
    pub noise_pre: Option<Matrix>,
    pub eps: Option<Matrix>,
}

pub fn gate_logits(x: &Matrix, p: &GateParams, noise: NoiseSource<'_>) -> Result<GateLogits> {
    let clean = x.matmul(&p.w_gate)?;
    if !p.noise_enabled {
        return Ok(GateLogits {
            logits: clean.clone(),
            clean,
            noise_pre: None,
            eps: None,
        });
    }
    let eps = match noise {
        NoiseSource::Off => None,
        NoiseSource::Sample(rng) => Some(rng.normal_matrix(clean.rows(), clean.cols(), 1.0)),
        NoiseSource::Replay(eps) => {
            if eps.shape() != clean.shape() {
                return Err(Error::Replay(format!(
                    "recorded noise has shape {:?}, logits have {:?}",
                    eps.shape(),
                    clean.shape()
                )));
            }
            Some(eps.clone())
        }
    };
    let Some(eps) = eps else {
        return Ok(GateLogits {
            logits: clean.clone(),
            clean,
            noise_pre: None,
            eps: None,
        });
    };
    let noise_pre = x.matmul(&p.w_noise)?;
    let logits = clean.add(&eps.hadamard(&softplus(&noise_pre))?)?;
    Ok(GateLogits {
        logits,
        clean,
        noise_pre: Some(noise_pre),
        eps: Some(eps),
    })
}

/// Expert indices of one row ordered by (logit desc, index asc).
pub fn ranked(row: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..row.len()).collect();
    idx.sort_by(|&a, &b| row[b].total_cmp(&row[a]).then(a.cmp(&b)));
    idx
}

fn weights_for(row: &[f64], chosen: &[usize]) -> Vec<f64> {
    let mut masked = vec![NEG_INF; row.len()];
    for &e in chosen {
        masked[e] = row[e];
    }
    softmax_in_place(&mut masked).expect("at least one expert chosen");
    chosen.iter().map(|&e| masked[e]).collect()
}

fn decision_from(h: &Matrix, chosen: Vec<Vec<usize>>) -> GateDecision {
    let selected = chosen
        .iter()
        .enumerate()
        .map(|(t, experts)| {
            let w = weights_for(h.row(t), experts);
            experts
                .iter()
                .zip(w)
                .map(|(&expert, weight)| Selection {
                    expert,
                    weight,
                    dropped: false,
                })
                .collect()
        })
        .collect();
    GateDecision {
        logits: h.clone(),
        selected,
        noise: None,
    }
}

/// Keeps the `k` largest logits per token and softmaxes over them.
pub fn select_topk(h: &Matrix, k: usize) -> Result<GateDecision> {
    if k == 0 || k > h.cols() {
        return Err(Error::config(format!("top-k with k={k} over {} experts", h.cols())));
    }
    let chosen = (0..h.rows())
        .map(|t| ranked(h.row(t)).into_iter().take(k).collect())
        .collect();
    Ok(decision_from(h, chosen))
}

/// Top-1 per token, except that a token whose top-1 equals `avoid[t]` takes
/// its runner-up instead.
pub fn select_top1_distinct(h: &Matrix, avoid: &[usize]) -> Result<GateDecision> {
    if h.cols() < 2 {
        return Err(Error::config("distinct-expert constraint needs at least two experts"));
    }
    if avoid.len() != h.rows() {
        return Err(Error::config("avoid list length differs from token count"));
    }
    let chosen = (0..h.rows())
        .map(|t| {
            let r = ranked(h.row(t));
            vec![if r[0] == avoid[t] { r[1] } else { r[0] }]
        })
        .collect();
    Ok(decision_from(h, chosen))
}

/// Re-evaluates weights over a fixed routing pattern (used when replaying a
/// recorded decision at perturbed parameters).
pub fn select_pinned(h: &Matrix, pattern: &[Vec<(usize, bool)>]) -> Result<GateDecision> {
    if pattern.len() != h.rows() {
        return Err(Error::Replay(format!(
            "pinned pattern covers {} tokens, logits have {}",
            pattern.len(),
            h.rows()
        )));
    }
    let chosen: Vec<Vec<usize>> = pattern.iter().map(|r| r.iter().map(|p| p.0).collect()).collect();
    let mut dec = decision_from(h, chosen);
    for (row, pat) in dec.selected.iter_mut().zip(pattern) {
        for (s, &(_, dropped)) in row.iter_mut().zip(pat) {
            s.dropped = dropped;
        }
    }
    Ok(dec)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum DropPolicy {
    DropOverflow,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CapacityConfig {
    pub capacity_factor: f64,
    pub policy: DropPolicy,
}

impl CapacityConfig {
    pub fn new(capacity_factor: f64) -> Result<Self> {
        if !(capacity_factor > 0.0) {
            return Err(Error::config(format!(
                "capacity factor must be > 0, got {capacity_factor}"
            )));
        }
        Ok(Self {
            capacity_factor,
            policy: DropPolicy::DropOverflow,
        })
    }
}

/// `ceil(capacity_factor · T · k / N)`.
pub fn capacity_quota(capacity_factor: f64, tokens: usize, k: usize, n_experts: usize) -> usize {
    (capacity_factor * (tokens * k) as f64 / n_experts as f64).ceil() as usize
}

/// Marks selections beyond each expert's quota as dropped, scanning tokens in
/// order and each token's selections in rank order. Weights are untouched.
pub fn apply_capacity(dec: &GateDecision, cfg: &CapacityConfig, n_experts: usize, tokens: usize) -> GateDecision {
    let k = dec.selected.first().map_or(1, Vec::len);
    let quota = capacity_quota(cfg.capacity_factor, tokens, k, n_experts);
    let mut load = vec![0usize; n_experts];
    let mut out = dec.clone();
    for row in out.selected.iter_mut() {
        for s in row.iter_mut() {
            if s.dropped {
                continue;
            }
            if load[s.expert] < quota {
                load[s.expert] += 1;
            } else {
                s.dropped = true;
            }
        }
    }
    out
}

/// Fraction `f_i` of token-selections routed to each expert (drops included).
pub fn routed_fractions(dec: &GateDecision, n_experts: usize) -> Vec<f64> {
    let mut counts = vec![0.0; n_experts];
    let mut total = 0.0;
    for s in dec.selected.iter().flatten() {
        counts[s.expert] += 1.0;
        total += 1.0;
    }
    if total > 0.0 {
        for c in counts.iter_mut() {
            *c /= total;
        }
    }
    counts
}

/// `N · Σ_i f_i · P_i` with `P_i` the mean full-softmax probability.
pub fn load_balance_loss(dec: &GateDecision, n_experts: usize) -> f64 {
    let f = routed_fractions(dec, n_experts);
    let probs = dec.full_probs();
    let t = dec.tokens().max(1) as f64;
    let mean_p = probs.col_sums().scale(1.0 / t);
    n_experts as f64 * f.iter().zip(mean_p.data()).map(|(a, b)| a * b).sum::<f64>()
}

/// Gradient of `coef · load_balance_loss` with respect to the logits, with
/// the routed fractions held constant.
pub fn load_balance_backward(dec: &GateDecision, n_experts: usize, coef: f64) -> Matrix {
    let f = routed_fractions(dec, n_experts);
    let probs = dec.full_probs();
    let t = dec.tokens().max(1) as f64;
    let g: Vec<f64> = f.iter().map(|fi| coef * n_experts as f64 * fi / t).collect();
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        softmax_backward(probs.row(r), &g, out.row_mut(r));
    }
    out
}

/// Logit gradient from gradients on the selection weights. `d_weight[t][j]`
/// pairs with `dec.selected[t][j]`; the masked softmax only involves the
/// selected logits.
pub fn topk_weights_backward(dec: &GateDecision, d_weight: &[Vec<f64>]) -> Matrix {
    let mut out = Matrix::zeros(dec.logits.rows(), dec.logits.cols());
    for (t, (row, dw)) in dec.selected.iter().zip(d_weight).enumerate() {
        let p: Vec<f64> = row.iter().map(|s| s.weight).collect();
        let mut dh = vec![0.0; p.len()];
        softmax_backward(&p, dw, &mut dh);
        for (s, v) in row.iter().zip(dh) {
            out.row_mut(t)[s.expert] += v;
        }
    }
    out
}

/// Parameter gradients of the gate
pub struct GateGrads {
    pub dx: Matrix,
    pub d_w_gate: Matrix,
    pub d_w_noise: Matrix,
}

pub fn gate_backward(x: &Matrix, p: &GateParams, g: &GateLogits, d_logits: &Matrix) -> Result<GateGrads> {
    let mut dx = d_logits.matmul_t(&p.w_gate)?;
    let d_w_gate = x.t_matmul(d_logits)?;
    let d_w_noise = match (&g.noise_pre, &g.eps) {
        (Some(pre), Some(eps)) => {
            let mut d_pre = d_logits.hadamard(eps)?;
            for (d, &z) in d_pre.data_mut().iter_mut().zip(pre.data()) {
                *d *= sigmoid_scalar(z);
            }
            dx.add_assign(&d_pre.matmul_t(&p.w_noise)?)?;
            x.t_matmul(&d_pre)?
        }
        _ => Matrix::zeros(p.w_noise.rows(), p.w_noise.cols()),
    };
    Ok(GateGrads {
        dx,
        d_w_gate,
        d_w_noise,
    })
}

/// Outcome of [`check_random_cases`].
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GatingCheck {
    pub cases: usize,
    /// Tokens whose selection count or distinctness was wrong.
    pub selection_violations: usize,
    /// Largest `|Σ weights − 1|` seen before drops.
    pub max_weight_sum_error: f64,
    /// Experts that received more kept selections than their quota.
    pub quota_violations: usize,
}

/// Draws `cases` random gating problems (`N ≤ 16`, `1 ≤ k ≤ N`, random
/// token count, dimension, capacity factor and noise) and checks selection
/// count, distinctness, weight normalisation and quota compliance.
pub fn check_random_cases(cases: usize, seed: u64) -> Result<GatingCheck> {
    let mut rng = Rng::new(seed);
    let mut out = GatingCheck {
        cases,
        ..GatingCheck::default()
    };
    for _ in 0..cases {
        let n = 1 + rng.below(16);
        let k = 1 + rng.below(n);
        let d = 1 + rng.below(8);
        let t = 1 + rng.below(24);
        let cf = rng.uniform_range(0.25, 3.0);
        let noisy = rng.below(2) == 1;
        let x = rng.normal_matrix(t, d, 1.0);
        let p = GateParams::new(rng.normal_matrix(d, n, 1.0), rng.normal_matrix(d, n, 0.5), k, noisy)?;
        let g = if noisy {
            gate_logits(&x, &p, NoiseSource::Sample(&mut rng))?
        } else {
            gate_logits(&x, &p, NoiseSource::Off)?
        };
        let dec = select_topk(&g.logits, k)?;
        for row in &dec.selected {
            let mut experts: Vec<usize> = row.iter().map(|s| s.expert).collect();
            experts.sort_unstable();
            experts.dedup();
            if row.len() != k || experts.len() != k || experts.iter().any(|&e| e >= n) {
                out.selection_violations += 1;
            }
            let sum: f64 = row.iter().map(|s| s.weight).sum();
            out.max_weight_sum_error = out.max_weight_sum_error.max((sum - 1.0).abs());
        }
        let cap = CapacityConfig::new(cf)?;
        let kept = apply_capacity(&dec, &cap, n, t);
        let quota = capacity_quota(cf, t, k, n);
        let mut load = vec![0usize; n];
        for s in kept.selected.iter().flatten().filter(|s| !s.dropped) {
            load[s.expert] += 1;
        }
        out.quota_violations += load.iter().filter(|&&l| l > quota).count();
    }
    Ok(out)
}
