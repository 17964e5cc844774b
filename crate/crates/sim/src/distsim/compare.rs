//! Strategy comparison and link calibration.

use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::costs::{BlockCosts, Workload};
use super::dag::{build_dag, OpKind, StrategySpec, Stream};
use super::engine::{run_sim, Timeline};
use super::profile::HardwareProfile;
use crate::error::{Result, SimError};
use scmoe_core::arch::{ModelConfig, ShortcutPos, Variant};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StrategyResult {
    pub label: String,
    pub strategy: StrategySpec,
    pub makespan: u64,
    /// Busy time of device 0's compute stream.
    pub compute: u64,
    /// Busy time of device 0's comm stream.
    pub comm: u64,
    pub comm_hidden: u64,
    /// `comm_hidden / comm`, 1 when there is no communication.
    pub overlap_fraction: f64,
    /// `comm / makespan`
    pub comm_fraction: f64,
    pub slot: Option<usize>,
    pub stages: BTreeMap<OpKind, u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComparisonReport {
    pub results: Vec<StrategyResult>,
    /// `speedup[i][j] = makespan_i / makespan_j`
    pub speedup: Vec<Vec<f64>>,
}

pub fn simulate(
    cfg: &ModelConfig,
    strat: &StrategySpec,
    prof: &HardwareProfile,
    costs: &BlockCosts,
) -> Result<(Timeline, Option<usize>)> {
    let dag = build_dag(cfg, strat, prof, costs)?;
    Ok((run_sim(&dag.nodes)?, dag.slot))
}

fn summarize(strat: &StrategySpec, t: &Timeline, slot: Option<usize>) -> StrategyResult {
    let comm = t.busy(0, Stream::Comm);
    let hidden = t.hidden_comm(0);
    StrategyResult {
        label: strat.label(),
        strategy: *strat,
        makespan: t.makespan,
        compute: t.busy(0, Stream::Compute),
        comm,
        comm_hidden: hidden,
        overlap_fraction: if comm == 0 { 1.0 } else { hidden as f64 / comm as f64 },
        comm_fraction: if t.makespan == 0 {
            0.0
        } else {
            comm as f64 / t.makespan as f64
        },
        slot,
        stages: t.stage_totals(0),
    }
}

/// Simulates each strategy (in parallel, results in input order).
pub fn compare_strategies(
    cfg: &ModelConfig,
    prof: &HardwareProfile,
    costs: &BlockCosts,
    strategies: &[StrategySpec],
) -> Result<ComparisonReport> {
    let results: Vec<StrategyResult> = strategies
        .par_iter()
        .map(|s| simulate(cfg, s, prof, costs).map(|(t, slot)| summarize(s, &t, slot)))
        .collect::<Result<_>>()?;
    let speedup = results
        .iter()
        .map(|a| {
            results
                .iter()
                .map(|b| {
                    if b.makespan == 0 {
                        1.0
                    } else {
                        a.makespan as f64 / b.makespan as f64
                    }
                })
                .collect()
        })
        .collect();
    Ok(ComparisonReport { results, speedup })
}

impl ComparisonReport {
    pub fn get(&self, label: &str) -> Option<&StrategyResult> {
        self.results.iter().find(|r| r.label == label)
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("strategy,makespan,compute,comm,comm_hidden,overlap_fraction,comm_fraction\n");
        for r in &self.results {
            out.push_str(&format!(
                "{},{},{},{},{},{},{}\n",
                r.label, r.makespan, r.compute, r.comm, r.comm_hidden, r.overlap_fraction, r.comm_fraction
            ));
        }
        out
    }
}

/// Share of the MoE transformer block's time spent in All-to-All under
/// sequential top-2: `(dispatch + combine) / (decode end − attention start)`
/// on device 0, where the attention is the MoE block's own.
pub fn moe_comm_fraction(cfg: &ModelConfig, prof: &HardwareProfile, costs: &BlockCosts) -> Result<f64> {
    let (t, _) = simulate(cfg, &StrategySpec::StandardSequential { k: 2 }, prof, costs)?;
    let start = t.span(0, "attn").map(|s| s.start).unwrap_or(0);
    let end = t.span(0, "decode").map(|s| s.end).unwrap_or(t.makespan);
    let comm = t.busy(0, Stream::Comm);
    if end == start {
        return Ok(0.0);
    }
    Ok(comm as f64 / (end - start) as f64)
}

/// Solves for `β` (keeping every other field of `base`) so that
/// [`moe_comm_fraction`] hits `target` within `1e-6`, by bisection.
pub fn calibrate_profile(
    target: f64,
    cfg: &ModelConfig,
    base: &HardwareProfile,
    costs: &BlockCosts,
) -> Result<HardwareProfile> {
    if !(0.0..1.0).contains(&target) {
        return Err(SimError::Calibration(format!(
            "target fraction {target} outside [0, 1)"
        )));
    }
    let with = |beta: f64| HardwareProfile { beta, ..base.clone() };
    let frac = |beta: f64| moe_comm_fraction(cfg, &with(beta), costs);
    let f0 = frac(0.0)?;
    if (f0 - target).abs() <= 1e-6 {
        return Ok(with(0.0));
    }
    if f0 > target {
        return Err(SimError::Calibration(format!(
            "latency alone gives fraction {f0}, above target {target}"
        )));
    }
    let mut hi = 1e-12;
    while frac(hi)? < target {
        hi *= 2.0;
        if hi > 1e12 {
            return Err(SimError::Calibration("no bandwidth reaches the target".into()));
        }
    }
    let mut lo = 0.0;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let f = frac(mid)?;
        if (f - target).abs() <= 1e-9 {
            return Ok(with(mid));
        }
        if f < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    let best = if (frac(lo)? - target).abs() <= (frac(hi)? - target).abs() {
        lo
    } else {
        hi
    };
    if (frac(best)? - target).abs() > 1e-6 {
        return Err(SimError::Calibration(format!("bisection stalled at beta {best}")));
    }
    Ok(with(best))
}
/// Width-1024 ScMoE pair, hidden 4096, eight experts on eight devices.
pub fn reference_model(pos: ShortcutPos) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(Variant::ScMoE);
    cfg.d_model = 1024;
    cfg.d_hidden = 4096;
    cfg.n_experts = 8;
    cfg.shortcut_pos = Some(pos);
    cfg
}

/// [`reference_model`] with toy-kernel costs on the reference workload and
/// `β` calibrated to a sequential top-2 comm fraction of `target`.
pub fn calibrated_reference(target: f64, pos: ShortcutPos) -> Result<(ModelConfig, HardwareProfile, BlockCosts)> {
    let cfg = reference_model(pos);
    let base = HardwareProfile::reference();
    let costs = BlockCosts::from_flops(&cfg, &Workload::reference(), &base)?;
    let prof = calibrate_profile(target, &cfg, &base, &costs)?;
    Ok((cfg, prof, costs))
}
