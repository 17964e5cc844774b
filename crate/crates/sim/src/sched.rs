//! Placement of expert computation among backbone operators.
//!
//! The backbone stream runs `m` operators; expert computation is inserted
//! at one of `m + 1` slots. For slot `K`, `pre(K)` is the work before the
//! slot and `post(K)` the work after it. The objective
//! `|pre − t_disp| + |post − t_comb|` measures how badly dispatch and
//! combine fail to line up with the backbone work around the expert.

use serde::{Deserialize, Serialize};

use crate::error::{Result, SimError};
use scmoe_core::numkit::Rng;

/// Durations in integer ticks.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostVector {
    /// Backbone operators in stream order.
    pub comp: Vec<u64>,
    pub t_disp: u64,
    pub t_comb: u64,
    pub t_expert: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ScheduleChoice {
    pub slot: usize,
    pub objective: u64,
    pub makespan: u64,
}

impl CostVector {
    pub fn new(comp: Vec<u64>, t_disp: u64, t_comb: u64, t_expert: u64) -> Self {
        Self {
            comp,
            t_disp,
            t_comb,
            t_expert,
        }
    }

    /// Builds a vector from real-valued durations, rejecting negatives.
    pub fn from_real(comp: &[f64], t_disp: f64, t_comb: f64, t_expert: f64) -> Result<Self> {
        let tick = |what: &str, v: f64| -> Result<u64> {
            if !v.is_finite() || v < 0.0 {
                return Err(SimError::duration(what, v));
            }
            Ok(v.round() as u64)
        };
        Ok(Self {
            comp: comp
                .iter()
                .enumerate()
                .map(|(i, &v)| tick(&format!("comp[{i}]"), v))
                .collect::<Result<_>>()?,
            t_disp: tick("t_disp", t_disp)?,
            t_comb: tick("t_comb", t_comb)?,
            t_expert: tick("t_expert", t_expert)?,
        })
    }

    pub fn slots(&self) -> usize {
        self.comp.len() + 1
    }

    pub fn total_comp(&self) -> u64 {
        self.comp.iter().sum()
    }

    /// `(pre(K), post(K))`
    pub fn split(&self, slot: usize) -> (u64, u64) {
        let pre: u64 = self.comp[..slot].iter().sum();
        (pre, self.total_comp() - pre)
    }

    pub fn objective(&self, slot: usize) -> u64 {
        let (pre, post) = self.split(slot);
        pre.abs_diff(self.t_disp) + post.abs_diff(self.t_comb)
    }

    pub fn makespan(&self, slot: usize) -> u64 {
        let (pre, post) = self.split(slot);
        pre.max(self.t_disp) + self.t_expert + post.max(self.t_comb)
    }

    fn check(&self) -> Result<()> {
        if self.comp.is_empty() {
            return Err(SimError::EmptyBackbone);
        }
        Ok(())
    }
}

fn argmin(n: usize, f: impl Fn(usize) -> u64) -> usize {
    (0..n).min_by_key(|&k| (f(k), k)).expect("at least one slot")
}

/// Slot with the smallest objective; ties go to the smallest slot.
pub fn choose_slot(c: &CostVector) -> Result<ScheduleChoice> {
    c.check()?;
    let slot = argmin(c.slots(), |k| c.objective(k));
    Ok(ScheduleChoice {
        slot,
        objective: c.objective(slot),
        makespan: c.makespan(slot),
    })
}

/// Slot with the smallest predicted makespan, same tie-break.
pub fn makespan_argmin(c: &CostVector) -> Result<usize> {
    c.check()?;
    Ok(argmin(c.slots(), |k| c.makespan(k)))
}

/// `|Σcomp − (t_disp + t_comb)| ≤ objective ≤ Σcomp + t_disp + t_comb`
pub fn verify_bounds(c: &CostVector, choice: &ScheduleChoice) -> Result<()> {
    let s = c.total_comp();
    let comm = c.t_disp + c.t_comb;
    let lo = s.abs_diff(comm);
    let hi = s + comm;
    if choice.objective < lo || choice.objective > hi || choice.slot >= c.slots() {
        return Err(SimError::Bound(format!(
            "objective {} at slot {} outside [{lo}, {hi}] for {}",
            choice.objective,
            choice.slot,
            serde_json::to_string(c).unwrap_or_default()
        )));
    }
    Ok(())
}

/// Whether objective and makespan pick the same slot.
pub fn argmin_equivalence(c: &CostVector) -> Result<bool> {
    Ok(choose_slot(c)?.slot == makespan_argmin(c)?)
}

/// Violation counts over random cost vectors.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SchedCheck {
    pub cases: usize,
    /// `choose_slot` differs from a brute-force scan of every slot.
    pub exhaustive_mismatches: usize,
    pub bound_violations: usize,
    pub argmin_mismatches: usize,
}

impl SchedCheck {
    pub fn passed(&self) -> bool {
        self.exhaustive_mismatches == 0 && self.bound_violations == 0 && self.argmin_mismatches == 0
    }
}

/// Up to eight operators of at most 1000 ticks; comm up to 3000 ticks.
pub fn random_cost_vector(rng: &mut Rng) -> CostVector {
    let m = 1 + rng.below(8);
    let comp = (0..m).map(|_| rng.below(1001) as u64).collect();
    CostVector::new(
        comp,
        rng.below(3001) as u64,
        rng.below(3001) as u64,
        rng.below(1001) as u64,
    )
}

pub fn check_random_vectors(cases: usize, seed: u64) -> Result<SchedCheck> {
    let mut rng = Rng::new(seed);
    let mut out = SchedCheck {
        cases,
        ..SchedCheck::default()
    };
    for _ in 0..cases {
        let c = random_cost_vector(&mut rng);
        let choice = choose_slot(&c)?;
        let mut best = (u64::MAX, usize::MAX);
        for k in 0..c.slots() {
            let (pre, post) = c.split(k);
            let obj = pre.abs_diff(c.t_disp) + post.abs_diff(c.t_comb);
            if obj < best.0 {
                best = (obj, k);
            }
        }
        if (choice.objective, choice.slot) != best {
            out.exhaustive_mismatches += 1;
        }
        if verify_bounds(&c, &choice).is_err() {
            out.bound_violations += 1;
        }
        if !argmin_equivalence(&c)? {
            out.argmin_mismatches += 1;
        }
    }
    Ok(out)
}
