//! Randomized consistency checks between the slot scheduler and the engine.

use serde::{Deserialize, Serialize};

use super::costs::StageDurations;
use super::dag::{dag_from_stages, overlap_costs, StrategySpec, Stream};
use super::engine::run_sim;
use crate::error::Result;
use crate::sched::choose_slot;
use scmoe_core::arch::{MoeFrequency, ShortcutPos};
use scmoe_core::numkit::Rng;

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct FullOverlapCheck {
    pub cases: usize,
    /// Cases where the scheduler reported a nonzero objective.
    pub nonzero_objective: usize,
    /// Makespan differs from the summed compute.
    pub makespan_mismatches: usize,
    /// Some communication was left exposed.
    pub exposed_comm: usize,
}

impl FullOverlapCheck {
    pub fn passed(&self) -> bool {
        self.nonzero_objective == 0 && self.makespan_mismatches == 0 && self.exposed_comm == 0
    }
}

/// Total compute-stream work of an overlapped pair.
pub fn overlap_compute_total(s: &StageDurations, every_block: bool) -> u64 {
    let prev = if every_block { 0 } else { s.attn_prev + s.mlp_prev };
    prev + s.attn + s.shared_expert + s.gate_route + s.encode + s.expert + s.decode + s.combine_outputs
}

/// Random stage durations where dispatch and combine exactly fill the
/// backbone work on either side of a random slot.
pub fn check_full_overlap(cases: usize, seed: u64) -> Result<FullOverlapCheck> {
    let mut rng = Rng::new(seed);
    let mut out = FullOverlapCheck {
        cases,
        ..FullOverlapCheck::default()
    };
    let positions = [ShortcutPos::Pos1, ShortcutPos::Pos2, ShortcutPos::Pos3];
    for _ in 0..cases {
        let mut t = || rng.below(1001) as u64;
        let mut s = StageDurations {
            attn_prev: t(),
            mlp_prev: t(),
            attn: t(),
            shared_expert: t(),
            gate_route: t(),
            encode: t(),
            dispatch: 0,
            expert: t(),
            combine: 0,
            decode: t(),
            combine_outputs: t(),
        };
        let every_block = rng.below(4) == 0;
        let pos = if every_block {
            ShortcutPos::Pos1
        } else {
            positions[rng.below(3)]
        };
        let window = overlap_costs(&s, pos, every_block)?;
        let (pre, post) = window.split(rng.below(window.slots()));
        s.dispatch = pre;
        s.combine = post;
        let devices = 1 + rng.below(4);
        let freq = if every_block {
            MoeFrequency::EveryBlock
        } else {
            MoeFrequency::EverySecondBlock
        };

        if choose_slot(&overlap_costs(&s, pos, every_block)?)?.objective != 0 {
            out.nonzero_objective += 1;
        }
        let dag = dag_from_stages(&StrategySpec::ScMoeOverlap { pos }, &s, freq, devices, 0)?;
        let tl = run_sim(&dag.nodes)?;
        if tl.makespan != overlap_compute_total(&s, every_block) {
            out.makespan_mismatches += 1;
        }
        if (0..devices).any(|d| tl.hidden_comm(d) != tl.busy(d, Stream::Comm)) {
            out.exposed_comm += 1;
        }
    }
    Ok(out)
}
