//! Operator DAGs of one Block-MLP + Block-MoE pair under each strategy.

use serde::{Deserialize, Serialize};

use super::costs::{BlockCosts, StageDurations};
use super::profile::{to_ticks, HardwareProfile};
use crate::error::{Result, SimError};
use crate::sched::{choose_slot, CostVector};
use scmoe_core::arch::{ModelConfig, MoeFrequency, ShortcutPos, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpKind {
    GateRoute,
    Encode,
    Dispatch,
    ExpertCompute,
    Combine,
    Decode,
    Attention,
    Mlp,
    SharedExpert,
    CombineOutputs,
    /// Host-to-device expert transfer.
    Migration,
}

impl OpKind {
    pub fn stream(self) -> Stream {
        match self {
            OpKind::Dispatch | OpKind::Combine | OpKind::Migration => Stream::Comm,
            _ => Stream::Compute,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stream {
    Compute,
    Comm,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct OpNode {
    pub id: usize,
    pub device: usize,
    pub name: String,
    pub kind: OpKind,
    pub stream: Stream,
    pub duration: u64,
    pub deps: Vec<usize>,
    pub chunk: Option<usize>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum StrategySpec {
    StandardSequential {
        k: usize,
    },
    StandardPipeline {
        k: usize,
        chunks: usize,
    },
    SharedExpertSequential,
    #[serde(rename = "scmoe-overlap")]
    ScMoeOverlap {
        pos: ShortcutPos,
    },
    #[serde(rename = "scmoe-overlap-pipeline")]
    ScMoeOverlapPipeline {
        pos: ShortcutPos,
        chunks: usize,
    },
}

fn pos_tag(p: ShortcutPos) -> &'static str {
    match p {
        ShortcutPos::Pos1 => "pos1",
        ShortcutPos::Pos2 => "pos2",
        ShortcutPos::Pos3 => "pos3",
    }
}

impl StrategySpec {
    pub fn label(&self) -> String {
        match *self {
            StrategySpec::StandardSequential { k } => format!("standard-sequential-top{k}"),
            StrategySpec::StandardPipeline { k, chunks } => format!("standard-pipeline-top{k}-c{chunks}"),
            StrategySpec::SharedExpertSequential => "shared-expert-sequential".into(),
            StrategySpec::ScMoeOverlap { pos } => format!("scmoe-overlap-{}", pos_tag(pos)),
            StrategySpec::ScMoeOverlapPipeline { pos, chunks } => {
                format!("scmoe-overlap-pipeline-{}-c{chunks}", pos_tag(pos))
            }
        }
    }

    /// The five timelines compared throughout: both ScMoE forms at `pos`,
    /// shared-expert, and pipelined and plain top-2.
    pub fn figure_set(pos: ShortcutPos, chunks: usize) -> Vec<StrategySpec> {
        vec![
            StrategySpec::ScMoeOverlapPipeline { pos, chunks },
            StrategySpec::ScMoeOverlap { pos },
            StrategySpec::SharedExpertSequential,
            StrategySpec::StandardPipeline { k: 2, chunks },
            StrategySpec::StandardSequential { k: 2 },
        ]
    }
}

/// Per-device operator before expansion across devices.
#[derive(Clone, Debug)]
struct Proto {
    name: String,
    kind: OpKind,
    duration: u64,
    deps: Vec<usize>,
    chunk: Option<usize>,
}

#[derive(Default)]
struct Plan {
    ops: Vec<Proto>,
}

impl Plan {
    fn push(&mut self, name: impl Into<String>, kind: OpKind, duration: u64, deps: Vec<usize>) -> usize {
        self.ops.push(Proto {
            name: name.into(),
            kind,
            duration,
            deps,
            chunk: None,
        });
        self.ops.len() - 1
    }

    fn push_chunk(&mut self, name: &str, kind: OpKind, duration: u64, deps: Vec<usize>, chunk: usize) -> usize {
        let i = self.push(format!("{name}[{chunk}]"), kind, duration, deps);
        self.ops[i].chunk = Some(chunk);
        i
    }

    /// Appends a compute op after `prev`, if any.
    fn then(&mut self, prev: Option<usize>, name: &str, kind: OpKind, duration: u64) -> usize {
        self.push(name, kind, duration, prev.into_iter().collect())
    }

    /// Replicates the plan on every device. Collective ops wait for their
    /// dependencies on all devices.
    fn expand(&self, devices: usize) -> Vec<OpNode> {
        let n = self.ops.len();
        let mut out = Vec::with_capacity(n * devices);
        for (i, p) in self.ops.iter().enumerate() {
            let collective = p.kind.stream() == Stream::Comm;
            for dev in 0..devices {
                let mut deps: Vec<usize> = if collective {
                    p.deps
                        .iter()
                        .flat_map(|&j| (0..devices).map(move |e| j * devices + e))
                        .collect()
                } else {
                    p.deps.iter().map(|&j| j * devices + dev).collect()
                };
                deps.sort_unstable();
                out.push(OpNode {
                    id: i * devices + dev,
                    device: dev,
                    name: p.name.clone(),
                    kind: p.kind,
                    stream: p.kind.stream(),
                    duration: p.duration,
                    deps,
                    chunk: p.chunk,
                });
            }
        }
        out
    }
}

/// Splits `total` into `chunks` parts that sum to it exactly.
pub fn split_evenly(total: u64, chunks: usize) -> Vec<u64> {
    let c = chunks as u128;
    let t = total as u128;
    (0..c).map(|i| ((i + 1) * t / c - i * t / c) as u64).collect()
}

fn chain(plan: &mut Plan, mut prev: Option<usize>, ops: &[(&str, OpKind, u64)]) -> Option<usize> {
    for &(name, kind, d) in ops {
        prev = Some(plan.then(prev, name, kind, d));
    }
    prev
}

fn backbone_prefix(s: &StageDurations, every_block: bool) -> Vec<(&'static str, OpKind, u64)> {
    if every_block {
        vec![("attn", OpKind::Attention, s.attn)]
    } else {
        vec![
            ("attn-prev", OpKind::Attention, s.attn_prev),
            ("mlp-prev", OpKind::Mlp, s.mlp_prev),
            ("attn", OpKind::Attention, s.attn),
        ]
    }
}

fn sequential(s: &StageDurations, every_block: bool, shared: bool) -> Plan {
    let mut plan = Plan::default();
    let mut ops = backbone_prefix(s, every_block);
    ops.extend([
        ("gate", OpKind::GateRoute, s.gate_route),
        ("encode", OpKind::Encode, s.encode),
        ("dispatch", OpKind::Dispatch, s.dispatch),
        ("expert", OpKind::ExpertCompute, s.expert),
        ("combine", OpKind::Combine, s.combine),
        ("decode", OpKind::Decode, s.decode),
    ]);
    if shared {
        ops.extend([
            ("shared-expert", OpKind::SharedExpert, s.shared_expert),
            ("combine-outputs", OpKind::CombineOutputs, s.combine_outputs),
        ]);
    }
    chain(&mut plan, None, &ops);
    plan
}

fn pipeline(s: &StageDurations, every_block: bool, chunks: usize, overhead: u64) -> Plan {
    let mut plan = Plan::default();
    let mut ops = backbone_prefix(s, every_block);
    ops.extend([
        ("gate", OpKind::GateRoute, s.gate_route),
        ("encode", OpKind::Encode, s.encode),
    ]);
    let encode = chain(&mut plan, None, &ops).expect("non-empty");
    let (last_expert, last_combine) = chunked_moe(&mut plan, s, chunks, overhead, encode, encode);
    plan.push("decode", OpKind::Decode, s.decode, vec![last_expert, last_combine]);
    plan
}

/// Dispatch, expert and combine split into `chunks` chained sub-ops.
/// `encode` gates the first dispatch and `compute_prev` the first expert
/// chunk. Returns the last expert and last combine ops.
fn chunked_moe(
    plan: &mut Plan,
    s: &StageDurations,
    chunks: usize,
    overhead: u64,
    encode: usize,
    compute_prev: usize,
) -> (usize, usize) {
    let disp = split_evenly(s.dispatch, chunks);
    let exp = split_evenly(s.expert, chunks);
    let comb = split_evenly(s.combine, chunks);
    let (mut pd, mut pe, mut pc): (Option<usize>, Option<usize>, Option<usize>) = (None, None, None);
    for i in 0..chunks {
        let d = plan.push_chunk(
            "dispatch",
            OpKind::Dispatch,
            disp[i] + overhead,
            vec![pd.unwrap_or(encode)],
            i,
        );
        let mut ed = vec![d, pe.unwrap_or(compute_prev)];
        ed.dedup();
        let e = plan.push_chunk("expert", OpKind::ExpertCompute, exp[i] + overhead, ed, i);
        let mut cd = vec![e];
        cd.extend(pc);
        let c = plan.push_chunk("combine", OpKind::Combine, comb[i] + overhead, cd, i);
        pd = Some(d);
        pe = Some(e);
        pc = Some(c);
    }
    (pe.expect("chunks > 0"), pc.expect("chunks > 0"))
}

/// Backbone operators before the shortcut tap and inside the overlap
/// window, in stream order.
type Split = (Vec<(&'static str, OpKind, u64)>, Vec<(&'static str, OpKind, u64)>);

fn overlap_split(s: &StageDurations, pos: ShortcutPos, every_block: bool) -> Result<Split> {
    let attn_prev = ("attn-prev", OpKind::Attention, s.attn_prev);
    let mlp_prev = ("mlp-prev", OpKind::Mlp, s.mlp_prev);
    let attn = ("attn", OpKind::Attention, s.attn);
    let se = ("shared-expert", OpKind::SharedExpert, s.shared_expert);
    Ok(match (every_block, pos) {
        (true, ShortcutPos::Pos1) => (vec![], vec![attn, se]),
        (true, p) => {
            return Err(SimError::Strategy(format!(
                "{} needs MoE every second block",
                pos_tag(p)
            )))
        }
        (false, ShortcutPos::Pos1) => (vec![attn_prev, mlp_prev], vec![attn, se]),
        (false, ShortcutPos::Pos2) => (vec![attn_prev], vec![mlp_prev, attn, se]),
        (false, ShortcutPos::Pos3) => (vec![], vec![attn_prev, mlp_prev, attn, se]),
    })
}

/// Cost vector handed to the slot scheduler for an overlapped strategy.
pub fn overlap_costs(s: &StageDurations, pos: ShortcutPos, every_block: bool) -> Result<CostVector> {
    let (_, window) = overlap_split(s, pos, every_block)?;
    Ok(CostVector::new(
        window.iter().map(|w| w.2).collect(),
        s.dispatch,
        s.combine,
        s.expert,
    ))
}

fn overlap(
    s: &StageDurations,
    pos: ShortcutPos,
    every_block: bool,
    chunks: Option<(usize, u64)>,
) -> Result<(Plan, usize)> {
    let (pre, window) = overlap_split(s, pos, every_block)?;
    let slot = choose_slot(&overlap_costs(s, pos, every_block)?)?.slot;
    let mut plan = Plan::default();
    let mut ops = pre;
    ops.extend([
        ("gate", OpKind::GateRoute, s.gate_route),
        ("encode", OpKind::Encode, s.encode),
    ]);
    let encode = chain(&mut plan, None, &ops).expect("non-empty");
    let mut prev = chain(&mut plan, Some(encode), &window[..slot]).expect("encode precedes");
    let (last_expert, last_combine) = match chunks {
        None => {
            let d = plan.push("dispatch", OpKind::Dispatch, s.dispatch, vec![encode]);
            let mut deps = vec![d, prev];
            deps.sort_unstable();
            let e = plan.push("expert", OpKind::ExpertCompute, s.expert, deps);
            let c = plan.push("combine", OpKind::Combine, s.combine, vec![e]);
            (e, c)
        }
        Some((n, overhead)) => chunked_moe(&mut plan, s, n, overhead, encode, prev),
    };
    prev = chain(&mut plan, Some(last_expert), &window[slot..]).expect("expert precedes");
    let decode = plan.push("decode", OpKind::Decode, s.decode, vec![prev, last_combine]);
    plan.push(
        "combine-outputs",
        OpKind::CombineOutputs,
        s.combine_outputs,
        vec![decode],
    );
    Ok((plan, slot))
}

fn routed_k(cfg: &ModelConfig, strat: &StrategySpec) -> usize {
    match *strat {
        StrategySpec::StandardSequential { k } | StrategySpec::StandardPipeline { k, .. } => k,
        StrategySpec::SharedExpertSequential => 1,
        StrategySpec::ScMoeOverlap { .. } | StrategySpec::ScMoeOverlapPipeline { .. } => {
            if cfg.variant == Variant::ScMoE {
                cfg.k_routed
            } else {
                1
            }
        }
    }
}

/// A built DAG plus the slot chosen for overlapped strategies.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Dag {
    pub nodes: Vec<OpNode>,
    pub slot: Option<usize>,
}

/// DAG from explicit stage durations.
pub fn dag_from_stages(
    strat: &StrategySpec,
    s: &StageDurations,
    frequency: MoeFrequency,
    devices: usize,
    chunk_overhead: u64,
) -> Result<Dag> {
    let every_block = frequency == MoeFrequency::EveryBlock;
    let check_chunks = |c: usize| {
        if c == 0 {
            Err(SimError::Strategy("pipelining needs at least one chunk".into()))
        } else {
            Ok(())
        }
    };
    let (plan, slot) = match *strat {
        StrategySpec::StandardSequential { .. } => (sequential(s, every_block, false), None),
        StrategySpec::SharedExpertSequential => (sequential(s, every_block, true), None),
        StrategySpec::StandardPipeline { chunks, .. } => {
            check_chunks(chunks)?;
            (pipeline(s, every_block, chunks, chunk_overhead), None)
        }
        StrategySpec::ScMoeOverlap { pos } => {
            let (p, k) = overlap(s, pos, every_block, None)?;
            (p, Some(k))
        }
        StrategySpec::ScMoeOverlapPipeline { pos, chunks } => {
            check_chunks(chunks)?;
            let (p, k) = overlap(s, pos, every_block, Some((chunks, chunk_overhead)))?;
            (p, Some(k))
        }
    };
    if devices == 0 {
        return Err(SimError::Strategy("no devices".into()));
    }
    Ok(Dag {
        nodes: plan.expand(devices),
        slot,
    })
}

pub fn stages_for(
    cfg: &ModelConfig,
    strat: &StrategySpec,
    prof: &HardwareProfile,
    costs: &BlockCosts,
) -> Result<StageDurations> {
    let k = routed_k(cfg, strat);
    if k == 0 || k > prof.n_devices {
        return Err(SimError::Strategy(format!("top-{k} over {} devices", prof.n_devices)));
    }
    StageDurations::for_k(costs, k, prof)
}

pub fn build_dag(cfg: &ModelConfig, strat: &StrategySpec, prof: &HardwareProfile, costs: &BlockCosts) -> Result<Dag> {
    prof.validate()?;
    if cfg.n_experts != prof.n_devices {
        return Err(SimError::Strategy(format!(
            "one expert per device: {} experts on {} devices",
            cfg.n_experts, prof.n_devices
        )));
    }
    let s = stages_for(cfg, strat, prof, costs)?;
    let overhead = to_ticks("chunk_overhead", prof.chunk_overhead)?;
    dag_from_stages(strat, &s, cfg.moe_frequency, prof.n_devices, overhead)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stages() -> StageDurations {
        StageDurations {
            attn_prev: 3,
            mlp_prev: 4,
            attn: 3,
            shared_expert: 4,
            gate_route: 1,
            encode: 1,
            dispatch: 5,
            expert: 6,
            combine: 5,
            decode: 1,
            combine_outputs: 1,
        }
    }

    fn by_name<'a>(d: &'a Dag, name: &str) -> &'a OpNode {
        d.nodes.iter().find(|n| n.name == name && n.device == 0).unwrap()
    }

    #[test]
    fn sequential_top2_is_a_chain() {
        let d = dag_from_stages(
            &StrategySpec::StandardSequential { k: 2 },
            &stages(),
            MoeFrequency::EverySecondBlock,
            1,
            0,
        )
        .unwrap();
        assert_eq!(d.nodes.len(), 9);
        for (i, n) in d.nodes.iter().enumerate() {
            let want: Vec<usize> = if i == 0 { vec![] } else { vec![i - 1] };
            assert_eq!(n.deps, want);
        }
        let moe: Vec<_> = d.nodes[3..].iter().map(|n| n.kind).collect();
        assert_eq!(
            moe,
            [
                OpKind::GateRoute,
                OpKind::Encode,
                OpKind::Dispatch,
                OpKind::ExpertCompute,
                OpKind::Combine,
                OpKind::Decode
            ]
        );
    }

    #[test]
    fn overlap_dependency_contract() {
        let d = dag_from_stages(
            &StrategySpec::ScMoeOverlap { pos: ShortcutPos::Pos2 },
            &stages(),
            MoeFrequency::EverySecondBlock,
            1,
            0,
        )
        .unwrap();
        let id = |n: &str| by_name(&d, n).id;
        assert_eq!(by_name(&d, "dispatch").deps, vec![id("encode")]);
        assert_eq!(by_name(&d, "combine").deps, vec![id("expert")]);
        let co = by_name(&d, "combine-outputs");
        let decode = by_name(&d, "decode");
        assert_eq!(co.deps, vec![decode.id]);
        assert!(decode.deps.contains(&id("combine")));
        fn ancestors(d: &Dag, id: usize, out: &mut Vec<usize>) {
            for &p in &d.nodes[id].deps {
                if !out.contains(&p) {
                    out.push(p);
                    ancestors(d, p, out);
                }
            }
        }
        let mut se = Vec::new();
        ancestors(&d, id("shared-expert"), &mut se);
        assert!(!se.contains(&id("combine")));
        let mut all = Vec::new();
        ancestors(&d, co.id, &mut all);
        assert!(all.contains(&id("shared-expert")) && all.contains(&id("combine")));
    }

    #[test]
    fn pipeline_second_dispatch_is_independent_of_first_expert() {
        let d = dag_from_stages(
            &StrategySpec::StandardPipeline { k: 2, chunks: 2 },
            &stages(),
            MoeFrequency::EverySecondBlock,
            1,
            0,
        )
        .unwrap();
        let d1 = by_name(&d, "dispatch[1]");
        let e0 = by_name(&d, "expert[0]");
        assert_eq!(d1.stream, Stream::Comm);
        assert_eq!(e0.stream, Stream::Compute);
        assert!(!d1.deps.contains(&e0.id));
        assert_eq!(d1.deps, vec![by_name(&d, "dispatch[0]").id]);
    }

    #[test]
    fn collectives_wait_for_all_devices() {
        let d = dag_from_stages(
            &StrategySpec::StandardSequential { k: 1 },
            &stages(),
            MoeFrequency::EveryBlock,
            3,
            0,
        )
        .unwrap();
        let disp: Vec<_> = d.nodes.iter().filter(|n| n.kind == OpKind::Dispatch).collect();
        assert_eq!(disp.len(), 3);
        for n in disp {
            assert_eq!(n.deps.len(), 3);
        }
    }

    #[test]
    fn split_sums_exactly() {
        assert_eq!(split_evenly(7, 3), vec![2, 2, 3]);
        assert_eq!(split_evenly(7, 3).iter().sum::<u64>(), 7);
        assert_eq!(split_evenly(0, 2), vec![0, 0]);
    }

    #[test]
    fn invalid_combinations() {
        let s = stages();
        assert!(dag_from_stages(
            &StrategySpec::ScMoeOverlap { pos: ShortcutPos::Pos2 },
            &s,
            MoeFrequency::EveryBlock,
            1,
            0
        )
        .is_err());
        assert!(dag_from_stages(
            &StrategySpec::StandardPipeline { k: 2, chunks: 0 },
            &s,
            MoeFrequency::EverySecondBlock,
            1,
            0
        )
        .is_err());
    }

    #[test]
    fn strategy_json() {
        let s: StrategySpec = serde_json::from_str(r#"{"kind":"scmoe-overlap","pos":"pos2"}"#).unwrap();
        assert_eq!(s, StrategySpec::ScMoeOverlap { pos: ShortcutPos::Pos2 });
        assert_eq!(s.label(), "scmoe-overlap-pos2");
    }
}
