//! Single-device decoding with routed experts held in host memory.

use serde::{Deserialize, Serialize};

use crate::distsim::{run_sim, to_ticks, HardwareProfile, OpKind, OpNode, Timeline};
use crate::error::{Result, SimError};
use scmoe_core::arch::{param_shapes, CombineMode, ModelConfig, MoeFrequency, ShortcutPos, Variant};
use scmoe_core::numkit::Rng;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OffloadMode {
    GpuOnly,
    OffloadBlocking,
    OffloadAsync,
}

impl OffloadMode {
    pub const ALL: [OffloadMode; 3] = [
        OffloadMode::GpuOnly,
        OffloadMode::OffloadBlocking,
        OffloadMode::OffloadAsync,
    ];
}

fn default_bpp() -> u64 {
    4
}

/// Sizes that the block parameters alone do not determine.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSizes {
    pub vocab: usize,
    pub context: usize,
    #[serde(default = "default_bpp")]
    pub bytes_per_param: u64,
    /// KV cache and activations held while decoding.
    #[serde(default)]
    pub runtime_bytes: u64,
}

impl ModelSizes {
    /// KV cache bytes for `batch` sequences at full context.
    pub fn kv_cache_bytes(cfg: &ModelConfig, context: usize, batch: usize, bytes_per_param: u64) -> u64 {
        2 * (cfg.layers * context * cfg.d_model * batch) as u64 * bytes_per_param
    }
}

/// 24 blocks at width 1024, eight experts every second block, fp32, with
/// the KV cache of eight full-context sequences.
pub fn gpt2_medium_like() -> (ModelConfig, ModelSizes) {
    let cfg = ModelConfig {
        layers: 24,
        d_model: 1024,
        d_hidden: 4096,
        n_experts: 8,
        k_routed: 1,
        moe_frequency: MoeFrequency::EverySecondBlock,
        variant: Variant::ScMoE,
        shortcut_pos: Some(ShortcutPos::Pos2),
        combine: CombineMode::DirectAdd,
        capacity_factor: 2.0,
        first_layer_pos_override: false,
        pre_ln: false,
        gate_noise: false,
        dgmoe_distinct: true,
    };
    let sizes = ModelSizes {
        vocab: 50257,
        context: 1024,
        bytes_per_param: 4,
        runtime_bytes: ModelSizes::kv_cache_bytes(&cfg, 1024, 8, 4),
    };
    (cfg, sizes)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamGroup {
    pub name: String,
    pub bytes: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffloadPlan {
    pub resident: Vec<ParamGroup>,
    pub offloaded: Vec<ParamGroup>,
    /// Bytes of one routed expert.
    pub expert_bytes: u64,
    /// Experts fetched per token and MoE layer.
    pub activated: usize,
    pub runtime_bytes: u64,
    pub host_alpha: f64,
    pub host_beta: f64,
    pub variant: Variant,
    pub shortcut_pos: Option<ShortcutPos>,
}

/// Experts a single token activates in one MoE layer.
pub fn activated_experts(cfg: &ModelConfig) -> usize {
    match cfg.variant {
        Variant::DgMoE => 2,
        _ => cfg.k_routed,
    }
}

fn is_routed_expert(name: &str) -> bool {
    name.contains(".moe.experts.")
}

/// Routed experts go to the host; everything else stays on the device.
pub fn plan_offload(cfg: &ModelConfig, sizes: &ModelSizes, prof: &HardwareProfile) -> Result<OffloadPlan> {
    prof.validate()?;
    let bpp = sizes.bytes_per_param;
    let d = cfg.d_model;
    let mut resident = vec![
        ParamGroup {
            name: "embed.tokens".into(),
            bytes: (sizes.vocab * d) as u64 * bpp,
        },
        ParamGroup {
            name: "embed.positions".into(),
            bytes: (sizes.context * d) as u64 * bpp,
        },
    ];
    let mut offloaded = Vec::new();
    for (name, (r, c)) in param_shapes(cfg)? {
        let g = ParamGroup {
            name,
            bytes: (r * c) as u64 * bpp,
        };
        if is_routed_expert(&g.name) {
            offloaded.push(g);
        } else {
            resident.push(g);
        }
    }
    let (h, d) = (cfg.d_hidden as u64, d as u64);
    Ok(OffloadPlan {
        resident,
        offloaded,
        expert_bytes: (2 * d * h + h + d) * bpp,
        activated: activated_experts(cfg),
        runtime_bytes: sizes.runtime_bytes,
        host_alpha: prof.host_alpha,
        host_beta: prof.host_beta,
        variant: cfg.variant,
        shortcut_pos: cfg.shortcut_pos,
    })
}

impl OffloadPlan {
    pub fn resident_bytes(&self) -> u64 {
        self.resident.iter().map(|g| g.bytes).sum()
    }

    pub fn offloaded_bytes(&self) -> u64 {
        self.offloaded.iter().map(|g| g.bytes).sum()
    }

    pub fn param_bytes(&self) -> u64 {
        self.resident_bytes() + self.offloaded_bytes()
    }

    /// Bytes moved per token and MoE layer.
    pub fn migration_bytes(&self) -> u64 {
        self.activated as u64 * self.expert_bytes
    }

    pub fn peak_memory(&self, mode: OffloadMode) -> u64 {
        match mode {
            OffloadMode::GpuOnly => self.param_bytes() + self.runtime_bytes,
            OffloadMode::OffloadBlocking | OffloadMode::OffloadAsync => {
                self.resident_bytes() + self.migration_bytes() + self.runtime_bytes
            }
        }
    }

    /// `1 − peak(offload) / peak(gpu-only)`.
    pub fn memory_reduction(&self) -> f64 {
        1.0 - self.peak_memory(OffloadMode::OffloadAsync) as f64 / self.peak_memory(OffloadMode::GpuOnly) as f64
    }

    pub fn migration_duration(&self) -> Result<u64> {
        to_ticks(
            "migration",
            self.host_alpha + self.host_beta * self.migration_bytes() as f64,
        )
    }
}

/// Per-token decode durations, in ticks, of one Block-MLP + Block-MoE pair.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecodeCosts {
    pub attention: u64,
    pub mlp: u64,
    pub shared_expert: u64,
    pub gate: u64,
    /// All activated experts together.
    pub expert: u64,
    pub combine_outputs: u64,
}

impl DecodeCosts {
    /// One new token attending over the full context: attention
    /// `8d² + 4·ctx·d` flops, feed-forward `4dh`, gate and output merge at
    /// 2% and 1% of one expert.
    pub fn from_flops(cfg: &ModelConfig, sizes: &ModelSizes, prof: &HardwareProfile) -> Result<Self> {
        prof.validate()?;
        let (d, h, s) = (cfg.d_model as f64, cfg.d_hidden as f64, sizes.context as f64);
        let ft = prof.flop_time;
        let ffn = 4.0 * d * h * ft;
        let k = activated_experts(cfg) as f64;
        Ok(Self {
            attention: to_ticks("attention", (8.0 * d * d + 4.0 * s * d) * ft)?,
            mlp: to_ticks("mlp", ffn)?,
            shared_expert: if cfg.has_shared_expert() {
                to_ticks("shared expert", ffn)?
            } else {
                0
            },
            gate: to_ticks("gate", 0.02 * ffn)?,
            expert: to_ticks("expert", k * ffn)?,
            combine_outputs: to_ticks("combine outputs", 0.01 * ffn)?,
        })
    }

    /// Compute between the shortcut gate and the expert computation.
    pub fn window(&self, pos: ShortcutPos) -> u64 {
        match pos {
            ShortcutPos::Pos1 => self.attention + self.shared_expert,
            ShortcutPos::Pos2 => self.attention + self.shared_expert + self.mlp,
            ShortcutPos::Pos3 => 2 * self.attention + self.shared_expert + self.mlp,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OffloadReport {
    pub mode: OffloadMode,
    pub peak_memory: u64,
    /// Makespan of the decoded pair.
    pub latency: u64,
    pub stall: u64,
    pub migration: u64,
    pub window: u64,
    /// Share of the migration hidden behind compute.
    pub overlap_fraction: f64,
    pub timeline: Timeline,
}

impl OffloadReport {
    /// `stage,start,end` rows of the compute and transfer spans.
    pub fn to_csv(&self) -> String {
        let mut out = String::from("stage,start,end\n");
        for s in &self.timeline.spans {
            out.push_str(&format!("{},{},{}\n", s.name, s.start, s.end));
        }
        out
    }
}

struct Seq {
    nodes: Vec<OpNode>,
}

impl Seq {
    fn push(&mut self, name: &str, kind: OpKind, duration: u64, deps: Vec<usize>) -> usize {
        let id = self.nodes.len();
        self.nodes.push(OpNode {
            id,
            device: 0,
            name: name.into(),
            kind,
            stream: kind.stream(),
            duration,
            deps,
            chunk: None,
        });
        id
    }

    /// Appends a compute op after `prev`.
    fn then(&mut self, prev: Option<usize>, name: &str, kind: OpKind, duration: u64) -> usize {
        self.push(name, kind, duration, prev.into_iter().collect())
    }
}

pub fn simulate_decode(plan: &OffloadPlan, costs: &DecodeCosts, mode: OffloadMode) -> Result<OffloadReport> {
    let shortcut = match plan.variant {
        Variant::ScMoE => plan.shortcut_pos,
        _ => None,
    };
    if mode == OffloadMode::OffloadAsync && shortcut.is_none() {
        return Err(SimError::Strategy(format!(
            "asynchronous migration needs a shortcut-connected model, got {:?}",
            plan.variant
        )));
    }
    let migration = match mode {
        OffloadMode::GpuOnly => 0,
        _ => plan.migration_duration()?,
    };

    let c = costs;
    let mut q = Seq { nodes: Vec::new() };
    let mut gate = None;
    let mut prev = None;
    let gate_here = |q: &mut Seq, prev: &mut Option<usize>, gate: &mut Option<usize>, at: ShortcutPos| {
        if shortcut == Some(at) {
            let g = q.then(*prev, "gate", OpKind::GateRoute, c.gate);
            *prev = Some(g);
            *gate = Some(g);
        }
    };
    gate_here(&mut q, &mut prev, &mut gate, ShortcutPos::Pos3);
    prev = Some(q.then(prev, "attn-prev", OpKind::Attention, c.attention));
    gate_here(&mut q, &mut prev, &mut gate, ShortcutPos::Pos2);
    prev = Some(q.then(prev, "mlp-prev", OpKind::Mlp, c.mlp));
    gate_here(&mut q, &mut prev, &mut gate, ShortcutPos::Pos1);
    prev = Some(q.then(prev, "attn", OpKind::Attention, c.attention));
    if shortcut.is_none() {
        let g = q.then(prev, "gate", OpKind::GateRoute, c.gate);
        prev = Some(g);
        gate = Some(g);
    }
    if c.shared_expert > 0 {
        prev = Some(q.then(prev, "shared-expert", OpKind::SharedExpert, c.shared_expert));
    }
    let mut expert_deps: Vec<usize> = prev.into_iter().collect();
    match mode {
        OffloadMode::GpuOnly => {}
        OffloadMode::OffloadBlocking => {
            let m = q.push("migration", OpKind::Migration, migration, expert_deps.clone());
            expert_deps = vec![m];
        }
        OffloadMode::OffloadAsync => {
            let m = q.push("migration", OpKind::Migration, migration, gate.into_iter().collect());
            expert_deps.push(m);
        }
    }
    let e = q.push("expert", OpKind::ExpertCompute, c.expert, expert_deps);
    q.then(Some(e), "combine-outputs", OpKind::CombineOutputs, c.combine_outputs);

    let timeline = run_sim(&q.nodes)?;
    let expert = timeline.span(0, "expert").expect("expert span");
    let ready = timeline
        .spans
        .iter()
        .filter(|s| s.kind != OpKind::Migration && s.end <= expert.start && s.name != "expert")
        .map(|s| s.end)
        .max()
        .unwrap_or(0);
    let stall = expert.start - ready;
    let window = match (mode, shortcut) {
        (OffloadMode::OffloadAsync, Some(p)) => c.window(p),
        _ => 0,
    };
    Ok(OffloadReport {
        mode,
        peak_memory: plan.peak_memory(mode),
        latency: timeline.makespan,
        stall,
        migration,
        window,
        overlap_fraction: if migration == 0 {
            1.0
        } else {
            (migration - stall) as f64 / migration as f64
        },
        timeline,
    })
}

/// Host link inverse bandwidth at which the migration lasts
/// `window / ratio` ticks, with zero host latency.
pub fn host_beta_for_window_ratio(plan: &OffloadPlan, costs: &DecodeCosts, ratio: f64) -> Result<f64> {
    let pos = match (plan.variant, plan.shortcut_pos) {
        (Variant::ScMoE, Some(p)) => p,
        _ => {
            return Err(SimError::Calibration(
                "window ratio needs a shortcut-connected model".into(),
            ))
        }
    };
    if !(ratio > 0.0) || !ratio.is_finite() {
        return Err(SimError::Calibration(format!("ratio must be positive, got {ratio}")));
    }
    if plan.migration_bytes() == 0 {
        return Err(SimError::Calibration("nothing to migrate".into()));
    }
    Ok(costs.window(pos) as f64 / ratio / plan.migration_bytes() as f64)
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct OffloadCheck {
    pub cases: usize,
    /// Async stall differs from `max(0, migration − window)`.
    pub async_stall_mismatches: usize,
    /// Blocking stall differs from the migration time.
    pub blocking_stall_mismatches: usize,
    /// Async slower than blocking.
    pub async_slower: usize,
    /// Latency differs from GPU-only latency plus stall.
    pub latency_mismatches: usize,
}

impl OffloadCheck {
    pub fn passed(&self) -> bool {
        self.async_stall_mismatches == 0
            && self.blocking_stall_mismatches == 0
            && self.async_slower == 0
            && self.latency_mismatches == 0
    }
}

/// Random decode costs, host links and shortcut positions on a small
/// ScMoE model.
pub fn check_random_profiles(cases: usize, seed: u64) -> Result<OffloadCheck> {
    let mut rng = Rng::new(seed);
    let sizes = ModelSizes {
        vocab: 16,
        context: 8,
        bytes_per_param: 4,
        runtime_bytes: 0,
    };
    let mut out = OffloadCheck {
        cases,
        ..OffloadCheck::default()
    };
    let positions = [ShortcutPos::Pos1, ShortcutPos::Pos2, ShortcutPos::Pos3];
    for _ in 0..cases {
        let mut cfg = ModelConfig::tiny(Variant::ScMoE);
        cfg.shortcut_pos = Some(positions[rng.below(3)]);
        cfg.k_routed = 1 + rng.below(cfg.n_experts);
        let prof = HardwareProfile {
            host_alpha: rng.uniform_range(0.0, 500.0),
            host_beta: rng.uniform_range(0.0, 20.0),
            ..HardwareProfile::reference()
        };
        let plan = plan_offload(&cfg, &sizes, &prof)?;
        let mut t = |hi: usize| rng.below(hi + 1) as u64;
        let costs = DecodeCosts {
            attention: t(2000),
            mlp: t(2000),
            shared_expert: t(2000),
            gate: t(100),
            expert: t(2000),
            combine_outputs: t(100),
        };
        let gpu = simulate_decode(&plan, &costs, OffloadMode::GpuOnly)?;
        let blk = simulate_decode(&plan, &costs, OffloadMode::OffloadBlocking)?;
        let asy = simulate_decode(&plan, &costs, OffloadMode::OffloadAsync)?;
        if asy.stall != asy.migration.saturating_sub(asy.window) {
            out.async_stall_mismatches += 1;
        }
        if blk.stall != blk.migration {
            out.blocking_stall_mismatches += 1;
        }
        if asy.latency > blk.latency || asy.stall > blk.stall {
            out.async_slower += 1;
        }
        if blk.latency != gpu.latency + blk.stall || asy.latency != gpu.latency + asy.stall {
            out.latency_mismatches += 1;
        }
    }
    Ok(out)
}
