//! Per-operator durations derived from flop counts of the toy kernels.

use serde::{Deserialize, Serialize};

use super::profile::{alltoall_duration, to_ticks, HardwareProfile};
use crate::error::Result;
use scmoe_core::arch::ModelConfig;

fn default_bytes() -> usize {
    2
}

fn default_gate() -> f64 {
    0.02
}

fn default_combine() -> f64 {
    0.01
}

/// Tokens and element width per device, plus the small-operator durations
/// as fractions of one expert's compute.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    pub tokens_per_device: usize,
    /// Attention span; tokens are split into sequences of this length.
    pub seq_len: usize,
    #[serde(default = "default_bytes")]
    pub bytes_per_element: usize,
    #[serde(default = "default_gate")]
    pub gate_fraction: f64,
    #[serde(default = "default_gate")]
    pub encode_fraction: f64,
    #[serde(default = "default_gate")]
    pub decode_fraction: f64,
    #[serde(default = "default_combine")]
    pub combine_outputs_fraction: f64,
}

impl Workload {
    pub fn reference() -> Self {
        Self {
            tokens_per_device: 1024,
            seq_len: 1024,
            bytes_per_element: default_bytes(),
            gate_fraction: default_gate(),
            encode_fraction: default_gate(),
            decode_fraction: default_gate(),
            combine_outputs_fraction: default_combine(),
        }
    }
}

/// Flop counts of the forward kernels in `scmoe_core::arch`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelFlops {
    /// Four `d×d` projections plus scores and weighted sum.
    pub attention: f64,
    /// Two matmuls `d→h→d`, also the cost of one expert on the same tokens.
    pub mlp: f64,
}

/// `2mkn` per `m×k · k×n` matmul; elementwise work is ignored.
pub fn kernel_flops(d: usize, h: usize, tokens: usize, seq_len: usize) -> KernelFlops {
    let (d, h, t) = (d as f64, h as f64, tokens as f64);
    let s = seq_len.min(tokens).max(1) as f64;
    KernelFlops {
        attention: 4.0 * 2.0 * t * d * d + 2.0 * 2.0 * t * s * d,
        mlp: 2.0 * 2.0 * t * d * h,
    }
}

/// Durations in ticks of the operators of one block pair, per device.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockCosts {
    pub attention: u64,
    pub mlp: u64,
    pub shared_expert: u64,
    /// One routed expert on one selection per token.
    pub expert: u64,
    pub gate_route: u64,
    pub encode: u64,
    pub decode: u64,
    pub combine_outputs: u64,
    /// Bytes each device dispatches per routed selection slot.
    pub token_bytes: f64,
}

impl BlockCosts {
    pub fn from_flops(cfg: &ModelConfig, w: &Workload, prof: &HardwareProfile) -> Result<Self> {
        let f = kernel_flops(cfg.d_model, cfg.d_hidden, w.tokens_per_device, w.seq_len);
        let expert = f.mlp * prof.flop_time;
        Ok(Self {
            attention: to_ticks("attention", f.attention * prof.flop_time)?,
            mlp: to_ticks("mlp", f.mlp * prof.flop_time)?,
            shared_expert: to_ticks("shared expert", expert)?,
            expert: to_ticks("expert", expert)?,
            gate_route: to_ticks("gate", w.gate_fraction * expert)?,
            encode: to_ticks("encode", w.encode_fraction * expert)?,
            decode: to_ticks("decode", w.decode_fraction * expert)?,
            combine_outputs: to_ticks("combine outputs", w.combine_outputs_fraction * expert)?,
            token_bytes: (w.tokens_per_device * cfg.d_model * w.bytes_per_element) as f64,
        })
    }
}

/// Concrete durations of every stage for one strategy.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageDurations {
    pub attn_prev: u64,
    pub mlp_prev: u64,
    pub attn: u64,
    pub shared_expert: u64,
    pub gate_route: u64,
    pub encode: u64,
    pub dispatch: u64,
    pub expert: u64,
    pub combine: u64,
    pub decode: u64,
    pub combine_outputs: u64,
}

impl StageDurations {
    /// Durations with `k` routed selections per token.
    pub fn for_k(c: &BlockCosts, k: usize, prof: &HardwareProfile) -> Result<Self> {
        let comm = alltoall_duration(k as f64 * c.token_bytes, prof)?;
        Ok(Self {
            attn_prev: c.attention,
            mlp_prev: c.mlp,
            attn: c.attention,
            shared_expert: c.shared_expert,
            gate_route: c.gate_route,
            encode: c.encode,
            dispatch: comm,
            expert: k as u64 * c.expert,
            combine: comm,
            decode: c.decode,
            combine_outputs: c.combine_outputs,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use scmoe_core::arch::{attention_forward, expert_forward, AttentionParams, ExpertParams};
    use scmoe_core::numkit::Rng;

    #[test]
    fn flop_counts() {
        let f = kernel_flops(4, 8, 3, 3);
        assert_eq!(f.attention, 8.0 * 3.0 * 16.0 + 4.0 * 9.0 * 4.0);
        assert_eq!(f.mlp, 4.0 * 3.0 * 4.0 * 8.0);
        let g = kernel_flops(4, 8, 6, 3);
        assert_eq!(g.attention, 8.0 * 6.0 * 16.0 + 4.0 * 6.0 * 3.0 * 4.0);
    }

    #[test]
    fn kernels_have_the_counted_shapes() {
        let mut rng = Rng::new(1);
        let x = rng.normal_matrix(3, 4, 1.0);
        let a = AttentionParams::random(4, &mut rng, 1.0);
        assert_eq!(attention_forward(&x, &a).unwrap().shape(), (3, 4));
        for w in [&a.wq, &a.wk, &a.wv, &a.wo] {
            assert_eq!(w.shape(), (4, 4));
        }
        let e = ExpertParams::random(4, 8, &mut rng, 1.0);
        assert_eq!(e.w1.shape(), (4, 8));
        assert_eq!(expert_forward(&x, &e).unwrap().shape(), (3, 4));
    }

    #[test]
    fn reference_costs() {
        let mut cfg = ModelConfig::tiny(scmoe_core::arch::Variant::StandardTopK);
        cfg.d_model = 1024;
        cfg.d_hidden = 4096;
        let c = BlockCosts::from_flops(&cfg, &Workload::reference(), &HardwareProfile::reference()).unwrap();
        assert_eq!(c.mlp, c.expert);
        assert!(c.attention < c.mlp);
        let s = StageDurations::for_k(&c, 2, &HardwareProfile::reference()).unwrap();
        assert_eq!(s.expert, 2 * c.expert);
        assert_eq!(s.dispatch, 0);
    }
}
