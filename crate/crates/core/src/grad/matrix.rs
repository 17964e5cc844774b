//! Gradient checks over every architecture and combine mode at tiny size.

use serde::{Deserialize, Serialize};

use super::backward::LossSpec;
use super::fd::{check_model, FdScheme, GradCheckReport, ModelObjective, DEFAULT_REL_FLOOR};
use crate::arch::{CombineMode, ModelConfig, ModelParams, MoeFrequency, ShortcutPos, Variant};
use crate::error::Result;
use crate::numkit::Rng;

/// Outer step of the extrapolated differences used by the matrix.
pub const MATRIX_FD_EPS: f64 = 1e-3;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckCase {
    pub label: String,
    pub config: ModelConfig,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradCheckOutcome {
    pub label: String,
    pub report: GradCheckReport,
}

fn base(variant: Variant, k: usize, pos: Option<ShortcutPos>, combine: CombineMode) -> ModelConfig {
    ModelConfig {
        layers: 2,
        d_model: 6,
        d_hidden: 8,
        n_experts: 4,
        k_routed: k,
        moe_frequency: MoeFrequency::EverySecondBlock,
        variant,
        shortcut_pos: pos,
        combine,
        capacity_factor: 2.0,
        first_layer_pos_override: false,
        pre_ln: false,
        gate_noise: true,
        dgmoe_distinct: true,
    }
}

fn combine_tag(c: CombineMode) -> &'static str {
    match c {
        CombineMode::DirectAdd => "direct-add",
        CombineMode::Cg1 => "cg1",
        CombineMode::Cg2 => "cg2",
    }
}

/// d=6, h=8, N=4, L=2 with gate noise on, for each variant, shortcut
/// position and applicable combine mode.
pub fn gradcheck_cases() -> Vec<GradCheckCase> {
    let modes = [CombineMode::DirectAdd, CombineMode::Cg1, CombineMode::Cg2];
    let mut out = vec![
        GradCheckCase {
            label: "standard-top1".into(),
            config: base(Variant::StandardTopK, 1, None, CombineMode::DirectAdd),
        },
        GradCheckCase {
            label: "standard-top2".into(),
            config: base(Variant::StandardTopK, 2, None, CombineMode::DirectAdd),
        },
    ];
    for m in modes {
        out.push(GradCheckCase {
            label: format!("shared-expert/{}", combine_tag(m)),
            config: base(Variant::SharedExpert, 1, None, m),
        });
    }
    for (pos, tag) in [
        (ShortcutPos::Pos1, "pos1"),
        (ShortcutPos::Pos2, "pos2"),
        (ShortcutPos::Pos3, "pos3"),
    ] {
        for m in modes {
            out.push(GradCheckCase {
                label: format!("scmoe-{tag}/{}", combine_tag(m)),
                config: base(Variant::ScMoE, 1, Some(pos), m),
            });
        }
    }
    out.push(GradCheckCase {
        label: "dgmoe-pos2".into(),
        config: base(Variant::DgMoE, 1, Some(ShortcutPos::Pos2), CombineMode::DirectAdd),
    });
    for m in modes {
        out.push(GradCheckCase {
            label: format!("scmoe2-pos2/{}", combine_tag(m)),
            config: base(Variant::ScMoE, 2, Some(ShortcutPos::Pos2), m),
        });
    }
    out
}

/// Builds the replayed objective for one case: MSE against a random target
/// over `tokens` rows, aux coefficient 0.01.
pub fn case_objective(cfg: &ModelConfig, tokens: usize, seed: u64) -> Result<ModelObjective> {
    let params = ModelParams::init(cfg, Rng::derive(seed, 0).next_u64())?;
    let x = Rng::derive(seed, 1).normal_matrix(tokens, cfg.d_model, 1.0);
    let target = Rng::derive(seed, 2).normal_matrix(tokens, cfg.d_model, 1.0);
    ModelObjective::new(
        cfg.clone(),
        params,
        x,
        LossSpec::Mse(target),
        0.01,
        Rng::derive(seed, 3).next_u64(),
    )
}

/// Runs every case at T=5.
pub fn gradcheck_matrix(seed: u64) -> Result<Vec<GradCheckOutcome>> {
    gradcheck_cases()
        .into_iter()
        .map(|c| {
            let obj = case_objective(&c.config, 5, seed)?;
            let report = check_model(&obj, MATRIX_FD_EPS, FdScheme::Richardson, DEFAULT_REL_FLOOR, true)?;
            Ok(GradCheckOutcome { label: c.label, report })
        })
        .collect()
}
