use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Variant {
    StandardTopK,
    SharedExpert,
    #[serde(rename = "scmoe")]
    ScMoE,
    #[serde(rename = "dgmoe")]
    DgMoE,
}

/// Which representation of the preceding block feeds the routed experts.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ShortcutPos {
    /// Preceding block output.
    Pos1,
    /// Preceding block post-attention intermediate.
    Pos2,
    /// Preceding block input.
    Pos3,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CombineMode {
    DirectAdd,
    Cg1,
    Cg2,
}

impl CombineMode {
    /// Rows of the coefficient-gate weight, if any.
    pub fn cg_rows(self) -> Option<usize> {
        match self {
            CombineMode::DirectAdd => None,
            CombineMode::Cg1 => Some(1),
            CombineMode::Cg2 => Some(2),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MoeFrequency {
    EveryBlock,
    EverySecondBlock,
}

fn default_capacity() -> f64 {
    2.0
}

/// Architecture selector for a full model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub layers: usize,
    pub d_model: usize,
    pub d_hidden: usize,
    pub n_experts: usize,
    pub k_routed: usize,
    pub moe_frequency: MoeFrequency,
    pub variant: Variant,
    #[serde(default)]
    pub shortcut_pos: Option<ShortcutPos>,
    #[serde(default = "default_combine")]
    pub combine: CombineMode,
    #[serde(default = "default_capacity")]
    pub capacity_factor: f64,
    /// First MoE layer uses Pos-1 while the rest use `shortcut_pos`.
    #[serde(default)]
    pub first_layer_pos_override: bool,
    #[serde(default)]
    pub pre_ln: bool,
    #[serde(default)]
    pub gate_noise: bool,
    /// DGMoE: the current gating avoids the preceding gating's expert.
    #[serde(default = "default_true")]
    pub dgmoe_distinct: bool,
}

fn default_true() -> bool {
    true
}

fn default_combine() -> CombineMode {
    CombineMode::DirectAdd
}

impl ModelConfig {
    /// Small two-block configuration used throughout the tests.
    pub fn tiny(variant: Variant) -> Self {
        let shortcut_pos = matches!(variant, Variant::ScMoE | Variant::DgMoE).then_some(ShortcutPos::Pos2);
        Self {
            layers: 2,
            d_model: 6,
            d_hidden: 8,
            n_experts: 4,
            k_routed: if variant == Variant::StandardTopK { 2 } else { 1 },
            moe_frequency: MoeFrequency::EverySecondBlock,
            variant,
            shortcut_pos,
            combine: CombineMode::DirectAdd,
            capacity_factor: 2.0,
            first_layer_pos_override: false,
            pre_ln: false,
            gate_noise: false,
            dgmoe_distinct: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.layers == 0 || self.d_model == 0 || self.d_hidden == 0 || self.n_experts == 0 {
            return fail("layers, d_model, d_hidden and n_experts must be positive".into());
        }
        if self.k_routed == 0 || self.k_routed > self.n_experts {
            return fail(format!("k_routed={} must lie in 1..={}", self.k_routed, self.n_experts));
        }
        if !(self.capacity_factor > 0.0) {
            return fail(format!("capacity_factor must be > 0, got {}", self.capacity_factor));
        }
        if self.moe_frequency == MoeFrequency::EverySecondBlock && self.layers % 2 != 0 {
            return fail(format!(
                "every-second-block placement needs an even layer count, got {}",
                self.layers
            ));
        }
        let shortcut = matches!(self.variant, Variant::ScMoE | Variant::DgMoE);
        match (shortcut, self.shortcut_pos) {
            (true, None) => return fail(format!("{:?} requires shortcut_pos", self.variant)),
            (false, Some(_)) => return fail(format!("{:?} takes no shortcut_pos", self.variant)),
            _ => {}
        }
        if shortcut && self.moe_frequency == MoeFrequency::EveryBlock && self.shortcut_pos != Some(ShortcutPos::Pos1) {
            return fail("every-block placement only supports the Pos-1 shortcut".into());
        }
        if self.first_layer_pos_override && !(shortcut && self.moe_frequency == MoeFrequency::EverySecondBlock) {
            return fail("first_layer_pos_override applies to shortcut variants placed every second block".into());
        }
        if self.variant == Variant::DgMoE {
            if self.n_experts < 2 {
                return fail("DGMoE needs at least two experts for the distinct-expert constraint".into());
            }
            if self.k_routed != 1 {
                return fail("DGMoE uses two top-1 gatings; k_routed must be 1".into());
            }
        }
        if self.combine != CombineMode::DirectAdd && !matches!(self.variant, Variant::SharedExpert | Variant::ScMoE) {
            return fail(format!(
                "{:?} combine applies only to shared-expert variants",
                self.combine
            ));
        }
        Ok(())
    }

    pub fn is_moe_block(&self, block: usize) -> bool {
        match self.moe_frequency {
            MoeFrequency::EveryBlock => true,
            MoeFrequency::EverySecondBlock => block % 2 == 1,
        }
    }

    pub fn moe_blocks(&self) -> Vec<usize> {
        (0..self.layers).filter(|&b| self.is_moe_block(b)).collect()
    }

    /// Shortcut position of the `j`-th MoE layer.
    pub fn shortcut_for(&self, moe_index: usize) -> Option<ShortcutPos> {
        if self.first_layer_pos_override && moe_index == 0 {
            return self.shortcut_pos.map(|_| ShortcutPos::Pos1);
        }
        self.shortcut_pos
    }

    pub fn has_shared_expert(&self) -> bool {
        matches!(self.variant, Variant::SharedExpert | Variant::ScMoE)
    }
}
