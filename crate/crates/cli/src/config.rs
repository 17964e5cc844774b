//! Experiment configuration.
//!
//! Every command that draws random numbers takes them from one top-level
//! seed. Command `c` uses `Rng::derive(seed, STREAM_c).next_u64()` as its own
//! seed, with the stream constants below.

use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use scmoe_core::arch::ModelConfig;
use scmoe_core::grad::{Task, TrainConfig};
use scmoe_core::numkit::Rng;
use scmoe_sim::distsim::{HardwareProfile, StrategySpec, Workload};
use scmoe_sim::offload::ModelSizes;

pub const TRAIN_STREAM: u64 = 1;
pub const GRADCHECK_STREAM: u64 = 2;

pub fn sub_seed(seed: u64, stream: u64) -> u64 {
    Rng::derive(seed, stream).next_u64()
}

fn reference_hardware() -> HardwareProfile {
    HardwareProfile::reference()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    #[serde(default = "reference_hardware")]
    pub hardware: HardwareProfile,
    /// Strategies to simulate; empty means the standard comparison set.
    #[serde(default)]
    pub strategies: Vec<StrategySpec>,
    #[serde(default)]
    pub seed: u64,
    /// Output directory, overridden by `--out`.
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    #[serde(default)]
    pub train: Option<TrainSection>,
    #[serde(default)]
    pub simulate: Option<SimulateSection>,
    #[serde(default)]
    pub offload: Option<OffloadSection>,
}

fn default_aux() -> f64 {
    0.01
}

fn default_one() -> f64 {
    1.0
}

fn default_eval() -> usize {
    64
}

fn default_trace() -> usize {
    16
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainSection {
    pub task: Task,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    #[serde(default = "default_aux")]
    pub aux_coef: f64,
    #[serde(default = "default_one")]
    pub init_scale: f64,
    #[serde(default = "default_eval")]
    pub eval_batch: usize,
    /// Tokens in the activation trace taken after training.
    #[serde(default = "default_trace")]
    pub trace_tokens: usize,
}

impl TrainSection {
    pub fn train_config(&self, seed: u64) -> TrainConfig {
        TrainConfig {
            steps: self.steps,
            lr: self.lr,
            batch: self.batch,
            seed,
            aux_coef: self.aux_coef,
            init_scale: self.init_scale,
            eval_batch: self.eval_batch,
        }
    }
}

fn reference_workload() -> Workload {
    Workload::reference()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulateSection {
    #[serde(default = "reference_workload")]
    pub workload: Workload,
    /// Replace `hardware.beta` so sequential top-2 spends this share of the
    /// MoE block in All-to-All.
    #[serde(default)]
    pub calibrate_comm_fraction: Option<f64>,
    /// Chunks for pipelined strategies in the default set.
    #[serde(default = "default_chunks")]
    pub chunks: usize,
}

fn default_chunks() -> usize {
    2
}

impl Default for SimulateSection {
    fn default() -> Self {
        Self {
            workload: Workload::reference(),
            calibrate_comm_fraction: None,
            chunks: default_chunks(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OffloadSection {
    pub sizes: ModelSizes,
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"model":{"layers":2,"d_model":6,"d_hidden":8,"n_experts":4,"k_routed":1,
        "moe_frequency":"every-second-block","variant":"scmoe","shortcut_pos":"pos2"}}"#;

    #[test]
    fn minimal_config_gets_defaults() {
        let c: ExperimentConfig = serde_json::from_str(MINIMAL).unwrap();
        assert_eq!(c.hardware, HardwareProfile::reference());
        assert!(c.strategies.is_empty());
        assert_eq!(c.seed, 0);
    }

    #[test]
    fn unknown_keys_rejected() {
        let bad = MINIMAL.replacen('{', r#"{"sede":3,"#, 1);
        assert!(serde_json::from_str::<ExperimentConfig>(&bad).is_err());
        let nested = MINIMAL.replace(r#""k_routed":1"#, r#""k_routed":1,"topk":2"#);
        assert!(serde_json::from_str::<ExperimentConfig>(&nested).is_err());
    }

    #[test]
    fn sub_seeds_differ_by_stream() {
        assert_ne!(sub_seed(0, TRAIN_STREAM), sub_seed(0, GRADCHECK_STREAM));
        assert_eq!(sub_seed(5, TRAIN_STREAM), sub_seed(5, TRAIN_STREAM));
    }
}
