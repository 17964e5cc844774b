//! MoE architectures and transformer-block wiring.

mod config;
mod io;
mod layers;
mod model;
mod moe;
mod params;

pub use config::{CombineMode, ModelConfig, MoeFrequency, ShortcutPos, Variant};
pub use io::{params_from_bytes, params_to_bytes, read_params, write_params, MAGIC, VERSION};
pub use layers::{
    attention_backward, attention_forward, attention_forward_cached, combine, combine_backward, combine_cached,
    expert_backward, expert_forward, expert_forward_cached, AttentionCache, CombineCache, CombineGrads, ExpertCache,
};
pub use model::{
    dgmoe_block_pair, forward_blocks, model_forward, model_forward_with, scmoe_block_pair, scmoe_every_block,
    shortcut_tap, ActivationTrace, BlockTrace, ForwardPass, MoeTrace, Tap,
};
#[allow(unused_imports)]
pub(crate) use model::{BlockCache, FeedCache};
pub use moe::{
    moe_backward, moe_forward, moe_shared, moe_standard, routed_backward, routed_forward, Branch, BranchInput,
    MoeCache, RoutedCache, RoutingCtl, RoutingRecord,
};
pub use params::{
    param_shapes, AttentionParams, BlockParams, CombineParams, ExpertParams, Feed, MoELayer, ModelParams,
};
