//! Block wiring and whole-model forward passes.

use serde::{Deserialize, Serialize};

use super::config::{ModelConfig, ShortcutPos, Variant};
use super::layers::{attention_forward_cached, expert_forward_cached, AttentionCache, ExpertCache};
use super::moe::{moe_forward, MoeCache, RoutingCtl, RoutingRecord};
use super::params::{BlockParams, Feed, ModelParams};
use crate::error::{Error, Result};
use crate::gating::GateDecision;
use crate::numkit::{layer_norm, Matrix};

/// A recorded intermediate representation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Tap {
    /// Input of block `b` (equivalently the output of block `b − 1`).
    Input(usize),
    /// Post-attention intermediate of block `b`.
    PostAttention(usize),
}

/// Where the routed experts of an MoE layer in block `b` read from.
pub fn shortcut_tap(pos: ShortcutPos, block: usize) -> Result<Tap> {
    match (pos, block) {
        (ShortcutPos::Pos1, b) => Ok(Tap::Input(b)),
        (_, 0) => Err(Error::config(format!("{pos:?} shortcut needs a preceding block"))),
        (ShortcutPos::Pos2, b) => Ok(Tap::PostAttention(b - 1)),
        (ShortcutPos::Pos3, b) => Ok(Tap::Input(b - 1)),
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockTrace {
    pub input: Matrix,
    pub post_attention: Matrix,
    pub output: Matrix,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoeTrace {
    pub block: usize,
    pub variant: Variant,
    pub shortcut_pos: Option<ShortcutPos>,
    /// Representation of the preceding layer as seen by this layer: the
    /// shortcut source for shortcut variants, otherwise the previous block's
    /// post-attention intermediate (the block input for block 0).
    pub preceding: Matrix,
    /// Current-layer MoE input.
    pub current: Matrix,
    /// Noise-free logits of this layer's gate on `preceding` and `current`.
    pub preceding_logits: Matrix,
    pub current_logits: Matrix,
    /// Gatings in evaluation order (DGMoE: preceding then current).
    pub decisions: Vec<GateDecision>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ActivationTrace {
    pub blocks: Vec<BlockTrace>,
    pub moe: Vec<MoeTrace>,
}

impl ActivationTrace {
    pub fn moe_layer(&self, block: usize) -> Option<&MoeTrace> {
        self.moe.iter().find(|m| m.block == block)
    }
}

#[derive(Clone, Debug)]
pub(crate) enum FeedCache {
    Mlp(ExpertCache),
    Moe { cache: MoeCache, source: Option<Tap> },
}

#[derive(Clone, Debug)]
pub(crate) struct BlockCache {
    pub(crate) attn: AttentionCache,
    pub(crate) feed: FeedCache,
}

/// Everything a forward pass produces, including what backprop needs.
#[derive(Clone, Debug)]
pub struct ForwardPass {
    pub output: Matrix,
    pub trace: ActivationTrace,
    pub record: RoutingRecord,
    /// Some pinned gating disagreed with free selection.
    pub flipped: bool,
    /// Sum of load-balancing losses over all gatings.
    pub aux_loss: f64,
    pub(crate) pre_ln: bool,
    pub(crate) caches: Vec<BlockCache>,
}

fn maybe_ln(x: &Matrix, pre_ln: bool) -> Matrix {
    if pre_ln {
        layer_norm(x)
    } else {
        x.clone()
    }
}

/// Runs a stack of blocks. Each MoE layer's shortcut source is resolved from
/// its own `shortcut_pos` relative to its position in `blocks`.
pub fn forward_blocks(
    blocks: &[&BlockParams],
    pre_ln: bool,
    tokens: &Matrix,
    ctl: &mut RoutingCtl<'_>,
) -> Result<ForwardPass> {
    let mut ins = vec![tokens.clone()];
    let mut mhs: Vec<Matrix> = Vec::with_capacity(blocks.len());
    let mut caches = Vec::with_capacity(blocks.len());
    let mut moe_traces = Vec::new();
    let mut aux_loss = 0.0;

    for (b, blk) in blocks.iter().enumerate() {
        let h_in = &ins[b];
        let (a, attn) = attention_forward_cached(&maybe_ln(h_in, pre_ln), &blk.attention)?;
        let h_mh = h_in.add(&a)?;
        let feed_in = maybe_ln(&h_mh, pre_ln);
        let (y, feed) = match &blk.feed {
            Feed::Mlp(e) => {
                let (y, c) = expert_forward_cached(&feed_in, e)?;
                (y, FeedCache::Mlp(c))
            }
            Feed::Moe(layer) => {
                let source = match layer.shortcut_pos {
                    Some(pos) => Some(shortcut_tap(pos, b)?),
                    None => None,
                };
                let src_in = source.map(|t| match t {
                    Tap::Input(i) => maybe_ln(&ins[i], pre_ln),
                    Tap::PostAttention(i) => maybe_ln(&mhs[i], pre_ln),
                });
                let (y, cache) = moe_forward(layer, &feed_in, src_in.as_ref(), ctl)?;
                aux_loss += cache.aux_loss();
                let preceding = match (&src_in, b) {
                    (Some(s), _) => s.clone(),
                    (None, 0) => maybe_ln(h_in, pre_ln),
                    (None, _) => maybe_ln(&mhs[b - 1], pre_ln),
                };
                moe_traces.push(MoeTrace {
                    block: b,
                    variant: layer.variant,
                    shortcut_pos: layer.shortcut_pos,
                    preceding_logits: preceding.matmul(&layer.gate.w_gate)?,
                    current_logits: feed_in.matmul(&layer.gate.w_gate)?,
                    preceding,
                    current: feed_in.clone(),
                    decisions: cache.decisions(),
                });
                (y, FeedCache::Moe { cache, source })
            }
        };
        let h_out = h_mh.add(&y)?;
        mhs.push(h_mh);
        ins.push(h_out);
        caches.push(BlockCache { attn, feed });
    }

    let output = ins.last().expect("tokens pushed first").clone();
    let blocks_trace = (0..blocks.len())
        .map(|b| BlockTrace {
            input: ins[b].clone(),
            post_attention: mhs[b].clone(),
            output: ins[b + 1].clone(),
        })
        .collect();
    let (record, flipped) = ctl.take();
    Ok(ForwardPass {
        output,
        trace: ActivationTrace {
            blocks: blocks_trace,
            moe: moe_traces,
        },
        record,
        flipped,
        aux_loss,
        pre_ln,
        caches,
    })
}

/// Full forward with explicit routing control.
pub fn model_forward_with(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &Matrix,
    ctl: &mut RoutingCtl<'_>,
) -> Result<ForwardPass> {
    cfg.validate()?;
    params.check(cfg)?;
    if tokens.cols() != cfg.d_model {
        return Err(Error::Shape {
            op: "tokens",
            left: tokens.shape(),
            right: (tokens.rows(), cfg.d_model),
        });
    }
    let blocks: Vec<&BlockParams> = params.blocks.iter().collect();
    forward_blocks(&blocks, cfg.pre_ln, tokens, ctl)
}

/// Noise-free full forward.
pub fn model_forward(cfg: &ModelConfig, params: &ModelParams, tokens: &Matrix) -> Result<(Matrix, ActivationTrace)> {
    let pass = model_forward_with(cfg, params, tokens, &mut RoutingCtl::inference())?;
    Ok((pass.output, pass.trace))
}

fn expect_pair(prev: &BlockParams, cur: &BlockParams, want: Variant) -> Result<()> {
    if !matches!(prev.feed, Feed::Mlp(_)) {
        return Err(Error::config("the preceding block of a pair must carry a dense MLP"));
    }
    let layer = cur
        .moe()
        .ok_or_else(|| Error::config("the second block of a pair must carry an MoE layer"))?;
    if layer.variant != want {
        return Err(Error::config(format!("expected {want:?}, got {:?}", layer.variant)));
    }
    if layer.shortcut_pos.is_none() {
        return Err(Error::config(format!("{want:?} layer without shortcut_pos")));
    }
    Ok(())
}

/// A dense block followed by an ScMoE block whose routed experts read the
/// shortcut source selected by the layer's position.
pub fn scmoe_block_pair(h_in: &Matrix, prev: &BlockParams, cur: &BlockParams) -> Result<(Matrix, ActivationTrace)> {
    expect_pair(prev, cur, Variant::ScMoE)?;
    let pass = forward_blocks(&[prev, cur], false, h_in, &mut RoutingCtl::inference())?;
    Ok((pass.output, pass.trace))
}

/// A dense block followed by a DGMoE block.
pub fn dgmoe_block_pair(h_in: &Matrix, prev: &BlockParams, cur: &BlockParams) -> Result<(Matrix, ActivationTrace)> {
    expect_pair(prev, cur, Variant::DgMoE)?;
    let pass = forward_blocks(&[prev, cur], false, h_in, &mut RoutingCtl::inference())?;
    Ok((pass.output, pass.trace))
}

/// ScMoE in every block: each block's routed experts read the previous
/// block's output.
pub fn scmoe_every_block(h_in: &Matrix, blocks: &[BlockParams]) -> Result<(Matrix, ActivationTrace)> {
    for (b, blk) in blocks.iter().enumerate() {
        let layer = blk
            .moe()
            .ok_or_else(|| Error::config(format!("block {b} has no MoE layer")))?;
        if layer.variant != Variant::ScMoE {
            return Err(Error::config(format!(
                "block {b} is {:?}, expected ScMoE",
                layer.variant
            )));
        }
        if layer.shortcut_pos != Some(ShortcutPos::Pos1) {
            return Err(Error::config(format!(
                "every-block placement requires Pos-1, block {b} uses {:?}",
                layer.shortcut_pos
            )));
        }
    }
    let refs: Vec<&BlockParams> = blocks.iter().collect();
    let pass = forward_blocks(&refs, false, h_in, &mut RoutingCtl::inference())?;
    Ok((pass.output, pass.trace))
}
