use serde::{Deserialize, Serialize};

use crate::arch::{
    attention_backward, expert_backward, model_forward_with, moe_backward, BlockCache, BlockParams, Feed, FeedCache,
    ForwardPass, ModelConfig, ModelParams, RoutingCtl, RoutingRecord, Tap,
};
use crate::error::{Error, Result};
use crate::numkit::{layer_norm_backward, Matrix};

/// Task loss applied to the model output.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossSpec {
    /// `‖Y − target‖²_F / T`
    Mse(Matrix),
    /// Mean of every output entry.
    MeanOutput,
}

impl LossSpec {
    pub fn value(&self, y: &Matrix) -> Result<f64> {
        match self {
            LossSpec::Mse(target) => Ok(y.sub(target)?.frobenius_sq() / y.rows() as f64),
            LossSpec::MeanOutput => Ok(y.sum() / y.len() as f64),
        }
    }

    pub fn grad(&self, y: &Matrix) -> Result<Matrix> {
        match self {
            LossSpec::Mse(target) => Ok(y.sub(target)?.scale(2.0 / y.rows() as f64)),
            LossSpec::MeanOutput => Ok(Matrix::filled(y.rows(), y.cols(), 1.0 / y.len() as f64)),
        }
    }
}

/// One gradient matrix per parameter, in parameter order.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientSet {
    pub entries: Vec<(String, Matrix)>,
}

impl GradientSet {
    /// Reads the gradient out of a parameter-shaped accumulator.
    pub fn from_params(g: &ModelParams) -> Self {
        Self {
            entries: g.named().into_iter().map(|(n, m)| (n, m.clone())).collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Matrix> {
        self.entries.iter().find(|(n, _)| n == name).map(|(_, m)| m)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.entries.iter().map(|(n, _)| n.as_str())
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, m)| m.is_finite())
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.entries
            .iter()
            .flat_map(|(_, m)| m.data().iter().copied())
            .collect()
    }
}

/// Result of a backward pass.
#[derive(Clone, Debug)]
pub struct Backward {
    /// `task + aux_coef · aux`
    pub loss: f64,
    pub task_loss: f64,
    pub aux_loss: f64,
    /// Parameter-shaped gradient accumulator.
    pub grads: ModelParams,
    pub d_tokens: Matrix,
}

impl Backward {
    pub fn gradient_set(&self) -> GradientSet {
        GradientSet::from_params(&self.grads)
    }
}

fn ln_back(pre_ln: bool, x: &Matrix, g: &Matrix) -> Matrix {
    if pre_ln {
        layer_norm_backward(x, g)
    } else {
        g.clone()
    }
}

/// Reverse pass over a block stack given the gradient at its output.
/// Returns per-block gradient accumulators and the input gradient.
pub fn blocks_vjp(
    blocks: &[&BlockParams],
    pass: &ForwardPass,
    d_out: &Matrix,
    aux_coef: f64,
) -> Result<(Vec<BlockParams>, Matrix)> {
    let n = blocks.len();
    if pass.caches.len() != n {
        return Err(Error::config("forward pass does not belong to these blocks"));
    }
    let (rows, cols) = d_out.shape();
    let mut d_in = vec![Matrix::zeros(rows, cols); n + 1];
    let mut d_mh = vec![Matrix::zeros(rows, cols); n];
    d_in[n] = d_out.clone();
    let mut grads: Vec<BlockParams> = blocks.iter().map(|b| b.zeros_like()).collect();
    let taps = &pass.trace.blocks;

    for b in (0..n).rev() {
        let BlockCache { attn, feed } = &pass.caches[b];
        let dout = d_in[b + 1].clone();
        d_mh[b].add_assign(&dout)?;
        let d_feed_in = match (feed, &blocks[b].feed, &mut grads[b].feed) {
            (FeedCache::Mlp(c), Feed::Mlp(e), Feed::Mlp(g)) => expert_backward(c, e, &dout, g)?,
            (FeedCache::Moe { cache, source }, Feed::Moe(layer), Feed::Moe(g)) => {
                let (dx, d_src) = moe_backward(cache, layer, &dout, aux_coef, g)?;
                if let (Some(tap), Some(ds)) = (source, d_src) {
                    match *tap {
                        Tap::Input(i) => {
                            let v = ln_back(pass.pre_ln, &taps[i].input, &ds);
                            d_in[i].add_assign(&v)?;
                        }
                        Tap::PostAttention(i) => {
                            let v = ln_back(pass.pre_ln, &taps[i].post_attention, &ds);
                            d_mh[i].add_assign(&v)?;
                        }
                    }
                }
                dx
            }
            _ => return Err(Error::config(format!("block {b}: cache does not match parameters"))),
        };
        let v = ln_back(pass.pre_ln, &taps[b].post_attention, &d_feed_in);
        d_mh[b].add_assign(&v)?;
        let dmh = d_mh[b].clone();
        d_in[b].add_assign(&dmh)?;
        let da = attention_backward(attn, &blocks[b].attention, &dmh, &mut grads[b].attention)?;
        let v = ln_back(pass.pre_ln, &taps[b].input, &da);
        d_in[b].add_assign(&v)?;
    }
    let d_tokens = d_in.swap_remove(0);
    Ok((grads, d_tokens))
}

/// Backward from an existing forward pass.
pub fn backward_pass(params: &ModelParams, pass: &ForwardPass, loss: &LossSpec, aux_coef: f64) -> Result<Backward> {
    if !(aux_coef >= 0.0) {
        return Err(Error::config(format!("aux coefficient must be >= 0, got {aux_coef}")));
    }
    let task_loss = loss.value(&pass.output)?;
    let dy = loss.grad(&pass.output)?;
    let refs: Vec<&BlockParams> = params.blocks.iter().collect();
    let (blocks, d_tokens) = blocks_vjp(&refs, pass, &dy, aux_coef)?;
    Ok(Backward {
        loss: task_loss + aux_coef * pass.aux_loss,
        task_loss,
        aux_loss: pass.aux_loss,
        grads: ModelParams { blocks },
        d_tokens,
    })
}

/// Forward plus backward. With a `record`, gate noise is replayed and the
/// recorded expert patterns are kept; otherwise gates run noise-free.
pub fn backward(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &Matrix,
    loss: &LossSpec,
    aux_coef: f64,
    record: Option<&RoutingRecord>,
) -> Result<Backward> {
    let mut ctl = match record {
        Some(r) => RoutingCtl::replay(r, true),
        None => RoutingCtl::inference(),
    };
    let pass = model_forward_with(cfg, params, tokens, &mut ctl)?;
    backward_pass(params, &pass, loss, aux_coef)
}

/// Loss at `params` with routing replayed from `record`; the flag reports
/// whether any pinned selection differs from free selection.
pub fn replayed_loss(
    cfg: &ModelConfig,
    params: &ModelParams,
    tokens: &Matrix,
    loss: &LossSpec,
    aux_coef: f64,
    record: &RoutingRecord,
) -> Result<(f64, bool)> {
    let pass = model_forward_with(cfg, params, tokens, &mut RoutingCtl::replay(record, true))?;
    Ok((loss.value(&pass.output)? + aux_coef * pass.aux_loss, pass.flipped))
}
