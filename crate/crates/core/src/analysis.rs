//! Gating-behaviour and representation-similarity metrics over activation
//! traces.

use serde::{Deserialize, Serialize};

use crate::arch::{model_forward, ActivationTrace, ModelConfig, ModelParams, MoeTrace, Variant};
use crate::error::{Error, Result};
use crate::gating::ranked;
use crate::numkit::{Matrix, Rng};

fn layer(trace: &ActivationTrace, block: usize) -> Result<&MoeTrace> {
    trace
        .moe_layer(block)
        .ok_or_else(|| Error::config(format!("trace has no MoE layer at block {block}")))
}

fn same_shape(a: &Matrix, b: &Matrix, op: &'static str) -> Result<()> {
    if a.shape() != b.shape() {
        return Err(Error::Shape {
            op,
            left: a.shape(),
            right: b.shape(),
        });
    }
    Ok(())
}

/// Fraction of rows whose arg-max (lowest index on ties) agrees.
pub fn top1_agreement(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b, "top1_agreement")?;
    if a.rows() == 0 {
        return Err(Error::config("no tokens to compare"));
    }
    let same = (0..a.rows())
        .filter(|&t| ranked(a.row(t))[0] == ranked(b.row(t))[0])
        .count();
    Ok(same as f64 / a.rows() as f64)
}

/// Fraction of tokens whose noise-free top-1 expert under this layer's gate
/// is the same for the preceding and current representations.
pub fn repeated_selection_rate(trace: &ActivationTrace, block: usize) -> Result<f64> {
    let m = layer(trace, block)?;
    top1_agreement(&m.preceding_logits, &m.current_logits)
}

/// Mean over rows of the Euclidean distance between matching rows.
pub fn mean_row_distance(a: &Matrix, b: &Matrix) -> Result<f64> {
    same_shape(a, b, "l2_distance")?;
    if a.rows() == 0 {
        return Err(Error::config("no tokens to compare"));
    }
    let total: f64 = (0..a.rows())
        .map(|t| {
            a.row(t)
                .iter()
                .zip(b.row(t))
                .map(|(x, y)| (x - y) * (x - y))
                .sum::<f64>()
                .sqrt()
        })
        .sum();
    Ok(total / a.rows() as f64)
}

/// Mean per-token L2 distance between the preceding and current
/// representations of one MoE layer.
pub fn l2_distance(trace: &ActivationTrace, block: usize) -> Result<f64> {
    let m = layer(trace, block)?;
    mean_row_distance(&m.preceding, &m.current)
}

/// Mean full-softmax probability of the expert each gating of a DGMoE
/// layer selected, as `(preceding, current)`.
pub fn mean_gate_scores(trace: &ActivationTrace, block: usize) -> Result<(f64, f64)> {
    let m = layer(trace, block)?;
    if m.variant != Variant::DgMoE || m.decisions.len() != 2 {
        return Err(Error::config(format!("block {block} is not a dual-gated layer")));
    }
    let score = |i: usize| -> Result<f64> {
        let dec = &m.decisions[i];
        if dec.tokens() == 0 {
            return Err(Error::config("no tokens to score"));
        }
        let p = dec.full_probs();
        let s: f64 = dec
            .selected
            .iter()
            .enumerate()
            .map(|(t, row)| p.get(t, row[0].expert))
            .sum();
        Ok(s / dec.tokens() as f64)
    };
    Ok((score(0)?, score(1)?))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerBehavior {
    pub block: usize,
    pub repeat_rate: f64,
    pub l2_distance: f64,
    /// Only for dual-gated layers.
    pub gate_score_preceding: Option<f64>,
    pub gate_score_current: Option<f64>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GatingBehaviorReport {
    pub layers: Vec<LayerBehavior>,
}

impl GatingBehaviorReport {
    pub fn from_trace(trace: &ActivationTrace) -> Result<Self> {
        let layers = trace
            .moe
            .iter()
            .map(|m| {
                let scores = if m.variant == Variant::DgMoE {
                    Some(mean_gate_scores(trace, m.block)?)
                } else {
                    None
                };
                Ok(LayerBehavior {
                    block: m.block,
                    repeat_rate: repeated_selection_rate(trace, m.block)?,
                    l2_distance: l2_distance(trace, m.block)?,
                    gate_score_preceding: scores.map(|s| s.0),
                    gate_score_current: scores.map(|s| s.1),
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self { layers })
    }

    /// Layer-wise mean over several snapshots with identical layer layout.
    pub fn mean(reports: &[GatingBehaviorReport]) -> Result<Self> {
        let first = reports.first().ok_or_else(|| Error::config("no reports to average"))?;
        let n = reports.len() as f64;
        let mut layers = Vec::with_capacity(first.layers.len());
        for (i, l) in first.layers.iter().enumerate() {
            let col: Vec<&LayerBehavior> = reports
                .iter()
                .map(|r| {
                    r.layers
                        .get(i)
                        .filter(|x| x.block == l.block)
                        .ok_or_else(|| Error::config("snapshots disagree in layer layout"))
                })
                .collect::<Result<_>>()?;
            let avg = |f: &dyn Fn(&LayerBehavior) -> f64| col.iter().map(|x| f(x)).sum::<f64>() / n;
            let avg_opt = |f: &dyn Fn(&LayerBehavior) -> Option<f64>| -> Option<f64> {
                col.iter().map(|x| f(x)).sum::<Option<f64>>().map(|s| s / n)
            };
            layers.push(LayerBehavior {
                block: l.block,
                repeat_rate: avg(&|x| x.repeat_rate),
                l2_distance: avg(&|x| x.l2_distance),
                gate_score_preceding: avg_opt(&|x| x.gate_score_preceding),
                gate_score_current: avg_opt(&|x| x.gate_score_current),
            });
        }
        Ok(Self { layers })
    }

    pub fn to_csv(&self) -> String {
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        let mut out = String::from("block,repeat_rate,l2_distance,gate_score_preceding,gate_score_current\n");
        for l in &self.layers {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                l.block,
                l.repeat_rate,
                l.l2_distance,
                opt(l.gate_score_preceding),
                opt(l.gate_score_current)
            ));
        }
        out
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimilarityReport {
    pub labels: Vec<String>,
    pub matrix: Matrix,
}

impl SimilarityReport {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("tap");
        for l in &self.labels {
            out.push(',');
            out.push_str(l);
        }
        out.push('\n');
        for (i, l) in self.labels.iter().enumerate() {
            out.push_str(l);
            for v in self.matrix.row(i) {
                out.push_str(&format!(",{v}"));
            }
            out.push('\n');
        }
        out
    }
}

fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    (dot / (na * nb)).clamp(-1.0, 1.0)
}

/// Mean per-token cosine similarity between every pair of labelled taps.
/// Zero vectors count as similarity 0; the diagonal is 1.
pub fn similarity_of(labels: Vec<String>, taps: &[&Matrix]) -> Result<SimilarityReport> {
    if labels.len() != taps.len() {
        return Err(Error::config("one label per tap required"));
    }
    let n = taps.len();
    if let Some(first) = taps.first() {
        for t in taps {
            same_shape(first, t, "cosine_similarity_matrix")?;
        }
    }
    let rows = taps.first().map_or(0, |t| t.rows());
    let mut m = Matrix::identity(n);
    for a in 0..n {
        for b in a + 1..n {
            let v = if rows == 0 {
                0.0
            } else {
                (0..rows).map(|t| cosine(taps[a].row(t), taps[b].row(t))).sum::<f64>() / rows as f64
            };
            m.set(a, b, v);
            m.set(b, a, v);
        }
    }
    Ok(SimilarityReport { labels, matrix: m })
}

/// Similarities among the model input (`In`), each block's post-attention
/// intermediate (`1A`, `2A`, ...) and each block's output (`1M`, ...).
pub fn cosine_similarity_matrix(trace: &ActivationTrace) -> Result<SimilarityReport> {
    let first = trace
        .blocks
        .first()
        .ok_or_else(|| Error::config("trace has no blocks"))?;
    let mut labels = vec!["In".to_string()];
    let mut taps = vec![&first.input];
    for (b, bt) in trace.blocks.iter().enumerate() {
        labels.push(format!("{}A", b + 1));
        taps.push(&bt.post_attention);
        labels.push(format!("{}M", b + 1));
        taps.push(&bt.output);
    }
    similarity_of(labels, &taps)
}

/// Outcome of [`dgmoe_selection_check`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DgmoeCheck {
    pub tokens: usize,
    /// Tokens whose two gatings activated the same expert, constraint on.
    pub repeated_with_constraint: usize,
    /// Fraction of tokens activating the same expert twice with the
    /// constraint off and identical preceding/current representations.
    pub repeat_rate_unconstrained: f64,
}

fn dgmoe_config(n_experts: usize, distinct: bool) -> ModelConfig {
    let mut cfg = ModelConfig::tiny(Variant::DgMoE);
    cfg.n_experts = n_experts;
    cfg.capacity_factor = n_experts as f64;
    cfg.dgmoe_distinct = distinct;
    cfg
}

fn activated_repeats(trace: &ActivationTrace) -> Result<usize> {
    let m = trace
        .moe
        .first()
        .ok_or_else(|| Error::config("trace has no MoE layer"))?;
    let (a, b) = (&m.decisions[0], &m.decisions[1]);
    Ok((0..a.tokens())
        .filter(|&t| a.selected[t][0].expert == b.selected[t][0].expert)
        .count())
}

/// Routes `tokens` random tokens through random DGMoE pairs (N cycling over
/// 2..=8, batches of 50), counting repeated activations. Then repeats with
/// the constraint off on a pair whose dense feed and MoE-block attention are
/// zeroed, so both gatings see the same representation.
pub fn dgmoe_selection_check(tokens: usize, seed: u64) -> Result<DgmoeCheck> {
    let batch = 50;
    let mut repeated = 0;
    let mut same = 0;
    let mut done = 0;
    let mut i = 0u64;
    while done < tokens {
        let t = batch.min(tokens - done);
        let n = 2 + (i % 7) as usize;
        let cfg = dgmoe_config(n, true);
        let p = ModelParams::init(&cfg, Rng::derive(seed, 2 * i).next_u64())?;
        let x = Rng::derive(seed, 2 * i + 1).normal_matrix(t, cfg.d_model, 1.0);
        let (_, trace) = model_forward(&cfg, &p, &x)?;
        repeated += activated_repeats(&trace)?;

        let cfg = dgmoe_config(n, false);
        let mut p = ModelParams::init(&cfg, Rng::derive(seed, 2 * i).next_u64())?;
        let zero = p.blocks[0].zeros_like();
        p.blocks[0].feed = zero.feed;
        p.blocks[1].attention = p.blocks[1].zeros_like().attention;
        let (_, trace) = model_forward(&cfg, &p, &x)?;
        same += activated_repeats(&trace)?;
        done += t;
        i += 1;
    }
    Ok(DgmoeCheck {
        tokens,
        repeated_with_constraint: repeated,
        repeat_rate_unconstrained: if tokens == 0 { 0.0 } else { same as f64 / tokens as f64 },
    })
}
