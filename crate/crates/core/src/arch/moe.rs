//! Routed mixtures and the four MoE layer variants.

use serde::{Deserialize, Serialize};

use super::config::Variant;
use super::layers::{
    combine_backward, combine_cached, expert_backward, expert_forward_cached, CombineCache, ExpertCache,
};
use super::params::{ExpertParams, MoELayer};
use crate::error::{Error, Result};
use crate::gating::{
    apply_capacity, gate_backward, gate_logits, load_balance_backward, load_balance_loss, select_pinned,
    select_top1_distinct, select_topk, topk_weights_backward, CapacityConfig, GateDecision, GateLogits, GateParams,
    NoiseSource,
};
use crate::numkit::{Matrix, Rng};

/// Every gating decision of one forward pass, in evaluation order.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct RoutingRecord {
    /// Whether gates with noise enabled actually drew noise.
    pub noise_applied: bool,
    pub decisions: Vec<GateDecision>,
}

enum Mode<'a> {
    Free(Option<&'a mut Rng>),
    Replay { record: &'a RoutingRecord, pin: bool },
}

/// Controls how gates draw noise and choose experts during a forward pass.
pub struct RoutingCtl<'a> {
    mode: Mode<'a>,
    cursor: usize,
    flipped: bool,
    record: RoutingRecord,
}

impl<'a> RoutingCtl<'a> {
    /// Noise off, free selection.
    pub fn inference() -> Self {
        Self::with_mode(Mode::Free(None), false)
    }

    /// Fresh noise draws for gates that enable noise.
    pub fn sampling(rng: &'a mut Rng) -> Self {
        Self::with_mode(Mode::Free(Some(rng)), true)
    }

    /// Replays recorded noise. With `pin`, the recorded expert pattern is
    /// kept even if the logits now rank differently; such gatings are
    /// reported through [`RoutingCtl::flipped`].
    pub fn replay(record: &'a RoutingRecord, pin: bool) -> Self {
        let noise = record.noise_applied;
        Self::with_mode(Mode::Replay { record, pin }, noise)
    }

    fn with_mode(mode: Mode<'a>, noise_applied: bool) -> Self {
        Self {
            mode,
            cursor: 0,
            flipped: false,
            record: RoutingRecord {
                noise_applied,
                decisions: Vec::new(),
            },
        }
    }

    /// True when some pinned gating differs from what free selection would pick.
    pub fn flipped(&self) -> bool {
        self.flipped
    }

    pub fn into_record(self) -> RoutingRecord {
        self.record
    }

    pub(crate) fn take(&mut self) -> (RoutingRecord, bool) {
        let noise = self.record.noise_applied;
        let rec = std::mem::replace(
            &mut self.record,
            RoutingRecord {
                noise_applied: noise,
                decisions: Vec::new(),
            },
        );
        (rec, self.flipped)
    }

    fn route(
        &mut self,
        x: &Matrix,
        gate: &GateParams,
        cap: &CapacityConfig,
        avoid: Option<&[usize]>,
    ) -> Result<(GateLogits, GateDecision)> {
        let idx = self.cursor;
        self.cursor += 1;
        let recorded: Option<&'a GateDecision> = match &self.mode {
            Mode::Replay { record, .. } => {
                let record: &'a RoutingRecord = record;
                Some(record.decisions.get(idx).ok_or_else(|| {
                    Error::Replay(format!(
                        "record holds {} gatings, pass needs more",
                        record.decisions.len()
                    ))
                })?)
            }
            Mode::Free(_) => None,
        };
        let logits = match (&mut self.mode, recorded) {
            (Mode::Free(Some(rng)), _) if gate.noise_enabled => gate_logits(x, gate, NoiseSource::Sample(rng))?,
            (Mode::Replay { record, .. }, Some(rec)) if gate.noise_enabled && record.noise_applied => {
                let eps = rec
                    .noise
                    .as_ref()
                    .ok_or_else(|| Error::Replay(format!("gating {idx} has no recorded noise")))?;
                gate_logits(x, gate, NoiseSource::Replay(eps))?
            }
            _ => gate_logits(x, gate, NoiseSource::Off)?,
        };
        let h = &logits.logits;
        let free = match avoid {
            Some(a) => select_top1_distinct(h, a)?,
            None => select_topk(h, gate.k)?,
        };
        let free = apply_capacity(&free, cap, gate.n_experts(), x.rows());
        let mut dec = match (&self.mode, recorded) {
            (Mode::Replay { pin: true, .. }, Some(rec)) => {
                let pinned = select_pinned(h, &rec.pattern())?;
                if pinned.pattern() != free.pattern() {
                    self.flipped = true;
                }
                pinned
            }
            _ => free,
        };
        dec.noise = logits.eps.clone();
        self.record.decisions.push(dec.clone());
        Ok((logits, dec))
    }
}

#[derive(Clone, Debug)]
struct ExpertGroup {
    expert: usize,
    /// `(token, slot)` pairs in row order of the gathered batch.
    slots: Vec<(usize, usize)>,
    cache: ExpertCache,
    out: Matrix,
}

#[derive(Clone, Debug)]
pub struct RoutedCache {
    groups: Vec<ExpertGroup>,
}

/// `Σ` over kept selections of `weight · E_i(x_t)`; dropped selections add 0.
pub fn routed_forward(x: &Matrix, experts: &[ExpertParams], dec: &GateDecision) -> Result<(Matrix, RoutedCache)> {
    if dec.tokens() != x.rows() {
        return Err(Error::Shape {
            op: "routed mixture",
            left: x.shape(),
            right: (dec.tokens(), dec.n_experts()),
        });
    }
    let mut out = Matrix::zeros(x.rows(), x.cols());
    let mut groups = Vec::new();
    for (i, e) in experts.iter().enumerate() {
        let slots: Vec<(usize, usize)> = dec
            .selected
            .iter()
            .enumerate()
            .flat_map(|(t, row)| {
                row.iter()
                    .enumerate()
                    .filter(move |(_, s)| s.expert == i && !s.dropped)
                    .map(move |(j, _)| (t, j))
            })
            .collect();
        if slots.is_empty() {
            continue;
        }
        let rows: Vec<usize> = slots.iter().map(|&(t, _)| t).collect();
        let (y, cache) = expert_forward_cached(&x.select_rows(&rows), e)?;
        for (r, &(t, j)) in slots.iter().enumerate() {
            let w = dec.selected[t][j].weight;
            for (o, v) in out.row_mut(t).iter_mut().zip(y.row(r)) {
                *o += w * v;
            }
        }
        groups.push(ExpertGroup {
            expert: i,
            slots,
            cache,
            out: y,
        });
    }
    Ok((out, RoutedCache { groups }))
}

/// Returns the input gradient and per-selection weight gradients; expert
/// parameter gradients are accumulated into `g`.
pub fn routed_backward(
    cache: &RoutedCache,
    experts: &[ExpertParams],
    dec: &GateDecision,
    dout: &Matrix,
    g: &mut [ExpertParams],
) -> Result<(Matrix, Vec<Vec<f64>>)> {
    let mut dx = Matrix::zeros(dout.rows(), dout.cols());
    let mut d_weight: Vec<Vec<f64>> = dec.selected.iter().map(|r| vec![0.0; r.len()]).collect();
    for grp in &cache.groups {
        let mut dy = Matrix::zeros(grp.out.rows(), grp.out.cols());
        for (r, &(t, j)) in grp.slots.iter().enumerate() {
            let w = dec.selected[t][j].weight;
            let go = dout.row(t);
            d_weight[t][j] = go.iter().zip(grp.out.row(r)).map(|(a, b)| a * b).sum();
            for (d, v) in dy.row_mut(r).iter_mut().zip(go) {
                *d = w * v;
            }
        }
        let dxs = expert_backward(&grp.cache, &experts[grp.expert], &dy, &mut g[grp.expert])?;
        for (r, &(t, _)) in grp.slots.iter().enumerate() {
            for (d, v) in dx.row_mut(t).iter_mut().zip(dxs.row(r)) {
                *d += v;
            }
        }
    }
    Ok((dx, d_weight))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum BranchInput {
    Current,
    Source,
}

#[derive(Clone, Debug)]
pub struct Branch {
    pub input: BranchInput,
    pub logits: GateLogits,
    pub decision: GateDecision,
    routed: RoutedCache,
}

#[derive(Clone, Debug)]
pub struct MoeCache {
    x_cur: Matrix,
    src: Option<Matrix>,
    pub branches: Vec<Branch>,
    shared: Option<(ExpertCache, Matrix)>,
    routed_sum: Matrix,
    combine: CombineCache,
}

impl MoeCache {
    /// Sum of the load-balancing losses of every gating in the layer.
    pub fn aux_loss(&self) -> f64 {
        self.branches
            .iter()
            .map(|b| load_balance_loss(&b.decision, b.decision.n_experts()))
            .sum()
    }

    pub fn decisions(&self) -> Vec<GateDecision> {
        self.branches.iter().map(|b| b.decision.clone()).collect()
    }

    /// Shared-expert output before combination.
    pub fn shared_out(&self) -> Option<&Matrix> {
        self.shared.as_ref().map(|(_, y)| y)
    }

    pub fn routed_out(&self) -> &Matrix {
        &self.routed_sum
    }
}

/// Forward pass of one MoE layer. `x_cur` is the current-layer input; `src`
/// is the shortcut source used by ScMoE and by DGMoE's preceding gating.
pub fn moe_forward(
    layer: &MoELayer,
    x_cur: &Matrix,
    src: Option<&Matrix>,
    ctl: &mut RoutingCtl<'_>,
) -> Result<(Matrix, MoeCache)> {
    layer.validate()?;
    let needs_src = matches!(layer.variant, Variant::ScMoE | Variant::DgMoE);
    let src = match (needs_src, src) {
        (true, Some(s)) => {
            if s.shape() != x_cur.shape() {
                return Err(Error::Shape {
                    op: "shortcut source",
                    left: s.shape(),
                    right: x_cur.shape(),
                });
            }
            Some(s.clone())
        }
        (true, None) => return Err(Error::config(format!("{:?} needs a shortcut source", layer.variant))),
        (false, _) => None,
    };

    let mut branches = Vec::new();
    let source = src.as_ref();
    let routed_sum = match layer.variant {
        Variant::StandardTopK | Variant::SharedExpert => {
            run_branch(layer, x_cur, BranchInput::Current, None, ctl, &mut branches)?
        }
        Variant::ScMoE => run_branch(
            layer,
            source.expect("checked"),
            BranchInput::Source,
            None,
            ctl,
            &mut branches,
        )?,
        Variant::DgMoE => {
            let mut y = run_branch(
                layer,
                source.expect("checked"),
                BranchInput::Source,
                None,
                ctl,
                &mut branches,
            )?;
            let prev: Option<Vec<usize>> = layer.distinct.then(|| {
                let d = &branches[0].decision;
                (0..d.tokens()).map(|t| d.selected[t][0].expert).collect()
            });
            y.add_assign(&run_branch(
                layer,
                x_cur,
                BranchInput::Current,
                prev.as_deref(),
                ctl,
                &mut branches,
            )?)?;
            y
        }
    };

    let (out, shared, combine) = match &layer.shared {
        Some(se) => {
            let (y_se, c_se) = expert_forward_cached(x_cur, se)?;
            let (out, cc) = combine_cached(&y_se, &routed_sum, x_cur, &layer.combine)?;
            (out, Some((c_se, y_se)), cc)
        }
        None => (routed_sum.clone(), None, CombineCache { coef: None }),
    };
    Ok((
        out,
        MoeCache {
            x_cur: x_cur.clone(),
            src,
            branches,
            shared,
            routed_sum,
            combine,
        },
    ))
}

fn run_branch(
    layer: &MoELayer,
    x: &Matrix,
    input: BranchInput,
    avoid: Option<&[usize]>,
    ctl: &mut RoutingCtl<'_>,
    branches: &mut Vec<Branch>,
) -> Result<Matrix> {
    let (logits, decision) = ctl.route(x, &layer.gate, &layer.capacity, avoid)?;
    let (y, routed) = routed_forward(x, &layer.experts, &decision)?;
    branches.push(Branch {
        input,
        logits,
        decision,
        routed,
    });
    Ok(y)
}

/// Backward of [`moe_forward`] including `aux_coef ·` the layer's
/// load-balancing losses. Returns gradients for `x_cur` and the source.
pub fn moe_backward(
    cache: &MoeCache,
    layer: &MoELayer,
    dout: &Matrix,
    aux_coef: f64,
    g: &mut MoELayer,
) -> Result<(Matrix, Option<Matrix>)> {
    let mut dx_cur = Matrix::zeros(dout.rows(), dout.cols());
    let d_routed = match (&layer.shared, &cache.shared) {
        (Some(se), Some((c_se, y_se))) => {
            let cg = combine_backward(
                &cache.combine,
                y_se,
                &cache.routed_sum,
                &cache.x_cur,
                &layer.combine,
                dout,
                g.combine.w_cg.as_mut(),
            )?;
            let g_se = g.shared.as_mut().expect("gradient mirrors parameters");
            dx_cur.add_assign(&expert_backward(c_se, se, &cg.d_se, g_se)?)?;
            if let Some(dx) = cg.dx {
                dx_cur.add_assign(&dx)?;
            }
            cg.d_routed
        }
        _ => dout.clone(),
    };

    let mut d_src = cache.src.as_ref().map(|s| Matrix::zeros(s.rows(), s.cols()));
    let n = layer.n_experts();
    for br in &cache.branches {
        let x = match br.input {
            BranchInput::Current => &cache.x_cur,
            BranchInput::Source => cache.src.as_ref().expect("source branch has a source"),
        };
        let (mut dx, d_weight) = routed_backward(&br.routed, &layer.experts, &br.decision, &d_routed, &mut g.experts)?;
        let mut d_logits = topk_weights_backward(&br.decision, &d_weight);
        if aux_coef != 0.0 {
            d_logits.add_assign(&load_balance_backward(&br.decision, n, aux_coef))?;
        }
        let gg = gate_backward(x, &layer.gate, &br.logits, &d_logits)?;
        g.gate.w_gate.add_assign(&gg.d_w_gate)?;
        g.gate.w_noise.add_assign(&gg.d_w_noise)?;
        dx.add_assign(&gg.dx)?;
        match br.input {
            BranchInput::Current => dx_cur.add_assign(&dx)?,
            BranchInput::Source => d_src.as_mut().expect("source branch has a source").add_assign(&dx)?,
        }
    }
    Ok((dx_cur, d_src))
}

fn check_variant(layer: &MoELayer, want: Variant) -> Result<()> {
    if layer.variant != want {
        return Err(Error::config(format!(
            "expected a {want:?} layer, got {:?}",
            layer.variant
        )));
    }
    Ok(())
}

/// Standard top-k layer without noise.
pub fn moe_standard(x: &Matrix, layer: &MoELayer) -> Result<(Matrix, GateDecision)> {
    check_variant(layer, Variant::StandardTopK)?;
    let (y, c) = moe_forward(layer, x, None, &mut RoutingCtl::inference())?;
    Ok((y, c.branches[0].decision.clone()))
}

/// Shared expert plus routed experts on the same input, without noise.
pub fn moe_shared(x: &Matrix, layer: &MoELayer) -> Result<(Matrix, GateDecision)> {
    check_variant(layer, Variant::SharedExpert)?;
    let (y, c) = moe_forward(layer, x, None, &mut RoutingCtl::inference())?;
    Ok((y, c.branches[0].decision.clone()))
}
