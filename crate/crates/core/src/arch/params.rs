use serde::{Deserialize, Serialize};

use super::config::{CombineMode, ModelConfig, ShortcutPos, Variant};
use crate::error::{Error, Result};
use crate::gating::{CapacityConfig, GateParams};
use crate::numkit::{Matrix, Rng};

/// Two-layer feed-forward network. Biases are stored as `1×n` rows.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExpertParams {
    pub w1: Matrix,
    pub b1: Matrix,
    pub w2: Matrix,
    pub b2: Matrix,
}

impl ExpertParams {
    pub fn zeros(d: usize, h: usize) -> Self {
        Self {
            w1: Matrix::zeros(d, h),
            b1: Matrix::zeros(1, h),
            w2: Matrix::zeros(h, d),
            b2: Matrix::zeros(1, d),
        }
    }

    pub fn random(d: usize, h: usize, rng: &mut Rng, scale: f64) -> Self {
        Self {
            w1: rng.normal_matrix(d, h, scale / (d as f64).sqrt()),
            b1: rng.normal_matrix(1, h, 0.1 * scale),
            w2: rng.normal_matrix(h, d, scale / (h as f64).sqrt()),
            b2: rng.normal_matrix(1, d, 0.1 * scale),
        }
    }

    pub fn dim(&self) -> usize {
        self.w1.rows()
    }

    pub fn hidden(&self) -> usize {
        self.w1.cols()
    }

    fn tensors(&self) -> [(&'static str, &Matrix); 4] {
        [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)]
    }

    fn tensors_mut(&mut self) -> [(&'static str, &mut Matrix); 4] {
        [
            ("w1", &mut self.w1),
            ("b1", &mut self.b1),
            ("w2", &mut self.w2),
            ("b2", &mut self.b2),
        ]
    }
}

/// Single-head attention projections, each `d×d`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

impl AttentionParams {
    pub fn zeros(d: usize) -> Self {
        Self {
            wq: Matrix::zeros(d, d),
            wk: Matrix::zeros(d, d),
            wv: Matrix::zeros(d, d),
            wo: Matrix::zeros(d, d),
        }
    }

    pub fn random(d: usize, rng: &mut Rng, scale: f64) -> Self {
        let s = scale / (d as f64).sqrt();
        Self {
            wq: rng.normal_matrix(d, d, s),
            wk: rng.normal_matrix(d, d, s),
            wv: rng.normal_matrix(d, d, s),
            wo: rng.normal_matrix(d, d, s),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CombineParams {
    pub mode: CombineMode,
    /// `1×d` for CG-1, `2×d` for CG-2.
    pub w_cg: Option<Matrix>,
}

impl CombineParams {
    pub fn direct() -> Self {
        Self {
            mode: CombineMode::DirectAdd,
            w_cg: None,
        }
    }

    pub fn new(mode: CombineMode, w_cg: Option<Matrix>) -> Result<Self> {
        let c = Self { mode, w_cg };
        c.validate(None)?;
        Ok(c)
    }

    pub fn validate(&self, d: Option<usize>) -> Result<()> {
        match (self.mode.cg_rows(), &self.w_cg) {
            (None, None) => Ok(()),
            (Some(r), Some(w)) if w.rows() == r && d.map_or(true, |d| w.cols() == d) => Ok(()),
            (Some(r), Some(w)) => Err(Error::Shape {
                op: "combine weight",
                left: w.shape(),
                right: (r, d.unwrap_or(w.cols())),
            }),
            _ => Err(Error::config(format!(
                "{:?} combine: coefficient weight must be present iff the mode is gated",
                self.mode
            ))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MoELayer {
    pub variant: Variant,
    pub experts: Vec<ExpertParams>,
    pub shared: Option<ExpertParams>,
    pub gate: GateParams,
    pub combine: CombineParams,
    pub shortcut_pos: Option<ShortcutPos>,
    pub k_routed: usize,
    pub capacity: CapacityConfig,
    /// DGMoE distinct-expert constraint.
    pub distinct: bool,
}

impl MoELayer {
    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }

    pub fn validate(&self) -> Result<()> {
        self.gate.validate()?;
        let n = self.experts.len();
        if n == 0 || self.gate.n_experts() != n {
            return Err(Error::config(format!(
                "gate scores {} experts but the layer holds {n}",
                self.gate.n_experts()
            )));
        }
        if self.k_routed != self.gate.k {
            return Err(Error::config("k_routed differs from the gate's k"));
        }
        let shared = matches!(self.variant, Variant::SharedExpert | Variant::ScMoE);
        if shared != self.shared.is_some() {
            return Err(Error::config(format!(
                "{:?}: shared expert must be present iff the variant uses one",
                self.variant
            )));
        }
        let shortcut = matches!(self.variant, Variant::ScMoE | Variant::DgMoE);
        if shortcut != self.shortcut_pos.is_some() {
            return Err(Error::config(format!(
                "{:?}: shortcut_pos must be present iff the variant uses a shortcut",
                self.variant
            )));
        }
        if self.variant == Variant::DgMoE && (n < 2 || self.k_routed != 1) {
            return Err(Error::config("DGMoE needs N >= 2 experts and top-1 gatings"));
        }
        if !shared && self.combine.mode != CombineMode::DirectAdd {
            return Err(Error::config("gated combine needs a shared expert"));
        }
        self.combine.validate(Some(self.gate.dim()))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub enum Feed {
    Mlp(ExpertParams),
    Moe(MoELayer),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BlockParams {
    pub attention: AttentionParams,
    pub feed: Feed,
}

impl BlockParams {
    pub fn moe(&self) -> Option<&MoELayer> {
        match &self.feed {
            Feed::Moe(m) => Some(m),
            Feed::Mlp(_) => None,
        }
    }

    /// Same structure with every tensor zeroed.
    pub fn zeros_like(&self) -> Self {
        let mut wrapped = ModelParams {
            blocks: vec![self.clone()],
        };
        for (_, m) in wrapped.named_mut() {
            m.data_mut().fill(0.0);
        }
        wrapped.blocks.pop().expect("one block")
    }

    pub fn moe_mut(&mut self) -> Option<&mut MoELayer> {
        match &mut self.feed {
            Feed::Moe(m) => Some(m),
            Feed::Mlp(_) => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    pub blocks: Vec<BlockParams>,
}

enum Fill<'a> {
    Zero,
    Random(&'a mut Rng, f64),
}

impl Fill<'_> {
    fn mat(&mut self, r: usize, c: usize, std: f64) -> Matrix {
        match self {
            Fill::Zero => Matrix::zeros(r, c),
            Fill::Random(rng, s) => rng.normal_matrix(r, c, *s * std),
        }
    }

    fn expert(&mut self, d: usize, h: usize) -> ExpertParams {
        match self {
            Fill::Zero => ExpertParams::zeros(d, h),
            Fill::Random(rng, s) => ExpertParams::random(d, h, rng, *s),
        }
    }

    fn attention(&mut self, d: usize) -> AttentionParams {
        match self {
            Fill::Zero => AttentionParams::zeros(d),
            Fill::Random(rng, s) => AttentionParams::random(d, rng, *s),
        }
    }
}

/// Names and shapes of every parameter `cfg` implies, in the order of
/// [`ModelParams::named`], without allocating any matrices.
pub fn param_shapes(cfg: &ModelConfig) -> Result<Vec<(String, (usize, usize))>> {
    cfg.validate()?;
    let (d, h, n) = (cfg.d_model, cfg.d_hidden, cfg.n_experts);
    let expert = |prefix: String, out: &mut Vec<(String, (usize, usize))>| {
        for (name, shape) in [("w1", (d, h)), ("b1", (1, h)), ("w2", (h, d)), ("b2", (1, d))] {
            out.push((format!("{prefix}.{name}"), shape));
        }
    };
    let mut out = Vec::new();
    for b in 0..cfg.layers {
        for w in ["wq", "wk", "wv", "wo"] {
            out.push((format!("blocks.{b}.attn.{w}"), (d, d)));
        }
        if cfg.is_moe_block(b) {
            for i in 0..n {
                expert(format!("blocks.{b}.moe.experts.{i}"), &mut out);
            }
            if cfg.has_shared_expert() {
                expert(format!("blocks.{b}.moe.shared"), &mut out);
            }
            out.push((format!("blocks.{b}.moe.gate.w_gate"), (d, n)));
            out.push((format!("blocks.{b}.moe.gate.w_noise"), (d, n)));
            if let Some(r) = cfg.combine.cg_rows() {
                out.push((format!("blocks.{b}.moe.cg.w"), (r, d)));
            }
        } else {
            expert(format!("blocks.{b}.mlp"), &mut out);
        }
    }
    Ok(out)
}

impl ModelParams {
    /// All-zero parameters with the structure implied by `cfg`.
    pub fn zeros(cfg: &ModelConfig) -> Result<Self> {
        Self::build(cfg, Fill::Zero)
    }

    /// Seeded random initialisation (weights `N(0, 1/fan_in)`, biases `N(0, 0.01)`).
    pub fn init(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        Self::init_scaled(cfg, seed, 1.0)
    }

    /// Like [`ModelParams::init`] with every standard deviation multiplied by `scale`.
    pub fn init_scaled(cfg: &ModelConfig, seed: u64, scale: f64) -> Result<Self> {
        let mut rng = Rng::new(seed);
        Self::build(cfg, Fill::Random(&mut rng, scale))
    }

    fn build(cfg: &ModelConfig, mut fill: Fill<'_>) -> Result<Self> {
        cfg.validate()?;
        let (d, h, n) = (cfg.d_model, cfg.d_hidden, cfg.n_experts);
        let inv_sqrt_d = 1.0 / (d as f64).sqrt();
        let mut blocks = Vec::with_capacity(cfg.layers);
        let mut moe_index = 0;
        for b in 0..cfg.layers {
            let attention = fill.attention(d);
            let feed = if cfg.is_moe_block(b) {
                let experts = (0..n).map(|_| fill.expert(d, h)).collect();
                let shared = cfg.has_shared_expert().then(|| fill.expert(d, h));
                let gate = GateParams::new(
                    fill.mat(d, n, inv_sqrt_d),
                    fill.mat(d, n, 0.5 * inv_sqrt_d),
                    cfg.k_routed,
                    cfg.gate_noise,
                )?;
                let w_cg = cfg.combine.cg_rows().map(|r| fill.mat(r, d, inv_sqrt_d));
                let layer = MoELayer {
                    variant: cfg.variant,
                    experts,
                    shared,
                    gate,
                    combine: CombineParams::new(cfg.combine, w_cg)?,
                    shortcut_pos: cfg.shortcut_for(moe_index),
                    k_routed: cfg.k_routed,
                    capacity: CapacityConfig::new(cfg.capacity_factor)?,
                    distinct: cfg.dgmoe_distinct,
                };
                moe_index += 1;
                Feed::Moe(layer)
            } else {
                Feed::Mlp(fill.expert(d, h))
            };
            blocks.push(BlockParams { attention, feed });
        }
        Ok(Self { blocks })
    }

    /// Checks that the parameters have exactly the structure `cfg` implies.
    pub fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let expected = Self::zeros(cfg)?;
        if expected.blocks.len() != self.blocks.len() {
            return Err(Error::config(format!(
                "config has {} blocks, parameters have {}",
                expected.blocks.len(),
                self.blocks.len()
            )));
        }
        for (b, (want, got)) in expected.blocks.iter().zip(&self.blocks).enumerate() {
            match (&want.feed, &got.feed) {
                (Feed::Mlp(_), Feed::Mlp(_)) => {}
                (Feed::Moe(w), Feed::Moe(g)) => {
                    g.validate()?;
                    if w.variant != g.variant
                        || w.shortcut_pos != g.shortcut_pos
                        || w.k_routed != g.k_routed
                        || w.combine.mode != g.combine.mode
                    {
                        return Err(Error::config(format!("block {b}: MoE layer disagrees with config")));
                    }
                }
                _ => return Err(Error::config(format!("block {b}: feed type disagrees with config"))),
            }
        }
        let want = expected.named();
        let got = self.named();
        if want.len() != got.len() {
            return Err(Error::config("parameter count disagrees with config"));
        }
        for ((wn, wm), (gn, gm)) in want.iter().zip(&got) {
            if wn != gn {
                return Err(Error::UnknownParameter(gn.clone()));
            }
            if wm.shape() != gm.shape() {
                return Err(Error::Shape {
                    op: "parameter",
                    left: gm.shape(),
                    right: wm.shape(),
                });
            }
        }
        Ok(())
    }

    /// Same structure with every tensor zeroed; used as a gradient accumulator.
    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, m) in z.named_mut() {
            m.data_mut().fill(0.0);
        }
        z
    }

    /// Every tensor with its dotted name, in a fixed order.
    pub fn named(&self) -> Vec<(String, &Matrix)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter().enumerate() {
            let a = &block.attention;
            for (n, m) in [("wq", &a.wq), ("wk", &a.wk), ("wv", &a.wv), ("wo", &a.wo)] {
                out.push((format!("blocks.{b}.attn.{n}"), m));
            }
            match &block.feed {
                Feed::Mlp(e) => {
                    for (n, m) in e.tensors() {
                        out.push((format!("blocks.{b}.mlp.{n}"), m));
                    }
                }
                Feed::Moe(l) => {
                    for (i, e) in l.experts.iter().enumerate() {
                        for (n, m) in e.tensors() {
                            out.push((format!("blocks.{b}.moe.experts.{i}.{n}"), m));
                        }
                    }
                    if let Some(e) = &l.shared {
                        for (n, m) in e.tensors() {
                            out.push((format!("blocks.{b}.moe.shared.{n}"), m));
                        }
                    }
                    out.push((format!("blocks.{b}.moe.gate.w_gate"), &l.gate.w_gate));
                    out.push((format!("blocks.{b}.moe.gate.w_noise"), &l.gate.w_noise));
                    if let Some(w) = &l.combine.w_cg {
                        out.push((format!("blocks.{b}.moe.cg.w"), w));
                    }
                }
            }
        }
        out
    }

    pub fn named_mut(&mut self) -> Vec<(String, &mut Matrix)> {
        let mut out = Vec::new();
        for (b, block) in self.blocks.iter_mut().enumerate() {
            let a = &mut block.attention;
            for (n, m) in [
                ("wq", &mut a.wq),
                ("wk", &mut a.wk),
                ("wv", &mut a.wv),
                ("wo", &mut a.wo),
            ] {
                out.push((format!("blocks.{b}.attn.{n}"), m));
            }
            match &mut block.feed {
                Feed::Mlp(e) => {
                    for (n, m) in e.tensors_mut() {
                        out.push((format!("blocks.{b}.mlp.{n}"), m));
                    }
                }
                Feed::Moe(l) => {
                    for (i, e) in l.experts.iter_mut().enumerate() {
                        for (n, m) in e.tensors_mut() {
                            out.push((format!("blocks.{b}.moe.experts.{i}.{n}"), m));
                        }
                    }
                    if let Some(e) = &mut l.shared {
                        for (n, m) in e.tensors_mut() {
                            out.push((format!("blocks.{b}.moe.shared.{n}"), m));
                        }
                    }
                    out.push((format!("blocks.{b}.moe.gate.w_gate"), &mut l.gate.w_gate));
                    out.push((format!("blocks.{b}.moe.gate.w_noise"), &mut l.gate.w_noise));
                    if let Some(w) = &mut l.combine.w_cg {
                        out.push((format!("blocks.{b}.moe.cg.w"), w));
                    }
                }
            }
        }
        out
    }

    pub fn get(&self, name: &str) -> Result<&Matrix> {
        self.named()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Matrix> {
        self.named_mut()
            .into_iter()
            .find(|(n, _)| n == name)
            .map(|(_, m)| m)
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn scalar_count(&self) -> usize {
        self.named().iter().map(|(_, m)| m.len()).sum()
    }
}
