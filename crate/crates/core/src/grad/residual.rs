//! Jacobians of residual stacks `x_{i+1} = x_i + F_i(x_i)`.
//!
//! The end-to-end Jacobian is measured by forward perturbation. The Jacobian
//! of `Σ_i F_i(x_i)` is accumulated in reverse mode from each branch's VJP
//! alone, without ever differentiating the skip connections directly, so
//! `J − J_Fsum − I` isolates the identity term carried by the skips.
//!
//! Jacobians use denominator layout: `J[i][j] = ∂out_j / ∂in_i` over the
//! row-major flattening of the `T×d` representation.

use serde::{Deserialize, Serialize};

use super::backward::blocks_vjp;
use super::fd::DEFAULT_FD_EPS;
use crate::arch::{
    forward_blocks, BlockParams, ModelConfig, ModelParams, MoeFrequency, RoutingCtl, RoutingRecord, ShortcutPos,
    Variant,
};
use crate::error::{Error, Result};
use crate::numkit::{Matrix, Rng};

/// One residual branch `F` with its vector-Jacobian product.
pub trait ResidualUnit: Sync {
    /// Freezes data-dependent discrete choices at the base input.
    fn prepare(&mut self, _x: &Matrix) -> Result<()> {
        Ok(())
    }
    fn branch(&self, x: &Matrix) -> Result<Matrix>;
    /// `g ↦ (∂F/∂x)ᵀ g`
    fn branch_vjp(&self, x: &Matrix, g: &Matrix) -> Result<Matrix>;
}

pub struct ZeroUnit;

impl ResidualUnit for ZeroUnit {
    fn branch(&self, x: &Matrix) -> Result<Matrix> {
        Ok(Matrix::zeros(x.rows(), x.cols()))
    }

    fn branch_vjp(&self, x: &Matrix, _g: &Matrix) -> Result<Matrix> {
        Ok(Matrix::zeros(x.rows(), x.cols()))
    }
}

/// `F(x) = x·A`
pub struct LinearUnit(pub Matrix);

impl ResidualUnit for LinearUnit {
    fn branch(&self, x: &Matrix) -> Result<Matrix> {
        x.matmul(&self.0)
    }

    fn branch_vjp(&self, _x: &Matrix, g: &Matrix) -> Result<Matrix> {
        g.matmul_t(&self.0)
    }
}

/// A dense block followed by an ScMoE block, as one residual branch
/// `F(x) = pair(x) − x`. Routing is pinned to the pattern seen at the base
/// input so the branch is smooth around it.
pub struct ScMoePairUnit {
    pub blocks: [BlockParams; 2],
    record: Option<RoutingRecord>,
}

impl ScMoePairUnit {
    pub fn new(blocks: [BlockParams; 2]) -> Self {
        Self { blocks, record: None }
    }

    pub fn random(d: usize, hidden: usize, n_experts: usize, pos: ShortcutPos, seed: u64) -> Result<Self> {
        let cfg = ModelConfig {
            layers: 2,
            d_model: d,
            d_hidden: hidden,
            n_experts,
            k_routed: 1,
            moe_frequency: MoeFrequency::EverySecondBlock,
            variant: Variant::ScMoE,
            shortcut_pos: Some(pos),
            combine: crate::arch::CombineMode::DirectAdd,
            capacity_factor: 2.0,
            first_layer_pos_override: false,
            pre_ln: false,
            gate_noise: false,
            dgmoe_distinct: true,
        };
        let mut p = ModelParams::init_scaled(&cfg, seed, 0.5)?;
        let b1 = p.blocks.pop().expect("two blocks");
        let b0 = p.blocks.pop().expect("two blocks");
        Ok(Self::new([b0, b1]))
    }

    fn run(&self, x: &Matrix) -> Result<crate::arch::ForwardPass> {
        let record = self
            .record
            .as_ref()
            .ok_or_else(|| Error::Replay("pair unit used before prepare".into()))?;
        forward_blocks(
            &[&self.blocks[0], &self.blocks[1]],
            false,
            x,
            &mut RoutingCtl::replay(record, true),
        )
    }
}

impl ResidualUnit for ScMoePairUnit {
    fn prepare(&mut self, x: &Matrix) -> Result<()> {
        let pass = forward_blocks(
            &[&self.blocks[0], &self.blocks[1]],
            false,
            x,
            &mut RoutingCtl::inference(),
        )?;
        self.record = Some(pass.record);
        Ok(())
    }

    fn branch(&self, x: &Matrix) -> Result<Matrix> {
        self.run(x)?.output.sub(x)
    }

    fn branch_vjp(&self, x: &Matrix, g: &Matrix) -> Result<Matrix> {
        let pass = self.run(x)?;
        let (_, d_in) = blocks_vjp(&[&self.blocks[0], &self.blocks[1]], &pass, g, 0.0)?;
        d_in.sub(g)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResidualReport {
    pub depth: usize,
    /// Flattened representation size `T·d`.
    pub size: usize,
    /// `max |J − J_Fsum − I|`
    pub identity_deviation: f64,
    /// `max |J − J_backward|`, end-to-end FD against full reverse mode.
    pub jacobian_error: f64,
    pub jacobian: Matrix,
    pub branch_jacobian: Matrix,
}

fn stack_forward(units: &[Box<dyn ResidualUnit>], x0: &Matrix) -> Result<Vec<Matrix>> {
    let mut xs = vec![x0.clone()];
    for u in units {
        let x = xs.last().expect("non-empty");
        let next = x.add(&u.branch(x)?)?;
        xs.push(next);
    }
    Ok(xs)
}

/// Pulls `v` (a gradient at `x_k`) back to `x_0` through units `k−1..0`.
fn pull_back(units: &[Box<dyn ResidualUnit>], xs: &[Matrix], k: usize, mut v: Matrix) -> Result<Matrix> {
    for m in (0..k).rev() {
        let through = units[m].branch_vjp(&xs[m], &v)?;
        v.add_assign(&through)?;
    }
    Ok(v)
}

/// Measures the Jacobians of a residual stack at `x0`.
pub fn residual_report(units: &mut [Box<dyn ResidualUnit>], x0: &Matrix) -> Result<ResidualReport> {
    {
        let mut x = x0.clone();
        for u in units.iter_mut() {
            u.prepare(&x)?;
            let next = x.add(&u.branch(&x)?)?;
            x = next;
        }
    }
    let units: &[Box<dyn ResidualUnit>] = units;
    let (rows, cols) = x0.shape();
    let n = rows * cols;
    let xs = stack_forward(units, x0)?;
    let depth = units.len();

    let mut jacobian = Matrix::zeros(n, n);
    let eps = DEFAULT_FD_EPS;
    for i in 0..n {
        let base = x0.data()[i];
        let mut xp = x0.clone();
        xp.data_mut()[i] = base + eps;
        let mut xm = x0.clone();
        xm.data_mut()[i] = base - eps;
        let h = (xp.data()[i] - base) + (base - xm.data()[i]);
        let yp = stack_forward(units, &xp)?.pop().expect("non-empty");
        let ym = stack_forward(units, &xm)?.pop().expect("non-empty");
        for j in 0..n {
            jacobian.set(i, j, (yp.data()[j] - ym.data()[j]) / h);
        }
    }

    let mut branch_jacobian = Matrix::zeros(n, n);
    let mut backward_jacobian = Matrix::zeros(n, n);
    for j in 0..n {
        let mut e = Matrix::zeros(rows, cols);
        e.data_mut()[j] = 1.0;
        let mut col = Matrix::zeros(rows, cols);
        for k in 0..depth {
            let v = units[k].branch_vjp(&xs[k], &e)?;
            col.add_assign(&pull_back(units, &xs, k, v)?)?;
        }
        let full = pull_back(units, &xs, depth, e)?;
        for i in 0..n {
            branch_jacobian.set(i, j, col.data()[i]);
            backward_jacobian.set(i, j, full.data()[i]);
        }
    }

    let residual = jacobian.sub(&branch_jacobian)?.sub(&Matrix::identity(n))?;
    Ok(ResidualReport {
        depth,
        size: n,
        identity_deviation: residual.max_abs(),
        jacobian_error: jacobian.max_abs_diff(&backward_jacobian)?,
        jacobian,
        branch_jacobian,
    })
}

/// Random stack of `depth` dense+ScMoE pairs at width `d` over `tokens` rows.
pub fn residual_identity_check(depth: usize, d: usize, tokens: usize, seed: u64) -> Result<ResidualReport> {
    let positions = [ShortcutPos::Pos1, ShortcutPos::Pos2, ShortcutPos::Pos3];
    let mut units: Vec<Box<dyn ResidualUnit>> = Vec::with_capacity(depth);
    for i in 0..depth {
        let unit_seed = Rng::derive(seed, i as u64).next_u64();
        units.push(Box::new(ScMoePairUnit::random(
            d,
            2 * d,
            4,
            positions[i % 3],
            unit_seed,
        )?));
    }
    let x0 = Rng::derive(seed, u64::MAX).normal_matrix(tokens, d, 1.0);
    residual_report(&mut units, &x0)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_branches_give_exact_identity() {
        let mut units: Vec<Box<dyn ResidualUnit>> =
            (0..3).map(|_| Box::new(ZeroUnit) as Box<dyn ResidualUnit>).collect();
        let x0 = Rng::new(1).normal_matrix(2, 3, 1.0);
        let r = residual_report(&mut units, &x0).unwrap();
        assert_eq!(r.jacobian, Matrix::identity(6));
        assert_eq!(r.identity_deviation, 0.0);
    }

    #[test]
    fn single_linear_branch_is_identity_plus_a() {
        let a = Rng::new(2).normal_matrix(4, 4, 1.0);
        let mut units: Vec<Box<dyn ResidualUnit>> = vec![Box::new(LinearUnit(a.clone()))];
        let x0 = Rng::new(3).normal_matrix(1, 4, 1.0);
        let r = residual_report(&mut units, &x0).unwrap();
        let want = Matrix::identity(4).add(&a).unwrap();
        assert!(r.jacobian.max_abs_diff(&want).unwrap() <= 1e-9);
        assert!(r.branch_jacobian.max_abs_diff(&a).unwrap() <= 1e-15);
        assert!(r.identity_deviation <= 1e-9);
    }

    #[test]
    fn scmoe_pair_stack() {
        let r = residual_identity_check(2, 4, 3, 5).unwrap();
        assert!(r.identity_deviation <= 1e-6, "{}", r.identity_deviation);
        assert!(r.jacobian_error <= 1e-6, "{}", r.jacobian_error);
    }
}
