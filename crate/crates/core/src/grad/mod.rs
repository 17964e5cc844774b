//! Reverse-mode gradients, a finite-difference oracle, residual Jacobians
//! and a toy trainer.

mod backward;
mod fd;
mod matrix;
mod residual;
mod train;

pub use backward::{backward, backward_pass, blocks_vjp, replayed_loss, Backward, GradientSet, LossSpec};
pub use fd::{
    central_differences, check_model, compare, fd_gradient, fd_gradient_set, fd_gradient_with, flatten_params,
    load_flat, rel_error, richardson_differences, Differentiable, FdEntry, FdScheme, GradCheckReport, LinearObjective,
    ModelObjective, ParamError, DEFAULT_FD_EPS, DEFAULT_REL_FLOOR,
};
pub use matrix::{case_objective, gradcheck_cases, gradcheck_matrix, GradCheckCase, GradCheckOutcome, MATRIX_FD_EPS};
pub use residual::{
    residual_identity_check, residual_report, LinearUnit, ResidualReport, ResidualUnit, ScMoePairUnit, ZeroUnit,
};
pub use train::{loss_curve_csv, train_toy, train_toy_with, Task, TrainConfig, TrainReport};
