//! Expert-parallel execution of one block pair over `D` devices, each with
//! a compute stream and a communication stream.

mod checks;
mod compare;
mod costs;
mod dag;
mod engine;
mod profile;

pub use checks::{check_full_overlap, overlap_compute_total, FullOverlapCheck};
pub use compare::{
    calibrate_profile, calibrated_reference, compare_strategies, moe_comm_fraction, reference_model, simulate,
    ComparisonReport, StrategyResult,
};
pub use costs::{kernel_flops, BlockCosts, KernelFlops, StageDurations, Workload};
pub use dag::{
    build_dag, dag_from_stages, overlap_costs, split_evenly, stages_for, Dag, OpKind, OpNode, StrategySpec, Stream,
};
pub use engine::{run_sim, Span, Timeline};
pub use profile::{alltoall_duration, alltoall_time, to_ticks, HardwareProfile};
