//! Active identification of dynamical systems: an EKF over unknown
//! parameters, information-seeking planning costs, a sampling-based receding
//! horizon planner, and an experiment harness that compares planners.

// `!(x > 0.0)` is used on purpose so that NaN is rejected too.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod estimation;
pub mod harness;
pub mod infocost;
pub mod linalg;
pub mod planner;
pub mod rng;
pub mod systems;
pub mod verify;

pub use error::{Error, Result};
pub use estimation::{
    ekf_update, info_form_covariance, learning_step, run_learning_process, GaussianBelief,
};
pub use harness::{run_episode, run_experiment, Condition, ExperimentConfig};
pub use infocost::{
    composite_cost, directed_info_cost_mc, mi_cost, rollout_nominal, task_cost, CostBreakdown,
    CostContext, DirectedInfoConfig, InfoEstimate, InfoVariant, MarginalEstimator, TaskCostSpec,
    TaskKind,
};
pub use linalg::{logdet_psd, mvn_sample, symmetrize, Matrix, Psd, Vector};
pub use planner::{
    cem_plan, cem_plan_with, receding_horizon_step, CemConfig, PlanResult, WarmStart,
};
pub use rng::RngStream;
pub use systems::{SystemId, SystemModel};
