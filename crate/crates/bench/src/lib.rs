//! Shared fixtures for the benchmarks.

use activeid_core::systems::DoubleIntegrator;
use activeid_core::{
    CostContext, GaussianBelief, RngStream, SystemModel, TaskCostSpec, TaskKind, Vector,
};

/// Double integrator at dt = 0.1.
pub fn double_integrator() -> DoubleIntegrator {
    DoubleIntegrator::new(0.1).expect("valid dt")
}

/// Prior `N(θ, 0.25 I)` around the true parameters.
pub fn belief(sys: &DoubleIntegrator) -> GaussianBelief {
    GaussianBelief::isotropic(sys.true_theta().clone(), 0.25).expect("valid belief")
}

/// `horizon` random controls from a fixed seed.
pub fn controls(sys: &DoubleIntegrator, horizon: usize) -> Vec<Vector> {
    let mut rng = RngStream::new(11);
    (0..horizon).map(|_| sys.random_control(&mut rng)).collect()
}

/// Goal-reaching context at the origin with weight `lambda` on the info cost.
pub fn context(sys: &DoubleIntegrator, lambda: f64) -> CostContext<'_> {
    let task = TaskCostSpec {
        kind: TaskKind::GoalDeviation {
            goal: vec![1.0, 1.0, 0.0, 0.0],
            weights: vec![1.0, 1.0, 0.1, 0.1],
        },
        control_effort_weight: 0.01,
    };
    CostContext::new(sys, belief(sys), Vector::zeros(4), lambda, task).expect("valid context")
}
