//! Self-checks run by `activeid verify`.

use std::fmt;

use serde::Serialize;

use crate::error::Result;
use crate::estimation::{ekf_update, info_form_covariance, run_learning_process, GaussianBelief};
use crate::infocost::{directed_info_cost_mc, mi_cost, DirectedInfoConfig, MarginalEstimator};
use crate::linalg::{Matrix, Psd, Vector};
use crate::rng::RngStream;
use crate::systems::fixtures::{FixedSensitivity, ScalarLinear};
use crate::systems::{DoubleIntegrator, NoiseModel, SystemModel};

#[derive(Clone, Debug, Serialize)]
pub struct CheckResult {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

impl fmt::Display for CheckResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let status = if self.passed { "PASS" } else { "FAIL" };
        write!(f, "{status} {}: {}", self.name, self.detail)
    }
}

/// Settings for the directed-information vs. mutual-information comparison.
#[derive(Clone, Copy, Debug)]
pub struct EquivalenceSettings {
    pub seeds: u64,
    pub horizon: usize,
    pub belief_samples: usize,
    pub noise_samples: usize,
    pub rel_tol: f64,
    pub min_passing: u64,
    /// Isotropic process-noise variance.
    pub state_noise: f64,
}

impl Default for EquivalenceSettings {
    fn default() -> Self {
        Self {
            seeds: 10,
            horizon: 5,
            belief_samples: 20_000,
            noise_samples: 512,
            rel_tol: 0.03,
            min_passing: 9,
            state_noise: 0.1,
        }
    }
}

/// Double integrator with process noise `0.1 I`, prior `N(θ, 0.25 I)` and
/// random bounded controls: the Monte-Carlo directed-information cost must
/// match the closed-form MI cost.
pub fn directed_info_equivalence(s: &EquivalenceSettings) -> Result<CheckResult> {
    let sys = DoubleIntegrator::new(0.1)?.with_noise(NoiseModel::isotropic(
        4,
        s.state_noise,
        DoubleIntegrator::N_THETA,
    )?)?;
    let belief = GaussianBelief::isotropic(sys.true_theta().clone(), 0.25)?;
    let cfg = DirectedInfoConfig {
        n_belief_samples: s.belief_samples,
        n_noise_samples: s.noise_samples,
        estimator: MarginalEstimator::PairedPlugin,
    };
    let mut passing = 0;
    let mut worst: f64 = 0.0;
    for seed in 0..s.seeds {
        let mut rng = RngStream::new(seed);
        let controls: Vec<Vector> = (0..s.horizon)
            .map(|_| sys.random_control(&mut rng))
            .collect();
        let x0 = Vector::zeros(4);
        let closed = mi_cost(&sys, &x0, &controls, &belief)?;
        let mc = directed_info_cost_mc(&sys, &x0, &controls, &belief, &cfg, &mut rng)?;
        let rel = ((mc.value - closed) / closed).abs();
        worst = worst.max(rel);
        if rel <= s.rel_tol {
            passing += 1;
        }
    }
    Ok(CheckResult {
        name: "directed-information equivalence",
        passed: passing >= s.min_passing,
        detail: format!(
            "{passing}/{} seeds within {:.0}% (worst {:.2}%)",
            s.seeds,
            s.rel_tol * 100.0,
            worst * 100.0
        ),
    })
}

fn random_psd(n: usize, floor: f64, rng: &mut RngStream) -> Result<Psd> {
    let a = Matrix::from_fn(n, n, |_, _| rng.standard_normal());
    Psd::new(&a * a.transpose() / n as f64 + Matrix::identity(n, n) * floor)
}

/// The filter's covariance update equals the information-form update.
pub fn information_form_identity(instances: u64) -> Result<CheckResult> {
    let mut worst: f64 = 0.0;
    for seed in 0..instances {
        let mut rng = RngStream::new(seed);
        let n_x = 1 + rng.index(4);
        let n_theta = 1 + rng.index(6);
        let jac = Matrix::from_fn(n_x, n_theta, |_, _| rng.standard_normal());
        let noise = random_psd(n_x, 0.1, &mut rng)?;
        let prior = random_psd(n_theta, 0.1, &mut rng)?;
        let sys = FixedSensitivity::new(jac.clone(), noise.clone())?;
        let belief = GaussianBelief::new(rng.standard_normal_vec(n_theta), prior.clone())?;
        let x = rng.standard_normal_vec(n_x);
        let o = rng.standard_normal_vec(n_x);
        let post = ekf_update(&belief, &o, &Vector::zeros(1), &x, &sys)?;
        let info = info_form_covariance(&prior, &jac, &noise)?;
        worst = worst.max((post.cov().as_matrix() - info.as_matrix()).norm());
    }
    Ok(CheckResult {
        name: "information-form identity",
        passed: worst <= 1e-8,
        detail: format!("{instances} instances, max Frobenius gap {worst:.2e}"),
    })
}

/// The filter on `x' = θ x + u` reproduces conjugate Bayesian linear
/// regression.
pub fn conjugate_oracle(seeds: u64) -> Result<CheckResult> {
    let (noise_var, prior_mean, prior_var, steps) = (0.04, 0.0, 1.0, 50);
    let mut worst: f64 = 0.0;
    for seed in 0..seeds {
        let mut rng = RngStream::new(seed);
        let sys = ScalarLinear::new(0.8, noise_var)?;
        let controls: Vec<Vector> = (0..steps).map(|_| sys.random_control(&mut rng)).collect();
        let belief0 = GaussianBelief::isotropic(Vector::from_element(1, prior_mean), prior_var)?;
        let trace = run_learning_process(
            &sys,
            belief0,
            sys.initial_state().clone(),
            sys.true_theta().clone(),
            &controls,
            &mut rng,
        )?;
        let (mut precision, mut weighted) = (1.0 / prior_var, prior_mean / prior_var);
        for (k, u) in controls.iter().enumerate() {
            let (x, x_next) = (trace.states[k][0], trace.states[k + 1][0]);
            precision += x * x / noise_var;
            weighted += x * (x_next - u[0]) / noise_var;
        }
        let post = trace.beliefs.last().unwrap();
        worst = worst
            .max((post.mean()[0] - weighted / precision).abs())
            .max((post.cov().as_matrix()[(0, 0)] - 1.0 / precision).abs());
    }
    Ok(CheckResult {
        name: "conjugate oracle",
        passed: worst <= 1e-6,
        detail: format!("{seeds} seeds, max deviation {worst:.2e}"),
    })
}

/// All checks at their default settings.
pub fn run_all() -> Result<Vec<CheckResult>> {
    Ok(vec![
        directed_info_equivalence(&EquivalenceSettings::default())?,
        information_form_identity(100)?,
        conjugate_oracle(20)?,
    ])
}
