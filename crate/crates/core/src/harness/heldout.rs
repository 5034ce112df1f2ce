//! Held-out transitions and trajectories for measuring model generalization.

use serde::Serialize;

use crate::error::Result;
use crate::estimation::GaussianBelief;
use crate::linalg::{mvn_sample, Vector};
use crate::rng::RngStream;
use crate::systems::SystemModel;

use super::config::HeldoutSpec;

#[derive(Clone, Debug, PartialEq)]
pub struct HeldoutTransition {
    pub x: Vector,
    pub u: Vector,
    pub x_next: Vector,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeldoutTrajectory {
    /// `controls.len() + 1` states, starting from the initial state.
    pub states: Vec<Vector>,
    pub controls: Vec<Vector>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct HeldoutSet {
    pub transitions: Vec<HeldoutTransition>,
    pub trajectories: Vec<HeldoutTrajectory>,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct HeldoutErrors {
    pub single_step: f64,
    pub autoregressive: f64,
    /// Some prediction failed or blew up; the affected error is `+inf`.
    pub diverged: bool,
}

fn noisy_step(
    sys: &dyn SystemModel,
    x: &Vector,
    u: &Vector,
    theta: &Vector,
    rng: &mut RngStream,
) -> Result<Vector> {
    let mean = sys.step(x, u, theta)?;
    mvn_sample(&mean, sys.state_noise(), rng)
}

/// Random-control transitions from random starts, plus random-control
/// trajectories, all under `theta_true` with process noise.
pub fn gen_heldout(
    sys: &dyn SystemModel,
    theta_true: &Vector,
    spec: &HeldoutSpec,
    rng: &mut RngStream,
) -> Result<HeldoutSet> {
    let mut transitions = Vec::with_capacity(spec.n_transitions);
    for _ in 0..spec.n_transitions {
        let x = sys.sample_state(rng);
        let u = sys.random_control(rng);
        let x_next = noisy_step(sys, &x, &u, theta_true, rng)?;
        transitions.push(HeldoutTransition { x, u, x_next });
    }
    let mut trajectories = Vec::with_capacity(spec.n_trajectories);
    for _ in 0..spec.n_trajectories {
        let mut states = vec![sys.sample_state(rng)];
        let mut controls = Vec::with_capacity(spec.traj_length);
        for _ in 0..spec.traj_length {
            let u = sys.random_control(rng);
            let next = noisy_step(sys, states.last().unwrap(), &u, theta_true, rng)?;
            controls.push(u);
            states.push(next);
        }
        trajectories.push(HeldoutTrajectory { states, controls });
    }
    Ok(HeldoutSet {
        transitions,
        trajectories,
    })
}

/// Mean one-step error `‖x' − f(x, u, θ̄)‖` and mean summed autoregressive
/// error over trajectories, both under the belief mean.
pub fn evaluate_heldout(
    belief: &GaussianBelief,
    sys: &dyn SystemModel,
    set: &HeldoutSet,
) -> HeldoutErrors {
    let theta = sys.project_theta(belief.mean());
    let mut diverged = false;
    let mut norm_or_inf = |pred: Result<Vector>, truth: &Vector| match pred {
        Ok(p) if p.iter().all(|v| v.is_finite()) => (truth - p).norm(),
        _ => {
            diverged = true;
            f64::INFINITY
        }
    };

    let single_step = mean(
        set.transitions
            .iter()
            .map(|t| norm_or_inf(sys.step(&t.x, &t.u, &theta), &t.x_next)),
        set.transitions.len(),
    );

    let mut total = Vec::with_capacity(set.trajectories.len());
    for traj in &set.trajectories {
        let mut x = traj.states[0].clone();
        let mut err = 0.0;
        for (u, truth) in traj.controls.iter().zip(&traj.states[1..]) {
            match sys.step(&x, u, &theta) {
                Ok(next) if next.iter().all(|v| v.is_finite()) => {
                    err += (truth - &next).norm();
                    x = next;
                }
                _ => {
                    err = f64::INFINITY;
                    break;
                }
            }
        }
        total.push(err);
    }
    diverged |= total.iter().any(|e| e.is_infinite());
    let autoregressive = mean(total.iter().copied(), total.len());

    HeldoutErrors {
        single_step,
        autoregressive,
        diverged,
    }
}

fn mean(values: impl Iterator<Item = f64>, n: usize) -> f64 {
    if n == 0 {
        return f64::NAN;
    }
    values.sum::<f64>() / n as f64
}
