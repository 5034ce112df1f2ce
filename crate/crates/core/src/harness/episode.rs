//! One closed-loop episode: plan, act, observe, filter, record.

use std::time::Instant;

use serde::Serialize;

use crate::error::Result;
use crate::estimation::{learning_step, GaussianBelief};
use crate::infocost::{CostContext, InfoVariant, TaskCostSpec};
use crate::linalg::{Psd, Vector};
use crate::planner::{receding_horizon_step, WarmStart};
use crate::rng::RngStream;
use crate::systems::SystemModel;

use super::config::{Condition, ExperimentConfig};
use super::heldout::{evaluate_heldout, gen_heldout, HeldoutErrors, HeldoutSet};

/// Metrics recorded after each executed control.
#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct StepRow {
    pub step: usize,
    /// `‖θ̄ − θ‖` after the filter update.
    pub param_error: f64,
    pub cov_trace: f64,
    /// Stage cost of the executed control and the state it led to.
    pub task_cost: f64,
    /// Unweighted information cost of the executed plan (0 without planning
    /// or at λ = 0).
    pub info_cost: f64,
    pub wall_ms: f64,
}

#[derive(Clone, Debug)]
pub struct EpisodeRecord {
    pub condition: Condition,
    pub seed: u64,
    pub rows: Vec<StepRow>,
    pub final_belief: GaussianBelief,
    pub heldout: Option<HeldoutErrors>,
    /// Reason the episode stopped early, if it did.
    pub aborted: Option<String>,
}

impl EpisodeRecord {
    pub fn final_row(&self) -> Option<&StepRow> {
        self.rows.last()
    }
}

/// Seed-level random streams; identical across conditions so that prior,
/// process noise and held-out data are paired.
pub(crate) struct SeedStreams {
    root: RngStream,
}

impl SeedStreams {
    pub(crate) fn new(seed: u64) -> Self {
        Self {
            root: RngStream::new(seed),
        }
    }

    fn prior(&self) -> RngStream {
        self.root.fork_named("prior")
    }

    fn noise(&self) -> RngStream {
        self.root.fork_named("noise")
    }

    fn planner(&self) -> RngStream {
        self.root.fork_named("planner")
    }

    fn random_controls(&self) -> RngStream {
        self.root.fork_named("random-controls")
    }

    pub(crate) fn heldout(&self) -> RngStream {
        self.root.fork_named("heldout")
    }
}

/// Prior belief for a seed: mean offset from the truth by `N(0, σ₀² I)`,
/// covariance `σ₀² I`.
pub fn initial_belief(sys: &dyn SystemModel, prior_std: f64, seed: u64) -> Result<GaussianBelief> {
    let mut rng = SeedStreams::new(seed).prior();
    let offset = rng.standard_normal_vec(sys.n_theta()) * prior_std;
    GaussianBelief::new(
        sys.true_theta() + offset,
        Psd::scaled_identity(sys.n_theta(), prior_std * prior_std)?,
    )
}

/// Held-out data for a seed, shared by every condition.
pub fn heldout_for_seed(
    cfg: &ExperimentConfig,
    sys: &dyn SystemModel,
    seed: u64,
) -> Result<HeldoutSet> {
    gen_heldout(
        sys,
        sys.true_theta(),
        &cfg.heldout,
        &mut SeedStreams::new(seed).heldout(),
    )
}

/// Run one episode with a freshly built system and held-out set.
pub fn run_episode(
    cfg: &ExperimentConfig,
    condition: Condition,
    seed: u64,
) -> Result<EpisodeRecord> {
    let sys = cfg.build_system()?;
    let heldout = heldout_for_seed(cfg, sys.as_ref(), seed)?;
    run_episode_with(cfg, sys.as_ref(), &heldout, condition, seed)
}

/// Run one episode. Only configuration problems are returned as errors;
/// failures during the episode end it early and are recorded in `aborted`.
pub fn run_episode_with(
    cfg: &ExperimentConfig,
    sys: &dyn SystemModel,
    heldout: &HeldoutSet,
    condition: Condition,
    seed: u64,
) -> Result<EpisodeRecord> {
    let task = cfg.task_spec(sys.n_x())?;
    let variant = cfg.info_variant();
    let belief0 = initial_belief(sys, cfg.prior_std, seed)?;

    let streams = SeedStreams::new(seed);
    let mut loop_state = Loop {
        sys,
        task: &task,
        variant: &variant,
        cfg,
        belief: belief0,
        x: sys.initial_state().clone(),
        theta: sys.true_theta().clone(),
        warm: WarmStart::new(),
        noise_rng: streams.noise(),
        plan_rng: streams.planner(),
        random_rng: streams.random_controls(),
    };

    let mut rows = Vec::with_capacity(cfg.episode_length);
    let mut aborted = None;
    for step in 0..cfg.episode_length {
        match loop_state.step(condition, step) {
            Ok(row) => rows.push(row),
            Err(e) => {
                aborted = Some(e.at_step(step).to_string());
                break;
            }
        }
    }
    let heldout = Some(evaluate_heldout(&loop_state.belief, sys, heldout));
    Ok(EpisodeRecord {
        condition,
        seed,
        rows,
        final_belief: loop_state.belief,
        heldout,
        aborted,
    })
}

struct Loop<'a> {
    sys: &'a dyn SystemModel,
    task: &'a TaskCostSpec,
    variant: &'a InfoVariant,
    cfg: &'a ExperimentConfig,
    belief: GaussianBelief,
    x: Vector,
    theta: Vector,
    warm: WarmStart,
    noise_rng: RngStream,
    plan_rng: RngStream,
    random_rng: RngStream,
}

impl Loop<'_> {
    fn step(&mut self, condition: Condition, step: usize) -> Result<StepRow> {
        let start = Instant::now();
        let (u, info_cost) = match condition {
            Condition::Random => (self.sys.random_control(&mut self.random_rng), 0.0),
            Condition::Lambda(lambda) => {
                let ctx = CostContext::new(
                    self.sys,
                    self.belief.clone(),
                    self.x.clone(),
                    lambda,
                    self.task.clone(),
                )?;
                let mut rng = self.plan_rng.fork(step as u64);
                let (u, plan) = receding_horizon_step(
                    &ctx,
                    self.variant,
                    &self.cfg.planner,
                    &mut self.warm,
                    &mut rng,
                )?;
                (u, plan.cost_breakdown.info)
            }
        };
        let t = learning_step(
            self.sys,
            &self.belief,
            &self.x,
            &self.theta,
            &u,
            &mut self.noise_rng,
        )?;
        let task_cost = self.task.stage_cost(&t.x_next, &u);
        self.belief = t.belief;
        self.x = t.x_next;
        self.theta = t.theta_next;
        let wall_ms = if self.cfg.record_wall_time {
            start.elapsed().as_secs_f64() * 1e3
        } else {
            0.0
        };
        Ok(StepRow {
            step,
            param_error: self.belief.error_norm(&self.theta),
            cov_trace: self.belief.cov_trace(),
            task_cost,
            info_cost,
            wall_ms,
        })
    }
}
