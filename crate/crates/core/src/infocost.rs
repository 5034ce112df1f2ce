//! Planning costs: the closed-form mutual-information cost, a Monte-Carlo
//! estimator of the directed-information cost it specializes, task costs, and
//! the λ-weighted composite `J_task + λ J_info`.

use std::f64::consts::PI;

use nalgebra::{Cholesky, Dyn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::estimation::GaussianBelief;
use crate::linalg::{check_dim, logdet_psd, Matrix, MvnSampler, Psd, Vector};
use crate::rng::RngStream;
use crate::systems::SystemModel;

const NOISE_EIGEN_FLOOR: f64 = 1e-10;
const NOISE_REGULARIZATION: f64 = 1e-8;
const HIGH_VARIANCE_RATIO: f64 = 0.1;

/// Σˣ as used by the information costs: strictly positive definite, with its
/// Cholesky factor and log-determinant cached.
#[derive(Clone, Debug)]
pub struct StateNoiseTerms {
    cov: Psd,
    chol: Cholesky<f64, Dyn>,
    logdet: f64,
    /// True when `1e-8·I` had to be added to make Σˣ invertible.
    pub regularized: bool,
}

impl StateNoiseTerms {
    pub fn new(state_noise: &Psd) -> Result<Self> {
        let regularized = state_noise.min_eigenvalue() < NOISE_EIGEN_FLOOR;
        let cov = if regularized {
            state_noise.add_identity(NOISE_REGULARIZATION)
        } else {
            state_noise.clone()
        };
        let chol = Cholesky::new(cov.as_matrix().clone())
            .ok_or(Error::SingularMatrix("state noise covariance"))?;
        let logdet = logdet_psd(&cov)?;
        Ok(Self {
            cov,
            chol,
            logdet,
            regularized,
        })
    }

    pub fn cov(&self) -> &Psd {
        &self.cov
    }

    pub fn logdet(&self) -> f64 {
        self.logdet
    }

    /// `½ ln det(2πe Σˣ)`, the entropy of the next observation given the
    /// current state, control and parameters.
    pub fn conditional_entropy(&self) -> f64 {
        let n = self.cov.side() as f64;
        0.5 * (n * (2.0 * PI * std::f64::consts::E).ln() + self.logdet)
    }
}

/// Value of an information cost plus estimator diagnostics.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct InfoEstimate {
    pub value: f64,
    /// Monte-Carlo standard error; zero for closed-form costs.
    pub std_error: f64,
    pub noise_regularized: bool,
    /// Standard error above 10% of the estimate's magnitude.
    pub high_variance: bool,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MarginalEstimator {
    /// Entropy of the belief-sample mixture from fresh mixture samples
    /// scored under the mixture log-density.
    GaussianMixturePlugin,
    /// Same samples, but each is also scored under the component it was drawn
    /// from; that term has known mean `−h(o' | o, u, θ)` and cancels most of
    /// the noise-driven variance.
    PairedPlugin,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DirectedInfoConfig {
    pub n_belief_samples: usize,
    /// Fresh mixture samples drawn per planning step.
    pub n_noise_samples: usize,
    pub estimator: MarginalEstimator,
}

impl Default for DirectedInfoConfig {
    fn default() -> Self {
        Self {
            n_belief_samples: 1024,
            n_noise_samples: 8,
            estimator: MarginalEstimator::GaussianMixturePlugin,
        }
    }
}

impl DirectedInfoConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_belief_samples < 2 || self.n_noise_samples < 2 {
            return Err(Error::config(
                "directed-info sample counts must be at least 2",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InfoVariant {
    ClosedFormMi,
    DirectedInfoMc(DirectedInfoConfig),
}

/// What the task term penalizes.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum TaskKind {
    /// `Σ_j w_j (x_j − goal_j)²` per step.
    GoalDeviation {
        goal: Vec<f64>,
        weights: Vec<f64>,
    },
    /// `w · wrap(x[index] − reference)²` per step.
    AngleTracking {
        reference: f64,
        weight: f64,
        index: usize,
    },
    /// `−w ‖p¹ − p²‖²` per step, positions at `[0, 1]` and `[4, 5]`.
    EvaderDistance {
        weight: f64,
    },
    None,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCostSpec {
    pub kind: TaskKind,
    pub control_effort_weight: f64,
}

impl TaskCostSpec {
    pub fn none() -> Self {
        Self {
            kind: TaskKind::None,
            control_effort_weight: 0.0,
        }
    }

    pub fn validate(&self, n_x: usize) -> Result<()> {
        let finite_nonneg = |w: f64| w.is_finite() && w >= 0.0;
        if !finite_nonneg(self.control_effort_weight) {
            return Err(Error::config(
                "control_effort_weight must be finite and >= 0",
            ));
        }
        match &self.kind {
            TaskKind::GoalDeviation { goal, weights } => {
                check_dim("task goal", n_x, goal.len()).map_err(Error::config)?;
                check_dim("task weights", n_x, weights.len()).map_err(Error::config)?;
                if !weights.iter().all(|w| finite_nonneg(*w)) || !goal.iter().all(|g| g.is_finite())
                {
                    return Err(Error::config(
                        "goal deviation weights must be finite and >= 0",
                    ));
                }
            }
            TaskKind::AngleTracking {
                reference,
                weight,
                index,
            } => {
                if *index >= n_x || !finite_nonneg(*weight) || !reference.is_finite() {
                    return Err(Error::config("invalid angle tracking task"));
                }
            }
            TaskKind::EvaderDistance { weight } => {
                if n_x < 6 || !finite_nonneg(*weight) {
                    return Err(Error::config(
                        "evader distance needs two planar agents and w >= 0",
                    ));
                }
            }
            TaskKind::None => {}
        }
        Ok(())
    }

    /// Cost of one transition: the state term on `x_next` plus control effort.
    pub fn stage_cost(&self, x_next: &Vector, u: &Vector) -> f64 {
        let state = match &self.kind {
            TaskKind::GoalDeviation { goal, weights } => x_next
                .iter()
                .zip(goal)
                .zip(weights)
                .map(|((x, g), w)| w * (x - g).powi(2))
                .sum(),
            TaskKind::AngleTracking {
                reference,
                weight,
                index,
            } => weight * wrap_angle(x_next[*index] - reference).powi(2),
            TaskKind::EvaderDistance { weight } => {
                let dx = x_next[0] - x_next[4];
                let dy = x_next[1] - x_next[5];
                -weight * (dx * dx + dy * dy)
            }
            TaskKind::None => 0.0,
        };
        state + self.control_effort_weight * u.norm_squared()
    }
}

/// Wrap an angle to `(−π, π]`.
pub fn wrap_angle(a: f64) -> f64 {
    let r = a.rem_euclid(2.0 * PI);
    if r > PI {
        r - 2.0 * PI
    } else {
        r
    }
}

/// Sum of stage costs along a nominal rollout; `states` starts at `x_t` and
/// has one more entry than `controls`.
pub fn task_cost(spec: &TaskCostSpec, states: &[Vector], controls: &[Vector]) -> Result<f64> {
    check_dim("task_cost", controls.len() + 1, states.len())?;
    Ok(states[1..]
        .iter()
        .zip(controls)
        .map(|(x, u)| spec.stage_cost(x, u))
        .sum())
}

fn check_controls(sys: &dyn SystemModel, controls: &[Vector]) -> Result<()> {
    for u in controls {
        check_dim("control sequence", sys.n_u(), u.len())?;
        for (dim, (v, b)) in u.iter().zip(sys.control_bounds()).enumerate() {
            if !b.contains(*v) {
                return Err(Error::ControlOutOfBounds {
                    dim,
                    value: *v,
                    lo: b.lo,
                    hi: b.hi,
                });
            }
        }
    }
    Ok(())
}

/// Noise-free rollout `x̂_{i+1} = f(x̂_i, u_i, θ̄)`; θ̄ is first mapped into the
/// system's valid parameter region.
pub fn rollout_nominal(
    sys: &dyn SystemModel,
    x0: &Vector,
    controls: &[Vector],
    theta_bar: &Vector,
) -> Result<Vec<Vector>> {
    check_dim("rollout_nominal: state", sys.n_x(), x0.len())?;
    check_controls(sys, controls)?;
    let theta = sys.project_theta(theta_bar);
    let mut states = Vec::with_capacity(controls.len() + 1);
    states.push(x0.clone());
    for u in controls {
        let next = sys.step(states.last().unwrap(), u, &theta)?;
        states.push(next);
    }
    Ok(states)
}

/// `−½ Σ_i ln(det Ŝ_i / det Σˣ)` with `Ŝ_i = F̂_i Σ F̂_iᵀ + Σˣ` along a given
/// nominal rollout.
pub fn mi_cost_along(
    sys: &dyn SystemModel,
    states: &[Vector],
    controls: &[Vector],
    belief: &GaussianBelief,
    noise: &StateNoiseTerms,
) -> Result<f64> {
    let theta = sys.project_theta(belief.mean());
    let sigma = belief.cov().as_matrix();
    if belief.cov().is_zero() {
        return Ok(0.0);
    }
    let mut total = 0.0;
    for (x, u) in states.iter().zip(controls) {
        let jac = sys.jac_f_theta(x, u, &theta)?;
        let s = &jac * sigma * jac.transpose() + noise.cov().as_matrix();
        let logdet = match Cholesky::new(s.clone()) {
            Some(ch) => 2.0 * ch.l_dirty().diagonal().iter().map(|d| d.ln()).sum::<f64>(),
            None => logdet_psd(&Psd::new((&s + s.transpose()) * 0.5)?)?,
        };
        total += logdet - noise.logdet();
    }
    Ok(-0.5 * total)
}

/// Closed-form mutual-information cost with diagnostics.
pub fn mi_cost_estimate(
    sys: &dyn SystemModel,
    x0: &Vector,
    controls: &[Vector],
    belief: &GaussianBelief,
) -> Result<InfoEstimate> {
    check_dim("mi_cost: belief", sys.n_theta(), belief.dim())?;
    let noise = StateNoiseTerms::new(sys.state_noise())?;
    let states = rollout_nominal(sys, x0, controls, belief.mean())?;
    Ok(InfoEstimate {
        value: mi_cost_along(sys, &states, controls, belief, &noise)?,
        std_error: 0.0,
        noise_regularized: noise.regularized,
        high_variance: false,
    })
}

pub fn mi_cost(
    sys: &dyn SystemModel,
    x0: &Vector,
    controls: &[Vector],
    belief: &GaussianBelief,
) -> Result<f64> {
    Ok(mi_cost_estimate(sys, x0, controls, belief)?.value)
}

/// Component means of the one-step predictive mixture, whitened by Σˣ.
fn whitened(chol: &Cholesky<f64, Dyn>, v: &Vector) -> Vector {
    chol.l_dirty()
        .solve_lower_triangular(v)
        .expect("cholesky factor has a positive diagonal")
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let max = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Monte-Carlo estimate of the directed-information cost
/// `−Σ_i [h(ô_{i+1} | ô_{t:i}, u_{t:i}) − h(ô_{i+1} | ô_i, u_i, ϑ_t)]`
/// under a static Gaussian belief and full observation.
///
/// The conditional term is exact. The marginal is the Gaussian mixture
/// `(1/K) Σ_k N(f(x̂_i, u_i, θ_k), Σˣ)` over `K` belief draws `θ_k`, and its
/// entropy is estimated from fresh mixture samples scored under the mixture
/// log-density (log-sum-exp).
pub fn directed_info_cost_mc(
    sys: &dyn SystemModel,
    x0: &Vector,
    controls: &[Vector],
    belief: &GaussianBelief,
    cfg: &DirectedInfoConfig,
    rng: &mut RngStream,
) -> Result<InfoEstimate> {
    cfg.validate()?;
    check_dim("directed_info_cost_mc: belief", sys.n_theta(), belief.dim())?;
    let noise = StateNoiseTerms::new(sys.state_noise())?;
    let states = rollout_nominal(sys, x0, controls, belief.mean())?;
    directed_info_along(sys, &states, controls, belief, &noise, cfg, rng)
}

pub(crate) fn directed_info_along(
    sys: &dyn SystemModel,
    states: &[Vector],
    controls: &[Vector],
    belief: &GaussianBelief,
    noise: &StateNoiseTerms,
    cfg: &DirectedInfoConfig,
    rng: &mut RngStream,
) -> Result<InfoEstimate> {
    let k = cfg.n_belief_samples;
    let m = cfg.n_noise_samples;
    let n_x = sys.n_x();
    let sampler = MvnSampler::new(belief.mean(), belief.cov())?;
    let mut belief_rng = rng.fork_named("belief-samples");
    let thetas: Vec<Vector> = (0..k)
        .map(|_| sys.project_theta(&sampler.sample(&mut belief_rng)))
        .collect();
    let log_k = (k as f64).ln();
    let norm_const = -0.5 * (noise.logdet() + n_x as f64 * (2.0 * PI).ln());
    let h_cond = noise.conditional_entropy();

    let mut value = 0.0;
    let mut variance = 0.0;
    for (i, (x, u)) in states.iter().zip(controls).enumerate() {
        let means: Vec<Vector> = thetas
            .par_iter()
            .map(|th| sys.step(x, u, th).map(|mu| whitened(&noise.chol, &mu)))
            .collect::<Result<_>>()?;

        // Draw (component, standard-normal) pairs sequentially, score in parallel.
        let mut eval_rng = rng.fork(i as u64);
        let draws: Vec<(usize, Vector)> = (0..m)
            .map(|_| (eval_rng.index(k), eval_rng.standard_normal_vec(n_x)))
            .collect();
        let terms: Vec<f64> = draws
            .par_iter()
            .map(|(comp, z)| {
                // whitened sample y = μ̃_comp + z, log N(y; μ̃_j, I) up to norm_const
                let y = &means[*comp] + z;
                let log_mix = log_sum_exp(means.iter().map(|mu| -0.5 * (&y - mu).norm_squared()))
                    - log_k
                    + norm_const;
                match cfg.estimator {
                    MarginalEstimator::GaussianMixturePlugin => -log_mix,
                    MarginalEstimator::PairedPlugin => {
                        let log_comp = -0.5 * z.norm_squared() + norm_const;
                        log_comp - log_mix + h_cond
                    }
                }
            })
            .collect();
        let mean = terms.iter().sum::<f64>() / m as f64;
        let var = terms.iter().map(|t| (t - mean).powi(2)).sum::<f64>() / (m as f64 - 1.0);
        value -= mean - h_cond;
        variance += var / m as f64;
    }
    let std_error = variance.sqrt();
    Ok(InfoEstimate {
        value,
        std_error,
        noise_regularized: noise.regularized,
        high_variance: std_error > HIGH_VARIANCE_RATIO * value.abs(),
    })
}

/// Everything the composite cost needs besides the control sequence.
#[derive(Clone, Debug)]
pub struct CostContext<'a> {
    pub sys: &'a dyn SystemModel,
    pub belief: GaussianBelief,
    pub x0: Vector,
    pub lambda: f64,
    pub task: TaskCostSpec,
    noise: StateNoiseTerms,
}

impl<'a> CostContext<'a> {
    pub fn new(
        sys: &'a dyn SystemModel,
        belief: GaussianBelief,
        x0: Vector,
        lambda: f64,
        task: TaskCostSpec,
    ) -> Result<Self> {
        check_dim("cost context: belief", sys.n_theta(), belief.dim())?;
        check_dim("cost context: state", sys.n_x(), x0.len())?;
        if !(lambda.is_finite() && lambda >= 0.0) {
            return Err(Error::config(format!(
                "lambda must be finite and >= 0, got {lambda}"
            )));
        }
        task.validate(sys.n_x())?;
        let noise = StateNoiseTerms::new(sys.state_noise())?;
        Ok(Self {
            sys,
            belief,
            x0,
            lambda,
            task,
            noise,
        })
    }

    pub fn noise(&self) -> &StateNoiseTerms {
        &self.noise
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize)]
pub struct CostBreakdown {
    pub task: f64,
    /// Unweighted information cost; zero when λ = 0.
    pub info: f64,
    pub total: f64,
}

/// `J_task(rollout) + λ · J_info`. With λ = 0 the information term is not
/// evaluated at all.
pub fn composite_cost(
    ctx: &CostContext<'_>,
    controls: &[Vector],
    variant: &InfoVariant,
    rng: &mut RngStream,
) -> Result<CostBreakdown> {
    let states = rollout_nominal(ctx.sys, &ctx.x0, controls, ctx.belief.mean())?;
    let task = task_cost(&ctx.task, &states, controls)?;
    if ctx.lambda == 0.0 {
        return Ok(CostBreakdown {
            task,
            info: 0.0,
            total: task,
        });
    }
    let info = match variant {
        InfoVariant::ClosedFormMi => {
            mi_cost_along(ctx.sys, &states, controls, &ctx.belief, &ctx.noise)?
        }
        InfoVariant::DirectedInfoMc(cfg) => {
            directed_info_along(
                ctx.sys,
                &states,
                controls,
                &ctx.belief,
                &ctx.noise,
                cfg,
                rng,
            )?
            .value
        }
    };
    Ok(CostBreakdown {
        task,
        info,
        total: task + ctx.lambda * info,
    })
}

/// Matrix form used by tests and the information-form check:
/// `Ŝ = F Σ Fᵀ + Σˣ`.
pub fn predicted_innovation(jac: &Matrix, cov: &Psd, noise: &Psd) -> Result<Psd> {
    let s = jac * cov.as_matrix() * jac.transpose() + noise.as_matrix();
    Psd::new((&s + s.transpose()) * 0.5)
}
