//! Cross-entropy-method planner over bounded control sequences, used in a
//! receding-horizon loop.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::infocost::{composite_cost, CostBreakdown, CostContext, InfoVariant};
use crate::linalg::Vector;
use crate::rng::RngStream;
use crate::systems::ControlBounds;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CemConfig {
    pub horizon: usize,
    pub population: usize,
    pub elites: usize,
    pub iterations: usize,
    /// Initial sampling std as a fraction of each control range.
    pub init_std_fraction: f64,
    /// Weight kept on the previous sampling mean at each refit.
    pub momentum: f64,
    pub min_std: f64,
}

impl Default for CemConfig {
    fn default() -> Self {
        Self {
            horizon: 10,
            population: 256,
            elites: 16,
            iterations: 8,
            init_std_fraction: 0.5,
            momentum: 0.1,
            min_std: 1e-3,
        }
    }
}

impl CemConfig {
    pub fn validate(&self) -> Result<()> {
        if self.horizon == 0 || self.iterations == 0 {
            return Err(Error::config(
                "planner horizon and iterations must be positive",
            ));
        }
        if self.elites == 0 || self.elites > self.population {
            return Err(Error::config(format!(
                "planner needs 1 <= elites <= population, got {} and {}",
                self.elites, self.population
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::config("planner momentum must lie in [0, 1)"));
        }
        if !(self.init_std_fraction > 0.0 && self.min_std >= 0.0) {
            return Err(Error::config("planner std settings must be positive"));
        }
        Ok(())
    }
}

/// Result of optimizing a flat decision vector.
#[derive(Clone, Debug, PartialEq)]
pub struct CemOutcome {
    pub best: Vec<f64>,
    pub best_cost: f64,
    /// Best-ever elite cost after each iteration.
    pub elite_cost_history: Vec<f64>,
    pub evaluations: usize,
    pub invalid_candidates: usize,
}

/// Minimize `cost` over the box `bounds` with CEM. The cost receives the
/// candidate and a unique evaluation id, usable to fork a random substream.
/// Failed or non-finite evaluations count as invalid and are never selected.
pub fn cem_plan_with<F>(
    cost: F,
    bounds: &[ControlBounds],
    cfg: &CemConfig,
    init_mean: Option<&[f64]>,
    rng: &mut RngStream,
) -> Result<CemOutcome>
where
    F: Fn(&[f64], u64) -> Result<f64> + Sync,
{
    cfg.validate()?;
    let dim = bounds.len();
    let mut mean: Vec<f64> = match init_mean {
        Some(m) => {
            crate::linalg::check_dim("cem initial mean", dim, m.len())?;
            m.iter().zip(bounds).map(|(v, b)| b.clamp(*v)).collect()
        }
        None => bounds.iter().map(|b| 0.5 * (b.lo + b.hi)).collect(),
    };
    let mut std: Vec<f64> = bounds
        .iter()
        .map(|b| (cfg.init_std_fraction * b.width()).max(cfg.min_std))
        .collect();

    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut history = Vec::with_capacity(cfg.iterations);
    let mut evaluations = 0;
    let mut invalid = 0;

    for iter in 0..cfg.iterations {
        let mut candidates: Vec<Vec<f64>> = (0..cfg.population)
            .map(|_| {
                (0..dim)
                    .map(|d| bounds[d].clamp(mean[d] + std[d] * rng.standard_normal()))
                    .collect()
            })
            .collect();
        candidates[0] = mean.clone();
        let base = (iter * cfg.population) as u64;
        let costs: Vec<f64> = candidates
            .par_iter()
            .enumerate()
            .map(|(idx, c)| match cost(c, base + idx as u64) {
                Ok(v) if v.is_finite() => v,
                _ => f64::INFINITY,
            })
            .collect();
        evaluations += costs.len();

        let mut order: Vec<usize> = (0..costs.len()).filter(|&i| costs[i].is_finite()).collect();
        invalid += costs.len() - order.len();
        if order.is_empty() {
            return Err(Error::AllCandidatesInvalid);
        }
        order.sort_by(|&a, &b| costs[a].total_cmp(&costs[b]).then(a.cmp(&b)));
        let elites = &order[..cfg.elites.min(order.len())];

        let top = elites[0];
        if best.as_ref().is_none_or(|(_, c)| costs[top] < *c) {
            best = Some((candidates[top].clone(), costs[top]));
        }
        history.push(best.as_ref().map_or(f64::INFINITY, |(_, c)| *c));

        let n = elites.len() as f64;
        for d in 0..dim {
            let m = elites.iter().map(|&i| candidates[i][d]).sum::<f64>() / n;
            let var = elites
                .iter()
                .map(|&i| (candidates[i][d] - m).powi(2))
                .sum::<f64>()
                / n;
            let a = cfg.momentum;
            mean[d] = a * mean[d] + (1.0 - a) * m;
            std[d] = (a * std[d] + (1.0 - a) * var.sqrt()).max(cfg.min_std);
        }
    }

    let (best, best_cost) = best.expect("at least one iteration ran");
    Ok(CemOutcome {
        best,
        best_cost,
        elite_cost_history: history,
        evaluations,
        invalid_candidates: invalid,
    })
}

/// A planned control sequence and its cost.
#[derive(Clone, Debug)]
pub struct PlanResult {
    pub controls: Vec<Vector>,
    /// Composite cost of `controls`, re-evaluated.
    pub best_cost: f64,
    pub cost_breakdown: CostBreakdown,
    pub iterations_run: usize,
    pub elite_cost_history: Vec<f64>,
    pub invalid_candidates: usize,
}

fn unflatten(flat: &[f64], n_u: usize) -> Vec<Vector> {
    flat.chunks(n_u).map(Vector::from_row_slice).collect()
}

/// Plan `cfg.horizon` controls minimizing the composite cost in `ctx`.
pub fn cem_plan(
    ctx: &CostContext<'_>,
    variant: &InfoVariant,
    cfg: &CemConfig,
    warm_start: Option<&[Vector]>,
    rng: &mut RngStream,
) -> Result<PlanResult> {
    let n_u = ctx.sys.n_u();
    let bounds: Vec<ControlBounds> = ctx
        .sys
        .control_bounds()
        .iter()
        .copied()
        .cycle()
        .take(n_u * cfg.horizon)
        .collect();
    let init: Option<Vec<f64>> =
        warm_start.map(|w| w.iter().flat_map(|u| u.iter().copied()).collect());
    let evals = rng.fork_named("cem-evaluations");
    let cost = |flat: &[f64], id: u64| -> Result<f64> {
        let mut eval_rng = evals.fork(id);
        Ok(composite_cost(ctx, &unflatten(flat, n_u), variant, &mut eval_rng)?.total)
    };
    let out = cem_plan_with(cost, &bounds, cfg, init.as_deref(), rng)?;
    let controls = unflatten(&out.best, n_u);
    let cost = composite_cost(ctx, &controls, variant, &mut evals.fork(u64::MAX))?;
    Ok(PlanResult {
        controls,
        best_cost: cost.total,
        cost_breakdown: cost,
        iterations_run: out.elite_cost_history.len(),
        elite_cost_history: out.elite_cost_history,
        invalid_candidates: out.invalid_candidates,
    })
}

/// Previous plan shifted by one step, reused as the next initial mean.
#[derive(Clone, Debug, Default)]
pub struct WarmStart {
    plan: Option<Vec<Vector>>,
}

impl WarmStart {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&self) -> Option<&[Vector]> {
        self.plan.as_deref()
    }

    /// Store `plan` advanced by one step, repeating its last control.
    pub fn store(&mut self, plan: &[Vector]) {
        self.plan = shift_plan(plan);
    }

    pub fn clear(&mut self) {
        self.plan = None;
    }
}

pub fn shift_plan(plan: &[Vector]) -> Option<Vec<Vector>> {
    let last = plan.last()?;
    let mut shifted: Vec<Vector> = plan[1..].to_vec();
    shifted.push(last.clone());
    Some(shifted)
}

/// One receding-horizon step: plan, keep the shifted plan, return the first
/// control and the plan it came from.
pub fn receding_horizon_step(
    ctx: &CostContext<'_>,
    variant: &InfoVariant,
    cfg: &CemConfig,
    warm: &mut WarmStart,
    rng: &mut RngStream,
) -> Result<(Vector, PlanResult)> {
    let warm_plan = warm.get().filter(|w| w.len() == cfg.horizon);
    let plan = cem_plan(ctx, variant, cfg, warm_plan, rng)?;
    warm.store(&plan.controls);
    Ok((plan.controls[0].clone(), plan))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::estimation::GaussianBelief;
    use crate::infocost::{TaskCostSpec, TaskKind};
    use crate::systems::{DoubleIntegrator, SystemModel};

    fn quadratic(target: &[f64]) -> impl Fn(&[f64], u64) -> Result<f64> + Sync + '_ {
        move |u: &[f64], _| Ok(u.iter().zip(target).map(|(a, b)| (a - b).powi(2)).sum())
    }

    #[test]
    fn quadratic_minimum_is_found() {
        let target = [0.7, -1.2, 0.3, 1.9, -0.4, 0.0];
        let bounds = vec![ControlBounds::symmetric(2.0); target.len()];
        let mut worst: f64 = 0.0;
        for seed in 0..20 {
            let out = cem_plan_with(
                quadratic(&target),
                &bounds,
                &CemConfig::default(),
                None,
                &mut RngStream::new(seed),
            )
            .unwrap();
            for (a, b) in out.best.iter().zip(&target) {
                worst = worst.max((a - b).abs());
            }
        }
        assert!(worst < 0.05, "{worst}");
        let out = cem_plan_with(
            quadratic(&target),
            &bounds,
            &CemConfig::default(),
            None,
            &mut RngStream::new(1),
        )
        .unwrap();
        assert_eq!(out.elite_cost_history.len(), 8);
        assert!(out.elite_cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(*out.elite_cost_history.last().unwrap(), out.best_cost);
    }

    #[test]
    fn degenerate_population_keeps_best_sample() {
        let target = [0.5, -0.5];
        let bounds = vec![ControlBounds::symmetric(2.0); 2];
        let cfg = CemConfig {
            population: 8,
            elites: 8,
            iterations: 5,
            ..CemConfig::default()
        };
        let out = cem_plan_with(
            quadratic(&target),
            &bounds,
            &cfg,
            None,
            &mut RngStream::new(6),
        )
        .unwrap();
        assert!(out.elite_cost_history.windows(2).all(|w| w[1] <= w[0]));
        assert_eq!(out.evaluations, 40);
    }

    #[test]
    fn target_outside_bounds_lands_on_the_boundary() {
        let target = [3.0, -0.5];
        let bounds = vec![ControlBounds::symmetric(1.0); 2];
        let out = cem_plan_with(
            quadratic(&target),
            &bounds,
            &CemConfig::default(),
            None,
            &mut RngStream::new(2),
        )
        .unwrap();
        assert!(out.best.iter().zip(&bounds).all(|(v, b)| b.contains(*v)));
        assert!((out.best[0] - 1.0).abs() < 0.02);
    }

    #[test]
    fn initial_mean_is_never_beaten_by_worse_samples() {
        let target = [0.25; 4];
        let bounds = vec![ControlBounds::symmetric(2.0); 4];
        let cfg = CemConfig {
            population: 8,
            elites: 2,
            iterations: 1,
            ..CemConfig::default()
        };
        let out = cem_plan_with(
            quadratic(&target),
            &bounds,
            &cfg,
            Some(&target),
            &mut RngStream::new(3),
        )
        .unwrap();
        assert_eq!(out.best_cost, 0.0);
    }

    #[test]
    fn all_invalid_is_an_error() {
        let bounds = vec![ControlBounds::symmetric(1.0); 2];
        let err = cem_plan_with(
            |_: &[f64], _| Err(Error::NonFiniteOutput("test")),
            &bounds,
            &CemConfig::default(),
            None,
            &mut RngStream::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AllCandidatesInvalid));
        let nan = cem_plan_with(
            |_: &[f64], _| Ok(f64::NAN),
            &bounds,
            &CemConfig::default(),
            None,
            &mut RngStream::new(0),
        );
        assert!(nan.is_err());
    }

    #[test]
    fn config_validation() {
        let bad = CemConfig {
            elites: 300,
            ..CemConfig::default()
        };
        assert!(bad.validate().is_err());
        assert!(CemConfig {
            horizon: 0,
            ..CemConfig::default()
        }
        .validate()
        .is_err());
    }

    /// Scalar `x' = x + u` with cost `Σ x² + r u²`, solved by a backward
    /// Riccati recursion.
    fn lqr_optimal_cost(x0: f64, r: f64, horizon: usize) -> f64 {
        let mut p = 0.0;
        for _ in 0..horizon {
            // V_k(x) = p x²; stage x'² + r u² with x' = x + u
            let q = 1.0 + p;
            p = q * r / (q + r);
        }
        p * x0 * x0
    }

    #[test]
    fn matches_lqr_oracle_on_scalar_integrator() {
        let (x0, r, horizon) = (1.5, 0.5, 5);
        let cost = |u: &[f64], _| {
            let mut x = x0;
            let mut total = 0.0;
            for ui in u {
                x += ui;
                total += x * x + r * ui * ui;
            }
            Ok(total)
        };
        let bounds = vec![ControlBounds::symmetric(2.0); horizon];
        let out = cem_plan_with(
            cost,
            &bounds,
            &CemConfig::default(),
            None,
            &mut RngStream::new(4),
        )
        .unwrap();
        let oracle = lqr_optimal_cost(x0, r, horizon);
        assert!(out.best_cost >= oracle - 1e-9);
        assert!(
            (out.best_cost - oracle) / oracle < 0.01,
            "{} vs {oracle}",
            out.best_cost
        );
    }

    fn goal_context(sys: &DoubleIntegrator, lambda: f64) -> CostContext<'_> {
        let belief = GaussianBelief::isotropic(sys.true_theta().clone(), 0.1).unwrap();
        let task = TaskCostSpec {
            kind: TaskKind::GoalDeviation {
                goal: vec![1.0, -1.0, 0.0, 0.0],
                weights: vec![1.0, 1.0, 0.1, 0.1],
            },
            control_effort_weight: 0.01,
        };
        CostContext::new(sys, belief, Vector::zeros(4), lambda, task).unwrap()
    }

    #[test]
    fn plans_are_deterministic_and_bounded() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let ctx = goal_context(&sys, 1.0);
        let cfg = CemConfig {
            horizon: 5,
            population: 64,
            elites: 8,
            iterations: 4,
            ..CemConfig::default()
        };
        let a = cem_plan(
            &ctx,
            &InfoVariant::ClosedFormMi,
            &cfg,
            None,
            &mut RngStream::new(9),
        )
        .unwrap();
        let b = cem_plan(
            &ctx,
            &InfoVariant::ClosedFormMi,
            &cfg,
            None,
            &mut RngStream::new(9),
        )
        .unwrap();
        assert_eq!(a.controls, b.controls);
        assert_eq!(a.controls.len(), 5);
        assert!(a.controls.iter().all(|u| u
            .iter()
            .zip(sys.control_bounds())
            .all(|(v, bd)| bd.contains(*v))));
    }

    #[test]
    fn warm_start_shifts_and_repeats() {
        let plan: Vec<Vector> = (0..3).map(|i| Vector::from_element(1, i as f64)).collect();
        let shifted = shift_plan(&plan).unwrap();
        assert_eq!(
            shifted.iter().map(|v| v[0]).collect::<Vec<_>>(),
            vec![1.0, 2.0, 2.0]
        );
        assert!(shift_plan(&[]).is_none());

        let sys = DoubleIntegrator::new(0.1).unwrap();
        let ctx = goal_context(&sys, 0.0);
        let cfg = CemConfig {
            horizon: 4,
            population: 32,
            elites: 4,
            iterations: 3,
            ..CemConfig::default()
        };
        let mut warm = WarmStart::new();
        let (u, plan) = receding_horizon_step(
            &ctx,
            &InfoVariant::ClosedFormMi,
            &cfg,
            &mut warm,
            &mut RngStream::new(1),
        )
        .unwrap();
        assert_eq!(u, plan.controls[0]);
        assert_eq!(warm.get().unwrap()[0], plan.controls[1]);
    }
}
