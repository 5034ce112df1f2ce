//! Gaussian parameter beliefs, the extended Kalman filter belief updater and
//! the closed-loop learning process.

use nalgebra::Cholesky;

use crate::error::{Error, Result};
use crate::linalg::{check_dim, symmetrize, Matrix, MvnSampler, Psd, Vector};
use crate::rng::RngStream;
use crate::systems::SystemModel;

const INNOVATION_JITTER: f64 = 1e-9;

/// Belief `{θ̄, Σ}` over the unknown dynamics parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct GaussianBelief {
    mean: Vector,
    cov: Psd,
}

impl GaussianBelief {
    pub fn new(mean: Vector, cov: Psd) -> Result<Self> {
        check_dim("belief", cov.side(), mean.len())?;
        if mean.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput("belief mean"));
        }
        Ok(Self { mean, cov })
    }

    pub fn isotropic(mean: Vector, variance: f64) -> Result<Self> {
        let n = mean.len();
        Self::new(mean, Psd::scaled_identity(n, variance)?)
    }

    pub fn mean(&self) -> &Vector {
        &self.mean
    }

    pub fn cov(&self) -> &Psd {
        &self.cov
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn cov_trace(&self) -> f64 {
        self.cov.trace()
    }

    /// `‖θ̄ − θ‖`
    pub fn error_norm(&self, theta: &Vector) -> f64 {
        (&self.mean - theta).norm()
    }
}

/// Solve `S · X = rhs`, retrying once with `1e-9·I` added to `S`.
fn innovation_solve(s: &Matrix, rhs: &Matrix) -> Result<Matrix> {
    if let Some(ch) = Cholesky::new(s.clone()) {
        return Ok(ch.solve(rhs));
    }
    let n = s.nrows();
    Cholesky::new(s + Matrix::identity(n, n) * INNOVATION_JITTER)
        .map(|ch| ch.solve(rhs))
        .ok_or(Error::SingularInnovation)
}

/// One EKF belief update from observation `o_next` after applying `u` in the
/// (fully observed) state `x`.
///
/// Prediction: `θ̄⁻ = g(θ̄)`, `Σ⁻ = G Σ Gᵀ + Σᶿ`, `x̂ = f(x, u, θ̄⁻)`,
/// `ô = q(x̂)`. Correction with `H = Q F̂`: `S = H Σ⁻ Hᵀ + Q Σˣ Qᵀ`,
/// `K = Σ⁻ Hᵀ S⁻¹`, `θ̄⁺ = θ̄⁻ + K (o_next − ô)`, `Σ⁺ = sym((I − K H) Σ⁻)`.
pub fn ekf_update(
    belief: &GaussianBelief,
    o_next: &Vector,
    u: &Vector,
    x: &Vector,
    sys: &dyn SystemModel,
) -> Result<GaussianBelief> {
    check_dim("ekf_update: belief", sys.n_theta(), belief.dim())?;
    check_dim("ekf_update: observation", sys.n_o(), o_next.len())?;

    let g_jac = sys.jac_g_theta(&belief.mean)?;
    let pred_mean = sys.param_step(&belief.mean)?;
    let pred_cov =
        &g_jac * belief.cov.as_matrix() * g_jac.transpose() + sys.param_noise().as_matrix();

    // f is only evaluated inside its domain; the mean itself is not projected.
    let eval_theta = sys.project_theta(&pred_mean);
    let x_pred = sys.step(x, u, &eval_theta)?;
    let o_pred = sys.observe(&x_pred)?;

    let f_jac = sys.jac_f_theta(x, u, &eval_theta)?;
    let q_jac = sys.jac_q_x(&x_pred)?;
    let h = &q_jac * &f_jac;
    let s =
        &h * &pred_cov * h.transpose() + &q_jac * sys.state_noise().as_matrix() * q_jac.transpose();

    // K = Σ⁻ Hᵀ S⁻¹ = (S⁻¹ H Σ⁻)ᵀ
    let gain = innovation_solve(&s, &(&h * &pred_cov))?.transpose();
    let innovation = o_next - o_pred;
    let mean = pred_mean + &gain * innovation;
    let n = belief.dim();
    let cov = symmetrize(&((Matrix::identity(n, n) - &gain * &h) * &pred_cov));
    if mean.iter().any(|v| !v.is_finite()) || cov.as_matrix().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFiniteOutput("ekf_update"));
    }
    Ok(GaussianBelief { mean, cov })
}

/// `(Σ⁻⁻¹ + Fᵀ (Σˣ)⁻¹ F)⁻¹`, the fully observed EKF covariance written in
/// information form.
pub fn info_form_covariance(pred_cov: &Psd, jac: &Matrix, state_noise: &Psd) -> Result<Psd> {
    check_dim(
        "info_form_covariance: rows",
        state_noise.side(),
        jac.nrows(),
    )?;
    check_dim("info_form_covariance: cols", pred_cov.side(), jac.ncols())?;
    let weighted = state_noise.solve(jac)?;
    let information = pred_cov.inverse()? + jac.transpose() * weighted;
    let n = pred_cov.side();
    let cov = Cholesky::new(symmetrize(&information).into_matrix())
        .ok_or(Error::SingularMatrix("information matrix"))?
        .solve(&Matrix::identity(n, n));
    Ok(symmetrize(&cov))
}

/// Everything produced by one step of the learning process.
#[derive(Clone, Debug)]
pub struct Transition {
    pub theta_next: Vector,
    pub state_noise: Vector,
    pub x_next: Vector,
    pub observation: Vector,
    pub belief: GaussianBelief,
}

/// Nature propagates θ and x, emits an observation, the agent filters.
///
/// Draws `εᶿ` then `εˣ` from `rng`, always in that order, so that runs with
/// different controls consume the noise stream identically.
pub fn learning_step(
    sys: &dyn SystemModel,
    belief: &GaussianBelief,
    x: &Vector,
    theta: &Vector,
    u: &Vector,
    rng: &mut RngStream,
) -> Result<Transition> {
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
    let param_noise =
        MvnSampler::new(&Vector::zeros(sys.n_theta()), sys.param_noise())?.sample(rng);
    let state_noise = MvnSampler::new(&Vector::zeros(sys.n_x()), sys.state_noise())?.sample(rng);
    let theta_next = sys.param_step(theta)? + param_noise;
    let x_next = sys.step(x, u, &theta_next)? + &state_noise;
    let observation = sys.observe(&x_next)?;
    let belief = ekf_update(belief, &observation, u, x, sys)?;
    Ok(Transition {
        theta_next,
        state_noise,
        x_next,
        observation,
        belief,
    })
}

/// History of one learning run. `beliefs`, `states` and `true_params` hold
/// one more entry than `controls`.
#[derive(Clone, Debug)]
pub struct LearningTrace {
    pub beliefs: Vec<GaussianBelief>,
    pub states: Vec<Vector>,
    pub true_params: Vec<Vector>,
    pub observations: Vec<Vector>,
    pub controls: Vec<Vector>,
    pub state_noise: Vec<Vector>,
}

/// Run the learning process over a fixed control sequence.
pub fn run_learning_process(
    sys: &dyn SystemModel,
    belief0: GaussianBelief,
    x0: Vector,
    theta0: Vector,
    controls: &[Vector],
    rng: &mut RngStream,
) -> Result<LearningTrace> {
    check_dim("run_learning_process: state", sys.n_x(), x0.len())?;
    check_dim("run_learning_process: theta", sys.n_theta(), theta0.len())?;
    let mut trace = LearningTrace {
        beliefs: vec![belief0],
        states: vec![x0],
        true_params: vec![theta0],
        observations: Vec::with_capacity(controls.len()),
        controls: Vec::with_capacity(controls.len()),
        state_noise: Vec::with_capacity(controls.len()),
    };
    for (step, u) in controls.iter().enumerate() {
        check_dim("run_learning_process: control", sys.n_u(), u.len())
            .map_err(|e| e.at_step(step))?;
        let t = learning_step(
            sys,
            trace.beliefs.last().unwrap(),
            trace.states.last().unwrap(),
            trace.true_params.last().unwrap(),
            u,
            rng,
        )
        .map_err(|e| e.at_step(step))?;
        trace.beliefs.push(t.belief);
        trace.states.push(t.x_next);
        trace.true_params.push(t.theta_next);
        trace.observations.push(t.observation);
        trace.controls.push(u.clone());
        trace.state_noise.push(t.state_noise);
    }
    Ok(trace)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::fixtures::{FixedSensitivity, ScalarLinear};
    use crate::systems::{ControlBounds, DoubleIntegrator};
    use std::sync::OnceLock;

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    /// θ' = 0.9 θ, q(x) = x₁.
    #[derive(Debug)]
    struct DecayProjection {
        inner: DoubleIntegrator,
    }

    impl SystemModel for DecayProjection {
        fn name(&self) -> &'static str {
            "decay_projection"
        }
        fn n_x(&self) -> usize {
            4
        }
        fn n_u(&self) -> usize {
            2
        }
        fn n_theta(&self) -> usize {
            24
        }
        fn n_o(&self) -> usize {
            1
        }
        fn state_noise(&self) -> &Psd {
            self.inner.state_noise()
        }
        fn param_noise(&self) -> &Psd {
            self.inner.param_noise()
        }
        fn control_bounds(&self) -> &[ControlBounds] {
            self.inner.control_bounds()
        }
        fn theta_layout(&self) -> Vec<String> {
            self.inner.theta_layout()
        }
        fn true_theta(&self) -> &Vector {
            self.inner.true_theta()
        }
        fn initial_state(&self) -> &Vector {
            self.inner.initial_state()
        }
        fn sample_state(&self, rng: &mut RngStream) -> Vector {
            self.inner.sample_state(rng)
        }
        fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
            self.inner.dynamics(x, u, theta)
        }
        fn dynamics_jacobian_theta(&self, x: &Vector, u: &Vector, t: &Vector) -> Result<Matrix> {
            self.inner.dynamics_jacobian_theta(x, u, t)
        }
        fn param_dynamics(&self, theta: &Vector) -> Vector {
            theta * 0.9
        }
        fn param_jacobian(&self, theta: &Vector) -> Matrix {
            Matrix::identity(theta.len(), theta.len()) * 0.9
        }
        fn observation(&self, x: &Vector) -> Vector {
            v(&[x[0]])
        }
        fn observation_jacobian(&self, x: &Vector) -> Matrix {
            let mut m = Matrix::zeros(1, x.len());
            m[(0, 0)] = 1.0;
            m
        }
    }

    fn decay() -> &'static DecayProjection {
        static SYS: OnceLock<DecayProjection> = OnceLock::new();
        SYS.get_or_init(|| DecayProjection {
            inner: DoubleIntegrator::new(0.1).unwrap(),
        })
    }

    #[test]
    fn test_double_maps() {
        let sys = decay();
        let theta = sys.true_theta().clone();
        assert_eq!(sys.param_step(&theta).unwrap(), &theta * 0.9);
        let x = v(&[3.0, 1.0, 2.0, 4.0]);
        assert_eq!(sys.observe(&x).unwrap(), v(&[3.0]));
        let q = sys.jac_q_x(&x).unwrap();
        assert_eq!(q, Matrix::from_row_slice(1, 4, &[1.0, 0.0, 0.0, 0.0]));
    }

    #[test]
    fn ekf_handles_nonlinear_parameter_map_and_projection() {
        let sys = decay();
        let prior = GaussianBelief::isotropic(sys.true_theta() / 0.9, 0.1).unwrap();
        let x = v(&[1.0, 0.5, -0.2, 0.3]);
        let u = v(&[0.4, -1.0]);
        let o = sys
            .observe(&sys.step(&x, &u, sys.true_theta()).unwrap())
            .unwrap();
        let post = ekf_update(&prior, &o, &u, &x, sys).unwrap();
        // prediction step: mean decays onto the truth, zero innovation keeps it there
        assert!((post.mean() - sys.true_theta()).amax() < 1e-12);
        // prior cov 0.1 → predicted 0.081 I; only the first output row is informative
        assert!(post.cov_trace() < 0.081 * 24.0);
    }

    #[test]
    fn zero_innovation_keeps_mean_and_shrinks_cov() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let prior = GaussianBelief::isotropic(sys.true_theta().clone(), 0.25).unwrap();
        let x = v(&[1.0, -1.0, 0.5, 0.2]);
        let u = v(&[1.0, 0.5]);
        let o = sys.step(&x, &u, sys.true_theta()).unwrap();
        let post = ekf_update(&prior, &o, &u, &x, &sys).unwrap();
        assert_eq!(post.mean(), prior.mean());
        assert!(post.cov_trace() < prior.cov_trace());
    }

    #[test]
    fn uninformative_transition_leaves_belief_unchanged() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let prior =
            GaussianBelief::isotropic(sys.true_theta() + Vector::from_element(24, 0.1), 0.25)
                .unwrap();
        // x = 0 and u = 0 give F̂ = 0
        let x = Vector::zeros(4);
        let u = Vector::zeros(2);
        let o = v(&[0.3, -0.2, 0.1, 0.05]);
        let post = ekf_update(&prior, &o, &u, &x, &sys).unwrap();
        assert_eq!(post, prior);
    }

    /// Posterior of θ in `x' = θ x + u + ε`, ε ~ N(0, σ²), prior N(m₀, s₀²).
    fn conjugate_posterior(xs: &[f64], ys: &[f64], m0: f64, s0: f64, noise: f64) -> (f64, f64) {
        let precision = 1.0 / s0 + xs.iter().map(|x| x * x).sum::<f64>() / noise;
        let info_mean = m0 / s0 + xs.iter().zip(ys).map(|(x, y)| x * y).sum::<f64>() / noise;
        (info_mean / precision, 1.0 / precision)
    }

    #[test]
    fn scalar_ekf_matches_conjugate_regression() {
        for seed in 0..20 {
            let noise = 0.01;
            let sys = ScalarLinear::new(0.8, noise).unwrap();
            let mut rng = RngStream::new(seed);
            let controls: Vec<Vector> = (0..50).map(|_| v(&[rng.uniform(-1.0, 1.0)])).collect();
            let prior = GaussianBelief::isotropic(v(&[0.3]), 0.5).unwrap();
            let trace = run_learning_process(
                &sys,
                prior,
                v(&[1.0]),
                sys.true_theta().clone(),
                &controls,
                &mut rng.fork(1),
            )
            .unwrap();
            let xs: Vec<f64> = trace.states[..50].iter().map(|s| s[0]).collect();
            let ys: Vec<f64> = (0..50)
                .map(|k| trace.states[k + 1][0] - controls[k][0])
                .collect();
            let (m, var) = conjugate_posterior(&xs, &ys, 0.3, 0.5, noise);
            let post = trace.beliefs.last().unwrap();
            assert!((post.mean()[0] - m).abs() < 1e-6, "seed {seed}");
            assert!(
                (post.cov().as_matrix()[(0, 0)] - var).abs() < 1e-6,
                "seed {seed}"
            );
        }
    }

    #[test]
    fn info_form_scalar_value() {
        let post = info_form_covariance(
            &Psd::identity(1),
            &Matrix::from_element(1, 1, 1.0),
            &Psd::identity(1),
        )
        .unwrap();
        assert!((post.as_matrix()[(0, 0)] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn info_form_zero_jacobian_keeps_prior() {
        let prior = Psd::new(Matrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0])).unwrap();
        let post = info_form_covariance(&prior, &Matrix::zeros(3, 2), &Psd::identity(3)).unwrap();
        assert!((post.as_matrix() - prior.as_matrix()).norm() < 1e-14);
    }

    #[test]
    fn info_form_agrees_with_ekf_on_random_instances() {
        let mut rng = RngStream::new(99);
        for _ in 0..100 {
            let n_theta = 1 + rng.index(6);
            let n_x = 1 + rng.index(4);
            let f = Matrix::from_fn(n_x, n_theta, |_, _| rng.standard_normal());
            let c = Matrix::from_fn(n_theta, n_theta, |_, _| rng.standard_normal());
            let prior =
                Psd::new(&c * c.transpose() + Matrix::identity(n_theta, n_theta) * 0.1).unwrap();
            let d = Matrix::from_fn(n_x, n_x, |_, _| rng.standard_normal());
            let noise = Psd::new(&d * d.transpose() + Matrix::identity(n_x, n_x) * 0.1).unwrap();
            let sys = FixedSensitivity::new(f.clone(), noise.clone()).unwrap();
            let belief =
                GaussianBelief::new(rng.standard_normal_vec(n_theta), prior.clone()).unwrap();
            let x = rng.standard_normal_vec(n_x);
            let o = rng.standard_normal_vec(n_x);
            let ekf = ekf_update(&belief, &o, &v(&[0.0]), &x, &sys).unwrap();
            let info = info_form_covariance(&prior, &f, &noise).unwrap();
            assert!((ekf.cov().as_matrix() - info.as_matrix()).norm() < 1e-8);
        }
    }

    #[test]
    fn covariance_is_loewner_nonincreasing() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let mut rng = RngStream::new(17);
        let mut belief = GaussianBelief::isotropic(sys.true_theta().clone(), 0.25).unwrap();
        let mut x = v(&[0.5, 0.5, 0.0, 0.0]);
        for _ in 0..60 {
            let u = sys.random_control(&mut rng);
            let t = learning_step(&sys, &belief, &x, sys.true_theta(), &u, &mut rng).unwrap();
            let diff = belief.cov().as_matrix() - t.belief.cov().as_matrix();
            let min = nalgebra::SymmetricEigen::new(diff).eigenvalues.min();
            assert!(min >= -1e-8, "min eigenvalue {min}");
            belief = t.belief;
            x = t.x_next;
        }
    }

    #[test]
    fn noiseless_consistent_model_stays_put() {
        let sys = DoubleIntegrator::new(0.1)
            .unwrap()
            .with_noise(crate::systems::NoiseModel {
                state: Psd::zeros(4),
                param: Psd::zeros(24),
            })
            .unwrap();
        // zero state noise makes S singular unless the belief is informative;
        // keep a prior so that H Σ Hᵀ is positive definite along the path
        let mut rng = RngStream::new(2);
        let controls: Vec<Vector> = (0..30).map(|_| sys.random_control(&mut rng)).collect();
        let x0 = v(&[0.3, -0.1, 0.2, 0.1]);
        let prior = GaussianBelief::isotropic(sys.true_theta().clone(), 0.1).unwrap();
        let trace = run_learning_process(
            &sys,
            prior,
            x0.clone(),
            sys.true_theta().clone(),
            &controls,
            &mut rng,
        )
        .unwrap();
        let mut x = x0;
        for (k, u) in controls.iter().enumerate() {
            x = sys.step(&x, u, sys.true_theta()).unwrap();
            assert_eq!(trace.states[k + 1], x);
            let drift = (trace.beliefs[k + 1].mean() - trace.beliefs[k].mean()).amax();
            assert!(drift <= 1e-9);
        }
    }

    #[test]
    fn empty_controls_give_initial_trace() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let prior = GaussianBelief::isotropic(sys.true_theta().clone(), 0.1).unwrap();
        let trace = run_learning_process(
            &sys,
            prior.clone(),
            Vector::zeros(4),
            sys.true_theta().clone(),
            &[],
            &mut RngStream::new(0),
        )
        .unwrap();
        assert_eq!(trace.beliefs, vec![prior]);
        assert_eq!(trace.states.len(), 1);
        assert!(trace.controls.is_empty());
    }

    #[test]
    fn trace_records_noise_exactly() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let mut rng = RngStream::new(8);
        let controls: Vec<Vector> = (0..20).map(|_| sys.random_control(&mut rng)).collect();
        let prior = GaussianBelief::isotropic(sys.true_theta().clone(), 0.1).unwrap();
        let trace = run_learning_process(
            &sys,
            prior,
            Vector::zeros(4),
            sys.true_theta().clone(),
            &controls,
            &mut rng,
        )
        .unwrap();
        for k in 0..20 {
            let expect = sys
                .step(
                    &trace.states[k],
                    &trace.controls[k],
                    &trace.true_params[k + 1],
                )
                .unwrap()
                + &trace.state_noise[k];
            assert_eq!(trace.states[k + 1], expect);
        }
        let traces: Vec<f64> = trace.beliefs.iter().map(|b| b.cov_trace()).collect();
        assert!(traces.windows(2).all(|w| w[1] <= w[0] + 1e-8));
    }

    #[test]
    fn out_of_bounds_control_is_rejected_with_step() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let prior = GaussianBelief::isotropic(sys.true_theta().clone(), 0.1).unwrap();
        let controls = vec![v(&[0.0, 0.0]), v(&[5.0, 0.0])];
        let err = run_learning_process(
            &sys,
            prior,
            Vector::zeros(4),
            sys.true_theta().clone(),
            &controls,
            &mut RngStream::new(0),
        )
        .unwrap_err();
        assert!(matches!(err, Error::AtStep { step: 1, .. }));
    }

    #[test]
    fn double_integrator_learning_reduces_error() {
        let sys = DoubleIntegrator::new(0.1).unwrap();
        let mut improved = 0;
        for seed in 0..10 {
            let mut rng = RngStream::new(seed);
            let offset = rng.standard_normal_vec(24) * 0.5;
            let prior = GaussianBelief::isotropic(sys.true_theta() + &offset, 0.25).unwrap();
            let controls: Vec<Vector> = (0..200).map(|_| sys.random_control(&mut rng)).collect();
            let trace = run_learning_process(
                &sys,
                prior.clone(),
                Vector::zeros(4),
                sys.true_theta().clone(),
                &controls,
                &mut rng,
            )
            .unwrap();
            let before = prior.error_norm(sys.true_theta());
            let after = trace.beliefs.last().unwrap().error_norm(sys.true_theta());
            if after < before {
                improved += 1;
            }
        }
        assert!(improved >= 9, "{improved}/10");
    }
}
