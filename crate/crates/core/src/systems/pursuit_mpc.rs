use crate::error::{Error, Result};
use crate::linalg::{check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

use super::double_integrator::double_integrator_matrices;
use super::{ControlBounds, NoiseModel, SystemModel};

const NX: usize = 8;
const MIN_WEIGHT: f64 = 1e-6;

/// Inner solver settings for the pursuer's MPC problem.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MpcSettings {
    pub horizon: usize,
    pub iterations: usize,
    pub step_size: f64,
    /// Bounds on the pursuer's turn rate and acceleration.
    pub turn_limit: f64,
    pub accel_limit: f64,
}

impl Default for MpcSettings {
    fn default() -> Self {
        Self {
            horizon: 5,
            iterations: 50,
            step_size: 0.05,
            turn_limit: 2.0,
            accel_limit: 2.0,
        }
    }
}

type Unicycle = [f64; 4];

fn unicycle_step(p: &Unicycle, omega: f64, accel: f64, dt: f64) -> Unicycle {
    let (s, c) = p[2].sin_cos();
    [
        p[0] + p[3] * c * dt,
        p[1] + p[3] * s * dt,
        p[2] + omega * dt,
        p[3] + accel * dt,
    ]
}

/// Result of one MPC solve.
#[derive(Clone, Debug)]
pub struct MpcSolution {
    /// `[ω, a]` per inner step.
    pub controls: Vec<[f64; 2]>,
    pub cost: f64,
    /// Cost of the all-zero sequence the solver starts from.
    pub initial_cost: f64,
}

/// Evader (double integrator) against a unicycle pursuer that re-solves
///
/// `min_u  w Σ_{k=1..T} ‖p¹_t − p²_k‖² + Σ_{k=0..T-1} ‖u_k‖²`
///
/// every step by fixed-budget projected gradient descent from zero, with
/// gradients from an adjoint pass through the unicycle rollout. Only the
/// planar positions enter the tracking term. θ = `[w]`.
///
/// State `[evader px, py, vx, vy, pursuer px, py, φ, v]`, control is the
/// evader's acceleration.
#[derive(Clone, Debug)]
pub struct PursuitEvasionMpc {
    dt: f64,
    evader_a: Matrix,
    evader_b: Matrix,
    mpc: MpcSettings,
    theta_true: Vector,
    x0: Vector,
    noise: NoiseModel,
    bounds: Vec<ControlBounds>,
}

impl PursuitEvasionMpc {
    pub const N_THETA: usize = 1;

    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        let (evader_a, evader_b) = double_integrator_matrices(dt);
        Ok(Self {
            dt,
            evader_a,
            evader_b,
            mpc: MpcSettings::default(),
            theta_true: Vector::from_vec(vec![5.0]),
            x0: Vector::from_vec(vec![
                0.0,
                0.0,
                0.0,
                0.0,
                -2.0,
                -2.0,
                std::f64::consts::FRAC_PI_4,
                0.0,
            ]),
            noise: NoiseModel::isotropic(NX, 1e-4, Self::N_THETA)?,
            bounds: vec![ControlBounds::symmetric(2.0); 2],
        })
    }

    pub fn with_mpc(mut self, mpc: MpcSettings) -> Result<Self> {
        if mpc.horizon == 0 {
            return Err(Error::config("mpc horizon must be at least 1"));
        }
        if !(mpc.step_size > 0.0) {
            return Err(Error::config("mpc step size must be positive"));
        }
        self.mpc = mpc;
        Ok(self)
    }

    pub fn mpc(&self) -> &MpcSettings {
        &self.mpc
    }

    pub fn with_theta(mut self, theta: Vector) -> Result<Self> {
        check_dim("pe_mpc theta", Self::N_THETA, theta.len())?;
        if !(theta[0] > 0.0) {
            return Err(Error::config("pe_mpc tracking weight must be positive"));
        }
        self.theta_true = theta;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vector) -> Result<Self> {
        check_dim("pe_mpc x0", NX, x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        check_dim("pe_mpc state noise", NX, noise.state.side())?;
        check_dim("pe_mpc param noise", Self::N_THETA, noise.param.side())?;
        self.noise = noise;
        Ok(self)
    }

    pub fn with_control_limit(mut self, limit: f64) -> Self {
        self.bounds = vec![ControlBounds::symmetric(limit); 2];
        self
    }

    fn mpc_cost(&self, start: &Unicycle, target: [f64; 2], w: f64, controls: &[[f64; 2]]) -> f64 {
        let mut p = *start;
        let mut cost = 0.0;
        for u in controls {
            cost += u[0] * u[0] + u[1] * u[1];
            p = unicycle_step(&p, u[0], u[1], self.dt);
            let (dx, dy) = (p[0] - target[0], p[1] - target[1]);
            cost += w * (dx * dx + dy * dy);
        }
        cost
    }

    /// Gradient of the MPC cost with respect to every inner control.
    fn mpc_gradient(
        &self,
        start: &Unicycle,
        target: [f64; 2],
        w: f64,
        controls: &[[f64; 2]],
        traj: &mut Vec<Unicycle>,
        grad: &mut [[f64; 2]],
    ) {
        let dt = self.dt;
        traj.clear();
        traj.push(*start);
        for u in controls {
            let next = unicycle_step(traj.last().unwrap(), u[0], u[1], dt);
            traj.push(next);
        }
        let horizon = controls.len();
        let pos_grad = |p: &Unicycle| [2.0 * w * (p[0] - target[0]), 2.0 * w * (p[1] - target[1])];
        let g = pos_grad(&traj[horizon]);
        let mut adj = [g[0], g[1], 0.0, 0.0];
        for k in (0..horizon).rev() {
            let u = controls[k];
            grad[k] = [2.0 * u[0] + dt * adj[2], 2.0 * u[1] + dt * adj[3]];
            let p = &traj[k];
            let (s, c) = p[2].sin_cos();
            let mut prev = [
                adj[0],
                adj[1],
                -p[3] * s * dt * adj[0] + p[3] * c * dt * adj[1] + adj[2],
                c * dt * adj[0] + s * dt * adj[1] + adj[3],
            ];
            if k >= 1 {
                let g = pos_grad(p);
                prev[0] += g[0];
                prev[1] += g[1];
            }
            adj = prev;
        }
    }

    /// Solve the pursuer's MPC problem from unicycle state `pursuer` toward the
    /// frozen evader position.
    pub fn solve_mpc(&self, evader: &Vector, pursuer: &Vector, w: f64) -> Result<MpcSolution> {
        check_dim("mpc_pursuer_policy: evader", 4, evader.len())?;
        check_dim("mpc_pursuer_policy: pursuer", 4, pursuer.len())?;
        let start = [pursuer[0], pursuer[1], pursuer[2], pursuer[3]];
        let target = [evader[0], evader[1]];
        let horizon = self.mpc.horizon;
        let mut controls = vec![[0.0; 2]; horizon];
        let mut grad = vec![[0.0; 2]; horizon];
        let mut traj = Vec::with_capacity(horizon + 1);
        let initial_cost = self.mpc_cost(&start, target, w, &controls);
        for _ in 0..self.mpc.iterations {
            self.mpc_gradient(&start, target, w, &controls, &mut traj, &mut grad);
            for (u, g) in controls.iter_mut().zip(&grad) {
                u[0] = (u[0] - self.mpc.step_size * g[0])
                    .clamp(-self.mpc.turn_limit, self.mpc.turn_limit);
                u[1] = (u[1] - self.mpc.step_size * g[1])
                    .clamp(-self.mpc.accel_limit, self.mpc.accel_limit);
            }
        }
        let cost = self.mpc_cost(&start, target, w, &controls);
        if !cost.is_finite() || controls.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput("pe_mpc inner solver"));
        }
        Ok(MpcSolution {
            controls,
            cost,
            initial_cost,
        })
    }

    /// First control `[ω, a]` of the pursuer's MPC solution.
    pub fn pursuer_policy(&self, evader: &Vector, pursuer: &Vector, w: f64) -> Result<Vector> {
        let sol = self.solve_mpc(evader, pursuer, w)?;
        Ok(Vector::from_row_slice(&sol.controls[0]))
    }
}

impl SystemModel for PursuitEvasionMpc {
    fn name(&self) -> &'static str {
        "pe_mpc"
    }
    fn n_x(&self) -> usize {
        NX
    }
    fn n_u(&self) -> usize {
        2
    }
    fn n_theta(&self) -> usize {
        Self::N_THETA
    }
    fn state_noise(&self) -> &Psd {
        &self.noise.state
    }
    fn param_noise(&self) -> &Psd {
        &self.noise.param
    }
    fn control_bounds(&self) -> &[ControlBounds] {
        &self.bounds
    }
    fn theta_layout(&self) -> Vec<String> {
        vec!["w (pursuer tracking weight)".into()]
    }
    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }
    fn initial_state(&self) -> &Vector {
        &self.x0
    }

    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        Vector::from_vec(vec![
            rng.uniform(-3.0, 3.0),
            rng.uniform(-3.0, 3.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-3.0, 3.0),
            rng.uniform(-3.0, 3.0),
            rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
            rng.uniform(0.0, 1.0),
        ])
    }

    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        let evader = x.rows(0, 4).into_owned();
        let pursuer = x.rows(4, 4).into_owned();
        let pu = self.pursuer_policy(&evader, &pursuer, theta[0])?;
        let e_next = &self.evader_a * &evader + &self.evader_b * u;
        let p_next = unicycle_step(
            &[pursuer[0], pursuer[1], pursuer[2], pursuer[3]],
            pu[0],
            pu[1],
            self.dt,
        );
        let mut next = Vector::zeros(NX);
        next.rows_mut(0, 4).copy_from(&e_next);
        next.rows_mut(4, 4).copy_from_slice(&p_next);
        Ok(next)
    }

    fn project_theta(&self, theta: &Vector) -> Vector {
        Vector::from_vec(vec![theta[0].max(MIN_WEIGHT)])
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{finite_difference_jacobian, FD_STEP};

    fn sys() -> PursuitEvasionMpc {
        PursuitEvasionMpc::new(0.1).unwrap()
    }

    fn v(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn negligible_weight_gives_zero_control() {
        let s = sys();
        let u = s
            .pursuer_policy(&v(&[3.0, 1.0, 0.0, 0.0]), &v(&[-1.0, -1.0, 0.3, 0.5]), 1e-8)
            .unwrap();
        assert!(u.amax() < 1e-3);
    }

    #[test]
    fn stationary_at_target() {
        let s = sys();
        let u = s
            .pursuer_policy(&v(&[1.0, 2.0, 0.0, 0.0]), &v(&[1.0, 2.0, 0.7, 0.0]), 5.0)
            .unwrap();
        assert!(u.amax() < 1e-12);
    }

    #[test]
    fn adjoint_gradient_matches_finite_differences() {
        let s = sys();
        let mut rng = RngStream::new(51);
        let start = [0.3, -0.2, 0.4, 0.8];
        let target = [2.0, 1.0];
        let controls: Vec<[f64; 2]> = (0..5)
            .map(|_| [rng.uniform(-1.0, 1.0), rng.uniform(-1.0, 1.0)])
            .collect();
        let mut grad = vec![[0.0; 2]; 5];
        let mut traj = Vec::new();
        s.mpc_gradient(&start, target, 3.0, &controls, &mut traj, &mut grad);
        let h = 1e-6;
        for k in 0..5 {
            for d in 0..2 {
                let mut plus = controls.clone();
                plus[k][d] += h;
                let mut minus = controls.clone();
                minus[k][d] -= h;
                let fd = (s.mpc_cost(&start, target, 3.0, &plus)
                    - s.mpc_cost(&start, target, 3.0, &minus))
                    / (2.0 * h);
                assert!(
                    (fd - grad[k][d]).abs() < 1e-6,
                    "k={k} d={d}: {fd} vs {}",
                    grad[k][d]
                );
            }
        }
    }

    #[test]
    fn descent_never_ends_above_zero_initialization() {
        let s = sys();
        let mut rng = RngStream::new(52);
        for _ in 0..100 {
            let x = s.sample_state(&mut rng);
            let w = rng.uniform(0.1, 20.0);
            let sol = s
                .solve_mpc(&x.rows(0, 4).into_owned(), &x.rows(4, 4).into_owned(), w)
                .unwrap();
            assert!(sol.cost <= sol.initial_cost + 1e-12);
        }
    }

    #[test]
    fn single_step_horizon_matches_grid_search() {
        // With one inner step the control cannot move the pursuer yet, so the
        // optimum is the pure effort minimizer.
        let s = sys()
            .with_mpc(MpcSettings {
                horizon: 1,
                ..MpcSettings::default()
            })
            .unwrap();
        let evader = v(&[2.0, 1.0, 0.0, 0.0]);
        let pursuer = v(&[0.0, 0.0, 0.3, 0.5]);
        let start = [0.0, 0.0, 0.3, 0.5];
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=400 {
            for j in 0..=400 {
                let u = [-2.0 + 0.01 * i as f64, -2.0 + 0.01 * j as f64];
                let c = s.mpc_cost(&start, [2.0, 1.0], 5.0, &[u]);
                if c < best.0 {
                    best = (c, u);
                }
            }
        }
        let u = s.pursuer_policy(&evader, &pursuer, 5.0).unwrap();
        assert!((u[0] - best.1[0]).abs() <= 1e-2);
        assert!((u[1] - best.1[1]).abs() <= 1e-2);
    }

    #[test]
    fn two_step_horizon_matches_grid_search() {
        // The second inner control never reaches the tracking term, so the
        // problem reduces to a 2-D search over the first control.
        let s = sys()
            .with_mpc(MpcSettings {
                horizon: 2,
                ..MpcSettings::default()
            })
            .unwrap();
        let start = [0.0, 0.0, 0.3, 0.5];
        let target = [2.0, 1.0];
        let w = 40.0;
        let mut best = (f64::INFINITY, [0.0, 0.0]);
        for i in 0..=400 {
            for j in 0..=400 {
                let u = [-2.0 + 0.01 * i as f64, -2.0 + 0.01 * j as f64];
                let c = s.mpc_cost(&start, target, w, &[u, [0.0, 0.0]]);
                if c < best.0 {
                    best = (c, u);
                }
            }
        }
        let u = s
            .pursuer_policy(&v(&[2.0, 1.0, 0.0, 0.0]), &v(&start), w)
            .unwrap();
        assert!((u[0] - best.1[0]).abs() <= 2e-2, "{u} vs {:?}", best.1);
        assert!((u[1] - best.1[1]).abs() <= 2e-2, "{u} vs {:?}", best.1);
    }

    #[test]
    fn weight_jacobian_matches_wider_stencil() {
        let s = sys();
        let mut rng = RngStream::new(53);
        for _ in 0..100 {
            let x = s.sample_state(&mut rng);
            let u = s.random_control(&mut rng);
            let theta = v(&[rng.uniform(1.0, 10.0)]);
            let jac = s.jac_f_theta(&x, &u, &theta).unwrap();
            let wide = finite_difference_jacobian(&s, &x, &u, &theta, 10.0 * FD_STEP).unwrap();
            assert!((&jac - &wide).amax() < 1e-4);
            // the evader block never depends on w
            assert_eq!(jac.rows(0, 4).amax(), 0.0);
        }
    }

    #[test]
    fn pursuer_moves_by_unicycle_kinematics() {
        let s = sys();
        let x = v(&[5.0, 5.0, 0.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
        let next = s.step(&x, &v(&[0.0, 0.0]), s.true_theta()).unwrap();
        assert!((next[4] - 0.1).abs() < 1e-15);
        assert!(next[5].abs() < 1e-15);
    }
}
