use crate::error::{Error, Result};
use crate::linalg::{check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

use super::{ControlBounds, NoiseModel, SystemModel};

const MIN_INERTIA: f64 = 1e-9;
/// Floor applied to the inertia estimate before it is used for prediction.
const PROJECTED_MIN_INERTIA: f64 = 1e-3;

/// Euler-discretized damped pendulum, state `[φ, ω]`, torque control.
///
/// `φ̈ = (u − bω − m g l sin φ) / L`, θ = `[b, L]`.
#[derive(Clone, Debug)]
pub struct DampedPendulum {
    dt: f64,
    mass: f64,
    gravity: f64,
    length: f64,
    theta_true: Vector,
    x0: Vector,
    noise: NoiseModel,
    bounds: Vec<ControlBounds>,
}

impl DampedPendulum {
    pub const N_THETA: usize = 2;

    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        Ok(Self {
            dt,
            mass: 1.0,
            gravity: 9.81,
            length: 1.0,
            theta_true: Vector::from_vec(vec![0.3, 1.0]),
            x0: Vector::zeros(2),
            noise: NoiseModel::isotropic(2, 1e-4, Self::N_THETA)?,
            bounds: vec![ControlBounds::symmetric(3.0)],
        })
    }

    pub fn with_physical(mut self, mass: f64, gravity: f64, length: f64) -> Result<Self> {
        if ![mass, gravity, length].iter().all(|v| v.is_finite()) {
            return Err(Error::config("pendulum constants must be finite"));
        }
        self.mass = mass;
        self.gravity = gravity;
        self.length = length;
        Ok(self)
    }

    pub fn with_theta(mut self, theta: Vector) -> Result<Self> {
        check_dim("pendulum theta", Self::N_THETA, theta.len())?;
        if !(theta[1] > 0.0) || theta[0] < 0.0 {
            return Err(Error::config(format!(
                "pendulum needs b >= 0 and L > 0, got b = {}, L = {}",
                theta[0], theta[1]
            )));
        }
        self.theta_true = theta;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vector) -> Result<Self> {
        check_dim("pendulum x0", 2, x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        check_dim("pendulum state noise", 2, noise.state.side())?;
        check_dim("pendulum param noise", Self::N_THETA, noise.param.side())?;
        self.noise = noise;
        Ok(self)
    }

    pub fn with_control_limit(mut self, limit: f64) -> Self {
        self.bounds = vec![ControlBounds::symmetric(limit)];
        self
    }

    fn net_torque(&self, x: &Vector, u: f64, b: f64) -> f64 {
        u - b * x[1] - self.mass * self.gravity * self.length * x[0].sin()
    }
}

impl SystemModel for DampedPendulum {
    fn name(&self) -> &'static str {
        "damped_pendulum"
    }
    fn n_x(&self) -> usize {
        2
    }
    fn n_u(&self) -> usize {
        1
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
        vec!["b (damping)".into(), "L (inertia)".into()]
    }
    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }
    fn initial_state(&self) -> &Vector {
        &self.x0
    }

    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        Vector::from_vec(vec![
            rng.uniform(-std::f64::consts::PI, std::f64::consts::PI),
            rng.uniform(-2.0, 2.0),
        ])
    }

    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        let (b, inertia) = (theta[0], theta[1]);
        if inertia.abs() <= MIN_INERTIA {
            return Err(Error::NonFiniteOutput("damped_pendulum: inertia near zero"));
        }
        let accel = self.net_torque(x, u[0], b) / inertia;
        Ok(Vector::from_vec(vec![
            x[0] + x[1] * self.dt,
            x[1] + accel * self.dt,
        ]))
    }

    fn dynamics_jacobian_theta(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix> {
        let (b, inertia) = (theta[0], theta[1]);
        if inertia.abs() <= MIN_INERTIA {
            return Err(Error::NonFiniteOutput("damped_pendulum: inertia near zero"));
        }
        let mut jac = Matrix::zeros(2, 2);
        jac[(1, 0)] = -x[1] * self.dt / inertia;
        jac[(1, 1)] = -self.net_torque(x, u[0], b) * self.dt / (inertia * inertia);
        Ok(jac)
    }

    fn project_theta(&self, theta: &Vector) -> Vector {
        let mut out = theta.clone();
        out[1] = out[1].max(PROJECTED_MIN_INERTIA);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{finite_difference_jacobian, FD_STEP};
    use std::f64::consts::FRAC_PI_2;

    #[test]
    fn equilibrium_is_fixed() {
        let sys = DampedPendulum::new(0.05).unwrap();
        let x = Vector::zeros(2);
        let next = sys.step(&x, &Vector::zeros(1), sys.true_theta()).unwrap();
        assert_eq!(next, x);
    }

    #[test]
    fn horizontal_release_hand_value() {
        // m g l = 1, b = 0, L = 1, dt = 0.1
        let sys = DampedPendulum::new(0.1)
            .unwrap()
            .with_physical(1.0, 1.0, 1.0)
            .unwrap();
        let theta = Vector::from_vec(vec![0.0, 1.0]);
        let x = Vector::from_vec(vec![FRAC_PI_2, 0.0]);
        let next = sys.step(&x, &Vector::zeros(1), &theta).unwrap();
        assert!((next[0] - FRAC_PI_2).abs() < 1e-15);
        assert!((next[1] + 0.1).abs() < 1e-15);
    }

    #[test]
    fn analytic_jacobian_columns() {
        let sys = DampedPendulum::new(0.05).unwrap();
        let (phi, omega, u, b, l) = (0.7, -1.3, 0.4, 0.3, 1.2);
        let x = Vector::from_vec(vec![phi, omega]);
        let theta = Vector::from_vec(vec![b, l]);
        let jac = sys
            .jac_f_theta(&x, &Vector::from_vec(vec![u]), &theta)
            .unwrap();
        let mgl = 9.81;
        assert_eq!(jac[(0, 0)], 0.0);
        assert_eq!(jac[(0, 1)], 0.0);
        assert!((jac[(1, 0)] - (-omega * 0.05 / l)).abs() < 1e-15);
        let expect = -(u - b * omega - mgl * phi.sin()) * 0.05 / (l * l);
        assert!((jac[(1, 1)] - expect).abs() < 1e-14);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let sys = DampedPendulum::new(0.05).unwrap();
        let mut rng = RngStream::new(31);
        for _ in 0..100 {
            let x = Vector::from_vec(vec![rng.uniform(-3.0, 3.0), rng.uniform(-4.0, 4.0)]);
            let u = Vector::from_vec(vec![rng.uniform(-3.0, 3.0)]);
            let theta = Vector::from_vec(vec![rng.uniform(0.0, 1.0), rng.uniform(0.3, 2.0)]);
            let jac = sys.jac_f_theta(&x, &u, &theta).unwrap();
            let fd = finite_difference_jacobian(&sys, &x, &u, &theta, FD_STEP).unwrap();
            assert!((&jac - &fd).amax() < 1e-4);
        }
    }

    #[test]
    fn vanishing_inertia_is_an_error() {
        let sys = DampedPendulum::new(0.05).unwrap();
        let theta = Vector::from_vec(vec![0.3, 1e-10]);
        let err = sys
            .step(&Vector::from_vec(vec![0.1, 0.0]), &Vector::zeros(1), &theta)
            .unwrap_err();
        assert!(matches!(err, Error::NonFiniteOutput(_)));
        assert!(sys
            .clone()
            .with_theta(Vector::from_vec(vec![0.3, -1.0]))
            .is_err());
    }

    #[test]
    fn projection_keeps_inertia_positive() {
        let sys = DampedPendulum::new(0.05).unwrap();
        let p = sys.project_theta(&Vector::from_vec(vec![0.2, -0.5]));
        assert_eq!(p[0], 0.2);
        assert!(p[1] > 0.0);
    }
}
