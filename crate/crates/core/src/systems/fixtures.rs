//! Small systems used by the built-in verification checks and by tests.

use crate::error::Result;
use crate::linalg::{check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

use super::{ControlBounds, SystemModel};

/// Scalar `x' = θ x + u`, fully observed, static θ.
#[derive(Clone, Debug)]
pub struct ScalarLinear {
    theta_true: Vector,
    x0: Vector,
    state_noise: Psd,
    param_noise: Psd,
    bounds: Vec<ControlBounds>,
}

impl ScalarLinear {
    pub fn new(theta: f64, noise_var: f64) -> Result<Self> {
        Ok(Self {
            theta_true: Vector::from_vec(vec![theta]),
            x0: Vector::from_vec(vec![1.0]),
            state_noise: Psd::scaled_identity(1, noise_var)?,
            param_noise: Psd::zeros(1),
            bounds: vec![ControlBounds::symmetric(1.0)],
        })
    }
}

impl SystemModel for ScalarLinear {
    fn name(&self) -> &'static str {
        "scalar_linear"
    }
    fn n_x(&self) -> usize {
        1
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_theta(&self) -> usize {
        1
    }
    fn state_noise(&self) -> &Psd {
        &self.state_noise
    }
    fn param_noise(&self) -> &Psd {
        &self.param_noise
    }
    fn control_bounds(&self) -> &[ControlBounds] {
        &self.bounds
    }
    fn theta_layout(&self) -> Vec<String> {
        vec!["theta".into()]
    }
    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }
    fn initial_state(&self) -> &Vector {
        &self.x0
    }
    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        Vector::from_vec(vec![rng.uniform(-1.0, 1.0)])
    }
    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(Vector::from_vec(vec![theta[0] * x[0] + u[0]]))
    }
    fn dynamics_jacobian_theta(&self, x: &Vector, _u: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(Matrix::from_element(1, 1, x[0]))
    }
}

/// `x' = x + F θ` with a fixed sensitivity `F`; the EKF Jacobian is exactly `F`.
#[derive(Clone, Debug)]
pub struct FixedSensitivity {
    sensitivity: Matrix,
    theta_true: Vector,
    x0: Vector,
    state_noise: Psd,
    param_noise: Psd,
    bounds: Vec<ControlBounds>,
}

impl FixedSensitivity {
    pub fn new(sensitivity: Matrix, state_noise: Psd) -> Result<Self> {
        let (n_x, n_theta) = sensitivity.shape();
        check_dim("fixed_sensitivity noise", n_x, state_noise.side())?;
        Ok(Self {
            sensitivity,
            theta_true: Vector::zeros(n_theta),
            x0: Vector::zeros(n_x),
            state_noise,
            param_noise: Psd::zeros(n_theta),
            bounds: vec![ControlBounds::symmetric(1.0)],
        })
    }
}

impl SystemModel for FixedSensitivity {
    fn name(&self) -> &'static str {
        "fixed_sensitivity"
    }
    fn n_x(&self) -> usize {
        self.sensitivity.nrows()
    }
    fn n_u(&self) -> usize {
        1
    }
    fn n_theta(&self) -> usize {
        self.sensitivity.ncols()
    }
    fn state_noise(&self) -> &Psd {
        &self.state_noise
    }
    fn param_noise(&self) -> &Psd {
        &self.param_noise
    }
    fn control_bounds(&self) -> &[ControlBounds] {
        &self.bounds
    }
    fn theta_layout(&self) -> Vec<String> {
        (0..self.n_theta()).map(|i| format!("theta[{i}]")).collect()
    }
    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }
    fn initial_state(&self) -> &Vector {
        &self.x0
    }
    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        rng.standard_normal_vec(self.n_x())
    }
    fn dynamics(&self, x: &Vector, _u: &Vector, theta: &Vector) -> Result<Vector> {
        Ok(x + &self.sensitivity * theta)
    }
    fn dynamics_jacobian_theta(&self, _x: &Vector, _u: &Vector, _theta: &Vector) -> Result<Matrix> {
        Ok(self.sensitivity.clone())
    }
}
