//! Dynamics models `x' = f(x, u, θ) + εˣ`, `θ' = g(θ) + εᶿ`, `o = q(x)` and
//! the four experiment systems.
//!
//! Implementors provide the raw maps ([`SystemModel::dynamics`] and friends);
//! callers go through the checked wrappers ([`SystemModel::step`],
//! [`SystemModel::jac_f_theta`], ...) which validate dimensions and reject
//! non-finite results.

mod double_integrator;
pub mod fixtures;
mod pendulum;
mod pursuit_lqr;
mod pursuit_mpc;

pub use double_integrator::{double_integrator_matrices, DoubleIntegrator};
pub use pendulum::DampedPendulum;
pub use pursuit_lqr::{cholesky_entries, PursuitEvasionLqr};
pub use pursuit_mpc::{MpcSettings, MpcSolution, PursuitEvasionMpc};

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{all_finite, check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

/// Closed interval for one control dimension.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBounds {
    pub lo: f64,
    pub hi: f64,
}

impl ControlBounds {
    pub fn symmetric(limit: f64) -> Self {
        Self {
            lo: -limit,
            hi: limit,
        }
    }

    pub fn clamp(&self, v: f64) -> f64 {
        v.clamp(self.lo, self.hi)
    }

    pub fn width(&self) -> f64 {
        self.hi - self.lo
    }

    pub fn contains(&self, v: f64) -> bool {
        v >= self.lo && v <= self.hi
    }
}

/// Noise covariances shared by every system.
#[derive(Clone, Debug)]
pub struct NoiseModel {
    pub state: Psd,
    pub param: Psd,
}

impl NoiseModel {
    pub fn isotropic(n_x: usize, state_var: f64, n_theta: usize) -> Result<Self> {
        Ok(Self {
            state: Psd::scaled_identity(n_x, state_var)?,
            param: Psd::zeros(n_theta),
        })
    }
}

/// Step size for central finite differences.
pub const FD_STEP: f64 = 1e-5;

/// Central finite-difference `∂f/∂θ`.
pub fn finite_difference_jacobian<S: SystemModel + ?Sized>(
    sys: &S,
    x: &Vector,
    u: &Vector,
    theta: &Vector,
    h: f64,
) -> Result<Matrix> {
    let mut jac = Matrix::zeros(sys.n_x(), theta.len());
    let mut probe = theta.clone();
    for j in 0..theta.len() {
        let orig = probe[j];
        probe[j] = orig + h;
        let plus = sys.dynamics(x, u, &probe)?;
        probe[j] = orig - h;
        let minus = sys.dynamics(x, u, &probe)?;
        probe[j] = orig;
        jac.set_column(j, &((plus - minus) / (2.0 * h)));
    }
    Ok(jac)
}

pub trait SystemModel: Send + Sync + fmt::Debug {
    fn name(&self) -> &'static str;
    fn n_x(&self) -> usize;
    fn n_u(&self) -> usize;
    fn n_theta(&self) -> usize;
    fn n_o(&self) -> usize {
        self.n_x()
    }

    /// Σˣ
    fn state_noise(&self) -> &Psd;
    /// Σᶿ
    fn param_noise(&self) -> &Psd;
    fn control_bounds(&self) -> &[ControlBounds];

    /// Human-readable names of the θ entries, in layout order.
    fn theta_layout(&self) -> Vec<String>;
    fn true_theta(&self) -> &Vector;
    fn initial_state(&self) -> &Vector;
    /// Random state from the region used for held-out data.
    fn sample_state(&self, rng: &mut RngStream) -> Vector;

    /// Noise-free `f(x, u, θ)`. Dimensions are already checked.
    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector>;

    fn param_dynamics(&self, theta: &Vector) -> Vector {
        theta.clone()
    }

    fn observation(&self, x: &Vector) -> Vector {
        x.clone()
    }

    /// `∂f/∂θ`; central differences unless a system overrides it.
    fn dynamics_jacobian_theta(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix> {
        finite_difference_jacobian(self, x, u, theta, FD_STEP)
    }

    fn param_jacobian(&self, theta: &Vector) -> Matrix {
        Matrix::identity(theta.len(), theta.len())
    }

    fn observation_jacobian(&self, x: &Vector) -> Matrix {
        Matrix::identity(x.len(), x.len())
    }

    /// Map a parameter estimate into the region where `f` is defined.
    /// Identity for systems without domain restrictions.
    fn project_theta(&self, theta: &Vector) -> Vector {
        theta.clone()
    }

    fn step(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        check_dim("step: state", self.n_x(), x.len())?;
        check_dim("step: control", self.n_u(), u.len())?;
        check_dim("step: theta", self.n_theta(), theta.len())?;
        let next = self.dynamics(x, u, theta)?;
        if !all_finite(&next) {
            return Err(Error::NonFiniteOutput(self.name()));
        }
        Ok(next)
    }

    fn param_step(&self, theta: &Vector) -> Result<Vector> {
        check_dim("param_step", self.n_theta(), theta.len())?;
        Ok(self.param_dynamics(theta))
    }

    fn observe(&self, x: &Vector) -> Result<Vector> {
        check_dim("observe", self.n_x(), x.len())?;
        Ok(self.observation(x))
    }

    fn jac_f_theta(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Matrix> {
        check_dim("jac_f_theta: state", self.n_x(), x.len())?;
        check_dim("jac_f_theta: control", self.n_u(), u.len())?;
        check_dim("jac_f_theta: theta", self.n_theta(), theta.len())?;
        let jac = self.dynamics_jacobian_theta(x, u, theta)?;
        if jac.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteOutput(self.name()));
        }
        Ok(jac)
    }

    fn jac_g_theta(&self, theta: &Vector) -> Result<Matrix> {
        check_dim("jac_g_theta", self.n_theta(), theta.len())?;
        Ok(self.param_jacobian(theta))
    }

    fn jac_q_x(&self, x: &Vector) -> Result<Matrix> {
        check_dim("jac_q_x", self.n_x(), x.len())?;
        Ok(self.observation_jacobian(x))
    }

    /// Clamp every control dimension into its bounds.
    fn clamp_control(&self, u: &Vector) -> Vector {
        Vector::from_iterator(
            u.len(),
            u.iter()
                .zip(self.control_bounds())
                .map(|(v, b)| b.clamp(*v)),
        )
    }

    fn random_control(&self, rng: &mut RngStream) -> Vector {
        let b = self.control_bounds();
        Vector::from_iterator(b.len(), b.iter().map(|b| rng.uniform(b.lo, b.hi)))
    }
}

/// Registry of the built-in experiment systems.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SystemId {
    DoubleIntegrator,
    DampedPendulum,
    PeLqr,
    PeMpc,
}

impl SystemId {
    pub const ALL: [SystemId; 4] = [
        SystemId::DoubleIntegrator,
        SystemId::DampedPendulum,
        SystemId::PeLqr,
        SystemId::PeMpc,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemId::DoubleIntegrator => "double_integrator",
            SystemId::DampedPendulum => "damped_pendulum",
            SystemId::PeLqr => "pe_lqr",
            SystemId::PeMpc => "pe_mpc",
        }
    }

    /// The system with its default settings and `dt = 0.1`.
    pub fn build_default(self) -> Result<Box<dyn SystemModel>> {
        let dt = 0.1;
        Ok(match self {
            SystemId::DoubleIntegrator => Box::new(DoubleIntegrator::new(dt)?),
            SystemId::DampedPendulum => Box::new(DampedPendulum::new(dt)?),
            SystemId::PeLqr => Box::new(PursuitEvasionLqr::new(dt)?),
            SystemId::PeMpc => Box::new(PursuitEvasionMpc::new(dt)?),
        })
    }

    pub fn description(self) -> &'static str {
        match self {
            SystemId::DoubleIntegrator => {
                "planar double integrator with unknown A (4x4) and B (4x2)"
            }
            SystemId::DampedPendulum => {
                "torque-driven damped pendulum with unknown damping and inertia"
            }
            SystemId::PeLqr => "pursuit-evasion, pursuer tracks with an LQR policy of unknown cost",
            SystemId::PeMpc => {
                "pursuit-evasion, unicycle pursuer runs MPC with unknown tracking weight"
            }
        }
    }
}

impl fmt::Display for SystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemId::ALL
            .into_iter()
            .find(|id| id.as_str() == s)
            .ok_or_else(|| Error::config(format!("unknown system `{s}`")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn registry_round_trips_names() {
        for id in SystemId::ALL {
            assert_eq!(id.as_str().parse::<SystemId>().unwrap(), id);
        }
        assert!("segway".parse::<SystemId>().is_err());
    }

    #[test]
    fn control_bounds_clamp() {
        let b = ControlBounds::symmetric(2.0);
        assert_eq!(b.clamp(3.0), 2.0);
        assert_eq!(b.clamp(-5.0), -2.0);
        assert_eq!(b.clamp(0.5), 0.5);
        assert_eq!(b.width(), 4.0);
    }
}
