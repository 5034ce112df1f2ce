use crate::error::{Error, Result};
use crate::linalg::{check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

use super::{ControlBounds, NoiseModel, SystemModel};

const NX: usize = 4;
const NU: usize = 2;

/// Exact zero-order-hold planar double integrator, state `[px, py, vx, vy]`,
/// control `[ax, ay]`.
pub fn double_integrator_matrices(dt: f64) -> (Matrix, Matrix) {
    let mut a = Matrix::identity(NX, NX);
    a[(0, 2)] = dt;
    a[(1, 3)] = dt;
    let mut b = Matrix::zeros(NX, NU);
    b[(0, 0)] = 0.5 * dt * dt;
    b[(1, 1)] = 0.5 * dt * dt;
    b[(2, 0)] = dt;
    b[(3, 1)] = dt;
    (a, b)
}

/// Linear system `x' = A x + B u` with every entry of `A` and `B` unknown.
///
/// θ layout: `vec(A) ‖ vec(B)`, both column-major, 16 + 8 = 24 entries.
#[derive(Clone, Debug)]
pub struct DoubleIntegrator {
    dt: f64,
    theta_true: Vector,
    x0: Vector,
    noise: NoiseModel,
    bounds: Vec<ControlBounds>,
}

impl DoubleIntegrator {
    pub const N_THETA: usize = NX * NX + NX * NU;

    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        let (a, b) = double_integrator_matrices(dt);
        Ok(Self {
            dt,
            theta_true: Self::pack(&a, &b),
            x0: Vector::zeros(NX),
            noise: NoiseModel::isotropic(NX, 1e-4, Self::N_THETA)?,
            bounds: vec![ControlBounds::symmetric(2.0); NU],
        })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn pack(a: &Matrix, b: &Matrix) -> Vector {
        Vector::from_iterator(Self::N_THETA, a.iter().chain(b.iter()).copied())
    }

    pub fn unpack(theta: &Vector) -> (Matrix, Matrix) {
        let a = Matrix::from_column_slice(NX, NX, &theta.as_slice()[..NX * NX]);
        let b = Matrix::from_column_slice(NX, NU, &theta.as_slice()[NX * NX..]);
        (a, b)
    }

    pub fn with_theta(mut self, theta: Vector) -> Result<Self> {
        check_dim("double_integrator theta", Self::N_THETA, theta.len())?;
        self.theta_true = theta;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vector) -> Result<Self> {
        check_dim("double_integrator x0", NX, x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        check_dim("double_integrator state noise", NX, noise.state.side())?;
        check_dim(
            "double_integrator param noise",
            Self::N_THETA,
            noise.param.side(),
        )?;
        self.noise = noise;
        Ok(self)
    }

    pub fn with_control_limit(mut self, limit: f64) -> Self {
        self.bounds = vec![ControlBounds::symmetric(limit); NU];
        self
    }
}

impl SystemModel for DoubleIntegrator {
    fn name(&self) -> &'static str {
        "double_integrator"
    }
    fn n_x(&self) -> usize {
        NX
    }
    fn n_u(&self) -> usize {
        NU
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
        let a = (0..NX).flat_map(|c| (0..NX).map(move |r| format!("A[{r},{c}]")));
        let b = (0..NU).flat_map(|c| (0..NX).map(move |r| format!("B[{r},{c}]")));
        a.chain(b).collect()
    }

    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }

    fn initial_state(&self) -> &Vector {
        &self.x0
    }

    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        Vector::from_vec(vec![
            rng.uniform(-2.0, 2.0),
            rng.uniform(-2.0, 2.0),
            rng.uniform(-1.0, 1.0),
            rng.uniform(-1.0, 1.0),
        ])
    }

    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        let th = theta.as_slice();
        let mut out = Vector::zeros(NX);
        for i in 0..NX {
            let mut acc = 0.0;
            for j in 0..NX {
                acc += th[j * NX + i] * x[j];
            }
            for k in 0..NU {
                acc += th[NX * NX + k * NX + i] * u[k];
            }
            out[i] = acc;
        }
        Ok(out)
    }

    /// `[xᵀ ⊗ I₄, uᵀ ⊗ I₄]`; independent of θ.
    fn dynamics_jacobian_theta(&self, x: &Vector, u: &Vector, _theta: &Vector) -> Result<Matrix> {
        let mut jac = Matrix::zeros(NX, Self::N_THETA);
        for i in 0..NX {
            for j in 0..NX {
                jac[(i, j * NX + i)] = x[j];
            }
            for k in 0..NU {
                jac[(i, NX * NX + k * NX + i)] = u[k];
            }
        }
        Ok(jac)
    }
}
