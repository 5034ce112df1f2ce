use nalgebra::{Matrix2, Vector2};

use crate::error::{Error, Result};
use crate::linalg::{check_dim, Matrix, Psd, Vector};
use crate::rng::RngStream;

use super::double_integrator::double_integrator_matrices;
use super::{ControlBounds, NoiseModel, SystemModel};

const AGENT: usize = 4;
const CTRL: usize = 2;
const Q_ENTRIES: usize = AGENT * (AGENT + 1) / 2;
const R_ENTRIES: usize = CTRL * (CTRL + 1) / 2;
const R_REGULARIZATION: f64 = 1e-8;
const MAX_GAIN_CONDITION: f64 = 1e12;

/// Lower-triangular entries of `l`, column by column.
pub fn cholesky_entries(l: &Matrix) -> Vec<f64> {
    let n = l.nrows();
    (0..n)
        .flat_map(|c| (c..n).map(move |r| (r, c)))
        .map(|(r, c)| l[(r, c)])
        .collect()
}

fn lower_from_entries(entries: &[f64], n: usize) -> Matrix {
    let mut l = Matrix::zeros(n, n);
    let mut it = entries.iter();
    for c in 0..n {
        for r in c..n {
            l[(r, c)] = *it.next().expect("entry count matches triangle size");
        }
    }
    l
}

fn tri_index_pairs(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|c| (c..n).map(move |r| (r, c))).collect()
}

/// Two double-integrator agents; the pursuer (agent 2) plays the one-step
/// LQR policy `π² = −(R + BᵀQB)⁻¹ BᵀQ (A x² − x¹)`.
///
/// θ holds Cholesky factors: the 10 lower-triangular entries of `L_Q`
/// followed by the 3 of `L_R`, column-major, with `Q = L_Q L_Qᵀ` and
/// `R = L_R L_Rᵀ + 1e-8·I`. State is `[x¹; x²]`, control is the evader's
/// acceleration.
#[derive(Clone, Debug)]
pub struct PursuitEvasionLqr {
    a: Matrix,
    b: Matrix,
    theta_true: Vector,
    x0: Vector,
    noise: NoiseModel,
    bounds: Vec<ControlBounds>,
}

impl PursuitEvasionLqr {
    pub const N_THETA: usize = Q_ENTRIES + R_ENTRIES;

    pub fn new(dt: f64) -> Result<Self> {
        if !(dt > 0.0 && dt.is_finite()) {
            return Err(Error::config(format!("dt must be positive, got {dt}")));
        }
        let (a, b) = double_integrator_matrices(dt);
        let q = Matrix::from_diagonal(&Vector::from_vec(vec![5.0, 5.0, 1.0, 1.0]));
        let r = Matrix::identity(CTRL, CTRL);
        Ok(Self {
            a,
            b,
            theta_true: Self::theta_from_costs(&q, &r)?,
            x0: Vector::from_vec(vec![0.0, 0.0, 0.0, 0.0, -2.0, -2.0, 0.0, 0.0]),
            noise: NoiseModel::isotropic(2 * AGENT, 1e-4, Self::N_THETA)?,
            bounds: vec![ControlBounds::symmetric(2.0); CTRL],
        })
    }

    /// Replace the (known) per-agent dynamics.
    pub fn with_agent_matrices(mut self, a: Matrix, b: Matrix) -> Result<Self> {
        if a.shape() != (AGENT, AGENT) || b.shape() != (AGENT, CTRL) {
            return Err(Error::config("agent matrices must be 4x4 and 4x2"));
        }
        self.a = a;
        self.b = b;
        Ok(self)
    }

    pub fn with_theta(mut self, theta: Vector) -> Result<Self> {
        check_dim("pe_lqr theta", Self::N_THETA, theta.len())?;
        self.theta_true = theta;
        Ok(self)
    }

    pub fn with_initial_state(mut self, x0: Vector) -> Result<Self> {
        check_dim("pe_lqr x0", 2 * AGENT, x0.len())?;
        self.x0 = x0;
        Ok(self)
    }

    pub fn with_noise(mut self, noise: NoiseModel) -> Result<Self> {
        check_dim("pe_lqr state noise", 2 * AGENT, noise.state.side())?;
        check_dim("pe_lqr param noise", Self::N_THETA, noise.param.side())?;
        self.noise = noise;
        Ok(self)
    }

    pub fn with_control_limit(mut self, limit: f64) -> Self {
        self.bounds = vec![ControlBounds::symmetric(limit); CTRL];
        self
    }

    /// θ for given positive definite cost matrices.
    pub fn theta_from_costs(q: &Matrix, r: &Matrix) -> Result<Vector> {
        let lq = q
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("Q must be positive definite"))?
            .unpack();
        let lr = r
            .clone()
            .cholesky()
            .ok_or_else(|| Error::config("R must be positive definite"))?
            .unpack();
        let mut entries = cholesky_entries(&lq);
        entries.extend(cholesky_entries(&lr));
        Ok(Vector::from_vec(entries))
    }

    /// Reconstruct `(L_Q, L_R, Q, R)` from θ.
    pub fn costs(theta: &Vector) -> (Matrix, Matrix, Matrix, Matrix) {
        let lq = lower_from_entries(&theta.as_slice()[..Q_ENTRIES], AGENT);
        let lr = lower_from_entries(&theta.as_slice()[Q_ENTRIES..], CTRL);
        let q = &lq * lq.transpose();
        let r = &lr * lr.transpose() + Matrix::identity(CTRL, CTRL) * R_REGULARIZATION;
        (lq, lr, q, r)
    }

    /// `M⁻¹` for `M = R + BᵀQB`, rejecting ill-conditioned `M`.
    fn gain_inverse(&self, q: &Matrix, r: &Matrix) -> Result<Matrix2<f64>> {
        let m = r + self.b.transpose() * q * &self.b;
        let (a, b, d) = (m[(0, 0)], 0.5 * (m[(0, 1)] + m[(1, 0)]), m[(1, 1)]);
        let half_gap = (0.25 * (a - d).powi(2) + b * b).sqrt();
        let (lo, hi) = (0.5 * (a + d) - half_gap, 0.5 * (a + d) + half_gap);
        let condition = if lo > 0.0 { hi / lo } else { f64::INFINITY };
        if !(condition < MAX_GAIN_CONDITION) {
            return Err(Error::SingularGain { condition });
        }
        let det = a * d - b * b;
        Ok(Matrix2::new(d, -b, -b, a) / det)
    }

    fn bt_times(&self, v: &[f64]) -> Vector2<f64> {
        let b = &self.b;
        Vector2::new(
            (0..AGENT).map(|i| b[(i, 0)] * v[i]).sum(),
            (0..AGENT).map(|i| b[(i, 1)] * v[i]).sum(),
        )
    }

    fn policy_parts(&self, x1: &Vector, x2: &Vector, theta: &Vector) -> Result<PolicyParts> {
        let (lq, lr, q, r) = Self::costs(theta);
        let m_inv = self.gain_inverse(&q, &r)?;
        let err = &self.a * x2 - x1;
        let qe = &q * &err;
        let pi = -(m_inv * self.bt_times(qe.as_slice()));
        Ok(PolicyParts {
            lq,
            lr,
            m_inv,
            err,
            pi,
        })
    }

    /// The pursuer's control for evader state `x1` and pursuer state `x2`.
    pub fn pursuer_policy(&self, x1: &Vector, x2: &Vector, theta: &Vector) -> Result<Vector> {
        check_dim("lqr_pursuer_policy: evader", AGENT, x1.len())?;
        check_dim("lqr_pursuer_policy: pursuer", AGENT, x2.len())?;
        check_dim("lqr_pursuer_policy: theta", Self::N_THETA, theta.len())?;
        let pi = self.policy_parts(x1, x2, theta)?.pi;
        Ok(Vector::from_column_slice(pi.as_slice()))
    }

    fn split(x: &Vector) -> (Vector, Vector) {
        (
            x.rows(0, AGENT).into_owned(),
            x.rows(AGENT, AGENT).into_owned(),
        )
    }
}

impl SystemModel for PursuitEvasionLqr {
    fn name(&self) -> &'static str {
        "pe_lqr"
    }
    fn n_x(&self) -> usize {
        2 * AGENT
    }
    fn n_u(&self) -> usize {
        CTRL
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
        let q = tri_index_pairs(AGENT)
            .into_iter()
            .map(|(r, c)| format!("L_Q[{r},{c}]"));
        let r = tri_index_pairs(CTRL)
            .into_iter()
            .map(|(r, c)| format!("L_R[{r},{c}]"));
        q.chain(r).collect()
    }

    fn true_theta(&self) -> &Vector {
        &self.theta_true
    }
    fn initial_state(&self) -> &Vector {
        &self.x0
    }

    fn sample_state(&self, rng: &mut RngStream) -> Vector {
        let mut x = Vector::zeros(2 * AGENT);
        for agent in 0..2 {
            let o = agent * AGENT;
            x[o] = rng.uniform(-3.0, 3.0);
            x[o + 1] = rng.uniform(-3.0, 3.0);
            x[o + 2] = rng.uniform(-1.0, 1.0);
            x[o + 3] = rng.uniform(-1.0, 1.0);
        }
        x
    }

    fn dynamics(&self, x: &Vector, u: &Vector, theta: &Vector) -> Result<Vector> {
        let (x1, x2) = Self::split(x);
        let pursuer_u = self.pursuer_policy(&x1, &x2, theta)?;
        let mut next = Vector::zeros(2 * AGENT);
        next.rows_mut(0, AGENT)
            .copy_from(&(&self.a * &x1 + &self.b * u));
        next.rows_mut(AGENT, AGENT)
            .copy_from(&(&self.a * &x2 + &self.b * pursuer_u));
        Ok(next)
    }

    fn dynamics_jacobian_theta(&self, x: &Vector, _u: &Vector, theta: &Vector) -> Result<Matrix> {
        let (x1, x2) = Self::split(x);
        let PolicyParts {
            lq,
            lr,
            m_inv,
            err,
            pi,
        } = self.policy_parts(&x1, &x2, theta)?;
        let b_row = |j: usize| Vector2::new(self.b[(j, 0)], self.b[(j, 1)]);
        // c_k = Bᵀ l_k for the columns of L_Q
        let c: Vec<Vector2<f64>> = (0..AGENT)
            .map(|k| self.bt_times(lq.column(k).as_slice()))
            .collect();

        // dπ = −M⁻¹ (dM π + Bᵀ dQ e), dM = dR + Bᵀ dQ B, and for
        // dQ = e_j l_kᵀ + l_k e_jᵀ both terms reduce to 2-vectors.
        let mut jac = Matrix::zeros(2 * AGENT, Self::N_THETA);
        let mut put = |col: usize, rhs: Vector2<f64>| {
            let dpi = -(m_inv * rhs);
            for row in 0..AGENT {
                jac[(AGENT + row, col)] = self.b[(row, 0)] * dpi[0] + self.b[(row, 1)] * dpi[1];
            }
        };
        let mut col = 0;
        for (j, k) in tri_index_pairs(AGENT) {
            let bj = b_row(j);
            let lk_e = lq.column(k).dot(&err);
            put(
                col,
                bj * (c[k].dot(&pi) + lk_e) + c[k] * (bj.dot(&pi) + err[j]),
            );
            col += 1;
        }
        for (j, k) in tri_index_pairs(CTRL) {
            let rk = Vector2::new(lr[(0, k)], lr[(1, k)]);
            let mut rhs = rk * pi[j];
            rhs[j] += rk.dot(&pi);
            put(col, rhs);
            col += 1;
        }
        Ok(jac)
    }
}

struct PolicyParts {
    lq: Matrix,
    lr: Matrix,
    m_inv: Matrix2<f64>,
    err: Vector,
    pi: Vector2<f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::systems::{finite_difference_jacobian, FD_STEP};

    fn sys() -> PursuitEvasionLqr {
        PursuitEvasionLqr::new(0.1).unwrap()
    }

    #[test]
    fn true_costs_round_trip() {
        let s = sys();
        let (_, _, q, r) = PursuitEvasionLqr::costs(s.true_theta());
        let q_expect = Matrix::from_diagonal(&Vector::from_vec(vec![5.0, 5.0, 1.0, 1.0]));
        assert!((q - q_expect).amax() < 1e-12);
        assert!((r - Matrix::identity(2, 2)).amax() < 1e-7);
        assert_eq!(s.theta_layout().len(), 13);
    }

    #[test]
    fn zero_tracking_error_gives_zero_control() {
        let s = sys();
        let x2 = Vector::from_vec(vec![1.0, -1.0, 0.5, 0.2]);
        let x1 = &s.a * &x2;
        let pi = s.pursuer_policy(&x1, &x2, s.true_theta()).unwrap();
        assert!(pi.amax() < 1e-14);
    }

    #[test]
    fn zero_state_cost_gives_zero_control() {
        let s = sys();
        let mut theta = s.true_theta().clone();
        theta.rows_mut(0, Q_ENTRIES).fill(0.0);
        let pi = s
            .pursuer_policy(
                &Vector::from_vec(vec![3.0, 1.0, 0.0, 0.0]),
                &Vector::from_vec(vec![-1.0, 2.0, 1.0, 0.0]),
                &theta,
            )
            .unwrap();
        assert_eq!(pi.amax(), 0.0);
    }

    #[test]
    fn policy_matches_hand_linear_solve() {
        let dt = 0.1;
        let a = Matrix::identity(4, 4);
        let mut b = Matrix::zeros(4, 2);
        b[(2, 0)] = dt;
        b[(3, 1)] = dt;
        let s = sys().with_agent_matrices(a, b).unwrap();
        let theta =
            PursuitEvasionLqr::theta_from_costs(&Matrix::identity(4, 4), &Matrix::identity(2, 2))
                .unwrap();
        let x1 = Vector::from_vec(vec![1.0, 2.0, 0.3, -0.4]);
        let x2 = Vector::from_vec(vec![-1.0, 0.5, 0.1, 0.2]);
        // Q = I, R = I: M = (1 + dt²) I, BᵀQe = dt·e_vel
        let e = &x2 - &x1;
        let m = 1.0 + dt * dt + R_REGULARIZATION;
        let expect = Vector::from_vec(vec![-dt * e[2] / m, -dt * e[3] / m]);
        let pi = s.pursuer_policy(&x1, &x2, &theta).unwrap();
        assert!((pi - expect).amax() < 1e-10);
    }

    #[test]
    fn policy_is_translation_invariant() {
        let s = sys();
        let mut rng = RngStream::new(41);
        for _ in 0..20 {
            let x = s.sample_state(&mut rng);
            let (x1, x2) = PursuitEvasionLqr::split(&x);
            let (dx, dy) = (rng.uniform(-5.0, 5.0), rng.uniform(-5.0, 5.0));
            let shift = Vector::from_vec(vec![dx, dy, 0.0, 0.0]);
            let a = s.pursuer_policy(&x1, &x2, s.true_theta()).unwrap();
            let b = s
                .pursuer_policy(&(&x1 + &shift), &(&x2 + &shift), s.true_theta())
                .unwrap();
            assert!((a - b).amax() < 1e-12);
        }
    }

    #[test]
    fn degenerate_costs_report_singular_gain() {
        let s = sys();
        let theta = Vector::zeros(PursuitEvasionLqr::N_THETA);
        // R = 1e-8 I and Q = 0 is well conditioned, so break conditioning via Q
        let mut bad = theta.clone();
        bad[0] = 1e9;
        let err = s
            .pursuer_policy(&Vector::zeros(4), &Vector::zeros(4), &bad)
            .unwrap_err();
        assert!(matches!(err, Error::SingularGain { .. }));
    }

    #[test]
    fn analytic_jacobian_matches_finite_differences() {
        let s = sys();
        let mut rng = RngStream::new(42);
        for _ in 0..100 {
            let x = s.sample_state(&mut rng);
            let u = s.random_control(&mut rng);
            let theta = s.true_theta() + rng.standard_normal_vec(13) * 0.3;
            let jac = s.jac_f_theta(&x, &u, &theta).unwrap();
            let fd = finite_difference_jacobian(&s, &x, &u, &theta, FD_STEP).unwrap();
            assert!(
                (&jac - &fd).amax() < 1e-4,
                "max diff {}",
                (&jac - &fd).amax()
            );
        }
    }

    #[test]
    fn evader_part_is_double_integrator() {
        let s = sys();
        let x = Vector::from_vec(vec![0.0, 0.0, 1.0, 0.0, -2.0, -2.0, 0.0, 0.0]);
        let u = Vector::from_vec(vec![0.0, 1.0]);
        let next = s.step(&x, &u, s.true_theta()).unwrap();
        assert!((next[0] - 0.1).abs() < 1e-15);
        assert!((next[1] - 0.005).abs() < 1e-15);
        assert!((next[3] - 0.1).abs() < 1e-15);
    }
}
