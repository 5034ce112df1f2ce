//! Dense 64-bit vectors and matrices, PSD covariances, and the factorizations
//! every other module leans on.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};
use crate::rng::RngStream;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

const SYMMETRY_TOL: f64 = 1e-10;
const EIGEN_TOL: f64 = 1e-10;
const LOGDET_JITTER: f64 = 1e-12;

/// A symmetric positive semidefinite matrix.
///
/// Construction tolerates asymmetry and negative eigenvalues up to `1e-10`
/// and clamps the latter to zero.
#[derive(Clone, Debug, PartialEq)]
pub struct Psd(Matrix);

impl Psd {
    pub fn new(m: Matrix) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::InvalidCovariance(format!(
                "{}x{} matrix is not square",
                m.nrows(),
                m.ncols()
            )));
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidCovariance("non-finite entry".into()));
        }
        let asym = (&m - m.transpose()).amax();
        if asym > SYMMETRY_TOL {
            return Err(Error::InvalidCovariance(format!(
                "asymmetry {asym:e} exceeds tolerance"
            )));
        }
        let sym = symmetric_part(&m);
        if is_positive_definite(&sym) {
            return Ok(Psd(sym));
        }
        let eig = SymmetricEigen::new(sym.clone());
        let min = eig.eigenvalues.min();
        if min < -EIGEN_TOL {
            return Err(Error::InvalidCovariance(format!(
                "smallest eigenvalue {min:e} is negative"
            )));
        }
        if min < 0.0 {
            Ok(Psd(reconstruct_clamped(eig)))
        } else {
            Ok(Psd(sym))
        }
    }

    pub fn zeros(n: usize) -> Self {
        Psd(Matrix::zeros(n, n))
    }

    pub fn identity(n: usize) -> Self {
        Psd(Matrix::identity(n, n))
    }

    pub fn scaled_identity(n: usize, scale: f64) -> Result<Self> {
        Self::from_diagonal(&vec![scale; n])
    }

    pub fn from_diagonal(diag: &[f64]) -> Result<Self> {
        if let Some(bad) = diag.iter().find(|d| !d.is_finite() || **d < 0.0) {
            return Err(Error::InvalidCovariance(format!(
                "diagonal entry {bad} is not a finite non-negative variance"
            )));
        }
        Ok(Psd(Matrix::from_diagonal(&Vector::from_column_slice(diag))))
    }

    pub fn side(&self) -> usize {
        self.0.nrows()
    }

    pub fn as_matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn trace(&self) -> f64 {
        self.0.trace()
    }

    pub fn min_eigenvalue(&self) -> f64 {
        SymmetricEigen::new(self.0.clone()).eigenvalues.min()
    }

    pub fn is_zero(&self) -> bool {
        self.0.iter().all(|v| *v == 0.0)
    }

    /// `self + scale * I`.
    pub fn add_identity(&self, scale: f64) -> Psd {
        let n = self.side();
        Psd(&self.0 + Matrix::identity(n, n) * scale)
    }

    /// Lower-triangular factor `L` with `L Lᵀ = self`; falls back to the
    /// symmetric square root when the matrix is only semidefinite.
    pub fn factor(&self) -> Matrix {
        match Cholesky::new(self.0.clone()) {
            Some(ch) => ch.unpack(),
            None => {
                let eig = SymmetricEigen::new(self.0.clone());
                let sqrt = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
                &eig.eigenvectors * Matrix::from_diagonal(&sqrt)
            }
        }
    }

    /// Solve `self · X = rhs` through a Cholesky factorization.
    pub fn solve(&self, rhs: &Matrix) -> Result<Matrix> {
        let ch = Cholesky::new(self.0.clone()).ok_or(Error::SingularMatrix("psd solve"))?;
        Ok(ch.solve(rhs))
    }

    pub fn inverse(&self) -> Result<Matrix> {
        Cholesky::new(self.0.clone())
            .map(|ch| ch.inverse())
            .ok_or(Error::SingularMatrix("psd inverse"))
    }
}

fn symmetric_part(m: &Matrix) -> Matrix {
    (m + m.transpose()) * 0.5
}

fn is_positive_definite(m: &Matrix) -> bool {
    match Cholesky::new(m.clone()) {
        Some(ch) => ch
            .l_dirty()
            .diagonal()
            .iter()
            .all(|d| *d > 0.0 && d.is_finite()),
        None => false,
    }
}

fn reconstruct_clamped(eig: SymmetricEigen<f64, Dyn>) -> Matrix {
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let v = &eig.eigenvectors;
    symmetric_part(&(v * Matrix::from_diagonal(&clamped) * v.transpose()))
}

/// `(m + mᵀ)/2` with negative eigenvalues clamped to zero.
///
/// A symmetric positive definite input comes back bit-for-bit unchanged.
pub fn symmetrize(m: &Matrix) -> Psd {
    assert!(m.is_square(), "symmetrize needs a square matrix");
    let sym = symmetric_part(m);
    if is_positive_definite(&sym) {
        return Psd(sym);
    }
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.min() >= 0.0 {
        Psd(sym)
    } else {
        Psd(reconstruct_clamped(eig))
    }
}

/// `ln det(m)` via Cholesky, with a single `1e-12·I` jitter retry.
pub fn logdet_psd(m: &Psd) -> Result<f64> {
    let chol_logdet = |a: Matrix| -> Option<f64> {
        let ch = Cholesky::new(a)?;
        let diag = ch.l_dirty().diagonal();
        if diag.iter().any(|d| !(*d > 0.0) || !d.is_finite()) {
            return None;
        }
        Some(2.0 * diag.iter().map(|d| d.ln()).sum::<f64>())
    };
    chol_logdet(m.0.clone())
        .or_else(|| {
            let n = m.side();
            chol_logdet(&m.0 + Matrix::identity(n, n) * LOGDET_JITTER)
        })
        .ok_or(Error::SingularMatrix("logdet_psd"))
}

/// Precomputed Gaussian sampler `mean + L·z`.
#[derive(Clone, Debug)]
pub struct MvnSampler {
    mean: Vector,
    factor: Matrix,
}

impl MvnSampler {
    pub fn new(mean: &Vector, cov: &Psd) -> Result<Self> {
        check_dim("mvn_sample", cov.side(), mean.len())?;
        Ok(Self {
            mean: mean.clone(),
            factor: cov.factor(),
        })
    }

    pub fn sample(&self, rng: &mut RngStream) -> Vector {
        let z = rng.standard_normal_vec(self.mean.len());
        &self.mean + &self.factor * z
    }
}

pub fn mvn_sample(mean: &Vector, cov: &Psd, rng: &mut RngStream) -> Result<Vector> {
    Ok(MvnSampler::new(mean, cov)?.sample(rng))
}

/// Log density of `N(mean, cov)` at `x`, given the Cholesky factor of `cov`
/// and its log-determinant.
pub fn gaussian_log_density(
    x: &Vector,
    mean: &Vector,
    chol: &Cholesky<f64, Dyn>,
    logdet: f64,
) -> f64 {
    let d = x - mean;
    let w = chol
        .l_dirty()
        .solve_lower_triangular(&d)
        .expect("cholesky factor has a positive diagonal");
    let n = x.len() as f64;
    -0.5 * (w.norm_squared() + logdet + n * (2.0 * std::f64::consts::PI).ln())
}

pub fn check_dim(context: &'static str, expected: usize, actual: usize) -> Result<()> {
    if expected == actual {
        Ok(())
    } else {
        Err(Error::dims(context, expected, actual))
    }
}

pub fn all_finite(v: &Vector) -> bool {
    v.iter().all(|x| x.is_finite())
}

/// Block-diagonal concatenation.
pub fn block_diag(a: &Matrix, b: &Matrix) -> Matrix {
    let (ra, ca) = a.shape();
    let (rb, cb) = b.shape();
    let mut out = Matrix::zeros(ra + rb, ca + cb);
    out.view_mut((0, 0), (ra, ca)).copy_from(a);
    out.view_mut((ra, ca), (rb, cb)).copy_from(b);
    out
}
