//! Spectral norms, exponentials of PSD matrices, product integrals over
//! time-indexed kernel families, and numeric checks of the operator
//! inequalities that control the NTK gap.
//!
//! All norms on matrices are spectral norms (largest singular value).

mod checks;
mod path;
mod product;
pub mod suites;

pub use checks::{
    check_contraction, check_exp_approximates_prodint, check_exp_diff, check_exp_times_matrix, check_interpolation_derivative,
    check_prodint_difference, check_telescope, lifted_telescope_lhs, simplified_gap, symmetric_lift, CheckResult, SimplifiedGap,
    TelescopeCheck, INEQUALITY_SLACK,
};
pub use path::{total_variation, total_variation_on, Interpolation, KernelPath};
pub use product::{
    product_integral, product_integral_sampled, product_integral_with, riemann_product, ProductIntegralOptions,
    ProductIntegralResult, DEFAULT_MAX_FACTORS, DEFAULT_PRODUCT_TOL,
};

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum OperatorError {
    #[error("matrix has non-finite entries")]
    NonFinite,
    #[error("expected a square matrix, got {rows}x{cols}")]
    NotSquare { rows: usize, cols: usize },
    #[error("matrix is not symmetric (max asymmetry {asymmetry:e})")]
    NotSymmetric { asymmetry: f64 },
    #[error("matrix is not positive semidefinite (min eigenvalue {min_eigenvalue:e})")]
    NotPsd { min_eigenvalue: f64 },
    #[error("shape mismatch: {0}")]
    ShapeMismatch(String),
    #[error("invalid argument: {0}")]
    InvalidArgument(String),
    #[error("product integral did not converge after {factors} factors (last change {last_change:e})")]
    RefinementExhausted {
        factors: usize,
        last_change: f64,
        best: Box<DMatrix<f64>>,
    },
}

/// Above this minimum dimension the norm comes from the smaller Gram matrix
/// instead of a full SVD.
const SVD_MAX_DIM: usize = 512;

/// Largest singular value. Callers guarantee finite entries.
pub fn spectral_norm(m: &DMatrix<f64>) -> f64 {
    if m.is_empty() {
        return 0.0;
    }
    if m.nrows().min(m.ncols()) <= SVD_MAX_DIM {
        m.clone().svd(false, false).singular_values.max()
    } else {
        let gram = if m.nrows() <= m.ncols() { m * m.transpose() } else { m.transpose() * m };
        SymmetricEigen::new(gram).eigenvalues.max().max(0.0).sqrt()
    }
}

pub fn operator_norm(m: &DMatrix<f64>) -> Result<f64, OperatorError> {
    if m.iter().any(|v| !v.is_finite()) {
        return Err(OperatorError::NonFinite);
    }
    Ok(spectral_norm(m))
}

/// Eigendecomposition of a symmetric PSD matrix with eigenvalues clamped at zero.
#[derive(Debug, Clone)]
pub struct PsdSpectrum {
    pub eigenvalues: Vec<f64>,
    pub eigenvectors: DMatrix<f64>,
}

impl PsdSpectrum {
    /// Spectrum of `X X^T`; PSD by construction, so roundoff negatives are clamped.
    pub fn of_gram(x: &DMatrix<f64>) -> Self {
        Self::from_symmetric(x * x.transpose())
    }

    pub(crate) fn from_symmetric(mut s: DMatrix<f64>) -> Self {
        let st = s.transpose();
        s += st;
        s *= 0.5;
        let eig = SymmetricEigen::new(s);
        Self {
            eigenvalues: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
            eigenvectors: eig.eigenvectors,
        }
    }

    /// `V diag(f(lambda_i)) V^T`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.eigenvectors.clone();
        for (j, &lam) in self.eigenvalues.iter().enumerate() {
            let fj = f(lam);
            scaled.column_mut(j).scale_mut(fj);
        }
        scaled * self.eigenvectors.transpose()
    }

    pub fn exp_neg(&self, t: f64) -> DMatrix<f64> {
        self.map(|lam| (-lam * t).exp())
    }
}

/// `e^{-S t}` for symmetric PSD `S` and `t >= 0`.
pub fn psd_exp(s: &DMatrix<f64>, t: f64) -> Result<DMatrix<f64>, OperatorError> {
    if !s.is_square() {
        return Err(OperatorError::NotSquare { rows: s.nrows(), cols: s.ncols() });
    }
    if s.iter().any(|v| !v.is_finite()) || !t.is_finite() {
        return Err(OperatorError::NonFinite);
    }
    if t < 0.0 {
        return Err(OperatorError::InvalidArgument(format!("time must be nonnegative, got {t}")));
    }
    let scale = s.amax().max(1.0);
    let asymmetry = (s - s.transpose()).amax();
    if asymmetry > 1e-12 * scale {
        return Err(OperatorError::NotSymmetric { asymmetry });
    }
    let mut sym = s + s.transpose();
    sym *= 0.5;
    let eig = SymmetricEigen::new(sym);
    let min_eigenvalue = eig.eigenvalues.min();
    if min_eigenvalue < -1e-10 * scale {
        return Err(OperatorError::NotPsd { min_eigenvalue });
    }
    let spectrum = PsdSpectrum {
        eigenvalues: eig.eigenvalues.iter().map(|v| v.max(0.0)).collect(),
        eigenvectors: eig.eigenvectors,
    };
    Ok(spectrum.exp_neg(t))
}

/// `e^{-X X^T t}`.
pub fn gram_exp(x: &DMatrix<f64>, t: f64) -> DMatrix<f64> {
    PsdSpectrum::of_gram(x).exp_neg(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn norm_examples() {
        assert_relative_eq!(operator_norm(&DMatrix::from_diagonal(&nalgebra::dvector![3.0, 4.0])).unwrap(), 4.0, epsilon = 1e-14);
        assert_relative_eq!(operator_norm(&DMatrix::from_row_slice(2, 2, &[0.0, 1.0, 0.0, 0.0])).unwrap(), 1.0, epsilon = 1e-14);
        assert_eq!(operator_norm(&DMatrix::from_element(2, 2, f64::NAN)), Err(OperatorError::NonFinite));
    }

    #[test]
    fn norm_agrees_with_gram_eigenvalue() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..20 {
            let m = DMatrix::from_fn(8, 5, |_, _| rng.random_range(-1.0..1.0));
            let top = SymmetricEigen::new(m.transpose() * &m).eigenvalues.max();
            assert_relative_eq!(operator_norm(&m).unwrap().powi(2), top, max_relative = 1e-12);
            assert_relative_eq!(spectral_norm(&m), spectral_norm(&m.transpose()), max_relative = 1e-12);
        }
    }

    #[test]
    fn psd_exp_examples() {
        assert_relative_eq!(psd_exp(&DMatrix::zeros(3, 3), 2.0).unwrap(), DMatrix::identity(3, 3));
        assert_relative_eq!(psd_exp(&DMatrix::from_element(1, 1, 2.0), 0.5).unwrap()[(0, 0)], (-1f64).exp(), max_relative = 1e-14);
    }

    #[test]
    fn psd_exp_semigroup_and_contraction() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = DMatrix::from_fn(5, 3, |_, _| rng.random_range(-1.0..1.0));
            let s = &x * x.transpose();
            let (t1, t2) = (rng.random_range(0.0..2.0), rng.random_range(0.0..2.0));
            let lhs = psd_exp(&s, t1 + t2).unwrap();
            let rhs = psd_exp(&s, t1).unwrap() * psd_exp(&s, t2).unwrap();
            assert!((lhs.clone() - rhs).amax() < 1e-12);
            assert!(spectral_norm(&lhs) <= 1.0 + 1e-12);
            assert!((lhs.clone() - lhs.transpose()).amax() < 1e-14);
        }
    }

    #[test]
    fn psd_exp_rejects_bad_input() {
        let neg = DMatrix::from_diagonal(&nalgebra::dvector![1.0, -0.5]);
        assert!(matches!(psd_exp(&neg, 1.0), Err(OperatorError::NotPsd { .. })));
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(psd_exp(&asym, 1.0), Err(OperatorError::NotSymmetric { .. })));
        assert!(matches!(psd_exp(&DMatrix::zeros(2, 3), 1.0), Err(OperatorError::NotSquare { .. })));
        assert!(psd_exp(&DMatrix::identity(2, 2), -1.0).is_err());
        let nearly = DMatrix::from_row_slice(2, 2, &[1.0, 0.5 + 1e-14, 0.5, 1.0]);
        assert!(psd_exp(&nearly, 1.0).is_ok());
    }
}
