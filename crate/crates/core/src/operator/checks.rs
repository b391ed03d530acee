use nalgebra::{DMatrix, DVector};

use super::{
    gram_exp, product_integral, product_integral_with, spectral_norm, total_variation, total_variation_on, KernelPath, OperatorError,
    ProductIntegralOptions, PsdSpectrum,
};

/// Absolute slack allowed on every proven inequality.
pub const INEQUALITY_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CheckResult {
    pub lhs: f64,
    pub rhs: f64,
    /// `rhs - lhs`; negative when the inequality is violated before slack.
    pub margin: f64,
    pub holds: bool,
}

impl CheckResult {
    pub fn with_slack(lhs: f64, rhs: f64, slack: f64) -> Self {
        Self {
            lhs,
            rhs,
            margin: rhs - lhs,
            holds: lhs <= rhs + slack,
        }
    }

    pub fn new(lhs: f64, rhs: f64) -> Self {
        Self::with_slack(lhs, rhs, INEQUALITY_SLACK)
    }
}

fn same_shape(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<(), OperatorError> {
    if a.shape() != b.shape() {
        return Err(OperatorError::ShapeMismatch(format!("{:?} vs {:?}", a.shape(), b.shape())));
    }
    Ok(())
}

fn nonnegative_time(t: f64) -> Result<(), OperatorError> {
    if !(t >= 0.0 && t.is_finite()) {
        return Err(OperatorError::InvalidArgument(format!("time must be finite and nonnegative, got {t}")));
    }
    Ok(())
}

/// `|e^{-(A+B)^T (A+B) t} - e^{-A^T A t}| <= 2 |B| sqrt(t)`.
pub fn check_exp_diff(a: &DMatrix<f64>, b: &DMatrix<f64>, t: f64) -> Result<CheckResult, OperatorError> {
    same_shape(a, b)?;
    nonnegative_time(t)?;
    let sum_t = (a + b).transpose();
    let lhs = spectral_norm(&(gram_exp(&sum_t, t) - gram_exp(&a.transpose(), t)));
    Ok(CheckResult::new(lhs, 2.0 * spectral_norm(b) * t.sqrt()))
}

/// `|e^{-X X^T t} X| <= 1 / (2 sqrt(t))`; vacuous at `t = 0`.
pub fn check_exp_times_matrix(x: &DMatrix<f64>, t: f64) -> Result<CheckResult, OperatorError> {
    nonnegative_time(t)?;
    let lhs = spectral_norm(&(gram_exp(x, t) * x));
    let rhs = if t == 0.0 { f64::INFINITY } else { 0.5 / t.sqrt() };
    Ok(CheckResult::new(lhs, rhs))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TelescopeCheck {
    pub check: CheckResult,
    /// Both inputs were square and symmetric, so `(X+Y)(X+Y)^T = (X+Y)^2`.
    pub symmetric_case: bool,
}

fn is_symmetric(m: &DMatrix<f64>) -> bool {
    m.is_square() && (m - m.transpose()).amax() <= 1e-14 * m.amax().max(1.0)
}

fn telescope_lhs(x: &DMatrix<f64>, y: &DMatrix<f64>, t: f64) -> f64 {
    let s = x + y;
    spectral_norm(&(gram_exp(&s, t) * &s - gram_exp(x, t) * x))
}

/// `|e^{-(X+Y)(X+Y)^T t}(X+Y) - e^{-X X^T t} X| <= 3 |Y|`.
pub fn check_telescope(x: &DMatrix<f64>, y: &DMatrix<f64>, t: f64) -> Result<TelescopeCheck, OperatorError> {
    same_shape(x, y)?;
    nonnegative_time(t)?;
    let symmetric_case = is_symmetric(x) && is_symmetric(y);
    let lhs = if symmetric_case {
        let s = x + y;
        let sq = |m: &DMatrix<f64>| m * m;
        let es = PsdSpectrum::from_symmetric(sq(&s)).exp_neg(t);
        let ex = PsdSpectrum::from_symmetric(sq(x)).exp_neg(t);
        spectral_norm(&(es * &s - ex * x))
    } else {
        telescope_lhs(x, y, t)
    };
    Ok(TelescopeCheck {
        check: CheckResult::new(lhs, 3.0 * spectral_norm(y)),
        symmetric_case,
    })
}

/// `[[0, X^T], [X, 0]]` after zero-padding `X` to a square matrix.
pub fn symmetric_lift(x: &DMatrix<f64>) -> DMatrix<f64> {
    let k = x.nrows().max(x.ncols());
    let mut padded = DMatrix::zeros(k, k);
    padded.view_mut((0, 0), x.shape()).copy_from(x);
    let mut lift = DMatrix::zeros(2 * k, 2 * k);
    lift.view_mut((0, k), (k, k)).copy_from(&padded.transpose());
    lift.view_mut((k, 0), (k, k)).copy_from(&padded);
    lift
}

/// Telescope left-hand side evaluated on the symmetric lifts; it dominates the
/// direct value and shares its bound `3|Y|`.
pub fn lifted_telescope_lhs(x: &DMatrix<f64>, y: &DMatrix<f64>, t: f64) -> Result<f64, OperatorError> {
    same_shape(x, y)?;
    nonnegative_time(t)?;
    let (lx, ly) = (symmetric_lift(x), symmetric_lift(y));
    let s = &lx + &ly;
    let es = PsdSpectrum::from_symmetric(&s * &s).exp_neg(t);
    let ex = PsdSpectrum::from_symmetric(&lx * &lx).exp_neg(t);
    Ok(spectral_norm(&(es * &s - ex * &lx)))
}

/// `|e^{-X_b X_b^T (b-a)} X_b - P(b,a) X_a| <= 3 V({X_s}_{[a,b]})`.
pub fn check_exp_approximates_prodint(path: &KernelPath, a: f64, b: f64, tol: f64) -> Result<CheckResult, OperatorError> {
    let p = product_integral(path, a, b, tol)?;
    let xa = path.factor_at(a);
    let xb = path.factor_at(b);
    let lhs = spectral_norm(&(gram_exp(&xb, b - a) * &xb - p.value * xa));
    Ok(CheckResult::new(lhs, 3.0 * total_variation_on(path, a, b)))
}

/// `|P_A(T,0) - P_B(T,0)| <= sup|A_t - B_t| (2 sqrt(T) + 3 T V({A_t - B_t}))`.
pub fn check_prodint_difference(a_path: &KernelPath, b_path: &KernelPath, tol: f64) -> Result<CheckResult, OperatorError> {
    let diff = a_path.difference(b_path)?;
    let (x, y) = (a_path.start(), a_path.end());
    let pa = product_integral(a_path, x, y, tol)?;
    let pb = product_integral(b_path, x, y, tol)?;
    let horizon = y - x;
    let rhs = diff.sup_norm() * (2.0 * horizon.sqrt() + 3.0 * horizon * total_variation(&diff));
    Ok(CheckResult::new(spectral_norm(&(pa.value - pb.value)), rhs))
}

/// Central-difference estimate of `|dP(T,0;zeta)/dzeta|` for the kernels
/// `(A_t + zeta C_t)(A_t + zeta C_t)^T`, `C = B - A`, against
/// `sup|C_t| (2 sqrt(T) + 3 T V({C_t}))`.
///
/// Slack covers the finite-difference truncation `10 dzeta^2 max(rhs, 1)` and
/// the product-integral truncation amplified by `1 / (2 dzeta)`.
pub fn check_interpolation_derivative(
    a_path: &KernelPath,
    b_path: &KernelPath,
    zeta: f64,
    dzeta: f64,
    tol: f64,
) -> Result<CheckResult, OperatorError> {
    if !(0.0..=1.0).contains(&zeta) {
        return Err(OperatorError::InvalidArgument(format!("zeta must lie in [0, 1], got {zeta}")));
    }
    if !(dzeta > 0.0 && dzeta.is_finite()) {
        return Err(OperatorError::InvalidArgument(format!("dzeta must be positive, got {dzeta}")));
    }
    let c = b_path.difference(a_path)?;
    let (x, y) = (a_path.start(), a_path.end());
    let opts = ProductIntegralOptions { tol, ..Default::default() };
    let plus = product_integral_with(&a_path.interpolate_towards(b_path, zeta + dzeta)?, x, y, &opts)?;
    let minus = product_integral_with(&a_path.interpolate_towards(b_path, zeta - dzeta)?, x, y, &opts)?;
    let lhs = spectral_norm(&(&plus.value - &minus.value)) / (2.0 * dzeta);
    let horizon = y - x;
    let rhs = c.sup_norm() * (2.0 * horizon.sqrt() + 3.0 * horizon * total_variation(&c));
    let slack = INEQUALITY_SLACK + 10.0 * dzeta * dzeta * rhs.max(1.0) + (plus.error_estimate + minus.error_estimate) / (2.0 * dzeta);
    Ok(CheckResult::with_slack(lhs, rhs, slack))
}

/// `|P(y, x)| <= 1` for PSD kernel paths.
pub fn check_contraction(path: &KernelPath, x: f64, y: f64, tol: f64) -> Result<CheckResult, OperatorError> {
    let p = product_integral(path, x, y, tol)?;
    Ok(CheckResult::with_slack(spectral_norm(&p.value), 1.0, 1e-10))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimplifiedGap {
    pub gap: f64,
    pub bound: f64,
    pub holds: bool,
}

/// Gap between the frozen-final-kernel residual `e^{-K_T T} r0` and the
/// linearized residual `e^{-K_0 T} r0`, against `min(2|B| sqrt(T) |r0|, 2 |r0|)`
/// with `B = A_T^T - A_0^T`. `A_0`, `A_T` are Jacobians (`n x p`), `K = A A^T`.
pub fn simplified_gap(a0: &DMatrix<f64>, a_final: &DMatrix<f64>, r0: &DVector<f64>, horizon: f64) -> Result<SimplifiedGap, OperatorError> {
    same_shape(a0, a_final)?;
    nonnegative_time(horizon)?;
    if r0.len() != a0.nrows() {
        return Err(OperatorError::ShapeMismatch(format!("residual of length {} for {} outputs", r0.len(), a0.nrows())));
    }
    let gap = ((gram_exp(a_final, horizon) - gram_exp(a0, horizon)) * r0).norm();
    let b = spectral_norm(&(a_final - a0));
    let r = r0.norm();
    let bound = (2.0 * b * horizon.sqrt() * r).min(2.0 * r);
    Ok(SimplifiedGap {
        gap,
        bound,
        holds: gap <= bound + INEQUALITY_SLACK,
    })
}

#[cfg(test)]
mod tests {
    use super::super::Interpolation;
    use super::*;
    use approx::assert_relative_eq;

    fn s(v: f64) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, v)
    }

    #[test]
    fn exp_diff_examples() {
        let zero = check_exp_diff(&DMatrix::identity(3, 2), &DMatrix::zeros(3, 2), 1.0).unwrap();
        assert_eq!(zero.lhs, 0.0);
        assert!(zero.holds);
        let r = check_exp_diff(&s(1.0), &s(0.5), 1.0).unwrap();
        assert_relative_eq!(r.lhs, ((-1f64).exp() - (-2.25f64).exp()).abs(), max_relative = 1e-12);
        assert_relative_eq!(r.lhs, 0.26248, epsilon = 1e-5);
        assert_relative_eq!(r.rhs, 1.0);
        assert!(check_exp_diff(&s(1.0), &DMatrix::zeros(2, 1), 1.0).is_err());
    }

    #[test]
    fn exp_times_matrix_examples() {
        assert_eq!(check_exp_times_matrix(&DMatrix::zeros(2, 3), 1.0).unwrap().lhs, 0.0);
        let r = check_exp_times_matrix(&s(1.0), 1.0).unwrap();
        assert_relative_eq!(r.lhs, (-1f64).exp(), max_relative = 1e-12);
        assert_eq!(r.rhs, 0.5);
        let vacuous = check_exp_times_matrix(&s(3.0), 0.0).unwrap();
        assert!(vacuous.rhs.is_infinite() && vacuous.holds);
    }

    #[test]
    fn exp_times_matrix_scalar_sharpness() {
        // sup_x x e^{-x^2 t} = e^{-1/2} / sqrt(2 t), strictly below 1/(2 sqrt t).
        let t = 0.7;
        let best = (0..200_000)
            .map(|k| check_exp_times_matrix(&s(k as f64 * 2e-5), t).unwrap().lhs)
            .fold(0.0, f64::max);
        assert_relative_eq!(best, (-0.5f64).exp() / (2.0 * t).sqrt(), max_relative = 1e-8);
        assert_relative_eq!(best * t.sqrt(), 0.42888, epsilon = 1e-5);
    }

    #[test]
    fn telescope_examples() {
        let zero = check_telescope(&DMatrix::identity(2, 2), &DMatrix::zeros(2, 2), 1.0).unwrap();
        assert_eq!(zero.check.lhs, 0.0);
        let r = check_telescope(&s(1.0), &s(-0.5), 2.0).unwrap();
        assert!(r.symmetric_case);
        assert_relative_eq!(r.check.lhs, (0.5 * (-0.5f64).exp() - (-2f64).exp()).abs(), max_relative = 1e-12);
        assert_relative_eq!(r.check.lhs, 0.16793, epsilon = 1e-5);
        assert_relative_eq!(r.check.rhs, 1.5);
        let rect = check_telescope(&DMatrix::identity(2, 3), &DMatrix::from_element(2, 3, 0.1), 0.3).unwrap();
        assert!(!rect.symmetric_case);
    }

    #[test]
    fn symmetric_path_agrees_with_general_path() {
        let x = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, -0.5]);
        let y = DMatrix::from_row_slice(2, 2, &[0.2, -0.1, -0.1, 0.4]);
        let sym = check_telescope(&x, &y, 0.8).unwrap();
        assert!(sym.symmetric_case);
        assert_relative_eq!(sym.check.lhs, telescope_lhs(&x, &y, 0.8), max_relative = 1e-10);
    }

    #[test]
    fn lift_dominates_direct_value() {
        let x = DMatrix::from_row_slice(2, 3, &[1.0, 0.3, -0.2, 0.0, 0.5, 0.9]);
        let y = DMatrix::from_row_slice(2, 3, &[0.1, -0.4, 0.2, 0.3, 0.0, -0.1]);
        let lift = symmetric_lift(&x);
        assert_eq!(lift.shape(), (6, 6));
        assert_relative_eq!(spectral_norm(&lift), spectral_norm(&x), max_relative = 1e-12);
        let direct = check_telescope(&x, &y, 1.3).unwrap();
        let lifted = lifted_telescope_lhs(&x, &y, 1.3).unwrap();
        assert!(lifted + 1e-12 >= direct.check.lhs);
        assert!(lifted <= direct.check.rhs + INEQUALITY_SLACK);
    }

    #[test]
    fn exp_approximates_prodint_examples() {
        let c = KernelPath::constant(DMatrix::from_row_slice(2, 1, &[0.5, 1.0]), 0.0, 2.0).unwrap();
        let r = check_exp_approximates_prodint(&c, 0.3, 1.9, 1e-12).unwrap();
        assert!(r.lhs < 1e-12 && r.rhs == 0.0 && r.holds);

        let step = KernelPath::new(vec![0.0, 0.5, 1.0], vec![s(1.0), s(1.0), s(1.2)], Interpolation::PiecewiseConstantLeft).unwrap();
        let r = check_exp_approximates_prodint(&step, 0.0, 1.0, 1e-12).unwrap();
        assert_relative_eq!(r.lhs, (1.2 * (-1.44f64).exp() - (-1.22f64).exp()).abs(), max_relative = 1e-10);
        assert_relative_eq!(r.lhs, 0.01091, epsilon = 1e-5);
        assert_relative_eq!(r.rhs, 0.6, max_relative = 1e-12);
    }

    #[test]
    fn prodint_difference_examples() {
        let a = KernelPath::constant(s(1.0), 0.0, 1.0).unwrap();
        assert_eq!(check_prodint_difference(&a, &a, 1e-12).unwrap().lhs, 0.0);
        let b = KernelPath::constant(s(1.2), 0.0, 1.0).unwrap();
        let r = check_prodint_difference(&a, &b, 1e-12).unwrap();
        assert_relative_eq!(r.lhs, (-1f64).exp() - (-1.44f64).exp(), max_relative = 1e-10);
        assert_relative_eq!(r.lhs, 0.13095, epsilon = 1e-5);
        assert_relative_eq!(r.rhs, 0.4, max_relative = 1e-12);
    }

    #[test]
    fn interpolation_derivative_examples() {
        let a = KernelPath::constant(s(1.0), 0.0, 1.0).unwrap();
        let r = check_interpolation_derivative(&a, &a, 0.5, 1e-4, 1e-12).unwrap();
        assert!(r.lhs < 1e-8);
        let b = KernelPath::constant(s(1.2), 0.0, 1.0).unwrap();
        let r = check_interpolation_derivative(&a, &b, 0.0, 1e-4, 1e-12).unwrap();
        // d/dzeta e^{-(1 + 0.2 zeta)^2} at 0 is -0.4 e^{-1}
        assert_relative_eq!(r.lhs, 0.4 * (-1f64).exp(), max_relative = 1e-6);
        assert_relative_eq!(r.rhs, 0.4, max_relative = 1e-12);
        assert!(r.holds);
        assert!(check_interpolation_derivative(&a, &b, 1.5, 1e-4, 1e-12).is_err());
    }

    #[test]
    fn simplified_gap_examples() {
        let r0 = DVector::from_element(1, 1.0);
        let same = simplified_gap(&s(1.0), &s(1.0), &r0, 1.0).unwrap();
        assert_eq!(same.gap, 0.0);
        let g = simplified_gap(&s(1.0), &s(1.2), &r0, 1.0).unwrap();
        assert_relative_eq!(g.gap, 0.13095, epsilon = 1e-5);
        assert_relative_eq!(g.bound, 0.4, max_relative = 1e-12);
        assert!(g.holds);
    }
}
