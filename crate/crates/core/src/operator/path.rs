use nalgebra::DMatrix;

use super::{spectral_norm, OperatorError};

/// How a [`KernelPath`] is evaluated between its grid points.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Interpolation {
    /// Left-continuous step function: on `(t_{i-1}, t_i]` the path equals the
    /// factor stored at `t_i`. Right-endpoint Riemann products over any
    /// refinement of the grid are then exact.
    PiecewiseConstantLeft,
    PiecewiseLinear,
}

/// Time-indexed factor matrices `A_t in R^{n x d}`, with kernels `K_t = A_t A_t^T`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelPath {
    times: Vec<f64>,
    factors: Vec<DMatrix<f64>>,
    interpolation: Interpolation,
}

impl KernelPath {
    pub fn new(times: Vec<f64>, factors: Vec<DMatrix<f64>>, interpolation: Interpolation) -> Result<Self, OperatorError> {
        if times.is_empty() || times.len() != factors.len() {
            return Err(OperatorError::ShapeMismatch(format!(
                "{} grid times for {} factors",
                times.len(),
                factors.len()
            )));
        }
        if times.iter().any(|t| !t.is_finite()) || factors.iter().any(|f| f.iter().any(|v| !v.is_finite())) {
            return Err(OperatorError::NonFinite);
        }
        if times.windows(2).any(|w| w[1] <= w[0]) {
            return Err(OperatorError::InvalidArgument("grid must be strictly increasing".into()));
        }
        let shape = factors[0].shape();
        if factors.iter().any(|f| f.shape() != shape) {
            return Err(OperatorError::ShapeMismatch("factors differ in shape".into()));
        }
        Ok(Self {
            times,
            factors,
            interpolation,
        })
    }

    pub fn constant(factor: DMatrix<f64>, start: f64, end: f64) -> Result<Self, OperatorError> {
        Self::new(vec![start, end], vec![factor.clone(), factor], Interpolation::PiecewiseLinear)
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }
    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }
    pub fn interpolation(&self) -> Interpolation {
        self.interpolation
    }
    pub fn start(&self) -> f64 {
        self.times[0]
    }
    pub fn end(&self) -> f64 {
        *self.times.last().unwrap()
    }
    /// `(n, d)` of every factor.
    pub fn shape(&self) -> (usize, usize) {
        self.factors[0].shape()
    }

    pub fn contains(&self, x: f64, y: f64) -> bool {
        self.start() <= x && x <= y && y <= self.end()
    }

    /// Factor at time `s`, clamped to the path's domain.
    pub fn factor_at(&self, s: f64) -> DMatrix<f64> {
        let last = self.times.len() - 1;
        if s <= self.times[0] {
            return self.factors[0].clone();
        }
        if s >= self.times[last] {
            return self.factors[last].clone();
        }
        // first index with times[i] >= s; 1 <= i <= last here
        let i = self.times.partition_point(|&t| t < s);
        match self.interpolation {
            Interpolation::PiecewiseConstantLeft => self.factors[i].clone(),
            Interpolation::PiecewiseLinear => {
                let (t0, t1) = (self.times[i - 1], self.times[i]);
                let theta = (s - t0) / (t1 - t0);
                &self.factors[i - 1] * (1.0 - theta) + &self.factors[i] * theta
            }
        }
    }

    pub fn kernel_at(&self, s: f64) -> DMatrix<f64> {
        let a = self.factor_at(s);
        &a * a.transpose()
    }

    /// `x`, the grid points strictly inside `(x, y)`, and `y`.
    pub(crate) fn breakpoints(&self, x: f64, y: f64) -> Vec<f64> {
        let mut pts = vec![x];
        pts.extend(self.times.iter().copied().filter(|&t| t > x && t < y));
        if y > x {
            pts.push(y);
        }
        pts
    }

    fn check_same_grid(&self, other: &KernelPath) -> Result<(), OperatorError> {
        if self.times != other.times {
            return Err(OperatorError::ShapeMismatch("paths live on different grids".into()));
        }
        if self.shape() != other.shape() {
            return Err(OperatorError::ShapeMismatch("paths have different factor shapes".into()));
        }
        if self.interpolation != other.interpolation {
            return Err(OperatorError::ShapeMismatch("paths use different interpolation rules".into()));
        }
        Ok(())
    }

    /// Pointwise `self - other` on a shared grid.
    pub fn difference(&self, other: &KernelPath) -> Result<KernelPath, OperatorError> {
        self.check_same_grid(other)?;
        let factors = self.factors.iter().zip(&other.factors).map(|(a, b)| a - b).collect();
        KernelPath::new(self.times.clone(), factors, self.interpolation)
    }

    /// `self + zeta (other - self)`.
    pub fn interpolate_towards(&self, other: &KernelPath, zeta: f64) -> Result<KernelPath, OperatorError> {
        self.check_same_grid(other)?;
        let factors = self
            .factors
            .iter()
            .zip(&other.factors)
            .map(|(a, b)| a + (b - a) * zeta)
            .collect();
        KernelPath::new(self.times.clone(), factors, self.interpolation)
    }

    /// `sup_t |A_t|`; for both interpolation rules it is attained on the grid.
    pub fn sup_norm(&self) -> f64 {
        self.factors.iter().map(spectral_norm).fold(0.0, f64::max)
    }
}

/// Total variation over the whole path.
pub fn total_variation(path: &KernelPath) -> f64 {
    total_variation_on(path, path.start(), path.end())
}

/// Sum of `|C_{t_{i+1}} - C_{t_i}|` over `a`, the interior grid points and `b`.
/// For both interpolation rules this partition attains the supremum over all
/// partitions of `[a, b]`.
pub fn total_variation_on(path: &KernelPath, a: f64, b: f64) -> f64 {
    let pts = path.breakpoints(a, b);
    let values: Vec<DMatrix<f64>> = pts.iter().map(|&s| path.factor_at(s)).collect();
    values.windows(2).map(|w| spectral_norm(&(&w[1] - &w[0]))).sum()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    fn scalar_path(times: &[f64], values: &[f64], interp: Interpolation) -> KernelPath {
        KernelPath::new(
            times.to_vec(),
            values.iter().map(|&v| DMatrix::from_element(1, 1, v)).collect(),
            interp,
        )
        .unwrap()
    }

    #[test]
    fn rejects_malformed_paths() {
        let one = DMatrix::from_element(1, 1, 1.0);
        assert!(KernelPath::new(vec![0.0, 0.0], vec![one.clone(), one.clone()], Interpolation::PiecewiseLinear).is_err());
        assert!(KernelPath::new(vec![0.0], vec![one.clone(), one.clone()], Interpolation::PiecewiseLinear).is_err());
        assert!(KernelPath::new(vec![0.0, 1.0], vec![one, DMatrix::zeros(2, 1)], Interpolation::PiecewiseLinear).is_err());
    }

    #[test]
    fn evaluation_rules() {
        let lin = scalar_path(&[0.0, 1.0, 2.0], &[1.0, 3.0, 2.0], Interpolation::PiecewiseLinear);
        assert_relative_eq!(lin.factor_at(0.5)[(0, 0)], 2.0);
        assert_relative_eq!(lin.factor_at(1.5)[(0, 0)], 2.5);
        assert_relative_eq!(lin.factor_at(5.0)[(0, 0)], 2.0);
        let step = scalar_path(&[0.0, 1.0, 2.0], &[1.0, 3.0, 2.0], Interpolation::PiecewiseConstantLeft);
        assert_eq!(step.factor_at(0.0)[(0, 0)], 1.0);
        assert_eq!(step.factor_at(1e-9)[(0, 0)], 3.0);
        assert_eq!(step.factor_at(1.0)[(0, 0)], 3.0);
        assert_eq!(step.factor_at(1.5)[(0, 0)], 2.0);
    }

    #[test]
    fn total_variation_examples() {
        let c = KernelPath::constant(DMatrix::from_element(2, 2, 0.3), 0.0, 1.0).unwrap();
        assert_eq!(total_variation(&c), 0.0);
        let p = scalar_path(&[0.0, 1.0, 2.0], &[1.0, 1.2, 0.9], Interpolation::PiecewiseLinear);
        assert_relative_eq!(total_variation(&p), 0.5, epsilon = 1e-14);
        assert_relative_eq!(total_variation_on(&p, 0.5, 1.5), 0.1 + 0.15, epsilon = 1e-14);
    }

    #[test]
    fn linear_total_variation_is_refinement_invariant() {
        let times = vec![0.0, 0.3, 1.0, 1.7];
        let factors: Vec<DMatrix<f64>> = (0..4)
            .map(|k| DMatrix::from_fn(3, 2, |i, j| ((k * 7 + i * 3 + j) as f64).sin()))
            .collect();
        let coarse = KernelPath::new(times.clone(), factors, Interpolation::PiecewiseLinear).unwrap();
        let mut fine_t = Vec::new();
        for w in times.windows(2) {
            for s in 0..8 {
                fine_t.push(w[0] + (w[1] - w[0]) * s as f64 / 8.0);
            }
        }
        fine_t.push(1.7);
        let fine_f = fine_t.iter().map(|&t| coarse.factor_at(t)).collect();
        let fine = KernelPath::new(fine_t, fine_f, Interpolation::PiecewiseLinear).unwrap();
        assert!((total_variation(&coarse) - total_variation(&fine)).abs() < 1e-12);
    }
}
