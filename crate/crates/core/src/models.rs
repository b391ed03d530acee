//! Differentiable models `h : R^p -> R^n` with analytic Jacobians.
//!
//! Shipped models:
//!
//! * [`LinearModel`]: `h(w) = A w`, its own linearization.
//! * [`QuadraticConverseModel`]: the scalar model `h(w) = a w + (b/2) w^2` whose
//!   derivative is exactly `b`-Lipschitz; it realises the lower bound on the
//!   NTK gap.
//! * [`TwoLayerNet`]: a width-`m` two-layer network in the mean-field
//!   parametrization evaluated on a fixed data set.
//! * [`Linearization`]: the first-order Taylor model around a base point.
//! * [`ScaledModel`]: `c * h(w)`, used to express the NTK parametrization.

use std::fmt;
use std::sync::OnceLock;

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected} parameters, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("unsupported activation `{0}`: the bounds need bounded derivatives up to third order")]
    UnsupportedActivation(String),
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// A smooth map from weights to an output vector in `R^n`.
///
/// Implementations may assume `w.len() == param_dim()`; the checked entry
/// points are [`eval_model`] and [`jacobian`].
pub trait DifferentiableModel: Send + Sync {
    fn param_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn value(&self, w: &DVector<f64>) -> DVector<f64>;
    /// Row `i` holds the gradient of output coordinate `i`.
    fn derivative(&self, w: &DVector<f64>) -> DMatrix<f64>;

    fn value_and_derivative(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (self.value(w), self.derivative(w))
    }
}

impl<M: DifferentiableModel + ?Sized> DifferentiableModel for &M {
    fn param_dim(&self) -> usize {
        (**self).param_dim()
    }
    fn output_dim(&self) -> usize {
        (**self).output_dim()
    }
    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        (**self).value(w)
    }
    fn derivative(&self, w: &DVector<f64>) -> DMatrix<f64> {
        (**self).derivative(w)
    }
    fn value_and_derivative(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        (**self).value_and_derivative(w)
    }
}

fn check_dim<M: DifferentiableModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<(), ModelError> {
    if w.len() != model.param_dim() {
        return Err(ModelError::DimensionMismatch {
            expected: model.param_dim(),
            got: w.len(),
        });
    }
    Ok(())
}

pub fn eval_model<M: DifferentiableModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<DVector<f64>, ModelError> {
    check_dim(model, w)?;
    Ok(model.value(w))
}

pub fn jacobian<M: DifferentiableModel + ?Sized>(model: &M, w: &DVector<f64>) -> Result<DMatrix<f64>, ModelError> {
    check_dim(model, w)?;
    Ok(model.derivative(w))
}

pub fn linearize<M: DifferentiableModel + ?Sized>(model: &M, w0: &DVector<f64>) -> Result<Linearization, ModelError> {
    check_dim(model, w0)?;
    let (anchor_value, anchor_jacobian) = model.value_and_derivative(w0);
    Ok(Linearization {
        base: w0.clone(),
        anchor_value,
        anchor_jacobian,
    })
}

// ---------------------------------------------------------------------------

#[derive(Debug, Clone, PartialEq)]
pub struct LinearModel {
    pub matrix: DMatrix<f64>,
}

impl LinearModel {
    pub fn new(matrix: DMatrix<f64>) -> Self {
        Self { matrix }
    }

    /// `h(w) = w` on `R^dim`.
    pub fn identity(dim: usize) -> Self {
        Self::new(DMatrix::identity(dim, dim))
    }
}

impl DifferentiableModel for LinearModel {
    fn param_dim(&self) -> usize {
        self.matrix.ncols()
    }
    fn output_dim(&self) -> usize {
        self.matrix.nrows()
    }
    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.matrix * w
    }
    fn derivative(&self, _w: &DVector<f64>) -> DMatrix<f64> {
        self.matrix.clone()
    }
}

// ---------------------------------------------------------------------------

/// `h(w) = a w + (b/2) w^2` on scalars, so `Dh(w) = a + b w` is exactly
/// `b`-Lipschitz.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct QuadraticConverseModel {
    pub a: f64,
    pub b: f64,
}

impl QuadraticConverseModel {
    pub fn new(a: f64, b: f64) -> Self {
        Self { a, b }
    }

    /// The lower-bound instance for horizon `T`: `a = 1/sqrt(T)`, `b = lip_dh`.
    pub fn for_horizon(horizon: f64, lip_dh: f64) -> Result<Self, ModelError> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(ModelError::Invalid(format!("horizon must be positive, got {horizon}")));
        }
        if !(lip_dh >= 0.0 && lip_dh.is_finite()) {
            return Err(ModelError::Invalid(format!("Lip(Dh) must be nonnegative, got {lip_dh}")));
        }
        Ok(Self::new(1.0 / horizon.sqrt(), lip_dh))
    }

    pub fn lip_dh(&self) -> f64 {
        self.b.abs()
    }
}

impl DifferentiableModel for QuadraticConverseModel {
    fn param_dim(&self) -> usize {
        1
    }
    fn output_dim(&self) -> usize {
        1
    }
    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        let x = w[0];
        DVector::from_element(1, self.a * x + 0.5 * self.b * x * x)
    }
    fn derivative(&self, w: &DVector<f64>) -> DMatrix<f64> {
        DMatrix::from_element(1, 1, self.a + self.b * w[0])
    }
}

// ---------------------------------------------------------------------------

/// First-order Taylor model `h(w0) + Dh(w0)(w - w0)`.
#[derive(Debug, Clone, PartialEq)]
pub struct Linearization {
    pub base: DVector<f64>,
    pub anchor_value: DVector<f64>,
    pub anchor_jacobian: DMatrix<f64>,
}

impl DifferentiableModel for Linearization {
    fn param_dim(&self) -> usize {
        self.base.len()
    }
    fn output_dim(&self) -> usize {
        self.anchor_value.len()
    }
    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        &self.anchor_value + &self.anchor_jacobian * (w - &self.base)
    }
    fn derivative(&self, _w: &DVector<f64>) -> DMatrix<f64> {
        self.anchor_jacobian.clone()
    }
}

// ---------------------------------------------------------------------------

/// `c * h(w)`.
#[derive(Debug, Clone, PartialEq)]
pub struct ScaledModel<M> {
    pub inner: M,
    pub scale: f64,
}

impl<M: DifferentiableModel> DifferentiableModel for ScaledModel<M> {
    fn param_dim(&self) -> usize {
        self.inner.param_dim()
    }
    fn output_dim(&self) -> usize {
        self.inner.output_dim()
    }
    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        self.inner.value(w) * self.scale
    }
    fn derivative(&self, w: &DVector<f64>) -> DMatrix<f64> {
        self.inner.derivative(w) * self.scale
    }
    fn value_and_derivative(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (v, j) = self.inner.value_and_derivative(w);
        (v * self.scale, j * self.scale)
    }
}

// ---------------------------------------------------------------------------

/// Smooth scalar activations with bounded first, second and third derivatives.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Sigmoid,
    Tanh,
    Softplus,
}

/// Sup-norms of an activation and its first three derivatives over the real line.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DerivativeSups {
    pub value: f64,
    pub first: f64,
    pub second: f64,
    pub third: f64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl Activation {
    pub const ALL: [Activation; 3] = [Activation::Sigmoid, Activation::Tanh, Activation::Softplus];

    pub fn name(self) -> &'static str {
        match self {
            Activation::Sigmoid => "sigmoid",
            Activation::Tanh => "tanh",
            Activation::Softplus => "softplus",
        }
    }

    /// `[sigma, sigma', sigma'', sigma''']` at `z`.
    pub fn derivatives(self, z: f64) -> [f64; 4] {
        match self {
            Activation::Sigmoid => {
                let s = sigmoid(z);
                let d1 = s * (1.0 - s);
                [s, d1, d1 * (1.0 - 2.0 * s), d1 * (1.0 - 6.0 * s + 6.0 * s * s)]
            }
            Activation::Tanh => {
                let t = z.tanh();
                let d1 = 1.0 - t * t;
                [t, d1, -2.0 * t * d1, -2.0 * d1 * (1.0 - 3.0 * t * t)]
            }
            Activation::Softplus => {
                let v = z.max(0.0) + (-z.abs()).exp().ln_1p();
                let s = sigmoid(z);
                let d1 = s * (1.0 - s);
                [v, s, d1, d1 * (1.0 - 2.0 * s)]
            }
        }
    }

    pub fn value(self, z: f64) -> f64 {
        self.derivatives(z)[0]
    }

    /// Sup-norms from a dense grid over `[-50, 50]`; every shipped derivative
    /// decays outside that window. Softplus itself is unbounded and reports
    /// `value = inf`.
    pub fn sups(self) -> DerivativeSups {
        static CACHE: OnceLock<[DerivativeSups; 3]> = OnceLock::new();
        let table = CACHE.get_or_init(|| Activation::ALL.map(|a| a.numeric_sups(-50.0, 50.0, 2_000_001)));
        let mut sups = table[self as usize];
        if self == Activation::Softplus {
            sups.value = f64::INFINITY;
        }
        sups
    }

    fn numeric_sups(self, lo: f64, hi: f64, points: usize) -> DerivativeSups {
        let mut best = [0.0f64; 4];
        let step = (hi - lo) / (points - 1) as f64;
        for k in 0..points {
            let d = self.derivatives(lo + step * k as f64);
            for (b, v) in best.iter_mut().zip(d) {
                *b = b.max(v.abs());
            }
        }
        DerivativeSups {
            value: best[0],
            first: best[1],
            second: best[2],
            third: best[3],
        }
    }
}

impl fmt::Display for Activation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Activation {
    type Err = ModelError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "sigmoid" => Ok(Activation::Sigmoid),
            "tanh" => Ok(Activation::Tanh),
            "softplus" => Ok(Activation::Softplus),
            other => Err(ModelError::UnsupportedActivation(other.to_string())),
        }
    }
}

// ---------------------------------------------------------------------------

/// Two-layer network `f_w(x) = m^{-1/2} sum_i a_i sigma(sqrt(m) <x, u_i>)`
/// evaluated on the rows of `data`, with `h(w) = n^{-1/2} [f_w(x_1), ..., f_w(x_n)]`.
///
/// Weights are laid out as `[a_1..a_m, u_1 (d entries), ..., u_m]`.
#[derive(Debug, Clone, PartialEq)]
pub struct TwoLayerNet {
    width: usize,
    input_dim: usize,
    activation: Activation,
    data: DMatrix<f64>,
    labels: DVector<f64>,
}

impl TwoLayerNet {
    pub fn new(width: usize, activation: Activation, data: DMatrix<f64>, labels: DVector<f64>) -> Result<Self, ModelError> {
        if width == 0 || data.ncols() == 0 || data.nrows() == 0 {
            return Err(ModelError::Invalid("width, input dimension and sample count must be positive".into()));
        }
        if labels.len() != data.nrows() {
            return Err(ModelError::Invalid(format!(
                "{} labels for {} data points",
                labels.len(),
                data.nrows()
            )));
        }
        Ok(Self {
            width,
            input_dim: data.ncols(),
            activation,
            data,
            labels,
        })
    }

    /// Inputs drawn uniformly on the unit sphere, labels i.i.d. standard normal.
    pub fn synthetic(width: usize, input_dim: usize, samples: usize, activation: Activation, data_seed: u64) -> Result<Self, ModelError> {
        use rand_distr::StandardNormal;
        let mut rng = ChaCha8Rng::seed_from_u64(data_seed);
        let mut data = DMatrix::zeros(samples, input_dim);
        for i in 0..samples {
            let mut row: Vec<f64> = (0..input_dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            row.iter_mut().for_each(|v| *v /= norm);
            for (j, v) in row.into_iter().enumerate() {
                data[(i, j)] = v;
            }
        }
        let labels = DVector::from_fn(samples, |_, _| rng.sample(StandardNormal));
        Self::new(width, activation, data, labels)
    }

    pub fn width(&self) -> usize {
        self.width
    }
    pub fn input_dim(&self) -> usize {
        self.input_dim
    }
    pub fn samples(&self) -> usize {
        self.data.nrows()
    }
    pub fn activation(&self) -> Activation {
        self.activation
    }
    pub fn data(&self) -> &DMatrix<f64> {
        &self.data
    }
    pub fn labels(&self) -> &DVector<f64> {
        &self.labels
    }

    /// Target of the square loss `R(v) = 1/2 |v - y/sqrt(n)|^2`.
    pub fn target(&self) -> DVector<f64> {
        &self.labels / (self.samples() as f64).sqrt()
    }

    /// Target shifted by the rescaled initial output, so the initial residual
    /// equals `y/sqrt(n)` for every `alpha`.
    pub fn centered_target(&self, alpha: f64, w0: &DVector<f64>) -> DVector<f64> {
        self.target() + self.value(w0) * alpha
    }

    /// Network output `f_w(x)` at a single input.
    pub fn network_output(&self, w: &DVector<f64>, x: &[f64]) -> f64 {
        let m = self.width;
        let sm = (m as f64).sqrt();
        (0..m)
            .map(|i| {
                let u = &w.as_slice()[m + i * self.input_dim..m + (i + 1) * self.input_dim];
                let z = sm * u.iter().zip(x).map(|(a, b)| a * b).sum::<f64>();
                w[i] * self.activation.value(z)
            })
            .sum::<f64>()
            / sm
    }

    pub fn max_data_norm(&self) -> f64 {
        self.data.row_iter().map(|r| r.norm()).fold(0.0, f64::max)
    }

    pub fn outer_weights<'a>(&self, w: &'a DVector<f64>) -> &'a [f64] {
        &w.as_slice()[..self.width]
    }

    /// Lip(Dh) upper bound valid on the Euclidean ball of radius `rho`
    /// around `w0`, from [`lip_dh_hessian_bound_two_layer`].
    pub fn lip_dh_on_ball(&self, w0: &DVector<f64>, rho: f64) -> Result<f64, ModelError> {
        let a_max = self.outer_weights(w0).iter().fold(0.0f64, |acc, a| acc.max(a.abs())) + rho.max(0.0);
        lip_dh_hessian_bound_two_layer(&self.activation.sups(), self.max_data_norm(), a_max, self.width)
    }
}

impl DifferentiableModel for TwoLayerNet {
    fn param_dim(&self) -> usize {
        self.width * (1 + self.input_dim)
    }
    fn output_dim(&self) -> usize {
        self.samples()
    }

    fn value(&self, w: &DVector<f64>) -> DVector<f64> {
        let scale = (self.samples() as f64).sqrt();
        DVector::from_fn(self.samples(), |j, _| {
            let x: Vec<f64> = self.data.row(j).iter().copied().collect();
            self.network_output(w, &x) / scale
        })
    }

    fn derivative(&self, w: &DVector<f64>) -> DMatrix<f64> {
        self.value_and_derivative(w).1
    }

    fn value_and_derivative(&self, w: &DVector<f64>) -> (DVector<f64>, DMatrix<f64>) {
        let (m, d, n) = (self.width, self.input_dim, self.samples());
        let sm = (m as f64).sqrt();
        let sn = (n as f64).sqrt();
        let ws = w.as_slice();
        let mut value = DVector::zeros(n);
        let mut jac = DMatrix::zeros(n, self.param_dim());
        for j in 0..n {
            let mut f = 0.0;
            for i in 0..m {
                let u = &ws[m + i * d..m + (i + 1) * d];
                let z = sm * (0..d).map(|k| self.data[(j, k)] * u[k]).sum::<f64>();
                let [s, s1, _, _] = self.activation.derivatives(z);
                f += ws[i] * s;
                jac[(j, i)] = s / (sm * sn);
                let coeff = ws[i] * s1 / sn;
                for k in 0..d {
                    jac[(j, m + i * d + k)] = coeff * self.data[(j, k)];
                }
            }
            value[j] = f / (sm * sn);
        }
        (value, jac)
    }
}

/// Initial weights with i.i.d. `Unif[-1/sqrt(m), 1/sqrt(m)]` entries, `m + m d` of them.
pub fn two_layer_init(width: usize, input_dim: usize, seed: u64) -> DVector<f64> {
    let bound = 1.0 / (width.max(1) as f64).sqrt();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    DVector::from_fn(width * (1 + input_dim), |_, _| rng.random_range(-bound..=bound))
}

fn validate_sups(sups: &DerivativeSups) -> Result<(), ModelError> {
    if !(sups.first.is_finite() && sups.second.is_finite()) {
        return Err(ModelError::UnsupportedActivation(
            "activation derivatives are unbounded or undefined".into(),
        ));
    }
    Ok(())
}

/// The closed-form expression `2 |s'| max|x| / sqrt(m) + |s''| max|x|^2 |a|_inf`.
///
/// This under-counts the curvature of the `u`-block of the Hessian by a
/// factor `sqrt(m)` and is exceeded by measured Lipschitz ratios once `m` is
/// moderately large (see the tests). Bound checks use
/// [`lip_dh_hessian_bound_two_layer`] instead.
pub fn lip_dh_bound_two_layer(sups: &DerivativeSups, max_data_norm: f64, max_abs_outer: f64, width: usize) -> Result<f64, ModelError> {
    validate_sups(sups)?;
    let m = width.max(1) as f64;
    Ok(2.0 * sups.first * max_data_norm / m.sqrt() + sups.second * max_data_norm * max_data_norm * max_abs_outer)
}

/// Sound Lip(Dh) bound from the Hessian of `f_w(x)`, which is block diagonal
/// over neurons with blocks `[[0, s' x^T], [s' x, sqrt(m) a_i s'' x x^T]]`:
/// `|s'| max|x| + sqrt(m) |s''| max|x|^2 |a|_inf`.
///
/// `max_abs_outer` must bound `|a_i|` over the whole region of interest.
pub fn lip_dh_hessian_bound_two_layer(sups: &DerivativeSups, max_data_norm: f64, max_abs_outer: f64, width: usize) -> Result<f64, ModelError> {
    validate_sups(sups)?;
    let m = width.max(1) as f64;
    Ok(sups.first * max_data_norm + m.sqrt() * sups.second * max_data_norm * max_data_norm * max_abs_outer)
}
