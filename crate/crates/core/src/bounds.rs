//! `kappa = (T/alpha) Lip(Dh) sqrt(R0)` and the family of NTK-gap bounds built
//! from it, the quadratic lower-bound construction, and per-instance reports.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::flow::{
    gradient_flow, linearized_flow, ntk_gap, trajectory_diagnostics, within_main_window, Diagnostics, FlowConfig, FlowError,
    TrainSetup, Trajectory,
};
use crate::models::{two_layer_init, Activation, DifferentiableModel, ModelError, QuadraticConverseModel, ScaledModel, TwoLayerNet};
use crate::operator::{gram_exp, product_integral_sampled, spectral_norm, Interpolation, KernelPath, OperatorError};

#[derive(Debug, Error, Clone)]
pub enum BoundsError {
    #[error("invalid input: {0}")]
    Input(String),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Flow(#[from] FlowError),
    #[error(transparent)]
    Operator(#[from] OperatorError),
}

fn check_nonneg(name: &str, v: f64) -> Result<(), BoundsError> {
    if !(v >= 0.0 && v.is_finite()) {
        return Err(BoundsError::Input(format!("{name} must be finite and nonnegative, got {v}")));
    }
    Ok(())
}

fn check_alpha(alpha: f64) -> Result<(), BoundsError> {
    if !(alpha > 0.0 && alpha.is_finite()) {
        return Err(BoundsError::Input(format!("alpha must be positive, got {alpha}")));
    }
    Ok(())
}

pub fn kappa(horizon: f64, alpha: f64, lip_dh: f64, r0: f64) -> Result<f64, BoundsError> {
    check_alpha(alpha)?;
    check_nonneg("T", horizon)?;
    check_nonneg("Lip(Dh)", lip_dh)?;
    check_nonneg("R0", r0)?;
    Ok(horizon / alpha * lip_dh * r0.sqrt())
}

/// `min(6 kappa sqrt(R0), sqrt(8 R0))`.
pub fn main_bound(kappa: f64, r0: f64) -> f64 {
    (6.0 * kappa * r0.sqrt()).min(trivial_bound(r0))
}

/// Whether [`main_bound`] is attained by its `6 kappa sqrt(R0)` branch.
pub fn main_bound_is_kappa_branch(kappa: f64, r0: f64) -> bool {
    6.0 * kappa * r0.sqrt() <= trivial_bound(r0)
}

pub fn trivial_bound(r0: f64) -> f64 {
    (8.0 * r0).sqrt()
}

/// `T Lip(h)^2 kappa sqrt(R0)`.
pub fn chizat_bound(horizon: f64, lip_h: f64, kappa: f64, r0: f64) -> f64 {
    horizon * lip_h * lip_h * kappa * r0.sqrt()
}

/// Window `T <= alpha rho / (Lip(h) sqrt(R0))` of [`chizat_bound`].
pub fn chizat_valid(horizon: f64, alpha: f64, rho: f64, lip_h: f64, r0: f64) -> bool {
    let denom = lip_h * r0.sqrt();
    denom == 0.0 || horizon <= alpha * rho / denom
}

/// `(4/3) T^{3/2} Lip(h) Lip(Dh) R0 / alpha`.
pub fn three_halves_bound(horizon: f64, lip_h: f64, lip_dh: f64, r0: f64, alpha: f64) -> Result<f64, BoundsError> {
    check_alpha(alpha)?;
    Ok(4.0 / 3.0 * horizon.powf(1.5) * lip_h * lip_dh * r0 / alpha)
}

/// Absolute and relative slack on upper-bound comparisons.
pub const BOUND_SLACK: f64 = 1e-6;

fn within_upper(gap: f64, bound: f64) -> bool {
    gap <= bound + BOUND_SLACK + BOUND_SLACK * bound
}

/// Where the `Lip(Dh)` value of an instance came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LipSource {
    /// Known exactly (the quadratic model, linear models).
    Exact,
    /// Hessian bound for the two-layer network on the rho-ball.
    HessianBall,
    /// The two-layer closed-form expression.
    ClosedForm,
    Supplied,
}

impl LipSource {
    pub fn name(self) -> &'static str {
        match self {
            LipSource::Exact => "exact",
            LipSource::HessianBall => "hessian_ball",
            LipSource::ClosedForm => "closed_form",
            LipSource::Supplied => "supplied",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct InstanceParams {
    pub alpha: f64,
    pub horizon: f64,
    pub lip_dh: f64,
    pub lip_source: LipSource,
    /// `Lip(h)`; when absent the report uses the trajectory maximum of `|Dh(w(t))|`.
    pub lip_h: Option<f64>,
    pub rho: f64,
    r0: f64,
}

impl InstanceParams {
    /// `R0` is computed from the instance itself.
    pub fn new<M: DifferentiableModel>(
        setup: &TrainSetup<M>,
        w0: &DVector<f64>,
        alpha: f64,
        horizon: f64,
        lip_dh: f64,
        lip_source: LipSource,
        rho: f64,
    ) -> Result<Self, BoundsError> {
        check_alpha(alpha)?;
        check_nonneg("T", horizon)?;
        check_nonneg("Lip(Dh)", lip_dh)?;
        if !(rho > 0.0) {
            return Err(BoundsError::Input(format!("rho must be positive, got {rho}")));
        }
        let r0 = setup.initial_loss(alpha, w0)?;
        Ok(Self {
            alpha,
            horizon,
            lip_dh,
            lip_source,
            lip_h: None,
            rho,
            r0,
        })
    }

    pub fn with_lip_h(mut self, lip_h: f64) -> Self {
        self.lip_h = Some(lip_h);
        self
    }

    pub fn r0(&self) -> f64 {
        self.r0
    }

    pub fn kappa(&self) -> f64 {
        self.horizon / self.alpha * self.lip_dh * self.r0.sqrt()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BoundReport {
    pub alpha: f64,
    pub horizon: f64,
    pub kappa: f64,
    pub r0: f64,
    pub lip_dh: f64,
    pub lip_source: LipSource,
    pub lip_h: f64,
    /// True when `lip_h` is the trajectory estimate rather than a supplied value.
    pub lip_h_empirical: bool,
    pub rho: f64,
    pub gap: f64,
    /// Largest gap over the recording grid.
    pub max_gap: f64,
    pub main_bound: f64,
    pub trivial_bound: f64,
    pub chizat_bound: f64,
    pub three_halves_bound: f64,
    /// `T <= alpha^2 rho^2 / R0` and the weights stayed in the rho-ball.
    pub valid_main: bool,
    pub valid_chizat: bool,
    pub pass_main: bool,
    pub pass_trivial: bool,
    pub pass_chizat: bool,
    pub pass_three_halves: bool,
    pub weight_change_holds: bool,
    pub diagnostics_pass: bool,
    /// `gap / min(T/alpha, 1)`.
    pub lazy_ratio: f64,
    /// Main bound (when its hypothesis holds) and trivial bound at every grid time.
    pub pass: bool,
    pub error: Option<String>,
}

impl BoundReport {
    fn failed(params: &InstanceParams, err: String) -> Self {
        let kappa = params.kappa();
        Self {
            alpha: params.alpha,
            horizon: params.horizon,
            kappa,
            r0: params.r0,
            lip_dh: params.lip_dh,
            lip_source: params.lip_source,
            lip_h: params.lip_h.unwrap_or(f64::NAN),
            lip_h_empirical: params.lip_h.is_none(),
            rho: params.rho,
            gap: f64::NAN,
            max_gap: f64::NAN,
            main_bound: main_bound(kappa, params.r0),
            trivial_bound: trivial_bound(params.r0),
            chizat_bound: f64::NAN,
            three_halves_bound: f64::NAN,
            valid_main: within_main_window(params.alpha, params.horizon, params.rho, params.r0),
            valid_chizat: false,
            pass_main: false,
            pass_trivial: false,
            pass_chizat: false,
            pass_three_halves: false,
            weight_change_holds: false,
            diagnostics_pass: false,
            lazy_ratio: f64::NAN,
            pass: false,
            error: Some(err),
        }
    }

    /// `chizat_bound / main_bound`.
    pub fn chizat_ratio(&self) -> f64 {
        self.chizat_bound / self.main_bound
    }
}

/// Both trained trajectories plus the report assembled from them.
#[derive(Debug, Clone)]
pub struct InstanceRun {
    pub report: BoundReport,
    pub trajectory: Option<Trajectory>,
    pub linearized: Option<Trajectory>,
    pub diagnostics: Option<Diagnostics>,
}

/// Trains `setup` and its linearization from `w0` and evaluates every bound.
/// Integration failures end up in `report.error`.
pub fn evaluate_instance<M: DifferentiableModel>(
    setup: &TrainSetup<M>,
    w0: &DVector<f64>,
    params: &InstanceParams,
    integrator: &FlowConfig,
) -> InstanceRun {
    let cfg = FlowConfig {
        alpha: params.alpha,
        horizon: params.horizon,
        ..integrator.clone()
    };
    let runs = gradient_flow(setup, w0, &cfg, Some(params.rho))
        .and_then(|full| linearized_flow(setup, w0, &cfg).map(|lin| (full, lin)))
        .and_then(|(full, lin)| ntk_gap(&full, &lin).map(|g| (full, lin, g)));
    let (full, lin, gap) = match runs {
        Ok(v) => v,
        Err(e) => {
            return InstanceRun {
                report: BoundReport::failed(params, e.to_string()),
                trajectory: None,
                linearized: None,
                diagnostics: None,
            }
        }
    };
    let r0 = params.r0;
    let kappa = params.kappa();
    let (lip_h, lip_h_empirical) = match params.lip_h {
        Some(v) => (v, false),
        None => (
            full.weights.iter().map(|w| spectral_norm(&setup.model.derivative(w))).fold(0.0, f64::max),
            true,
        ),
    };
    let diagnostics = trajectory_diagnostics(&full, setup, params.lip_dh, params.rho, cfg.rtol, cfg.atol);
    let main = main_bound(kappa, r0);
    let trivial = trivial_bound(r0);
    let chizat = chizat_bound(params.horizon, lip_h, kappa, r0);
    let three_halves = three_halves_bound(params.horizon, lip_h, params.lip_dh, r0, params.alpha).unwrap_or(f64::NAN);
    let valid_main = within_main_window(params.alpha, params.horizon, params.rho, r0) && diagnostics.in_ball();
    let pass_main = within_upper(gap.final_gap, main);
    let pass_trivial = gap.series.iter().all(|&g| within_upper(g, trivial));
    let pass = (pass_main || !valid_main) && pass_trivial;
    let report = BoundReport {
        alpha: params.alpha,
        horizon: params.horizon,
        kappa,
        r0,
        lip_dh: params.lip_dh,
        lip_source: params.lip_source,
        lip_h,
        lip_h_empirical,
        rho: params.rho,
        gap: gap.final_gap,
        max_gap: gap.series.iter().copied().fold(0.0, f64::max),
        main_bound: main,
        trivial_bound: trivial,
        chizat_bound: chizat,
        three_halves_bound: three_halves,
        valid_main,
        valid_chizat: chizat_valid(params.horizon, params.alpha, params.rho, lip_h, r0),
        pass_main,
        pass_trivial,
        pass_chizat: within_upper(gap.final_gap, chizat),
        pass_three_halves: within_upper(gap.final_gap, three_halves),
        weight_change_holds: diagnostics.weight_change_holds(),
        diagnostics_pass: diagnostics.pass,
        lazy_ratio: gap.final_gap / (params.horizon / params.alpha).min(1.0),
        pass,
        error: None,
    };
    InstanceRun {
        report,
        trajectory: Some(full),
        linearized: Some(lin),
        diagnostics: Some(diagnostics),
    }
}

/// A synthetic two-layer instance; `rho` defaults to `ball_radius - |w0|`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkSpec {
    pub width: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub activation: Activation,
    pub data_seed: u64,
    pub init_seed: u64,
    pub ball_radius: f64,
    pub rho: Option<f64>,
    /// Shift the target by `alpha h(w0)` so the initial residual is `y/sqrt(n)` for every alpha.
    pub centered: bool,
}

impl NetworkSpec {
    pub const DEFAULT_BALL_RADIUS: f64 = 3.0;

    pub fn new(width: usize, input_dim: usize, samples: usize, activation: Activation, seed: u64) -> Self {
        Self {
            width,
            input_dim,
            samples,
            activation,
            data_seed: seed,
            init_seed: seed,
            ball_radius: Self::DEFAULT_BALL_RADIUS,
            rho: None,
            centered: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct NetworkInstance {
    pub setup: TrainSetup<TwoLayerNet>,
    pub w0: DVector<f64>,
    pub params: InstanceParams,
}

impl NetworkInstance {
    pub fn build(spec: &NetworkSpec, alpha: f64, horizon: f64) -> Result<Self, BoundsError> {
        let net = TwoLayerNet::synthetic(spec.width, spec.input_dim, spec.samples, spec.activation, spec.data_seed)?;
        let w0 = two_layer_init(spec.width, spec.input_dim, spec.init_seed);
        let rho = match spec.rho {
            Some(r) => r,
            None => spec.ball_radius - w0.norm(),
        };
        if !(rho > 0.0) {
            return Err(BoundsError::Input(format!(
                "rho = {rho} is not positive (ball radius {} around |w0| = {})",
                spec.ball_radius,
                w0.norm()
            )));
        }
        let lip_dh = net.lip_dh_on_ball(&w0, rho)?;
        let target = if spec.centered { net.centered_target(alpha, &w0) } else { net.target() };
        let setup = TrainSetup::new(net, target)?;
        let params = InstanceParams::new(&setup, &w0, alpha, horizon, lip_dh, LipSource::HessianBall, rho)?;
        Ok(Self { setup, w0, params })
    }

    pub fn evaluate(&self, integrator: &FlowConfig) -> InstanceRun {
        evaluate_instance(&self.setup, &self.w0, &self.params, integrator)
    }

    /// Largest `T` inside the upper-bound window `alpha^2 rho^2 / R0`.
    pub fn max_horizon(&self) -> f64 {
        let p = &self.params;
        if p.r0() == 0.0 {
            f64::INFINITY
        } else {
            p.alpha * p.alpha * p.rho * p.rho / p.r0()
        }
    }
}

#[derive(Debug, Clone)]
pub struct ConverseResult {
    pub kappa: f64,
    pub gap: f64,
    pub lower_bound: f64,
    pub main_bound: f64,
    /// `gap >= lower_bound - 1e-6`.
    pub holds: bool,
    /// `gap <= main_bound` within [`BOUND_SLACK`].
    pub upper_holds: bool,
    pub trajectory: Trajectory,
    pub linearized: Trajectory,
    pub diagnostics: Diagnostics,
}

/// `min(kappa sqrt(R0), sqrt(R0)) / 5`.
pub fn converse_lower_bound(kappa: f64, r0: f64) -> f64 {
    (kappa * r0.sqrt()).min(r0.sqrt()) / 5.0
}

/// Horizon at which the quadratic instance reaches a given `kappa`.
pub fn converse_horizon(kappa: f64, alpha: f64, lip_dh: f64, r0: f64) -> Result<f64, BoundsError> {
    check_alpha(alpha)?;
    if !(lip_dh > 0.0 && r0 > 0.0 && kappa > 0.0) {
        return Err(BoundsError::Input("kappa, Lip(Dh) and R0 must be positive".into()));
    }
    Ok(kappa * alpha / (lip_dh * r0.sqrt()))
}

/// Trains `h(w) = w/sqrt(T) + (lip_dh/2) w^2` from `w0 = 0` towards `y* = sqrt(2 R0)`
/// and compares the NTK gap with the lower and upper bounds.
pub fn converse_experiment(alpha: f64, horizon: f64, lip_dh: f64, r0: f64, integrator: &FlowConfig) -> Result<ConverseResult, BoundsError> {
    check_alpha(alpha)?;
    check_nonneg("R0", r0)?;
    let model = QuadraticConverseModel::for_horizon(horizon, lip_dh)?;
    let setup = TrainSetup::new(model, DVector::from_element(1, (2.0 * r0).sqrt()))?;
    let w0 = DVector::zeros(1);
    let cfg = FlowConfig {
        alpha,
        horizon,
        ..integrator.clone()
    };
    let full = gradient_flow(&setup, &w0, &cfg, None)?;
    let lin = linearized_flow(&setup, &w0, &cfg)?;
    let gap = ntk_gap(&full, &lin)?.final_gap;
    let k = kappa(horizon, alpha, lip_dh, r0)?;
    let lower = converse_lower_bound(k, r0);
    let upper = main_bound(k, r0);
    let diagnostics = trajectory_diagnostics(&full, &setup, lip_dh, f64::INFINITY, cfg.rtol, cfg.atol);
    Ok(ConverseResult {
        kappa: k,
        gap,
        lower_bound: lower,
        main_bound: upper,
        holds: gap >= lower - BOUND_SLACK,
        upper_holds: within_upper(gap, upper),
        trajectory: full,
        linearized: lin,
        diagnostics,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductIntegralCrossCheck {
    /// `|(P(T,0) - e^{-K0 T}) r0 - (r(T) - rbar(T))|`.
    pub discrepancy: f64,
    pub gap: f64,
    pub product_error_estimate: f64,
}

/// Rebuilds `r(T) - rbar(T)` from the recorded kernels `K_t = Dh(w(t)) Dh(w(t))^T`
/// via the time-ordered product. The trajectory must sit on a uniform grid of
/// `2^L + 1` points.
pub fn residual_product_integral_check<M: DifferentiableModel>(
    model: &M,
    traj: &Trajectory,
    traj_bar: &Trajectory,
) -> Result<ProductIntegralCrossCheck, BoundsError> {
    let factors: Vec<DMatrix<f64>> = traj.weights.iter().map(|w| model.derivative(w)).collect();
    let horizon = *traj.times.last().unwrap();
    let path = KernelPath::new(traj.times.clone(), factors, Interpolation::PiecewiseLinear)?;
    let prod = product_integral_sampled(&path, f64::INFINITY)?;
    let r0 = &traj.residuals[0];
    let predicted = (&prod.value - gram_exp(&path.factors()[0], horizon)) * r0;
    let measured = traj.final_residual() - traj_bar.final_residual();
    Ok(ProductIntegralCrossCheck {
        discrepancy: (predicted - &measured).norm(),
        gap: measured.norm(),
        product_error_estimate: prod.error_estimate,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParametrizationCheck {
    pub max_deviation: f64,
    pub holds: bool,
}

/// Tolerance of [`ntk_parametrization_identity`].
pub const PARAMETRIZATION_TOL: f64 = 1e-6;

/// Trains the NTK-parametrized network `sqrt(m) h` at `alpha = 1` and the
/// mean-field network at `alpha = sqrt(m)` from the same `w0` and target.
///
/// The flow's `1/alpha^2` prefactor makes the NTK run `m` times faster, so it
/// is recorded on `[0, T/m]` with the same number of points and compared
/// pointwise with the mean-field run on `[0, T]`. Deviation is the largest
/// output difference over the grid.
pub fn ntk_parametrization_identity(
    net: &TwoLayerNet,
    w0: &DVector<f64>,
    target: &DVector<f64>,
    horizon: f64,
    integrator: &FlowConfig,
) -> Result<ParametrizationCheck, BoundsError> {
    let m = net.width() as f64;
    let sqrt_m = m.sqrt();
    let mean_field = TrainSetup::new(net, target.clone())?;
    let ntk = TrainSetup::new(
        ScaledModel {
            inner: net,
            scale: sqrt_m,
        },
        target.clone(),
    )?;
    let mf_cfg = FlowConfig {
        alpha: sqrt_m,
        horizon,
        ..integrator.clone()
    };
    let ntk_cfg = FlowConfig {
        alpha: 1.0,
        horizon: horizon / m,
        ..integrator.clone()
    };
    let a = gradient_flow(&mean_field, w0, &mf_cfg, None)?;
    let b = gradient_flow(&ntk, w0, &ntk_cfg, None)?;
    let max_deviation = a.outputs.iter().zip(&b.outputs).map(|(x, y)| (x - y).norm()).fold(0.0, f64::max);
    Ok(ParametrizationCheck {
        max_deviation,
        holds: max_deviation <= PARAMETRIZATION_TOL,
    })
}

/// Least-squares slope of `ln y` against `ln x`.
pub fn log_log_slope(xs: &[f64], ys: &[f64]) -> Result<f64, BoundsError> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return Err(BoundsError::Input("need at least two paired points".into()));
    }
    if xs.iter().chain(ys).any(|&v| !(v > 0.0 && v.is_finite())) {
        return Err(BoundsError::Input("log-log fit needs positive finite values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxx: f64 = lx.iter().map(|x| (x - mx).powi(2)).sum();
    if sxx == 0.0 {
        return Err(BoundsError::Input("x values are all equal".into()));
    }
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    Ok(sxy / sxx)
}

#[derive(Debug, Clone)]
pub struct AlphaSweep {
    pub reports: Vec<BoundReport>,
    pub slope: f64,
    /// Largest `gap / min(T/alpha, 1)` over the sweep.
    pub max_lazy_ratio: f64,
}

/// Evaluates one network instance at each alpha (fixed `T`) and fits the gap's alpha exponent.
pub fn alpha_scaling(spec: &NetworkSpec, alphas: &[f64], horizon: f64, integrator: &FlowConfig) -> Result<AlphaSweep, BoundsError> {
    use rayon::prelude::*;
    let reports: Vec<BoundReport> = alphas
        .par_iter()
        .map(|&alpha| NetworkInstance::build(spec, alpha, horizon).map(|inst| inst.evaluate(integrator).report))
        .collect::<Result<_, _>>()?;
    if let Some(r) = reports.iter().find(|r| r.error.is_some()) {
        return Err(BoundsError::Input(format!("alpha = {}: {}", r.alpha, r.error.as_deref().unwrap_or(""))));
    }
    let gaps: Vec<f64> = reports.iter().map(|r| r.gap).collect();
    let slope = log_log_slope(alphas, &gaps)?;
    let max_lazy_ratio = reports.iter().map(|r| r.lazy_ratio).fold(0.0, f64::max);
    Ok(AlphaSweep {
        reports,
        slope,
        max_lazy_ratio,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::LinearModel;
    use approx::assert_relative_eq;

    #[test]
    fn formula_examples() {
        assert_eq!(kappa(0.0, 3.0, 1.0, 1.0).unwrap(), 0.0);
        assert_relative_eq!(kappa(4.0, 8.0, 0.5, 1.0).unwrap(), 0.25);
        assert_relative_eq!(kappa(8.0, 8.0, 0.5, 1.0).unwrap(), 2.0 * kappa(4.0, 8.0, 0.5, 1.0).unwrap());
        assert!(kappa(1.0, 0.0, 1.0, 1.0).is_err());

        assert_eq!(main_bound(0.0, 1.0), 0.0);
        assert_relative_eq!(main_bound(0.25, 1.0), 1.5);
        assert_relative_eq!(main_bound(10.0, 1.0), 8f64.sqrt(), epsilon = 1e-12);
        assert_relative_eq!(main_bound(10.0, 1.0), 2.82843, epsilon = 1e-5);

        assert_eq!(chizat_bound(0.0, 1.0, 0.25, 1.0), 0.0);
        assert_relative_eq!(chizat_bound(4.0, 1.0, 0.25, 1.0), 1.0);

        assert_eq!(three_halves_bound(0.0, 1.0, 0.5, 1.0, 8.0).unwrap(), 0.0);
        // (4/3) * 8 * 1 * 0.5 * 1 / 8
        assert_relative_eq!(three_halves_bound(4.0, 1.0, 0.5, 1.0, 8.0).unwrap(), 2.0 / 3.0, epsilon = 1e-15);
        let ratio = three_halves_bound(8.0, 1.0, 0.5, 1.0, 8.0).unwrap() / three_halves_bound(4.0, 1.0, 0.5, 1.0, 8.0).unwrap();
        assert_relative_eq!(ratio, 2.0 * 2f64.sqrt(), epsilon = 1e-14);
        assert!(three_halves_bound(1.0, 1.0, 1.0, 1.0, 0.0).is_err());
    }

    #[test]
    fn chizat_over_main_identity() {
        for &(t, lip_h, k, r0) in &[(4.0, 1.0, 0.25f64, 1.0f64), (2.0, 1.7, 0.1, 0.3), (7.5, 2.0, 0.01, 2.0)] {
            assert!(main_bound_is_kappa_branch(k, r0));
            let ratio = chizat_bound(t, lip_h, k, r0) / main_bound(k, r0);
            assert_relative_eq!(ratio, t * lip_h * lip_h / 6.0, max_relative = 1e-14);
        }
    }

    #[test]
    fn chizat_window() {
        assert!(chizat_valid(1.0, 2.0, 1.0, 1.0, 1.0));
        assert!(!chizat_valid(3.0, 2.0, 1.0, 1.0, 1.0));
        assert!(chizat_valid(1e9, 2.0, 1.0, 0.0, 1.0));
    }

    #[test]
    fn linear_instance_passes_trivially() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.0, 0.5]);
        let setup = TrainSetup::new(LinearModel::new(a), DVector::from_vec(vec![1.0, -1.0])).unwrap();
        let w0 = DVector::zeros(2);
        let params = InstanceParams::new(&setup, &w0, 2.0, 3.0, 0.0, LipSource::Exact, 1.0).unwrap();
        let run = evaluate_instance(&setup, &w0, &params, &FlowConfig::new(1.0, 1.0));
        let r = run.report;
        assert!(r.gap < 1e-9 && r.pass && r.pass_chizat && r.pass_three_halves);
        assert_eq!(r.kappa, 0.0);
        assert_relative_eq!(r.r0, 1.0);
    }

    #[test]
    fn converse_examples() {
        let cfg = FlowConfig::new(1.0, 1.0);
        let zero = converse_experiment(20.0, 4.0, 0.0, 0.5, &cfg).unwrap();
        assert!(zero.gap < 1e-12 && zero.lower_bound == 0.0 && zero.holds);

        let res = converse_experiment(20.0, 4.0, 1.0, 0.5, &cfg).unwrap();
        assert_relative_eq!(res.kappa, 0.14142, epsilon = 1e-5);
        assert_relative_eq!(res.kappa * 0.5f64.sqrt(), 0.1, epsilon = 1e-14);
        assert_relative_eq!(res.lower_bound, 0.02, epsilon = 1e-14);
        assert!(res.holds && res.upper_holds, "gap {}", res.gap);
        assert!(res.gap >= 0.02 && res.gap <= res.main_bound);
        assert!(res.diagnostics.weight_change_holds());
    }

    #[test]
    fn converse_horizon_inverts_kappa() {
        let t = converse_horizon(0.3, 20.0, 1.0, 0.5).unwrap();
        assert_relative_eq!(kappa(t, 20.0, 1.0, 0.5).unwrap(), 0.3, epsilon = 1e-14);
    }

    #[test]
    fn network_instance_fixture() {
        let spec = NetworkSpec::new(8, 2, 5, Activation::Sigmoid, 7);
        let inst = NetworkInstance::build(&spec, 10.0, 2.0).unwrap();
        assert!(inst.params.horizon <= inst.max_horizon());
        let run = inst.evaluate(&FlowConfig::new(1.0, 1.0));
        let r = &run.report;
        assert!(r.error.is_none());
        assert!(r.valid_main && r.pass_main && r.pass);
        assert!(r.gap < r.main_bound && r.gap > 0.0);
        assert!(r.weight_change_holds && r.diagnostics_pass);

        let twice = NetworkInstance::build(&spec, 20.0, 2.0).unwrap().evaluate(&FlowConfig::new(1.0, 1.0)).report;
        let ratio = twice.gap / r.gap;
        assert!((0.4..0.6).contains(&ratio), "ratio {ratio}");
    }

    #[test]
    fn gap_is_stable_under_tolerance_halving() {
        let spec = NetworkSpec::new(8, 2, 5, Activation::Sigmoid, 7);
        let inst = NetworkInstance::build(&spec, 10.0, 2.0).unwrap();
        let base = FlowConfig::new(1.0, 1.0);
        let a = inst.evaluate(&base).report.gap;
        let b = inst.evaluate(&base.clone().with_tolerances(base.rtol / 2.0, base.atol / 2.0)).report.gap;
        assert!((a - b).abs() <= 1e-6 * a, "{a} vs {b}");
    }

    #[test]
    fn product_integral_reproduces_gap() {
        let spec = NetworkSpec::new(4, 2, 3, Activation::Tanh, 5);
        let inst = NetworkInstance::build(&spec, 5.0, 2.0).unwrap();
        let run = inst.evaluate(&FlowConfig::new(1.0, 1.0).with_grid(257));
        let check = residual_product_integral_check(&inst.setup.model, run.trajectory.as_ref().unwrap(), run.linearized.as_ref().unwrap()).unwrap();
        assert!(check.discrepancy < 1e-6, "{check:?}");
        assert!(check.gap > 1e-4);
    }

    #[test]
    fn parametrizations_agree() {
        for &m in &[1usize, 4] {
            let net = TwoLayerNet::synthetic(m, 2, 3, Activation::Sigmoid, 3).unwrap();
            let w0 = two_layer_init(m, 2, 3);
            let check = ntk_parametrization_identity(&net, &w0, &net.target(), 2.0, &FlowConfig::new(1.0, 1.0)).unwrap();
            assert!(check.holds, "m = {m}: {}", check.max_deviation);
        }
    }

    #[test]
    fn slope_fit() {
        let xs = [1.0, 2.0, 4.0, 8.0];
        let ys: Vec<f64> = xs.iter().map(|x: &f64| 3.0 * x.powf(-1.0)).collect();
        assert_relative_eq!(log_log_slope(&xs, &ys).unwrap(), -1.0, epsilon = 1e-12);
        assert!(log_log_slope(&[1.0], &[1.0]).is_err());
        assert!(log_log_slope(&[1.0, 2.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn rejects_bad_parameters() {
        let setup = TrainSetup::new(LinearModel::identity(1), DVector::from_element(1, 1.0)).unwrap();
        let w0 = DVector::zeros(1);
        assert!(InstanceParams::new(&setup, &w0, 0.0, 1.0, 0.0, LipSource::Exact, 1.0).is_err());
        assert!(InstanceParams::new(&setup, &w0, 1.0, 1.0, 0.0, LipSource::Exact, 0.0).is_err());
        assert!(converse_experiment(1.0, 0.0, 1.0, 0.5, &FlowConfig::new(1.0, 1.0)).is_err());
    }
}
