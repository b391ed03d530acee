//! Rescaled gradient flow `dw/dt = (1/alpha) Dh(w)^T (y* - alpha h(w))`, its
//! linearization around `w0`, and per-trajectory diagnostics.

pub mod dopri;

use std::io::Write;
use std::path::Path;

use log::warn;
use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::models::{linearize, DifferentiableModel, Linearization, ModelError};
use crate::operator::{spectral_norm, CheckResult, PsdSpectrum};
use dopri::{Dopri5, IntegrationFailure, StepControl};

#[derive(Debug, Error, Clone)]
pub enum FlowError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error("invalid flow configuration: {0}")]
    Config(String),
    #[error("integrator gave up at t = {t_reached} after {steps} steps")]
    NonConvergence {
        steps: usize,
        t_reached: f64,
        partial: Box<Trajectory>,
    },
    #[error("non-finite state at t = {t}")]
    NonFinite { t: f64, partial: Box<Trajectory> },
    #[error("trajectories are recorded on different grids")]
    GridMismatch,
    #[error("csv output failed: {0}")]
    Io(String),
}

#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct FlowConfig {
    pub alpha: f64,
    pub horizon: f64,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub grid_points: usize,
}

impl FlowConfig {
    pub const DEFAULT_RTOL: f64 = 1e-9;
    pub const DEFAULT_ATOL: f64 = 1e-12;
    pub const DEFAULT_MAX_STEPS: usize = 200_000;
    pub const DEFAULT_GRID_POINTS: usize = 129;

    pub fn new(alpha: f64, horizon: f64) -> Self {
        Self {
            alpha,
            horizon,
            rtol: Self::DEFAULT_RTOL,
            atol: Self::DEFAULT_ATOL,
            max_steps: Self::DEFAULT_MAX_STEPS,
            grid_points: Self::DEFAULT_GRID_POINTS,
        }
    }

    pub fn with_grid(mut self, points: usize) -> Self {
        self.grid_points = points;
        self
    }

    pub fn with_tolerances(mut self, rtol: f64, atol: f64) -> Self {
        self.rtol = rtol;
        self.atol = atol;
        self
    }

    pub fn validate(&self) -> Result<(), FlowError> {
        if !(self.alpha.is_finite() && self.alpha > 0.0) {
            return Err(FlowError::Config(format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.horizon.is_finite() && self.horizon >= 0.0) {
            return Err(FlowError::Config(format!("T must be finite and nonnegative, got {}", self.horizon)));
        }
        if !(self.rtol > 0.0 && self.atol > 0.0) {
            return Err(FlowError::Config("integrator tolerances must be positive".into()));
        }
        if self.grid_points < 2 {
            return Err(FlowError::Config("recording grid needs at least 2 points".into()));
        }
        Ok(())
    }

    /// Uniform recording grid on `[0, T]`.
    pub fn grid(&self) -> Vec<f64> {
        let k = self.grid_points - 1;
        (0..=k)
            .map(|i| if i == k { self.horizon } else { self.horizon * i as f64 / k as f64 })
            .collect()
    }

    fn control(&self) -> StepControl {
        StepControl {
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
        }
    }
}

/// A model with its square-loss target `y*`.
#[derive(Debug, Clone)]
pub struct TrainSetup<M> {
    pub model: M,
    pub target: DVector<f64>,
}

impl<M: DifferentiableModel> TrainSetup<M> {
    pub fn new(model: M, target: DVector<f64>) -> Result<Self, FlowError> {
        if target.len() != model.output_dim() {
            return Err(FlowError::Config(format!(
                "target has {} entries but the model outputs {}",
                target.len(),
                model.output_dim()
            )));
        }
        Ok(Self { model, target })
    }

    pub fn residual(&self, alpha: f64, w: &DVector<f64>) -> DVector<f64> {
        &self.target - self.model.value(w) * alpha
    }

    /// `R0 = R(alpha h(w0))`.
    pub fn initial_loss(&self, alpha: f64, w0: &DVector<f64>) -> Result<f64, FlowError> {
        self.check_weights(w0)?;
        Ok(0.5 * self.residual(alpha, w0).norm_squared())
    }

    fn check_weights(&self, w0: &DVector<f64>) -> Result<(), FlowError> {
        if w0.len() != self.model.param_dim() {
            return Err(ModelError::DimensionMismatch {
                expected: self.model.param_dim(),
                got: w0.len(),
            }
            .into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub alpha: f64,
    pub times: Vec<f64>,
    pub weights: Vec<DVector<f64>>,
    /// `alpha h(w(t_k))`.
    pub outputs: Vec<DVector<f64>>,
    pub residuals: Vec<DVector<f64>>,
    pub losses: Vec<f64>,
    /// Running integral of `|dw/dt|`.
    pub path_length: Vec<f64>,
}

impl Trajectory {
    fn empty(alpha: f64) -> Self {
        Self {
            alpha,
            times: Vec::new(),
            weights: Vec::new(),
            outputs: Vec::new(),
            residuals: Vec::new(),
            losses: Vec::new(),
            path_length: Vec::new(),
        }
    }

    fn push(&mut self, t: f64, w: DVector<f64>, output: DVector<f64>, residual: DVector<f64>, length: f64) {
        self.times.push(t);
        self.losses.push(0.5 * residual.norm_squared());
        self.weights.push(w);
        self.outputs.push(output);
        self.residuals.push(residual);
        self.path_length.push(length);
    }

    pub fn len(&self) -> usize {
        self.times.len()
    }
    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    pub fn final_residual(&self) -> &DVector<f64> {
        self.residuals.last().expect("non-empty trajectory")
    }
    pub fn final_weights(&self) -> &DVector<f64> {
        self.weights.last().expect("non-empty trajectory")
    }

    /// `|w(t_k) - w(0)|` along the grid.
    pub fn weight_distances(&self) -> Vec<f64> {
        let w0 = &self.weights[0];
        self.weights.iter().map(|w| (w - w0).norm()).collect()
    }
}

/// Whether `T <= alpha^2 rho^2 / R0` (hypothesis of the main upper bound).
pub fn within_main_window(alpha: f64, horizon: f64, rho: f64, r0: f64) -> bool {
    r0 == 0.0 || horizon <= alpha * alpha * rho * rho / r0
}

/// Integrates the rescaled gradient flow, recording on `cfg.grid()`.
///
/// Pass `rho` to get a warning when `T` lies outside the window
/// `T <= alpha^2 rho^2 / R0`.
pub fn gradient_flow<M: DifferentiableModel>(
    setup: &TrainSetup<M>,
    w0: &DVector<f64>,
    cfg: &FlowConfig,
    rho: Option<f64>,
) -> Result<Trajectory, FlowError> {
    cfg.validate()?;
    setup.check_weights(w0)?;
    let alpha = cfg.alpha;
    let r0 = setup.initial_loss(alpha, w0)?;
    if let Some(rho) = rho {
        if !within_main_window(alpha, cfg.horizon, rho, r0) {
            warn!(
                "T = {} exceeds alpha^2 rho^2 / R0 = {}; the run is outside the upper-bound hypothesis",
                cfg.horizon,
                alpha * alpha * rho * rho / r0
            );
        }
    }
    let p = w0.len();
    let rhs = |_t: f64, y: &DVector<f64>| {
        let w = y.rows(0, p).into_owned();
        let (h, dh) = setup.model.value_and_derivative(&w);
        let r = &setup.target - h * alpha;
        let wdot = dh.tr_mul(&r) / alpha;
        let speed = wdot.norm();
        let mut out = DVector::zeros(p + 1);
        out.rows_mut(0, p).copy_from(&wdot);
        out[p] = speed;
        out
    };
    let mut y0 = DVector::zeros(p + 1);
    y0.rows_mut(0, p).copy_from(w0);
    let mut ode = Dopri5::new(rhs, 0.0, y0, cfg.control());
    let mut traj = Trajectory::empty(alpha);
    let record = |traj: &mut Trajectory, t: f64, y: &DVector<f64>| {
        let w = y.rows(0, p).into_owned();
        let out = setup.model.value(&w) * alpha;
        let r = &setup.target - &out;
        traj.push(t, w, out, r, y[p]);
    };
    for t in cfg.grid() {
        match ode.advance_to(t) {
            Ok(()) => record(&mut traj, t, ode.state()),
            Err(IntegrationFailure::StepLimit { t, steps }) => {
                return Err(FlowError::NonConvergence {
                    steps,
                    t_reached: t,
                    partial: Box::new(traj),
                })
            }
            Err(IntegrationFailure::StepUnderflow { t }) => {
                return Err(FlowError::NonConvergence {
                    steps: ode.stats.accepted + ode.stats.rejected,
                    t_reached: t,
                    partial: Box::new(traj),
                })
            }
            Err(IntegrationFailure::NonFinite { t }) => return Err(FlowError::NonFinite { t, partial: Box::new(traj) }),
        }
    }
    Ok(traj)
}

/// `int_0^t e^{-lambda s} ds`.
fn phi(lambda: f64, t: f64) -> f64 {
    if lambda == 0.0 {
        t
    } else {
        -(-lambda * t).exp_m1() / lambda
    }
}

/// Closed-form training of the linearization at `w0`: with `K0 = V diag(lambda) V^T`,
/// `r(t) = V e^{-lambda t} V^T r0` and
/// `w(t) = w0 + (1/alpha) Dh(w0)^T V diag(phi(lambda, t)) V^T r0`.
/// Only the running path length is integrated numerically.
pub fn linearized_flow<M: DifferentiableModel>(setup: &TrainSetup<M>, w0: &DVector<f64>, cfg: &FlowConfig) -> Result<Trajectory, FlowError> {
    cfg.validate()?;
    setup.check_weights(w0)?;
    let lin = linearize(&setup.model, w0)?;
    let alpha = cfg.alpha;
    let closed = LinearizedSolution::new(&lin, &setup.target, alpha);
    let speed = |t: f64| closed.velocity(t).norm();
    let mut ode = Dopri5::new(|t, _: &DVector<f64>| DVector::from_element(1, speed(t)), 0.0, DVector::zeros(1), cfg.control());
    let mut traj = Trajectory::empty(alpha);
    for t in cfg.grid() {
        if let Err(e) = ode.advance_to(t) {
            let (steps, t_reached) = match e {
                IntegrationFailure::StepLimit { t, steps } => (steps, t),
                IntegrationFailure::StepUnderflow { t } | IntegrationFailure::NonFinite { t } => (ode.stats.accepted, t),
            };
            return Err(FlowError::NonConvergence {
                steps,
                t_reached,
                partial: Box::new(traj),
            });
        }
        let w = closed.weights(t);
        let out = lin.value(&w) * alpha;
        traj.push(t, w, out, closed.residual(t), ode.state()[0]);
    }
    Ok(traj)
}

/// Eigen-coordinates of the linearized dynamics.
#[derive(Debug, Clone)]
pub struct LinearizedSolution {
    spectrum: PsdSpectrum,
    r0: DVector<f64>,
    /// `V^T r0`.
    coords: DVector<f64>,
    jacobian: DMatrix<f64>,
    base: DVector<f64>,
    alpha: f64,
}

impl LinearizedSolution {
    pub fn new(lin: &Linearization, target: &DVector<f64>, alpha: f64) -> Self {
        let r0 = target - &lin.anchor_value * alpha;
        let spectrum = PsdSpectrum::of_gram(&lin.anchor_jacobian);
        let coords = spectrum.eigenvectors.tr_mul(&r0);
        Self {
            spectrum,
            r0,
            coords,
            jacobian: lin.anchor_jacobian.clone(),
            base: lin.base.clone(),
            alpha,
        }
    }

    fn in_basis(&self, f: impl Fn(f64) -> f64) -> DVector<f64> {
        let scaled = DVector::from_iterator(
            self.coords.len(),
            self.coords.iter().zip(&self.spectrum.eigenvalues).map(|(c, &lam)| c * f(lam)),
        );
        &self.spectrum.eigenvectors * scaled
    }

    pub fn residual(&self, t: f64) -> DVector<f64> {
        if t == 0.0 {
            return self.r0.clone();
        }
        self.in_basis(|lam| (-lam * t).exp())
    }

    pub fn weights(&self, t: f64) -> DVector<f64> {
        if t == 0.0 {
            return self.base.clone();
        }
        &self.base + self.jacobian.tr_mul(&self.in_basis(|lam| phi(lam, t))) / self.alpha
    }

    pub fn velocity(&self, t: f64) -> DVector<f64> {
        self.jacobian.tr_mul(&self.residual(t)) / self.alpha
    }

    /// `-K0 r(t)`, the right-hand side of the residual ODE.
    pub fn residual_rate(&self, t: f64) -> DVector<f64> {
        -self.in_basis(|lam| lam * (-lam * t).exp())
    }

    pub fn kernel(&self) -> DMatrix<f64> {
        &self.jacobian * self.jacobian.transpose()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NtkGap {
    pub series: Vec<f64>,
    pub final_gap: f64,
}

/// `|r(t_k) - rbar(t_k)|` on a shared grid.
pub fn ntk_gap(traj: &Trajectory, traj_bar: &Trajectory) -> Result<NtkGap, FlowError> {
    if traj.times.len() != traj_bar.times.len()
        || traj.times.is_empty()
        || traj
            .times
            .iter()
            .zip(&traj_bar.times)
            .any(|(a, b)| (a - b).abs() > 1e-12 * a.abs().max(1.0))
    {
        return Err(FlowError::GridMismatch);
    }
    if traj.residuals[0].len() != traj_bar.residuals[0].len() {
        return Err(FlowError::GridMismatch);
    }
    let series: Vec<f64> = traj.residuals.iter().zip(&traj_bar.residuals).map(|(r, rb)| (r - rb).norm()).collect();
    Ok(NtkGap {
        final_gap: *series.last().unwrap(),
        series,
    })
}

/// Slack used when comparing integrated quantities against their bounds.
pub const DIAGNOSTIC_SLACK: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticRow {
    pub t: f64,
    /// `|w(t) - w0| <= sqrt(t R0) / alpha`.
    pub weight_change: CheckResult,
    /// Path length against the same bound.
    pub path_length: CheckResult,
    /// `|w(t) - w0| <= rho`.
    pub ball: CheckResult,
    /// `|Dh(w(t)) - Dh(w0)| <= Lip(Dh) sqrt(t R0) / alpha`.
    pub jacobian: CheckResult,
    /// `|K_t| <= 3 |Dh(w0)|^2 + 2 Lip(Dh)^2 t R0 / alpha^2`.
    pub kernel: CheckResult,
    pub loss_monotone: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Diagnostics {
    pub rows: Vec<DiagnosticRow>,
    pub r0: f64,
    pub pass: bool,
}

impl Diagnostics {
    pub fn weight_change_holds(&self) -> bool {
        self.rows.iter().all(|r| r.weight_change.holds && r.path_length.holds)
    }
    pub fn loss_monotone(&self) -> bool {
        self.rows.iter().all(|r| r.loss_monotone)
    }
    pub fn in_ball(&self) -> bool {
        self.rows.iter().all(|r| r.ball.holds)
    }
}

/// Checks the weight-change, ball, Jacobian-closeness, kernel-norm and loss-monotonicity
/// properties at every grid time. `rtol`/`atol` are the integrator tolerances
/// and set the monotonicity slack.
pub fn trajectory_diagnostics<M: DifferentiableModel>(
    traj: &Trajectory,
    setup: &TrainSetup<M>,
    lip_dh: f64,
    rho: f64,
    rtol: f64,
    atol: f64,
) -> Diagnostics {
    let alpha = traj.alpha;
    let r0 = traj.losses[0];
    let w0 = &traj.weights[0];
    let dh0 = setup.model.derivative(w0);
    let dh0_norm = spectral_norm(&dh0);
    let mut rows = Vec::with_capacity(traj.len());
    for k in 0..traj.len() {
        let t = traj.times[k];
        let dist = (&traj.weights[k] - w0).norm();
        let movement = (t * r0).sqrt() / alpha;
        let dh = setup.model.derivative(&traj.weights[k]);
        let kernel_norm = spectral_norm(&dh).powi(2);
        let loss_monotone = k == 0 || {
            let prev = traj.losses[k - 1];
            traj.losses[k] <= prev + 10.0 * (rtol * prev + atol)
        };
        rows.push(DiagnosticRow {
            t,
            weight_change: CheckResult::with_slack(dist, movement, DIAGNOSTIC_SLACK),
            path_length: CheckResult::with_slack(traj.path_length[k], movement, DIAGNOSTIC_SLACK),
            ball: CheckResult::with_slack(dist, rho, DIAGNOSTIC_SLACK),
            jacobian: CheckResult::with_slack(spectral_norm(&(dh - &dh0)), lip_dh * movement, DIAGNOSTIC_SLACK),
            kernel: CheckResult::with_slack(
                kernel_norm,
                3.0 * dh0_norm * dh0_norm + 2.0 * lip_dh * lip_dh * t * r0 / (alpha * alpha),
                DIAGNOSTIC_SLACK,
            ),
            loss_monotone,
        });
    }
    let pass = rows.iter().all(|r| {
        r.weight_change.holds && r.path_length.holds && r.ball.holds && r.jacobian.holds && r.kernel.holds && r.loss_monotone
    });
    Diagnostics { rows, r0, pass }
}

/// Writes `t, loss, residual_norm, weight_dist[, gap]`, atomically.
pub fn write_trajectory_csv(path: &Path, traj: &Trajectory, gap: Option<&NtkGap>) -> Result<(), FlowError> {
    let io = |e: &dyn std::fmt::Display| FlowError::Io(e.to_string());
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(&e))?;
    {
        let mut w = csv::Writer::from_writer(tmp.as_file_mut());
        let mut header = vec!["t", "loss", "residual_norm", "weight_dist"];
        if gap.is_some() {
            header.push("gap");
        }
        w.write_record(&header).map_err(|e| io(&e))?;
        let dists = traj.weight_distances();
        for k in 0..traj.len() {
            let mut rec = vec![
                traj.times[k].to_string(),
                traj.losses[k].to_string(),
                traj.residuals[k].norm().to_string(),
                dists[k].to_string(),
            ];
            if let Some(g) = gap {
                rec.push(g.series[k].to_string());
            }
            w.write_record(&rec).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))?;
    }
    tmp.as_file_mut().flush().map_err(|e| io(&e))?;
    tmp.persist(path).map_err(|e| io(&e))?;
    Ok(())
}
