use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{CliError, Command};
use crate::bounds::NetworkSpec;
use crate::flow::FlowConfig;
use crate::models::Activation;
use crate::operator::suites::SuiteOptions;
use crate::operator::DEFAULT_PRODUCT_TOL;

/// A scalar or a list in the config file.
#[derive(Debug, Clone, PartialEq, Deserialize)]
#[serde(untagged)]
enum OneOrMany {
    One(f64),
    Many(Vec<f64>),
}

impl OneOrMany {
    fn into_vec(self) -> Vec<f64> {
        match self {
            OneOrMany::One(v) => vec![v],
            OneOrMany::Many(v) => v,
        }
    }
}

/// The file as written; every key optional.
#[derive(Debug, Clone, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RawConfig {
    seed: Option<u64>,
    out: Option<PathBuf>,
    rtol: Option<f64>,
    atol: Option<f64>,
    max_steps: Option<usize>,
    grid_points: Option<usize>,
    suite_size: Option<usize>,
    max_dim: Option<usize>,
    product_tol: Option<f64>,
    model: Option<String>,
    width: Option<usize>,
    input_dim: Option<usize>,
    samples: Option<usize>,
    activation: Option<String>,
    data_seed: Option<u64>,
    init_seed: Option<u64>,
    ball_radius: Option<f64>,
    rho: Option<f64>,
    centered: Option<bool>,
    alpha: Option<OneOrMany>,
    #[serde(alias = "T")]
    horizon: Option<OneOrMany>,
    kappa: Option<OneOrMany>,
    lip_dh: Option<f64>,
    r0: Option<f64>,
    slope_min: Option<f64>,
    slope_max: Option<f64>,
}

/// Fully defaulted configuration. `--print-config` writes exactly these keys.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
    pub grid_points: usize,
    pub suite_size: usize,
    pub max_dim: usize,
    pub product_tol: f64,
    pub model: String,
    pub width: usize,
    pub input_dim: usize,
    pub samples: usize,
    pub activation: Activation,
    pub data_seed: u64,
    pub init_seed: u64,
    pub ball_radius: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub rho: Option<f64>,
    pub centered: bool,
    pub alpha: Vec<f64>,
    pub horizon: Vec<f64>,
    pub kappa: Vec<f64>,
    pub lip_dh: f64,
    /// Initial loss of the quadratic construction; `converse` only.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub r0: Option<f64>,
    pub slope_min: f64,
    pub slope_max: f64,
}

pub const DEFAULT_SWEEP_ALPHAS: [f64; 4] = [5.0, 10.0, 20.0, 40.0];

fn default_kappa_grid() -> Vec<f64> {
    (1..=20).map(|k| k as f64 / 20.0).collect()
}

fn bad(msg: impl Into<String>) -> CliError {
    CliError::Config(msg.into())
}

/// Command-line values that take precedence over the file.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

impl ExperimentConfig {
    /// Reads `path` (if any), applies `overrides` and resolves defaults for `command`.
    pub fn load(path: Option<&Path>, command: Command, overrides: &Overrides) -> Result<Self, CliError> {
        let text = match path {
            Some(p) => std::fs::read_to_string(p).map_err(|e| bad(format!("cannot read {}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::parse_with(&text, command, overrides)
    }

    pub fn parse(text: &str, command: Command) -> Result<Self, CliError> {
        Self::parse_with(text, command, &Overrides::default())
    }

    pub fn parse_with(text: &str, command: Command, overrides: &Overrides) -> Result<Self, CliError> {
        let mut raw: RawConfig = toml::from_str(text).map_err(|e| bad(e.message().to_string()))?;
        if let Some(seed) = overrides.seed {
            if raw.seed.is_some_and(|s| s != seed) {
                log::warn!("--seed {seed} overrides seed = {} from the config file", raw.seed.unwrap());
            }
            raw.seed = Some(seed);
        }
        if let Some(out) = &overrides.out {
            if raw.out.as_ref().is_some_and(|o| o != out) {
                log::warn!("--out {} overrides out = {} from the config file", out.display(), raw.out.as_ref().unwrap().display());
            }
            raw.out = Some(out.clone());
        }
        Self::resolve(raw, command)
    }

    fn resolve(raw: RawConfig, command: Command) -> Result<Self, CliError> {
        let seed = raw.seed.unwrap_or(0);
        let activation: Activation = match raw.activation {
            Some(name) => name.parse().map_err(|e: crate::models::ModelError| bad(e.to_string()))?,
            None => Activation::Sigmoid,
        };
        let alpha = match (raw.alpha, command) {
            (Some(a), _) => a.into_vec(),
            (None, Command::Train) => return Err(bad("alpha required")),
            (None, Command::Sweep) => DEFAULT_SWEEP_ALPHAS.to_vec(),
            (None, Command::Converse) => vec![20.0],
            (None, Command::Verify) => Vec::new(),
        };
        let horizon = match (raw.horizon, command) {
            (Some(t), _) => t.into_vec(),
            (None, Command::Train | Command::Sweep) => vec![2.0],
            (None, _) => Vec::new(),
        };
        let r0 = match (raw.r0, command) {
            (r, Command::Converse) => Some(r.unwrap_or(0.5)),
            (Some(_), _) => return Err(bad("r0 cannot be supplied: R0 is recomputed from the model, w0, target and alpha")),
            (None, _) => None,
        };
        let cfg = Self {
            seed,
            out: raw.out.unwrap_or_else(|| PathBuf::from("out")),
            rtol: raw.rtol.unwrap_or(FlowConfig::DEFAULT_RTOL),
            atol: raw.atol.unwrap_or(FlowConfig::DEFAULT_ATOL),
            max_steps: raw.max_steps.unwrap_or(FlowConfig::DEFAULT_MAX_STEPS),
            grid_points: raw.grid_points.unwrap_or(FlowConfig::DEFAULT_GRID_POINTS),
            suite_size: raw.suite_size.unwrap_or(1000),
            max_dim: raw.max_dim.unwrap_or(8),
            product_tol: raw.product_tol.unwrap_or(DEFAULT_PRODUCT_TOL),
            model: raw.model.unwrap_or_else(|| "two_layer".into()),
            width: raw.width.unwrap_or(8),
            input_dim: raw.input_dim.unwrap_or(2),
            samples: raw.samples.unwrap_or(5),
            activation,
            data_seed: raw.data_seed.unwrap_or(seed),
            init_seed: raw.init_seed.unwrap_or(seed),
            ball_radius: raw.ball_radius.unwrap_or(NetworkSpec::DEFAULT_BALL_RADIUS),
            rho: raw.rho,
            centered: raw.centered.unwrap_or(true),
            alpha,
            horizon,
            kappa: raw.kappa.map(OneOrMany::into_vec).unwrap_or_else(default_kappa_grid),
            lip_dh: raw.lip_dh.unwrap_or(1.0),
            r0,
            slope_min: raw.slope_min.unwrap_or(-1.15),
            slope_max: raw.slope_max.unwrap_or(-0.85),
        };
        cfg.validate(command)?;
        Ok(cfg)
    }

    fn validate(&self, command: Command) -> Result<(), CliError> {
        let positive = |name: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(bad(format!("{name} must be positive and finite, got {v}")))
            }
        };
        positive("rtol", self.rtol)?;
        positive("atol", self.atol)?;
        positive("product_tol", self.product_tol)?;
        if self.grid_points < 2 {
            return Err(bad("grid_points must be at least 2"));
        }
        if self.max_steps == 0 {
            return Err(bad("max_steps must be positive"));
        }
        match command {
            Command::Verify => {
                if self.suite_size == 0 || self.max_dim == 0 {
                    return Err(bad("suite_size and max_dim must be positive"));
                }
            }
            Command::Train | Command::Sweep => {
                if self.model != "two_layer" {
                    return Err(bad(format!("unsupported model `{}`; supported: two_layer", self.model)));
                }
                if self.width == 0 || self.input_dim == 0 || self.samples == 0 {
                    return Err(bad("width, input_dim and samples must be positive"));
                }
                positive("ball_radius", self.ball_radius)?;
                if let Some(rho) = self.rho {
                    positive("rho", rho)?;
                }
                if self.alpha.is_empty() {
                    return Err(bad("alpha required"));
                }
                if self.horizon.is_empty() {
                    return Err(bad("horizon (T) required"));
                }
                for &a in &self.alpha {
                    positive("alpha", a)?;
                }
                for &t in &self.horizon {
                    if !(t >= 0.0 && t.is_finite()) {
                        return Err(bad(format!("T must be finite and nonnegative, got {t}")));
                    }
                }
                if command == Command::Sweep && self.alpha.len() < 2 {
                    return Err(bad("sweep needs at least two alpha values"));
                }
            }
            Command::Converse => {
                for &a in &self.alpha {
                    positive("alpha", a)?;
                }
                if self.alpha.is_empty() || self.kappa.is_empty() {
                    return Err(bad("converse needs alpha and kappa values"));
                }
                for &k in &self.kappa {
                    if !(k > 0.0 && k <= 1.0) {
                        return Err(bad(format!("kappa must lie in (0, 1], got {k}")));
                    }
                }
                positive("lip_dh", self.lip_dh)?;
                positive("r0", self.r0.unwrap_or(0.0))?;
            }
        }
        Ok(())
    }

    /// TOML with every resolved key.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config serializes")
    }

    pub fn integrator(&self) -> FlowConfig {
        FlowConfig {
            alpha: 1.0,
            horizon: 1.0,
            rtol: self.rtol,
            atol: self.atol,
            max_steps: self.max_steps,
            grid_points: self.grid_points,
        }
    }

    pub fn network_spec(&self) -> NetworkSpec {
        NetworkSpec {
            width: self.width,
            input_dim: self.input_dim,
            samples: self.samples,
            activation: self.activation,
            data_seed: self.data_seed,
            init_seed: self.init_seed,
            ball_radius: self.ball_radius,
            rho: self.rho,
            centered: self.centered,
        }
    }

    pub fn suite_options(&self) -> SuiteOptions {
        SuiteOptions {
            draws: self.suite_size,
            seed: self.seed,
            max_dim: self.max_dim,
            product_tol: self.product_tol,
        }
    }
}
