//! Config-driven experiment runner behind the `lazyflow` binary.
//!
//! Exit codes: 0 when every row passes, 1 on a failed check or bound, 2 on a
//! configuration or I/O error, 3 on a numerical failure (integrator or
//! product-integral breakdown).

mod config;

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use rayon::prelude::*;
use serde::Serialize;
use thiserror::Error;

pub use config::{ExperimentConfig, Overrides, DEFAULT_SWEEP_ALPHAS};

use crate::bounds::{converse_experiment, converse_horizon, log_log_slope, BoundReport, NetworkInstance};
use crate::operator::suites::{run_suite, CheckRow, Suite};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_CHECK_FAILURE: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_NUMERICAL: i32 = 3;

/// Environment variable capping the worker pool size.
pub const THREADS_ENV: &str = "LAZYFLOW_THREADS";

#[derive(Debug, Error, Clone, PartialEq)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("numerical failure: {0}")]
    Numerical(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) | CliError::Io(_) => EXIT_CONFIG,
            CliError::Numerical(_) => EXIT_NUMERICAL,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Random suites for every operator inequality.
    /// Writes verify.csv: check_name, draw_index, lhs, rhs, margin, holds.
    Verify,
    /// Bound report for each (alpha, T) on a two-layer network.
    /// Writes train.csv: instance_id, alpha, T, kappa, R0, gap, main_bound,
    /// chizat_bound, three_halves_bound, trivial_bound, valid_main, valid_chizat, pass.
    Train,
    /// The (alpha, T) grid plus a log-log fit of gap against alpha for each T.
    /// Writes sweep.csv with the train.csv columns.
    Sweep,
    /// Quadratic lower-bound instances over the kappa grid.
    /// Writes converse.csv: instance_id, alpha, T, kappa, R0, gap, lower_bound,
    /// main_bound, holds, upper_holds, pass.
    Converse,
}

impl Command {
    pub fn name(self) -> &'static str {
        match self {
            Command::Verify => "verify",
            Command::Train => "train",
            Command::Sweep => "sweep",
            Command::Converse => "converse",
        }
    }
}

#[derive(Debug, Parser)]
#[command(name = "lazyflow", version, about = "Lazy-training gradient flows and NTK-gap bound checks")]
pub struct Cli {
    /// TOML config file (flat keys; flags take precedence).
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Master seed.
    #[arg(long, global = true, value_name = "N")]
    pub seed: Option<u64>,
    /// Output directory for the CSV artifact.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Print the fully resolved config and exit.
    #[arg(long, global = true)]
    pub print_config: bool,
    #[command(subcommand)]
    pub command: Command,
}

/// Result of one subcommand run.
#[derive(Debug, Clone, PartialEq)]
pub struct RunOutcome {
    pub csv: PathBuf,
    pub rows: usize,
    /// Human-readable descriptions of failing rows.
    pub failures: Vec<String>,
    pub numerical_failures: Vec<String>,
    pub summary: Vec<String>,
}

impl RunOutcome {
    pub fn exit_code(&self) -> i32 {
        if !self.numerical_failures.is_empty() {
            EXIT_NUMERICAL
        } else if !self.failures.is_empty() {
            EXIT_CHECK_FAILURE
        } else {
            EXIT_PASS
        }
    }
}

/// Parses arguments, runs, prints a summary; returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).try_init();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    let overrides = Overrides {
        seed: cli.seed,
        out: cli.out.clone(),
    };
    let cfg = match ExperimentConfig::load(cli.config.as_deref(), cli.command, &overrides) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("{e}");
            return e.exit_code();
        }
    };
    if cli.print_config {
        print!("{}", cfg.to_toml());
        return EXIT_PASS;
    }
    let result = thread_pool().and_then(|pool| match pool {
        Some(pool) => pool.install(|| run(cli.command, &cfg)),
        None => run(cli.command, &cfg),
    });
    match result {
        Ok(outcome) => {
            for line in &outcome.summary {
                println!("{line}");
            }
            for f in outcome.numerical_failures.iter().chain(&outcome.failures) {
                eprintln!("FAIL {f}");
            }
            println!("wrote {} rows to {}", outcome.rows, outcome.csv.display());
            outcome.exit_code()
        }
        Err(e) => {
            eprintln!("{e}");
            e.exit_code()
        }
    }
}

fn thread_pool() -> Result<Option<rayon::ThreadPool>, CliError> {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return Ok(None);
    };
    let n: usize = value
        .trim()
        .parse()
        .ok()
        .filter(|&n| n > 0)
        .ok_or_else(|| CliError::Config(format!("{THREADS_ENV} must be a positive integer, got `{value}`")))?;
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build()
        .map(Some)
        .map_err(|e| CliError::Config(e.to_string()))
}

pub fn run(command: Command, cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    match command {
        Command::Verify => run_verify(cfg),
        Command::Train => run_train(cfg, "train.csv"),
        Command::Sweep => run_sweep(cfg),
        Command::Converse => run_converse(cfg),
    }
}

/// Writes serializable rows to `dir/name` via a temporary file and rename.
pub fn write_csv_atomic<R: Serialize>(dir: &Path, name: &str, rows: &[R]) -> Result<PathBuf, CliError> {
    let io = |e: &dyn std::fmt::Display| CliError::Io(format!("{}: {e}", dir.join(name).display()));
    std::fs::create_dir_all(dir).map_err(|e| io(&e))?;
    let mut tmp = tempfile::NamedTempFile::new_in(dir).map_err(|e| io(&e))?;
    {
        let mut w = csv::Writer::from_writer(tmp.as_file_mut());
        for r in rows {
            w.serialize(r).map_err(|e| io(&e))?;
        }
        w.flush().map_err(|e| io(&e))?;
    }
    tmp.as_file_mut().flush().map_err(|e| io(&e))?;
    tmp.as_file().sync_all().map_err(|e| io(&e))?;
    let path = dir.join(name);
    tmp.persist(&path).map_err(|e| io(&e.error))?;
    Ok(path)
}

fn run_verify(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let opts = cfg.suite_options();
    let mut rows: Vec<CheckRow> = Vec::new();
    let mut summary = Vec::new();
    let mut numerical_failures = Vec::new();
    for suite in Suite::ALL {
        match run_suite(suite, &opts) {
            Ok(r) => {
                let violations = r.iter().filter(|c| !c.holds).count();
                let worst = r.iter().map(|c| c.margin).fold(f64::INFINITY, f64::min);
                summary.push(format!("{:<26} draws {:>5}  violations {:>3}  min margin {:.3e}", suite.name(), r.len(), violations, worst));
                rows.extend(r);
            }
            Err(e) => numerical_failures.push(format!("{}: {e}", suite.name())),
        }
    }
    let failures = rows
        .iter()
        .filter(|r| !r.holds)
        .map(|r| format!("{} draw {}: lhs {:e} > rhs {:e}", r.check_name, r.draw_index, r.lhs, r.rhs))
        .collect();
    let csv = write_csv_atomic(&cfg.out, "verify.csv", &rows)?;
    Ok(RunOutcome {
        csv,
        rows: rows.len(),
        failures,
        numerical_failures,
        summary,
    })
}

/// One row of train.csv / sweep.csv.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReportRow {
    pub instance_id: usize,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub kappa: f64,
    #[serde(rename = "R0")]
    pub r0: f64,
    pub gap: f64,
    pub main_bound: f64,
    pub chizat_bound: f64,
    pub three_halves_bound: f64,
    pub trivial_bound: f64,
    pub valid_main: bool,
    pub valid_chizat: bool,
    pub pass: bool,
}

impl ReportRow {
    fn new(instance_id: usize, r: &BoundReport) -> Self {
        Self {
            instance_id,
            alpha: r.alpha,
            horizon: r.horizon,
            kappa: r.kappa,
            r0: r.r0,
            gap: r.gap,
            main_bound: r.main_bound,
            chizat_bound: r.chizat_bound,
            three_halves_bound: r.three_halves_bound,
            trivial_bound: r.trivial_bound,
            valid_main: r.valid_main,
            valid_chizat: r.valid_chizat,
            pass: r.pass,
        }
    }
}

fn grid_reports(cfg: &ExperimentConfig) -> Result<Vec<BoundReport>, CliError> {
    let spec = cfg.network_spec();
    let integrator = cfg.integrator();
    let points: Vec<(f64, f64)> = cfg.alpha.iter().flat_map(|&a| cfg.horizon.iter().map(move |&t| (a, t))).collect();
    points
        .par_iter()
        .map(|&(alpha, horizon)| {
            let inst = NetworkInstance::build(&spec, alpha, horizon).map_err(|e| CliError::Config(e.to_string()))?;
            Ok(inst.evaluate(&integrator).report)
        })
        .collect()
}

fn report_failures(reports: &[BoundReport]) -> (Vec<String>, Vec<String>) {
    let mut failures = Vec::new();
    let mut numerical = Vec::new();
    for (i, r) in reports.iter().enumerate() {
        if let Some(e) = &r.error {
            numerical.push(format!("instance {i} (alpha {}, T {}): {e}", r.alpha, r.horizon));
        } else if !r.pass {
            failures.push(format!(
                "instance {i} (alpha {}, T {}): gap {:e}, main bound {:e}, trivial bound {:e}",
                r.alpha, r.horizon, r.gap, r.main_bound, r.trivial_bound
            ));
        }
    }
    (failures, numerical)
}

fn report_summary(reports: &[BoundReport]) -> Vec<String> {
    reports
        .iter()
        .enumerate()
        .map(|(i, r)| {
            format!(
                "#{i:<3} alpha {:<6} T {:<6} kappa {:.4e}  gap {:.4e}  main {:.4e}  gap/min(T/alpha,1) {:.4}  {}{}",
                r.alpha,
                r.horizon,
                r.kappa,
                r.gap,
                r.main_bound,
                r.lazy_ratio,
                if r.pass { "pass" } else { "FAIL" },
                if r.valid_main { "" } else { " (outside main-bound hypothesis)" },
            )
        })
        .collect()
}

fn run_train(cfg: &ExperimentConfig, name: &str) -> Result<RunOutcome, CliError> {
    let reports = grid_reports(cfg)?;
    let rows: Vec<ReportRow> = reports.iter().enumerate().map(|(i, r)| ReportRow::new(i, r)).collect();
    let (failures, numerical_failures) = report_failures(&reports);
    let csv = write_csv_atomic(&cfg.out, name, &rows)?;
    Ok(RunOutcome {
        csv,
        rows: rows.len(),
        failures,
        numerical_failures,
        summary: report_summary(&reports),
    })
}

fn run_sweep(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let reports = grid_reports(cfg)?;
    let rows: Vec<ReportRow> = reports.iter().enumerate().map(|(i, r)| ReportRow::new(i, r)).collect();
    let (mut failures, numerical_failures) = report_failures(&reports);
    let mut summary = report_summary(&reports);
    if numerical_failures.is_empty() {
        for &t in &cfg.horizon {
            let (alphas, gaps): (Vec<f64>, Vec<f64>) = reports.iter().filter(|r| r.horizon == t).map(|r| (r.alpha, r.gap)).unzip();
            let max_ratio = reports.iter().filter(|r| r.horizon == t).map(|r| r.lazy_ratio).fold(0.0, f64::max);
            match log_log_slope(&alphas, &gaps) {
                Ok(slope) => {
                    summary.push(format!(
                        "T {t}: log-log slope of gap vs alpha {slope:.4}; sup gap/min(T/alpha,1) {max_ratio:.4}"
                    ));
                    if !(cfg.slope_min..=cfg.slope_max).contains(&slope) {
                        failures.push(format!("T {t}: slope {slope:.4} outside [{}, {}]", cfg.slope_min, cfg.slope_max));
                    }
                }
                Err(e) => failures.push(format!("T {t}: slope fit failed: {e}")),
            }
        }
    }
    let csv = write_csv_atomic(&cfg.out, "sweep.csv", &rows)?;
    Ok(RunOutcome {
        csv,
        rows: rows.len(),
        failures,
        numerical_failures,
        summary,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ConverseRow {
    pub instance_id: usize,
    pub alpha: f64,
    #[serde(rename = "T")]
    pub horizon: f64,
    pub kappa: f64,
    #[serde(rename = "R0")]
    pub r0: f64,
    pub gap: f64,
    pub lower_bound: f64,
    pub main_bound: f64,
    pub holds: bool,
    pub upper_holds: bool,
    pub pass: bool,
}

fn run_converse(cfg: &ExperimentConfig) -> Result<RunOutcome, CliError> {
    let r0 = cfg.r0.expect("converse config carries r0");
    let integrator = cfg.integrator();
    let points: Vec<(f64, f64)> = cfg.alpha.iter().flat_map(|&a| cfg.kappa.iter().map(move |&k| (a, k))).collect();
    let results: Vec<Result<ConverseRow, String>> = points
        .par_iter()
        .enumerate()
        .map(|(i, &(alpha, k))| {
            let horizon = converse_horizon(k, alpha, cfg.lip_dh, r0).map_err(|e| e.to_string())?;
            let res = converse_experiment(alpha, horizon, cfg.lip_dh, r0, &integrator).map_err(|e| format!("kappa {k}: {e}"))?;
            Ok(ConverseRow {
                instance_id: i,
                alpha,
                horizon,
                kappa: k,
                r0: res.trajectory.losses[0],
                gap: res.gap,
                lower_bound: res.lower_bound,
                main_bound: res.main_bound,
                holds: res.holds,
                upper_holds: res.upper_holds,
                pass: res.holds && res.upper_holds && res.diagnostics.weight_change_holds(),
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut numerical_failures = Vec::new();
    for r in results {
        match r {
            Ok(row) => rows.push(row),
            Err(e) => numerical_failures.push(e),
        }
    }
    let failures = rows
        .iter()
        .filter(|r| !r.pass)
        .map(|r| format!("kappa {}: gap {:e}, lower {:e}, upper {:e}", r.kappa, r.gap, r.lower_bound, r.main_bound))
        .collect();
    let summary = rows
        .iter()
        .map(|r| {
            format!(
                "kappa {:<5} T {:<9.4} gap {:.5e}  in [{:.5e}, {:.5e}]  {}",
                r.kappa,
                r.horizon,
                r.gap,
                r.lower_bound,
                r.main_bound,
                if r.pass { "pass" } else { "FAIL" }
            )
        })
        .collect();
    let csv = write_csv_atomic(&cfg.out, "converse.csv", &rows)?;
    Ok(RunOutcome {
        csv,
        rows: rows.len(),
        failures,
        numerical_failures,
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn small_verify_run_passes_and_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("suite_size = 8\nmax_dim = 4\nout = {:?}", dir.path().display().to_string());
        let cfg = ExperimentConfig::parse(&text, Command::Verify).unwrap();
        let a = run(Command::Verify, &cfg).unwrap();
        assert_eq!(a.exit_code(), EXIT_PASS, "{:?}", a.failures);
        assert_eq!(a.rows, 8 * Suite::ALL.len());
        let first = std::fs::read(&a.csv).unwrap();
        let header = String::from_utf8(first.clone()).unwrap().lines().next().unwrap().to_string();
        assert_eq!(header, "check_name,draw_index,lhs,rhs,margin,holds");
        run(Command::Verify, &cfg).unwrap();
        assert_eq!(first, std::fs::read(&a.csv).unwrap());
    }

    #[test]
    fn train_csv_columns() {
        let dir = tempfile::tempdir().unwrap();
        let text = format!("alpha = [10.0]\nT = 1.0\ngrid_points = 17\nout = {:?}", dir.path().display().to_string());
        let cfg = ExperimentConfig::parse(&text, Command::Train).unwrap();
        let out = run(Command::Train, &cfg).unwrap();
        assert_eq!(out.exit_code(), EXIT_PASS);
        let text = std::fs::read_to_string(out.csv).unwrap();
        assert_eq!(
            text.lines().next().unwrap(),
            "instance_id,alpha,T,kappa,R0,gap,main_bound,chizat_bound,three_halves_bound,trivial_bound,valid_main,valid_chizat,pass"
        );
    }

    #[test]
    fn exit_code_precedence() {
        let mut o = RunOutcome {
            csv: PathBuf::new(),
            rows: 0,
            failures: vec![],
            numerical_failures: vec![],
            summary: vec![],
        };
        assert_eq!(o.exit_code(), 0);
        o.failures.push("x".into());
        assert_eq!(o.exit_code(), 1);
        o.numerical_failures.push("y".into());
        assert_eq!(o.exit_code(), 3);
        assert_eq!(CliError::Config(String::new()).exit_code(), 2);
    }

    #[test]
    fn parses_flags_after_subcommand() {
        let cli = Cli::try_parse_from(["lazyflow", "verify", "--seed", "3", "--print-config"]).unwrap();
        assert_eq!(cli.command, Command::Verify);
        assert_eq!(cli.seed, Some(3));
        assert!(cli.print_config);
    }
}
