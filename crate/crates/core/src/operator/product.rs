use nalgebra::DMatrix;

use super::{gram_exp, spectral_norm, KernelPath, OperatorError};

pub const DEFAULT_PRODUCT_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_FACTORS: usize = 1 << 20;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProductIntegralOptions {
    /// Stop once successive refinement levels differ by less than this in spectral norm.
    pub tol: f64,
    /// Cap on the number of exponential factors in the finest product.
    pub max_factors: usize,
}

impl Default for ProductIntegralOptions {
    fn default() -> Self {
        Self {
            tol: DEFAULT_PRODUCT_TOL,
            max_factors: DEFAULT_MAX_FACTORS,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProductIntegralResult {
    /// Time-evolution operator `P(y, x)`.
    pub value: DMatrix<f64>,
    /// Number of exponential factors in the finest product used.
    pub refinement: usize,
    /// Spectral-norm change between the last two refinement levels.
    pub error_estimate: f64,
}

/// `e^{-delta K_{s_m}} ... e^{-delta K_{s_1}}` with `s_j = x + (y - x) j / m`:
/// the uniform right-endpoint product, latest factor leftmost.
pub fn riemann_product(path: &KernelPath, x: f64, y: f64, factors: usize) -> Result<DMatrix<f64>, OperatorError> {
    check_interval(path, x, y)?;
    if factors == 0 {
        return Err(OperatorError::InvalidArgument("need at least one factor".into()));
    }
    let n = path.shape().0;
    let delta = (y - x) / factors as f64;
    let mut acc = DMatrix::identity(n, n);
    for j in 1..=factors {
        let s = x + (y - x) * (j as f64 / factors as f64);
        acc = gram_exp(&path.factor_at(s), delta) * acc;
    }
    Ok(acc)
}

fn check_interval(path: &KernelPath, x: f64, y: f64) -> Result<(), OperatorError> {
    if !(x.is_finite() && y.is_finite()) || !path.contains(x, y) {
        return Err(OperatorError::InvalidArgument(format!(
            "interval [{x}, {y}] not inside path domain [{}, {}]",
            path.start(),
            path.end()
        )));
    }
    Ok(())
}

/// Right-endpoint product with every piece between consecutive breakpoints
/// split into `per_piece` equal steps.
fn aligned_product(path: &KernelPath, breaks: &[f64], per_piece: usize) -> DMatrix<f64> {
    let n = path.shape().0;
    let mut acc = DMatrix::identity(n, n);
    for w in breaks.windows(2) {
        let (lo, hi) = (w[0], w[1]);
        let delta = (hi - lo) / per_piece as f64;
        for j in 1..=per_piece {
            let s = if j == per_piece { hi } else { lo + (hi - lo) * (j as f64 / per_piece as f64) };
            acc = gram_exp(&path.factor_at(s), delta) * acc;
        }
    }
    acc
}

/// Highest extrapolation column; coarser levels sit outside the asymptotic
/// regime and would only amplify noise.
const ROMBERG_MAX_ORDER: usize = 4;

/// Romberg extrapolation over a sequence of first-order products at step
/// ratio 2. Returns the extrapolant of the newest level.
fn romberg_push(table: &mut Vec<Vec<DMatrix<f64>>>, raw: DMatrix<f64>) -> DMatrix<f64> {
    let k = table.len();
    let order = k.min(ROMBERG_MAX_ORDER);
    let mut row = vec![raw];
    for j in 1..=order {
        let factor = (1u64 << j) as f64 - 1.0;
        let next = &row[j - 1] + (&row[j - 1] - &table[k - 1][j - 1]) / factor;
        row.push(next);
    }
    let best = row[order].clone();
    table.push(row);
    best
}

pub fn product_integral(path: &KernelPath, x: f64, y: f64, tol: f64) -> Result<ProductIntegralResult, OperatorError> {
    product_integral_with(path, x, y, &ProductIntegralOptions { tol, ..Default::default() })
}

/// Product integral `P(y, x)` of `e^{-K_s ds}` with `K_s = A_s A_s^T`.
///
/// Each piece between grid breakpoints is refined by doubling; the sequence
/// of right-endpoint products is Romberg-extrapolated and refinement stops
/// once successive extrapolants agree to `tol`. Left-continuous step paths
/// are integrated exactly at the first level.
pub fn product_integral_with(path: &KernelPath, x: f64, y: f64, opts: &ProductIntegralOptions) -> Result<ProductIntegralResult, OperatorError> {
    check_interval(path, x, y)?;
    let n = path.shape().0;
    if y == x {
        return Ok(ProductIntegralResult {
            value: DMatrix::identity(n, n),
            refinement: 0,
            error_estimate: 0.0,
        });
    }
    let breaks = path.breakpoints(x, y);
    let pieces = breaks.len() - 1;
    let mut table: Vec<Vec<DMatrix<f64>>> = Vec::new();
    let mut prev = romberg_push(&mut table, aligned_product(path, &breaks, 1));
    let mut per_piece = 1usize;
    let mut last_change = f64::INFINITY;
    while pieces * per_piece * 2 <= opts.max_factors.max(2 * pieces) {
        per_piece *= 2;
        let diag = romberg_push(&mut table, aligned_product(path, &breaks, per_piece));
        last_change = spectral_norm(&(&diag - &prev));
        prev = diag;
        if last_change < opts.tol {
            return Ok(ProductIntegralResult {
                value: prev,
                refinement: pieces * per_piece,
                error_estimate: last_change,
            });
        }
    }
    Err(OperatorError::RefinementExhausted {
        factors: pieces * per_piece,
        last_change,
        best: Box::new(prev),
    })
}

/// Product integral of a path sampled on a uniform grid of `2^L + 1` points,
/// using only the stored samples: level `k` is the right-endpoint product over
/// every `2^{L-k}`-th grid point, Romberg-extrapolated across levels.
pub fn product_integral_sampled(path: &KernelPath, tol: f64) -> Result<ProductIntegralResult, OperatorError> {
    let times = path.times();
    let intervals = times.len() - 1;
    let n = path.shape().0;
    if intervals == 0 {
        return Ok(ProductIntegralResult {
            value: DMatrix::identity(n, n),
            refinement: 0,
            error_estimate: 0.0,
        });
    }
    if !intervals.is_power_of_two() {
        return Err(OperatorError::InvalidArgument(format!(
            "sampled product integral needs 2^L + 1 grid points, got {}",
            times.len()
        )));
    }
    let span = path.end() - path.start();
    let h = span / intervals as f64;
    if times.iter().enumerate().any(|(i, &t)| (t - (path.start() + h * i as f64)).abs() > 1e-9 * span.max(1.0)) {
        return Err(OperatorError::InvalidArgument("sampled product integral needs a uniform grid".into()));
    }
    let kernels: Vec<_> = path.factors().iter().map(super::PsdSpectrum::of_gram).collect();
    let level_product = |m: usize| {
        let stride = intervals / m;
        let delta = span / m as f64;
        let mut acc = DMatrix::identity(n, n);
        for j in 1..=m {
            acc = kernels[j * stride].exp_neg(delta) * acc;
        }
        acc
    };
    let mut table = Vec::new();
    let mut prev = romberg_push(&mut table, level_product(1));
    let mut m = 1;
    let mut last_change = f64::INFINITY;
    while m < intervals {
        m *= 2;
        let diag = romberg_push(&mut table, level_product(m));
        last_change = spectral_norm(&(&diag - &prev));
        prev = diag;
    }
    if last_change < tol {
        Ok(ProductIntegralResult {
            value: prev,
            refinement: m,
            error_estimate: last_change,
        })
    } else {
        Err(OperatorError::RefinementExhausted {
            factors: m,
            last_change,
            best: Box::new(prev),
        })
    }
}
