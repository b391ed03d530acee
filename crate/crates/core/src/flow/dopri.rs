//! Dormand–Prince 5(4) with PI step-size control.

use nalgebra::DVector;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepControl {
    pub rtol: f64,
    pub atol: f64,
    pub max_steps: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum IntegrationFailure {
    /// Step budget spent before reaching the next output time; `t` is the last accepted time.
    StepLimit { t: f64, steps: usize },
    NonFinite { t: f64 },
    StepUnderflow { t: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct IntegratorStats {
    pub accepted: usize,
    pub rejected: usize,
    pub evaluations: usize,
}

const C2: f64 = 1.0 / 5.0;
const C3: f64 = 3.0 / 10.0;
const C4: f64 = 4.0 / 5.0;
const C5: f64 = 8.0 / 9.0;
const A21: f64 = 1.0 / 5.0;
const A31: f64 = 3.0 / 40.0;
const A32: f64 = 9.0 / 40.0;
const A41: f64 = 44.0 / 45.0;
const A42: f64 = -56.0 / 15.0;
const A43: f64 = 32.0 / 9.0;
const A51: f64 = 19372.0 / 6561.0;
const A52: f64 = -25360.0 / 2187.0;
const A53: f64 = 64448.0 / 6561.0;
const A54: f64 = -212.0 / 729.0;
const A61: f64 = 9017.0 / 3168.0;
const A62: f64 = -355.0 / 33.0;
const A63: f64 = 46732.0 / 5247.0;
const A64: f64 = 49.0 / 176.0;
const A65: f64 = -5103.0 / 18656.0;
const A71: f64 = 35.0 / 384.0;
const A73: f64 = 500.0 / 1113.0;
const A74: f64 = 125.0 / 192.0;
const A75: f64 = -2187.0 / 6784.0;
const A76: f64 = 11.0 / 84.0;
// fifth-order weights minus the embedded fourth-order ones
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const SAFETY: f64 = 0.9;
const FAC_MIN: f64 = 0.2;
const FAC_MAX: f64 = 10.0;
const BETA: f64 = 0.04;
const EXPO1: f64 = 0.2 - BETA * 0.75;

/// Adaptive integrator for `y' = f(t, y)` that lands exactly on each output time.
pub struct Dopri5<F> {
    rhs: F,
    control: StepControl,
    t: f64,
    y: DVector<f64>,
    k1: DVector<f64>,
    h: f64,
    fac_old: f64,
    pub stats: IntegratorStats,
}

impl<F> Dopri5<F>
where
    F: FnMut(f64, &DVector<f64>) -> DVector<f64>,
{
    pub fn new(mut rhs: F, t0: f64, y0: DVector<f64>, control: StepControl) -> Self {
        let k1 = rhs(t0, &y0);
        Self {
            rhs,
            control,
            t: t0,
            y: y0,
            k1,
            h: 0.0,
            fac_old: 1e-4,
            stats: IntegratorStats {
                evaluations: 1,
                ..Default::default()
            },
        }
    }

    pub fn t(&self) -> f64 {
        self.t
    }
    pub fn state(&self) -> &DVector<f64> {
        &self.y
    }

    fn scaled_norm(&self, err: &DVector<f64>, y_new: &DVector<f64>) -> f64 {
        let StepControl { rtol, atol, .. } = self.control;
        let n = err.len().max(1) as f64;
        let sum: f64 = err
            .iter()
            .zip(self.y.iter().zip(y_new.iter()))
            .map(|(e, (a, b))| {
                let sc = atol + rtol * a.abs().max(b.abs());
                (e / sc).powi(2)
            })
            .sum();
        (sum / n).sqrt()
    }

    /// Starting step from the usual two-derivative estimate.
    fn initial_step(&mut self, span: f64) -> f64 {
        let StepControl { rtol, atol, .. } = self.control;
        let sc = self.y.map(|v| atol + rtol * v.abs());
        let rms = |v: &DVector<f64>| (v.component_div(&sc).norm_squared() / v.len().max(1) as f64).sqrt();
        let d0 = rms(&self.y);
        let d1 = rms(&self.k1);
        let mut h0 = if d0 < 1e-5 || d1 < 1e-5 { 1e-6 } else { 0.01 * d0 / d1 };
        h0 = h0.min(span);
        let y1 = &self.y + &self.k1 * h0;
        let f1 = (self.rhs)(self.t + h0, &y1);
        self.stats.evaluations += 1;
        let d2 = rms(&(&f1 - &self.k1)) / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        (100.0 * h0).min(h1).min(span)
    }

    /// Advances to exactly `t_out`.
    pub fn advance_to(&mut self, t_out: f64) -> Result<(), IntegrationFailure> {
        if t_out <= self.t {
            return Ok(());
        }
        if self.h == 0.0 {
            self.h = self.initial_step(t_out - self.t);
        }
        let mut reject = false;
        while self.t < t_out {
            if self.stats.accepted + self.stats.rejected >= self.control.max_steps {
                return Err(IntegrationFailure::StepLimit {
                    t: self.t,
                    steps: self.stats.accepted + self.stats.rejected,
                });
            }
            let remaining = t_out - self.t;
            let last = self.h >= remaining * (1.0 - 1e-12);
            let h = if last { remaining } else { self.h };
            if h <= 1e-14 * self.t.abs().max(1.0) && !last {
                return Err(IntegrationFailure::StepUnderflow { t: self.t });
            }
            let (y_new, k7, err) = self.trial(h);
            let err_norm = self.scaled_norm(&err, &y_new);
            if !err_norm.is_finite() || y_new.iter().any(|v| !v.is_finite()) {
                if h <= 1e-14 * self.t.abs().max(1.0) {
                    return Err(IntegrationFailure::NonFinite { t: self.t });
                }
                self.h = h * FAC_MIN;
                reject = true;
                self.stats.rejected += 1;
                continue;
            }
            let fac11 = err_norm.powf(EXPO1);
            if err_norm <= 1.0 {
                let fac = (fac11 / self.fac_old.powf(BETA) / SAFETY).clamp(1.0 / FAC_MAX, 1.0 / FAC_MIN);
                let mut h_new = h / fac;
                if reject {
                    h_new = h_new.min(h);
                }
                self.fac_old = err_norm.max(1e-4);
                self.t = if last { t_out } else { self.t + h };
                self.y = y_new;
                self.k1 = k7;
                self.stats.accepted += 1;
                self.h = h_new;
                reject = false;
            } else {
                self.h = h / (fac11 / SAFETY).min(1.0 / FAC_MIN);
                reject = true;
                self.stats.rejected += 1;
            }
        }
        Ok(())
    }

    fn trial(&mut self, h: f64) -> (DVector<f64>, DVector<f64>, DVector<f64>) {
        let t = self.t;
        let y = &self.y;
        let k1 = &self.k1;
        let f = &mut self.rhs;
        let k2 = f(t + C2 * h, &(y + k1 * (h * A21)));
        let k3 = f(t + C3 * h, &(y + (k1 * A31 + &k2 * A32) * h));
        let k4 = f(t + C4 * h, &(y + (k1 * A41 + &k2 * A42 + &k3 * A43) * h));
        let k5 = f(t + C5 * h, &(y + (k1 * A51 + &k2 * A52 + &k3 * A53 + &k4 * A54) * h));
        let k6 = f(t + h, &(y + (k1 * A61 + &k2 * A62 + &k3 * A63 + &k4 * A64 + &k5 * A65) * h));
        let y_new = y + (k1 * A71 + &k3 * A73 + &k4 * A74 + &k5 * A75 + &k6 * A76) * h;
        let k7 = f(t + h, &y_new);
        let err = (k1 * E1 + &k3 * E3 + &k4 * E4 + &k5 * E5 + &k6 * E6 + &k7 * E7) * h;
        self.stats.evaluations += 6;
        (y_new, k7, err)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::dvector;

    const TIGHT: StepControl = StepControl {
        rtol: 1e-10,
        atol: 1e-12,
        max_steps: 100_000,
    };

    #[test]
    fn exponential_decay() {
        let mut ode = Dopri5::new(|_, y: &DVector<f64>| -y, 0.0, dvector![1.0], TIGHT);
        ode.advance_to(1.0).unwrap();
        assert!((ode.state()[0] - (-1f64).exp()).abs() < 1e-10);
        ode.advance_to(3.0).unwrap();
        assert_eq!(ode.t(), 3.0);
        assert!((ode.state()[0] - (-3f64).exp()).abs() < 1e-10);
    }

    #[test]
    fn harmonic_oscillator_over_many_periods() {
        let mut ode = Dopri5::new(|_, y: &DVector<f64>| dvector![y[1], -y[0]], 0.0, dvector![1.0, 0.0], TIGHT);
        let t_end = 20.0 * std::f64::consts::PI;
        ode.advance_to(t_end).unwrap();
        assert!((ode.state()[0] - 1.0).abs() < 1e-7);
        assert!(ode.state()[1].abs() < 1e-7);
    }

    #[test]
    fn time_dependent_rhs_hits_output_times() {
        let mut ode = Dopri5::new(|t, _: &DVector<f64>| dvector![t.cos()], 0.0, dvector![0.0], TIGHT);
        for k in 1..=10 {
            let t = k as f64 * 0.37;
            ode.advance_to(t).unwrap();
            assert!((ode.state()[0] - t.sin()).abs() < 1e-10);
        }
    }

    #[test]
    fn step_limit_is_reported() {
        let ctl = StepControl { max_steps: 3, ..TIGHT };
        let mut ode = Dopri5::new(|_, y: &DVector<f64>| dvector![y[1], -y[0]], 0.0, dvector![1.0, 0.0], ctl);
        assert!(matches!(ode.advance_to(100.0), Err(IntegrationFailure::StepLimit { .. })));
    }

    #[test]
    fn fifth_order_convergence() {
        // fixed-tolerance sweep: error drops roughly like tol
        let errs: Vec<f64> = [1e-6, 1e-8, 1e-10]
            .iter()
            .map(|&tol| {
                let ctl = StepControl { rtol: tol, atol: tol, max_steps: 100_000 };
                let mut ode = Dopri5::new(|_, y: &DVector<f64>| dvector![y[1], -y[0]], 0.0, dvector![1.0, 0.0], ctl);
                ode.advance_to(10.0).unwrap();
                (ode.state()[0] - 10f64.cos()).abs()
            })
            .collect();
        assert!(errs[2] < errs[1] && errs[1] < errs[0]);
        assert!(errs[2] < 1e-8);
    }
}
