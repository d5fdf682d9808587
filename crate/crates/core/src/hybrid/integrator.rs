//! Adaptive Dormand–Prince 5(4) integrator with FSAL and exact stop times.

use serde::{Deserialize, Serialize};

use super::FlowMap;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    DormandPrince45,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default)]
    pub method: Method,
    pub abs_tol: f64,
    pub rel_tol: f64,
    /// Upper bound on the step length (s).
    pub max_step: f64,
}

impl IntegratorConfig {
    pub fn with_max_step(max_step: f64) -> Self {
        Self {
            max_step,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.abs_tol > 0.0 && self.rel_tol > 0.0) {
            return Err(Error::config("integrator", "tolerances must be positive"));
        }
        if !(self.max_step > 0.0) {
            return Err(Error::config("integrator.max_step", "must be positive"));
        }
        Ok(())
    }
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        Self {
            method: Method::DormandPrince45,
            abs_tol: 1e-10,
            rel_tol: 1e-10,
            max_step: f64::INFINITY,
        }
    }
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

// Difference between the 5th and embedded 4th order weights.
const E1: f64 = 71.0 / 57600.0;
const E3: f64 = -71.0 / 16695.0;
const E4: f64 = 71.0 / 1920.0;
const E5: f64 = -17253.0 / 339200.0;
const E6: f64 = 22.0 / 525.0;
const E7: f64 = -1.0 / 40.0;

const MAX_STEPS: usize = 1_000_000;

/// Stepper state. Keeps the adaptive step length between successive stop
/// times so chained propagation costs the same as one long run.
pub(crate) struct Stepper<'a> {
    f: &'a dyn FlowMap,
    cfg: IntegratorConfig,
    t: f64,
    y: Vec<f64>,
    k: [Vec<f64>; 7],
    tmp: Vec<f64>,
    y_new: Vec<f64>,
    h: Option<f64>,
    fsal_valid: bool,
    pub(crate) steps: usize,
}

impl<'a> Stepper<'a> {
    pub(crate) fn new(f: &'a dyn FlowMap, cfg: IntegratorConfig, t: f64, x: &[f64]) -> Self {
        let n = x.len();
        Self {
            f,
            cfg,
            t,
            y: x.to_vec(),
            k: std::array::from_fn(|_| vec![0.0; n]),
            tmp: vec![0.0; n],
            y_new: vec![0.0; n],
            h: None,
            fsal_valid: false,
            steps: 0,
        }
    }

    pub(crate) fn state(&self) -> &[f64] {
        &self.y
    }

    fn fail(&self, reason: impl Into<String>) -> Error {
        Error::Propagation {
            t: self.t,
            state: self.y.clone(),
            reason: reason.into(),
        }
    }

    fn eval_into(&mut self, idx: usize, t: f64, use_tmp: bool) -> Result<()> {
        let (src, dst) = if use_tmp {
            (&self.tmp, &mut self.k[idx])
        } else {
            (&self.y, &mut self.k[idx])
        };
        self.f.eval(t, src, dst).map_err(|e| Error::Propagation {
            t: self.t,
            state: self.y.clone(),
            reason: e.to_string(),
        })?;
        if dst.iter().any(|v| !v.is_finite()) {
            return Err(self.fail("non-finite derivative"));
        }
        Ok(())
    }

    fn scale(&self, i: usize, y_new: f64) -> f64 {
        self.cfg.abs_tol + self.cfg.rel_tol * self.y[i].abs().max(y_new.abs())
    }

    fn initial_step(&mut self, span: f64) -> Result<f64> {
        // Hairer–Wanner starting step heuristic.
        let n = self.y.len();
        let mut d0 = 0.0;
        let mut d1 = 0.0;
        for i in 0..n {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * self.y[i].abs();
            d0 += (self.y[i] / sc).powi(2);
            d1 += (self.k[0][i] / sc).powi(2);
        }
        d0 = (d0 / n as f64).sqrt();
        d1 = (d1 / n as f64).sqrt();
        let h0 = if d0 < 1e-5 || d1 < 1e-5 {
            1e-6
        } else {
            0.01 * d0 / d1
        };
        let h0 = h0.min(span).min(self.cfg.max_step);
        for i in 0..n {
            self.tmp[i] = self.y[i] + h0 * self.k[0][i];
        }
        self.eval_into(1, self.t + h0, true)?;
        let mut d2 = 0.0;
        for i in 0..n {
            let sc = self.cfg.abs_tol + self.cfg.rel_tol * self.y[i].abs();
            d2 += ((self.k[1][i] - self.k[0][i]) / sc).powi(2);
        }
        d2 = (d2 / n as f64).sqrt() / h0;
        let h1 = if d1.max(d2) <= 1e-15 {
            (h0 * 1e-3).max(1e-6)
        } else {
            (0.01 / d1.max(d2)).powf(0.2)
        };
        Ok((100.0 * h0).min(h1).min(span).min(self.cfg.max_step))
    }

    /// Advances the solution to exactly `tau`.
    pub(crate) fn advance_to(&mut self, tau: f64) -> Result<()> {
        if tau < self.t {
            return Err(self.fail(format!("cannot integrate backwards to {tau}")));
        }
        if tau == self.t {
            return Ok(());
        }
        let n = self.y.len();
        if !self.fsal_valid {
            self.eval_into(0, self.t, false)?;
            self.fsal_valid = true;
        }
        let mut h = match self.h {
            Some(h) => h,
            None => self.initial_step(tau - self.t)?,
        };
        let mut last_rejected = false;
        loop {
            let remaining = tau - self.t;
            if remaining <= 0.0 {
                break;
            }
            let mut hit_stop = false;
            if h >= remaining {
                h = remaining;
                hit_stop = true;
            } else if h > 0.5 * remaining && h < remaining {
                // Avoid leaving a sliver step before the stop.
                h = 0.5 * remaining;
            }
            if h < 1e-12 * self.t.abs().max(1.0) {
                return Err(self.fail("step size underflow"));
            }
            self.steps += 1;
            if self.steps > MAX_STEPS {
                return Err(self.fail("step budget exhausted"));
            }
            let t = self.t;
            for i in 0..n {
                self.tmp[i] = self.y[i] + h * A21 * self.k[0][i];
            }
            self.eval_into(1, t + C2 * h, true)?;
            for i in 0..n {
                self.tmp[i] = self.y[i] + h * (A31 * self.k[0][i] + A32 * self.k[1][i]);
            }
            self.eval_into(2, t + C3 * h, true)?;
            for i in 0..n {
                self.tmp[i] =
                    self.y[i] + h * (A41 * self.k[0][i] + A42 * self.k[1][i] + A43 * self.k[2][i]);
            }
            self.eval_into(3, t + C4 * h, true)?;
            for i in 0..n {
                self.tmp[i] = self.y[i]
                    + h * (A51 * self.k[0][i]
                        + A52 * self.k[1][i]
                        + A53 * self.k[2][i]
                        + A54 * self.k[3][i]);
            }
            self.eval_into(4, t + C5 * h, true)?;
            for i in 0..n {
                self.tmp[i] = self.y[i]
                    + h * (A61 * self.k[0][i]
                        + A62 * self.k[1][i]
                        + A63 * self.k[2][i]
                        + A64 * self.k[3][i]
                        + A65 * self.k[4][i]);
            }
            self.eval_into(5, t + h, true)?;
            for i in 0..n {
                self.y_new[i] = self.y[i]
                    + h * (A71 * self.k[0][i]
                        + A73 * self.k[2][i]
                        + A74 * self.k[3][i]
                        + A75 * self.k[4][i]
                        + A76 * self.k[5][i]);
            }
            std::mem::swap(&mut self.tmp, &mut self.y_new);
            self.eval_into(6, t + h, true)?;
            std::mem::swap(&mut self.tmp, &mut self.y_new);

            let mut err = 0.0;
            for i in 0..n {
                let e = h
                    * (E1 * self.k[0][i]
                        + E3 * self.k[2][i]
                        + E4 * self.k[3][i]
                        + E5 * self.k[4][i]
                        + E6 * self.k[5][i]
                        + E7 * self.k[6][i]);
                err += (e / self.scale(i, self.y_new[i])).powi(2);
            }
            let err = (err / n as f64).sqrt();
            if !err.is_finite() {
                return Err(self.fail("non-finite error estimate"));
            }

            if err <= 1.0 {
                self.t = if hit_stop { tau } else { t + h };
                std::mem::swap(&mut self.y, &mut self.y_new);
                self.k.swap(0, 6);
                let mut fac = if err == 0.0 {
                    5.0
                } else {
                    0.9 * err.powf(-0.2)
                };
                fac = fac.clamp(0.2, 5.0);
                if last_rejected {
                    fac = fac.min(1.0);
                }
                last_rejected = false;
                let proposal = (h * fac).min(self.cfg.max_step);
                // A step clipped to hit the stop says nothing about the scale.
                self.h = Some(if hit_stop {
                    proposal.max(self.h.unwrap_or(0.0)).min(self.cfg.max_step)
                } else {
                    proposal
                });
                h = self.h.unwrap();
            } else {
                let fac = (0.9 * err.powf(-0.2)).clamp(0.1, 1.0);
                h *= fac;
                last_rejected = true;
            }
        }
        self.t = tau;
        Ok(())
    }
}

/// Flow operator: the solution at `tau` of `y' = f(s, y)`, `y(t) = x`.
pub fn flow(
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    tau: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>> {
    if tau == t {
        return Ok(x.to_vec());
    }
    let mut stepper = Stepper::new(f, *cfg, t, x);
    stepper.advance_to(tau)?;
    Ok(stepper.state().to_vec())
}

/// Propagates through an ascending list of stop times, returning the state at
/// each. Stops equal to `t` return `x` unchanged.
pub fn flow_through(
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    t: f64,
    x: &[f64],
    times: &[f64],
) -> Result<Vec<Vec<f64>>> {
    let mut stepper = Stepper::new(f, *cfg, t, x);
    let mut out = Vec::with_capacity(times.len());
    for &tau in times {
        stepper.advance_to(tau)?;
        out.push(stepper.state().to_vec());
    }
    Ok(out)
}
