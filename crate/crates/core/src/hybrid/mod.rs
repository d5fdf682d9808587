//! Impulsive hybrid system: flows between sample times, velocity-style jumps at
//! impulse opportunities, and a dwell-time clock `sigma`.

mod integrator;
mod simulate;

pub(crate) use integrator::Stepper;
pub use integrator::{flow, flow_through, IntegratorConfig, Method};
pub use simulate::{
    simulate, Controller, DecisionLog, Impulse, LogKind, LogSample, Monitors, SimulationError,
    SimulationRecord,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// `(t, sigma, x)`: time, time since the last nonzero impulse, continuous state.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HybridState {
    pub t: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
}

/// Controller sample grid `t0 + k*dt` together with the minimum dwell time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImpulseSchedule {
    pub t0: f64,
    pub dt: f64,
    #[serde(rename = "dT")]
    pub dwell: f64,
}

/// Relative tolerance (in units of `dt`) for grid membership and dwell tests.
pub const GRID_TOL: f64 = 1e-9;

impl ImpulseSchedule {
    pub fn new(t0: f64, dt: f64, dwell: f64) -> Result<Self> {
        let s = Self { t0, dt, dwell };
        s.validate()?;
        Ok(s)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::config(
                "schedule.dt",
                "sample period must be positive",
            ));
        }
        if !(self.dwell > self.dt) {
            return Err(Error::config(
                "schedule.dT",
                format!(
                    "dwell time {} must exceed the sample period {}",
                    self.dwell, self.dt
                ),
            ));
        }
        let q = self.dwell / self.dt;
        if (q - q.round()).abs() > GRID_TOL * q.max(1.0) {
            return Err(Error::config(
                "schedule.dT",
                format!(
                    "dwell time {} is not an integer multiple of dt = {}",
                    self.dwell, self.dt
                ),
            ));
        }
        Ok(())
    }

    /// `q` with `dT = q * dt`.
    pub fn dwell_steps(&self) -> i64 {
        (self.dwell / self.dt).round() as i64
    }

    pub fn time_at(&self, k: i64) -> f64 {
        self.t0 + k as f64 * self.dt
    }

    fn tol(&self) -> f64 {
        GRID_TOL * self.dt
    }

    /// Grid index of `t` if it lies on the sample grid.
    pub fn grid_index(&self, t: f64) -> Option<i64> {
        let k = ((t - self.t0) / self.dt).round();
        if (t - (self.t0 + k * self.dt)).abs() <= self.tol() && k >= 0.0 {
            Some(k as i64)
        } else {
            None
        }
    }

    pub fn dwell_elapsed(&self, sigma: f64) -> bool {
        sigma >= self.dwell - self.tol()
    }

    /// Membership of `(t, sigma)` in the impulse-opportunity set.
    pub fn is_impulse_opportunity(&self, t: f64, sigma: f64) -> bool {
        self.grid_index(t).is_some() && self.dwell_elapsed(sigma)
    }

    /// Last grid index not after `t_end`.
    pub fn last_index(&self, t_end: f64) -> i64 {
        ((t_end - self.t0) / self.dt + GRID_TOL).floor() as i64
    }
}

/// Flow map `f(t, x)` of the continuous dynamics.
pub trait FlowMap: Send + Sync {
    fn dim(&self) -> usize;

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()>;

    /// Total derivative of `f` along its own flow, `∂f/∂t + (∂f/∂x) f`.
    /// Defaults to a central difference along the flow direction.
    fn eval_dot(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        let mut f0 = vec![0.0; n];
        self.eval(t, x, &mut f0)?;
        let h = 1e-6 * (1.0 + t.abs());
        let fwd: Vec<f64> = x.iter().zip(&f0).map(|(xi, fi)| xi + h * fi).collect();
        let bwd: Vec<f64> = x.iter().zip(&f0).map(|(xi, fi)| xi - h * fi).collect();
        let mut fp = vec![0.0; n];
        let mut fm = vec![0.0; n];
        self.eval(t + h, &fwd, &mut fp)?;
        self.eval(t - h, &bwd, &mut fm)?;
        for i in 0..n {
            out[i] = (fp[i] - fm[i]) / (2.0 * h);
        }
        Ok(())
    }

    fn eval_vec(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval(t, x, &mut out)?;
        Ok(out)
    }

    fn eval_dot_vec(&self, t: f64, x: &[f64]) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.eval_dot(t, x, &mut out)?;
        Ok(out)
    }
}

/// Jump map `g(t, x, u)`. Implementations must satisfy `g(t, x, 0) = x`.
pub trait JumpMap: Send + Sync {
    fn control_dim(&self) -> usize;

    fn apply(&self, t: f64, x: &[f64], u: &[f64]) -> Vec<f64>;
}

pub fn is_nonzero(u: &[f64]) -> bool {
    u.iter().any(|v| *v != 0.0)
}

/// Applies the jump at an impulse opportunity, returning `(x⁺, σ⁺)`.
/// A zero control leaves both the state and the dwell clock untouched.
pub fn apply_jump(g: &dyn JumpMap, t: f64, x: &[f64], sigma: f64, u: &[f64]) -> (Vec<f64>, f64) {
    if !is_nonzero(u) {
        return (x.to_vec(), sigma);
    }
    (g.apply(t, x, u), 0.0)
}

/// Flow, jump and integrator bundled together.
#[derive(Clone, Copy)]
pub struct HybridSystem<'a> {
    pub flow: &'a dyn FlowMap,
    pub jump: &'a dyn JumpMap,
    pub integrator: IntegratorConfig,
}
