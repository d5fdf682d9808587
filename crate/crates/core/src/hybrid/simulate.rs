use std::time::Instant;

use serde::{Deserialize, Serialize};

use super::{apply_jump, is_nonzero, HybridSystem, ImpulseSchedule, Stepper, GRID_TOL};
use crate::bounding::Barrier;
use crate::controller::ControlDecision;
use crate::error::{Error, Result};
use crate::stability::QuadraticLyapunov;

/// Decision rule queried at every impulse opportunity.
pub trait Controller: Sync {
    fn decide(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        sigma: f64,
        x: &[f64],
    ) -> Result<ControlDecision>;
}

/// Quantities evaluated at every logged state.
#[derive(Clone, Default)]
pub struct Monitors<'a> {
    pub barriers: Vec<&'a dyn Barrier>,
    pub lyapunov: Option<&'a QuadraticLyapunov>,
}

impl<'a> Monitors<'a> {
    pub fn labels(&self) -> Vec<String> {
        self.barriers
            .iter()
            .map(|b| b.label().to_string())
            .collect()
    }

    fn barrier_values(&self, t: f64, x: &[f64]) -> Vec<f64> {
        // A singular barrier sits deep inside its unsafe set.
        self.barriers
            .iter()
            .map(|b| b.h(t, x).unwrap_or(f64::INFINITY))
            .collect()
    }

    fn lyapunov_value(&self, t: f64, x: &[f64]) -> Option<f64> {
        self.lyapunov.map(|l| l.value(t, x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    /// Interior point of a flow segment or a grid time without impulse.
    Flow,
    /// Pre-jump state at a grid time where an impulse fires.
    PreJump,
    /// Post-jump state; carries the applied control.
    PostJump,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogSample {
    pub t: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
    pub kind: LogKind,
    pub u: Option<Vec<f64>>,
    pub barriers: Vec<f64>,
    pub lyapunov: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Impulse {
    /// Grid index `k` with `t = t0 + k*dt`.
    pub k: i64,
    pub t: f64,
    pub u: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DecisionLog {
    pub k: i64,
    pub t: f64,
    pub sigma: f64,
    pub x: Vec<f64>,
    pub decision: ControlDecision,
    /// Wall-clock seconds spent inside `decide`.
    pub wall_time: f64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SimulationRecord {
    pub schedule: ImpulseSchedule,
    pub t_end: f64,
    pub barrier_labels: Vec<String>,
    pub samples: Vec<LogSample>,
    pub impulses: Vec<Impulse>,
    pub decisions: Vec<DecisionLog>,
}

impl SimulationRecord {
    pub fn final_sample(&self) -> Option<&LogSample> {
        self.samples.last()
    }

    /// Largest barrier value over every logged state.
    pub fn max_barrier(&self) -> f64 {
        self.samples
            .iter()
            .flat_map(|s| s.barriers.iter().copied())
            .fold(f64::NEG_INFINITY, f64::max)
    }
}

#[derive(Debug, thiserror::Error)]
#[error("simulation aborted at t = {}: {source}", .partial.samples.last().map(|s| s.t).unwrap_or(f64::NAN))]
pub struct SimulationError {
    #[source]
    pub source: Error,
    pub partial: Box<SimulationRecord>,
}

/// Runs the closed loop from `(t0, sigma = dT, x0)` until `t_end`.
///
/// The loop walks the integer sample grid. At each grid time whose dwell
/// clock has elapsed the controller is queried; a nonzero control jumps the
/// state and resets the clock. Between grid times the state flows, with
/// extra log points every `log_step` seconds.
pub fn simulate(
    system: &HybridSystem<'_>,
    schedule: &ImpulseSchedule,
    controller: &dyn Controller,
    monitors: &Monitors<'_>,
    x0: &[f64],
    t_end: f64,
    log_step: f64,
) -> std::result::Result<SimulationRecord, SimulationError> {
    let mut record = SimulationRecord {
        schedule: *schedule,
        t_end,
        barrier_labels: monitors.labels(),
        samples: Vec::new(),
        impulses: Vec::new(),
        decisions: Vec::new(),
    };
    let fail = |source: Error, record: SimulationRecord| SimulationError {
        source,
        partial: Box::new(record),
    };
    if let Err(e) = schedule.validate() {
        return Err(fail(e, record));
    }
    if !(t_end >= schedule.t0) || !(log_step > 0.0) {
        return Err(fail(
            Error::InvalidArgument(format!(
                "need t_end >= t0 and log_step > 0 (t_end = {t_end}, log_step = {log_step})"
            )),
            record,
        ));
    }

    let log = |record: &mut SimulationRecord,
               t: f64,
               sigma: f64,
               x: &[f64],
               kind: LogKind,
               u: Option<Vec<f64>>| {
        record.samples.push(LogSample {
            t,
            sigma,
            x: x.to_vec(),
            kind,
            u,
            barriers: monitors.barrier_values(t, x),
            lyapunov: monitors.lyapunov_value(t, x),
        });
    };

    let k_end = schedule.last_index(t_end);
    let tol = GRID_TOL * schedule.dt;
    let mut x = x0.to_vec();
    let mut sigma = schedule.dwell;
    let mut k: i64 = 0;
    let mut sample_pending = true;

    loop {
        let t = schedule.time_at(k);
        // No decision at the terminal time itself.
        let terminal = t >= t_end - tol;
        if schedule.dwell_elapsed(sigma) && !terminal {
            let started = Instant::now();
            let decision = controller.decide(schedule, t, sigma, &x);
            let wall_time = started.elapsed().as_secs_f64();
            let decision = match decision {
                Ok(d) => d,
                Err(e) => {
                    if sample_pending {
                        log(&mut record, t, sigma, &x, LogKind::Flow, None);
                    }
                    return Err(fail(e, record));
                }
            };
            let u = decision.u.clone();
            record.decisions.push(DecisionLog {
                k,
                t,
                sigma,
                x: x.clone(),
                decision,
                wall_time,
            });
            if is_nonzero(&u) {
                log(&mut record, t, sigma, &x, LogKind::PreJump, None);
                let (xp, sp) = apply_jump(system.jump, t, &x, sigma, &u);
                x = xp;
                sigma = sp;
                log(
                    &mut record,
                    t,
                    sigma,
                    &x,
                    LogKind::PostJump,
                    Some(u.clone()),
                );
                record.impulses.push(Impulse { k, t, u });
                sample_pending = false;
            }
        }
        if sample_pending {
            log(&mut record, t, sigma, &x, LogKind::Flow, None);
        }

        let t_next = if k < k_end {
            schedule.time_at(k + 1)
        } else {
            t_end
        };
        if t_next <= t + tol {
            break;
        }
        // Interior log points t0 + j*log_step strictly inside (t, t_next).
        let j_first = ((t - schedule.t0) / log_step + GRID_TOL).floor() as i64 + 1;
        let mut stops = Vec::new();
        let mut j = j_first;
        loop {
            let s = schedule.t0 + j as f64 * log_step;
            if s >= t_next - tol {
                break;
            }
            if s > t + tol {
                stops.push(s);
            }
            j += 1;
        }
        let mut stepper = Stepper::new(system.flow, system.integrator, t, &x);
        for &s in &stops {
            if let Err(e) = stepper.advance_to(s) {
                return Err(fail(e, record));
            }
            log(
                &mut record,
                s,
                sigma + (s - t),
                stepper.state(),
                LogKind::Flow,
                None,
            );
        }
        if let Err(e) = stepper.advance_to(t_next) {
            return Err(fail(e, record));
        }
        x = stepper.state().to_vec();
        sigma += t_next - t;
        sample_pending = true;
        if k >= k_end {
            log(&mut record, t_next, sigma, &x, LogKind::Flow, None);
            break;
        }
        k += 1;
    }
    Ok(record)
}
