//! One-step-MPC stabilizer with strict descent rates and a maximum dwell.
//!
//! Coasts while the exactly predicted `V` one sample ahead drops by the
//! strict rate, otherwise fires the impulse minimizing the predicted `V` one
//! dwell time ahead. Every decision carries its regime and the margin of the
//! condition it relies on, so a run can be audited afterwards.

use std::sync::Arc;

use nalgebra::{DMatrix, DVector};

use crate::controller::{Branch, ControlDecision, Residual};
use crate::error::Result;
use crate::hybrid::{flow, Controller, FlowMap, ImpulseSchedule, IntegratorConfig, JumpMap};
use crate::linalg::{dot, norm};
use crate::stability::{
    max_dwell_trigger, mpc_coast_condition, mpc_jump_condition, QuadraticLyapunov, Regime,
    StabilityRates,
};

#[derive(Clone)]
pub struct OneStepMpc {
    pub lyapunov: QuadraticLyapunov,
    pub flow: Arc<dyn FlowMap>,
    pub jump: Arc<dyn JumpMap>,
    pub integrator: IntegratorConfig,
    pub rates: StabilityRates,
    pub max_iter: usize,
    /// Finite-difference step on `u` for the sensitivity of the end state.
    pub fd_step: f64,
}

impl OneStepMpc {
    pub fn new(
        lyapunov: QuadraticLyapunov,
        flow: Arc<dyn FlowMap>,
        jump: Arc<dyn JumpMap>,
        integrator: IntegratorConfig,
        rates: StabilityRates,
    ) -> Result<Self> {
        rates.validate()?;
        Ok(Self {
            lyapunov,
            flow,
            jump,
            integrator,
            rates,
            max_iter: 20,
            fd_step: 1e-3,
        })
    }

    fn terminal_error(&self, t: f64, x: &[f64], u: &[f64], horizon: f64) -> Result<Vec<f64>> {
        let y = self.jump.apply(t, x, u);
        let yf = flow(self.flow.as_ref(), &self.integrator, t + horizon, t, &y)?;
        Ok(self.lyapunov.error(t + horizon, &yf))
    }

    fn weighted(&self, e: &[f64]) -> f64 {
        let n = self.lyapunov.dim();
        crate::linalg::bilinear(self.lyapunov.matrix(), n, e, e)
    }

    /// Gauss–Newton minimization of `V(t+horizon, p(t+horizon, t, g(t, x, u)))`.
    pub fn minimize_terminal(&self, t: f64, x: &[f64], horizon: f64) -> Result<(Vec<f64>, f64)> {
        let m = self.jump.control_dim();
        let n = self.lyapunov.dim();
        let p = DMatrix::from_row_slice(n, n, self.lyapunov.matrix());
        let mut u = vec![0.0; m];
        let mut e = self.terminal_error(t, x, &u, horizon)?;
        let mut val = self.weighted(&e);
        for _ in 0..self.max_iter {
            let mut jac = DMatrix::zeros(n, m);
            for i in 0..m {
                let mut up = u.clone();
                let mut um = u.clone();
                up[i] += self.fd_step;
                um[i] -= self.fd_step;
                let ep = self.terminal_error(t, x, &up, horizon)?;
                let em = self.terminal_error(t, x, &um, horizon)?;
                for r in 0..n {
                    jac[(r, i)] = (ep[r] - em[r]) / (2.0 * self.fd_step);
                }
            }
            let ev = DVector::from_column_slice(&e);
            let jtp = jac.transpose() * &p;
            let Some(step) = (&jtp * &jac).lu().solve(&(-(&jtp * ev))) else {
                break;
            };
            let mut alpha = 1.0;
            let mut improved = false;
            while alpha > 1e-6 {
                let cand: Vec<f64> = u
                    .iter()
                    .zip(step.iter())
                    .map(|(a, s)| a + alpha * s)
                    .collect();
                let ec = self.terminal_error(t, x, &cand, horizon)?;
                let vc = self.weighted(&ec);
                if vc < val {
                    let moved = alpha * step.norm();
                    u = cand;
                    e = ec;
                    val = vc;
                    improved = moved > 1e-12 * (1.0 + norm(&u));
                    break;
                }
                alpha *= 0.5;
            }
            if !improved {
                break;
            }
        }
        Ok((u, val))
    }
}

impl Controller for OneStepMpc {
    fn decide(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        sigma: f64,
        x: &[f64],
    ) -> Result<ControlDecision> {
        let m = self.jump.control_dim();
        if !max_dwell_trigger(&self.rates, schedule, sigma) {
            let c = mpc_coast_condition(
                &self.lyapunov,
                self.flow.as_ref(),
                &self.integrator,
                schedule,
                t,
                x,
                Some(&self.rates),
            )?;
            if c.satisfied {
                let mut d = ControlDecision::coast(
                    m,
                    vec![Residual {
                        label: "mpc_coast".into(),
                        value: c.margin,
                    }],
                );
                d.regime = Some(Regime::Z1);
                return Ok(d);
            }
        }
        let (u, _) = self.minimize_terminal(t, x, schedule.dwell)?;
        let c = mpc_jump_condition(
            &self.lyapunov,
            self.flow.as_ref(),
            &self.integrator,
            self.jump.as_ref(),
            schedule,
            t,
            x,
            &u,
            Some(&self.rates),
        )?;
        Ok(ControlDecision {
            objective: dot(&u, &u),
            u,
            branch: Branch::Impulse,
            slack: 0.0,
            residuals: vec![Residual {
                label: "mpc_jump".into(),
                value: c.margin,
            }],
            iterations: 0,
            evaluations: 0,
            regime: Some(Regime::Z2),
        })
    }
}
