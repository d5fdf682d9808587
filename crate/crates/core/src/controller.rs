//! Coast-first impulsive controller with hard barrier constraints.
//!
//! At an impulse opportunity the controller coasts when both the Lyapunov
//! rate bound and every barrier bound over one sample period are admissible.
//! Otherwise it solves
//!
//! ```text
//! min  uᵀu + J d²
//! s.t. ψ*_v(t+ΔT, t, g(t,x,u)) ≤ γ₁ V(t,x) + d
//!      V(t, g(t,x,u))          ≤ γ₂ V(t,x) + d
//!      ψ_hi(t+ΔT, t, g(t,x,u)) ≤ 0               for every barrier
//! ```
//!
//! The slack is eliminated in closed form, `d = max(0, r₁, r₂)`, and the hard
//! constraints are handled by an exterior quadratic penalty with a growing
//! weight, minimized by multi-start Nelder–Mead.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::bounding::{segment_times, Barrier, FrozenBarrier, LyapunovRateBound, Predictor};
use crate::error::{Error, Result};
use crate::hybrid::{Controller, FlowMap, ImpulseSchedule, IntegratorConfig, JumpMap, Stepper};
use crate::linalg::{dot, norm};
use crate::nelder_mead::{self, NelderMeadOptions};
use crate::parallel;
use crate::stability::{FrozenLyapunov, Regime};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    Coast,
    Impulse,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Residual {
    pub label: String,
    pub value: f64,
}

/// Output of one controller query.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlDecision {
    pub u: Vec<f64>,
    pub branch: Branch,
    /// Achieved slack `d ≥ 0`.
    pub slack: f64,
    /// Achieved `uᵀu + J d²`.
    pub objective: f64,
    pub residuals: Vec<Residual>,
    pub iterations: usize,
    pub evaluations: usize,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub regime: Option<Regime>,
}

impl ControlDecision {
    pub fn coast(m: usize, residuals: Vec<Residual>) -> Self {
        Self {
            u: vec![0.0; m],
            branch: Branch::Coast,
            slack: 0.0,
            objective: 0.0,
            residuals,
            iterations: 0,
            evaluations: 0,
            regime: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SolverSettings {
    pub penalty_start: f64,
    pub penalty_growth: f64,
    pub penalty_rounds: usize,
    /// Further rounds run only while a start is still infeasible after
    /// `penalty_rounds`, for objectives whose slack term dwarfs the penalty.
    pub extra_rounds: usize,
    pub random_starts: usize,
    /// Radius (m/s) of the disc random starts are drawn from.
    pub start_radius: f64,
    /// Hard constraints count as met when every residual is at most this.
    pub feasibility_tol: f64,
    /// The penalized problem targets `ψ_h ≤ −barrier_margin`.
    pub barrier_margin: f64,
    pub seed: u64,
    pub nelder_mead: NelderMeadOptions,
}

impl Default for SolverSettings {
    fn default() -> Self {
        Self {
            penalty_start: 1e3,
            penalty_growth: 10.0,
            penalty_rounds: 5,
            extra_rounds: 6,
            random_starts: 6,
            start_radius: 2.0,
            feasibility_tol: 1e-6,
            barrier_margin: 1e-3,
            seed: 0,
            nelder_mead: NelderMeadOptions::default(),
        }
    }
}

#[derive(Clone)]
pub struct ControllerConfig {
    /// Relaxation rate γ₁ ≥ 0 of the Lyapunov rate constraint.
    pub gamma1: f64,
    /// Jump contraction γ₂ ∈ [0, 1].
    pub gamma2: f64,
    /// Slack weight J > 0.
    pub slack_weight: f64,
    pub barriers: Vec<Arc<dyn Barrier>>,
    pub lyapunov: LyapunovRateBound,
    /// Bound used for the hard barrier constraints over the dwell time.
    pub predictor: Predictor,
    pub n_psi: usize,
    /// Segments of the Lyapunov rate bound over the dwell time.
    pub n_psi_v: usize,
    pub solver: SolverSettings,
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.slack_weight > 0.0) {
            return Err(Error::config(
                "controller.slack_weight",
                "J must be positive",
            ));
        }
        if !(self.gamma1 >= 0.0) {
            return Err(Error::config("controller.gamma1", "must be nonnegative"));
        }
        if !(0.0..=1.0).contains(&self.gamma2) {
            return Err(Error::config("controller.gamma2", "must lie in [0, 1]"));
        }
        if self.n_psi == 0 || self.n_psi_v == 0 {
            return Err(Error::config(
                "controller.n_psi",
                "segment counts must be at least 1",
            ));
        }
        if self.solver.penalty_rounds == 0 {
            return Err(Error::config(
                "controller.solver.penalty_rounds",
                "need at least one round",
            ));
        }
        Ok(())
    }

    fn barrier_segments(&self) -> usize {
        match self.predictor {
            Predictor::Psi => 1,
            Predictor::PsiStar => self.n_psi,
        }
    }
}

/// Evaluation of the impulse problem at one candidate control.
#[derive(Debug, Clone, PartialEq)]
pub struct CandidateEvaluation {
    pub u: Vec<f64>,
    /// Worst bound element per barrier (hard constraints, `≤ 0` required).
    pub hard: Vec<f64>,
    /// `max_j ψ*_v − γ₁V` and `V(t, y) − γ₂V`.
    pub soft: [f64; 2],
    pub slack: f64,
    /// `uᵀu + J d²`.
    pub objective: f64,
}

impl CandidateEvaluation {
    pub fn max_hard(&self) -> f64 {
        self.hard.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }
}

/// Data frozen at the decision time and shared by every candidate.
struct DecisionContext<'a> {
    t: f64,
    x: Vec<f64>,
    w: f64,
    lyap_now: FrozenLyapunov<'a>,
    /// Stop times (ascending, first is `t`) with what to evaluate there.
    stops: Vec<Stop<'a>>,
}

struct Stop<'a> {
    time: f64,
    /// Frozen barriers with the segment length, when a barrier segment starts here.
    barriers: Option<(f64, Vec<Box<dyn FrozenBarrier + 'a>>)>,
    lyap: Option<(f64, FrozenLyapunov<'a>)>,
}

/// Impulsive controller for a given plant.
#[derive(Clone)]
pub struct ImpulsiveController {
    pub config: ControllerConfig,
    pub flow: Arc<dyn FlowMap>,
    pub jump: Arc<dyn JumpMap>,
    pub integrator: IntegratorConfig,
}

impl ImpulsiveController {
    pub fn new(
        config: ControllerConfig,
        flow: Arc<dyn FlowMap>,
        jump: Arc<dyn JumpMap>,
        integrator: IntegratorConfig,
    ) -> Result<Self> {
        config.validate()?;
        Ok(Self {
            config,
            flow,
            jump,
            integrator,
        })
    }

    fn m(&self) -> usize {
        self.jump.control_dim()
    }

    /// Coast test over one sample period with the scalar bounds.
    /// Returns the residuals `ψ_v − γ₁V` and `ψ_hi` (all must be `≤ 0`).
    pub fn coast_residuals(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
    ) -> Result<Vec<Residual>> {
        let cfg = &self.config;
        let frozen = cfg.lyapunov.lyapunov.freeze(t);
        let w = frozen.value(x);
        let psi_v = cfg
            .lyapunov
            .psi_v_frozen(&frozen, self.flow.as_ref(), schedule.dt, x)?;
        let mut out = vec![Residual {
            label: "lyapunov".into(),
            value: psi_v - cfg.gamma1 * w,
        }];
        for b in &cfg.barriers {
            out.push(Residual {
                label: b.label().to_string(),
                value: b.psi(t + schedule.dt, t, x)?,
            });
        }
        Ok(out)
    }

    fn context<'a>(
        &'a self,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
    ) -> Result<DecisionContext<'a>> {
        let cfg = &self.config;
        let horizon = schedule.dwell;
        let nb = cfg.barrier_segments();
        let nv = cfg.n_psi_v;
        let bt = segment_times(t, t + horizon, nb);
        let vt = segment_times(t, t + horizon, nv);
        let db = horizon / nb as f64;
        let dv = horizon / nv as f64;
        // Merge segment starts; coincident starts share one stop.
        let tol = 1e-9 * schedule.dt;
        let mut times: Vec<(f64, bool, bool)> = Vec::new();
        for &s in &bt[..nb] {
            times.push((s, true, false));
        }
        for &s in &vt[..nv] {
            match times.iter_mut().find(|(ts, _, _)| (ts - s).abs() <= tol) {
                Some(entry) => entry.2 = true,
                None => times.push((s, false, true)),
            }
        }
        times.sort_by(|a, b| a.0.total_cmp(&b.0));
        let mut stops = Vec::with_capacity(times.len());
        for (s, has_b, has_v) in times {
            let barriers = if has_b {
                let frozen = cfg
                    .barriers
                    .iter()
                    .map(|b| b.freeze(s))
                    .collect::<Result<Vec<_>>>()?;
                Some((db, frozen))
            } else {
                None
            };
            let lyap = has_v.then(|| (dv, cfg.lyapunov.lyapunov.freeze(s)));
            stops.push(Stop {
                time: s,
                barriers,
                lyap,
            });
        }
        let lyap_now = cfg.lyapunov.lyapunov.freeze(t);
        let w = lyap_now.value(x);
        Ok(DecisionContext {
            t,
            x: x.to_vec(),
            w,
            lyap_now,
            stops,
        })
    }

    fn evaluate_in(&self, ctx: &DecisionContext<'_>, u: &[f64]) -> Result<CandidateEvaluation> {
        let cfg = &self.config;
        let y = self.jump.apply(ctx.t, &ctx.x, u);
        let mut hard = vec![f64::NEG_INFINITY; cfg.barriers.len()];
        let mut psi_v_max = f64::NEG_INFINITY;
        let mut stepper: Option<Stepper<'_>> = None;
        for stop in &ctx.stops {
            let state: &[f64] = if stop.time == ctx.t {
                &y
            } else {
                let s = stepper.get_or_insert_with(|| {
                    Stepper::new(self.flow.as_ref(), self.integrator, ctx.t, &y)
                });
                s.advance_to(stop.time)?;
                s.state()
            };
            if let Some((delta, frozen)) = &stop.barriers {
                for (slot, b) in hard.iter_mut().zip(frozen) {
                    *slot = slot.max(b.psi(*delta, state)?);
                }
            }
            if let Some((delta, fl)) = &stop.lyap {
                psi_v_max = psi_v_max.max(cfg.lyapunov.psi_v_frozen(
                    fl,
                    self.flow.as_ref(),
                    *delta,
                    state,
                )?);
            }
        }
        let r1 = psi_v_max - cfg.gamma1 * ctx.w;
        let r2 = ctx.lyap_now.value(&y) - cfg.gamma2 * ctx.w;
        let slack = 0.0_f64.max(r1).max(r2);
        Ok(CandidateEvaluation {
            u: u.to_vec(),
            hard,
            soft: [r1, r2],
            slack,
            objective: dot(u, u) + cfg.slack_weight * slack * slack,
        })
    }

    /// Evaluates the impulse problem at a single candidate control.
    pub fn evaluate_candidate(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
        u: &[f64],
    ) -> Result<CandidateEvaluation> {
        let ctx = self.context(schedule, t, x)?;
        self.evaluate_in(&ctx, u)
    }

    /// `F(u) + weight · Σ_i max(0, ψ_hi + margin)²`, the function each penalty
    /// round minimizes.
    pub fn penalized_objective(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
        u: &[f64],
        weight: f64,
    ) -> Result<f64> {
        let ctx = self.context(schedule, t, x)?;
        self.evaluate_in(&ctx, u)?;
        Ok(self.penalized(&ctx, u, weight))
    }

    fn penalized(&self, ctx: &DecisionContext<'_>, u: &[f64], weight: f64) -> f64 {
        let margin = self.config.solver.barrier_margin;
        match self.evaluate_in(ctx, u) {
            Ok(ev) => {
                let pen: f64 = ev.hard.iter().map(|c| (c + margin).max(0.0).powi(2)).sum();
                ev.objective + weight * pen
            }
            Err(_) => f64::INFINITY,
        }
    }

    fn starts(&self, ctx: &DecisionContext<'_>) -> Vec<Vec<f64>> {
        let m = self.m();
        let s = &self.config.solver;
        let mut starts = vec![vec![0.0; m]];
        if let Some(b) = self.braking_start(ctx) {
            starts.push(b);
        }
        let mut rng = ChaCha8Rng::seed_from_u64(s.seed ^ ctx.t.to_bits().rotate_left(17));
        while starts.len() < 2 + s.random_starts {
            // Uniform in the disc (ball) of radius start_radius.
            let dir: Vec<f64> = (0..m).map(|_| rng.random::<f64>() * 2.0 - 1.0).collect();
            let r = norm(&dir);
            if r == 0.0 || r > 1.0 {
                continue;
            }
            starts.push(dir.iter().map(|d| d * s.start_radius).collect());
        }
        starts
    }

    /// Gauss–Newton step from `u = 0` that zeroes the linearized worst barrier.
    fn braking_start(&self, ctx: &DecisionContext<'_>) -> Option<Vec<f64>> {
        let m = self.m();
        let base = self.evaluate_in(ctx, &vec![0.0; m]).ok()?;
        let (worst_idx, worst) = base
            .hard
            .iter()
            .copied()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(&b.1))?;
        let h = 1e-3 * self.config.solver.start_radius;
        let mut grad = vec![0.0; m];
        for i in 0..m {
            let mut up = vec![0.0; m];
            let mut um = vec![0.0; m];
            up[i] = h;
            um[i] = -h;
            let fp = self.evaluate_in(ctx, &up).ok()?.hard[worst_idx];
            let fm = self.evaluate_in(ctx, &um).ok()?.hard[worst_idx];
            grad[i] = (fp - fm) / (2.0 * h);
        }
        let g2 = dot(&grad, &grad);
        if !(g2 > 0.0) || !g2.is_finite() {
            return None;
        }
        let target = if worst > 0.0 {
            worst + self.config.solver.barrier_margin
        } else {
            0.5 * self.config.solver.start_radius * g2.sqrt()
        };
        Some(grad.iter().map(|g| -target * g / g2).collect())
    }

    /// Solves the impulse problem at `(t, x)`.
    pub fn solve_impulse(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
    ) -> Result<ControlDecision> {
        let ctx = self.context(schedule, t, x)?;
        let s = self.config.solver;
        let starts = self.starts(&ctx);
        let runs = parallel::map(&starts, |u0| {
            let mut u = u0.clone();
            let mut iterations = 0;
            let mut evaluations = 0;
            let mut step = (0.1 * s.start_radius).max(0.05 * norm(u0));
            for round in 0..s.penalty_rounds + s.extra_rounds {
                if round >= s.penalty_rounds
                    && self
                        .evaluate_in(&ctx, &u)
                        .is_ok_and(|e| e.max_hard() <= s.feasibility_tol)
                {
                    break;
                }
                let weight = s.penalty_start * s.penalty_growth.powi(round as i32);
                let res = nelder_mead::minimize(
                    |v| self.penalized(&ctx, v, weight),
                    &u,
                    step,
                    &s.nelder_mead,
                );
                iterations += res.iterations;
                evaluations += res.evaluations;
                u = res.x;
                step = (0.1 * step).max(1e-6 * (1.0 + norm(&u)));
            }
            (u, iterations, evaluations)
        });
        let iterations: usize = runs.iter().map(|r| r.1).sum();
        let evaluations: usize = runs.iter().map(|r| r.2).sum();

        let evals: Vec<CandidateEvaluation> = runs
            .into_iter()
            .filter_map(|(u, _, _)| self.evaluate_in(&ctx, &u).ok())
            .collect();
        let feasible = evals.iter().filter(|e| e.max_hard() <= s.feasibility_tol);
        let best = feasible.min_by(|a, b| {
            a.objective
                .total_cmp(&b.objective)
                .then_with(|| lexicographic(&a.u, &b.u))
        });
        let Some(best) = best else {
            let closest = evals
                .iter()
                .min_by(|a, b| a.max_hard().total_cmp(&b.max_hard()));
            return Err(match closest {
                Some(c) => Error::Infeasible {
                    t,
                    best_u: c.u.clone(),
                    residuals: c.hard.clone(),
                    worst_residual: c.max_hard(),
                },
                None => Error::Infeasible {
                    t,
                    best_u: vec![0.0; self.m()],
                    residuals: Vec::new(),
                    worst_residual: f64::INFINITY,
                },
            });
        };
        let mut residuals = vec![
            Residual {
                label: "lyapunov_rate".into(),
                value: best.soft[0],
            },
            Residual {
                label: "lyapunov_jump".into(),
                value: best.soft[1],
            },
        ];
        residuals.extend(
            self.config
                .barriers
                .iter()
                .zip(&best.hard)
                .map(|(b, v)| Residual {
                    label: b.label().to_string(),
                    value: *v,
                }),
        );
        Ok(ControlDecision {
            u: best.u.clone(),
            branch: Branch::Impulse,
            slack: best.slack,
            objective: best.objective,
            residuals,
            iterations,
            evaluations,
            regime: None,
        })
    }

    /// Coast when admissible, otherwise solve the impulse problem.
    pub fn decide(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        _sigma: f64,
        x: &[f64],
    ) -> Result<ControlDecision> {
        let coast = self.coast_residuals(schedule, t, x)?;
        if coast.iter().all(|r| r.value <= 0.0) {
            return Ok(ControlDecision::coast(self.m(), coast));
        }
        self.solve_impulse(schedule, t, x)
    }
}

fn lexicographic(a: &[f64], b: &[f64]) -> std::cmp::Ordering {
    for (x, y) in a.iter().zip(b) {
        match x.total_cmp(y) {
            std::cmp::Ordering::Equal => continue,
            other => return other,
        }
    }
    std::cmp::Ordering::Equal
}

impl Controller for ImpulsiveController {
    fn decide(
        &self,
        schedule: &ImpulseSchedule,
        t: f64,
        sigma: f64,
        x: &[f64],
    ) -> Result<ControlDecision> {
        ImpulsiveController::decide(self, schedule, t, sigma, x)
    }
}

/// Controller that never fires.
#[derive(Debug, Clone, Copy)]
pub struct CoastOnly(pub usize);

impl Controller for CoastOnly {
    fn decide(
        &self,
        _s: &ImpulseSchedule,
        _t: f64,
        _sigma: f64,
        _x: &[f64],
    ) -> Result<ControlDecision> {
        Ok(ControlDecision::coast(self.0, Vec::new()))
    }
}
