//! Quadratic Lyapunov functions on a moving target and the one-step-MPC,
//! coasting and strict-descent conditions that certify stability of the
//! impulsive closed loop.

use std::sync::Arc;

use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::bounding::{psi_star_points, segment_times, LyapunovRateBound};
use crate::error::{Error, Result};
use crate::hybrid::{flow, FlowMap, ImpulseSchedule, IntegratorConfig, JumpMap, GRID_TOL};
use crate::linalg::{bilinear, sub};
use crate::trajectory::{Origin, Reference};

/// `V(t, x) = (x − x_t(t))ᵀ P (x − x_t(t))` with `P` symmetric positive definite.
#[derive(Clone)]
pub struct QuadraticLyapunov {
    n: usize,
    p: Vec<f64>,
    target: Arc<dyn Reference>,
    lambda_min: f64,
    lambda_max: f64,
}

impl std::fmt::Debug for QuadraticLyapunov {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("QuadraticLyapunov")
            .field("n", &self.n)
            .field("p", &self.p)
            .field("lambda_min", &self.lambda_min)
            .field("lambda_max", &self.lambda_max)
            .finish_non_exhaustive()
    }
}

impl QuadraticLyapunov {
    /// `p` is row-major `n × n`.
    pub fn new(p: Vec<f64>, target: Arc<dyn Reference>) -> Result<Self> {
        let n = target.dim();
        if p.len() != n * n {
            return Err(Error::config(
                "P",
                format!("expected {n}x{n} entries, got {}", p.len()),
            ));
        }
        let scale = p
            .iter()
            .fold(0.0_f64, |m, v| m.max(v.abs()))
            .max(f64::MIN_POSITIVE);
        for i in 0..n {
            for j in 0..i {
                if (p[i * n + j] - p[j * n + i]).abs() > 1e-12 * scale {
                    return Err(Error::config("P", "matrix is not symmetric"));
                }
            }
        }
        let eig = SymmetricEigen::new(DMatrix::from_row_slice(n, n, &p));
        let lambda_min = eig.eigenvalues.min();
        let lambda_max = eig.eigenvalues.max();
        if !(lambda_min > 0.0) {
            return Err(Error::config(
                "P",
                format!("not positive definite (λ_min = {lambda_min:e})"),
            ));
        }
        Ok(Self {
            n,
            p,
            target,
            lambda_min,
            lambda_max,
        })
    }

    pub fn diagonal(diag: &[f64], target: Arc<dyn Reference>) -> Result<Self> {
        let n = diag.len();
        let mut p = vec![0.0; n * n];
        for (i, d) in diag.iter().enumerate() {
            p[i * n + i] = *d;
        }
        Self::new(p, target)
    }

    /// Origin form `V(x) = xᵀ P x`.
    pub fn about_origin(p: Vec<f64>, n: usize) -> Result<Self> {
        Self::new(p, Arc::new(Origin(n)))
    }

    pub fn dim(&self) -> usize {
        self.n
    }

    pub fn matrix(&self) -> &[f64] {
        &self.p
    }

    /// Constants of the quadratic sandwich `λ_min‖e‖² ≤ V ≤ λ_max‖e‖²`.
    pub fn eigen_bounds(&self) -> (f64, f64) {
        (self.lambda_min, self.lambda_max)
    }

    pub fn target(&self) -> &Arc<dyn Reference> {
        &self.target
    }

    pub fn error(&self, t: f64, x: &[f64]) -> Vec<f64> {
        let [xt, _, _] = self.target.derivatives(t);
        sub(x, &xt)
    }

    pub fn value(&self, t: f64, x: &[f64]) -> f64 {
        let e = self.error(t, x);
        bilinear(&self.p, self.n, &e, &e)
    }

    /// `‖x − x_t‖_P = √V`.
    pub fn p_norm(&self, t: f64, x: &[f64]) -> f64 {
        self.value(t, x).sqrt()
    }

    /// Snapshot of the target at `t`, for repeated evaluation at one time.
    pub fn freeze(&self, t: f64) -> FrozenLyapunov<'_> {
        let [xt, xt_dot, xt_ddot] = self.target.derivatives(t);
        FrozenLyapunov {
            lyap: self,
            t,
            xt,
            xt_dot,
            xt_ddot,
        }
    }
}

pub struct FrozenLyapunov<'a> {
    lyap: &'a QuadraticLyapunov,
    pub t: f64,
    xt: Vec<f64>,
    xt_dot: Vec<f64>,
    xt_ddot: Vec<f64>,
}

impl FrozenLyapunov<'_> {
    pub fn value(&self, x: &[f64]) -> f64 {
        let e = sub(x, &self.xt);
        bilinear(&self.lyap.p, self.lyap.n, &e, &e)
    }

    /// `V̇ = 2 eᵀ P (f − ẋ_t)`.
    pub fn rate(&self, f: &dyn FlowMap, x: &[f64]) -> Result<f64> {
        let e = sub(x, &self.xt);
        let fx = f.eval_vec(self.t, x)?;
        let ed = sub(&fx, &self.xt_dot);
        Ok(2.0 * bilinear(&self.lyap.p, self.lyap.n, &e, &ed))
    }

    /// `(V̇, V̈)` with `V̈ = 2 ėᵀ P ė + 2 eᵀ P (ḟ − ẍ_t)`.
    pub fn rate_and_accel(&self, f: &dyn FlowMap, x: &[f64]) -> Result<(f64, f64)> {
        let n = self.lyap.n;
        let p = &self.lyap.p;
        let e = sub(x, &self.xt);
        let fx = f.eval_vec(self.t, x)?;
        let fdot = f.eval_dot_vec(self.t, x)?;
        let ed = sub(&fx, &self.xt_dot);
        let edd = sub(&fdot, &self.xt_ddot);
        let vdot = 2.0 * bilinear(p, n, &e, &ed);
        let vddot = 2.0 * bilinear(p, n, &ed, &ed) + 2.0 * bilinear(p, n, &e, &edd);
        Ok((vdot, vddot))
    }
}

/// Rate function `v(t, x) = V̇(t, x)` along the flow of `f`.
pub fn v_rate(l: &QuadraticLyapunov, f: &dyn FlowMap, t: f64, x: &[f64]) -> Result<f64> {
    l.freeze(t).rate(f, x)
}

/// Second total derivative `V̈(t, x)` along the flow of `f`.
pub fn v_accel(l: &QuadraticLyapunov, f: &dyn FlowMap, t: f64, x: &[f64]) -> Result<f64> {
    Ok(l.freeze(t).rate_and_accel(f, x)?.1)
}

/// Linear comparison rates `β₁(w) = beta1·w`, `β₂(w) = beta2·w` and the
/// maximum dwell time after which an impulse is mandatory.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StabilityRates {
    pub beta1: f64,
    pub beta2: f64,
    #[serde(rename = "dT_max")]
    pub max_dwell: f64,
}

impl StabilityRates {
    pub fn new(beta1: f64, beta2: f64, max_dwell: f64) -> Result<Self> {
        let r = Self {
            beta1,
            beta2,
            max_dwell,
        };
        r.validate()?;
        Ok(r)
    }

    /// Non-strict rates: every strict condition collapses to its plain form.
    pub fn non_strict() -> Self {
        Self {
            beta1: 0.0,
            beta2: 0.0,
            max_dwell: f64::INFINITY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.beta1 >= 0.0) {
            return Err(Error::config("beta1", "must be nonnegative"));
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::config("beta2", "must lie in [0, 1)"));
        }
        if !(self.max_dwell > 0.0) {
            return Err(Error::config("dT_max", "must be positive"));
        }
        Ok(())
    }

    pub fn beta1(&self, w: f64) -> f64 {
        self.beta1 * w
    }

    pub fn beta2(&self, w: f64) -> f64 {
        self.beta2 * w
    }
}

/// Outcome of a scalar `lhs ≤ rhs` test; `margin = lhs − rhs`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Condition {
    pub satisfied: bool,
    pub margin: f64,
}

impl Condition {
    pub fn from_margin(margin: f64) -> Self {
        Self {
            satisfied: margin <= 0.0,
            margin,
        }
    }
}

/// Cell of the four-way partition of impulse opportunities used by the
/// coasting stability argument. `Z1`/`Z3` coast, `Z2`/`Z4` fire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Regime {
    /// Coast certified by the one-step prediction of `V`.
    Z1,
    /// Impulse certified by the one-step prediction of `V` after the dwell.
    Z2,
    /// Coast certified by the rate bound `ψ_v`.
    Z3,
    /// Impulse certified by `ψ_v` over the dwell and a non-increasing jump.
    Z4,
}

impl Regime {
    pub fn is_coast(self) -> bool {
        matches!(self, Regime::Z1 | Regime::Z3)
    }
}

/// Classifier for the partition: a coast is `Z3` when the rate-bound test
/// passes and `Z1` otherwise; an impulse is `Z4` when both rate-bound and jump
/// tests pass and `Z2` otherwise. The four cells are disjoint by construction.
pub fn classify(coast: bool, rate_bound_ok: bool, jump_ok: bool) -> Regime {
    match (coast, rate_bound_ok && (coast || jump_ok)) {
        (true, true) => Regime::Z3,
        (true, false) => Regime::Z1,
        (false, true) => Regime::Z4,
        (false, false) => Regime::Z2,
    }
}

fn strict_beta2(strict: Option<&StabilityRates>, w: f64) -> f64 {
    strict.map(|r| r.beta2(w)).unwrap_or(0.0)
}

fn strict_beta1(strict: Option<&StabilityRates>, w: f64) -> f64 {
    strict.map(|r| r.beta1(w)).unwrap_or(0.0)
}

/// One-step-MPC coast test: `V(t+Δt, p(t+Δt, t, x)) − w ≤ −β₂(w)`.
pub fn mpc_coast_condition(
    l: &QuadraticLyapunov,
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    schedule: &ImpulseSchedule,
    t: f64,
    x: &[f64],
    strict: Option<&StabilityRates>,
) -> Result<Condition> {
    let w = l.value(t, x);
    let tau = t + schedule.dt;
    let xf = flow(f, cfg, tau, t, x)?;
    Ok(Condition::from_margin(
        l.value(tau, &xf) - w + strict_beta2(strict, w),
    ))
}

/// One-step-MPC impulse test:
/// `V(t+ΔT, p(t+ΔT, t, g(t, x, u))) − w ≤ −β₂(w)`.
#[allow(clippy::too_many_arguments)]
pub fn mpc_jump_condition(
    l: &QuadraticLyapunov,
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    jump: &dyn JumpMap,
    schedule: &ImpulseSchedule,
    t: f64,
    x: &[f64],
    u: &[f64],
    strict: Option<&StabilityRates>,
) -> Result<Condition> {
    let w = l.value(t, x);
    let y = jump.apply(t, x, u);
    let tau = t + schedule.dwell;
    let yf = flow(f, cfg, tau, t, &y)?;
    Ok(Condition::from_margin(
        l.value(tau, &yf) - w + strict_beta2(strict, w),
    ))
}

/// Rate-bound flow test `max_j [ψ*_v(t+horizon, t, state)]_j ≤ −β₁(w)`.
///
/// `state` is `x` for a coast and the post-jump `y` for an impulse; `w` is
/// always `V(t, x)` of the pre-jump state.
#[allow(clippy::too_many_arguments)]
pub fn coast_flow_condition(
    bound: &LyapunovRateBound,
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    t: f64,
    state: &[f64],
    horizon: f64,
    n_segments: usize,
    w: f64,
    strict: Option<&StabilityRates>,
) -> Result<Condition> {
    let times = segment_times(t, t + horizon, n_segments);
    let elems = psi_star_points(f, cfg, t, state, &times, |tj, tj1, xj| {
        bound.psi_v(f, tj1, tj, xj)
    })?;
    let worst = elems.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    Ok(Condition::from_margin(worst + strict_beta1(strict, w)))
}

/// Jump test `V(t, g(t, x, u)) − V(t, x) ≤ −β₂(V(t, x))`.
pub fn jump_descent_condition(
    l: &QuadraticLyapunov,
    jump: &dyn JumpMap,
    t: f64,
    x: &[f64],
    u: &[f64],
    strict: Option<&StabilityRates>,
) -> Condition {
    let frozen = l.freeze(t);
    let w = frozen.value(x);
    let y = jump.apply(t, x, u);
    Condition::from_margin(frozen.value(&y) - w + strict_beta2(strict, w))
}

/// True iff the dwell clock has reached the maximum dwell, so the controller
/// must fire a nonzero impulse now.
pub fn max_dwell_trigger(rates: &StabilityRates, schedule: &ImpulseSchedule, sigma: f64) -> bool {
    sigma >= rates.max_dwell - GRID_TOL * schedule.dt
}
