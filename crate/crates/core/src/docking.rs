//! Planar two-body rendezvous benchmark: point-mass gravity, additive velocity
//! impulses, keep-out balls around co-orbiting objects, a half-plane keeping
//! the chaser behind the target, and a Lyapunov function tracking the target.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::bounding::{
    estimate_bound_over, lead_time_bound, Barrier, FrozenBarrier, LyapunovRateBound,
    ObstacleBarrier, Predictor, StateBox,
};
use crate::controller::{ControllerConfig, ImpulsiveController, SolverSettings};
use crate::error::{Error, Result};
use crate::hybrid::{
    FlowMap, HybridSystem, ImpulseSchedule, IntegratorConfig, JumpMap, Method, SimulationRecord,
};
use crate::linalg::{dot, norm, sub};
use crate::stability::QuadraticLyapunov;
use crate::trajectory::{Kinematics, PointTrajectory, StackedReference};

/// Standard gravitational parameter of the Earth (m³/s²).
pub const MU_EARTH: f64 = 3.986004418e14;

/// `ṙ = v`, `v̇ = −μ r / ‖r‖³` in the orbital plane.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TwoBody {
    pub mu: f64,
}

impl TwoBody {
    pub fn new(mu: f64) -> Result<Self> {
        if !(mu > 0.0 && mu.is_finite()) {
            return Err(Error::config(
                "mu",
                "gravitational parameter must be positive",
            ));
        }
        Ok(Self { mu })
    }

    fn inv_r3(&self, t: f64, r: &[f64]) -> Result<(f64, f64)> {
        let r2 = r[0] * r[0] + r[1] * r[1];
        if !(r2 > 0.0) {
            return Err(Error::Singularity {
                what: "gravity field origin",
                t,
            });
        }
        let rn = r2.sqrt();
        Ok((rn, 1.0 / (r2 * rn)))
    }

    pub fn specific_energy(&self, x: &[f64]) -> f64 {
        0.5 * (x[2] * x[2] + x[3] * x[3]) - self.mu / x[0].hypot(x[1])
    }

    pub fn angular_momentum(x: &[f64]) -> f64 {
        x[0] * x[3] - x[1] * x[2]
    }
}

impl FlowMap for TwoBody {
    fn dim(&self) -> usize {
        4
    }

    fn eval(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (_, k) = self.inv_r3(t, &x[..2])?;
        out[0] = x[2];
        out[1] = x[3];
        out[2] = -self.mu * x[0] * k;
        out[3] = -self.mu * x[1] * k;
        Ok(())
    }

    fn eval_dot(&self, t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
        let (rn, k) = self.inv_r3(t, &x[..2])?;
        let (r, v) = (&x[..2], &x[2..4]);
        let rv = dot(r, v) / (rn * rn);
        out[0] = -self.mu * x[0] * k;
        out[1] = -self.mu * x[1] * k;
        for i in 0..2 {
            out[2 + i] = -self.mu * k * (v[i] - 3.0 * r[i] * rv);
        }
        Ok(())
    }
}

/// `g(t, x, u) = (r, v + u)`.
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct AdditiveImpulse;

impl JumpMap for AdditiveImpulse {
    fn control_dim(&self) -> usize {
        2
    }

    fn apply(&self, _t: f64, x: &[f64], u: &[f64]) -> Vec<f64> {
        vec![x[0], x[1], x[2] + u[0], x[3] + u[1]]
    }
}

/// Closed-form propagation of a bound Kepler orbit by the `f` and `g`
/// functions in the eccentric-anomaly difference.
#[derive(Debug, Clone, PartialEq)]
pub struct KeplerOrbit {
    mu: f64,
    t0: f64,
    r0: [f64; 2],
    v0: [f64; 2],
    r0n: f64,
    a: f64,
    n: f64,
    sigma0: f64,
}

impl KeplerOrbit {
    pub fn new(mu: f64, t0: f64, state: [f64; 4]) -> Result<Self> {
        let r0 = [state[0], state[1]];
        let v0 = [state[2], state[3]];
        let r0n = norm(&r0);
        if !(r0n > 0.0) {
            return Err(Error::config(
                "state",
                "orbit passes through the gravity origin",
            ));
        }
        let inv_a = 2.0 / r0n - dot(&v0, &v0) / mu;
        if !(inv_a > 0.0) {
            return Err(Error::config("state", "orbit is not bound (elliptic)"));
        }
        if TwoBody::angular_momentum(&state).abs() <= 1e-12 * r0n * norm(&v0) {
            return Err(Error::config("state", "orbit is rectilinear"));
        }
        let a = 1.0 / inv_a;
        Ok(Self {
            mu,
            t0,
            r0,
            v0,
            r0n,
            a,
            n: (mu / (a * a * a)).sqrt(),
            sigma0: dot(&r0, &v0) / mu.sqrt(),
        })
    }

    /// Circular orbit of radius `radius` at polar angle `phase`, counterclockwise.
    pub fn circular(mu: f64, t0: f64, radius: f64, phase: f64) -> Result<Self> {
        let vc = (mu / radius).sqrt();
        let (s, c) = phase.sin_cos();
        Self::new(mu, t0, [radius * c, radius * s, -vc * s, vc * c])
    }

    pub fn period(&self) -> f64 {
        std::f64::consts::TAU / self.n
    }

    pub fn mean_motion(&self) -> f64 {
        self.n
    }

    pub fn semi_major_axis(&self) -> f64 {
        self.a
    }

    fn solve_anomaly(&self, dt: f64) -> f64 {
        let e_cos = 1.0 - self.r0n / self.a;
        let e_sin = self.sigma0 / self.a.sqrt();
        let m = self.n * dt;
        let mut de = m;
        for _ in 0..60 {
            let (s, c) = de.sin_cos();
            let fval = de - e_cos * s + e_sin * (1.0 - c) - m;
            let fp = 1.0 - e_cos * c + e_sin * s;
            let step = fval / fp;
            de -= step;
            if step.abs() <= 1e-15 * de.abs().max(1.0) {
                break;
            }
        }
        de
    }

    pub fn state_at(&self, t: f64) -> [f64; 4] {
        let dt = t - self.t0;
        if dt == 0.0 {
            return [self.r0[0], self.r0[1], self.v0[0], self.v0[1]];
        }
        let de = self.solve_anomaly(dt);
        let (s, c) = de.sin_cos();
        let half = (0.5 * de).sin();
        let one_minus_c = 2.0 * half * half;
        let rn = self.a + (self.r0n - self.a) * c + self.sigma0 * self.a.sqrt() * s;
        let f = 1.0 - self.a / self.r0n * one_minus_c;
        let g = dt - (de - s) / self.n;
        let fd = -(self.mu * self.a).sqrt() * s / (rn * self.r0n);
        let gd = 1.0 - self.a / rn * one_minus_c;
        [
            f * self.r0[0] + g * self.v0[0],
            f * self.r0[1] + g * self.v0[1],
            fd * self.r0[0] + gd * self.v0[0],
            fd * self.r0[1] + gd * self.v0[1],
        ]
    }
}

impl PointTrajectory for KeplerOrbit {
    fn dim(&self) -> usize {
        2
    }

    fn kinematics(&self, t: f64) -> Kinematics {
        let x = self.state_at(t);
        let (r, v) = (&x[..2], &x[2..4]);
        let r2 = dot(r, r);
        let k = self.mu / (r2 * r2.sqrt());
        let rv = dot(r, v) / r2;
        Kinematics {
            pos: r.to_vec(),
            vel: v.to_vec(),
            acc: vec![-k * r[0], -k * r[1]],
            jerk: vec![-k * (v[0] - 3.0 * r[0] * rv), -k * (v[1] - 3.0 * r[1] * rv)],
        }
    }
}

/// Chaser position and velocity relative to the target in the rotating
/// frame with radial axis `x` and along-track axis `y` (m, m/s).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HillFrameState {
    pub x: f64,
    pub y: f64,
    pub vx: f64,
    pub vy: f64,
}

struct HillAxes {
    radial: [f64; 2],
    along: [f64; 2],
    omega: f64,
}

fn hill_axes(target: &[f64]) -> Result<HillAxes> {
    let r = &target[..2];
    let rn = norm(r);
    if !(rn > 0.0) {
        return Err(Error::Singularity {
            what: "target radius",
            t: f64::NAN,
        });
    }
    let h = TwoBody::angular_momentum(target);
    let radial = [r[0] / rn, r[1] / rn];
    let sgn = if h >= 0.0 { 1.0 } else { -1.0 };
    Ok(HillAxes {
        radial,
        along: [-sgn * radial[1], sgn * radial[0]],
        omega: h / (rn * rn),
    })
}

/// Inertial chaser state `x` to the Hill frame of the target state `xt`.
pub fn to_hill_frame(x: &[f64], xt: &[f64]) -> Result<HillFrameState> {
    let ax = hill_axes(xt)?;
    let rho = sub(&x[..2], &xt[..2]);
    let dv = sub(&x[2..4], &xt[2..4]);
    // Transport term ω × ρ with ω along the orbit normal.
    let rel = [dv[0] + ax.omega * rho[1], dv[1] - ax.omega * rho[0]];
    Ok(HillFrameState {
        x: dot(&rho, &ax.radial),
        y: dot(&rho, &ax.along),
        vx: dot(&rel, &ax.radial),
        vy: dot(&rel, &ax.along),
    })
}

pub fn from_hill_frame(hill: &HillFrameState, xt: &[f64]) -> Result<[f64; 4]> {
    let ax = hill_axes(xt)?;
    let rho = [
        hill.x * ax.radial[0] + hill.y * ax.along[0],
        hill.x * ax.radial[1] + hill.y * ax.along[1],
    ];
    let rel = [
        hill.vx * ax.radial[0] + hill.vy * ax.along[0],
        hill.vx * ax.radial[1] + hill.vy * ax.along[1],
    ];
    Ok([
        xt[0] + rho[0],
        xt[1] + rho[1],
        xt[2] + rel[0] - ax.omega * rho[1],
        xt[3] + rel[1] + ax.omega * rho[0],
    ])
}

/// `κ₅ = (r − r₅)ᵀ ṙ₅/‖ṙ₅‖ ≤ 0` with `h₅ = κ₅ + γκ̇₅`.
#[derive(Clone)]
pub struct BehindTargetBarrier {
    pub label: String,
    pub gamma: f64,
    pub kappa_ddot_max: f64,
    pub target: Arc<dyn PointTrajectory>,
}

impl std::fmt::Debug for BehindTargetBarrier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BehindTargetBarrier")
            .field("label", &self.label)
            .field("gamma", &self.gamma)
            .field("kappa_ddot_max", &self.kappa_ddot_max)
            .finish_non_exhaustive()
    }
}

struct FrozenBehind {
    gamma: f64,
    kappa_ddot_max: f64,
    t: f64,
    pos: [f64; 2],
    vel: [f64; 2],
    acc: [f64; 2],
    e: [f64; 2],
    e_dot: [f64; 2],
    e_ddot: [f64; 2],
}

impl BehindTargetBarrier {
    pub fn new(
        label: impl Into<String>,
        gamma: f64,
        kappa_ddot_max: f64,
        target: Arc<dyn PointTrajectory>,
    ) -> Result<Self> {
        let label = label.into();
        if !(gamma > 0.0) {
            return Err(Error::config(
                format!("{label}.gamma"),
                "lead time must be positive",
            ));
        }
        if !(kappa_ddot_max >= 0.0) {
            return Err(Error::config(
                format!("{label}.kappa_ddot_max"),
                "must be nonnegative",
            ));
        }
        Ok(Self {
            label,
            gamma,
            kappa_ddot_max,
            target,
        })
    }

    fn frozen(&self, t: f64) -> Result<FrozenBehind> {
        let k = self.target.kinematics(t);
        let s = norm(&k.vel);
        if !(s > 0.0) {
            return Err(Error::Singularity {
                what: "target velocity direction",
                t,
            });
        }
        let e = [k.vel[0] / s, k.vel[1] / s];
        let s_dot = dot(&e, &k.acc);
        let e_dot = [(k.acc[0] - e[0] * s_dot) / s, (k.acc[1] - e[1] * s_dot) / s];
        let s_ddot = dot(&e_dot, &k.acc) + dot(&e, &k.jerk);
        let e_ddot = [
            (k.jerk[0] - 2.0 * e_dot[0] * s_dot - e[0] * s_ddot) / s,
            (k.jerk[1] - 2.0 * e_dot[1] * s_dot - e[1] * s_ddot) / s,
        ];
        Ok(FrozenBehind {
            gamma: self.gamma,
            kappa_ddot_max: self.kappa_ddot_max,
            t,
            pos: [k.pos[0], k.pos[1]],
            vel: [k.vel[0], k.vel[1]],
            acc: [k.acc[0], k.acc[1]],
            e,
            e_dot,
            e_ddot,
        })
    }

    pub fn kappa(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.frozen(t)?.derivs(x).0)
    }

    pub fn kappa_dot(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.frozen(t)?.derivs(x).1)
    }

    pub fn kappa_ddot(&self, t: f64, x: &[f64], f: &dyn FlowMap) -> Result<f64> {
        self.frozen(t)?.kappa_ddot(x, f)
    }
}

impl FrozenBehind {
    fn derivs(&self, x: &[f64]) -> (f64, f64) {
        let d = [x[0] - self.pos[0], x[1] - self.pos[1]];
        let dv = [x[2] - self.vel[0], x[3] - self.vel[1]];
        (dot(&d, &self.e), dot(&dv, &self.e) + dot(&d, &self.e_dot))
    }

    fn kappa_ddot(&self, x: &[f64], f: &dyn FlowMap) -> Result<f64> {
        let fx = f.eval_vec(self.t, x)?;
        let d = [x[0] - self.pos[0], x[1] - self.pos[1]];
        let dv = [x[2] - self.vel[0], x[3] - self.vel[1]];
        let da = [fx[2] - self.acc[0], fx[3] - self.acc[1]];
        Ok(dot(&da, &self.e) + 2.0 * dot(&dv, &self.e_dot) + dot(&d, &self.e_ddot))
    }
}

impl FrozenBarrier for FrozenBehind {
    fn h(&self, x: &[f64]) -> Result<f64> {
        let (k, kd) = self.derivs(x);
        Ok(k + self.gamma * kd)
    }

    fn psi(&self, delta: f64, x: &[f64]) -> Result<f64> {
        let (k, kd) = self.derivs(x);
        Ok(lead_time_bound(
            k,
            kd,
            self.gamma,
            delta,
            self.kappa_ddot_max,
        ))
    }
}

impl Barrier for BehindTargetBarrier {
    fn label(&self) -> &str {
        &self.label
    }

    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenBarrier + '_>> {
        Ok(Box::new(self.frozen(t)?))
    }
}

/// Output of [`Scenario::calibrate`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Calibration {
    pub kappa_ddot_max: Vec<(String, f64)>,
    pub v_dddot_max: f64,
}

/// Total Δv of a run: `Σ_k ‖u_k‖` (m/s).
pub fn fuel_used(record: &SimulationRecord) -> f64 {
    record.impulses.iter().fold(0.0, |s, i| s + norm(&i.u))
}

// ---------------------------------------------------------------------------
// Configuration

fn default_mu() -> f64 {
    MU_EARTH
}
fn default_convergence() -> f64 {
    1e-2
}
fn default_tol() -> f64 {
    1e-10
}
fn default_n_psi() -> usize {
    10
}
fn default_one() -> usize {
    1
}
fn default_predictors() -> Vec<Predictor> {
    vec![Predictor::Psi, Predictor::PsiStar]
}

/// Initial state given either inertially or relative to the target in its
/// Hill frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitialState {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hill: Option<[f64; 4]>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TargetConfig {
    /// Inertial initial state; overrides `radius`/`phase`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<[f64; 4]>,
    /// Circular-orbit radius (m).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub radius: Option<f64>,
    #[serde(default)]
    pub phase: f64,
}

/// A keep-out ball whose center flies a Kepler orbit. `hill` places the
/// center at `(x, y)` in the target's Hill frame at rest relative to it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ObstacleConfig {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub state: Option<[f64; 4]>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub hill: Option<[f64; 2]>,
    pub rho: f64,
    pub gamma: f64,
    pub kappa_ddot_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HalfPlaneConfig {
    pub gamma: f64,
    pub kappa_ddot_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LyapunovConfig {
    /// Diagonal of `P`; ignored when `p` is given.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p_diag: Option<Vec<f64>>,
    /// Full `P` as rows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub p: Option<Vec<Vec<f64>>>,
    pub v_dddot_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ControllerSettings {
    pub gamma1: f64,
    pub gamma2: f64,
    pub slack_weight: f64,
    #[serde(default = "default_n_psi")]
    pub n_psi: usize,
    #[serde(default = "default_one")]
    pub n_psi_v: usize,
    #[serde(default)]
    pub solver: Option<SolverSettings>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorSettings {
    #[serde(default = "default_tol")]
    pub abs_tol: f64,
    #[serde(default = "default_tol")]
    pub rel_tol: f64,
}

impl Default for IntegratorSettings {
    fn default() -> Self {
        Self {
            abs_tol: default_tol(),
            rel_tol: default_tol(),
        }
    }
}

/// Scenario file contents. All quantities SI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    #[serde(default = "default_mu")]
    pub mu: f64,
    #[serde(default)]
    pub t0: f64,
    pub t_end: f64,
    /// Controller sample period Δt (s).
    pub dt: f64,
    /// Dwell times ΔT swept by `run` (s).
    #[serde(rename = "dT")]
    pub dwell_sweep: Vec<f64>,
    #[serde(default = "default_predictors")]
    pub predictors: Vec<Predictor>,
    #[serde(default)]
    pub seed: u64,
    /// Defaults to `dt / 3`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log_step: Option<f64>,
    /// Converged when `√V(t_end) ≤ convergence_radius · √V(t0)`.
    #[serde(default = "default_convergence")]
    pub convergence_radius: f64,
    pub target: TargetConfig,
    pub chaser: InitialState,
    pub obstacles: Vec<ObstacleConfig>,
    pub behind: HalfPlaneConfig,
    pub lyapunov: LyapunovConfig,
    pub controller: ControllerSettings,
    #[serde(default)]
    pub integrator: IntegratorSettings,
}

/// Bundled default scenario.
pub const DEFAULT_SCENARIO: &str = include_str!("../scenarios/default.toml");

impl ScenarioConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config {
            field: e
                .span()
                .map(|s| {
                    let line = text[..s.start.min(text.len())].matches('\n').count() + 1;
                    format!("line {line}")
                })
                .unwrap_or_else(|| "scenario".into()),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config { field, message } => Error::Config {
                field: format!("{}: {field}", path.display()),
                message,
            },
            other => other,
        })
    }

    pub fn default_scenario() -> Self {
        Self::from_toml(DEFAULT_SCENARIO).expect("bundled scenario parses")
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("scenario serializes")
    }

    pub fn log_step(&self) -> f64 {
        self.log_step.unwrap_or(self.dt / 3.0)
    }

    pub fn schedule(&self, dwell: f64) -> Result<ImpulseSchedule> {
        ImpulseSchedule::new(self.t0, self.dt, dwell)
    }

    pub fn build(&self) -> Result<Scenario> {
        Scenario::new(self.clone())
    }
}

/// Runtime objects of a scenario.
#[derive(Clone)]
pub struct Scenario {
    pub config: ScenarioConfig,
    pub flow: Arc<TwoBody>,
    pub jump: Arc<AdditiveImpulse>,
    pub target: Arc<KeplerOrbit>,
    pub obstacles: Vec<Arc<ObstacleBarrier>>,
    pub behind: Arc<BehindTargetBarrier>,
    pub lyapunov: LyapunovRateBound,
    pub x0: Vec<f64>,
}

impl Scenario {
    pub fn new(config: ScenarioConfig) -> Result<Self> {
        let c = &config;
        let flow = TwoBody::new(c.mu)?;
        if !(c.dt > 0.0) {
            return Err(Error::config("dt", "must be positive"));
        }
        if !(c.t_end >= c.t0) {
            return Err(Error::config("t_end", "must not precede t0"));
        }
        if !(c.convergence_radius > 0.0) {
            return Err(Error::config("convergence_radius", "must be positive"));
        }
        if let Some(l) = c.log_step {
            if !(l > 0.0) {
                return Err(Error::config("log_step", "must be positive"));
            }
        }
        for &d in &c.dwell_sweep {
            c.schedule(d)
                .map_err(|e| Error::config("dT", e.to_string()))?;
        }
        let target_state = match (c.target.state, c.target.radius) {
            (Some(s), _) => s,
            (None, Some(r)) => KeplerOrbit::circular(c.mu, c.t0, r, c.target.phase)
                .map_err(|e| Error::config("target.radius", e.to_string()))?
                .state_at(c.t0),
            (None, None) => return Err(Error::config("target", "give `state` or `radius`")),
        };
        let target = Arc::new(
            KeplerOrbit::new(c.mu, c.t0, target_state)
                .map_err(|e| Error::config("target.state", e.to_string()))?,
        );
        let x0 = match (c.chaser.state, c.chaser.hill) {
            (Some(s), None) => s.to_vec(),
            (None, Some(h)) => from_hill_frame(
                &HillFrameState {
                    x: h[0],
                    y: h[1],
                    vx: h[2],
                    vy: h[3],
                },
                &target_state,
            )?
            .to_vec(),
            _ => {
                return Err(Error::config(
                    "chaser",
                    "give exactly one of `state` or `hill`",
                ))
            }
        };
        let mut obstacles = Vec::with_capacity(c.obstacles.len());
        for (i, o) in c.obstacles.iter().enumerate() {
            let field = format!("obstacles[{i}]");
            let state = match (o.state, o.hill) {
                (Some(s), None) => s,
                (None, Some(h)) => from_hill_frame(
                    &HillFrameState {
                        x: h[0],
                        y: h[1],
                        vx: 0.0,
                        vy: 0.0,
                    },
                    &target_state,
                )?,
                _ => {
                    return Err(Error::config(
                        field,
                        "give exactly one of `state` or `hill`",
                    ))
                }
            };
            let orbit = KeplerOrbit::new(c.mu, c.t0, state)
                .map_err(|e| Error::config(&field, e.to_string()))?;
            let b = ObstacleBarrier::new(
                format!("h{}", i + 1),
                o.rho,
                o.gamma,
                Arc::new(orbit),
                o.kappa_ddot_max,
            )
            .map_err(|e| Error::config(&field, e.to_string()))?;
            if b.kappa(c.t0, &x0) > 0.0 {
                return Err(Error::config(
                    field,
                    "obstacle contains the chaser's initial position",
                ));
            }
            obstacles.push(Arc::new(b));
        }
        let behind = BehindTargetBarrier::new(
            format!("h{}", c.obstacles.len() + 1),
            c.behind.gamma,
            c.behind.kappa_ddot_max,
            target.clone(),
        )
        .map_err(|e| Error::config("behind", e.to_string()))?;
        let reference = Arc::new(StackedReference(target.clone()));
        let lyap = match (&c.lyapunov.p, &c.lyapunov.p_diag) {
            (Some(rows), _) => {
                if rows.len() != 4 || rows.iter().any(|r| r.len() != 4) {
                    return Err(Error::config("lyapunov.p", "expected 4 rows of 4"));
                }
                QuadraticLyapunov::new(rows.concat(), reference)
            }
            (None, Some(d)) => {
                if d.len() != 4 {
                    return Err(Error::config("lyapunov.p_diag", "expected 4 entries"));
                }
                QuadraticLyapunov::diagonal(d, reference)
            }
            (None, None) => return Err(Error::config("lyapunov", "give `p` or `p_diag`")),
        }
        .map_err(|e| Error::config("lyapunov.p", e.to_string()))?;
        let lyapunov = LyapunovRateBound::new(lyap, c.lyapunov.v_dddot_max)
            .map_err(|e| Error::config("lyapunov.v_dddot_max", e.to_string()))?;
        let s = Self {
            config,
            flow: Arc::new(flow),
            jump: Arc::new(AdditiveImpulse),
            target,
            obstacles,
            behind: Arc::new(behind),
            lyapunov,
            x0,
        };
        s.controller_config(Predictor::Psi)?.validate()?;
        s.integrator().validate()?;
        Ok(s)
    }

    pub fn integrator(&self) -> IntegratorConfig {
        IntegratorConfig {
            method: Method::DormandPrince45,
            abs_tol: self.config.integrator.abs_tol,
            rel_tol: self.config.integrator.rel_tol,
            max_step: self.config.dt,
        }
    }

    pub fn system(&self) -> HybridSystem<'_> {
        HybridSystem {
            flow: self.flow.as_ref(),
            jump: self.jump.as_ref(),
            integrator: self.integrator(),
        }
    }

    /// `h1..h4` obstacles then `h5` behind-target, in label order.
    pub fn barriers(&self) -> Vec<Arc<dyn Barrier>> {
        let mut out: Vec<Arc<dyn Barrier>> = self
            .obstacles
            .iter()
            .map(|o| o.clone() as Arc<dyn Barrier>)
            .collect();
        out.push(self.behind.clone());
        out
    }

    pub fn controller_config(&self, predictor: Predictor) -> Result<ControllerConfig> {
        let c = &self.config.controller;
        let mut solver = c.solver.unwrap_or_default();
        solver.seed ^= self.config.seed;
        Ok(ControllerConfig {
            gamma1: c.gamma1,
            gamma2: c.gamma2,
            slack_weight: c.slack_weight,
            barriers: self.barriers(),
            lyapunov: self.lyapunov.clone(),
            predictor,
            n_psi: c.n_psi,
            n_psi_v: c.n_psi_v,
            solver,
        })
    }

    pub fn controller(
        &self,
        predictor: Predictor,
        n_psi: Option<usize>,
    ) -> Result<ImpulsiveController> {
        let mut cfg = self.controller_config(predictor)?;
        if let Some(n) = n_psi {
            cfg.n_psi = n;
        }
        ImpulsiveController::new(cfg, self.flow.clone(), self.jump.clone(), self.integrator())
    }

    pub fn target_state(&self, t: f64) -> [f64; 4] {
        self.target.state_at(t)
    }

    pub fn to_hill(&self, t: f64, x: &[f64]) -> Result<HillFrameState> {
        to_hill_frame(x, &self.target_state(t))
    }

    pub fn from_hill(&self, t: f64, hill: &HillFrameState) -> Result<Vec<f64>> {
        Ok(from_hill_frame(hill, &self.target_state(t))?.to_vec())
    }

    /// Inertial states at `t` drawn from a Hill-frame box, keeping those in
    /// every barrier's safe set and at least `clearance` outside every ball.
    pub fn sample_safe_states(
        &self,
        t: f64,
        hill_box: &StateBox,
        n: usize,
        seed: u64,
        clearance: f64,
    ) -> Result<Vec<Vec<f64>>> {
        if hill_box.dim() != 4 {
            return Err(Error::InvalidArgument(
                "Hill box must be 4-dimensional".into(),
            ));
        }
        let barriers = self.barriers();
        let mut out = Vec::with_capacity(n);
        let mut round = 0u64;
        while out.len() < n {
            if round > 1000 {
                return Err(Error::InvalidArgument(
                    "could not find enough safe states in the box".into(),
                ));
            }
            for h in hill_box.samples(4 * n + 16, seed.wrapping_add(round)) {
                let x = self.from_hill(
                    t,
                    &HillFrameState {
                        x: h[0],
                        y: h[1],
                        vx: h[2],
                        vy: h[3],
                    },
                )?;
                let clear = self.obstacles.iter().all(|o| o.kappa(t, &x) <= -clearance);
                if !clear {
                    continue;
                }
                let mut safe = true;
                for b in &barriers {
                    if b.h(t, &x)? > 0.0 {
                        safe = false;
                        break;
                    }
                }
                if safe {
                    out.push(x);
                    if out.len() == n {
                        break;
                    }
                }
            }
            round += 1;
        }
        Ok(out)
    }

    /// `V⃛(t, x)` by a central difference of `V̈` along the exact Kepler arc
    /// through `x`.
    pub fn lyapunov_jerk(&self, t: f64, x: &[f64]) -> Result<f64> {
        let orbit = KeplerOrbit::new(self.config.mu, t, [x[0], x[1], x[2], x[3]])?;
        let h = 1e-3 * orbit.period() / std::f64::consts::TAU;
        let l = &self.lyapunov.lyapunov;
        let vdd = |s: f64| crate::stability::v_accel(l, self.flow.as_ref(), s, &orbit.state_at(s));
        Ok((vdd(t + h)? - vdd(t - h)?) / (2.0 * h))
    }

    /// Sampled bounds on `κ̈` of every barrier and on `V⃛` over a box of
    /// `(hill_x, hill_y, hill_vx, hill_vy, t)`, inflated by the safety factor.
    pub fn calibrate(
        &self,
        hill_time_box: &StateBox,
        n_samples: usize,
        seed: u64,
    ) -> Result<Calibration> {
        if hill_time_box.dim() != 5 {
            return Err(Error::InvalidArgument(
                "calibration box is (x, y, vx, vy, t)".into(),
            ));
        }
        let samples = hill_time_box.samples(n_samples, seed);
        let states: Vec<(f64, Vec<f64>)> = samples
            .iter()
            .map(|s| {
                let hill = HillFrameState {
                    x: s[0],
                    y: s[1],
                    vx: s[2],
                    vy: s[3],
                };
                Ok((s[4], self.from_hill(s[4], &hill)?))
            })
            .collect::<Result<_>>()?;
        let packed: Vec<Vec<f64>> = states
            .iter()
            .map(|(t, x)| {
                let mut v = x.clone();
                v.push(*t);
                v
            })
            .collect();
        let f = self.flow.as_ref();
        let mut kappa = Vec::new();
        for o in &self.obstacles {
            let m = estimate_bound_over(
                |v: &[f64]| o.kappa_ddot(v[4], &v[..4], f).unwrap_or(f64::NAN),
                &packed,
            )?;
            kappa.push((o.label.clone(), m.max(0.0)));
        }
        let b = &self.behind;
        let m = estimate_bound_over(
            |v: &[f64]| b.kappa_ddot(v[4], &v[..4], f).unwrap_or(f64::NAN),
            &packed,
        )?;
        kappa.push((b.label.clone(), m.max(0.0)));
        let v3 = estimate_bound_over(
            |v: &[f64]| self.lyapunov_jerk(v[4], &v[..4]).unwrap_or(f64::NAN),
            &packed,
        )?;
        Ok(Calibration {
            kappa_ddot_max: kappa,
            v_dddot_max: v3.max(0.0),
        })
    }

    /// Gradient in `u` of the penalized impulse objective
    /// [`ImpulsiveController::penalized_objective`], in closed form.
    ///
    /// Only the unsegmented problem is closed-form: the controller must use
    /// the scalar predictor and a single Lyapunov segment.
    #[allow(clippy::too_many_arguments)]
    pub fn penalty_gradient(
        &self,
        ctrl: &ImpulsiveController,
        schedule: &ImpulseSchedule,
        t: f64,
        x: &[f64],
        u: &[f64],
        weight: f64,
    ) -> Result<Vec<f64>> {
        let cfg = &ctrl.config;
        if cfg.predictor != Predictor::Psi || cfg.n_psi_v != 1 {
            return Err(Error::InvalidArgument(
                "closed-form gradient needs the scalar predictor and n_psi_v = 1".into(),
            ));
        }
        let delta = schedule.dwell;
        let y = ctrl.jump.apply(t, x, u);
        let l = &cfg.lyapunov.lyapunov;
        let p = l.matrix();
        let pmul = |v: &[f64]| -> Vec<f64> {
            (0..4)
                .map(|i| (0..4).map(|j| p[4 * i + j] * v[j]).sum())
                .collect()
        };
        let [xt, xt_dot, xt_ddot] = l.target().derivatives(t);
        let e = sub(&y, &xt);
        let ed = sub(&self.flow.eval_vec(t, &y)?, &xt_dot);
        let edd = sub(&self.flow.eval_dot_vec(t, &y)?, &xt_ddot);
        let (pe, ped, pedd) = (pmul(&e), pmul(&ed), pmul(&edd));
        // Gravity gradient G = ∂a/∂r, which is also ∂(ȧ)/∂v.
        let two_body = TwoBody::new(self.config.mu)?;
        let rn = y[0].hypot(y[1]);
        let k = two_body.mu / (rn * rn * rn);
        let rh = [y[0] / rn, y[1] / rn];
        let g = |i: usize, j: usize| k * (3.0 * rh[i] * rh[j] - if i == j { 1.0 } else { 0.0 });

        let frozen = l.freeze(t);
        let w = frozen.value(x);
        let (vd, vdd) = frozen.rate_and_accel(self.flow.as_ref(), &y)?;
        let r1 = vd + vdd.max(0.0) * delta + 0.5 * cfg.lyapunov.v_dddot_max * delta * delta
            - cfg.gamma1 * w;
        let r2 = frozen.value(&y) - cfg.gamma2 * w;

        let mut grad: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let slack = 0.0_f64.max(r1).max(r2);
        if slack > 0.0 {
            let active: Vec<f64> = if r1 >= r2 {
                (0..2)
                    .map(|i| {
                        let dvd = 2.0 * ped[2 + i] + 2.0 * pe[i];
                        let dvdd = 4.0 * ped[i]
                            + 2.0 * pedd[2 + i]
                            + 2.0 * (g(i, 0) * pe[2] + g(i, 1) * pe[3]);
                        dvd + if vdd > 0.0 { delta * dvdd } else { 0.0 }
                    })
                    .collect()
            } else {
                (0..2).map(|i| 2.0 * pe[2 + i]).collect()
            };
            for i in 0..2 {
                grad[i] += 2.0 * cfg.slack_weight * slack * active[i];
            }
        }

        let margin = cfg.solver.barrier_margin;
        let mut add_barrier =
            |kappa: f64, kappa_dot: f64, dkd: [f64; 2], gamma: f64, kdd_max: f64| {
                let h = kappa + gamma * kappa_dot;
                let end = kappa
                    + (gamma + delta) * kappa_dot
                    + (0.5 * delta * delta + gamma * delta) * kdd_max;
                let (psi, lead) = if end >= h {
                    (end, gamma + delta)
                } else {
                    (h, gamma)
                };
                let excess = psi + margin;
                if excess > 0.0 {
                    for i in 0..2 {
                        grad[i] += 2.0 * weight * excess * lead * dkd[i];
                    }
                }
            };
        for o in &self.obstacles {
            let c = o.center.kinematics(t);
            let d = sub(&y[..2], &c.pos);
            let dist = norm(&d);
            let eh = [d[0] / dist, d[1] / dist];
            add_barrier(
                o.kappa(t, &y),
                o.kappa_dot(t, &y)?,
                [-eh[0], -eh[1]],
                o.gamma,
                o.kappa_ddot_max,
            );
        }
        let b = &self.behind;
        let vel = b.target.kinematics(t).vel;
        let s = norm(&vel);
        add_barrier(
            b.kappa(t, &y)?,
            b.kappa_dot(t, &y)?,
            [vel[0] / s, vel[1] / s],
            b.gamma,
            b.kappa_ddot_max,
        );
        Ok(grad)
    }

    /// Whether `√V(t_end, x_end) ≤ convergence_radius · √V(t0, x0)`.
    pub fn converged(&self, record: &SimulationRecord) -> bool {
        let Some(last) = record.final_sample() else {
            return false;
        };
        let l = &self.lyapunov.lyapunov;
        l.p_norm(last.t, &last.x)
            <= self.config.convergence_radius * l.p_norm(self.config.t0, &self.x0)
    }
}
