//! Bounding functions: upper bounds `ψ(τ, t, x) ≥ q(s, p(s, t, x))` for all
//! `s ∈ [t, τ]` on scalar quantities `q` along uncontrolled flows.
//!
//! The obstacle barrier `h = κ + γκ̇` is bounded through a constant bound on
//! `κ̈`, and the Lyapunov rate `V̇` through a constant bound on `V⃛`. The
//! segmented predictor splits a horizon into `n_ψ` pieces, propagates the
//! state exactly to each piece's start and applies the base bound there.

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hybrid::{FlowMap, IntegratorConfig, Stepper};
use crate::linalg::{dot, norm, sub};
use crate::parallel;
use crate::stability::{FrozenLyapunov, QuadraticLyapunov};
use crate::trajectory::{Kinematics, PointTrajectory};

/// Inflation applied to sampled maxima by [`estimate_bound`].
pub const SAFETY_FACTOR: f64 = 1.2;

/// Relative distance (in units of the radius) below which the unit vector
/// from an obstacle center is considered undefined.
pub const SINGULAR_RADIUS: f64 = 1e-9;

/// A scalar constraint `h(t, x) ≤ 0` together with its bounding function.
pub trait Barrier: Send + Sync {
    fn label(&self) -> &str;

    /// Binds all time-dependent data at `t` for repeated evaluation.
    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenBarrier + '_>>;

    fn h(&self, t: f64, x: &[f64]) -> Result<f64> {
        self.freeze(t)?.h(x)
    }

    /// Base bound over `[t, tau]`.
    fn psi(&self, tau: f64, t: f64, x: &[f64]) -> Result<f64> {
        self.freeze(t)?.psi(tau - t, x)
    }
}

/// A barrier with its time-dependent data evaluated at a fixed `t`.
pub trait FrozenBarrier: Send + Sync {
    fn h(&self, x: &[f64]) -> Result<f64>;
    /// Bound over `[t, t + delta]`.
    fn psi(&self, delta: f64, x: &[f64]) -> Result<f64>;
}

/// `max{ κ + γκ̇, κ + (γ+δ)κ̇ + (δ²/2 + γδ)·κ̈_max }`.
///
/// Along any flow with `κ̈ ≤ κ̈_max`, `κ + γκ̇` at time `t + s` is bounded by a
/// convex quadratic in `s`, so its maximum over `[0, δ]` is at an endpoint.
pub fn lead_time_bound(
    kappa: f64,
    kappa_dot: f64,
    gamma: f64,
    delta: f64,
    kappa_ddot_max: f64,
) -> f64 {
    let h = kappa + gamma * kappa_dot;
    let end = kappa
        + (gamma + delta) * kappa_dot
        + (0.5 * delta * delta + gamma * delta) * kappa_ddot_max;
    h.max(end)
}

fn split(x: &[f64], m: usize) -> (&[f64], &[f64]) {
    (&x[..m], &x[m..2 * m])
}

/// Keep-out ball of radius `rho` around a moving center, with lead time
/// `gamma`: `κ = ρ − ‖r − r₀(t)‖`, `h = κ + γκ̇`.
#[derive(Clone)]
pub struct ObstacleBarrier {
    pub label: String,
    pub rho: f64,
    pub gamma: f64,
    pub center: Arc<dyn PointTrajectory>,
    pub kappa_ddot_max: f64,
}

impl std::fmt::Debug for ObstacleBarrier {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ObstacleBarrier")
            .field("label", &self.label)
            .field("rho", &self.rho)
            .field("gamma", &self.gamma)
            .field("kappa_ddot_max", &self.kappa_ddot_max)
            .finish_non_exhaustive()
    }
}

impl ObstacleBarrier {
    pub fn new(
        label: impl Into<String>,
        rho: f64,
        gamma: f64,
        center: Arc<dyn PointTrajectory>,
        kappa_ddot_max: f64,
    ) -> Result<Self> {
        let label = label.into();
        if !(rho > 0.0) {
            return Err(Error::config(
                format!("{label}.rho"),
                "radius must be positive",
            ));
        }
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
            rho,
            gamma,
            center,
            kappa_ddot_max,
        })
    }

    fn m(&self) -> usize {
        self.center.dim()
    }

    pub fn kappa(&self, t: f64, x: &[f64]) -> f64 {
        let c = self.center.kinematics(t);
        self.rho - norm(&sub(&x[..self.m()], &c.pos))
    }

    fn frozen(&self, t: f64) -> FrozenObstacle<'_> {
        FrozenObstacle {
            b: self,
            t,
            c: self.center.kinematics(t),
        }
    }

    pub fn kappa_dot(&self, t: f64, x: &[f64]) -> Result<f64> {
        Ok(self.frozen(t).derivs(x)?.1)
    }

    /// Second total derivative of κ along the flow of `f`.
    pub fn kappa_ddot(&self, t: f64, x: &[f64], f: &dyn FlowMap) -> Result<f64> {
        self.frozen(t).kappa_ddot(x, f)
    }

    pub fn psi_h(&self, tau: f64, t: f64, x: &[f64]) -> Result<f64> {
        self.frozen(t).psi(tau - t, x)
    }
}

struct FrozenObstacle<'a> {
    b: &'a ObstacleBarrier,
    t: f64,
    c: Kinematics,
}

impl FrozenObstacle<'_> {
    /// `(κ, κ̇, unit vector e, distance)`.
    fn derivs(&self, x: &[f64]) -> Result<(f64, f64, Vec<f64>, f64)> {
        let (r, v) = split(x, self.b.m());
        let d = sub(r, &self.c.pos);
        let dist = norm(&d);
        if dist < SINGULAR_RADIUS * self.b.rho {
            return Err(Error::Singularity {
                what: "obstacle unit vector",
                t: self.t,
            });
        }
        let e: Vec<f64> = d.iter().map(|v| v / dist).collect();
        let dv = sub(v, &self.c.vel);
        Ok((self.b.rho - dist, -dot(&e, &dv), e, dist))
    }

    fn kappa_ddot(&self, x: &[f64], f: &dyn FlowMap) -> Result<f64> {
        let m = self.b.m();
        let (_, _, e, dist) = self.derivs(x)?;
        let dv = sub(&x[m..2 * m], &self.c.vel);
        let fx = f.eval_vec(self.t, x)?;
        let da = sub(&fx[m..2 * m], &self.c.acc);
        let radial = dot(&e, &dv);
        Ok(-(dot(&dv, &dv) - radial * radial) / dist - dot(&e, &da))
    }
}

impl FrozenBarrier for FrozenObstacle<'_> {
    fn h(&self, x: &[f64]) -> Result<f64> {
        let (k, kd, _, _) = self.derivs(x)?;
        Ok(k + self.b.gamma * kd)
    }

    fn psi(&self, delta: f64, x: &[f64]) -> Result<f64> {
        let (k, kd, _, _) = self.derivs(x)?;
        Ok(lead_time_bound(
            k,
            kd,
            self.b.gamma,
            delta,
            self.b.kappa_ddot_max,
        ))
    }
}

impl Barrier for ObstacleBarrier {
    fn label(&self) -> &str {
        &self.label
    }

    fn freeze(&self, t: f64) -> Result<Box<dyn FrozenBarrier + '_>> {
        Ok(Box::new(self.frozen(t)))
    }
}

/// Bound on the Lyapunov rate:
/// `ψ_v(t+δ, t, x) = V̇ + max{0, V̈}·δ + ½·V⃛_max·δ²`.
#[derive(Debug, Clone)]
pub struct LyapunovRateBound {
    pub lyapunov: QuadraticLyapunov,
    pub v_dddot_max: f64,
}

impl LyapunovRateBound {
    pub fn new(lyapunov: QuadraticLyapunov, v_dddot_max: f64) -> Result<Self> {
        if !(v_dddot_max >= 0.0) {
            return Err(Error::config("v_dddot_max", "must be nonnegative"));
        }
        Ok(Self {
            lyapunov,
            v_dddot_max,
        })
    }

    pub fn psi_v(&self, f: &dyn FlowMap, tau: f64, t: f64, x: &[f64]) -> Result<f64> {
        self.psi_v_frozen(&self.lyapunov.freeze(t), f, tau - t, x)
    }

    pub fn psi_v_frozen(
        &self,
        frozen: &FrozenLyapunov<'_>,
        f: &dyn FlowMap,
        delta: f64,
        x: &[f64],
    ) -> Result<f64> {
        if delta == 0.0 {
            return frozen.rate(f, x);
        }
        let (vd, vdd) = frozen.rate_and_accel(f, x)?;
        Ok(vd + vdd.max(0.0) * delta + 0.5 * self.v_dddot_max * delta * delta)
    }
}

/// Choice of bounding function used over a horizon.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Predictor {
    /// One application of the base bound over the whole horizon.
    Psi,
    /// Segmented: `n_psi` exact predictions, each bounded over its piece.
    PsiStar,
}

impl Predictor {
    pub fn name(self) -> &'static str {
        match self {
            Predictor::Psi => "psi",
            Predictor::PsiStar => "psi_star",
        }
    }
}

impl std::str::FromStr for Predictor {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "psi" => Ok(Predictor::Psi),
            "psi_star" => Ok(Predictor::PsiStar),
            other => Err(Error::InvalidArgument(format!(
                "unknown predictor `{other}` (expected psi or psi_star)"
            ))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentedBoundConfig {
    pub n_psi: usize,
}

impl SegmentedBoundConfig {
    pub fn new(n_psi: usize) -> Result<Self> {
        if n_psi == 0 {
            return Err(Error::config("n_psi", "segment count must be at least 1"));
        }
        Ok(Self { n_psi })
    }
}

/// `τ_j = t + j·(τ − t)/n` for `j = 0..=n`, with the last point exactly `τ`.
pub fn segment_times(t: f64, tau: f64, n: usize) -> Vec<f64> {
    let n = n.max(1);
    let delta = (tau - t) / n as f64;
    let mut out: Vec<f64> = (0..=n).map(|j| t + j as f64 * delta).collect();
    out[n] = tau;
    out
}

/// Evaluates `bound(τ_{j−1}, τ_j, p(τ_{j−1}, t, x))` for consecutive pairs of
/// `times` (which must start at `t`). Segment start states are obtained by
/// one chained propagation.
pub fn psi_star_points<B>(
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    t: f64,
    x: &[f64],
    times: &[f64],
    bound: B,
) -> Result<Vec<f64>>
where
    B: Fn(f64, f64, &[f64]) -> Result<f64>,
{
    let mut stepper = Stepper::new(f, *cfg, t, x);
    let mut out = Vec::with_capacity(times.len().saturating_sub(1));
    for w in times.windows(2) {
        stepper.advance_to(w[0])?;
        out.push(bound(w[0], w[1], stepper.state())?);
    }
    Ok(out)
}

/// Segmented predictor `[ψ*(τ, t, x)]_j = ψ(τ_j, τ_{j−1}, p(τ_{j−1}, t, x))`.
pub fn psi_star<B>(
    base_bound: B,
    f: &dyn FlowMap,
    cfg: &IntegratorConfig,
    seg: SegmentedBoundConfig,
    tau: f64,
    t: f64,
    x: &[f64],
) -> Result<Vec<f64>>
where
    B: Fn(f64, f64, &[f64]) -> Result<f64>,
{
    if !(tau > t) {
        return Err(Error::InvalidArgument(format!(
            "segmented bound needs tau > t (tau = {tau}, t = {t})"
        )));
    }
    let times = segment_times(t, tau, seg.n_psi);
    // bound(start, end, x_start) maps to ψ(end, start, x_start).
    psi_star_points(f, cfg, t, x, &times, base_bound)
}

/// Axis-aligned box in sample space.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateBox {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl StateBox {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() || lo.iter().zip(&hi).any(|(a, b)| !(a <= b)) {
            return Err(Error::InvalidArgument(
                "state box needs lo <= hi componentwise".into(),
            ));
        }
        Ok(Self { lo, hi })
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn corners(&self) -> Vec<Vec<f64>> {
        let n = self.dim();
        if n > 16 {
            return Vec::new();
        }
        (0..1usize << n)
            .map(|mask| {
                (0..n)
                    .map(|i| {
                        if mask >> i & 1 == 1 {
                            self.hi[i]
                        } else {
                            self.lo[i]
                        }
                    })
                    .collect()
            })
            .collect()
    }

    /// Corners followed by `n` uniform samples from a seeded stream.
    pub fn samples(&self, n: usize, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut out = self.corners();
        out.extend((0..n).map(|_| {
            self.lo
                .iter()
                .zip(&self.hi)
                .map(|(a, b)| a + (b - a) * rng.random::<f64>())
                .collect::<Vec<f64>>()
        }));
        out
    }
}

/// Maximum of `quantity` over explicit samples, inflated by [`SAFETY_FACTOR`].
pub fn estimate_bound_over<Q>(quantity: Q, samples: &[Vec<f64>]) -> Result<f64>
where
    Q: Fn(&[f64]) -> f64 + Sync + Send,
{
    if samples.is_empty() {
        return Err(Error::InvalidArgument("no samples".into()));
    }
    let values = parallel::map(samples, |s| quantity(s));
    let mut best = f64::NEG_INFINITY;
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFiniteSample {
                index: i,
                sample: samples[i].clone(),
            });
        }
        best = best.max(*v);
    }
    Ok(SAFETY_FACTOR * best)
}

/// Calibrates a constant bound (e.g. `κ̈_max`, `V⃛_max`) by sampling `quantity`
/// at the box corners plus `n_samples` uniform points.
pub fn estimate_bound<Q>(
    quantity: Q,
    state_box: &StateBox,
    n_samples: usize,
    seed: u64,
) -> Result<f64>
where
    Q: Fn(&[f64]) -> f64 + Sync + Send,
{
    if n_samples == 0 {
        return Err(Error::InvalidArgument(
            "n_samples must be at least 1".into(),
        ));
    }
    estimate_bound_over(quantity, &state_box.samples(n_samples, seed))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::trajectory::FixedPoint;

    fn static_obstacle(rho: f64, gamma: f64, kdd: f64) -> ObstacleBarrier {
        ObstacleBarrier::new("obs", rho, gamma, Arc::new(FixedPoint(vec![0.0, 0.0])), kdd).unwrap()
    }

    struct Free;
    impl FlowMap for Free {
        fn dim(&self) -> usize {
            4
        }
        fn eval(&self, _t: f64, x: &[f64], out: &mut [f64]) -> Result<()> {
            out.copy_from_slice(&[x[2], x[3], 0.0, 0.0]);
            Ok(())
        }
    }

    #[test]
    fn kappa_examples() {
        let b = static_obstacle(1.0, 0.5, 1.0);
        assert_eq!(b.kappa(0.0, &[3.0, 4.0, 0.0, 0.0]), -4.0);
        assert_eq!(b.kappa(0.0, &[0.6, 0.8, 0.0, 0.0]), 0.0);
        assert_eq!(b.kappa(0.0, &[0.0, 0.0, 1.0, 0.0]), 1.0);
        assert!(matches!(
            b.kappa_dot(0.0, &[0.0, 0.0, 1.0, 0.0]),
            Err(Error::Singularity { .. })
        ));
        assert!(b.h(0.0, &[1e-12, 0.0, 0.0, 0.0]).is_err());
    }

    #[test]
    fn kappa_derivative_examples() {
        let b = static_obstacle(1.0, 0.5, 1.0);
        assert_eq!(b.kappa_dot(0.0, &[2.0, 0.0, -1.0, 0.0]).unwrap(), 1.0);
        let x = [2.0, 0.0, 0.0, 1.0];
        assert_eq!(b.kappa_dot(0.0, &x).unwrap(), 0.0);
        assert!((b.kappa_ddot(0.0, &x, &Free).unwrap() + 0.5).abs() < 1e-15);
    }

    #[test]
    fn lead_time_bound_examples() {
        // κ = −4, κ̇ = 2, γ = 0.5 → h = −3; δ = 1, κ̈_max = 1 → max(−3, 0).
        assert_eq!(lead_time_bound(-4.0, 2.0, 0.5, 1.0, 1.0), 0.0);
        assert_eq!(lead_time_bound(-4.0, 2.0, 0.5, 0.0, 1.0), -3.0);
        // r = (5, 0) moving away at 2: κ = −4, κ̇ = −2.
        let b = static_obstacle(1.0, 0.5, 1.0);
        let x = [5.0, 0.0, 2.0, 0.0];
        assert_eq!(b.h(0.0, &x).unwrap(), -5.0);
        assert_eq!(b.psi_h(0.0, 0.0, &x).unwrap(), b.h(0.0, &x).unwrap());
        // Static relative velocity far away: h = κ.
        assert_eq!(b.h(0.0, &[30.0, 40.0, 0.0, 0.0]).unwrap(), -49.0);
    }

    #[test]
    fn h_nonpositive_with_receding_kappa_implies_outside() {
        let b = static_obstacle(2.0, 3.0, 0.0);
        for &(x, y, vx, vy) in &[
            (3.0, 0.0, 0.1, 0.0),
            (0.0, 2.5, 0.0, 0.0),
            (-4.0, 1.0, -1.0, 2.0),
        ] {
            let s = [x, y, vx, vy];
            let kd = b.kappa_dot(0.0, &s).unwrap();
            if b.h(0.0, &s).unwrap() <= 0.0 && kd <= 0.0 {
                assert!(b.kappa(0.0, &s) <= 0.0);
            }
        }
    }

    #[test]
    fn psi_v_plug_in() {
        // V̇ = −2, V̈ = −1 clamped, V⃛_max = 4, δ = 1 → −2 + 0 + 2.
        let vd: f64 = -2.0;
        let vdd: f64 = -1.0;
        assert_eq!(vd + vdd.max(0.0) * 1.0 + 0.5 * 4.0 * 1.0, 0.0);
    }

    #[test]
    fn psi_star_single_segment_and_stationary() {
        let b = static_obstacle(1.0, 0.5, 0.3);
        let cfg = IntegratorConfig::default();
        let bound = |s: f64, e: f64, x: &[f64]| b.psi_h(e, s, x);
        let x = [5.0, 1.0, -0.2, 0.1];
        let one = psi_star(
            bound,
            &Free,
            &cfg,
            SegmentedBoundConfig::new(1).unwrap(),
            4.0,
            0.0,
            &x,
        )
        .unwrap();
        assert_eq!(one, vec![b.psi_h(4.0, 0.0, &x).unwrap()]);

        struct Still;
        impl FlowMap for Still {
            fn dim(&self) -> usize {
                4
            }
            fn eval(&self, _t: f64, _x: &[f64], out: &mut [f64]) -> Result<()> {
                out.fill(0.0);
                Ok(())
            }
        }
        let x = [5.0, 1.0, 0.0, 0.0];
        let many = psi_star(
            bound,
            &Still,
            &cfg,
            SegmentedBoundConfig::new(7).unwrap(),
            4.0,
            0.0,
            &x,
        )
        .unwrap();
        assert_eq!(many.len(), 7);
        assert!(many.iter().all(|v| *v == many[0]));
        assert!(SegmentedBoundConfig::new(0).is_err());
    }

    #[test]
    fn segment_times_endpoints() {
        let ts = segment_times(1.0, 31.0, 10);
        assert_eq!(ts.len(), 11);
        assert_eq!(ts[0], 1.0);
        assert_eq!(ts[10], 31.0);
        assert!((ts[3] - 10.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_bound_examples() {
        let bx = StateBox::new(vec![-1.0, -2.0], vec![3.0, 4.0]).unwrap();
        assert_eq!(
            estimate_bound(|_| 2.5, &bx, 10, 1).unwrap(),
            SAFETY_FACTOR * 2.5
        );
        assert!(estimate_bound(|_| 1.0, &bx, 0, 1).is_err());
        let err =
            estimate_bound(|s| if s[0] > 2.9 { f64::NAN } else { 0.0 }, &bx, 10, 1).unwrap_err();
        assert!(matches!(err, Error::NonFiniteSample { .. }), "{err}");
        // Corners are always sampled: a linear function peaks there.
        let lin = estimate_bound(|s| s[0] + s[1], &bx, 1, 3).unwrap();
        assert!((lin - SAFETY_FACTOR * 7.0).abs() < 1e-12);
    }

    #[test]
    fn estimate_bound_static_obstacle_kappa_ddot() {
        let b = static_obstacle(1.0, 0.5, 0.0);
        // Box away from the obstacle, free flight.
        let bx = StateBox::new(vec![2.0, 2.0, -1.0, -1.0], vec![4.0, 4.0, 1.0, 1.0]).unwrap();
        let est = estimate_bound(|s| b.kappa_ddot(0.0, s, &Free).unwrap(), &bx, 500, 9).unwrap();
        assert!(est.is_finite());
        // Free flight makes κ̈ = −|v⊥|²/d ≤ 0; the maximum is 0 at purely radial motion.
        assert!(est <= 0.0 && est > -0.2, "{est}");
    }
}
