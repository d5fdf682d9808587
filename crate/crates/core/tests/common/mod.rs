//! Oracles shared by the integration tests.
#![allow(dead_code)]

use itcbf::bounding::{segment_times, StateBox};
use itcbf::docking::{KeplerOrbit, Scenario, ScenarioConfig};
use itcbf::hybrid::{flow_through, is_nonzero, LogKind, SimulationRecord, GRID_TOL};
use itcbf::stability::v_rate;

pub fn default_scenario() -> Scenario {
    ScenarioConfig::default_scenario()
        .build()
        .expect("default scenario builds")
}

/// The Hill-frame box the soundness states are drawn from.
pub fn soundness_box() -> StateBox {
    StateBox::new(
        vec![-1000.0, -10000.0, -1.0, -1.0],
        vec![1000.0, -200.0, 1.0, 1.0],
    )
    .unwrap()
}

#[derive(Debug, Default, Clone)]
pub struct Soundness {
    pub checks: usize,
    pub violations: Vec<String>,
    /// Smallest `ψ − max(true)` seen, over all checks.
    pub tightest: f64,
}

/// Dense check of the scalar and segmented bounds against the true `h_i` and
/// `V̇` along the uncontrolled flow from each state.
pub fn check_soundness(
    s: &Scenario,
    t: f64,
    states: &[Vec<f64>],
    horizons: &[f64],
    dense: usize,
    n_psi: usize,
) -> Soundness {
    let f = s.flow.as_ref();
    let cfg = s.integrator();
    let barriers = s.barriers();
    let lv = &s.lyapunov;
    let mut out = Soundness {
        tightest: f64::INFINITY,
        ..Default::default()
    };
    for (idx, x) in states.iter().enumerate() {
        for &tau in horizons {
            let times: Vec<f64> = (0..dense)
                .map(|i| t + tau * i as f64 / (dense - 1) as f64)
                .collect();
            let traj = flow_through(f, &cfg, t, x, &times).unwrap();
            let seg = segment_times(t, t + tau, n_psi);
            let seg_states = flow_through(f, &cfg, t, x, &seg[..n_psi]).unwrap();
            let mut check =
                |name: &str, truth: &dyn Fn(f64, &[f64]) -> f64, scalar: f64, elems: &[f64]| {
                    let mut worst_gap = f64::INFINITY;
                    for (s_t, xs) in times.iter().zip(&traj) {
                        let v = truth(*s_t, xs);
                        let tol = 1e-6 + 1e-9 * v.abs();
                        if v > scalar + tol {
                            out.violations.push(format!(
                                "{name}: state {idx}, horizon {tau}, s = {s_t}: {v} > psi {scalar}"
                            ));
                        }
                        // Segments containing s_t (two at a shared endpoint).
                        let bound = (0..n_psi)
                            .filter(|j| *s_t >= seg[*j] - 1e-9 && *s_t <= seg[j + 1] + 1e-9)
                            .map(|j| elems[j])
                            .fold(f64::NEG_INFINITY, f64::max);
                        if v > bound + tol {
                            out.violations.push(format!(
                                "{name}: state {idx}, horizon {tau}, s = {s_t}: {v} > psi* {bound}"
                            ));
                        }
                        worst_gap = worst_gap.min(scalar - v);
                    }
                    out.checks += 1;
                    out.tightest = out.tightest.min(worst_gap);
                };
            for b in &barriers {
                let scalar = b.psi(t + tau, t, x).unwrap();
                let elems: Vec<f64> = (0..n_psi)
                    .map(|j| b.psi(seg[j + 1], seg[j], &seg_states[j]).unwrap())
                    .collect();
                check(b.label(), &|st, xs| b.h(st, xs).unwrap(), scalar, &elems);
            }
            let scalar = lv.psi_v(f, t + tau, t, x).unwrap();
            let elems: Vec<f64> = (0..n_psi)
                .map(|j| lv.psi_v(f, seg[j + 1], seg[j], &seg_states[j]).unwrap())
                .collect();
            check(
                "v_dot",
                &|st, xs| v_rate(&lv.lyapunov, f, st, xs).unwrap(),
                scalar,
                &elems,
            );
        }
    }
    out
}

/// Violations of the sample-grid and dwell-time rules in one record.
pub fn grid_violations(r: &SimulationRecord) -> Vec<String> {
    let sch = &r.schedule;
    let q = sch.dwell_steps();
    let tol = GRID_TOL * sch.dt;
    let mut v = Vec::new();
    for d in &r.decisions {
        if (d.t - sch.time_at(d.k)).abs() > tol {
            v.push(format!("decision at t = {} is off grid index {}", d.t, d.k));
        }
        if d.sigma < sch.dwell - tol {
            v.push(format!(
                "decision at t = {} with sigma = {} < dT",
                d.t, d.sigma
            ));
        }
    }
    for (i, imp) in r.impulses.iter().enumerate() {
        if !is_nonzero(&imp.u) {
            v.push(format!("zero impulse recorded at k = {}", imp.k));
        }
        if (imp.t - sch.time_at(imp.k)).abs() > tol {
            v.push(format!(
                "impulse at t = {} is off grid index {}",
                imp.t, imp.k
            ));
        }
        if i > 0 && imp.k - r.impulses[i - 1].k < q {
            v.push(format!(
                "impulses at k = {} and {} are closer than {q} steps",
                r.impulses[i - 1].k,
                imp.k
            ));
        }
        if !r.decisions.iter().any(|d| d.k == imp.k) {
            v.push(format!("impulse at k = {} without a decision", imp.k));
        }
    }
    for s in &r.samples {
        if s.kind == LogKind::PreJump && s.sigma < sch.dwell - tol {
            v.push(format!("jump at t = {} with sigma = {}", s.t, s.sigma));
        }
    }
    v
}

/// Fourth-order central differences of `q` at `t`: first and second derivative.
pub fn central_derivatives(q: impl Fn(f64) -> f64, t: f64, h: f64) -> (f64, f64) {
    let (m2, m1, z, p1, p2) = (q(t - 2.0 * h), q(t - h), q(t), q(t + h), q(t + 2.0 * h));
    let d1 = (8.0 * (p1 - m1) - (p2 - m2)) / (12.0 * h);
    let d2 = (-p2 + 16.0 * p1 - 30.0 * z + 16.0 * m1 - m2) / (12.0 * h * h);
    (d1, d2)
}

/// Exact uncontrolled arc through `(t, x)`.
pub fn arc(s: &Scenario, t: f64, x: &[f64]) -> KeplerOrbit {
    KeplerOrbit::new(s.config.mu, t, [x[0], x[1], x[2], x[3]]).unwrap()
}

pub fn rel_err(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}
