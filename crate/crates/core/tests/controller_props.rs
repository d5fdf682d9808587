mod common;

use itcbf::bounding::Predictor;
use itcbf::controller::Branch;
use itcbf::docking::HillFrameState;
use itcbf::linalg::{dot, norm};
use itcbf::Error;

use common::*;

fn hill_state(s: &itcbf::docking::Scenario, t: f64, x: f64, y: f64, vx: f64, vy: f64) -> Vec<f64> {
    s.from_hill(t, &HillFrameState { x, y, vx, vy }).unwrap()
}

#[test]
fn decision_is_deterministic() {
    let s = default_scenario();
    let sched = s.config.schedule(45.0).unwrap();
    for p in [Predictor::Psi, Predictor::PsiStar] {
        let c = s.controller(p, None).unwrap();
        let a = c.decide(&sched, 0.0, 45.0, &s.x0).unwrap();
        let b = c.decide(&sched, 0.0, 45.0, &s.x0).unwrap();
        assert_eq!(a.u, b.u);
        assert_eq!(a.objective.to_bits(), b.objective.to_bits());
    }
}

#[test]
fn coast_exactly_when_coast_residuals_hold() {
    let s = default_scenario();
    let sched = s.config.schedule(45.0).unwrap();
    let c = s.controller(Predictor::Psi, None).unwrap();
    let states = s
        .sample_safe_states(0.0, &soundness_box(), 12, 3, 0.0)
        .unwrap();
    for x in &states {
        let res = c.coast_residuals(&sched, 0.0, x).unwrap();
        let d = c.decide(&sched, 0.0, 45.0, x).unwrap();
        let all_ok = res.iter().all(|r| r.value <= 0.0);
        assert_eq!(d.branch == Branch::Coast, all_ok);
        if d.branch == Branch::Coast {
            assert_eq!(d.u, vec![0.0, 0.0]);
        }
    }
}

#[test]
fn impulse_decision_reports_eliminated_slack() {
    let s = default_scenario();
    let sched = s.config.schedule(45.0).unwrap();
    let c = s.controller(Predictor::Psi, None).unwrap();
    let d = c.decide(&sched, 0.0, 45.0, &s.x0).unwrap();
    assert_eq!(d.branch, Branch::Impulse);
    let ev = c.evaluate_candidate(&sched, 0.0, &s.x0, &d.u).unwrap();
    let [r1, r2] = ev.soft;
    assert_eq!(ev.slack, 0.0_f64.max(r1).max(r2));
    assert!(ev.max_hard() <= c.config.solver.feasibility_tol);
    let j = c.config.slack_weight;
    assert!(
        (ev.objective - (dot(&d.u, &d.u) + j * ev.slack * ev.slack)).abs()
            <= 1e-12 * ev.objective.max(1.0)
    );
    assert_eq!(d.objective, ev.objective);
    // The optimum beats the coast candidate on the objective.
    let zero = c
        .evaluate_candidate(&sched, 0.0, &s.x0, &[0.0, 0.0])
        .unwrap();
    assert!(ev.objective <= zero.objective);
}

#[test]
fn closed_form_penalty_gradient_matches_differences() {
    let s = default_scenario();
    let sched = s.config.schedule(60.0).unwrap();
    let c = s.controller(Predictor::Psi, None).unwrap();
    // Near obstacle h1; the 3 m/s controls push its bound past zero. u = 0 is
    // avoided because V(y) - V(x) has a kink there.
    let x = hill_state(&s, 0.0, -50.0, -8300.0, 0.2, 0.6);
    let weight = 1e5;
    let mut active = 0;
    for (m, th) in [
        (3.0, 0.79),
        (3.0, 1.18),
        (3.0, 1.57),
        (3.0, 1.96),
        (0.7, 4.0),
        (1.5, -0.4),
    ] {
        let u = [m * f64::cos(th), m * f64::sin(th)];
        if c.evaluate_candidate(&sched, 0.0, &x, &u).unwrap().hard[0] > 0.0 {
            active += 1;
        }
        let g = s.penalty_gradient(&c, &sched, 0.0, &x, &u, weight).unwrap();
        for i in 0..2 {
            let h = 1e-5;
            let at = |du: f64| {
                let mut v = u;
                v[i] += du;
                c.penalized_objective(&sched, 0.0, &x, &v, weight).unwrap()
            };
            let fd = (8.0 * (at(h) - at(-h)) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h);
            let scale = g[i].abs().max(fd.abs()).max(1.0);
            assert!(
                (g[i] - fd).abs() / scale < 1e-5,
                "u = {u:?}, component {i}: {} vs {fd}",
                g[i]
            );
        }
    }
    assert_eq!(active, 4);
    let star = s.controller(Predictor::PsiStar, None).unwrap();
    assert!(s
        .penalty_gradient(&star, &sched, 0.0, &x, &[0.0, 0.0], weight)
        .is_err());
}

#[test]
fn infeasible_state_reports_closest_candidate() {
    let s = default_scenario();
    let sched = s.config.schedule(420.0).unwrap();
    let c = s.controller(Predictor::Psi, None).unwrap();
    // 500 m behind the target with h4 directly behind: over 420 s the
    // behind-target bound demands backing off at 8.7 m/s or more while h4's
    // bound demands moving forward at 4.3 m/s or more, both along-track.
    let x = hill_state(&s, 0.0, 0.0, -500.0, 0.0, 0.0);
    match c.solve_impulse(&sched, 0.0, &x) {
        Err(Error::Infeasible {
            best_u,
            worst_residual,
            ..
        }) => {
            assert_eq!(best_u.len(), 2);
            assert!(worst_residual > c.config.solver.feasibility_tol);
        }
        Ok(d) => panic!(
            "expected infeasible, got u = {:?} (|u| = {})",
            d.u,
            norm(&d.u)
        ),
        Err(e) => panic!("unexpected error {e}"),
    }
}
