//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! nonzero if any fails.

mod common;

use std::time::Instant;

use itcbf::bounding::Predictor;
use itcbf::docking::{KeplerOrbit, Scenario, ScenarioConfig, TwoBody};
use itcbf::harness::{self, RunManifest, RunStatus, SweepReport, SUMMARY_FILE};
use itcbf::hybrid::{flow, flow_through, is_nonzero, simulate, LogKind, Monitors};
use itcbf::linalg::norm;
use itcbf::stability::{v_accel, v_rate, StabilityRates};
use itcbf::stabilizer::OneStepMpc;

use common::*;

type Criterion<'a> = (&'static str, Box<dyn Fn() -> Outcome + 'a>);

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn sweep(out: &std::path::Path) -> (SweepReport, f64) {
    let m = RunManifest::from_scenario(ScenarioConfig::default_scenario(), out);
    let started = Instant::now();
    let report = harness::run(&m).expect("sweep runs");
    (report, started.elapsed().as_secs_f64())
}

fn safety(s: &Scenario, report: &SweepReport, secs: f64) -> Outcome {
    let mut worst_h = f64::NEG_INFINITY;
    let mut worst_kappa = f64::NEG_INFINITY;
    let mut bad_status = Vec::new();
    for o in &report.outcomes {
        if o.row.status != RunStatus::Ok {
            bad_status.push(format!("dT={} {}", o.row.dwell, o.row.predictor.name()));
        }
        worst_h = worst_h.max(o.record.max_barrier());
        for smp in &o.record.samples {
            for ob in &s.obstacles {
                worst_kappa = worst_kappa.max(ob.kappa(smp.t, &smp.x));
            }
            worst_kappa = worst_kappa.max(s.behind.kappa(smp.t, &smp.x).unwrap());
        }
    }
    let runs = report.outcomes.len();
    let pass = runs == 10
        && bad_status.is_empty()
        && worst_h <= 1e-6
        && worst_kappa <= 1e-6
        && secs < 600.0;
    outcome(
        pass,
        format!(
            "{runs} runs, max h = {worst_h:.3e}, max kappa = {worst_kappa:.3e}, sweep {secs:.1} s, unfinished {bad_status:?}"
        ),
    )
}

fn grid(report: &SweepReport) -> Outcome {
    let mut v = Vec::new();
    let mut impulses = 0;
    for o in &report.outcomes {
        impulses += o.record.impulses.len();
        v.extend(grid_violations(&o.record));
    }
    outcome(
        v.is_empty(),
        format!(
            "{impulses} impulses checked, {} violations {:?}",
            v.len(),
            v.iter().take(3).collect::<Vec<_>>()
        ),
    )
}

fn soundness(s: &Scenario) -> Outcome {
    let t = s.config.t0;
    let states = s
        .sample_safe_states(t, &soundness_box(), 200, 11, 0.0)
        .unwrap();
    let mut horizons = vec![s.config.dt];
    horizons.extend(s.config.dwell_sweep.iter().copied());
    let r = check_soundness(s, t, &states, &horizons, 1000, s.config.controller.n_psi);
    outcome(
        r.violations.is_empty(),
        format!(
            "{} state-horizon-quantity checks at 1000 points, {} violations, tightest gap {:.3e} {:?}",
            r.checks,
            r.violations.len(),
            r.tightest,
            r.violations.iter().take(2).collect::<Vec<_>>()
        ),
    )
}

fn monotonicity() -> Outcome {
    let mut cfg = ScenarioConfig::default_scenario();
    cfg.obstacles.clear();
    let s = cfg.build().unwrap();
    let sched = cfg.schedule(60.0).unwrap();
    let rates = StabilityRates::new(0.0, 0.05, 120.0).unwrap();
    let l = &s.lyapunov.lyapunov;
    let mpc = OneStepMpc::new(
        l.clone(),
        s.flow.clone(),
        s.jump.clone(),
        s.integrator(),
        rates,
    )
    .unwrap();
    let mon = Monitors {
        barriers: vec![],
        lyapunov: Some(l),
    };
    let t_end = 1800.0;
    let r =
        simulate(&s.system(), &sched, &mpc, &mon, &s.x0, t_end, cfg.dt).expect("stabilizer run");
    let v0 = l.value(cfg.t0, &s.x0);
    let failing = r
        .decisions
        .iter()
        .filter(|d| d.decision.residuals[0].value > 0.0)
        .count();
    // Below this V only carries integration noise.
    let floor = 1e-12 * v0;
    let vs: Vec<f64> = r.decisions.iter().map(|d| l.value(d.t, &d.x)).collect();
    let mut increases = 0;
    for w in vs.windows(2) {
        if w[0] > floor && w[1] > w[0] * (1.0 + 1e-8) {
            increases += 1;
        }
    }
    let reached = r
        .decisions
        .iter()
        .find(|d| l.value(d.t, &d.x) < 1e-3 * v0)
        .map(|d| d.t);
    let pass = failing == 0 && increases == 0 && reached.is_some_and(|t| t < t_end);
    outcome(
        pass,
        format!(
            "{} opportunities, {failing} failing conditions, {increases} increases, V < 1e-3 V0 at t = {reached:?}",
            vs.len()
        ),
    )
}

fn trend(report: &SweepReport) -> Outcome {
    let rows = report.rows();
    let largest = |p: Predictor| {
        rows.iter()
            .filter(|r| r.predictor == p && r.converged)
            .map(|r| r.dwell)
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (a_psi, a_star) = (largest(Predictor::Psi), largest(Predictor::PsiStar));
    let fuel = |p: Predictor, d: f64| {
        rows.iter()
            .find(|r| r.predictor == p && r.dwell == d)
            .map(|r| r.fuel)
            .unwrap()
    };
    let mut pairs = Vec::new();
    let mut b = true;
    for large in [300.0, 420.0] {
        for small in [30.0, 45.0] {
            let (f_star, f_psi) = (fuel(Predictor::PsiStar, large), fuel(Predictor::Psi, small));
            b &= f_star < f_psi;
            pairs.push(format!(
                "psi*({large})={f_star:.1} vs psi({small})={f_psi:.1}"
            ));
        }
    }
    let a = a_psi.is_finite() && a_psi < a_star;
    outcome(
        a && b,
        format!(
            "largest converging dT: psi {a_psi}, psi* {a_star}; fuel {}",
            pairs.join(", ")
        ),
    )
}

fn cost(report: &SweepReport) -> Outcome {
    let rows = report.rows();
    let mean = |p: Predictor| {
        rows.iter()
            .find(|r| r.dwell == 45.0 && r.predictor == p)
            .unwrap()
            .mean_wall_time
    };
    let (psi, star) = (mean(Predictor::Psi), mean(Predictor::PsiStar));
    let ratio = star / psi;
    outcome(
        ratio >= 3.0,
        format!("dT=45 mean decision time psi {psi:.2e} s, psi* {star:.2e} s, ratio {ratio:.1}"),
    )
}

fn oracles(s: &Scenario, report: &SweepReport) -> Outcome {
    let mut notes = Vec::new();
    let mut pass = true;

    // Circular orbit against cos/sin over one period.
    let r0: f64 = 6_778_000.0;
    let mu = s.config.mu;
    let n = (mu / r0.powi(3)).sqrt();
    let period = std::f64::consts::TAU / n;
    let exact = |t: f64| {
        [
            r0 * (n * t).cos(),
            r0 * (n * t).sin(),
            -r0 * n * (n * t).sin(),
            r0 * n * (n * t).cos(),
        ]
    };
    let times: Vec<f64> = (1..=24).map(|i| period * i as f64 / 24.0).collect();
    let x0 = exact(0.0);
    let tb = TwoBody::new(mu).unwrap();
    let num = flow_through(&tb, &s.integrator(), 0.0, &x0, &times).unwrap();
    let mut circ = 0.0_f64;
    for (t, x) in times.iter().zip(&num) {
        let e = exact(*t);
        let dp = norm(&[x[0] - e[0], x[1] - e[1]]) / r0;
        let dv = norm(&[x[2] - e[2], x[3] - e[3]]) / (r0 * n);
        circ = circ.max(dp).max(dv);
    }
    pass &= circ <= 1e-8;
    notes.push(format!("circular {circ:.1e}"));

    // Energy and angular momentum between impulses on every sweep run.
    let mut drift_e = 0.0_f64;
    let mut drift_h = 0.0_f64;
    for o in &report.outcomes {
        let mut base: Option<(f64, f64)> = None;
        for smp in &o.record.samples {
            let (e, h) = (
                tb.specific_energy(&smp.x),
                TwoBody::angular_momentum(&smp.x),
            );
            match (smp.kind, base) {
                (LogKind::PostJump, _) | (_, None) => base = Some((e, h)),
                (LogKind::PreJump, Some(_)) | (LogKind::Flow, Some(_)) => {
                    let (e0, h0) = base.unwrap();
                    drift_e = drift_e.max(((e - e0) / e0).abs());
                    drift_h = drift_h.max(((h - h0) / h0).abs());
                }
            }
        }
    }
    pass &= drift_e <= 1e-9 && drift_h <= 1e-9;
    notes.push(format!("energy {drift_e:.1e}, momentum {drift_h:.1e}"));

    // Analytic κ̇, κ̈, V̇, V̈ against differences along the exact arc.
    let t0 = s.config.t0 + 100.0;
    let states = s
        .sample_safe_states(t0, &soundness_box(), 50, 5, 0.0)
        .unwrap();
    let f = s.flow.as_ref();
    let l = &s.lyapunov.lyapunov;
    let mut worst = 0.0_f64;
    for x in &states {
        let orbit = arc(s, t0, x);
        let at = |t: f64| orbit.state_at(t);
        let mut cmp =
            |analytic: f64, fd: f64, floor: f64| worst = worst.max(rel_err(analytic, fd, floor));
        for ob in &s.obstacles {
            let (d1, _) = central_derivatives(|t| ob.kappa(t, &at(t)), t0, 1.0);
            cmp(ob.kappa_dot(t0, x).unwrap(), d1, 1e-3);
            // A wider step keeps position roundoff out of the second difference.
            let (_, d2) = central_derivatives(|t| ob.kappa(t, &at(t)), t0, 4.0);
            cmp(ob.kappa_ddot(t0, x, f).unwrap(), d2, 1e-4);
            let (dd, _) = central_derivatives(|t| ob.kappa_dot(t, &at(t)).unwrap(), t0, 1.0);
            cmp(ob.kappa_ddot(t0, x, f).unwrap(), dd, 1e-4);
        }
        let b = &s.behind;
        let (d1, _) = central_derivatives(|t| b.kappa(t, &at(t)).unwrap(), t0, 1.0);
        cmp(b.kappa_dot(t0, x).unwrap(), d1, 1e-3);
        let (dd, _) = central_derivatives(|t| b.kappa_dot(t, &at(t)).unwrap(), t0, 1.0);
        cmp(b.kappa_ddot(t0, x, f).unwrap(), dd, 1e-4);
        let (d1, _) = central_derivatives(|t| l.value(t, &at(t)), t0, 1.0);
        cmp(v_rate(l, f, t0, x).unwrap(), d1, 1.0);
        let (dd, _) = central_derivatives(|t| v_rate(l, f, t, &at(t)).unwrap(), t0, 1.0);
        cmp(v_accel(l, f, t0, x).unwrap(), dd, 1e-2);
    }
    pass &= worst <= 1e-5;
    notes.push(format!("derivatives {worst:.1e}"));

    // Penalty gradient at the solver's optimum for the first impulses of a run.
    let ctrl = s.controller(Predictor::Psi, None).unwrap();
    let sched = s.config.schedule(45.0).unwrap();
    let run = report
        .outcomes
        .iter()
        .find(|o| o.row.dwell == 45.0 && o.row.predictor == Predictor::Psi)
        .unwrap();
    let solver = ctrl.config.solver;
    let weight =
        solver.penalty_start * solver.penalty_growth.powi(solver.penalty_rounds as i32 - 1);
    let mut worst_grad = 0.0_f64;
    let (mut checked, mut straddled) = (0, 0);
    for d in run
        .record
        .decisions
        .iter()
        .filter(|d| is_nonzero(&d.decision.u))
        .take(8)
    {
        // Optima tend to sit on the switch of max(0, V̈) where the objective
        // has a kink, so the gradient is checked on a ring around each one.
        let u0 = &d.decision.u;
        for th in [None, Some(0.3_f64), Some(1.9), Some(3.5), Some(5.1)] {
            let u: Vec<f64> = match th {
                None => u0.clone(),
                Some(a) => vec![u0[0] + 0.02 * a.cos(), u0[1] + 0.02 * a.sin()],
            };
            let g = s
                .penalty_gradient(&ctrl, &sched, d.t, &d.x, &u, weight)
                .unwrap();
            let mut smooth = true;
            let fd: Vec<f64> = (0..2)
                .map(|i| {
                    let h = 1e-5 * (1.0 + u[i].abs());
                    let at = |du: f64| {
                        let mut v = u.clone();
                        v[i] += du;
                        ctrl.penalized_objective(&sched, d.t, &d.x, &v, weight)
                            .unwrap()
                    };
                    let (f0, fp, fm) = (at(0.0), at(h), at(-h));
                    let (fwd, bwd) = ((fp - f0) / h, (f0 - fm) / h);
                    if (fwd - bwd).abs() > 1e-3 * (1.0 + fwd.abs().max(bwd.abs())) {
                        smooth = false;
                    }
                    (8.0 * (fp - fm) - (at(2.0 * h) - at(-2.0 * h))) / (12.0 * h)
                })
                .collect();
            if !smooth {
                straddled += 1;
                continue;
            }
            let diff = norm(&[g[0] - fd[0], g[1] - fd[1]]);
            let scale = norm(&g).max(norm(&fd)).max(2.0 * norm(&u));
            worst_grad = worst_grad.max(diff / scale);
            checked += 1;
        }
    }
    pass &= checked >= 24 && worst_grad <= 1e-5;
    notes.push(format!(
        "penalty gradient {worst_grad:.1e} at {checked} points, {straddled} on a kink"
    ));

    // Closed-form propagation agrees with the integrator over one period.
    let orbit = KeplerOrbit::new(mu, 0.0, s.x0[..4].try_into().unwrap()).unwrap();
    let xf = flow(f, &s.integrator(), orbit.period(), 0.0, &s.x0).unwrap();
    let ke = orbit.state_at(orbit.period());
    let kep = norm(&[xf[0] - ke[0], xf[1] - ke[1]]) / norm(&ke[..2]);
    pass &= kep <= 1e-8;
    notes.push(format!("kepler {kep:.1e}"));

    outcome(pass, notes.join(", "))
}

fn determinism(first: &std::path::Path) -> Outcome {
    let dir = tempfile::tempdir().unwrap();
    let _ = sweep(dir.path());
    let a = std::fs::read(first.join(SUMMARY_FILE)).unwrap();
    let b = std::fs::read(dir.path().join(SUMMARY_FILE)).unwrap();
    outcome(
        a == b && !a.is_empty(),
        format!("summary.csv {} bytes, identical = {}", a.len(), a == b),
    )
}

fn main() {
    let s = default_scenario();
    let dir = tempfile::tempdir().unwrap();
    let (report, secs) = sweep(dir.path());
    for r in report.rows() {
        println!(
            "  dT={:<4} {:<8} converged={:<5} fuel={:>8.2} margin={:.3e} impulses={} mean_wall={:.2e}s",
            r.dwell,
            r.predictor.name(),
            r.converged,
            r.fuel,
            r.safety_margin,
            r.impulses,
            r.mean_wall_time
        );
    }
    let criteria: Vec<Criterion> = vec![
        ("safety invariance", Box::new(|| safety(&s, &report, secs))),
        ("dwell-time and grid compliance", Box::new(|| grid(&report))),
        ("bound soundness", Box::new(|| soundness(&s))),
        ("Lyapunov monotonicity", Box::new(monotonicity)),
        ("conservatism trend", Box::new(|| trend(&report))),
        ("controller cost ordering", Box::new(|| cost(&report))),
        ("numerical oracles", Box::new(|| oracles(&s, &report))),
        ("determinism", Box::new(|| determinism(dir.path()))),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.iter().enumerate() {
        let o = check();
        if !o.pass {
            failed += 1;
        }
        println!(
            "criterion {} {}: {} ({})",
            i + 1,
            name,
            if o.pass { "PASS" } else { "FAIL" },
            o.detail
        );
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
