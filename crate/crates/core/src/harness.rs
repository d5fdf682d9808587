//! Sweep runner: one closed-loop simulation per (ΔT, predictor) pair, with
//! per-run CSV/JSON artifacts and a merged summary table.

use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bounding::Predictor;
use crate::docking::{fuel_used, Scenario, ScenarioConfig};
use crate::error::{Error, Result};
use crate::hybrid::{simulate, LogKind, Monitors, SimulationRecord};
use crate::parallel;

/// Barrier values above this count as a safety violation.
pub const SAFETY_TOL: f64 = 1e-6;

pub const TRAJECTORY_FILE: &str = "trajectory.csv";
pub const IMPULSES_FILE: &str = "impulses.csv";
pub const DIAGNOSTICS_FILE: &str = "diagnostics.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const SUMMARY_FILE: &str = "summary.csv";
pub const TIMING_FILE: &str = "timing.csv";

pub const SUMMARY_COLUMNS: [&str; 10] = [
    "dT",
    "predictor",
    "n_psi",
    "status",
    "converged",
    "fuel",
    "safety_margin",
    "impulses",
    "decisions",
    "final_v_ratio",
];

pub const TIMING_COLUMNS: [&str; 6] = [
    "dT",
    "predictor",
    "n_psi",
    "decisions",
    "mean_wall_time",
    "max_wall_time",
];

/// Process exit codes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExitStatus {
    Ok = 0,
    Config = 2,
    Infeasible = 3,
    SafetyViolation = 4,
}

impl ExitStatus {
    pub fn code(self) -> i32 {
        self as i32
    }
}

/// A sweep over dwell times and predictors on one scenario.
#[derive(Debug, Clone)]
pub struct RunManifest {
    pub scenario: ScenarioConfig,
    pub dwell: Vec<f64>,
    pub predictors: Vec<Predictor>,
    pub n_psi: Option<usize>,
    pub out_dir: PathBuf,
    pub seed: u64,
    pub log_step: f64,
    pub t_end: f64,
}

impl RunManifest {
    /// Axes default to the scenario's own sweep.
    pub fn from_scenario(scenario: ScenarioConfig, out_dir: impl Into<PathBuf>) -> Self {
        Self {
            dwell: scenario.dwell_sweep.clone(),
            predictors: scenario.predictors.clone(),
            n_psi: None,
            out_dir: out_dir.into(),
            seed: scenario.seed,
            log_step: scenario.log_step(),
            t_end: scenario.t_end,
            scenario,
        }
    }

    /// The scenario with the manifest's overrides applied.
    pub fn effective_scenario(&self) -> ScenarioConfig {
        let mut s = self.scenario.clone();
        s.seed = self.seed;
        s.log_step = Some(self.log_step);
        s.t_end = self.t_end;
        if let Some(n) = self.n_psi {
            s.controller.n_psi = n;
        }
        s
    }

    pub fn runs(&self) -> Vec<(f64, Predictor)> {
        self.dwell
            .iter()
            .flat_map(|&d| self.predictors.iter().map(move |&p| (d, p)))
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RunStatus {
    Ok,
    Infeasible,
    Failed,
}

impl RunStatus {
    pub fn name(self) -> &'static str {
        match self {
            RunStatus::Ok => "ok",
            RunStatus::Infeasible => "infeasible",
            RunStatus::Failed => "failed",
        }
    }
}

/// One row of the sweep summary.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    #[serde(rename = "dT")]
    pub dwell: f64,
    pub predictor: Predictor,
    pub n_psi: usize,
    pub status: RunStatus,
    pub converged: bool,
    /// Σ‖u_k‖ (m/s).
    pub fuel: f64,
    /// `min_t min_i (−h_i)`.
    pub safety_margin: f64,
    pub impulses: usize,
    pub decisions: usize,
    /// `√V(t_end) / √V(t0)`.
    pub final_v_ratio: f64,
    pub mean_wall_time: f64,
    pub max_wall_time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl SummaryRow {
    pub fn is_safe(&self) -> bool {
        self.safety_margin >= -SAFETY_TOL
    }
}

/// Result of one simulation together with its summary.
#[derive(Debug, Clone)]
pub struct RunOutcome {
    pub row: SummaryRow,
    pub record: SimulationRecord,
}

#[derive(Debug, Clone)]
pub struct SweepReport {
    pub outcomes: Vec<RunOutcome>,
    pub status: ExitStatus,
}

impl SweepReport {
    pub fn rows(&self) -> Vec<SummaryRow> {
        self.outcomes.iter().map(|o| o.row.clone()).collect()
    }
}

pub fn run_dir_name(dwell: f64, predictor: Predictor) -> String {
    format!("dT{}_{}", dwell, predictor.name())
}

/// Simulates one `(ΔT, predictor)` pair on an already built scenario.
pub fn run_single(scenario: &Scenario, dwell: f64, predictor: Predictor) -> Result<RunOutcome> {
    let cfg = &scenario.config;
    let schedule = cfg.schedule(dwell)?;
    let controller = scenario.controller(predictor, None)?;
    let barriers = scenario.barriers();
    let monitors = Monitors {
        barriers: barriers.iter().map(|b| b.as_ref()).collect(),
        lyapunov: Some(&scenario.lyapunov.lyapunov),
    };
    let system = scenario.system();
    let (record, status, error) = match simulate(
        &system,
        &schedule,
        &controller,
        &monitors,
        &scenario.x0,
        cfg.t_end,
        cfg.log_step(),
    ) {
        Ok(r) => (r, RunStatus::Ok, None),
        Err(e) => {
            let status = match e.source {
                Error::Infeasible { .. } => RunStatus::Infeasible,
                _ => RunStatus::Failed,
            };
            let msg = e.source.to_string();
            (*e.partial, status, Some(msg))
        }
    };
    let row = summarize_record(
        scenario,
        &record,
        dwell,
        predictor,
        controller.config.n_psi,
        status,
        error,
    );
    Ok(RunOutcome { row, record })
}

/// Summary of one record.
pub fn summarize_record(
    scenario: &Scenario,
    record: &SimulationRecord,
    dwell: f64,
    predictor: Predictor,
    n_psi: usize,
    status: RunStatus,
    error: Option<String>,
) -> SummaryRow {
    let walls: Vec<f64> = record.decisions.iter().map(|d| d.wall_time).collect();
    let mean = if walls.is_empty() {
        0.0
    } else {
        walls.iter().sum::<f64>() / walls.len() as f64
    };
    let l = &scenario.lyapunov.lyapunov;
    let v0 = l.p_norm(scenario.config.t0, &scenario.x0);
    let ratio = record
        .final_sample()
        .map(|s| l.p_norm(s.t, &s.x) / v0)
        .unwrap_or(f64::NAN);
    SummaryRow {
        dwell,
        predictor,
        n_psi,
        status,
        converged: status == RunStatus::Ok && scenario.converged(record),
        fuel: fuel_used(record),
        safety_margin: -record.max_barrier(),
        impulses: record.impulses.len(),
        decisions: record.decisions.len(),
        final_v_ratio: ratio,
        mean_wall_time: mean,
        max_wall_time: walls.iter().copied().fold(0.0, f64::max),
        error,
    }
}

/// One row per record; `records` pairs each record with its sweep point.
pub fn summarize(
    scenario: &Scenario,
    records: &[(f64, Predictor, usize, &SimulationRecord)],
) -> Vec<SummaryRow> {
    records
        .iter()
        .map(|(d, p, n, r)| summarize_record(scenario, r, *d, *p, *n, RunStatus::Ok, None))
        .collect()
}

fn num(v: f64) -> String {
    format!("{v}")
}

/// Writes the per-run artifacts into `dir`.
pub fn write_run(dir: &Path, scenario: &Scenario, outcome: &RunOutcome) -> Result<()> {
    fs::create_dir_all(dir)?;
    let record = &outcome.record;
    let nb = record.barrier_labels.len();

    let mut w = csv::Writer::from_path(dir.join(TRAJECTORY_FILE))?;
    let mut header: Vec<String> = [
        "t", "x1", "x2", "x3", "x4", "sigma", "hill_x", "hill_y", "hill_vx", "hill_vy", "V",
    ]
    .iter()
    .map(|s| s.to_string())
    .collect();
    header.extend(record.barrier_labels.iter().cloned());
    header.extend(["u1".to_string(), "u2".to_string()]);
    w.write_record(&header)?;
    for s in &record.samples {
        let hill = scenario.to_hill(s.t, &s.x)?;
        let mut row = vec![num(s.t)];
        row.extend(s.x.iter().map(|v| num(*v)));
        row.push(num(s.sigma));
        row.extend([hill.x, hill.y, hill.vx, hill.vy].map(num));
        row.push(num(s.lyapunov.unwrap_or(f64::NAN)));
        row.extend(s.barriers.iter().take(nb).map(|v| num(*v)));
        let u = match (&s.u, s.kind) {
            (Some(u), LogKind::PostJump) => [u[0], u[1]],
            _ => [0.0, 0.0],
        };
        row.extend(u.map(num));
        w.write_record(&row)?;
    }
    w.flush()?;

    let mut w = csv::Writer::from_path(dir.join(IMPULSES_FILE))?;
    w.write_record(["k", "t", "u1", "u2", "du"])?;
    for i in &record.impulses {
        w.write_record([
            i.k.to_string(),
            num(i.t),
            num(i.u[0]),
            num(i.u[1]),
            num(crate::linalg::norm(&i.u)),
        ])?;
    }
    w.flush()?;

    let mut f = BufWriter::new(File::create(dir.join(DIAGNOSTICS_FILE))?);
    for d in &record.decisions {
        let line = serde_json::json!({
            "t": d.t,
            "sigma": d.sigma,
            "branch": d.decision.branch,
            "u": d.decision.u,
            "d": d.decision.slack,
            "objective": d.decision.objective,
            "residuals": d.decision.residuals,
            "regime": d.decision.regime,
            "iterations": d.decision.iterations,
            "evaluations": d.decision.evaluations,
            "wall_time": d.wall_time,
        });
        serde_json::to_writer(&mut f, &line)?;
        f.write_all(b"\n")?;
    }
    f.flush()?;

    let f = BufWriter::new(File::create(dir.join(RUN_FILE))?);
    serde_json::to_writer_pretty(f, &outcome.row)?;
    Ok(())
}

fn sorted(rows: &[SummaryRow]) -> Vec<SummaryRow> {
    let mut rows = rows.to_vec();
    rows.sort_by(|a, b| {
        a.dwell
            .total_cmp(&b.dwell)
            .then_with(|| a.predictor.name().cmp(b.predictor.name()))
            .then_with(|| a.n_psi.cmp(&b.n_psi))
    });
    rows
}

/// Writes `summary.csv` (deterministic) and `timing.csv` (wall clock).
pub fn write_summary(out_dir: &Path, rows: &[SummaryRow]) -> Result<()> {
    fs::create_dir_all(out_dir)?;
    let rows = sorted(rows);
    let mut w = csv::Writer::from_path(out_dir.join(SUMMARY_FILE))?;
    w.write_record(SUMMARY_COLUMNS)?;
    for r in &rows {
        w.write_record([
            num(r.dwell),
            r.predictor.name().to_string(),
            r.n_psi.to_string(),
            r.status.name().to_string(),
            r.converged.to_string(),
            num(r.fuel),
            num(r.safety_margin),
            r.impulses.to_string(),
            r.decisions.to_string(),
            num(r.final_v_ratio),
        ])?;
    }
    w.flush()?;
    let mut w = csv::Writer::from_path(out_dir.join(TIMING_FILE))?;
    w.write_record(TIMING_COLUMNS)?;
    for r in &rows {
        w.write_record([
            num(r.dwell),
            r.predictor.name().to_string(),
            r.n_psi.to_string(),
            r.decisions.to_string(),
            num(r.mean_wall_time),
            num(r.max_wall_time),
        ])?;
    }
    w.flush()?;
    Ok(())
}

/// Overall status: infeasibility first, then safety violations.
pub fn sweep_status(rows: &[SummaryRow]) -> ExitStatus {
    if rows.iter().any(|r| r.status != RunStatus::Ok) {
        ExitStatus::Infeasible
    } else if rows.iter().any(|r| !r.is_safe()) {
        ExitStatus::SafetyViolation
    } else {
        ExitStatus::Ok
    }
}

/// Runs a sweep in parallel and writes every artifact under `out_dir`.
pub fn run(manifest: &RunManifest) -> Result<SweepReport> {
    let scenario = manifest.effective_scenario().build()?;
    for &d in &manifest.dwell {
        scenario.config.schedule(d)?;
    }
    fs::create_dir_all(&manifest.out_dir)?;
    let runs = manifest.runs();
    let outcomes = parallel::map(&runs, |&(d, p)| -> Result<RunOutcome> {
        let o = run_single(&scenario, d, p)?;
        write_run(&manifest.out_dir.join(run_dir_name(d, p)), &scenario, &o)?;
        Ok(o)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    let rows: Vec<SummaryRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    write_summary(&manifest.out_dir, &rows)?;
    Ok(SweepReport {
        status: sweep_status(&rows),
        outcomes,
    })
}

/// Rebuilds the summary tables from the `run.json` files under `out_dir`.
pub fn summarize_dir(out_dir: &Path) -> Result<Vec<SummaryRow>> {
    let mut rows = Vec::new();
    let mut entries: Vec<PathBuf> = fs::read_dir(out_dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.join(RUN_FILE).is_file())
        .collect();
    entries.sort();
    for dir in entries {
        let path = dir.join(RUN_FILE);
        let text = fs::read_to_string(&path)?;
        let row: SummaryRow = serde_json::from_str(&text).map_err(|e| Error::Schema {
            file: path.display().to_string(),
            message: e.to_string(),
        })?;
        rows.push(row);
    }
    write_summary(out_dir, &rows)?;
    Ok(sorted(&rows))
}
