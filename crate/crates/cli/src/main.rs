use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use itcbf::bounding::{Predictor, StateBox};
use itcbf::docking::ScenarioConfig;
use itcbf::harness::{self, ExitStatus, RunManifest};
use itcbf::safety::{check_itcbf, uniform_control_grid, BarrierSpec};
use itcbf::Error;

#[derive(Parser)]
#[command(
    name = "itcbf",
    version,
    about = "Impulsive docking simulations under a minimum dwell time"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a dwell-time x predictor sweep and write per-run artifacts.
    Run(RunArgs),
    /// Search sampled states for points where no impulse keeps a barrier
    /// bound nonpositive over the dwell time.
    Falsify(FalsifyArgs),
    /// Rebuild summary.csv and timing.csv from the run directories in --out.
    Summarize {
        #[arg(long)]
        out: PathBuf,
    },
    /// Print the bundled default scenario.
    DefaultScenario,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file; the bundled default when omitted.
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Comma-separated dwell times (s). An empty value runs nothing.
    #[arg(long = "dT", value_delimiter = ',')]
    dwell: Option<Vec<String>>,
    /// Comma-separated predictors: psi, psi_star.
    #[arg(long, value_delimiter = ',')]
    predictor: Option<Vec<String>>,
    #[arg(long = "n-psi")]
    n_psi: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long = "t-end")]
    t_end: Option<f64>,
    #[arg(long = "log-step")]
    log_step: Option<f64>,
}

#[derive(Args)]
struct FalsifyArgs {
    #[arg(long)]
    scenario: Option<PathBuf>,
    #[arg(long = "dT")]
    dwell: f64,
    #[arg(long, default_value = "psi")]
    predictor: String,
    #[arg(long = "n-psi")]
    n_psi: Option<usize>,
    #[arg(long, default_value_t = 200)]
    samples: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Grid points per control axis.
    #[arg(long, default_value_t = 11)]
    grid: usize,
    /// Half-width of the control grid (m/s).
    #[arg(long, default_value_t = 5.0)]
    radius: f64,
    /// Hill-frame sampling box `xlo,ylo,vxlo,vylo,xhi,yhi,vxhi,vyhi`.
    #[arg(long = "hill-box", value_delimiter = ',', num_args = 8)]
    hill_box: Option<Vec<f64>>,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn load(path: Option<&Path>) -> itcbf::Result<ScenarioConfig> {
    match path {
        Some(p) => ScenarioConfig::load(p),
        None => Ok(ScenarioConfig::default_scenario()),
    }
}

fn parse_list<T, E: std::fmt::Display>(
    field: &str,
    items: &[String],
    f: impl Fn(&str) -> Result<T, E>,
) -> itcbf::Result<Vec<T>> {
    items
        .iter()
        .map(|s| s.trim())
        .filter(|s| !s.is_empty())
        .map(|s| {
            f(s).map_err(|e| Error::Config {
                field: field.into(),
                message: format!("`{s}`: {e}"),
            })
        })
        .collect()
}

fn run(args: RunArgs) -> itcbf::Result<ExitStatus> {
    let scenario = load(args.scenario.as_deref())?;
    let mut m = RunManifest::from_scenario(scenario, args.out);
    if let Some(d) = args.dwell {
        m.dwell = parse_list("--dT", &d, |s| s.parse::<f64>())?;
    }
    if let Some(p) = args.predictor {
        m.predictors = parse_list("--predictor", &p, |s| s.parse::<Predictor>())?;
    }
    m.n_psi = args.n_psi;
    if let Some(s) = args.seed {
        m.seed = s;
    }
    if let Some(t) = args.t_end {
        m.t_end = t;
    }
    if let Some(l) = args.log_step {
        m.log_step = l;
    }
    let report = harness::run(&m)?;
    for r in report.rows() {
        println!(
            "dT={:<6} {:<9} status={:<10} converged={:<5} fuel={:.3} margin={:.3e} impulses={} mean_wall={:.4}s",
            r.dwell,
            r.predictor.name(),
            r.status.name(),
            r.converged,
            r.fuel,
            r.safety_margin,
            r.impulses,
            r.mean_wall_time
        );
        if let Some(e) = &r.error {
            eprintln!("  {e}");
        }
    }
    Ok(report.status)
}

fn falsify(args: FalsifyArgs) -> itcbf::Result<ExitStatus> {
    let scenario = load(args.scenario.as_deref())?.build()?;
    let predictor: Predictor = args.predictor.parse()?;
    let n_psi = args.n_psi.unwrap_or(scenario.config.controller.n_psi);
    let schedule = scenario.config.schedule(args.dwell)?;
    let b = args
        .hill_box
        .unwrap_or_else(|| vec![-1000.0, -10000.0, -2.0, -2.0, 1000.0, -500.0, 2.0, 2.0]);
    let hill_box = StateBox::new(b[..4].to_vec(), b[4..].to_vec())?;
    let t = scenario.config.t0;
    let states = scenario.sample_safe_states(t, &hill_box, args.samples, args.seed, 0.0)?;
    let samples: Vec<(f64, Vec<f64>)> = states.into_iter().map(|x| (t, x)).collect();
    let grid = uniform_control_grid(2, args.grid, args.radius);
    let integrator = scenario.integrator();
    let mut reports = Vec::new();
    for barrier in scenario.barriers() {
        let spec = match predictor {
            Predictor::Psi => BarrierSpec::scalar(barrier),
            Predictor::PsiStar => BarrierSpec::segmented(barrier, n_psi),
        };
        let r = check_itcbf(
            &spec,
            scenario.flow.as_ref(),
            &integrator,
            scenario.jump.as_ref(),
            &schedule,
            &grid,
            &samples,
        )?;
        eprintln!(
            "{}: {} of {} samples flagged",
            r.barrier,
            r.flag_count(),
            r.samples.len()
        );
        reports.push(r);
    }
    let json = serde_json::to_string_pretty(&reports)?;
    match args.out {
        Some(p) => std::fs::write(p, json)?,
        None => println!("{json}"),
    }
    Ok(ExitStatus::Ok)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => run(a),
        Command::Falsify(a) => falsify(a),
        Command::Summarize { out } => harness::summarize_dir(&out).map(|rows| {
            println!("{} runs summarized", rows.len());
            ExitStatus::Ok
        }),
        Command::DefaultScenario => {
            print!("{}", itcbf::docking::DEFAULT_SCENARIO);
            Ok(ExitStatus::Ok)
        }
    };
    match result {
        Ok(status) => ExitCode::from(status.code() as u8),
        Err(e) => {
            eprintln!("error: {e}");
            match e {
                Error::Config { .. } | Error::Schema { .. } | Error::InvalidArgument(_) => {
                    ExitCode::from(ExitStatus::Config.code() as u8)
                }
                Error::Infeasible { .. } => ExitCode::from(ExitStatus::Infeasible.code() as u8),
                _ => ExitCode::FAILURE,
            }
        }
    }
}
