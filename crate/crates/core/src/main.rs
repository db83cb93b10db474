use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use wds_mpc::scenario::{Scenario, Template, TEMPLATES};
use wds_mpc::simulation::{compare, run_closed_loop, ControllerConfig, SimulationLog};
use wds_mpc::sqp::SolverOptions;

#[derive(Parser)]
#[command(name = "wds-mpc", version, about = "Economic MPC for water distribution networks with interpolated move blocking")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one closed-loop simulation.
    Simulate(RunArgs),
    /// Run the full and the blocked controller on the same scenario and compare.
    Compare(RunArgs),
    /// Write a scenario template with its demand and tariff series.
    GenScenario {
        #[arg(long, default_value = "default-2tank")]
        template: String,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check a scenario and print every violation.
    Validate {
        #[arg(long)]
        scenario: PathBuf,
    },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "lowercase")]
enum Mode {
    Full,
    Idib,
}

#[derive(Args)]
struct RunArgs {
    /// Scenario JSON; its series files are resolved relative to it.
    #[arg(long)]
    scenario: PathBuf,
    /// Controller for `simulate`; `compare` always runs both.
    #[arg(long, value_enum, default_value_t = Mode::Idib)]
    mode: Mode,
    /// Block lengths, comma separated; defaults to the scenario's.
    #[arg(long, value_delimiter = ',')]
    lengths: Option<Vec<usize>>,
    /// Prediction horizon; defaults to the scenario's.
    #[arg(long = "Np")]
    np: Option<usize>,
    /// Sample time in hours; defaults to the scenario's.
    #[arg(long)]
    dt: Option<f64>,
    /// Closed-loop steps; defaults to the series length minus the horizon.
    #[arg(long = "T")]
    steps: Option<usize>,
    /// Output directory, created if missing.
    #[arg(long, default_value = "out")]
    out: PathBuf,
    /// SQP stopping tolerance on the KKT residual.
    #[arg(long)]
    kkt_tol: Option<f64>,
    /// SQP iteration cap per solve.
    #[arg(long)]
    max_iter: Option<usize>,
}

/// Effective run parameters, echoed into the output directory.
#[derive(Serialize)]
struct RunConfig {
    scenario: PathBuf,
    scenario_name: String,
    scenario_hash: String,
    mode: Mode,
    lengths: Vec<usize>,
    prediction_horizon: usize,
    dt: f64,
    steps: usize,
    solver: SolverOptions,
    out: PathBuf,
}

fn resolve(args: &RunArgs, mode: Mode) -> anyhow::Result<(Scenario, RunConfig)> {
    let mut scenario = Scenario::load(&args.scenario)?;
    if let Some(dt) = args.dt {
        scenario.dt = dt;
    }
    let violations = scenario.validate();
    if !violations.is_empty() {
        bail!("scenario is invalid:\n  {}", violations.join("\n  "));
    }
    let np = args.np.unwrap_or(scenario.controller.prediction_horizon);
    if np == 0 {
        bail!("--Np must be at least 1");
    }
    let lengths = args.lengths.clone().unwrap_or_else(|| scenario.controller.lengths.clone());
    let available = scenario.demand.len().min(scenario.tariff.len());
    let steps = match args.steps {
        Some(t) => t,
        None => available.saturating_sub(np),
    };
    if steps == 0 {
        bail!("--T must be at least 1 (series of {available} samples, horizon {np})");
    }
    let mut solver = SolverOptions::default();
    if let Some(t) = args.kkt_tol {
        if t.is_nan() || t <= 0.0 {
            bail!("--kkt-tol must be positive");
        }
        solver.kkt_tol = t;
    }
    if let Some(m) = args.max_iter {
        solver.max_iter = m;
    }
    let config = RunConfig {
        scenario: args.scenario.clone(),
        scenario_name: scenario.name.clone(),
        scenario_hash: scenario.hash().to_string(),
        mode,
        lengths,
        prediction_horizon: np,
        dt: scenario.dt,
        steps,
        solver,
        out: args.out.clone(),
    };
    // schedule errors surface before any output is written
    controller(&config, Mode::Idib).schedule()?;
    Ok((scenario, config))
}

fn controller(config: &RunConfig, mode: Mode) -> ControllerConfig {
    let mut c = match mode {
        Mode::Full => ControllerConfig::full(config.prediction_horizon),
        Mode::Idib => ControllerConfig::blocked(config.prediction_horizon, config.lengths.clone()),
    };
    c.options = config.solver;
    c
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> anyhow::Result<()> {
    fs::write(path, contents).with_context(|| format!("writing {}", path.display()))
}

fn prepare_out(config: &RunConfig) -> anyhow::Result<()> {
    fs::create_dir_all(&config.out).with_context(|| format!("creating {}", config.out.display()))?;
    let mut json = serde_json::to_string_pretty(config)?;
    json.push('\n');
    write_file(&config.out.join("config.json"), json)
}

fn write_log(log: &SimulationLog, path: &Path) -> anyhow::Result<()> {
    let mut buf = Vec::new();
    log.write_csv(&mut buf)?;
    write_file(path, buf)
}

fn status(flagged: bool) -> ExitCode {
    if flagged {
        ExitCode::from(2)
    } else {
        ExitCode::SUCCESS
    }
}

fn simulate(args: &RunArgs) -> anyhow::Result<ExitCode> {
    if args.lengths.is_some() && args.mode == Mode::Full {
        bail!("--lengths applies to --mode idib only");
    }
    let (scenario, config) = resolve(args, args.mode)?;
    prepare_out(&config)?;
    let log = run_closed_loop(&scenario, &controller(&config, args.mode), config.steps)?;
    write_log(&log, &config.out.join("log.csv"))?;
    let summary = log.summary();
    write_file(&config.out.join("summary.txt"), &summary)?;
    print!("{summary}");
    Ok(status(!log.flagged_steps().is_empty()))
}

fn run_compare(args: &RunArgs) -> anyhow::Result<ExitCode> {
    let (scenario, config) = resolve(args, Mode::Idib)?;
    prepare_out(&config)?;
    // sequential, so neither run's timing competes with the other
    let full = run_closed_loop(&scenario, &controller(&config, Mode::Full), config.steps)?;
    let blocked = run_closed_loop(&scenario, &controller(&config, Mode::Idib), config.steps)?;
    write_log(&full, &config.out.join("log_full.csv"))?;
    write_log(&blocked, &config.out.join("log_idib.csv"))?;
    let report = compare(&full, &blocked)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    write_file(&config.out.join("comparison.csv"), buf)?;
    let summary = report.summary();
    write_file(&config.out.join("comparison.txt"), &summary)?;
    print!("{summary}");
    Ok(status(!report.flagged_full.is_empty() || !report.flagged_blocked.is_empty()))
}

fn gen_scenario(template: &str, out: &Path) -> anyhow::Result<ExitCode> {
    let Some(t) = Template::by_name(template) else {
        bail!("unknown template `{template}`; available: {}", TEMPLATES.join(", "));
    };
    let path = t.write(out)?;
    println!("wrote {}", path.display());
    Ok(ExitCode::SUCCESS)
}

fn validate(path: &Path) -> anyhow::Result<ExitCode> {
    let scenario = Scenario::load(path)?;
    let violations = scenario.validate();
    if violations.is_empty() {
        println!("{}: ok", path.display());
        return Ok(ExitCode::SUCCESS);
    }
    for v in &violations {
        println!("violation: {v}");
    }
    Ok(ExitCode::FAILURE)
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match &cli.command {
        Command::Simulate(a) => simulate(a),
        Command::Compare(a) => run_compare(a),
        Command::GenScenario { template, out } => gen_scenario(template, out),
        Command::Validate { scenario } => validate(scenario),
    };
    match result {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
