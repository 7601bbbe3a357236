//! Command-line front end: IK solving, safety assessment, policy
//! training and evaluation, live monitoring, and workspace scanning.
//!
//! Exit codes: 0 on success, 1 when the requested computation reports a
//! domain failure (an unreachable or unsafe IK target, a training run
//! that diverges), 2 on usage or configuration errors.

use std::fs::{self, File};
use std::io::{BufReader, Write};
use std::net::TcpListener;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::AtomicBool;

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use singularguard::config::{AppConfig, CONFIG_ENV_VAR};
use singularguard::ik::{solve_ik, IkConfig, IkFailure};
use singularguard::kinematics::JointVelocities;
use singularguard::monitor::{emergency_decision, serve_tcp, MonitorService};
use singularguard::nalgebra::Vector3;
use singularguard::rl::{
    evaluate, export_curves, load_params, save_params, train, ReachEnv, TrainError,
    CURRICULUM,
};
use singularguard::scan::{workspace_scan, write_scan_csv};

#[derive(Parser)]
#[command(
    name = "singularguard",
    version,
    about = "Singularity-aware manipulator safety toolkit",
    after_help = "Config file: --config PATH, else $SINGULARGUARD_CONFIG, else built-in defaults."
)]
struct Cli {
    /// Path to the TOML configuration file.
    #[arg(long, global = true, value_name = "PATH")]
    config: Option<PathBuf>,
    /// Emit one machine-readable JSON record per line.
    #[arg(long, global = true)]
    json: bool,
    #[command(subcommand)]
    cmd: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve position inverse kinematics for a Cartesian target.
    SolveIk(SolveIkArgs),
    /// Classify raw metrics and joint speeds into a safety level.
    Assess(AssessArgs),
    /// Train the reaching policy and write curves + parameters.
    Train(TrainArgs),
    /// Evaluate a saved policy over seeded rollouts.
    Eval(EvalArgs),
    /// Run the safety monitor over stdin/stdout or a TCP port.
    Monitor(MonitorArgs),
    /// Sample the joint space and report metric distributions.
    WorkspaceScan(ScanArgs),
}

#[derive(Args)]
struct SolveIkArgs {
    /// Target position as "x,y,z" in meters, base frame.
    #[arg(long, value_name = "X,Y,Z")]
    target: String,
}

#[derive(Args)]
struct AssessArgs {
    /// Manipulability measure.
    #[arg(long)]
    mu: f64,
    /// Jacobian condition number.
    #[arg(long)]
    kappa: f64,
    /// Joint velocities as six comma-separated rad/s values.
    #[arg(long, value_name = "Q0,..,Q5", default_value = "0,0,0,0,0,0")]
    qdot: String,
}

#[derive(Args)]
struct TrainArgs {
    /// Number of training episodes.
    #[arg(long)]
    episodes: Option<usize>,
    /// Random seed for the whole run.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory for curves.csv and params.txt.
    #[arg(long, value_name = "DIR")]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EvalArgs {
    /// Parameters file written by `train`.
    #[arg(long, value_name = "FILE")]
    params: PathBuf,
    /// Number of evaluation episodes.
    #[arg(long, default_value_t = 50)]
    episodes: usize,
    /// Curriculum stage supplying the target distribution (1-4).
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u8).range(1..=4))]
    stage: u8,
    /// Random seed for target sampling and action noise.
    #[arg(long, default_value_t = 999)]
    seed: u64,
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct MonitorEndpoint {
    /// Read requests from stdin, write responses to stdout.
    #[arg(long)]
    stdin: bool,
    /// Listen for connections on "host:port".
    #[arg(long, value_name = "HOST:PORT")]
    listen: Option<String>,
}

#[derive(Args)]
struct MonitorArgs {
    #[command(flatten)]
    endpoint: MonitorEndpoint,
    /// Run the fixed-rate loop at this base frequency instead of one
    /// response per request.
    #[arg(long, value_name = "HZ")]
    hz: Option<f64>,
}

#[derive(Args)]
struct ScanArgs {
    /// Number of joint-space samples.
    #[arg(long, default_value_t = 10_000)]
    samples: usize,
    /// CSV output path; defaults to <output_dir>/scan.csv.
    #[arg(long, value_name = "FILE")]
    out: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(code) => code,
        Err(err) => {
            eprintln!("error: {err:#}");
            ExitCode::from(2)
        }
    }
}

fn run(cli: Cli) -> anyhow::Result<ExitCode> {
    let cfg = load_config(cli.config.as_deref())?;
    match cli.cmd {
        Command::SolveIk(args) => cmd_solve_ik(&cfg, &args, cli.json),
        Command::Assess(args) => cmd_assess(&cfg, &args, cli.json),
        Command::Train(args) => cmd_train(&cfg, &args, cli.json),
        Command::Eval(args) => cmd_eval(&cfg, &args, cli.json),
        Command::Monitor(args) => cmd_monitor(&cfg, &args),
        Command::WorkspaceScan(args) => cmd_scan(&cfg, &args, cli.json),
    }
}

/// Explicit flag, then the environment variable, then defaults.
fn load_config(flag: Option<&Path>) -> anyhow::Result<AppConfig> {
    if let Some(path) = flag {
        return AppConfig::load(path).with_context(|| format!("--config {}", path.display()));
    }
    match std::env::var(CONFIG_ENV_VAR) {
        Ok(path) if !path.is_empty() => AppConfig::load(Path::new(&path))
            .with_context(|| format!("{CONFIG_ENV_VAR}={path}")),
        _ => Ok(AppConfig::default()),
    }
}

fn parse_floats<const N: usize>(text: &str, what: &str) -> anyhow::Result<[f64; N]> {
    let parts: Vec<f64> = text
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .with_context(|| format!("{what}: expected {N} comma-separated numbers, got {text:?}"))?;
    let arr: [f64; N] = parts
        .try_into()
        .map_err(|v: Vec<f64>| anyhow::anyhow!("{what}: expected {N} values, got {}", v.len()))?;
    Ok(arr)
}

fn emit(json: bool, record: &serde_json::Value, human: &str) {
    let mut out = std::io::stdout().lock();
    // A closed downstream pipe (e.g. `| head`) is not an error worth
    // reporting; the record simply has nowhere to go.
    let _ = if json { writeln!(out, "{record}") } else { writeln!(out, "{human}") };
}

fn cmd_solve_ik(cfg: &AppConfig, args: &SolveIkArgs, json: bool) -> anyhow::Result<ExitCode> {
    let [x, y, z] = parse_floats::<3>(&args.target, "--target")?;
    let model = cfg.resolved_model()?;
    let mut ik_cfg = IkConfig::for_model(&model);
    ik_cfg.thresholds = cfg.thresholds;
    match solve_ik(&model, &Vector3::new(x, y, z), &ik_cfg) {
        Ok(sol) => {
            let record = serde_json::json!({
                "target": [x, y, z],
                "q": sol.q.0,
                "mu": sol.metrics.mu,
                "kappa": sol.metrics.kappa,
                "sigma_min": sol.metrics.sigma_min,
                "residual": sol.residual,
                "guess_index": sol.guess_index,
            });
            let human = format!(
                "solution for [{x:.3}, {y:.3}, {z:.3}]:\n  q = {:?}\n  mu = {:.6}  kappa = {:.3}  sigma_min = {:.6}\n  residual = {:.3e} m (start {})",
                sol.q.0, sol.metrics.mu, sol.metrics.kappa, sol.metrics.sigma_min,
                sol.residual, sol.guess_index,
            );
            emit(json, &record, &human);
            Ok(ExitCode::SUCCESS)
        }
        Err(failure) => {
            let (kind, candidates) = match &failure {
                IkFailure::Unreachable => ("unreachable", 0usize),
                IkFailure::NoSafeSolution { candidates } => ("no_safe_solution", *candidates),
            };
            let record = serde_json::json!({
                "target": [x, y, z],
                "solution": null,
                "failure": kind,
                "candidates": candidates,
            });
            emit(json, &record, &format!("no solution: {failure}"));
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_assess(cfg: &AppConfig, args: &AssessArgs, json: bool) -> anyhow::Result<ExitCode> {
    let qdot = JointVelocities(parse_floats::<6>(&args.qdot, "--qdot")?);
    let engine = cfg.fuzzy_engine()?;
    let assessment = engine
        .assess_values(args.mu, args.kappa, qdot.mean_abs())
        .map_err(anyhow::Error::from)?;
    let action = emergency_decision(args.mu, args.kappa, qdot.max_abs(), &cfg.monitor);
    let record = serde_json::json!({
        "mu": args.mu,
        "kappa": args.kappa,
        "mean_speed": assessment.mean_speed,
        "safety_level": assessment.classification,
        "safety_score": assessment.safety_score,
        "action": action.name(),
        "severity": action.severity(),
        "velocity_scale": action.velocity_scale(),
    });
    let human = format!(
        "safety_level = {:?}  score = {:.1}\naction = {}  severity = {}",
        assessment.classification, assessment.safety_score, action.name(), action.severity(),
    );
    emit(json, &record, &human);
    Ok(ExitCode::SUCCESS)
}

fn cmd_train(cfg: &AppConfig, args: &TrainArgs, json: bool) -> anyhow::Result<ExitCode> {
    let mut train_cfg = cfg.rl.train;
    if let Some(episodes) = args.episodes {
        train_cfg.episodes = episodes;
    }
    if let Some(seed) = args.seed {
        train_cfg.seed = seed;
    }
    train_cfg.validate().map_err(anyhow::Error::msg)?;
    let out_dir = args.out.clone().unwrap_or_else(|| cfg.output_dir.clone());

    let model = cfg.resolved_model()?;
    let mut env = ReachEnv::new(model, cfg.rl.env);
    let outcome = match train(&mut env, &train_cfg) {
        Ok(outcome) => outcome,
        Err(err @ (TrainError::Sampling(_) | TrainError::Diverged { .. })) => {
            let record = serde_json::json!({ "trained": false, "failure": err.to_string() });
            emit(json, &record, &format!("training failed: {err}"));
            return Ok(ExitCode::from(1));
        }
    };

    fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let curves_path = out_dir.join("curves.csv");
    let params_path = out_dir.join("params.txt");
    export_curves(&outcome.log, File::create(&curves_path)?)?;
    save_params(File::create(&params_path)?, &outcome.policy, &outcome.value)?;

    let final_stage = outcome.log.stage_advances.last().map(|&(_, s)| s).unwrap_or(1);
    let last_update = outcome.log.updates.last();
    let record = serde_json::json!({
        "trained": true,
        "episodes": outcome.log.episodes.len(),
        "updates": outcome.log.updates.len(),
        "stage_advances": outcome.log.stage_advances,
        "final_stage": final_stage,
        "rolling_success": last_update.map(|u| u.rolling_success),
        "curves": curves_path,
        "params": params_path,
    });
    let human = format!(
        "trained {} episodes ({} updates), final stage {}\nstage advances: {:?}\nwrote {} and {}",
        outcome.log.episodes.len(), outcome.log.updates.len(), final_stage,
        outcome.log.stage_advances, curves_path.display(), params_path.display(),
    );
    emit(json, &record, &human);
    Ok(ExitCode::SUCCESS)
}

fn cmd_eval(cfg: &AppConfig, args: &EvalArgs, json: bool) -> anyhow::Result<ExitCode> {
    let file = File::open(&args.params)
        .with_context(|| format!("--params {}", args.params.display()))?;
    let (policy, _value) = load_params(BufReader::new(file))
        .with_context(|| format!("loading {}", args.params.display()))?;
    let model = cfg.resolved_model()?;
    let mut env = ReachEnv::new(model, cfg.rl.env);
    let stage = &CURRICULUM[args.stage as usize - 1];
    match evaluate(&policy, &mut env, stage, args.episodes, args.seed) {
        Ok(report) => {
            let record = serde_json::json!({
                "episodes": report.episodes,
                "stage": stage.index,
                "success_rate": report.success_rate,
                "mean_final_distance": report.mean_final_distance,
                "min_mu": report.min_mu,
            });
            let human = format!(
                "eval over {} episodes (stage {}): success {:.1}%, mean final distance {:.3} m, min mu {:.4}",
                report.episodes, stage.index, 100.0 * report.success_rate,
                report.mean_final_distance, report.min_mu,
            );
            emit(json, &record, &human);
            Ok(ExitCode::SUCCESS)
        }
        Err(err) => {
            let record = serde_json::json!({ "evaluated": false, "failure": err.to_string() });
            emit(json, &record, &format!("evaluation failed: {err}"));
            Ok(ExitCode::from(1))
        }
    }
}

fn cmd_monitor(cfg: &AppConfig, args: &MonitorArgs) -> anyhow::Result<ExitCode> {
    let mut monitor_cfg = cfg.monitor;
    if let Some(hz) = args.hz {
        monitor_cfg.f_monitor = hz;
    }
    monitor_cfg.validate().map_err(anyhow::Error::msg)?;
    let model = cfg.resolved_model()?;
    let engine = cfg.fuzzy_engine()?;
    let service = MonitorService { model: &model, engine: &engine, cfg: monitor_cfg };
    // Timed loop when a frequency was requested, request/response otherwise.
    let timed = args.hz.is_some();
    let cancel = AtomicBool::new(false);

    if let Some(addr) = &args.endpoint.listen {
        let listener = TcpListener::bind(addr).with_context(|| format!("--listen {addr}"))?;
        eprintln!("listening on {}", listener.local_addr()?);
        serve_tcp(listener, &service, timed, &cancel)?;
    } else {
        let stdout = std::io::stdout().lock();
        if timed {
            // The timed loop moves its reader into a watcher thread, so
            // hand it an owned handle rather than a stdin lock guard.
            let reader = BufReader::new(std::io::stdin());
            service.run_timed(reader, stdout, std::io::stderr(), &cancel)?;
        } else {
            service.run_streaming(std::io::stdin().lock(), stdout, std::io::stderr())?;
        }
    }
    Ok(ExitCode::SUCCESS)
}

fn cmd_scan(cfg: &AppConfig, args: &ScanArgs, json: bool) -> anyhow::Result<ExitCode> {
    anyhow::ensure!(args.samples > 0, "--samples must be positive");
    let model = cfg.resolved_model()?;
    let report = workspace_scan(&model, &cfg.monitor, args.samples);

    let out_path = args.out.clone().unwrap_or_else(|| cfg.output_dir.join("scan.csv"));
    if let Some(parent) = out_path.parent().filter(|p| !p.as_os_str().is_empty()) {
        fs::create_dir_all(parent).with_context(|| format!("creating {}", parent.display()))?;
    }
    let mut file = File::create(&out_path)
        .with_context(|| format!("writing {}", out_path.display()))?;
    write_scan_csv(&report, &mut file)?;
    file.flush()?;

    let record = serde_json::json!({
        "samples": report.samples,
        "csv": out_path,
        "tier_fractions": report.tier_fractions,
        "mu_tails": report.mu_tails,
        "percentiles": report.percentiles,
        "zero_pose_action": report.zero_pose.action,
    });
    let mut human = format!(
        "scanned {} configurations -> {}\ntier fractions: stop {:.4}  critical {:.4}  warning {:.4}  normal {:.4}",
        report.samples, out_path.display(),
        report.tier_fractions.emergency_stop, report.tier_fractions.critical_warning,
        report.tier_fractions.warning, report.tier_fractions.normal,
    );
    for tail in &report.mu_tails {
        human.push_str(&format!(
            "\nfraction with mu < {:<6}: {:.4}",
            tail.below, tail.fraction
        ));
    }
    for table in &report.percentiles {
        human.push_str(&format!("\n{} percentiles:", table.metric));
        for (p, v) in &table.entries {
            human.push_str(&format!("  p{p}={v:.4}"));
        }
    }
    emit(json, &record, &human);
    Ok(ExitCode::SUCCESS)
}
