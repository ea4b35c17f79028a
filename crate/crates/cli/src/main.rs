use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Mutex;

use anyhow::{anyhow, Context};
use clap::{Args, Parser, Subcommand};
use convoy_core::backend::BackendKind;
use convoy_core::memory::{Experience, ExperiencePool, Outcome, SharedExperiencePool, TaskKind};
use convoy_core::reasoning::DecisionAction;
use convoy_core::scenario::{run_batch, run_scenario, ScenarioConfig, ScenarioKind};
use convoy_core::trace::{read_trace_csv, replay_stats, run_dir, write_aggregate, write_run_outputs};
use serde_json::Value;

/// Multi-lane convoy simulator with language-model driving decisions.
#[derive(Debug, Parser)]
#[command(name = "convoy", version)]
struct Cli {
    /// Increase log verbosity (-v info, -vv debug, -vvv trace).
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run one scenario and write trace.csv and summary.json.
    Run(RunArgs),
    /// Run a seed sweep and write per-seed outputs plus an aggregate.
    Batch(BatchArgs),
    /// Build an experience pool from successful oracle runs.
    SeedPool(SeedPoolArgs),
    /// Recompute summary statistics from a trace CSV.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
struct ScenarioArgs {
    /// avoid, join, leave or escort.
    #[arg(long)]
    scenario: Option<ScenarioKind>,
    /// Number of environment vehicles.
    #[arg(long)]
    density: Option<usize>,
    /// oracle or llm_http.
    #[arg(long)]
    backend: Option<BackendKind>,
    /// JSON scenario configuration; flags override its values.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Control tick, s.
    #[arg(long)]
    dt: Option<f64>,
    /// Interval between decisions, s.
    #[arg(long)]
    decision_period: Option<f64>,
    /// Base URL of an OpenAI-compatible chat completions API.
    #[arg(long)]
    endpoint: Option<String>,
    #[arg(long)]
    model: Option<String>,
    /// Experience pool (JSON lines) used for few-shot retrieval.
    #[arg(long)]
    pool: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct RunArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct BatchArgs {
    #[command(flatten)]
    scenario: ScenarioArgs,
    /// Number of seeds.
    #[arg(long, default_value_t = 50)]
    seeds: u64,
    #[arg(long, default_value_t = 0)]
    first_seed: u64,
    /// Parallel runs; defaults to the CPU count.
    #[arg(long)]
    workers: Option<usize>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct SeedPoolArgs {
    /// Seeds per scenario.
    #[arg(long, default_value_t = 10)]
    seeds: u64,
    /// Environment vehicles in the obstacle scenario.
    #[arg(long, default_value_t = 20)]
    density: usize,
    /// Cap on stored experiences per task area.
    #[arg(long, default_value_t = 200)]
    per_task: usize,
    #[arg(long)]
    workers: Option<usize>,
    /// Destination JSON-lines file.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Debug, Args)]
struct ReplayArgs {
    /// trace.csv written by `run` or `batch`.
    trace: PathBuf,
}

enum Failure {
    Usage(anyhow::Error),
    Runtime(anyhow::Error),
}

type CliResult<T> = Result<T, Failure>;

fn usage(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Usage(e.into())
}

fn runtime(e: impl Into<anyhow::Error>) -> Failure {
    Failure::Runtime(e.into())
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    let level = match cli.verbose {
        0 => log::LevelFilter::Warn,
        1 => log::LevelFilter::Info,
        2 => log::LevelFilter::Debug,
        _ => log::LevelFilter::Trace,
    };
    env_logger::Builder::new().filter_level(level).parse_default_env().init();

    let result = match cli.command {
        Command::Run(args) => run(args),
        Command::Batch(args) => batch(args),
        Command::SeedPool(args) => seed_pool(args),
        Command::Replay(args) => replay(args),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Usage(e)) => {
            eprintln!("error: {}", describe(&e));
            eprintln!("usage: convoy <run|batch|seed-pool|replay> [OPTIONS]; see convoy --help");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {}", describe(&e));
            ExitCode::from(2)
        }
    }
}

/// Joins the error chain, skipping causes whose text an outer error already
/// repeats.
fn describe(e: &anyhow::Error) -> String {
    let mut text = String::new();
    for cause in e.chain() {
        let part = cause.to_string();
        if !text.contains(&part) {
            if !text.is_empty() {
                text.push_str(": ");
            }
            text.push_str(&part);
        }
    }
    text
}

/// Overlays `patch` onto `base`, descending into objects.
fn merge_json(base: &mut Value, patch: Value) {
    match (base, patch) {
        (Value::Object(b), Value::Object(p)) => {
            for (k, v) in p {
                merge_json(b.entry(k).or_insert(Value::Null), v);
            }
        }
        (b, p) => *b = p,
    }
}

/// Builds the scenario configuration from kind defaults, then the config
/// file, then the environment, then flags.
fn resolve_config(args: &ScenarioArgs, seed: Option<u64>) -> CliResult<ScenarioConfig> {
    let file: Option<Value> = match &args.config {
        None => None,
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("cannot read config {}", path.display()))
                .map_err(usage)?;
            let value: Value = serde_json::from_str(&text)
                .with_context(|| format!("config {} is not valid JSON", path.display()))
                .map_err(usage)?;
            if !value.is_object() {
                return Err(usage(anyhow!("config {} must hold a JSON object", path.display())));
            }
            Some(value)
        }
    };
    let kind = match (args.scenario, file.as_ref().and_then(|f| f.get("kind"))) {
        (Some(kind), _) => kind,
        (None, Some(v)) => serde_json::from_value(v.clone())
            .context("config field 'kind' is not a scenario")
            .map_err(usage)?,
        (None, None) => return Err(usage(anyhow!("no scenario given; pass --scenario or set 'kind' in the config"))),
    };

    let mut value = serde_json::to_value(ScenarioConfig::new(kind, 0)).map_err(runtime)?;
    if let Some(file) = file {
        merge_json(&mut value, file);
    }
    let mut cfg: ScenarioConfig = serde_json::from_value(value)
        .context("config does not match the scenario schema")
        .map_err(usage)?;
    cfg.kind = kind;
    if let Some(seed) = seed {
        cfg.seed = seed;
    }
    if let Some(density) = args.density {
        cfg.env_vehicle_count = density;
    }
    if let Some(dt) = args.dt {
        cfg.dt = dt;
    }
    if let Some(period) = args.decision_period {
        cfg.decision_period = period;
        cfg.oracle.decision_period = period;
    }
    if let Some(backend) = args.backend {
        cfg.backend.kind = backend;
    }
    cfg.backend = cfg.backend.with_env_overrides();
    if let Some(endpoint) = &args.endpoint {
        cfg.backend.endpoint = Some(endpoint.clone());
    }
    if let Some(model) = &args.model {
        cfg.backend.model = model.clone();
    }
    cfg.validate().map_err(usage)?;
    Ok(cfg)
}

fn load_pool(path: Option<&Path>) -> CliResult<Option<SharedExperiencePool>> {
    let Some(path) = path else { return Ok(None) };
    if !path.exists() {
        return Err(usage(anyhow!("experience pool {} does not exist", path.display())));
    }
    let pool = ExperiencePool::load(path)
        .with_context(|| format!("memory: cannot load {}", path.display()))
        .map_err(runtime)?;
    log::info!("loaded {} experiences from {}", pool.len(), path.display());
    Ok(Some(SharedExperiencePool::new(pool)))
}

fn default_workers() -> usize {
    std::thread::available_parallelism().map_or(1, |n| n.get())
}

fn run(args: RunArgs) -> CliResult<()> {
    let cfg = resolve_config(&args.scenario, args.seed)?;
    let pool = load_pool(args.scenario.pool.as_deref())?;
    let summary = run_scenario(&cfg, pool.as_ref())
        .context("scenario_harness: run failed")
        .map_err(runtime)?;
    write_run_outputs(&args.out, &summary, cfg.kind)
        .context("trace output failed")
        .map_err(runtime)?;
    let outcome = match summary.failure_reason {
        None if summary.success => "success".to_string(),
        Some(r) => format!("{r:?}").to_lowercase(),
        None => "unfinished".to_string(),
    };
    println!(
        "{} seed {}: {outcome} after {:.1} s, avg speed {:.2} m/s, final PE {:.3} m",
        cfg.kind, cfg.seed, summary.sim_time, summary.avg_convoy_speed, summary.final_pe
    );
    Ok(())
}

fn batch(args: BatchArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let template = resolve_config(&args.scenario, None)?;
    let pool = load_pool(args.scenario.pool.as_deref())?;
    let seeds: Vec<u64> = (args.first_seed..args.first_seed + args.seeds).collect();
    let workers = args.workers.unwrap_or_else(default_workers).max(1);
    let write_errors = Mutex::new(Vec::new());
    let aggregate = run_batch(&template, &seeds, workers, pool.as_ref(), |cfg, result| {
        match result {
            Ok(summary) => {
                let dir = run_dir(&args.out, cfg.kind, cfg.seed);
                if let Err(e) = write_run_outputs(&dir, summary, cfg.kind) {
                    write_errors.lock().unwrap().push(e.to_string());
                }
            }
            Err(e) => log::warn!("seed {} failed: {e}", cfg.seed),
        }
    })
    .context("scenario_harness: batch failed")
    .map_err(runtime)?;
    if let Some(first) = write_errors.into_inner().unwrap().into_iter().next() {
        return Err(runtime(anyhow!("trace output failed: {first}")));
    }
    let path = write_aggregate(&args.out, &aggregate)
        .context("trace output failed")
        .map_err(runtime)?;
    println!(
        "{} density {}: {}/{} successful ({:.0}%), mean avg speed {:.2} m/s, {} errors; wrote {}",
        aggregate.scenario,
        aggregate.density,
        aggregate.successes,
        aggregate.runs,
        aggregate.success_rate * 100.0,
        aggregate.mean_avg_speed,
        aggregate.errors,
        path.display()
    );
    Ok(())
}

/// Keeps every lane change and speed change, then fills the remaining room
/// with evenly spaced IDLE decisions.
fn curate(mut experiences: Vec<Experience>, cap: usize) -> Vec<Experience> {
    let (active, idle): (Vec<_>, Vec<_>) = experiences
        .drain(..)
        .partition(|e| e.decision != DecisionAction::Idle);
    let mut kept: Vec<Experience> = active.into_iter().take(cap).collect();
    let room = cap - kept.len();
    if room > 0 && !idle.is_empty() {
        let stride = idle.len().div_ceil(room);
        kept.extend(idle.into_iter().step_by(stride));
    }
    kept
}

fn seed_pool(args: SeedPoolArgs) -> CliResult<()> {
    if args.seeds == 0 {
        return Err(usage(anyhow!("--seeds must be at least 1")));
    }
    let seeds: Vec<u64> = (0..args.seeds).collect();
    let workers = args.workers.unwrap_or_else(default_workers).max(1);
    let collected: Mutex<BTreeMap<(ScenarioKind, u64), Vec<Experience>>> = Mutex::new(BTreeMap::new());
    for kind in ScenarioKind::ALL {
        let mut template = ScenarioConfig::new(kind, 0);
        template.trace_stride = 0;
        if kind == ScenarioKind::AvoidObstacles {
            template.env_vehicle_count = args.density;
        }
        run_batch(&template, &seeds, workers, None, |cfg, result| {
            if let Ok(summary) = result {
                let good: Vec<Experience> = summary
                    .experiences
                    .iter()
                    .filter(|e| e.outcome == Outcome::Success)
                    .cloned()
                    .collect();
                collected.lock().unwrap().insert((cfg.kind, cfg.seed), good);
            }
        })
        .context("scenario_harness: seed runs failed")
        .map_err(runtime)?;
    }

    let mut by_task: BTreeMap<TaskKind, Vec<Experience>> = BTreeMap::new();
    for experiences in collected.into_inner().unwrap().into_values() {
        for e in experiences {
            by_task.entry(e.task).or_default().push(e);
        }
    }
    let mut pool = ExperiencePool::new();
    for (task, experiences) in by_task {
        let kept = curate(experiences, args.per_task);
        println!("{task:?}: {} experiences", kept.len());
        for e in kept {
            pool.store(e);
        }
    }
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)
            .with_context(|| format!("cannot create {}", dir.display()))
            .map_err(runtime)?;
    }
    pool.persist(&args.out)
        .with_context(|| format!("memory: cannot write {}", args.out.display()))
        .map_err(runtime)?;
    println!("wrote {} experiences to {}", pool.len(), args.out.display());
    Ok(())
}

fn replay(args: ReplayArgs) -> CliResult<()> {
    let rows = read_trace_csv(&args.trace)
        .context("trace input failed")
        .map_err(runtime)?;
    let stats = replay_stats(&rows).ok_or_else(|| runtime(anyhow!("{} has no rows", args.trace.display())))?;
    let text = serde_json::to_string_pretty(&stats).map_err(runtime)?;
    println!("{text}");
    Ok(())
}
