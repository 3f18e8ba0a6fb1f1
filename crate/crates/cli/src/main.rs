//! `codeepneat` command-line driver.
//!
//! Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use codeepneat::assembly::{to_dot, to_json};
use codeepneat::config::{Backend, ConfigError, EvolutionConfig};
use codeepneat::distrib::{run_tcp_worker, Backoff, WorkerOptions};
use codeepneat::hyperparams::LayerKind;
use codeepneat::run::{build_evaluator, describe_best, describe_species, record_line, Run, RunError, RunState};

/// Overrides the output directory of `run` and `resume`.
const OUT_ENV: &str = "CODEEPNEAT_OUT";

#[derive(Parser)]
#[command(name = "codeepneat", version, about = "Evolve deep network architectures with CoDeepNEAT and DeepNEAT")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Start a new run.
    Run {
        /// TOML config file.
        #[arg(long, conflicts_with = "preset")]
        config: Option<PathBuf>,
        /// Built-in preset to run without a config file (requires --seed).
        #[arg(long)]
        preset: Option<String>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        generations: Option<u64>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Continue a run from a checkpoint.
    Resume {
        checkpoint: PathBuf,
        /// Raise the generation limit stored in the checkpoint.
        #[arg(long)]
        generations: Option<u64>,
        #[command(flatten)]
        common: RunArgs,
    },
    /// Print part of a checkpoint.
    Inspect {
        checkpoint: PathBuf,
        #[command(subcommand)]
        query: Query,
    },
    /// Write the best network of a checkpoint.
    Export {
        checkpoint: PathBuf,
        #[arg(long, value_enum, default_value_t = Format::Json)]
        format: Format,
        /// Destination file; standard output if omitted.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Serve evaluation jobs for a master.
    Worker {
        /// Master address, HOST:PORT.
        #[arg(long)]
        connect: String,
        /// Layer kinds this worker accepts.
        #[arg(long, value_delimiter = ',', default_values = ["dense", "conv", "lstm"])]
        capabilities: Vec<Kind>,
        #[arg(long, default_value_t = 1.0)]
        heartbeat_secs: f64,
    },
}

#[derive(Args)]
struct RunArgs {
    /// Output directory (default: config `output`, else runs/<name>-seed<N>).
    #[arg(long)]
    out: Option<PathBuf>,
    /// Evaluate with N local worker threads.
    #[arg(long, conflicts_with_all = ["listen", "in_process"])]
    workers: Option<usize>,
    /// Accept remote workers on HOST:PORT.
    #[arg(long, conflicts_with = "in_process")]
    listen: Option<String>,
    /// Evaluate sequentially in this process.
    #[arg(long)]
    in_process: bool,
    /// Stop once this many generations have been evaluated.
    #[arg(long)]
    stop_after: Option<u64>,
}

#[derive(Subcommand)]
enum Query {
    /// Best network so far, with a DOT rendering.
    Best,
    /// Species sizes of each population.
    Species,
    /// Assembly record N (0-based) of the last evaluated generation.
    Record { n: usize },
}

#[derive(Clone, Copy, ValueEnum)]
enum Format {
    Json,
    Dot,
}

#[derive(Clone, Copy, ValueEnum)]
enum Kind {
    Dense,
    Conv,
    Lstm,
}

impl From<Kind> for LayerKind {
    fn from(k: Kind) -> Self {
        match k {
            Kind::Dense => LayerKind::Dense,
            Kind::Conv => LayerKind::Conv,
            Kind::Lstm => LayerKind::Lstm,
        }
    }
}

enum Failure {
    Config(String),
    Runtime(String),
}

impl From<RunError> for Failure {
    fn from(e: RunError) -> Self {
        match e {
            RunError::Config(c) => Failure::Config(c.to_string()),
            RunError::Checkpoint(_) => Failure::Config(e.to_string()),
            other => Failure::Runtime(other.to_string()),
        }
    }
}

impl From<ConfigError> for Failure {
    fn from(e: ConfigError) -> Self {
        Failure::Config(e.to_string())
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Failure::Config(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(1)
        }
        Err(Failure::Runtime(msg)) => {
            eprintln!("error: {msg}");
            ExitCode::from(2)
        }
    }
}

fn dispatch(command: Command) -> Result<(), Failure> {
    match command {
        Command::Run {
            config,
            preset,
            seed,
            generations,
            common,
        } => {
            let mut cfg = load_config(config.as_deref(), preset.as_deref(), seed)?;
            if let Some(g) = generations {
                cfg.generations = g;
            }
            apply_backend(&mut cfg, &common);
            cfg.validate()?;
            let out = output_dir(common.out.as_deref(), &cfg);
            let evaluator = build_evaluator(&cfg)?;
            let mut run = Run::start(cfg, &out, evaluator)?;
            finish(&mut run, common.stop_after)
        }
        Command::Resume {
            checkpoint,
            generations,
            common,
        } => {
            let mut state = RunState::load(&checkpoint)?;
            if let Some(g) = generations {
                state.config.generations = g;
            }
            apply_backend(&mut state.config, &common);
            state.config.validate()?;
            let out = common
                .out
                .clone()
                .or_else(env_out)
                .unwrap_or_else(|| run_dir_of(&checkpoint));
            let evaluator = build_evaluator(&state.config)?;
            let mut run = Run::resume(state, &out, evaluator)?;
            finish(&mut run, common.stop_after)
        }
        Command::Inspect { checkpoint, query } => {
            let state = RunState::load(&checkpoint)?;
            match query {
                Query::Best => {
                    print!("{}", describe_best(&state)?);
                    let (_, net) = state.best_network()?;
                    print!("{}", to_dot(&net));
                }
                Query::Species => print!("{}", describe_species(&state)),
                Query::Record { n } => println!("{}", record_line(&state, n)?),
            }
            Ok(())
        }
        Command::Export {
            checkpoint,
            format,
            output,
        } => {
            let state = RunState::load(&checkpoint)?;
            let (_, net) = state.best_network()?;
            let bytes = match format {
                Format::Json => to_json(&net),
                Format::Dot => to_dot(&net).into_bytes(),
            };
            match output {
                Some(path) => std::fs::write(&path, bytes)
                    .map_err(|e| Failure::Runtime(format!("{}: {e}", path.display())))?,
                None => {
                    use std::io::Write;
                    std::io::stdout()
                        .write_all(&bytes)
                        .map_err(|e| Failure::Runtime(e.to_string()))?;
                }
            }
            Ok(())
        }
        Command::Worker {
            connect,
            capabilities,
            heartbeat_secs,
        } => {
            let options = WorkerOptions {
                capabilities: capabilities.into_iter().map(LayerKind::from).collect(),
                heartbeat_interval: std::time::Duration::try_from_secs_f64(heartbeat_secs)
                    .map_err(|e| Failure::Config(format!("heartbeat-secs: {e}")))?,
                fail_on_job: None,
            };
            run_tcp_worker(&connect, &options, &Backoff::default())
                .map_err(|e| Failure::Runtime(format!("{connect}: {e}")))
        }
    }
}

fn load_config(path: Option<&Path>, preset: Option<&str>, seed: Option<u64>) -> Result<EvolutionConfig, Failure> {
    let mut cfg = match (path, preset) {
        (Some(p), _) => EvolutionConfig::load(p)?,
        (None, Some(name)) => {
            let seed = seed.ok_or_else(|| Failure::Config("--preset requires --seed".into()))?;
            EvolutionConfig::from_toml_str(&format!("preset = {name:?}\nseed = {seed}\n"))?
        }
        (None, None) => return Err(Failure::Config("either --config or --preset is required".into())),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn apply_backend(cfg: &mut EvolutionConfig, args: &RunArgs) {
    if let Some(n) = args.workers {
        cfg.backend = Backend::Local { workers: n };
    } else if let Some(addr) = &args.listen {
        cfg.backend = Backend::Listen { address: addr.clone() };
    } else if args.in_process {
        cfg.backend = Backend::InProcess;
    }
}

fn env_out() -> Option<PathBuf> {
    std::env::var_os(OUT_ENV).filter(|v| !v.is_empty()).map(PathBuf::from)
}

fn output_dir(flag: Option<&Path>, cfg: &EvolutionConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(env_out)
        .or_else(|| cfg.output.clone())
        .unwrap_or_else(|| {
            let name = cfg.preset.as_deref().unwrap_or("run");
            PathBuf::from("runs").join(format!("{name}-seed{}", cfg.seed))
        })
}

/// Run directory a checkpoint lives in: `<dir>/checkpoint_latest.json` or
/// `<dir>/checkpoints/gen_NNNN.json`.
fn run_dir_of(checkpoint: &Path) -> PathBuf {
    let parent = checkpoint.parent().unwrap_or(Path::new("."));
    if parent.file_name().is_some_and(|n| n == "checkpoints") {
        parent.parent().unwrap_or(Path::new(".")).to_path_buf()
    } else {
        parent.to_path_buf()
    }
}

fn finish(run: &mut Run, stop_after: Option<u64>) -> Result<(), Failure> {
    let summary = run.run(stop_after)?;
    println!(
        "generations: {}{}",
        summary.generations_completed,
        if summary.finished { "" } else { " (stopped early)" }
    );
    match (summary.best_fitness, summary.best_network_id) {
        (Some(f), Some(id)) => println!("best fitness: {f} (network {id})"),
        _ => println!("best fitness: none"),
    }
    println!("output: {}", summary.output.display());
    Ok(())
}
