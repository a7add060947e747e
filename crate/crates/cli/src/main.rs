use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use balancelab_core::config::{ConfigError, Document, HarnessConfig};
use balancelab_core::harness::{self, EmitOptions, HarnessError};
use balancelab_core::AlgorithmKind;
use balancelab_proxy::loopback::{proxy_worker_sweep, sweep_rows, SweepSettings};
use balancelab_proxy::{ProxyConfig, ProxyError};
use clap::{Parser, Subcommand, ValueEnum};
use thiserror::Error;

#[derive(Parser)]
#[command(name = "balancelab", version, about = "Load-balancing algorithm lab: simulator sweeps and a live proxy")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run the algorithm × scenario × environment matrix in the simulator.
    Sim {
        #[arg(long)]
        config: Option<PathBuf>,
        /// Comma-separated algorithm names.
        #[arg(long, value_delimiter = ',')]
        algos: Option<Vec<AlgorithmKind>>,
        /// Environment name; repeat or comma-separate for several.
        #[arg(long, value_delimiter = ',')]
        env: Option<Vec<String>>,
        #[arg(long)]
        max_total: Option<u64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        repetitions: Option<u32>,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also draw SVG charts.
        #[arg(long)]
        svg: bool,
    },
    /// Compare mean response time across dispatch worker counts.
    SweepWorkers {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        counts: Option<Vec<u32>>,
        #[arg(long, value_enum, default_value_t = Mode::Sim)]
        mode: Mode,
        /// Requests in the simulated scenario.
        #[arg(long)]
        total: Option<u64>,
        #[arg(long, default_value = "homogeneous")]
        env: String,
        /// Proxy mode: requests per second.
        #[arg(long, default_value_t = 200.0)]
        rate: f64,
        /// Proxy mode: seconds of load per worker count.
        #[arg(long, default_value_t = 30.0)]
        duration: f64,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run the reverse proxy described by the [proxy] section.
    Serve {
        #[arg(long)]
        config: PathBuf,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum Mode {
    Sim,
    Proxy,
}

#[derive(Debug, Error)]
enum CliError {
    #[error("config error: {0}")]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Harness(#[from] HarnessError),
    #[error(transparent)]
    Proxy(#[from] ProxyError),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) | CliError::Harness(HarnessError::InvalidMatrix(_) | HarnessError::InvalidWorkerCount) => 2,
            CliError::Proxy(ProxyError::Config(_)) => 2,
            _ => 1,
        }
    }
}

fn load(path: Option<&PathBuf>) -> Result<(Document, HarnessConfig), CliError> {
    let doc = match path {
        Some(p) => Document::load(p)?,
        None => Document::default(),
    };
    let cfg = HarnessConfig::from_document(&doc)?;
    Ok((doc, cfg))
}

fn write_rows(rows: &[harness::SummaryRow], out: &std::path::Path, svg: bool, deadline_s: f64) -> Result<(), CliError> {
    let opts = EmitOptions { svg, deadline_s, ..EmitOptions::default() };
    let files = harness::emit(rows, out, &opts)?;
    if let Some(csv) = files.csv {
        println!("{}", csv.display());
    }
    for f in files.plot_data.iter().chain(&files.svg) {
        println!("{}", f.display());
    }
    Ok(())
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::Sim { config, algos, env, max_total, seed, repetitions, out, svg } => {
            let (_, mut cfg) = load(config.as_ref())?;
            if let Some(a) = algos {
                cfg.algorithms = a;
            }
            if let Some(e) = env {
                cfg.environments = e;
            }
            if let Some(m) = max_total {
                cfg.max_total = m;
            }
            if let Some(s) = seed {
                cfg.base_seed = s;
            }
            if let Some(r) = repetitions {
                cfg.repetitions = r;
            }
            if let Some(o) = out {
                cfg.out_dir = o;
            }
            cfg.svg |= svg;
            let matrix = cfg.to_matrix()?;
            log::info!("running {} cells x {} repetitions", matrix.cell_count(), matrix.repetitions);
            let output = harness::run_matrix(&matrix)?;
            for e in &output.errors {
                eprintln!("cell {} / {} / {} failed: {}", e.environment, e.algorithm, e.total_requests, e.error);
            }
            write_rows(&output.rows, &cfg.out_dir, cfg.svg, cfg.deadline_s)?;
            if output.rows.is_empty() {
                return Err(HarnessError::InvalidMatrix("every cell failed".into()).into());
            }
            Ok(())
        }
        Command::SweepWorkers { config, counts, mode, total, env, rate, duration, out } => {
            let (_, cfg) = load(config.as_ref())?;
            let counts = counts.unwrap_or(cfg.worker_counts.clone());
            let out = out.unwrap_or(cfg.out_dir.clone());
            let rows = match mode {
                Mode::Sim => {
                    let matrix = cfg.to_matrix()?;
                    let scenario = cfg.scenario(total.unwrap_or(cfg.sweep_total))?;
                    let environment = cfg.environment(&env)?;
                    harness::worker_sweep(&counts, &scenario, &environment, &cfg.balance, &matrix)?
                }
                Mode::Proxy => {
                    if counts.is_empty() || counts.contains(&0) {
                        return Err(HarnessError::InvalidWorkerCount.into());
                    }
                    if !(rate > 0.0 && duration > 0.0) {
                        return Err(ConfigError::Invalid("rate and duration must be positive".into()).into());
                    }
                    let settings = SweepSettings {
                        rate_per_s: rate,
                        duration: Duration::from_secs_f64(duration),
                        algorithm: cfg.balance.clone(),
                        ..SweepSettings::default()
                    };
                    sweep_rows(&proxy_worker_sweep(&counts, &settings)?, &settings)
                }
            };
            for r in &rows {
                println!(
                    "workers={:<3} {} mean={:.6}s p95={:.6}s",
                    r.workers.unwrap_or(0),
                    r.task_type,
                    r.mean_response_s.unwrap_or(f64::NAN),
                    r.p95_response_s.unwrap_or(f64::NAN)
                );
            }
            write_rows(&rows, &out, false, cfg.deadline_s)
        }
        Command::Serve { config } => {
            let doc = Document::load(&config)?;
            let proxy = ProxyConfig::from_document(&doc)?;
            balancelab_proxy::serve(proxy)?;
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("balancelab: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}
