//! `swarmlink`: run scenarios, check traces and serve the ground station.
//!
//! Exit codes: 0 success, 1 i/o failure, 2 bad configuration or usage,
//! 3 invariant violation or failed check.

use std::fs::File;
use std::io::{self, BufReader, BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use log::info;
use swarmlink_sim::config::CoordinatorSite;
use swarmlink_sim::live::{spawn_sim, spawn_udp, GcsHandle, LiveRun};
use swarmlink_sim::trace::read_jsonl;
use swarmlink_sim::verify::{self, CheckOptions};
use swarmlink_sim::{bundled, ConfigError, Runner, ScenarioConfig, SimError};

const DEFAULT_BASE_PORT: u16 = 47_000;
const DEFAULT_GCS_SCENARIO: &str = "wedge_transit";

#[derive(Parser)]
#[command(name = "swarmlink", version, about = "Swarm coordination scenarios, trace checks and ground-station service")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run a scenario file or bundled scenario to completion.
    Run {
        /// Path to a scenario file, or the name of a bundled scenario.
        scenario: String,
        /// Write the JSONL trace here.
        #[arg(long)]
        trace: Option<PathBuf>,
        /// Run every node over UDP on loopback in real time.
        #[arg(long)]
        real: bool,
        /// Override the scenario seed.
        #[arg(long)]
        seed: Option<u64>,
        /// First UDP port in real mode; node n listens on base + n.
        #[arg(long, default_value_t = DEFAULT_BASE_PORT)]
        base_port: u16,
    },
    /// Run a property check over a recorded trace.
    Verify {
        trace: PathBuf,
        #[arg(long, value_parser = clap::builder::PossibleValuesParser::new(verify::CHECKS))]
        check: String,
        /// Formation window start in seconds (default 30).
        #[arg(long)]
        from: Option<f64>,
        /// Formation window end in seconds (default end of trace).
        #[arg(long)]
        until: Option<f64>,
        /// Slot error tolerance in metres.
        #[arg(long, default_value_t = 0.5)]
        tolerance: f64,
    },
    /// Serve the ground-station HTTP and WebSocket API over a live swarm.
    Gcs {
        /// Listen address; defaults to $GCS_BIND or 127.0.0.1:8400.
        #[arg(long)]
        bind: Option<SocketAddr>,
        /// Scenario file or bundled name driving the swarm.
        #[arg(long, default_value = DEFAULT_GCS_SCENARIO)]
        scenario: String,
        /// Drive a UDP swarm instead of the paced simulation.
        #[arg(long)]
        real: bool,
        #[arg(long, value_enum)]
        coordinator: Option<Site>,
        /// Simulation speed relative to the wall clock.
        #[arg(long, default_value_t = 1.0)]
        speed: f64,
        #[arg(long)]
        trace: Option<PathBuf>,
        #[arg(long, default_value_t = DEFAULT_BASE_PORT)]
        base_port: u16,
    },
    /// List the bundled scenarios.
    Scenarios,
}

#[derive(Clone, Copy, ValueEnum)]
enum Site {
    Onboard,
    Gcs,
}

#[derive(Debug)]
enum Failure {
    Io(String),
    Config(String),
    Invariant(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Io(_) => 1,
            Failure::Config(_) => 2,
            Failure::Invariant(_) => 3,
        }
    }

    fn message(&self) -> &str {
        match self {
            Failure::Io(m) | Failure::Config(m) | Failure::Invariant(m) => m,
        }
    }
}

impl From<SimError> for Failure {
    fn from(e: SimError) -> Self {
        match e.exit_code() {
            2 => Failure::Config(e.to_string()),
            3 => Failure::Invariant(e.to_string()),
            _ => Failure::Io(e.to_string()),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure::Io(e.to_string())
    }
}

fn config_failure(source: &str, e: ConfigError) -> Failure {
    Failure::Config(format!("{source}: {e}"))
}

/// A file path if one exists, otherwise a bundled scenario name.
fn load_scenario(spec: &str) -> Result<ScenarioConfig, Failure> {
    let path = Path::new(spec);
    if path.exists() {
        return ScenarioConfig::load(path).map_err(|e| config_failure(spec, e));
    }
    match bundled::get(spec) {
        Some(_) => bundled::load(spec).map_err(|e| config_failure(spec, e)),
        None => Err(Failure::Config(format!(
            "{spec}: no such file or bundled scenario (bundled: {})",
            bundled::names().collect::<Vec<_>>().join(", ")
        ))),
    }
}

fn trace_writer(path: Option<&Path>) -> Result<Option<Box<dyn Write + Send>>, Failure> {
    path.map(|p| {
        File::create(p)
            .map(|f| Box::new(BufWriter::new(f)) as Box<dyn Write + Send>)
            .map_err(|e| Failure::Io(format!("{}: {e}", p.display())))
    })
    .transpose()
}

fn print_json(value: &serde_json::Value) -> Result<(), Failure> {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(|e| Failure::Io(e.to_string()))?;
    writeln!(out)?;
    Ok(())
}

fn run(scenario: &str, trace: Option<&Path>, real: bool, seed: Option<u64>, base_port: u16) -> Result<(), Failure> {
    let mut cfg = load_scenario(scenario)?;
    if let Some(s) = seed {
        cfg = cfg.with_seed(s);
    }
    if real {
        return run_real(cfg, trace, base_port);
    }
    let mut sink = trace_writer(trace)?;
    let summary = Runner::new(cfg)?.run(|r| match sink.as_mut() {
        Some(w) => writeln!(w, "{}", r.to_line()),
        None => Ok(()),
    });
    if let Some(w) = sink.as_mut() {
        w.flush()?;
    }
    let summary = summary?;
    print_json(&serde_json::to_value(&summary).expect("summaries serialize"))
}

fn run_real(cfg: ScenarioConfig, trace: Option<&Path>, base_port: u16) -> Result<(), Failure> {
    let duration = Duration::from_secs_f64(cfg.sim.duration_s);
    let (handle, live) = spawn_udp(cfg, base_port, trace_writer(trace)?)?;
    std::thread::sleep(duration);
    let view = handle.view().map_err(|e| Failure::Invariant(e.to_string()));
    if let Some(f) = live.stop() {
        return Err(Failure::Invariant(f));
    }
    print_json(&serde_json::to_value(view?).expect("views serialize"))
}

fn verify_trace(path: &Path, check: &str, from: Option<f64>, until: Option<f64>, tolerance: f64) -> Result<(), Failure> {
    let file = File::open(path).map_err(|e| Failure::Io(format!("{}: {e}", path.display())))?;
    let trace = read_jsonl(BufReader::new(file)).map_err(|e| Failure::Config(format!("{}: {e}", path.display())))?;
    let secs = |s: f64| (s * 1e6).round() as u64;
    let opts = CheckOptions { from_us: from.map(secs), until_us: until.map(secs), tolerance_m: tolerance, ..CheckOptions::default() };
    let report = verify::run_check(check, &trace, &opts).map_err(Failure::Config)?;
    print_json(&serde_json::to_value(&report).expect("reports serialize"))?;
    if report.passed {
        Ok(())
    } else {
        Err(Failure::Invariant(format!("{}: {}", report.name, report.summary)))
    }
}

struct GcsArgs {
    bind: Option<SocketAddr>,
    scenario: String,
    real: bool,
    coordinator: Option<Site>,
    speed: f64,
    trace: Option<PathBuf>,
    base_port: u16,
}

fn gcs(a: GcsArgs) -> Result<(), Failure> {
    let bind = match a.bind {
        Some(b) => b,
        None => swarmlink_gcs::bind_from_env().map_err(Failure::Config)?,
    };
    let mut cfg = load_scenario(&a.scenario)?;
    match a.coordinator {
        Some(Site::Onboard) => {
            cfg.sim.coordinator = CoordinatorSite::Onboard;
            cfg.sim.onboard_fallback = true;
        }
        Some(Site::Gcs) => cfg.sim.coordinator = CoordinatorSite::Gcs,
        None => {}
    }
    let sink = trace_writer(a.trace.as_deref())?;
    let (handle, live): (GcsHandle, LiveRun) = if a.real { spawn_udp(cfg, a.base_port, sink)? } else { spawn_sim(cfg, a.speed, sink)? };
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build()?;
    let served = rt.block_on(async {
        let listener = tokio::net::TcpListener::bind(bind).await.map_err(|e| Failure::Io(format!("{bind}: {e}")))?;
        println!("listening on http://{}", listener.local_addr()?);
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            info!("shutting down");
        };
        swarmlink_gcs::serve(listener, handle, shutdown).await.map_err(Failure::from)
    });
    let failed = live.stop();
    served?;
    failed.map_or(Ok(()), |f| Err(Failure::Invariant(f)))
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run { scenario, trace, real, seed, base_port } => run(&scenario, trace.as_deref(), real, seed, base_port),
        Command::Verify { trace, check, from, until, tolerance } => verify_trace(&trace, &check, from, until, tolerance),
        Command::Gcs { bind, scenario, real, coordinator, speed, trace, base_port } => {
            gcs(GcsArgs { bind, scenario, real, coordinator, speed, trace, base_port })
        }
        Command::Scenarios => {
            bundled::names().for_each(|n| println!("{n}"));
            Ok(())
        }
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("swarmlink: {}", f.message());
            ExitCode::from(f.code())
        }
    }
}
