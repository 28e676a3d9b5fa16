//! The `mq-bench` command line.

pub mod formats;
pub mod render;

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use tokio_util::sync::CancellationToken;
use walkdir::WalkDir;

use crate::chaos::fault_proxy_serve;
use crate::load::{run_publisher_with, LoadError, PublisherConfig, SampleCollector};
use crate::model::SummaryReport;
use crate::orchestrator::{run_scenario, run_sweep, OrchestratorError, RunConfig, SweepAxis};
use crate::spec::{ExperimentSpec, QosLevel, TransportKind};
use crate::transport::broker::mini_broker_serve;
use crate::transport::{connect, TransportOptions};
pub use render::{render_report, render_reports, ReportFormat};

pub const EXIT_OK: u8 = 0;
pub const EXIT_INVALID: u8 = 1;
pub const EXIT_RUNTIME: u8 = 2;
pub const EXIT_DEGENERATE: u8 = 3;

#[derive(Parser)]
#[command(name = "mq-bench", version, about = "Open-loop publish/subscribe benchmark harness")]
pub struct Cli {
    /// Log filter, e.g. `info` or `mq_bench=debug`
    #[arg(long, global = true, env = "MQBENCH_LOG", default_value = "warn")]
    pub log: String,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Subcommand)]
pub enum Command {
    /// Publish timestamped messages at a fixed rate
    Pub(PubArgs),
    /// Subscribe and record latency samples
    Sub(SubArgs),
    /// Run one experiment from a config file
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, env = "MQBENCH_OUT", default_value = "results")]
        out: PathBuf,
    },
    /// Run an experiment once per value of one axis
    Sweep {
        #[arg(long)]
        config: PathBuf,
        /// pairs, payload_bytes, fanout_subscribers or qos
        #[arg(long)]
        axis: SweepAxis,
        #[arg(long, value_delimiter = ',', required = true)]
        values: Vec<String>,
        /// Stop at the first point that falls below 95% of its target rate
        #[arg(long)]
        early_stop: bool,
        #[arg(long, env = "MQBENCH_OUT", default_value = "results")]
        out: PathBuf,
    },
    /// Render every summary.json found under a results directory
    Report {
        #[arg(long = "in", env = "MQBENCH_OUT", default_value = "results")]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "table")]
        format: ReportFormat,
    },
    /// Serve the built-in MQTT broker until interrupted
    MiniBroker {
        #[arg(long, default_value = "127.0.0.1:1883")]
        listen: String,
    },
    /// Serve the fault proxy admin API until interrupted
    FaultProxy {
        #[arg(long, default_value = "127.0.0.1:8474")]
        listen: String,
    },
}

#[derive(Args)]
pub struct Endpoint {
    #[arg(long)]
    pub transport: TransportKind,
    #[arg(long)]
    pub endpoint: String,
    #[arg(long)]
    pub topic: String,
    #[arg(long, default_value_t = 0)]
    pub qos: u8,
    #[arg(long)]
    pub client_id: Option<String>,
}

#[derive(Args)]
pub struct PubArgs {
    #[command(flatten)]
    pub target: Endpoint,
    /// Messages per second
    #[arg(long, default_value_t = 100.0)]
    pub rate: f64,
    /// Payload size in bytes, header included
    #[arg(long, default_value_t = 1024)]
    pub payload: usize,
    /// Seconds
    #[arg(long)]
    pub duration: f64,
}

#[derive(Args)]
pub struct SubArgs {
    #[command(flatten)]
    pub target: Endpoint,
    /// Seconds to listen
    #[arg(long)]
    pub duration: f64,
    /// Samples CSV
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Keep broker-side session state between connections
    #[arg(long)]
    pub persistent: bool,
}

/// Failures sorted by exit code.
#[derive(Debug)]
enum Failure {
    Invalid(String),
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for Failure {
    fn from(e: anyhow::Error) -> Self {
        Failure::Runtime(e)
    }
}

pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { EXIT_INVALID } else { EXIT_OK });
        }
    };
    let filter = tracing_subscriber::EnvFilter::try_new(&cli.log).unwrap_or_else(|_| "warn".into());
    tracing_subscriber::fmt().with_env_filter(filter).with_writer(std::io::stderr).init();
    let rt = match tokio::runtime::Runtime::new() {
        Ok(rt) => rt,
        Err(e) => {
            eprintln!("error: {e}");
            return ExitCode::from(EXIT_RUNTIME);
        }
    };
    ExitCode::from(rt.block_on(execute(cli.command)))
}

pub async fn execute(command: Command) -> u8 {
    match dispatch(command).await {
        Ok(code) => code,
        Err(Failure::Invalid(msg)) => {
            eprintln!("invalid: {msg}");
            EXIT_INVALID
        }
        Err(Failure::Runtime(e)) => {
            eprintln!("error: {e:#}");
            EXIT_RUNTIME
        }
    }
}

async fn dispatch(command: Command) -> Result<u8, Failure> {
    match command {
        Command::Pub(a) => publish(a).await,
        Command::Sub(a) => subscribe(a).await,
        Command::Run { config, out } => {
            let cfg = load_config(&config)?;
            let art = run_scenario(&cfg, &out, None).await.map_err(classify)?;
            print!("{}", render_report(&art.report, ReportFormat::Table)?);
            println!("artifacts: {}", art.dir.display());
            Ok(exit_for(&art.report))
        }
        Command::Sweep {
            config,
            axis,
            values,
            early_stop,
            out,
        } => {
            let cfg = load_config(&config)?;
            let mut probe = cfg.spec.clone();
            for v in &values {
                axis.apply(&mut probe, v).map_err(Failure::Invalid)?;
            }
            let report = run_sweep(&cfg, axis, &values, &out, early_stop).await;
            let done: Vec<SummaryReport> =
                report.runs.iter().filter_map(|r| r.outcome.as_ref().ok()).map(|a| a.report.clone()).collect();
            print!("{}", render_reports(&done, ReportFormat::Table)?);
            for r in &report.runs {
                if let Err(e) = &r.outcome {
                    eprintln!("{axis}={}: {e}", r.value);
                }
            }
            if let Some(v) = &report.stopped_at {
                println!("stopped early at {axis}={v}");
            }
            Ok(if done.len() < report.runs.len() { EXIT_RUNTIME } else { EXIT_OK })
        }
        Command::Report { input, format } => {
            let reports = collect_summaries(&input)?;
            if reports.is_empty() {
                return Err(anyhow::anyhow!("no summary.json under {}", input.display()).into());
            }
            print!("{}", render_reports(&reports, format)?);
            Ok(EXIT_OK)
        }
        Command::MiniBroker { listen } => {
            let broker = mini_broker_serve(&listen).await.context("starting broker")?;
            println!("listening {}", broker.endpoint());
            tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
            broker.shutdown().await;
            Ok(EXIT_OK)
        }
        Command::FaultProxy { listen } => {
            let server = fault_proxy_serve(&listen).await.context("starting fault proxy")?;
            println!("admin {}", server.admin_url());
            tokio::signal::ctrl_c().await.context("waiting for interrupt")?;
            server.shutdown().await;
            Ok(EXIT_OK)
        }
    }
}

fn exit_for(report: &SummaryReport) -> u8 {
    if report.degenerate {
        EXIT_DEGENERATE
    } else {
        EXIT_OK
    }
}

fn classify(e: OrchestratorError) -> Failure {
    match e {
        OrchestratorError::Invalid(v) => {
            Failure::Invalid(v.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))
        }
        OrchestratorError::Config(m) => Failure::Invalid(m),
        other => Failure::Runtime(other.into()),
    }
}

/// A run config, or a bare experiment spec run against an external broker.
fn load_config(path: &Path) -> Result<RunConfig, Failure> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| Failure::Invalid(format!("reading {}: {e}", path.display())))?;
    let value: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))?;
    let cfg = if value.get("spec").is_some() {
        serde_json::from_value(value)
    } else {
        serde_json::from_value::<ExperimentSpec>(value)
            .map(|spec| RunConfig::new(spec, crate::orchestrator::BrokerConfig::External))
    };
    cfg.map_err(|e| Failure::Invalid(format!("{}: {e}", path.display())))
}

pub fn collect_summaries(root: &Path) -> Result<Vec<SummaryReport>> {
    if !root.exists() {
        bail!("{} does not exist", root.display());
    }
    let mut paths: Vec<PathBuf> = WalkDir::new(root)
        .into_iter()
        .filter_map(|e| e.ok())
        .filter(|e| e.file_type().is_file() && e.file_name() == "summary.json")
        .map(|e| e.into_path())
        .collect();
    paths.sort();
    paths.iter().map(|p| formats::read_summary(p)).collect()
}

fn qos_of(target: &Endpoint) -> Result<QosLevel, Failure> {
    let qos = QosLevel::try_from(target.qos).map_err(|e| Failure::Invalid(e.to_string()))?;
    if !target.transport.supports(qos) {
        return Err(Failure::Invalid(format!("{} does not support qos {}", target.transport, qos)));
    }
    Ok(qos)
}

fn positive(name: &str, v: f64) -> Result<(), Failure> {
    if v.is_finite() && v > 0.0 {
        Ok(())
    } else {
        Err(Failure::Invalid(format!("{name} > 0")))
    }
}

async fn publish(a: PubArgs) -> Result<u8, Failure> {
    let qos = qos_of(&a.target)?;
    positive("rate", a.rate)?;
    positive("duration", a.duration)?;
    if a.payload < crate::header::HEADER_LEN {
        return Err(Failure::Invalid(format!("payload ≥ {}", crate::header::HEADER_LEN)));
    }
    let id = a.target.client_id.clone().unwrap_or_else(|| format!("mqbench-pub-{}", std::process::id()));
    let mut session = connect(a.target.transport, &a.target.endpoint, TransportOptions::new(id))
        .await
        .context("connecting")?;
    let cfg = PublisherConfig {
        rate: a.rate,
        capacity: 1.0,
        payload_bytes: a.payload,
        qos,
        start_offset: Duration::ZERO,
        run_for: Some(Duration::from_secs_f64(a.duration)),
    };
    let result = run_publisher_with(&cfg, session.as_mut(), &a.target.topic, CancellationToken::new()).await;
    let _ = session.disconnect().await;
    let (stats, aborted) = match result {
        Ok(s) => (s, false),
        Err(LoadError::AbortedByTransport { stats }) => (stats, true),
        Err(e) => return Err(Failure::Runtime(e.into())),
    };
    println!("published={}", stats.published_count);
    println!("publish_errors={}", stats.publish_errors);
    Ok(if aborted { EXIT_RUNTIME } else { EXIT_OK })
}

async fn subscribe(a: SubArgs) -> Result<u8, Failure> {
    let qos = qos_of(&a.target)?;
    positive("duration", a.duration)?;
    let id = a.target.client_id.clone().unwrap_or_else(|| format!("mqbench-sub-{}", std::process::id()));
    let opts = TransportOptions::new(id).clean_session(!a.persistent);
    let mut session = connect(a.target.transport, &a.target.endpoint, opts).await.context("connecting")?;
    let collector = SampleCollector::new(0);
    session.subscribe(&a.target.topic, qos, collector.sink()).await.context("subscribing")?;
    // Signals readiness to scripts that start publishers afterwards.
    println!("subscribed {}", a.target.topic);
    let stop = CancellationToken::new();
    let task = tokio::spawn(collector.run(stop.clone()));
    tokio::select! {
        _ = tokio::time::sleep(Duration::from_secs_f64(a.duration)) => {}
        _ = tokio::signal::ctrl_c() => {}
    }
    let _ = session.disconnect().await;
    stop.cancel();
    let out = task.await.context("collector")?;
    if let Some(path) = &a.out {
        formats::write_samples(path, &out.samples)?;
    }
    println!("received={}", out.received_count);
    println!("malformed={}", out.malformed_count);
    Ok(EXIT_OK)
}
