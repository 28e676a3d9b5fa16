use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::task::JoinHandle;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::container::{is_reachable, BrokerDeployment, ContainerEngine};
use super::OrchestratorError;
use crate::chaos::{
    fault_proxy_serve, run_fault_schedule, schedule_failures, ExecutedFault, FaultProxyServer, HookOutcome,
    ProxyAdmin, ReconnectHook, RunClock,
};
use crate::cli::formats;
use crate::load::{run_publisher_with, stagger_offset, LoadError, PublisherConfig, PublisherStats, SampleCollector, SinkFactory, SubscriberOutput};
use crate::metrics::{summarize, RunData};
use crate::model::{wall_clock_ns, ConnectionEvent, ConnectionLog, SummaryReport};
use crate::resmon::{monitor, MonitorOutput, ResourceSample, StatsClient};
use crate::spec::{validate_spec, ExperimentSpec, Scenario, TransportKind, Violation};
use crate::transport::broker::{mini_broker_serve, BrokerHandle};
use crate::transport::{connect, Endpoint, Session, TransportOptions};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BrokerConfig {
    /// A fresh container per run through the engine API.
    Container(BrokerDeployment),
    /// The built-in MQTT broker, started in-process; rewrites the endpoint.
    MiniBroker {
        #[serde(default)]
        listen: Option<String>,
    },
    /// Already running; nothing is started or stopped.
    #[default]
    External,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultConfig {
    /// Toxiproxy-compatible admin API. Without one a proxy is started in-process.
    #[serde(default)]
    pub admin_url: Option<String>,
    #[serde(default = "default_proxy_name")]
    pub proxy_name: String,
    #[serde(default = "default_proxy_listen")]
    pub listen: String,
    /// Broker address as seen from the proxy; defaults to the endpoint's host:port.
    #[serde(default)]
    pub upstream: Option<String>,
}

fn default_proxy_name() -> String {
    "mqbench-subscribers".into()
}

fn default_proxy_listen() -> String {
    "127.0.0.1:0".into()
}

impl Default for FaultConfig {
    fn default() -> Self {
        Self {
            admin_url: None,
            proxy_name: default_proxy_name(),
            listen: default_proxy_listen(),
            upstream: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonitorConfig {
    /// Defaults to the container deployment's engine endpoint.
    #[serde(default)]
    pub stats_endpoint: Option<String>,
    /// Defaults to the started container.
    #[serde(default)]
    pub container_id: Option<String>,
    #[serde(default = "one_second")]
    pub interval_s: f64,
}

fn one_second() -> f64 {
    1.0
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum StaggerMode {
    /// Publisher i starts i/N of a period late.
    #[default]
    Even,
    None,
}

fn default_concurrency() -> usize {
    64
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub spec: ExperimentSpec,
    #[serde(default)]
    pub broker: BrokerConfig,
    /// Directory name for the broker level of the artifact tree.
    #[serde(default)]
    pub broker_label: Option<String>,
    #[serde(default)]
    pub faults: FaultConfig,
    #[serde(default)]
    pub monitor: Option<MonitorConfig>,
    #[serde(default)]
    pub stagger: StaggerMode,
    /// Sessions opened at once while the fleet connects.
    #[serde(default = "default_concurrency")]
    pub connect_concurrency: usize,
}

impl RunConfig {
    pub fn new(spec: ExperimentSpec, broker: BrokerConfig) -> Self {
        Self {
            spec,
            broker,
            broker_label: None,
            faults: FaultConfig::default(),
            monitor: None,
            stagger: StaggerMode::Even,
            connect_concurrency: default_concurrency(),
        }
    }

    pub fn label(&self) -> String {
        if let Some(l) = &self.broker_label {
            return l.clone();
        }
        match &self.broker {
            BrokerConfig::Container(d) => d.name.clone(),
            BrokerConfig::MiniBroker { .. } => "mini-broker".into(),
            BrokerConfig::External => self.spec.transport_kind.as_str().into(),
        }
    }
}

/// The value of the scenario's natural sweep axis, used as a directory name.
pub fn axis_value(spec: &ExperimentSpec) -> String {
    match spec.scenario {
        Scenario::LatencyPayload => spec.payload_bytes.to_string(),
        Scenario::ThroughputPairs => spec.pairs.to_string(),
        Scenario::Fanout => spec.fanout_subscribers.to_string(),
        Scenario::QosReliability => format!("qos{}", spec.qos),
    }
}

pub fn run_dir(out: &Path, spec: &ExperimentSpec, broker: &str, axis_value: &str) -> PathBuf {
    out.join(spec.scenario.as_str()).join(broker).join(axis_value)
}

#[derive(Debug, Clone)]
pub struct RunArtifacts {
    /// The spec as run (after endpoint rewriting).
    pub spec: ExperimentSpec,
    pub dir: PathBuf,
    pub samples: PathBuf,
    pub connections: PathBuf,
    pub resources: PathBuf,
    pub faults: PathBuf,
    pub summary: PathBuf,
    pub report: SummaryReport,
    pub executed_faults: Vec<ExecutedFault>,
}

enum RunningBroker {
    Container { engine: ContainerEngine, id: String },
    Mini(BrokerHandle),
    External,
}

impl RunningBroker {
    async fn start(cfg: &RunConfig, spec: &mut ExperimentSpec) -> Result<Self, OrchestratorError> {
        match &cfg.broker {
            BrokerConfig::External => Ok(Self::External),
            BrokerConfig::MiniBroker { listen } => {
                if spec.transport_kind != TransportKind::Mqtt {
                    return Err(OrchestratorError::Config("the mini broker speaks MQTT only".into()));
                }
                let h = mini_broker_serve(listen.as_deref().unwrap_or("127.0.0.1:0"))
                    .await
                    .map_err(|e| OrchestratorError::StartFailed(e.to_string()))?;
                spec.endpoint = h.endpoint();
                Ok(Self::Mini(h))
            }
            BrokerConfig::Container(d) => {
                let engine = ContainerEngine::connect(&d.container_ctl)?;
                let probe = probe_addr(spec)?;
                let id = engine.start_broker(d, &probe).await?;
                Ok(Self::Container { engine, id })
            }
        }
    }

    async fn stop(self) {
        match self {
            Self::Container { engine, id } => engine.stop_broker(&id).await,
            Self::Mini(h) => h.shutdown().await,
            Self::External => {}
        }
    }
}

fn probe_addr(spec: &ExperimentSpec) -> Result<String, OrchestratorError> {
    let ep = Endpoint::parse(spec.transport_kind, &spec.endpoint)?;
    Ok(ep.host_port(spec.transport_kind.default_port()))
}

/// `endpoint` with its authority replaced by `listen`.
fn via_proxy(endpoint: &str, listen: &str) -> Result<String, OrchestratorError> {
    let mut url = url::Url::parse(endpoint).map_err(|e| OrchestratorError::Config(e.to_string()))?;
    let (host, port) = match listen.parse::<SocketAddr>() {
        Ok(a) if a.ip().is_unspecified() => ("127.0.0.1".to_string(), a.port()),
        Ok(a) => (a.ip().to_string(), a.port()),
        Err(_) => {
            let (h, p) = listen
                .rsplit_once(':')
                .ok_or_else(|| OrchestratorError::Config(format!("bad proxy listen address {listen}")))?;
            let p = p
                .parse()
                .map_err(|_| OrchestratorError::Config(format!("bad proxy listen address {listen}")))?;
            (h.to_string(), p)
        }
    };
    url.set_host(Some(&host)).map_err(|e| OrchestratorError::Config(e.to_string()))?;
    url.set_port(Some(port))
        .map_err(|_| OrchestratorError::Config(format!("cannot set port on {endpoint}")))?;
    Ok(url.to_string())
}

struct SubSlot {
    client_id: String,
    topic: String,
    session: Option<Box<dyn Session>>,
    factory: SinkFactory,
}

#[derive(Clone)]
struct SessionTemplate {
    kind: TransportKind,
    endpoint: String,
    clean_session: bool,
    qos: crate::spec::QosLevel,
    log: ConnectionLog,
}

impl SessionTemplate {
    fn options(&self, client_id: &str) -> TransportOptions {
        TransportOptions::new(client_id)
            .clean_session(self.clean_session)
            .with_events(self.log.clone())
    }

    async fn open_subscriber(&self, slot: &mut SubSlot) -> Result<(), crate::transport::TransportError> {
        let mut s = connect(self.kind, &self.endpoint, self.options(&slot.client_id)).await?;
        s.subscribe(&slot.topic, self.qos, slot.factory.sink()).await?;
        slot.session = Some(s);
        Ok(())
    }
}

async fn close_session(mut s: Box<dyn Session>) {
    let _ = tokio::time::timeout(Duration::from_secs(2), s.disconnect()).await;
}

/// Opens sessions for `slots`, at most `concurrency` at a time, keeping their
/// order. With `only_stale`, live sessions are left alone.
async fn open_slots(
    tpl: &SessionTemplate,
    slots: Vec<SubSlot>,
    concurrency: usize,
    only_stale: bool,
) -> (Vec<SubSlot>, Vec<String>) {
    let done: Vec<(SubSlot, Option<String>)> = futures::stream::iter(slots)
        .map(|mut slot| {
            let tpl = tpl.clone();
            async move {
                if only_stale && slot.session.as_ref().is_some_and(|x| !x.is_closed()) {
                    return (slot, None);
                }
                let err = tpl.open_subscriber(&mut slot).await.err().map(|e| format!("{}: {e}", slot.client_id));
                (slot, err)
            }
        })
        .buffered(concurrency.max(1))
        .collect()
        .await;
    let mut failures = Vec::new();
    let slots = done
        .into_iter()
        .map(|(slot, err)| {
            failures.extend(err);
            slot
        })
        .collect();
    (slots, failures)
}

fn reconnect_hook(slots: Arc<tokio::sync::Mutex<Vec<SubSlot>>>, tpl: SessionTemplate) -> ReconnectHook {
    Box::new(move || {
        let slots = slots.clone();
        let tpl = tpl.clone();
        Box::pin(async move {
            let deadline = Instant::now() + Duration::from_millis(4_500);
            let mut slots = slots.lock().await;
            for s in slots.iter() {
                if let Some(h) = s.session.as_ref().and_then(|s| s.reconnect_handle()) {
                    h.trigger();
                }
            }
            let taken = std::mem::take(&mut *slots);
            let (reopened, failures) = open_slots(&tpl, taken, usize::MAX, true).await;
            *slots = reopened;
            for e in failures {
                tracing::debug!(error = %e, "resubscribe failed");
            }
            let total = slots.len();
            loop {
                let up = slots
                    .iter()
                    .filter(|s| s.session.as_ref().is_some_and(|x| x.is_connected()))
                    .count();
                if up == total || Instant::now() >= deadline {
                    return HookOutcome {
                        reconnected: up,
                        failed: total - up,
                    };
                }
                tokio::time::sleep(Duration::from_millis(20)).await;
            }
        })
    })
}

struct Collected {
    run_start_ns: u64,
    run_end_ns: u64,
    subscribers: Vec<SubscriberOutput>,
    publishers: Vec<PublisherStats>,
    events: Vec<ConnectionEvent>,
    monitor: Option<MonitorOutput>,
    faults: Vec<ExecutedFault>,
    broker_lost: bool,
    warnings: Vec<String>,
}

/// Runs one experiment and writes its artifacts under `out`.
pub async fn run_scenario(cfg: &RunConfig, out: &Path, axis: Option<&str>) -> Result<RunArtifacts, OrchestratorError> {
    validate_spec(&cfg.spec).map_err(OrchestratorError::Invalid)?;
    let mut spec = cfg.spec.clone();
    if let BrokerConfig::Container(d) = &cfg.broker {
        let need = 2 * u64::from(spec.client_count());
        if d.nofile_limit < need {
            return Err(OrchestratorError::Invalid(vec![Violation {
                field: "nofile_limit".into(),
                message: format!("must be ≥ {need} (2 × planned sessions)"),
            }]));
        }
    }
    if spec.has_faults() && spec.transport_kind == TransportKind::Loopback {
        return Err(OrchestratorError::Config(
            "fault injection needs a network transport, not loopback".into(),
        ));
    }

    let broker = RunningBroker::start(cfg, &mut spec).await?;
    let result = execute(cfg, &spec, &broker).await;
    broker.stop().await;
    let collected = result?;

    let label = cfg.label();
    let axis = axis.map(str::to_string).unwrap_or_else(|| axis_value(&spec));
    let dir = run_dir(out, &spec, &label, &axis);
    write_artifacts(&spec, &dir, &label, cfg.stagger, collected)
}

async fn execute(cfg: &RunConfig, spec: &ExperimentSpec, broker: &RunningBroker) -> Result<Collected, OrchestratorError> {
    let kind = spec.transport_kind;
    let log = ConnectionLog::new();
    let mut warnings = Vec::new();

    let mut proxy_server: Option<FaultProxyServer> = None;
    let mut fault_target: Option<(ProxyAdmin, String)> = None;
    let sub_endpoint = if spec.has_faults() {
        let admin = match &cfg.faults.admin_url {
            Some(u) => ProxyAdmin::new(u),
            None => {
                let s = fault_proxy_serve("127.0.0.1:0")
                    .await
                    .map_err(|e| OrchestratorError::Config(format!("fault proxy: {e}")))?;
                let a = ProxyAdmin::new(&s.admin_url());
                proxy_server = Some(s);
                a
            }
        };
        let upstream = match &cfg.faults.upstream {
            Some(u) => u.clone(),
            None => probe_addr(spec)?,
        };
        let info = admin.ensure_proxy(&cfg.faults.proxy_name, &cfg.faults.listen, &upstream).await?;
        admin.restore(&cfg.faults.proxy_name).await?;
        let ep = via_proxy(&spec.endpoint, &info.listen)?;
        fault_target = Some((admin, cfg.faults.proxy_name.clone()));
        ep
    } else {
        spec.endpoint.clone()
    };

    let monitor_stop = CancellationToken::new();
    let monitor_task = start_monitor(cfg, broker, monitor_stop.clone(), &mut warnings)?;

    // Subscribers first, so nothing published is missed.
    let tpl = SessionTemplate {
        kind,
        endpoint: sub_endpoint,
        clean_session: !spec.persistent_session(),
        qos: spec.qos,
        log: log.clone(),
    };
    let collect_stop = CancellationToken::new();
    let n_subs = spec.subscriber_count();
    let mut collectors = Vec::with_capacity(n_subs as usize);
    let mut slots = Vec::with_capacity(n_subs as usize);
    for i in 0..n_subs {
        let c = SampleCollector::new(spec.max_samples_per_subscriber);
        slots.push(SubSlot {
            client_id: format!("sub-{i}"),
            topic: spec.topic_for(i),
            session: None,
            factory: c.sink_factory(),
        });
        collectors.push(c);
    }
    let concurrency = cfg.connect_concurrency.max(1);
    let (slots, failures) = open_slots(&tpl, slots, concurrency, false).await;
    if !failures.is_empty() {
        warnings.push(format!("{} subscribers failed to connect (first: {})", failures.len(), failures[0]));
    }
    let collector_tasks: Vec<JoinHandle<SubscriberOutput>> = collectors
        .into_iter()
        .map(|c| tokio::spawn(c.run(collect_stop.clone())))
        .collect();
    let slots = Arc::new(tokio::sync::Mutex::new(slots));

    let n_pubs = spec.publisher_count();
    let pub_results: Vec<(u32, Result<Box<dyn Session>, String>)> = futures::stream::iter(0..n_pubs)
        .map(|i| {
            let opts = TransportOptions::new(format!("pub-{i}")).with_events(log.clone());
            let endpoint = spec.endpoint.clone();
            async move { (i, connect(kind, &endpoint, opts).await.map_err(|e| format!("pub-{i}: {e}"))) }
        })
        .buffer_unordered(concurrency)
        .collect()
        .await;
    let mut publishers = Vec::new();
    let mut pub_failures = Vec::new();
    for (i, r) in pub_results {
        match r {
            Ok(s) => publishers.push((i, s)),
            Err(e) => pub_failures.push(e),
        }
    }
    if !pub_failures.is_empty() {
        warnings.push(format!(
            "{} publishers failed to connect (first: {})",
            pub_failures.len(),
            pub_failures[0]
        ));
    }
    publishers.sort_by_key(|(i, _)| *i);

    let total = Duration::from_secs_f64(spec.total_run_s());
    let run_start = Instant::now();
    let run_start_ns = wall_clock_ns();
    let load_stop = CancellationToken::new();
    let pub_tasks: Vec<JoinHandle<(Box<dyn Session>, Result<PublisherStats, LoadError>)>> = publishers
        .into_iter()
        .map(|(i, mut s)| {
            let pc = PublisherConfig {
                start_offset: match cfg.stagger {
                    StaggerMode::Even => stagger_offset(i, n_pubs, spec.rate_per_publisher),
                    StaggerMode::None => Duration::ZERO,
                },
                run_for: Some(total),
                ..PublisherConfig::from_spec(spec)
            };
            let topic = spec.topic_for(i);
            let stop = load_stop.clone();
            tokio::spawn(async move {
                let r = run_publisher_with(&pc, s.as_mut(), &topic, stop).await;
                (s, r)
            })
        })
        .collect();

    let chaos_stop = CancellationToken::new();
    let chaos_task = fault_target.map(|(admin, name)| {
        let schedule = schedule_failures(
            spec.mttf_s.unwrap_or(1.0),
            spec.mttr_s.unwrap_or(0.0),
            spec.total_run_s(),
            spec.rng_seed,
        );
        let hook = reconnect_hook(slots.clone(), tpl.clone());
        let stop = chaos_stop.clone();
        let clock = RunClock {
            origin: run_start,
            scale: 1.0,
        };
        tokio::spawn(async move { run_fault_schedule(&schedule, &admin, &name, &hook, clock, stop).await })
    });

    let mut pub_stats = Vec::new();
    let mut pub_sessions = Vec::new();
    let mut aborted = 0usize;
    for t in pub_tasks {
        match t.await {
            Ok((s, Ok(stats))) => {
                pub_stats.push(stats);
                pub_sessions.push(s);
            }
            Ok((s, Err(LoadError::AbortedByTransport { stats }))) => {
                aborted += 1;
                pub_stats.push(stats);
                pub_sessions.push(s);
            }
            Ok((s, Err(e))) => {
                warnings.push(format!("publisher failed: {e}"));
                pub_sessions.push(s);
            }
            Err(e) => warnings.push(format!("publisher task panicked: {e}")),
        }
    }
    let run_end_ns = wall_clock_ns();
    if aborted > 0 {
        warnings.push(format!("{aborted} publishers lost their session"));
    }

    chaos_stop.cancel();
    let faults = match chaos_task {
        Some(t) => t.await.unwrap_or_default(),
        None => Vec::new(),
    };
    tokio::time::sleep(Duration::from_secs_f64(spec.drain_s.max(0.0))).await;

    let broker_lost = match broker {
        RunningBroker::External if kind == TransportKind::Loopback => false,
        _ => !is_reachable(&probe_addr(spec)?).await,
    } || aborted > 0 && aborted == pub_stats.len();

    monitor_stop.cancel();
    let monitor = match monitor_task {
        Some(t) => t.await.ok(),
        None => None,
    };
    let broker_lost = broker_lost || monitor.as_ref().and_then(|m| m.samples.last()).is_some_and(|s| s.gap);

    collect_stop.cancel();
    let mut subscribers = Vec::with_capacity(collector_tasks.len());
    for t in collector_tasks {
        subscribers.push(t.await.unwrap_or_default());
    }

    let mut slots = slots.lock().await;
    let mut closing = tokio::task::JoinSet::new();
    for s in slots.iter_mut().filter_map(|s| s.session.take()).chain(pub_sessions.drain(..)) {
        closing.spawn(close_session(s));
    }
    closing.join_all().await;
    if let Some(s) = proxy_server {
        s.shutdown().await;
    }

    Ok(Collected {
        run_start_ns,
        run_end_ns,
        subscribers,
        publishers: pub_stats,
        events: log.snapshot(),
        monitor,
        faults,
        broker_lost,
        warnings,
    })
}

fn start_monitor(
    cfg: &RunConfig,
    broker: &RunningBroker,
    stop: CancellationToken,
    warnings: &mut Vec<String>,
) -> Result<Option<JoinHandle<MonitorOutput>>, OrchestratorError> {
    let container = match broker {
        RunningBroker::Container { id, .. } => Some(id.clone()),
        _ => None,
    };
    let engine = match &cfg.broker {
        BrokerConfig::Container(d) => Some(d.container_ctl.clone()),
        _ => None,
    };
    let (endpoint, id, interval) = match &cfg.monitor {
        Some(m) => (
            m.stats_endpoint.clone().or(engine),
            m.container_id.clone().or(container),
            m.interval_s,
        ),
        None => (engine, container, 1.0),
    };
    let (Some(endpoint), Some(id)) = (endpoint, id) else {
        if cfg.monitor.is_some() {
            warnings.push("resource monitor configured without an endpoint and container".into());
        }
        return Ok(None);
    };
    if interval <= 0.0 {
        return Err(OrchestratorError::Config("monitor interval_s must be > 0".into()));
    }
    let client = StatsClient::connect(&endpoint).map_err(|e| OrchestratorError::Engine(e.to_string()))?;
    Ok(Some(tokio::spawn(async move {
        monitor(&client, &id, Duration::from_secs_f64(interval), stop).await
    })))
}

fn write_artifacts(
    spec: &ExperimentSpec,
    dir: &Path,
    label: &str,
    stagger: StaggerMode,
    c: Collected,
) -> Result<RunArtifacts, OrchestratorError> {
    let io = |e: anyhow::Error| OrchestratorError::Artifacts(format!("{e:#}"));
    std::fs::create_dir_all(dir).map_err(|e| OrchestratorError::Artifacts(format!("{}: {e}", dir.display())))?;
    let resources: Vec<ResourceSample> = c.monitor.as_ref().map(|m| m.samples.clone()).unwrap_or_default();

    let samples = dir.join("samples.csv");
    let connections = dir.join("connections.csv");
    let resources_path = dir.join("resources.csv");
    let faults = dir.join("faults.csv");
    let summary = dir.join("summary.json");
    formats::write_samples(&samples, c.subscribers.iter().flat_map(|s| s.samples.iter())).map_err(io)?;
    formats::write_connections(&connections, &c.events).map_err(io)?;
    formats::write_resources(&resources_path, &resources).map_err(io)?;
    formats::write_faults(&faults, &c.faults).map_err(io)?;

    let mut report = summarize(&RunData {
        spec,
        run_start_ns: c.run_start_ns,
        run_end_ns: c.run_end_ns,
        subscribers: &c.subscribers,
        publishers: &c.publishers,
        events: &c.events,
        resources: &resources,
        broker_lost: c.broker_lost,
        publisher_stagger: match stagger {
            StaggerMode::Even => "even".into(),
            StaggerMode::None => "none".into(),
        },
        broker: label.to_string(),
    });
    report.warnings.extend(c.warnings);
    if let Some(m) = &c.monitor {
        if m.flags.empty {
            report.warnings.push("resource monitor collected no samples".into());
        } else if m.flags.gaps > 0 {
            report.warnings.push(format!("resource series has {} gaps", m.flags.gaps));
        }
    }
    formats::write_summary(&summary, &report).map_err(io)?;

    Ok(RunArtifacts {
        spec: spec.clone(),
        dir: dir.to_path_buf(),
        samples,
        connections,
        resources: resources_path,
        faults,
        summary,
        report,
        executed_faults: c.faults,
    })
}
