//! Records produced during a run and the aggregated result.

use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::spec::ExperimentSpec;

/// UNIX wall-clock time in nanoseconds.
pub fn wall_clock_ns() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_nanos() as u64)
        .unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencySample {
    pub topic: String,
    pub seq: u64,
    pub send_ts_ns: u64,
    pub recv_ts_ns: u64,
    /// Negative only under clock skew.
    pub latency_ns: i64,
    pub payload_bytes: usize,
}

impl LatencySample {
    pub fn new(topic: impl Into<String>, seq: u64, send_ts_ns: u64, recv_ts_ns: u64, payload_bytes: usize) -> Self {
        Self {
            topic: topic.into(),
            seq,
            send_ts_ns,
            recv_ts_ns,
            latency_ns: recv_ts_ns as i64 - send_ts_ns as i64,
            payload_bytes,
        }
    }

    pub fn is_skewed(&self) -> bool {
        self.latency_ns < 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConnectionKind {
    Connect,
    Disconnect,
    Reconnect,
}

impl ConnectionKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ConnectionKind::Connect => "connect",
            ConnectionKind::Disconnect => "disconnect",
            ConnectionKind::Reconnect => "reconnect",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "connect" => Some(ConnectionKind::Connect),
            "disconnect" => Some(ConnectionKind::Disconnect),
            "reconnect" => Some(ConnectionKind::Reconnect),
            _ => None,
        }
    }

    pub fn is_up(self) -> bool {
        !matches!(self, ConnectionKind::Disconnect)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConnectionEvent {
    pub client_id: String,
    pub kind: ConnectionKind,
    pub ts_ns: u64,
}

/// Shared append-only log of connection transitions for a whole run.
#[derive(Debug, Clone, Default)]
pub struct ConnectionLog {
    inner: Arc<Mutex<Vec<ConnectionEvent>>>,
}

impl ConnectionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, client_id: &str, kind: ConnectionKind) {
        self.push(ConnectionEvent {
            client_id: client_id.to_string(),
            kind,
            ts_ns: wall_clock_ns(),
        });
    }

    pub fn push(&self, event: ConnectionEvent) {
        self.inner.lock().unwrap().push(event);
    }

    /// Events sorted by timestamp (stable, so per-client order is preserved).
    pub fn snapshot(&self) -> Vec<ConnectionEvent> {
        let mut events = self.inner.lock().unwrap().clone();
        events.sort_by_key(|e| e.ts_ns);
        events
    }

    pub fn len(&self) -> usize {
        self.inner.lock().unwrap().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct LatencyStats {
    pub min_ns: u64,
    pub mean_ns: f64,
    pub stddev_ns: f64,
    pub p50_ns: u64,
    pub p95_ns: u64,
    pub p99_ns: u64,
    pub max_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize, Default)]
pub struct MeanMax {
    pub mean: f64,
    pub max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryReport {
    pub spec: ExperimentSpec,
    pub stable_start_ns: u64,
    pub stable_end_ns: u64,
    pub stable_mode: crate::metrics::DetectionMode,
    /// Messages emitted by all publishers.
    pub published_count: u64,
    /// Deliveries a lossless broker would make (published × subscribers per topic).
    pub expected_deliveries: u64,
    /// Unique (subscriber, topic, seq) deliveries.
    pub received_count: u64,
    pub duplicate_count: u64,
    pub throughput_msg_s: f64,
    pub latency: LatencyStats,
    /// Samples that fed the latency statistics.
    pub latency_sample_count: u64,
    pub loss_fraction: f64,
    pub cpu_cores: MeanMax,
    /// Resident memory: engine `usage` less inactive file cache.
    pub mem_mb: MeanMax,
    /// Raw engine `usage`, which includes page cache.
    #[serde(default)]
    pub mem_usage_mb: MeanMax,
    pub skew_count: u64,
    pub malformed_count: u64,
    pub publish_errors: u64,
    pub degenerate: bool,
    #[serde(default)]
    pub warnings: Vec<String>,
    /// How publisher start times were spread.
    #[serde(default)]
    pub publisher_stagger: String,
    /// Broker label used in the artifact layout.
    #[serde(default)]
    pub broker: String,
}
