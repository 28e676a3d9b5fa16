//! Experiment description and validation.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    LatencyPayload,
    ThroughputPairs,
    Fanout,
    QosReliability,
}

impl Scenario {
    pub fn is_fanout(self) -> bool {
        matches!(self, Scenario::Fanout)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Scenario::LatencyPayload => "latency_payload",
            Scenario::ThroughputPairs => "throughput_pairs",
            Scenario::Fanout => "fanout",
            Scenario::QosReliability => "qos_reliability",
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransportKind {
    Mqtt,
    Nats,
    Amqp,
    Resp,
    Zenoh,
    Loopback,
}

impl TransportKind {
    pub fn as_str(self) -> &'static str {
        match self {
            TransportKind::Mqtt => "mqtt",
            TransportKind::Nats => "nats",
            TransportKind::Amqp => "amqp",
            TransportKind::Resp => "resp",
            TransportKind::Zenoh => "zenoh",
            TransportKind::Loopback => "loopback",
        }
    }

    /// Highest QoS the adapter honors without downgrading.
    pub fn max_qos(self) -> QosLevel {
        match self {
            TransportKind::Mqtt => QosLevel::ExactlyOnce,
            _ => QosLevel::AtMostOnce,
        }
    }

    pub fn supports(self, qos: QosLevel) -> bool {
        qos <= self.max_qos()
    }

    pub fn expected_scheme(self) -> &'static str {
        match self {
            TransportKind::Mqtt | TransportKind::Nats | TransportKind::Resp => "tcp",
            TransportKind::Amqp => "amqp",
            TransportKind::Zenoh => "zenoh",
            TransportKind::Loopback => "loopback",
        }
    }

    pub fn default_port(self) -> u16 {
        match self {
            TransportKind::Mqtt => 1883,
            TransportKind::Nats => 4222,
            TransportKind::Amqp => 5672,
            TransportKind::Resp => 6379,
            TransportKind::Zenoh => 7447,
            TransportKind::Loopback => 0,
        }
    }
}

impl fmt::Display for TransportKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for TransportKind {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "mqtt" => Ok(TransportKind::Mqtt),
            "nats" => Ok(TransportKind::Nats),
            "amqp" => Ok(TransportKind::Amqp),
            "resp" | "redis" => Ok(TransportKind::Resp),
            "zenoh" => Ok(TransportKind::Zenoh),
            "loopback" => Ok(TransportKind::Loopback),
            other => Err(format!("unknown transport kind `{other}`")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Default, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum QosLevel {
    #[default]
    AtMostOnce = 0,
    AtLeastOnce = 1,
    ExactlyOnce = 2,
}

impl TryFrom<u8> for QosLevel {
    type Error = String;

    fn try_from(v: u8) -> Result<Self, Self::Error> {
        match v {
            0 => Ok(QosLevel::AtMostOnce),
            1 => Ok(QosLevel::AtLeastOnce),
            2 => Ok(QosLevel::ExactlyOnce),
            v => Err(format!("qos must be 0, 1 or 2 (got {v})")),
        }
    }
}

impl From<QosLevel> for u8 {
    fn from(q: QosLevel) -> u8 {
        q as u8
    }
}

impl fmt::Display for QosLevel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", *self as u8)
    }
}

fn default_plateau_window() -> f64 {
    10.0
}

fn default_drain() -> f64 {
    2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentSpec {
    pub scenario: Scenario,
    pub transport_kind: TransportKind,
    pub endpoint: String,
    #[serde(default = "one")]
    pub pairs: u32,
    #[serde(default)]
    pub fanout_subscribers: u32,
    pub rate_per_publisher: f64,
    pub payload_bytes: usize,
    pub duration_s: f64,
    #[serde(default)]
    pub warmup_s: f64,
    #[serde(default)]
    pub qos: QosLevel,
    #[serde(default)]
    pub mttf_s: Option<f64>,
    #[serde(default)]
    pub mttr_s: Option<f64>,
    #[serde(default = "default_topic_prefix")]
    pub topic_prefix: String,
    #[serde(default)]
    pub rng_seed: u64,
    /// MQTT persistent session; defaults to `true` (persistent) when qos > 0.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clean_session: Option<bool>,
    /// Quiet window used by saturation-plateau detection.
    #[serde(default = "default_plateau_window")]
    pub plateau_window_s: f64,
    /// Time subscribers keep listening after publishers stop.
    #[serde(default = "default_drain")]
    pub drain_s: f64,
    /// Caps retained latency samples per subscriber (0 = unlimited).
    #[serde(default)]
    pub max_samples_per_subscriber: usize,
}

fn one() -> u32 {
    1
}

fn default_topic_prefix() -> String {
    "bench".to_string()
}

impl ExperimentSpec {
    fn base(scenario: Scenario, transport_kind: TransportKind, endpoint: &str) -> Self {
        Self {
            scenario,
            transport_kind,
            endpoint: endpoint.to_string(),
            pairs: 10,
            fanout_subscribers: 0,
            rate_per_publisher: 10.0,
            payload_bytes: 1024,
            duration_s: 120.0,
            warmup_s: 60.0,
            qos: QosLevel::AtMostOnce,
            mttf_s: None,
            mttr_s: None,
            topic_prefix: default_topic_prefix(),
            rng_seed: 0,
            clean_session: None,
            plateau_window_s: default_plateau_window(),
            drain_s: default_drain(),
            max_samples_per_subscriber: 0,
        }
    }

    /// Latency-vs-payload cell: 10 pairs, 10 msg/s, 120 s after a 60 s warmup, QoS 0.
    pub fn latency_payload(kind: TransportKind, endpoint: &str, payload_bytes: usize) -> Self {
        Self {
            payload_bytes,
            ..Self::base(Scenario::LatencyPayload, kind, endpoint)
        }
    }

    /// Throughput cell: `pairs` × 10 msg/s, 1 KB, 120 s after a 60 s warmup, QoS 0.
    pub fn throughput_pairs(kind: TransportKind, endpoint: &str, pairs: u32) -> Self {
        Self {
            pairs,
            ..Self::base(Scenario::ThroughputPairs, kind, endpoint)
        }
    }

    /// One publisher at 100 msg/s broadcasting to `subscribers` on a shared topic.
    pub fn fanout(kind: TransportKind, endpoint: &str, subscribers: u32) -> Self {
        Self {
            pairs: 1,
            fanout_subscribers: subscribers,
            rate_per_publisher: 100.0,
            ..Self::base(Scenario::Fanout, kind, endpoint)
        }
    }

    /// Reliability cell: 10 pairs, 10 msg/s, 1 KB, 180 s, MTTF 30 s, MTTR 5 s.
    pub fn qos_reliability(kind: TransportKind, endpoint: &str, qos: QosLevel) -> Self {
        Self {
            duration_s: 180.0,
            warmup_s: 0.0,
            qos,
            mttf_s: Some(30.0),
            mttr_s: Some(5.0),
            ..Self::base(Scenario::QosReliability, kind, endpoint)
        }
    }

    pub fn publisher_count(&self) -> u32 {
        if self.scenario.is_fanout() {
            1
        } else {
            self.pairs
        }
    }

    pub fn subscriber_count(&self) -> u32 {
        if self.scenario.is_fanout() {
            self.fanout_subscribers
        } else {
            self.pairs
        }
    }

    /// Connected clients expected once the fleet is up.
    pub fn client_count(&self) -> u32 {
        self.publisher_count() + self.subscriber_count()
    }

    /// Messages per second entering the broker.
    pub fn offered_load(&self) -> f64 {
        self.publisher_count() as f64 * self.rate_per_publisher
    }

    /// Deliveries per second the broker must sustain (fanout multiplies by N).
    pub fn target_delivery_rate(&self) -> f64 {
        if self.scenario.is_fanout() {
            self.rate_per_publisher * self.fanout_subscribers as f64
        } else {
            self.offered_load()
        }
    }

    pub fn topic_for(&self, index: u32) -> String {
        if self.scenario.is_fanout() {
            format!("{}/fanout", self.topic_prefix)
        } else {
            format!("{}/{}", self.topic_prefix, index)
        }
    }

    pub fn persistent_session(&self) -> bool {
        match self.clean_session {
            Some(clean) => !clean,
            None => self.qos > QosLevel::AtMostOnce,
        }
    }

    pub fn has_faults(&self) -> bool {
        self.mttf_s.is_some() && self.mttr_s.is_some()
    }

    pub fn total_run_s(&self) -> f64 {
        self.warmup_s + self.duration_s
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl Violation {
    fn new(field: &str, message: impl Into<String>) -> Self {
        Self {
            field: field.to_string(),
            message: message.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

/// Collects every invariant violation rather than stopping at the first.
pub fn validate_spec(spec: &ExperimentSpec) -> Result<(), Vec<Violation>> {
    let mut v = Vec::new();

    if spec.scenario.is_fanout() {
        if spec.fanout_subscribers < 1 {
            v.push(Violation::new("fanout_subscribers", "fanout_subscribers ≥ 1"));
        }
    } else if spec.pairs < 1 {
        v.push(Violation::new("pairs", "pairs ≥ 1"));
    }
    if spec.payload_bytes < crate::header::HEADER_LEN {
        v.push(Violation::new(
            "payload_bytes",
            "payload_bytes ≥ 24 (payload must hold the header)",
        ));
    }
    if !(spec.duration_s.is_finite() && spec.duration_s > 0.0) {
        v.push(Violation::new("duration_s", "duration_s > 0"));
    }
    if !(spec.warmup_s.is_finite() && spec.warmup_s >= 0.0) {
        v.push(Violation::new("warmup_s", "warmup_s ≥ 0"));
    }
    if !(spec.rate_per_publisher.is_finite() && spec.rate_per_publisher > 0.0) {
        v.push(Violation::new("rate_per_publisher", "rate_per_publisher > 0"));
    }
    match (spec.mttf_s, spec.mttr_s) {
        (None, None) => {}
        (Some(mttf), Some(mttr)) => {
            if !(mttf.is_finite() && mttf > 0.0) {
                v.push(Violation::new("mttf_s", "mttf_s > 0"));
            }
            if !(mttr.is_finite() && mttr > 0.0) {
                v.push(Violation::new("mttr_s", "mttr_s > 0"));
            }
        }
        _ => v.push(Violation::new(
            "mttf_s",
            "mttf_s and mttr_s must be both present or both absent",
        )),
    }
    if !spec.transport_kind.supports(spec.qos) {
        v.push(Violation::new(
            "qos",
            format!(
                "UnsupportedQoS: {} supports qos ≤ {} (requested {})",
                spec.transport_kind,
                spec.transport_kind.max_qos(),
                spec.qos
            ),
        ));
    }
    match url::Url::parse(&spec.endpoint) {
        Ok(u) if u.scheme() == spec.transport_kind.expected_scheme() => {}
        Ok(u) => v.push(Violation::new(
            "endpoint",
            format!(
                "scheme `{}` does not match transport {} (expected `{}://`)",
                u.scheme(),
                spec.transport_kind,
                spec.transport_kind.expected_scheme()
            ),
        )),
        Err(e) => v.push(Violation::new("endpoint", format!("invalid URI: {e}"))),
    }
    if spec.topic_prefix.is_empty() {
        v.push(Violation::new("topic_prefix", "topic_prefix must be non-empty"));
    }
    if !(spec.plateau_window_s.is_finite() && spec.plateau_window_s > 0.0) {
        v.push(Violation::new("plateau_window_s", "plateau_window_s > 0"));
    }
    if !(spec.drain_s.is_finite() && spec.drain_s >= 0.0) {
        v.push(Violation::new("drain_s", "drain_s ≥ 0"));
    }

    if v.is_empty() {
        Ok(())
    } else {
        Err(v)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MQTT: &str = "tcp://127.0.0.1:1883";

    #[test]
    fn paper_parameter_sets_validate() {
        for payload in [1024, 16 * 1024, 1024 * 1024] {
            let s = ExperimentSpec::latency_payload(TransportKind::Mqtt, MQTT, payload);
            assert_eq!(validate_spec(&s), Ok(()));
        }
        let s = ExperimentSpec::latency_payload(TransportKind::Mqtt, MQTT, 1024);
        assert_eq!((s.pairs, s.rate_per_publisher, s.duration_s, s.warmup_s), (10, 10.0, 120.0, 60.0));
        assert_eq!(s.qos, QosLevel::AtMostOnce);

        for pairs in [500, 1000, 2000, 10_000] {
            let s = ExperimentSpec::throughput_pairs(TransportKind::Nats, MQTT, pairs);
            assert_eq!(validate_spec(&s), Ok(()));
            assert_eq!(s.offered_load(), pairs as f64 * 10.0);
        }
        for qos in [QosLevel::AtMostOnce, QosLevel::AtLeastOnce, QosLevel::ExactlyOnce] {
            let s = ExperimentSpec::qos_reliability(TransportKind::Mqtt, MQTT, qos);
            assert_eq!(validate_spec(&s), Ok(()));
            assert_eq!((s.mttf_s, s.mttr_s, s.duration_s), (Some(30.0), Some(5.0), 180.0));
        }
    }

    #[test]
    fn zero_pairs_rejected() {
        let mut s = ExperimentSpec::latency_payload(TransportKind::Mqtt, MQTT, 1024);
        s.pairs = 0;
        let errs = validate_spec(&s).unwrap_err();
        assert!(errs.iter().any(|e| e.message == "pairs ≥ 1"));
    }

    #[test]
    fn nats_rejects_qos1() {
        let mut s = ExperimentSpec::latency_payload(TransportKind::Nats, "tcp://127.0.0.1:4222", 1024);
        s.qos = QosLevel::AtLeastOnce;
        let errs = validate_spec(&s).unwrap_err();
        assert_eq!(errs.len(), 1);
        assert!(errs[0].message.starts_with("UnsupportedQoS"));
    }

    #[test]
    fn reports_every_violation() {
        let mut s = ExperimentSpec::latency_payload(TransportKind::Loopback, "loopback://0", 1024);
        s.pairs = 0;
        s.payload_bytes = 10;
        s.duration_s = 0.0;
        s.warmup_s = -1.0;
        s.rate_per_publisher = 0.0;
        s.mttf_s = Some(30.0);
        let fields: Vec<_> = validate_spec(&s)
            .unwrap_err()
            .into_iter()
            .map(|v| v.field)
            .collect();
        assert_eq!(
            fields,
            ["pairs", "payload_bytes", "duration_s", "warmup_s", "rate_per_publisher", "mttf_s"]
        );
    }

    #[test]
    fn fanout_needs_subscribers() {
        let mut s = ExperimentSpec::fanout(TransportKind::Mqtt, MQTT, 5);
        assert_eq!(validate_spec(&s), Ok(()));
        assert_eq!(s.target_delivery_rate(), 500.0);
        assert_eq!(s.topic_for(3), "bench/fanout");
        s.fanout_subscribers = 0;
        assert!(validate_spec(&s).is_err());
    }

    #[test]
    fn scheme_must_match_kind() {
        let s = ExperimentSpec::latency_payload(TransportKind::Amqp, MQTT, 1024);
        let errs = validate_spec(&s).unwrap_err();
        assert_eq!(errs[0].field, "endpoint");
    }

    #[test]
    fn json_uses_spec_field_names() {
        let s = ExperimentSpec::qos_reliability(TransportKind::Mqtt, MQTT, QosLevel::AtLeastOnce);
        let v: serde_json::Value = serde_json::to_value(&s).unwrap();
        assert_eq!(v["scenario"], "qos_reliability");
        assert_eq!(v["transport_kind"], "mqtt");
        assert_eq!(v["qos"], 1);
        let back: ExperimentSpec = serde_json::from_value(v).unwrap();
        assert_eq!(back, s);
        assert!(serde_json::from_str::<QosLevel>("3").is_err());
    }
}
