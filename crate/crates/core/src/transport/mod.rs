//! Uniform session interface over the supported messaging protocols.
//!
//! Every adapter hands incoming messages to a [`MessageSink`] from its own
//! receive task, stamping the wall-clock receive time at the callback
//! boundary. Sessions are owned by one logical client; adapters are
//! fully asynchronous so tens of thousands of sessions can share a runtime.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use async_trait::async_trait;
use bytes::Bytes;
use thiserror::Error;
use tokio::sync::Notify;

pub use crate::spec::{QosLevel, TransportKind};
use crate::model::{wall_clock_ns, ConnectionKind, ConnectionLog};

#[cfg(feature = "amqp")]
mod amqp;
pub mod broker;
pub mod loopback;
mod mqtt;
#[cfg(feature = "nats")]
mod nats;
#[cfg(feature = "resp")]
mod resp;
pub mod wrappers;
#[cfg(feature = "zenoh")]
mod zenoh;

pub use mqtt::MqttSession;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("connect failed: {0}")]
    ConnectFailed(String),
    #[error("unsupported endpoint scheme `{scheme}` for {kind} (expected `{expected}://`)")]
    UnsupportedScheme {
        kind: TransportKind,
        scheme: String,
        expected: &'static str,
    },
    #[error("session is not connected")]
    NotConnected,
    #[error("{kind} does not support qos {requested}")]
    UnsupportedQoS {
        kind: TransportKind,
        requested: QosLevel,
    },
    #[error("publish acknowledgment timed out")]
    PublishTimeout,
    #[error("transport `{0}` not compiled into this build")]
    NotCompiled(TransportKind),
    #[error("{0}")]
    Protocol(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
pub enum MqttVersion {
    #[default]
    #[serde(rename = "3.1.1")]
    V311,
    #[serde(rename = "5.0")]
    V5,
}

#[derive(Debug, Clone)]
pub struct TransportOptions {
    /// Stable across reconnects; unique within a run.
    pub client_id: String,
    pub clean_session: bool,
    pub connect_timeout_ms: u64,
    pub credentials: Option<(String, String)>,
    pub mqtt_version: MqttVersion,
    /// Bound on how long a qos ≥ 1 publish waits for its acknowledgment.
    pub publish_timeout_ms: u64,
    pub events: Option<ConnectionLog>,
}

impl TransportOptions {
    pub fn new(client_id: impl Into<String>) -> Self {
        Self {
            client_id: client_id.into(),
            ..Self::default()
        }
    }

    pub fn with_events(mut self, log: ConnectionLog) -> Self {
        self.events = Some(log);
        self
    }

    pub fn clean_session(mut self, clean: bool) -> Self {
        self.clean_session = clean;
        self
    }

    pub fn connect_timeout_ms(mut self, ms: u64) -> Self {
        self.connect_timeout_ms = ms;
        self
    }

    pub(crate) fn record(&self, kind: ConnectionKind) {
        if let Some(log) = &self.events {
            log.record(&self.client_id, kind);
        }
    }
}

static NEXT_CLIENT: AtomicU64 = AtomicU64::new(0);

impl Default for TransportOptions {
    fn default() -> Self {
        Self {
            client_id: format!(
                "mqb-{}-{}",
                std::process::id(),
                NEXT_CLIENT.fetch_add(1, Ordering::Relaxed)
            ),
            clean_session: true,
            connect_timeout_ms: 5_000,
            credentials: None,
            mqtt_version: MqttVersion::V311,
            publish_timeout_ms: 10_000,
            events: None,
        }
    }
}

/// One delivered message as seen at the adapter callback boundary.
#[derive(Debug, Clone)]
pub struct Delivery {
    pub topic: String,
    pub payload: Bytes,
    pub recv_ts_ns: u64,
}

pub type MessageSink = Box<dyn FnMut(Delivery) + Send + 'static>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Subscription {
    pub topic: String,
    pub qos: QosLevel,
}

/// Wakes a session's reconnect loop immediately instead of waiting for its backoff.
#[derive(Debug, Clone, Default)]
pub struct ReconnectHandle(Arc<Notify>);

impl ReconnectHandle {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn trigger(&self) {
        self.0.notify_one();
    }

    pub(crate) async fn wait(&self) {
        self.0.notified().await
    }
}

#[async_trait]
pub trait Session: Send {
    fn kind(&self) -> TransportKind;
    fn client_id(&self) -> &str;
    fn is_connected(&self) -> bool;

    /// For qos ≥ 1 this resolves only once the protocol acknowledgment arrives.
    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError>;

    async fn subscribe(
        &mut self,
        topic: &str,
        qos: QosLevel,
        sink: MessageSink,
    ) -> Result<Subscription, TransportError>;

    /// Idempotent.
    async fn disconnect(&mut self) -> Result<(), TransportError>;

    fn reconnect_handle(&self) -> Option<ReconnectHandle> {
        None
    }

    /// True once the session can never carry traffic again.
    fn is_closed(&self) -> bool {
        false
    }
}

pub(crate) fn check_qos(kind: TransportKind, qos: QosLevel) -> Result<(), TransportError> {
    if kind.supports(qos) {
        Ok(())
    } else {
        Err(TransportError::UnsupportedQoS {
            kind,
            requested: qos,
        })
    }
}

/// Per-subscription receive clock: wall time, clamped to never step backwards.
#[derive(Debug, Default)]
pub(crate) struct RecvClock {
    last: u64,
}

impl RecvClock {
    pub fn stamp(&mut self) -> u64 {
        self.last = self.last.max(wall_clock_ns());
        self.last
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Endpoint {
    pub scheme: String,
    pub host: String,
    pub port: Option<u16>,
    pub username: Option<String>,
    pub password: Option<String>,
    pub path: String,
    pub raw: String,
}

impl Endpoint {
    pub fn parse(kind: TransportKind, uri: &str) -> Result<Self, TransportError> {
        let url = url::Url::parse(uri).map_err(|e| TransportError::ConnectFailed(format!("invalid endpoint `{uri}`: {e}")))?;
        let expected = kind.expected_scheme();
        if url.scheme() != expected {
            return Err(TransportError::UnsupportedScheme {
                kind,
                scheme: url.scheme().to_string(),
                expected,
            });
        }
        let username = (!url.username().is_empty()).then(|| url.username().to_string());
        Ok(Self {
            scheme: url.scheme().to_string(),
            host: url.host_str().unwrap_or_default().to_string(),
            port: url.port(),
            username,
            password: url.password().map(str::to_string),
            path: url.path().to_string(),
            raw: uri.to_string(),
        })
    }

    pub fn host_port(&self, default_port: u16) -> String {
        format!("{}:{}", self.host, self.port.unwrap_or(default_port))
    }
}

/// Opens a live session for `kind` and records a connect event.
pub async fn connect(
    kind: TransportKind,
    endpoint: &str,
    options: TransportOptions,
) -> Result<Box<dyn Session>, TransportError> {
    let ep = Endpoint::parse(kind, endpoint)?;
    let session: Box<dyn Session> = match kind {
        TransportKind::Loopback => Box::new(loopback::LoopbackSession::connect(&ep, options)?),
        TransportKind::Mqtt => Box::new(MqttSession::connect(&ep, options).await?),
        #[cfg(feature = "nats")]
        TransportKind::Nats => Box::new(nats::NatsSession::connect(&ep, options).await?),
        #[cfg(feature = "amqp")]
        TransportKind::Amqp => Box::new(amqp::AmqpSession::connect(&ep, options).await?),
        #[cfg(feature = "resp")]
        TransportKind::Resp => Box::new(resp::RespSession::connect(&ep, options).await?),
        #[cfg(feature = "zenoh")]
        TransportKind::Zenoh => Box::new(zenoh::ZenohSession::connect(&ep, options).await?),
        #[allow(unreachable_patterns)]
        other => return Err(TransportError::NotCompiled(other)),
    };
    Ok(session)
}

/// MQTT-style filter match: `+` matches one level, a trailing `#` matches the rest.
pub fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}
