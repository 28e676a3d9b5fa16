//! Zenoh adapter in client mode against a router.
//!
//! Topics are key expressions as-is; `+` → `*` and `#` → `**`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;

use super::{
    check_qos, Delivery, Endpoint, MessageSink, QosLevel, RecvClock, Session, Subscription,
    TransportError, TransportKind, TransportOptions,
};
use crate::model::ConnectionKind;

const DEFAULT_PORT: u16 = 7447;

pub fn to_key_expr(topic: &str) -> String {
    topic
        .split('/')
        .map(|level| match level {
            "#" => "**",
            "+" => "*",
            other => other,
        })
        .collect::<Vec<_>>()
        .join("/")
}

pub struct ZenohSession {
    session: zenoh::Session,
    options: TransportOptions,
    connected: AtomicBool,
    subscribers: Vec<zenoh::pubsub::Subscriber<()>>,
}

fn config_for(ep: &Endpoint, options: &TransportOptions) -> Result<zenoh::Config, String> {
    let mut config = zenoh::Config::default();
    let set = |c: &mut zenoh::Config, k: &str, v: String| c.insert_json5(k, &v).map_err(|e| format!("{k}: {e}"));
    set(&mut config, "mode", "\"client\"".into())?;
    set(&mut config, "connect/endpoints", format!("[\"tcp/{}\"]", ep.host_port(DEFAULT_PORT)))?;
    set(&mut config, "connect/timeout_ms", options.connect_timeout_ms.to_string())?;
    set(&mut config, "scouting/multicast/enabled", "false".into())?;
    Ok(config)
}

impl ZenohSession {
    pub async fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let config = config_for(ep, &options).map_err(TransportError::ConnectFailed)?;
        let budget = Duration::from_millis(options.connect_timeout_ms.max(1));
        let session = match tokio::time::timeout(budget, zenoh::open(config)).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => return Err(TransportError::ConnectFailed(e.to_string())),
            Err(_) => return Err(TransportError::ConnectFailed(format!("timeout connecting to {}", ep.raw))),
        };
        options.record(ConnectionKind::Connect);
        Ok(Self {
            session,
            options,
            connected: AtomicBool::new(true),
            subscribers: Vec::new(),
        })
    }
}

#[async_trait]
impl Session for ZenohSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Zenoh
    }

    fn client_id(&self) -> &str {
        &self.options.client_id
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire) && !self.session.is_closed()
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        check_qos(TransportKind::Zenoh, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        self.session
            .put(topic, payload.to_vec())
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, sink: MessageSink) -> Result<Subscription, TransportError> {
        check_qos(TransportKind::Zenoh, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        let state = Arc::new(Mutex::new((sink, RecvClock::default())));
        let sub = self
            .session
            .declare_subscriber(to_key_expr(topic))
            .callback(move |sample| {
                let mut guard = state.lock().unwrap();
                let (sink, clock) = &mut *guard;
                let recv_ts_ns = clock.stamp();
                sink(Delivery {
                    topic: sample.key_expr().as_str().to_string(),
                    payload: Bytes::from(sample.payload().to_bytes().into_owned()),
                    recv_ts_ns,
                });
            })
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        self.subscribers.push(sub);
        Ok(Subscription {
            topic: topic.to_string(),
            qos,
        })
    }

    fn is_closed(&self) -> bool {
        !self.is_connected()
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        if !self.connected.swap(false, Ordering::AcqRel) {
            return Ok(());
        }
        self.subscribers.clear();
        let _ = self.session.close().await;
        self.options.record(ConnectionKind::Disconnect);
        Ok(())
    }
}
