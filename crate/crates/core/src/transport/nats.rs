//! NATS adapter (core NATS, at-most-once) over `async-nats`.
//!
//! MQTT-style topics are mapped onto subjects: `/` → `.`, `+` → `*`, `#` → `>`.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_nats::connection::State;
use async_trait::async_trait;
use bytes::Bytes;
use futures::StreamExt;
use tokio::task::JoinHandle;

use super::{
    check_qos, Delivery, Endpoint, MessageSink, QosLevel, RecvClock, Session, Subscription,
    TransportError, TransportKind, TransportOptions,
};
use crate::model::ConnectionKind;

const DEFAULT_PORT: u16 = 4222;

pub fn to_subject(topic: &str) -> String {
    topic
        .split('/')
        .map(|level| match level {
            "#" => ">",
            "+" => "*",
            other => other,
        })
        .collect::<Vec<_>>()
        .join(".")
}

fn from_subject(subject: &str) -> String {
    subject.replace('.', "/")
}

pub struct NatsSession {
    client: async_nats::Client,
    options: TransportOptions,
    closed: Arc<AtomicBool>,
    tasks: Vec<JoinHandle<()>>,
}

impl NatsSession {
    pub async fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let down = Arc::new(AtomicBool::new(false));
        let closed = Arc::new(AtomicBool::new(false));
        let events = options.clone();
        let (d, c) = (down.clone(), closed.clone());
        let mut opts = async_nats::ConnectOptions::new()
            .name(&options.client_id)
            .connection_timeout(Duration::from_millis(options.connect_timeout_ms.max(1)))
            .event_callback(move |event| {
                let (events, down, closed) = (events.clone(), d.clone(), c.clone());
                async move {
                    match event {
                        async_nats::Event::Disconnected if !closed.load(Ordering::Acquire) => {
                            if !down.swap(true, Ordering::AcqRel) {
                                events.record(ConnectionKind::Disconnect);
                            }
                        }
                        async_nats::Event::Connected => {
                            if down.swap(false, Ordering::AcqRel) {
                                events.record(ConnectionKind::Reconnect);
                            }
                        }
                        _ => {}
                    }
                }
            });
        let credentials = options.credentials.clone().or_else(|| {
            ep.username
                .clone()
                .map(|u| (u, ep.password.clone().unwrap_or_default()))
        });
        if let Some((u, p)) = credentials {
            opts = opts.user_and_password(u, p);
        }
        let budget = Duration::from_millis(options.connect_timeout_ms.max(1));
        let client = match tokio::time::timeout(budget, opts.connect(ep.host_port(DEFAULT_PORT))).await {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => return Err(TransportError::ConnectFailed(e.to_string())),
            Err(_) => return Err(TransportError::ConnectFailed(format!("timeout connecting to {}", ep.raw))),
        };
        options.record(ConnectionKind::Connect);
        Ok(Self {
            client,
            options,
            closed,
            tasks: Vec::new(),
        })
    }
}

#[async_trait]
impl Session for NatsSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Nats
    }

    fn client_id(&self) -> &str {
        &self.options.client_id
    }

    fn is_connected(&self) -> bool {
        !self.closed.load(Ordering::Acquire) && self.client.connection_state() == State::Connected
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        check_qos(TransportKind::Nats, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        self.client
            .publish(to_subject(topic), payload)
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, mut sink: MessageSink) -> Result<Subscription, TransportError> {
        check_qos(TransportKind::Nats, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        let mut sub = self
            .client
            .subscribe(to_subject(topic))
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        // Round-trip so the SUB is registered before the caller proceeds.
        self.client
            .flush()
            .await
            .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let exact = (!topic.contains(['#', '+'])).then(|| topic.to_string());
        self.tasks.push(tokio::spawn(async move {
            let mut clock = RecvClock::default();
            while let Some(msg) = sub.next().await {
                let recv_ts_ns = clock.stamp();
                let topic = exact.clone().unwrap_or_else(|| from_subject(msg.subject.as_str()));
                sink(Delivery {
                    topic,
                    payload: msg.payload,
                    recv_ts_ns,
                });
            }
        }));
        Ok(Subscription {
            topic: topic.to_string(),
            qos,
        })
    }

    fn is_closed(&self) -> bool {
        self.closed.load(Ordering::Acquire)
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        if self.closed.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        let _ = tokio::time::timeout(Duration::from_secs(1), self.client.flush()).await;
        for t in self.tasks.drain(..) {
            t.abort();
        }
        let _ = self.client.drain().await;
        self.options.record(ConnectionKind::Disconnect);
        Ok(())
    }
}

impl Drop for NatsSession {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn subject_mapping() {
        assert_eq!(to_subject("bench/0"), "bench.0");
        assert_eq!(to_subject("bench/#"), "bench.>");
        assert_eq!(to_subject("a/+/c"), "a.*.c");
        assert_eq!(from_subject("bench.0"), "bench/0");
    }
}
