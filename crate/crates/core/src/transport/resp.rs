//! Redis pub/sub adapter (RESP2 `PUBLISH`/`SUBSCRIBE`, no persistence).
//!
//! Wildcard filters become `PSUBSCRIBE` glob patterns.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::StreamExt;
use redis::aio::MultiplexedConnection;
use tokio::task::JoinHandle;

use super::{
    check_qos, Delivery, Endpoint, MessageSink, QosLevel, RecvClock, Session, Subscription,
    TransportError, TransportKind, TransportOptions,
};
use crate::model::ConnectionKind;

const DEFAULT_PORT: u16 = 6379;

pub fn to_pattern(topic: &str) -> Option<String> {
    if !topic.contains(['#', '+']) {
        return None;
    }
    Some(
        topic
            .split('/')
            .map(|level| if level == "#" || level == "+" { "*" } else { level })
            .collect::<Vec<_>>()
            .join("/"),
    )
}

pub struct RespSession {
    client: redis::Client,
    conn: MultiplexedConnection,
    options: TransportOptions,
    connected: Arc<AtomicBool>,
    budget: Duration,
    tasks: Vec<JoinHandle<()>>,
}

impl RespSession {
    pub async fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let auth = match (&options.credentials, &ep.username) {
            (Some((u, p)), _) => format!("{u}:{p}@"),
            (None, Some(u)) => format!("{u}:{}@", ep.password.clone().unwrap_or_default()),
            (None, None) => String::new(),
        };
        let url = format!("redis://{auth}{}/", ep.host_port(DEFAULT_PORT));
        let client = redis::Client::open(url).map_err(|e| TransportError::ConnectFailed(e.to_string()))?;
        let budget = Duration::from_millis(options.connect_timeout_ms.max(1));
        let conn = match tokio::time::timeout(budget, client.get_multiplexed_async_connection()).await {
            Ok(Ok(c)) => c,
            Ok(Err(e)) => return Err(TransportError::ConnectFailed(e.to_string())),
            Err(_) => return Err(TransportError::ConnectFailed(format!("timeout connecting to {}", ep.raw))),
        };
        options.record(ConnectionKind::Connect);
        Ok(Self {
            client,
            conn,
            options,
            connected: Arc::new(AtomicBool::new(true)),
            budget,
            tasks: Vec::new(),
        })
    }
}

#[async_trait]
impl Session for RespSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Resp
    }

    fn client_id(&self) -> &str {
        &self.options.client_id
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire)
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        check_qos(TransportKind::Resp, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        redis::cmd("PUBLISH")
            .arg(topic)
            .arg(&payload[..])
            .query_async::<i64>(&mut self.conn)
            .await
            .map(|_| ())
            .map_err(|e| TransportError::Protocol(e.to_string()))
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, mut sink: MessageSink) -> Result<Subscription, TransportError> {
        check_qos(TransportKind::Resp, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        let mut pubsub = match tokio::time::timeout(self.budget, self.client.get_async_pubsub()).await {
            Ok(Ok(p)) => p,
            Ok(Err(e)) => return Err(TransportError::Protocol(e.to_string())),
            Err(_) => return Err(TransportError::Protocol("timeout opening pub/sub connection".into())),
        };
        match to_pattern(topic) {
            Some(p) => pubsub.psubscribe(p).await,
            None => pubsub.subscribe(topic).await,
        }
        .map_err(|e| TransportError::Protocol(e.to_string()))?;
        let (connected, events) = (self.connected.clone(), self.options.clone());
        self.tasks.push(tokio::spawn(async move {
            let mut stream = pubsub.into_on_message();
            let mut clock = RecvClock::default();
            while let Some(msg) = stream.next().await {
                let recv_ts_ns = clock.stamp();
                sink(Delivery {
                    topic: msg.get_channel_name().to_string(),
                    payload: Bytes::copy_from_slice(msg.get_payload_bytes()),
                    recv_ts_ns,
                });
            }
            if connected.swap(false, Ordering::AcqRel) {
                events.record(ConnectionKind::Disconnect);
            }
        }));
        Ok(Subscription {
            topic: topic.to_string(),
            qos,
        })
    }

    fn is_closed(&self) -> bool {
        !self.is_connected()
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        for t in self.tasks.drain(..) {
            t.abort();
        }
        if self.connected.swap(false, Ordering::AcqRel) {
            self.options.record(ConnectionKind::Disconnect);
        }
        Ok(())
    }
}

impl Drop for RespSession {
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
    fn patterns() {
        assert_eq!(to_pattern("bench/1"), None);
        assert_eq!(to_pattern("bench/#").as_deref(), Some("bench/*"));
        assert_eq!(to_pattern("a/+/c").as_deref(), Some("a/*/c"));
    }
}
