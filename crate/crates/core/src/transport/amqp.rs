//! AMQP 0-9-1 adapter over `lapin`.
//!
//! All sessions share one direct exchange; each topic is a routing key and
//! every subscription owns an exclusive, auto-delete, server-named queue.
//! Publishes go out without confirms, so only qos 0 is offered.

use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use futures::StreamExt;
use lapin::options::{
    BasicConsumeOptions, BasicPublishOptions, ExchangeDeclareOptions, QueueBindOptions,
    QueueDeclareOptions,
};
use lapin::types::FieldTable;
use lapin::{BasicProperties, Channel, Connection, ConnectionProperties, ExchangeKind};
use tokio::task::JoinHandle;

use super::{
    check_qos, Delivery, Endpoint, MessageSink, QosLevel, RecvClock, Session, Subscription,
    TransportError, TransportKind, TransportOptions,
};
use crate::model::ConnectionKind;

pub const EXCHANGE: &str = "mqbench.direct";

pub struct AmqpSession {
    conn: Connection,
    channel: Channel,
    options: TransportOptions,
    connected: Arc<AtomicBool>,
    tasks: Vec<JoinHandle<()>>,
}

fn proto(e: lapin::Error) -> TransportError {
    TransportError::Protocol(e.to_string())
}

impl AmqpSession {
    pub async fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let uri = match &options.credentials {
            Some((u, p)) if ep.username.is_none() => {
                let mut url = url::Url::parse(&ep.raw).map_err(|e| TransportError::ConnectFailed(e.to_string()))?;
                let _ = url.set_username(u);
                let _ = url.set_password(Some(p));
                url.to_string()
            }
            _ => ep.raw.clone(),
        };
        let budget = Duration::from_millis(options.connect_timeout_ms.max(1));
        let setup = async {
            let conn = Connection::connect(&uri, ConnectionProperties::default()).await?;
            let channel = conn.create_channel().await?;
            channel
                .exchange_declare(
                    EXCHANGE.into(),
                    ExchangeKind::Direct,
                    ExchangeDeclareOptions::default(),
                    FieldTable::default(),
                )
                .await?;
            Ok::<_, lapin::Error>((conn, channel))
        };
        let (conn, channel) = match tokio::time::timeout(budget, setup).await {
            Ok(Ok(pair)) => pair,
            Ok(Err(e)) => return Err(TransportError::ConnectFailed(e.to_string())),
            Err(_) => return Err(TransportError::ConnectFailed(format!("timeout connecting to {}", ep.raw))),
        };
        let connected = Arc::new(AtomicBool::new(true));
        let mut listener = conn.events_listener();
        let (flag, events) = (connected.clone(), options.clone());
        let watcher = tokio::spawn(async move {
            while let Some(event) = listener.next().await {
                if let lapin::Event::Error(e) = event {
                    tracing::debug!(error = %e, "amqp connection error");
                    if flag.swap(false, Ordering::AcqRel) {
                        events.record(ConnectionKind::Disconnect);
                    }
                }
            }
        });
        options.record(ConnectionKind::Connect);
        Ok(Self {
            conn,
            channel,
            options,
            connected,
            tasks: vec![watcher],
        })
    }
}

#[async_trait]
impl Session for AmqpSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Amqp
    }

    fn client_id(&self) -> &str {
        &self.options.client_id
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire) && self.conn.status().connected()
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        check_qos(TransportKind::Amqp, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        self.channel
            .basic_publish(
                EXCHANGE.into(),
                topic.into(),
                BasicPublishOptions::default(),
                &payload,
                BasicProperties::default(),
            )
            .await
            .map_err(proto)?;
        Ok(())
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, mut sink: MessageSink) -> Result<Subscription, TransportError> {
        check_qos(TransportKind::Amqp, qos)?;
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        if topic.contains(['#', '+']) {
            return Err(TransportError::Protocol(format!(
                "wildcard filter `{topic}` cannot bind to a direct exchange"
            )));
        }
        let queue = self
            .channel
            .queue_declare(
                "".into(),
                QueueDeclareOptions {
                    exclusive: true,
                    auto_delete: true,
                    ..Default::default()
                },
                FieldTable::default(),
            )
            .await
            .map_err(proto)?;
        self.channel
            .queue_bind(
                queue.name().clone(),
                EXCHANGE.into(),
                topic.into(),
                QueueBindOptions::default(),
                FieldTable::default(),
            )
            .await
            .map_err(proto)?;
        let mut consumer = self
            .channel
            .basic_consume(
                queue.name().clone(),
                format!("{}-{}", self.options.client_id, self.tasks.len()).as_str().into(),
                BasicConsumeOptions {
                    no_ack: true,
                    ..Default::default()
                },
                FieldTable::default(),
            )
            .await
            .map_err(proto)?;
        let topic_owned = topic.to_string();
        self.tasks.push(tokio::spawn(async move {
            let mut clock = RecvClock::default();
            while let Some(next) = consumer.next().await {
                let Ok(delivery) = next else { break };
                let recv_ts_ns = clock.stamp();
                sink(Delivery {
                    topic: topic_owned.clone(),
                    payload: Bytes::from(delivery.data),
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
        !self.is_connected()
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        if !self.connected.swap(false, Ordering::AcqRel) {
            return Ok(());
        }
        for t in self.tasks.drain(..) {
            t.abort();
        }
        let _ = tokio::time::timeout(Duration::from_secs(2), self.conn.close(200, "bye".into())).await;
        self.options.record(ConnectionKind::Disconnect);
        Ok(())
    }
}

impl Drop for AmqpSession {
    fn drop(&mut self) {
        for t in &self.tasks {
            t.abort();
        }
    }
}
