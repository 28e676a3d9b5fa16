//! In-process bus: lossless, ordered per topic, no network.
//!
//! Sessions that share the same `loopback://<id>` endpoint share a bus.

use std::collections::HashMap;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, LazyLock, Mutex, RwLock};

use async_trait::async_trait;
use bytes::Bytes;
use tokio::sync::mpsc;

use super::{
    check_qos, topic_matches, Delivery, Endpoint, MessageSink, QosLevel, RecvClock, Session,
    Subscription, TransportError, TransportKind, TransportOptions,
};
use crate::model::ConnectionKind;

struct Route {
    owner: u64,
    filter: String,
    tx: mpsc::UnboundedSender<(String, Bytes)>,
}

#[derive(Default)]
pub struct Bus {
    routes: RwLock<Vec<Route>>,
}

impl Bus {
    fn publish(&self, topic: &str, payload: &Bytes) -> usize {
        let routes = self.routes.read().unwrap();
        let mut delivered = 0;
        for r in routes.iter().filter(|r| topic_matches(&r.filter, topic)) {
            if r.tx.send((topic.to_string(), payload.clone())).is_ok() {
                delivered += 1;
            }
        }
        delivered
    }

    fn drop_owner(&self, owner: u64) {
        self.routes.write().unwrap().retain(|r| r.owner != owner);
    }

    pub fn subscriber_count(&self) -> usize {
        self.routes.read().unwrap().len()
    }
}

static BUSES: LazyLock<Mutex<HashMap<String, Arc<Bus>>>> = LazyLock::new(Default::default);
static IDS: AtomicU64 = AtomicU64::new(1);

/// Bus for a loopback id, created on first use.
pub fn bus(id: &str) -> Arc<Bus> {
    BUSES
        .lock()
        .unwrap()
        .entry(id.to_string())
        .or_default()
        .clone()
}

pub struct LoopbackSession {
    bus: Arc<Bus>,
    id: u64,
    options: TransportOptions,
    connected: Arc<AtomicBool>,
}

impl LoopbackSession {
    pub fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let key = if ep.host.is_empty() { ep.path.clone() } else { ep.host.clone() };
        let session = Self {
            bus: bus(&key),
            id: IDS.fetch_add(1, Ordering::Relaxed),
            options,
            connected: Arc::new(AtomicBool::new(true)),
        };
        session.options.record(ConnectionKind::Connect);
        Ok(session)
    }
}

#[async_trait]
impl Session for LoopbackSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Loopback
    }

    fn client_id(&self) -> &str {
        &self.options.client_id
    }

    fn is_connected(&self) -> bool {
        self.connected.load(Ordering::Acquire)
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        check_qos(TransportKind::Loopback, qos)?;
        self.bus.publish(topic, &payload);
        Ok(())
    }

    async fn subscribe(
        &mut self,
        topic: &str,
        qos: QosLevel,
        mut sink: MessageSink,
    ) -> Result<Subscription, TransportError> {
        if !self.is_connected() {
            return Err(TransportError::NotConnected);
        }
        check_qos(TransportKind::Loopback, qos)?;
        let (tx, mut rx) = mpsc::unbounded_channel::<(String, Bytes)>();
        tokio::spawn(async move {
            let mut clock = RecvClock::default();
            while let Some((topic, payload)) = rx.recv().await {
                let recv_ts_ns = clock.stamp();
                sink(Delivery {
                    topic,
                    payload,
                    recv_ts_ns,
                });
            }
        });
        self.bus.routes.write().unwrap().push(Route {
            owner: self.id,
            filter: topic.to_string(),
            tx,
        });
        Ok(Subscription {
            topic: topic.to_string(),
            qos,
        })
    }

    fn is_closed(&self) -> bool {
        !self.is_connected()
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        if self.connected.swap(false, Ordering::AcqRel) {
            self.bus.drop_owner(self.id);
            self.options.record(ConnectionKind::Disconnect);
        }
        Ok(())
    }
}

impl Drop for LoopbackSession {
    fn drop(&mut self) {
        self.bus.drop_owner(self.id);
    }
}
