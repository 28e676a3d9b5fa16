//! MQTT adapter on top of `rumqttc` (3.1.1 by default, 5.0 selectable).
//!
//! rumqttc reports packet ids only through event-loop events, so the adapter
//! keeps a FIFO of waiters aligned with the order requests enter the client
//! channel. `Outgoing::Publish(pkid)` binds the next waiter to its packet id;
//! the matching PUBACK (qos 1) or PUBCOMP (qos 2) completes it.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use rumqttc::v5 as mqtt5;
use tokio::sync::{oneshot, Notify};
use tokio::task::JoinHandle;

use super::{
    check_qos, topic_matches, Delivery, Endpoint, MessageSink, MqttVersion, QosLevel,
    ReconnectHandle, RecvClock, Session, Subscription, TransportError, TransportKind,
    TransportOptions,
};
use crate::model::ConnectionKind;

const MAX_PACKET: usize = 16 * 1024 * 1024;
const DEFAULT_PORT: u16 = 1883;
const MIN_BACKOFF: Duration = Duration::from_millis(100);
const MAX_BACKOFF: Duration = Duration::from_secs(1);

type Reply = oneshot::Sender<Result<(), TransportError>>;

enum DriverEvent {
    ConnAck { session_present: bool },
    Publish { topic: String, payload: Bytes },
    Completed(u16),
    SubAck(u16),
    OutPublish(u16),
    OutSubscribe(u16),
    OutDisconnect,
    Other,
}

enum Client {
    V4(rumqttc::AsyncClient),
    V5(mqtt5::AsyncClient),
}

enum Driver {
    V4(rumqttc::EventLoop),
    V5(Box<mqtt5::EventLoop>),
}

fn qos4(q: QosLevel) -> rumqttc::QoS {
    match q {
        QosLevel::AtMostOnce => rumqttc::QoS::AtMostOnce,
        QosLevel::AtLeastOnce => rumqttc::QoS::AtLeastOnce,
        QosLevel::ExactlyOnce => rumqttc::QoS::ExactlyOnce,
    }
}

fn qos5(q: QosLevel) -> mqtt5::mqttbytes::QoS {
    match q {
        QosLevel::AtMostOnce => mqtt5::mqttbytes::QoS::AtMostOnce,
        QosLevel::AtLeastOnce => mqtt5::mqttbytes::QoS::AtLeastOnce,
        QosLevel::ExactlyOnce => mqtt5::mqttbytes::QoS::ExactlyOnce,
    }
}

impl Client {
    async fn publish(&self, topic: &str, qos: QosLevel, payload: Bytes) -> Result<(), String> {
        match self {
            Client::V4(c) => c.publish_bytes(topic, qos4(qos), false, payload).await.map_err(|e| e.to_string()),
            Client::V5(c) => c.publish(topic, qos5(qos), false, payload).await.map_err(|e| e.to_string()),
        }
    }

    async fn subscribe(&self, topic: &str, qos: QosLevel) -> Result<(), String> {
        match self {
            Client::V4(c) => c.subscribe(topic, qos4(qos)).await.map_err(|e| e.to_string()),
            Client::V5(c) => c.subscribe(topic, qos5(qos)).await.map_err(|e| e.to_string()),
        }
    }

    fn try_disconnect(&self) -> Result<(), String> {
        match self {
            Client::V4(c) => c.try_disconnect().map_err(|e| e.to_string()),
            Client::V5(c) => c.try_disconnect().map_err(|e| e.to_string()),
        }
    }
}

impl Driver {
    async fn poll(&mut self) -> Result<DriverEvent, String> {
        use rumqttc::Outgoing;
        let outgoing = |o: Outgoing| match o {
            Outgoing::Publish(p) => DriverEvent::OutPublish(p),
            Outgoing::Subscribe(p) => DriverEvent::OutSubscribe(p),
            Outgoing::Disconnect => DriverEvent::OutDisconnect,
            _ => DriverEvent::Other,
        };
        match self {
            Driver::V4(el) => {
                use rumqttc::{ConnectReturnCode, Event, Packet};
                Ok(match el.poll().await.map_err(|e| e.to_string())? {
                    Event::Incoming(Packet::ConnAck(ack)) => {
                        if ack.code != ConnectReturnCode::Success {
                            return Err(format!("connection refused: {:?}", ack.code));
                        }
                        DriverEvent::ConnAck {
                            session_present: ack.session_present,
                        }
                    }
                    Event::Incoming(Packet::Publish(p)) => DriverEvent::Publish {
                        topic: p.topic,
                        payload: p.payload,
                    },
                    Event::Incoming(Packet::PubAck(a)) => DriverEvent::Completed(a.pkid),
                    Event::Incoming(Packet::PubComp(a)) => DriverEvent::Completed(a.pkid),
                    Event::Incoming(Packet::SubAck(a)) => DriverEvent::SubAck(a.pkid),
                    Event::Incoming(_) => DriverEvent::Other,
                    Event::Outgoing(o) => outgoing(o),
                })
            }
            Driver::V5(el) => {
                use mqtt5::mqttbytes::v5::{ConnectReturnCode, Packet};
                use mqtt5::Event;
                Ok(match el.poll().await.map_err(|e| e.to_string())? {
                    Event::Incoming(Packet::ConnAck(ack)) => {
                        if ack.code != ConnectReturnCode::Success {
                            return Err(format!("connection refused: {:?}", ack.code));
                        }
                        DriverEvent::ConnAck {
                            session_present: ack.session_present,
                        }
                    }
                    Event::Incoming(Packet::Publish(p)) => DriverEvent::Publish {
                        topic: String::from_utf8_lossy(&p.topic).into_owned(),
                        payload: p.payload,
                    },
                    Event::Incoming(Packet::PubAck(a)) => DriverEvent::Completed(a.pkid),
                    Event::Incoming(Packet::PubComp(a)) => DriverEvent::Completed(a.pkid),
                    Event::Incoming(Packet::SubAck(a)) => DriverEvent::SubAck(a.pkid),
                    Event::Incoming(_) => DriverEvent::Other,
                    Event::Outgoing(o) => outgoing(o),
                })
            }
        }
    }
}

fn build(ep: &Endpoint, options: &TransportOptions) -> (Client, Driver) {
    let port = ep.port.unwrap_or(DEFAULT_PORT);
    let credentials = options.credentials.clone().or_else(|| {
        ep.username
            .clone()
            .map(|u| (u, ep.password.clone().unwrap_or_default()))
    });
    let connect_timeout_s = options.connect_timeout_ms.div_ceil(1000).max(1);
    match options.mqtt_version {
        MqttVersion::V311 => {
            let mut o = rumqttc::MqttOptions::new(&options.client_id, &ep.host, port);
            o.set_clean_session(options.clean_session)
                .set_keep_alive(Duration::from_secs(30))
                .set_max_packet_size(MAX_PACKET, MAX_PACKET)
                .set_request_channel_capacity(256);
            if let Some((u, p)) = credentials {
                o.set_credentials(u, p);
            }
            let (client, mut el) = rumqttc::AsyncClient::new(o, 256);
            el.network_options.set_connection_timeout(connect_timeout_s);
            (Client::V4(client), Driver::V4(el))
        }
        MqttVersion::V5 => {
            let mut o = mqtt5::MqttOptions::new(&options.client_id, &ep.host, port);
            o.set_clean_start(options.clean_session)
                .set_keep_alive(Duration::from_secs(30))
                .set_max_packet_size(Some(MAX_PACKET as u32))
                .set_connection_timeout(connect_timeout_s);
            if !options.clean_session {
                o.set_session_expiry_interval(Some(u32::MAX));
            }
            if let Some((u, p)) = credentials {
                o.set_credentials(u, p);
            }
            let (client, el) = mqtt5::AsyncClient::new(o, 256);
            (Client::V5(client), Driver::V5(Box::new(el)))
        }
    }
}

enum Waiter {
    Publish { qos: QosLevel, reply: Option<Reply> },
    Subscribe { reply: Option<Reply> },
}

#[derive(Default)]
struct Waiters {
    fifo: VecDeque<Waiter>,
    publishes: HashMap<u16, Option<Reply>>,
    subscribes: HashMap<u16, Option<Reply>>,
}

impl Waiters {
    fn fail_all(&mut self) {
        let err = || Err(TransportError::NotConnected);
        for w in self.fifo.drain(..) {
            if let Waiter::Publish { reply: Some(r), .. } | Waiter::Subscribe { reply: Some(r) } = w {
                let _ = r.send(err());
            }
        }
        for (_, r) in self.publishes.drain().chain(self.subscribes.drain()) {
            if let Some(r) = r {
                let _ = r.send(err());
            }
        }
    }
}

struct SinkEntry {
    filter: String,
    sink: MessageSink,
    clock: RecvClock,
}

struct Shared {
    options: TransportOptions,
    connected: AtomicBool,
    closed: AtomicBool,
    waiters: Mutex<Waiters>,
    sinks: Mutex<Vec<SinkEntry>>,
    subscriptions: Mutex<Vec<(String, QosLevel)>>,
    /// Keeps request order aligned with the waiter FIFO.
    send_lock: tokio::sync::Mutex<()>,
    disconnect_sent: Notify,
    shutdown: Notify,
}

impl Shared {
    fn route(&self, topic: String, payload: Bytes) {
        let mut sinks = self.sinks.lock().unwrap();
        for entry in sinks.iter_mut().filter(|e| topic_matches(&e.filter, &topic)) {
            let recv_ts_ns = entry.clock.stamp();
            (entry.sink)(Delivery {
                topic: topic.clone(),
                payload: payload.clone(),
                recv_ts_ns,
            });
        }
    }

    fn mark_down(&self) {
        if self.connected.swap(false, Ordering::AcqRel) {
            self.options.record(ConnectionKind::Disconnect);
        }
    }

    async fn send_subscribe(&self, client: &Client, topic: &str, qos: QosLevel, reply: Option<Reply>) -> Result<(), TransportError> {
        let _g = self.send_lock.lock().await;
        self.waiters
            .lock()
            .unwrap()
            .fifo
            .push_back(Waiter::Subscribe { reply });
        client
            .subscribe(topic, qos)
            .await
            .map_err(TransportError::Protocol)
    }
}

pub struct MqttSession {
    client: Arc<Client>,
    shared: Arc<Shared>,
    reconnect: ReconnectHandle,
    task: Option<JoinHandle<()>>,
}

impl MqttSession {
    pub async fn connect(ep: &Endpoint, options: TransportOptions) -> Result<Self, TransportError> {
        let (client, mut driver) = build(ep, &options);
        let budget = Duration::from_millis(options.connect_timeout_ms.max(1));
        let handshake = async {
            loop {
                match driver.poll().await {
                    Ok(DriverEvent::ConnAck { .. }) => return Ok(()),
                    Ok(_) => continue,
                    Err(e) => return Err(e),
                }
            }
        };
        match tokio::time::timeout(budget, handshake).await {
            Ok(Ok(())) => {}
            Ok(Err(e)) => return Err(TransportError::ConnectFailed(e)),
            Err(_) => {
                return Err(TransportError::ConnectFailed(format!(
                    "no CONNACK from {} within {} ms",
                    ep.raw, options.connect_timeout_ms
                )))
            }
        }
        options.record(ConnectionKind::Connect);

        let shared = Arc::new(Shared {
            options,
            connected: AtomicBool::new(true),
            closed: AtomicBool::new(false),
            waiters: Mutex::default(),
            sinks: Mutex::default(),
            subscriptions: Mutex::default(),
            send_lock: tokio::sync::Mutex::new(()),
            disconnect_sent: Notify::new(),
            shutdown: Notify::new(),
        });
        let client = Arc::new(client);
        let reconnect = ReconnectHandle::new();
        let task = tokio::spawn(drive(driver, shared.clone(), client.clone(), reconnect.clone()));
        Ok(Self {
            client,
            shared,
            reconnect,
            task: Some(task),
        })
    }

    fn live(&self) -> Result<(), TransportError> {
        if self.shared.closed.load(Ordering::Acquire) || !self.shared.connected.load(Ordering::Acquire) {
            Err(TransportError::NotConnected)
        } else {
            Ok(())
        }
    }
}

async fn drive(mut driver: Driver, shared: Arc<Shared>, client: Arc<Client>, reconnect: ReconnectHandle) {
    let mut backoff = MIN_BACKOFF;
    loop {
        let event = tokio::select! {
            biased;
            _ = shared.shutdown.notified() => break,
            ev = driver.poll() => ev,
        };
        match event {
            Ok(DriverEvent::ConnAck { session_present }) => {
                backoff = MIN_BACKOFF;
                shared.connected.store(true, Ordering::Release);
                shared.options.record(ConnectionKind::Reconnect);
                if !session_present {
                    shared.waiters.lock().unwrap().fail_all();
                    let subs = shared.subscriptions.lock().unwrap().clone();
                    if !subs.is_empty() {
                        let (shared, client) = (shared.clone(), client.clone());
                        tokio::spawn(async move {
                            for (topic, qos) in subs {
                                if let Err(e) = shared.send_subscribe(&client, &topic, qos, None).await {
                                    tracing::warn!(topic, error = %e, "resubscribe failed");
                                }
                            }
                        });
                    }
                }
            }
            Ok(DriverEvent::Publish { topic, payload }) => shared.route(topic, payload),
            Ok(DriverEvent::Completed(pkid)) => {
                if let Some(Some(r)) = shared.waiters.lock().unwrap().publishes.remove(&pkid) {
                    let _ = r.send(Ok(()));
                }
            }
            Ok(DriverEvent::SubAck(pkid)) => {
                if let Some(Some(r)) = shared.waiters.lock().unwrap().subscribes.remove(&pkid) {
                    let _ = r.send(Ok(()));
                }
            }
            Ok(DriverEvent::OutPublish(pkid)) => {
                let mut w = shared.waiters.lock().unwrap();
                // Retransmissions after a reconnect reuse their packet id.
                if pkid != 0 && w.publishes.contains_key(&pkid) {
                    continue;
                }
                match w.fifo.pop_front() {
                    Some(Waiter::Publish { qos, reply }) => {
                        if qos == QosLevel::AtMostOnce {
                            if let Some(r) = reply {
                                let _ = r.send(Ok(()));
                            }
                        } else {
                            w.publishes.insert(pkid, reply);
                        }
                    }
                    other => tracing::warn!(pkid, unexpected = other.is_some(), "publish without waiter"),
                }
            }
            Ok(DriverEvent::OutSubscribe(pkid)) => {
                let mut w = shared.waiters.lock().unwrap();
                match w.fifo.pop_front() {
                    Some(Waiter::Subscribe { reply }) => {
                        w.subscribes.insert(pkid, reply);
                    }
                    other => tracing::warn!(pkid, unexpected = other.is_some(), "subscribe without waiter"),
                }
            }
            Ok(DriverEvent::OutDisconnect) => {
                shared.disconnect_sent.notify_one();
                break;
            }
            Ok(DriverEvent::Other) => {}
            Err(e) => {
                if shared.closed.load(Ordering::Acquire) {
                    break;
                }
                tracing::debug!(client = %shared.options.client_id, error = %e, "mqtt connection lost");
                shared.mark_down();
                tokio::select! {
                    biased;
                    _ = shared.shutdown.notified() => break,
                    _ = reconnect.wait() => backoff = MIN_BACKOFF,
                    _ = tokio::time::sleep(backoff) => backoff = (backoff * 2).min(MAX_BACKOFF),
                }
            }
        }
    }
    shared.mark_down();
    shared.waiters.lock().unwrap().fail_all();
}

#[async_trait]
impl Session for MqttSession {
    fn kind(&self) -> TransportKind {
        TransportKind::Mqtt
    }

    fn client_id(&self) -> &str {
        &self.shared.options.client_id
    }

    fn is_connected(&self) -> bool {
        self.live().is_ok()
    }

    async fn publish(&mut self, topic: &str, payload: Bytes, qos: QosLevel) -> Result<(), TransportError> {
        check_qos(TransportKind::Mqtt, qos)?;
        self.live()?;
        let (tx, rx) = oneshot::channel();
        {
            let _g = self.shared.send_lock.lock().await;
            self.shared.waiters.lock().unwrap().fifo.push_back(Waiter::Publish {
                qos,
                reply: Some(tx),
            });
            self.client
                .publish(topic, qos, payload)
                .await
                .map_err(TransportError::Protocol)?;
        }
        let budget = Duration::from_millis(self.shared.options.publish_timeout_ms);
        match tokio::time::timeout(budget, rx).await {
            Ok(Ok(result)) => result,
            Ok(Err(_)) => Err(TransportError::NotConnected),
            Err(_) if qos == QosLevel::AtMostOnce => Err(TransportError::NotConnected),
            Err(_) => Err(TransportError::PublishTimeout),
        }
    }

    async fn subscribe(&mut self, topic: &str, qos: QosLevel, sink: MessageSink) -> Result<Subscription, TransportError> {
        check_qos(TransportKind::Mqtt, qos)?;
        self.live()?;
        self.shared.sinks.lock().unwrap().push(SinkEntry {
            filter: topic.to_string(),
            sink,
            clock: RecvClock::default(),
        });
        self.shared
            .subscriptions
            .lock()
            .unwrap()
            .push((topic.to_string(), qos));
        let (tx, rx) = oneshot::channel();
        self.shared.send_subscribe(&self.client, topic, qos, Some(tx)).await?;
        let budget = Duration::from_millis(self.shared.options.connect_timeout_ms.max(1000));
        match tokio::time::timeout(budget, rx).await {
            Ok(Ok(Ok(()))) => Ok(Subscription {
                topic: topic.to_string(),
                qos,
            }),
            Ok(Ok(Err(e))) => Err(e),
            Ok(Err(_)) => Err(TransportError::NotConnected),
            Err(_) => Err(TransportError::Protocol(format!("no SUBACK for `{topic}`"))),
        }
    }

    async fn disconnect(&mut self) -> Result<(), TransportError> {
        if self.shared.closed.swap(true, Ordering::AcqRel) {
            return Ok(());
        }
        if self.shared.connected.load(Ordering::Acquire) && self.client.try_disconnect().is_ok() {
            let _ = tokio::time::timeout(Duration::from_millis(500), self.shared.disconnect_sent.notified()).await;
        }
        self.shared.shutdown.notify_one();
        if let Some(task) = self.task.take() {
            if tokio::time::timeout(Duration::from_secs(1), task).await.is_err() {
                tracing::debug!("mqtt event loop did not stop in time");
            }
        }
        self.shared.mark_down();
        Ok(())
    }

    fn reconnect_handle(&self) -> Option<ReconnectHandle> {
        Some(self.reconnect.clone())
    }

    fn is_closed(&self) -> bool {
        self.shared.closed.load(Ordering::Acquire)
    }
}

impl Drop for MqttSession {
    fn drop(&mut self) {
        if let Some(task) = self.task.take() {
            self.shared.closed.store(true, Ordering::Release);
            task.abort();
        }
    }
}
