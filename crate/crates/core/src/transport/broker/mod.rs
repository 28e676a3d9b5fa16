//! Minimal MQTT 3.1.1 broker for hermetic tests.
//!
//! Supported: CONNECT/CONNACK, SUBSCRIBE/SUBACK, UNSUBSCRIBE, PUBLISH at qos
//! 0 and 1 (inbound qos 2 is accepted and delivered at qos ≤ 1), PINGREQ,
//! DISCONNECT, persistent sessions and `#`/`+` filters. Retained messages,
//! wills and keep-alive enforcement are not implemented.

pub mod codec;

use std::collections::{HashMap, HashSet, VecDeque};
use std::net::SocketAddr;
use std::sync::{Arc, Mutex};

use bytes::{Bytes, BytesMut};
use thiserror::Error;
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;
use tokio_util::task::TaskTracker;

use self::codec::{Connect, Packet, Publish};
use super::topic_matches;

/// Highest qos granted to subscribers.
const MAX_GRANTED_QOS: u8 = 1;

#[derive(Debug, Error)]
pub enum BrokerError {
    #[error("cannot bind {addr}: {source}")]
    BindFailed {
        addr: String,
        #[source]
        source: std::io::Error,
    },
}

enum Outbound {
    Packet(Bytes),
    Close,
}

type Tx = mpsc::UnboundedSender<Outbound>;

struct Message {
    topic: String,
    payload: Bytes,
    qos: u8,
}

#[derive(Default)]
struct SessionState {
    persistent: bool,
    subs: Vec<(String, u8)>,
    conn: Option<(u64, Tx)>,
    inflight: VecDeque<(u16, Message)>,
    inflight_ids: HashSet<u16>,
    pending: VecDeque<Message>,
    next_pkid: u16,
    incoming_qos2: HashSet<u16>,
}

fn publish_packet(m: &Message, pkid: u16, dup: bool) -> Bytes {
    codec::to_bytes(&Packet::Publish(Publish {
        dup,
        qos: m.qos,
        retain: false,
        topic: m.topic.clone(),
        pkid,
        payload: m.payload.clone(),
    }))
}

impl SessionState {
    fn send(&self, bytes: Bytes) {
        if let Some((_, tx)) = &self.conn {
            let _ = tx.send(Outbound::Packet(bytes));
        }
    }

    fn alloc_pkid(&mut self) -> u16 {
        loop {
            self.next_pkid = self.next_pkid % u16::MAX + 1;
            if self.inflight_ids.insert(self.next_pkid) {
                return self.next_pkid;
            }
        }
    }

    fn deliver(&mut self, m: Message) {
        if self.conn.is_none() {
            if self.persistent && m.qos > 0 {
                self.pending.push_back(m);
            }
            return;
        }
        if m.qos == 0 {
            self.send(publish_packet(&m, 0, false));
            return;
        }
        let pkid = self.alloc_pkid();
        self.send(publish_packet(&m, pkid, false));
        self.inflight.push_back((pkid, m));
    }

    fn acked(&mut self, pkid: u16) {
        if self.inflight_ids.remove(&pkid) {
            if let Some(pos) = self.inflight.iter().position(|(id, _)| *id == pkid) {
                self.inflight.remove(pos);
            }
        }
    }

    fn resume(&mut self) {
        for (pkid, m) in &self.inflight {
            self.send(publish_packet(m, *pkid, true));
        }
        while let Some(m) = self.pending.pop_front() {
            self.deliver(m);
        }
    }
}

#[derive(Default)]
struct State {
    sessions: HashMap<String, SessionState>,
    next_conn: u64,
}

impl State {
    fn attach(&mut self, c: &Connect, tx: &Tx) -> u64 {
        self.next_conn += 1;
        let id = self.next_conn;
        let existing = self.sessions.remove(&c.client_id);
        if let Some((_, old)) = existing.as_ref().and_then(|s| s.conn.as_ref()) {
            let _ = old.send(Outbound::Close);
        }
        let (mut session, present) = match existing {
            Some(s) if s.persistent && !c.clean_session => (s, true),
            _ => (SessionState::default(), false),
        };
        session.persistent = !c.clean_session;
        session.conn = Some((id, tx.clone()));
        session.send(codec::to_bytes(&Packet::ConnAck {
            session_present: present,
            code: 0,
        }));
        session.resume();
        self.sessions.insert(c.client_id.clone(), session);
        id
    }

    fn detach(&mut self, client_id: &str, conn_id: u64) {
        let Some(s) = self.sessions.get_mut(client_id) else { return };
        if s.conn.as_ref().map(|(id, _)| *id) != Some(conn_id) {
            return;
        }
        if s.persistent {
            s.conn = None;
            s.incoming_qos2.clear();
        } else {
            self.sessions.remove(client_id);
        }
    }

    fn route(&mut self, topic: &str, payload: &Bytes, qos: u8) {
        for s in self.sessions.values_mut() {
            let granted = s
                .subs
                .iter()
                .filter(|(f, _)| topic_matches(f, topic))
                .map(|(_, q)| *q)
                .max();
            if let Some(g) = granted {
                s.deliver(Message {
                    topic: topic.to_string(),
                    payload: payload.clone(),
                    qos: qos.min(g),
                });
            }
        }
    }
}

/// Running broker; dropping the handle stops it.
pub struct BrokerHandle {
    addr: SocketAddr,
    state: Arc<Mutex<State>>,
    cancel: CancellationToken,
    tracker: TaskTracker,
}

impl BrokerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// `tcp://ip:port` for the MQTT adapter.
    pub fn endpoint(&self) -> String {
        format!("tcp://{}", self.addr)
    }

    pub fn session_count(&self) -> usize {
        self.state.lock().unwrap().sessions.len()
    }

    pub fn connected_count(&self) -> usize {
        self.state
            .lock()
            .unwrap()
            .sessions
            .values()
            .filter(|s| s.conn.is_some())
            .count()
    }

    /// Messages held for an offline persistent session.
    pub fn queued_for(&self, client_id: &str) -> usize {
        self.state
            .lock()
            .unwrap()
            .sessions
            .get(client_id)
            .map(|s| s.pending.len() + s.inflight.len())
            .unwrap_or(0)
    }

    /// Closes the listener and every connection; session state is lost.
    pub async fn shutdown(self) {
        self.cancel.cancel();
        self.tracker.close();
        self.tracker.wait().await;
    }
}

impl Drop for BrokerHandle {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

pub async fn mini_broker_serve(listen_addr: &str) -> Result<BrokerHandle, BrokerError> {
    let listener = TcpListener::bind(listen_addr)
        .await
        .map_err(|source| BrokerError::BindFailed {
            addr: listen_addr.to_string(),
            source,
        })?;
    let addr = listener.local_addr().map_err(|source| BrokerError::BindFailed {
        addr: listen_addr.to_string(),
        source,
    })?;
    let state = Arc::new(Mutex::new(State::default()));
    let cancel = CancellationToken::new();
    let tracker = TaskTracker::new();
    {
        let (state, cancel, t) = (state.clone(), cancel.clone(), tracker.clone());
        tracker.spawn(async move {
            loop {
                let accepted = tokio::select! {
                    _ = cancel.cancelled() => break,
                    a = listener.accept() => a,
                };
                match accepted {
                    Ok((stream, _)) => {
                        t.spawn(serve_connection(stream, state.clone(), cancel.clone()));
                    }
                    Err(e) => tracing::warn!(error = %e, "mini broker accept failed"),
                }
            }
        });
    }
    tracing::debug!(%addr, "mini broker listening");
    Ok(BrokerHandle {
        addr,
        state,
        cancel,
        tracker,
    })
}

async fn write_loop(mut wr: tokio::net::tcp::OwnedWriteHalf, mut rx: mpsc::UnboundedReceiver<Outbound>) {
    let mut buf = BytesMut::new();
    while let Some(first) = rx.recv().await {
        let mut close = false;
        let mut next = Some(first);
        while let Some(item) = next.take() {
            match item {
                Outbound::Packet(b) => buf.extend_from_slice(&b),
                Outbound::Close => {
                    close = true;
                    break;
                }
            }
            if buf.len() < 64 * 1024 {
                next = rx.try_recv().ok();
            }
        }
        if !buf.is_empty() && wr.write_all(&buf).await.is_err() {
            break;
        }
        buf.clear();
        if close {
            break;
        }
    }
    let _ = wr.shutdown().await;
}

async fn serve_connection(stream: TcpStream, state: Arc<Mutex<State>>, cancel: CancellationToken) {
    let _ = stream.set_nodelay(true);
    let (mut rd, wr) = stream.into_split();
    let (tx, rx) = mpsc::unbounded_channel();
    let writer = tokio::spawn(write_loop(wr, rx));
    let mut buf = BytesMut::with_capacity(16 * 1024);
    let mut me: Option<(String, u64)> = None;

    'conn: loop {
        loop {
            let packet = match codec::decode(&mut buf) {
                Ok(Some(p)) => p,
                Ok(None) => break,
                Err(e) => {
                    tracing::debug!(error = %e, "mini broker dropping client");
                    break 'conn;
                }
            };
            if !handle_packet(packet, &mut me, &state, &tx) {
                break 'conn;
            }
        }
        let read = tokio::select! {
            _ = cancel.cancelled() => break,
            r = rd.read_buf(&mut buf) => r,
        };
        match read {
            Ok(0) | Err(_) => break,
            Ok(_) => {}
        }
    }

    if let Some((client_id, conn_id)) = me {
        state.lock().unwrap().detach(&client_id, conn_id);
    }
    let _ = tx.send(Outbound::Close);
    let _ = writer.await;
}

static ANON: std::sync::atomic::AtomicU64 = std::sync::atomic::AtomicU64::new(0);

/// Returns false when the connection must close.
fn handle_packet(packet: Packet, me: &mut Option<(String, u64)>, state: &Mutex<State>, tx: &Tx) -> bool {
    let reply = |p: Packet| {
        let _ = tx.send(Outbound::Packet(codec::to_bytes(&p)));
    };
    let Some((client_id, _)) = me.as_ref() else {
        let Packet::Connect(mut c) = packet else { return false };
        if c.protocol_level != 4 && c.protocol_level != 3 {
            reply(Packet::ConnAck { session_present: false, code: 1 });
            return false;
        }
        if c.client_id.is_empty() {
            if !c.clean_session {
                reply(Packet::ConnAck { session_present: false, code: 2 });
                return false;
            }
            c.client_id = format!("anon-{}", ANON.fetch_add(1, std::sync::atomic::Ordering::Relaxed));
        }
        let id = state.lock().unwrap().attach(&c, tx);
        *me = Some((c.client_id, id));
        return true;
    };
    let mut st = state.lock().unwrap();
    match packet {
        Packet::Publish(p) => {
            match p.qos {
                0 => st.route(&p.topic, &p.payload, 0),
                1 => {
                    st.route(&p.topic, &p.payload, 1);
                    reply(Packet::PubAck(p.pkid));
                }
                _ => {
                    let fresh = st
                        .sessions
                        .get_mut(client_id)
                        .map(|s| s.incoming_qos2.insert(p.pkid))
                        .unwrap_or(false);
                    if fresh {
                        st.route(&p.topic, &p.payload, 2);
                    }
                    reply(Packet::PubRec(p.pkid));
                }
            }
        }
        Packet::PubAck(pkid) => {
            if let Some(s) = st.sessions.get_mut(client_id) {
                s.acked(pkid);
            }
        }
        Packet::PubRel(pkid) => {
            if let Some(s) = st.sessions.get_mut(client_id) {
                s.incoming_qos2.remove(&pkid);
            }
            reply(Packet::PubComp(pkid));
        }
        Packet::Subscribe { pkid, filters } => {
            let mut codes = Vec::with_capacity(filters.len());
            if let Some(s) = st.sessions.get_mut(client_id) {
                for (filter, qos) in filters {
                    let granted = qos.min(MAX_GRANTED_QOS);
                    s.subs.retain(|(f, _)| *f != filter);
                    s.subs.push((filter, granted));
                    codes.push(granted);
                }
            }
            reply(Packet::SubAck { pkid, codes });
        }
        Packet::Unsubscribe { pkid, filters } => {
            if let Some(s) = st.sessions.get_mut(client_id) {
                s.subs.retain(|(f, _)| !filters.contains(f));
            }
            reply(Packet::UnsubAck(pkid));
        }
        Packet::PingReq => reply(Packet::PingResp),
        Packet::Disconnect => return false,
        Packet::Connect(_) => return false,
        Packet::PubRec(pkid) => reply(Packet::PubRel(pkid)),
        Packet::PubComp(_) | Packet::ConnAck { .. } | Packet::SubAck { .. } | Packet::UnsubAck(_) | Packet::PingResp => {}
    }
    true
}
