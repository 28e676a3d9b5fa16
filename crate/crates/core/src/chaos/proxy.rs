//! A TCP fault proxy serving a Toxiproxy-compatible admin API.
//!
//! Supports enable/disable and the `reset_peer` toxic. Other toxic types are
//! stored and listed but have no effect on traffic.

use std::collections::BTreeMap;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::net::{TcpListener, TcpSocket, TcpStream};
use tokio::sync::Mutex;
use tokio_util::sync::CancellationToken;

pub const VERSION: &str = "2.12.0";

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct Toxic {
    #[serde(default)]
    pub name: String,
    #[serde(rename = "type")]
    pub kind: String,
    #[serde(default = "downstream")]
    pub stream: String,
    #[serde(default = "full_toxicity")]
    pub toxicity: f64,
    #[serde(default)]
    pub attributes: BTreeMap<String, Value>,
}

fn downstream() -> String {
    "downstream".into()
}

fn full_toxicity() -> f64 {
    1.0
}

impl Toxic {
    fn reset_timeout(&self) -> Option<Duration> {
        (self.kind == "reset_peer").then(|| {
            let ms = self.attributes.get("timeout").and_then(Value::as_u64).unwrap_or(0);
            Duration::from_millis(ms)
        })
    }
}

#[derive(Debug, Clone, Serialize, Deserialize, PartialEq)]
pub struct ProxyInfo {
    pub name: String,
    pub listen: String,
    pub upstream: String,
    pub enabled: bool,
    #[serde(default)]
    pub toxics: Vec<Toxic>,
}

struct Running {
    listener: CancellationToken,
    conns: CancellationToken,
}

struct Proxy {
    name: String,
    listen: SocketAddr,
    upstream: Arc<std::sync::Mutex<String>>,
    enabled: bool,
    toxics: Vec<Toxic>,
    running: Option<Running>,
    live: Arc<AtomicUsize>,
}

impl Proxy {
    fn info(&self) -> ProxyInfo {
        ProxyInfo {
            name: self.name.clone(),
            listen: self.listen.to_string(),
            upstream: self.upstream.lock().unwrap().clone(),
            enabled: self.enabled,
            toxics: self.toxics.clone(),
        }
    }

    fn reset_timeout(&self) -> Option<Duration> {
        self.toxics.iter().filter_map(Toxic::reset_timeout).min()
    }

    /// Resets every live connection after `after`.
    fn reset_connections(&mut self, after: Duration) {
        if let Some(r) = &mut self.running {
            let old = std::mem::replace(&mut r.conns, CancellationToken::new());
            if after.is_zero() {
                old.cancel();
            } else {
                tokio::spawn(async move {
                    tokio::time::sleep(after).await;
                    old.cancel();
                });
            }
        }
    }

    async fn enable(&mut self, shared: &Shared) -> std::io::Result<()> {
        if self.running.is_some() {
            self.enabled = true;
            return Ok(());
        }
        let listener = bind_reuse(self.listen)?;
        self.listen = listener.local_addr()?;
        let running = Running {
            listener: shared.cancel.child_token(),
            conns: CancellationToken::new(),
        };
        tokio::spawn(accept_loop(
            listener,
            running.listener.clone(),
            shared.clone(),
            self.name.clone(),
            self.upstream.clone(),
            self.live.clone(),
        ));
        self.running = Some(running);
        self.enabled = true;
        Ok(())
    }

    fn disable(&mut self) {
        if let Some(r) = self.running.take() {
            r.listener.cancel();
            r.conns.cancel();
        }
        self.enabled = false;
    }
}

fn bind_reuse(addr: SocketAddr) -> std::io::Result<TcpListener> {
    let sock = if addr.is_ipv4() { TcpSocket::new_v4()? } else { TcpSocket::new_v6()? };
    sock.set_reuseaddr(true)?;
    sock.bind(addr)?;
    sock.listen(1024)
}

#[derive(Clone)]
struct Shared {
    proxies: Arc<Mutex<BTreeMap<String, Proxy>>>,
    cancel: CancellationToken,
}

impl Shared {
    /// The current reset token and toxic timeout for a proxy, if it is running.
    async fn conn_guard(&self, name: &str) -> Option<(CancellationToken, Option<Duration>)> {
        let map = self.proxies.lock().await;
        let p = map.get(name)?;
        let r = p.running.as_ref()?;
        Some((r.conns.clone(), p.reset_timeout()))
    }
}

async fn accept_loop(
    listener: TcpListener,
    stop: CancellationToken,
    shared: Shared,
    name: String,
    upstream: Arc<std::sync::Mutex<String>>,
    live: Arc<AtomicUsize>,
) {
    loop {
        let (client, _) = tokio::select! {
            _ = stop.cancelled() => return,
            r = listener.accept() => match r {
                Ok(c) => c,
                Err(e) => {
                    tracing::debug!(proxy = %name, error = %e, "accept failed");
                    continue;
                }
            },
        };
        let Some((conns, reset_after)) = shared.conn_guard(&name).await else {
            let _ = client.set_zero_linger();
            continue;
        };
        let target = upstream.lock().unwrap().clone();
        let live = live.clone();
        tokio::spawn(async move {
            let Ok(server) = TcpStream::connect(&target).await else {
                let _ = client.set_zero_linger();
                return;
            };
            live.fetch_add(1, Ordering::SeqCst);
            pump(client, server, conns, reset_after).await;
            live.fetch_sub(1, Ordering::SeqCst);
        });
    }
}

async fn pump(mut client: TcpStream, mut server: TcpStream, reset: CancellationToken, reset_after: Option<Duration>) {
    let _ = client.set_nodelay(true);
    let _ = server.set_nodelay(true);
    let toxic_reset = async {
        match reset_after {
            Some(d) => tokio::time::sleep(d).await,
            None => std::future::pending().await,
        }
    };
    let severed = tokio::select! {
        _ = tokio::io::copy_bidirectional(&mut client, &mut server) => false,
        _ = reset.cancelled() => true,
        _ = toxic_reset => true,
    };
    if severed {
        let _ = client.set_zero_linger();
        let _ = server.set_zero_linger();
    }
}

pub struct FaultProxyServer {
    addr: SocketAddr,
    shared: Shared,
}

impl FaultProxyServer {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn admin_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Proxied connections currently open through `name`.
    pub async fn live_connections(&self, name: &str) -> usize {
        let map = self.shared.proxies.lock().await;
        map.get(name).map(|p| p.live.load(Ordering::SeqCst)).unwrap_or(0)
    }

    pub async fn shutdown(self) {
        self.shared.cancel.cancel();
        let mut map = self.shared.proxies.lock().await;
        for p in map.values_mut() {
            p.disable();
        }
    }
}

impl Drop for FaultProxyServer {
    fn drop(&mut self) {
        self.shared.cancel.cancel();
    }
}

pub async fn fault_proxy_serve(admin_addr: &str) -> std::io::Result<FaultProxyServer> {
    let listener = TcpListener::bind(admin_addr).await?;
    let addr = listener.local_addr()?;
    let shared = Shared {
        proxies: Arc::new(Mutex::new(BTreeMap::new())),
        cancel: CancellationToken::new(),
    };
    let app = Router::new()
        .route("/version", get(version))
        .route("/reset", post(reset_all))
        .route("/proxies", get(list_proxies).post(create_proxy))
        .route("/proxies/{name}", get(get_proxy).post(update_proxy).delete(delete_proxy))
        .route("/proxies/{name}/toxics", get(list_toxics).post(add_toxic))
        .route("/proxies/{name}/toxics/{toxic}", get(get_toxic).delete(delete_toxic))
        .with_state(shared.clone());
    let stop = shared.cancel.clone();
    tokio::spawn(async move {
        let _ = axum::serve(listener, app)
            .with_graceful_shutdown(async move { stop.cancelled().await })
            .await;
    });
    Ok(FaultProxyServer { addr, shared })
}

fn error(status: StatusCode, msg: impl Into<String>) -> Response {
    (status, Json(json!({ "error": msg.into(), "status": status.as_u16() }))).into_response()
}

fn proxy_not_found() -> Response {
    error(StatusCode::NOT_FOUND, "proxy not found")
}

async fn version() -> Json<Value> {
    Json(json!({ "version": VERSION }))
}

async fn reset_all(State(s): State<Shared>) -> Response {
    let mut map = s.proxies.lock().await;
    for p in map.values_mut() {
        p.toxics.clear();
        if let Err(e) = p.enable(&s).await {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    StatusCode::NO_CONTENT.into_response()
}

async fn list_proxies(State(s): State<Shared>) -> Json<BTreeMap<String, ProxyInfo>> {
    let map = s.proxies.lock().await;
    Json(map.iter().map(|(k, p)| (k.clone(), p.info())).collect())
}

#[derive(Deserialize)]
struct CreateProxy {
    name: String,
    listen: String,
    upstream: String,
    #[serde(default = "enabled_default")]
    enabled: bool,
}

fn enabled_default() -> bool {
    true
}

async fn create_proxy(State(s): State<Shared>, Json(req): Json<CreateProxy>) -> Response {
    let Ok(listen) = tokio::net::lookup_host(&req.listen).await.map(|mut a| a.next()) else {
        return error(StatusCode::BAD_REQUEST, format!("bad listen address {}", req.listen));
    };
    let Some(listen) = listen else {
        return error(StatusCode::BAD_REQUEST, format!("bad listen address {}", req.listen));
    };
    let mut map = s.proxies.lock().await;
    if map.contains_key(&req.name) {
        return error(StatusCode::CONFLICT, "proxy already exists");
    }
    let mut p = Proxy {
        name: req.name.clone(),
        listen,
        upstream: Arc::new(std::sync::Mutex::new(req.upstream)),
        enabled: false,
        toxics: Vec::new(),
        running: None,
        live: Arc::new(AtomicUsize::new(0)),
    };
    if req.enabled {
        if let Err(e) = p.enable(&s).await {
            return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
        }
    }
    let info = p.info();
    map.insert(req.name, p);
    (StatusCode::CREATED, Json(info)).into_response()
}

async fn get_proxy(State(s): State<Shared>, Path(name): Path<String>) -> Response {
    match s.proxies.lock().await.get(&name) {
        Some(p) => Json(p.info()).into_response(),
        None => proxy_not_found(),
    }
}

#[derive(Deserialize)]
struct UpdateProxy {
    enabled: Option<bool>,
    upstream: Option<String>,
    listen: Option<String>,
}

async fn update_proxy(State(s): State<Shared>, Path(name): Path<String>, Json(req): Json<UpdateProxy>) -> Response {
    let mut map = s.proxies.lock().await;
    let Some(p) = map.get_mut(&name) else {
        return proxy_not_found();
    };
    if let Some(u) = req.upstream {
        *p.upstream.lock().unwrap() = u;
    }
    if let Some(l) = req.listen {
        match l.parse() {
            Ok(addr) if addr != p.listen => {
                let was = p.enabled;
                p.disable();
                p.listen = addr;
                if was {
                    if let Err(e) = p.enable(&s).await {
                        return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
                    }
                }
            }
            Ok(_) => {}
            Err(_) => return error(StatusCode::BAD_REQUEST, format!("bad listen address {l}")),
        }
    }
    match req.enabled {
        Some(true) => {
            if let Err(e) = p.enable(&s).await {
                return error(StatusCode::INTERNAL_SERVER_ERROR, e.to_string());
            }
        }
        Some(false) => p.disable(),
        None => {}
    }
    Json(p.info()).into_response()
}

async fn delete_proxy(State(s): State<Shared>, Path(name): Path<String>) -> Response {
    match s.proxies.lock().await.remove(&name) {
        Some(mut p) => {
            p.disable();
            StatusCode::NO_CONTENT.into_response()
        }
        None => proxy_not_found(),
    }
}

async fn list_toxics(State(s): State<Shared>, Path(name): Path<String>) -> Response {
    match s.proxies.lock().await.get(&name) {
        Some(p) => Json(p.toxics.clone()).into_response(),
        None => proxy_not_found(),
    }
}

async fn add_toxic(State(s): State<Shared>, Path(name): Path<String>, Json(mut toxic): Json<Toxic>) -> Response {
    let mut map = s.proxies.lock().await;
    let Some(p) = map.get_mut(&name) else {
        return proxy_not_found();
    };
    if toxic.name.is_empty() {
        toxic.name = format!("{}_{}", toxic.kind, toxic.stream);
    }
    if p.toxics.iter().any(|t| t.name == toxic.name) {
        return error(StatusCode::CONFLICT, "toxic already exists");
    }
    if let Some(after) = toxic.reset_timeout() {
        p.reset_connections(after);
    }
    p.toxics.push(toxic.clone());
    Json(toxic).into_response()
}

async fn get_toxic(State(s): State<Shared>, Path((name, toxic)): Path<(String, String)>) -> Response {
    let map = s.proxies.lock().await;
    let Some(p) = map.get(&name) else {
        return proxy_not_found();
    };
    match p.toxics.iter().find(|t| t.name == toxic) {
        Some(t) => Json(t.clone()).into_response(),
        None => error(StatusCode::NOT_FOUND, "toxic not found"),
    }
}

async fn delete_toxic(State(s): State<Shared>, Path((name, toxic)): Path<(String, String)>) -> Response {
    let mut map = s.proxies.lock().await;
    let Some(p) = map.get_mut(&name) else {
        return proxy_not_found();
    };
    let before = p.toxics.len();
    p.toxics.retain(|t| t.name != toxic);
    if p.toxics.len() == before {
        return error(StatusCode::NOT_FOUND, "toxic not found");
    }
    StatusCode::NO_CONTENT.into_response()
}
