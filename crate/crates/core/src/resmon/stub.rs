//! A minimal HTTP server answering Docker Engine stats calls from a generator.
//!
//! Used to exercise the sampler without a container engine.

use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::Router;
use serde_json::{json, Value};
use time::format_description::well_known::Rfc3339;
use time::OffsetDateTime;
use tokio::net::TcpListener;
use tokio_util::sync::CancellationToken;

pub enum StubReply {
    Stats(Value),
    NotFound,
}

type Generator = dyn Fn(u64) -> StubReply + Send + Sync;

struct State {
    container_id: String,
    generator: Box<Generator>,
    requests: AtomicU64,
}

pub struct StatsStub {
    addr: SocketAddr,
    state: Arc<State>,
    cancel: CancellationToken,
}

impl StatsStub {
    /// Serves `generator(k)` for the k-th stats request (from 0) on `container_id`.
    pub async fn serve<F>(container_id: &str, generator: F) -> std::io::Result<Self>
    where
        F: Fn(u64) -> StubReply + Send + Sync + 'static,
    {
        let listener = TcpListener::bind("127.0.0.1:0").await?;
        let addr = listener.local_addr()?;
        let state = Arc::new(State {
            container_id: container_id.to_string(),
            generator: Box::new(generator),
            requests: AtomicU64::new(0),
        });
        let cancel = CancellationToken::new();
        let app = Router::new().fallback({
            let state = state.clone();
            move |req: Request<Body>| handle(state.clone(), req)
        });
        let shutdown = cancel.clone();
        tokio::spawn(async move {
            let _ = axum::serve(listener, app)
                .with_graceful_shutdown(async move { shutdown.cancelled().await })
                .await;
        });
        Ok(Self { addr, state, cancel })
    }

    /// Always returns `doc`.
    pub async fn fixed(container_id: &str, doc: Value) -> std::io::Result<Self> {
        Self::serve(container_id, move |_| StubReply::Stats(doc.clone())).await
    }

    /// Cores used over interval k (between requests k-1 and k) is `step * k`,
    /// with `read` advancing one second per request from `t0_ns`.
    pub async fn linear_ramp(container_id: &str, step: f64, t0_ns: u64) -> std::io::Result<Self> {
        Self::serve(container_id, move |k| StubReply::Stats(ramp_doc(step, t0_ns, k))).await
    }

    pub fn endpoint(&self) -> String {
        format!("http://{}", self.addr)
    }

    pub fn requests(&self) -> u64 {
        self.state.requests.load(Ordering::SeqCst)
    }

    pub fn shutdown(&self) {
        self.cancel.cancel();
    }
}

impl Drop for StatsStub {
    fn drop(&mut self) {
        self.cancel.cancel();
    }
}

/// The ramp's cumulative CPU after `k` intervals.
pub fn ramp_cpu_total_ns(step: f64, k: u64) -> u64 {
    (step * (k * (k + 1)) as f64 / 2.0 * 1e9).round() as u64
}

pub fn ramp_doc(step: f64, t0_ns: u64, k: u64) -> Value {
    stats_doc(t0_ns + k * 1_000_000_000, ramp_cpu_total_ns(step, k), 64 << 20, 16 << 20)
}

/// A cgroup v2 style stats document with the fields the sampler reads.
pub fn stats_doc(read_ns: u64, cpu_total_ns: u64, usage: u64, inactive_file: u64) -> Value {
    let read = OffsetDateTime::from_unix_timestamp_nanos(read_ns as i128)
        .expect("timestamp in range")
        .format(&Rfc3339)
        .expect("rfc3339");
    json!({
        "read": read,
        "preread": "0001-01-01T00:00:00Z",
        "cpu_stats": {
            "cpu_usage": { "total_usage": cpu_total_ns },
            "online_cpus": 4
        },
        "memory_stats": {
            "usage": usage,
            "stats": { "inactive_file": inactive_file }
        }
    })
}

async fn handle(state: Arc<State>, req: Request<Body>) -> Response {
    let segs: Vec<&str> = req.uri().path().split('/').filter(|s| !s.is_empty()).collect();
    match segs.as_slice() {
        [.., "containers", id, "stats"] => {
            if *id != state.container_id {
                return not_found(id);
            }
            let k = state.requests.fetch_add(1, Ordering::SeqCst);
            match (state.generator)(k) {
                StubReply::Stats(v) => axum::Json(v).into_response(),
                StubReply::NotFound => not_found(id),
            }
        }
        [.., "_ping"] => "OK".into_response(),
        _ => StatusCode::NOT_FOUND.into_response(),
    }
}

fn not_found(id: &str) -> Response {
    (
        StatusCode::NOT_FOUND,
        axum::Json(json!({ "message": format!("No such container: {id}") })),
    )
        .into_response()
}
