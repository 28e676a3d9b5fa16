//! Broker container CPU and memory sampling through the Docker Engine stats API.

use std::time::Duration;

use bollard::errors::Error as DockerError;
use bollard::models::ContainerStatsResponse;
use bollard::query_parameters::StatsOptions;
use bollard::{Docker, API_DEFAULT_VERSION};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use thiserror::Error;
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use crate::model::{wall_clock_ns, MeanMax};

pub mod stub;

const CONNECT_TIMEOUT_S: u64 = 5;
const MIB: f64 = (1u64 << 20) as f64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSample {
    pub ts_ns: u64,
    pub cpu_total_ns: u64,
    /// `usage` less inactive file cache.
    pub mem_rss_bytes: u64,
    /// Raw `usage` as reported by the engine.
    #[serde(default)]
    pub mem_usage_bytes: u64,
    /// Poll failed at `ts_ns`; the other fields are zero.
    #[serde(default)]
    pub gap: bool,
}

impl ResourceSample {
    pub fn gap_at(ts_ns: u64) -> Self {
        Self {
            ts_ns,
            cpu_total_ns: 0,
            mem_rss_bytes: 0,
            mem_usage_bytes: 0,
            gap: true,
        }
    }
}

#[derive(Debug, Error)]
pub enum ResmonError {
    #[error("container {0} not found or not running")]
    ContainerNotFound(String),
    #[error("stats endpoint unreachable: {0}")]
    EndpointUnreachable(String),
    #[error("sample timestamps not increasing ({prev} -> {curr})")]
    NonMonotonicTime { prev: u64, curr: u64 },
    #[error("stats response missing {0}")]
    MissingField(&'static str),
    #[error("unsupported stats endpoint {0:?}")]
    BadEndpoint(String),
}

/// Maps one engine stats document to a sample.
///
/// The `read` timestamp is used when present, otherwise the local wall clock.
/// A zero `read` (year 1) is what the engine reports for a stopped container.
pub fn sample_from_stats(container_id: &str, stats: &ContainerStatsResponse) -> Result<ResourceSample, ResmonError> {
    let ts_ns = match stats.read {
        Some(t) if t.year() <= 1 => return Err(ResmonError::ContainerNotFound(container_id.to_string())),
        Some(t) => u64::try_from(t.unix_timestamp_nanos()).unwrap_or_else(|_| wall_clock_ns()),
        None => wall_clock_ns(),
    };
    let cpu_total_ns = stats
        .cpu_stats
        .as_ref()
        .and_then(|c| c.cpu_usage.as_ref())
        .and_then(|u| u.total_usage)
        .ok_or(ResmonError::MissingField("cpu_stats.cpu_usage.total_usage"))?;
    let mem = stats.memory_stats.as_ref();
    let usage = mem
        .and_then(|m| m.usage)
        .ok_or_else(|| ResmonError::ContainerNotFound(container_id.to_string()))?;
    let inactive = mem
        .and_then(|m| m.stats.as_ref())
        .and_then(|s| s.get("inactive_file").or_else(|| s.get("total_inactive_file")).copied())
        .unwrap_or(0);
    Ok(ResourceSample {
        ts_ns,
        cpu_total_ns,
        mem_rss_bytes: usage.saturating_sub(inactive),
        mem_usage_bytes: usage,
        gap: false,
    })
}

/// Handle on a container engine endpoint.
#[derive(Clone)]
pub struct StatsClient {
    docker: Docker,
}

impl StatsClient {
    /// Accepts `unix:///path`, `http://host:port` or `tcp://host:port`.
    pub fn connect(endpoint: &str) -> Result<Self, ResmonError> {
        let docker = if let Some(path) = endpoint.strip_prefix("unix://") {
            Docker::connect_with_unix(path, CONNECT_TIMEOUT_S, API_DEFAULT_VERSION)
        } else if endpoint.starts_with("http://") || endpoint.starts_with("tcp://") {
            Docker::connect_with_http(endpoint, CONNECT_TIMEOUT_S, API_DEFAULT_VERSION)
        } else {
            return Err(ResmonError::BadEndpoint(endpoint.to_string()));
        }
        .map_err(|e| ResmonError::EndpointUnreachable(e.to_string()))?;
        Ok(Self { docker })
    }

    pub fn docker(&self) -> &Docker {
        &self.docker
    }

    pub async fn poll(&self, container_id: &str) -> Result<ResourceSample, ResmonError> {
        let opts = StatsOptions {
            stream: false,
            one_shot: true,
        };
        let mut stream = self.docker.stats(container_id, Some(opts));
        match stream.next().await {
            Some(Ok(stats)) => sample_from_stats(container_id, &stats),
            Some(Err(e)) => Err(map_docker_error(container_id, e)),
            None => Err(ResmonError::EndpointUnreachable("empty stats stream".into())),
        }
    }
}

pub(crate) fn map_docker_error(container_id: &str, e: DockerError) -> ResmonError {
    match e {
        DockerError::DockerResponseServerError { status_code: 404, .. } => {
            ResmonError::ContainerNotFound(container_id.to_string())
        }
        DockerError::DockerResponseServerError { status_code: 409, .. } => {
            ResmonError::ContainerNotFound(container_id.to_string())
        }
        other => ResmonError::EndpointUnreachable(other.to_string()),
    }
}

pub async fn poll_stats(stats_endpoint: &str, container_id: &str) -> Result<ResourceSample, ResmonError> {
    StatsClient::connect(stats_endpoint)?.poll(container_id).await
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CoreUsage {
    pub cores: f64,
    /// Cumulative CPU went backwards, so the container restarted.
    pub restarted: bool,
}

pub fn cpu_cores_used(prev: &ResourceSample, curr: &ResourceSample) -> Result<CoreUsage, ResmonError> {
    if curr.ts_ns <= prev.ts_ns {
        return Err(ResmonError::NonMonotonicTime {
            prev: prev.ts_ns,
            curr: curr.ts_ns,
        });
    }
    if curr.cpu_total_ns < prev.cpu_total_ns {
        return Ok(CoreUsage {
            cores: 0.0,
            restarted: true,
        });
    }
    let dt = (curr.ts_ns - prev.ts_ns) as f64;
    Ok(CoreUsage {
        cores: (curr.cpu_total_ns - prev.cpu_total_ns) as f64 / dt,
        restarted: false,
    })
}

/// Cores used between consecutive non-gap samples. Pairs spanning a gap or
/// with non-increasing timestamps are skipped.
pub fn cores_series(series: &[ResourceSample]) -> Vec<CoreUsage> {
    series
        .windows(2)
        .filter(|w| !w[0].gap && !w[1].gap)
        .filter_map(|w| cpu_cores_used(&w[0], &w[1]).ok())
        .collect()
}

/// Mean/max cores used and mean/max RSS in MiB.
pub fn series_stats(series: &[ResourceSample]) -> (MeanMax, MeanMax) {
    let cores: Vec<f64> = cores_series(series).iter().filter(|c| !c.restarted).map(|c| c.cores).collect();
    let mem: Vec<f64> = series
        .iter()
        .filter(|s| !s.gap)
        .map(|s| s.mem_rss_bytes as f64 / MIB)
        .collect();
    (mean_max(&cores), mean_max(&mem))
}

/// Mean/max of the raw memory usage in MiB.
pub fn usage_stats(series: &[ResourceSample]) -> MeanMax {
    let mem: Vec<f64> = series
        .iter()
        .filter(|s| !s.gap)
        .map(|s| s.mem_usage_bytes as f64 / MIB)
        .collect();
    mean_max(&mem)
}

fn mean_max(xs: &[f64]) -> MeanMax {
    if xs.is_empty() {
        return MeanMax::default();
    }
    MeanMax {
        mean: xs.iter().sum::<f64>() / xs.len() as f64,
        max: xs.iter().copied().fold(f64::MIN, f64::max),
    }
}

/// Problems worth surfacing in a report.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SeriesFlags {
    pub gaps: usize,
    pub restarts: usize,
    /// Intervals using more cores than allotted.
    pub over_allocation: usize,
    /// No poll ever succeeded.
    pub empty: bool,
}

pub fn flag_series(series: &[ResourceSample], allocated_vcpus: Option<f64>) -> SeriesFlags {
    let cores = cores_series(series);
    SeriesFlags {
        gaps: series.iter().filter(|s| s.gap).count(),
        restarts: cores.iter().filter(|c| c.restarted).count(),
        over_allocation: allocated_vcpus
            .map(|v| cores.iter().filter(|c| c.cores > v + 1e-9).count())
            .unwrap_or(0),
        empty: !series.iter().any(|s| !s.gap),
    }
}

#[derive(Debug, Clone, Default)]
pub struct MonitorOutput {
    pub samples: Vec<ResourceSample>,
    pub flags: SeriesFlags,
    /// Polls that ran past their slot; the missed slots are skipped.
    pub overruns: u64,
}

/// Polls on a fixed schedule `start + k * interval` until `stop`.
///
/// A failed poll leaves a gap marker. Each poll is bounded by the interval so
/// at most one request is outstanding at a time.
pub async fn monitor(
    client: &StatsClient,
    container_id: &str,
    interval: Duration,
    stop: CancellationToken,
) -> MonitorOutput {
    assert!(!interval.is_zero(), "monitor interval must be positive");
    let start = Instant::now();
    let mut out = MonitorOutput::default();
    let mut k: u32 = 0;
    loop {
        let slot = start + interval * k;
        tokio::select! {
            biased;
            _ = stop.cancelled() => break,
            _ = tokio::time::sleep_until(slot) => {}
        }
        let sample = match tokio::time::timeout(interval, client.poll(container_id)).await {
            Ok(Ok(s)) => s,
            Ok(Err(e)) => {
                tracing::debug!(container_id, error = %e, "stats poll failed");
                ResourceSample::gap_at(wall_clock_ns())
            }
            Err(_) => ResourceSample::gap_at(wall_clock_ns()),
        };
        out.samples.push(sample);
        k += 1;
        let due = (start.elapsed().as_nanos() / interval.as_nanos()) as u32;
        if due > k {
            out.overruns += u64::from(due - k);
            k = due;
        }
    }
    out.flags = flag_series(&out.samples, None);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn stats(json: &str) -> ContainerStatsResponse {
        serde_json::from_str(json).unwrap()
    }

    fn s(ts_ns: u64, cpu_total_ns: u64) -> ResourceSample {
        ResourceSample {
            ts_ns,
            cpu_total_ns,
            mem_rss_bytes: 0,
            mem_usage_bytes: 0,
            gap: false,
        }
    }

    #[test]
    fn maps_cgroup_v2_fixture() {
        let st = stats(include_str!("../tests/fixtures/docker_stats_v2.json"));
        let got = sample_from_stats("mqb-mosquitto", &st).unwrap();
        assert_eq!(got.ts_ns, 1_714_564_801_250_000_000);
        assert_eq!(got.cpu_total_ns, 73_450_123_000);
        assert_eq!(got.mem_usage_bytes, 48_365_568);
        assert_eq!(got.mem_rss_bytes, 48_365_568 - 13_643_776);
        assert!(!got.gap);
    }

    #[test]
    fn maps_cgroup_v1_fixture() {
        let st = stats(include_str!("../tests/fixtures/docker_stats_v1.json"));
        let got = sample_from_stats("mqb-emqx", &st).unwrap();
        assert_eq!(got.ts_ns, 1_700_000_000_000_000_001);
        assert_eq!(got.cpu_total_ns, 900_000_000);
        assert_eq!(got.mem_rss_bytes, 104_857_600 - 10_485_760);
    }

    #[test]
    fn stopped_container_is_not_found() {
        let st = stats(include_str!("../tests/fixtures/docker_stats_stopped.json"));
        assert!(matches!(
            sample_from_stats("mqb-dead", &st),
            Err(ResmonError::ContainerNotFound(_))
        ));
    }

    #[test]
    fn cores_arithmetic() {
        let a = s(1_000_000_000, 0);
        assert_eq!(cpu_cores_used(&a, &s(2_000_000_000, 500_000_000)).unwrap().cores, 0.5);
        assert_eq!(cpu_cores_used(&a, &s(2_000_000_000, 0)).unwrap().cores, 0.0);
        assert_eq!(cpu_cores_used(&a, &s(2_000_000_000, 4_000_000_000)).unwrap().cores, 4.0);
    }

    #[test]
    fn restart_and_time_errors() {
        let r = cpu_cores_used(&s(1, 100), &s(2, 50)).unwrap();
        assert_eq!(r, CoreUsage { cores: 0.0, restarted: true });
        assert!(matches!(
            cpu_cores_used(&s(5, 0), &s(5, 1)),
            Err(ResmonError::NonMonotonicTime { prev: 5, curr: 5 })
        ));
    }

    #[test]
    fn stats_skip_gaps_and_use_binary_mb() {
        let mut series = vec![s(0, 0), s(1_000_000_000, 1_000_000_000), ResourceSample::gap_at(2_000_000_000)];
        series.push(s(3_000_000_000, 9_000_000_000));
        series.push(s(4_000_000_000, 11_000_000_000));
        for x in series.iter_mut().filter(|x| !x.gap) {
            x.mem_rss_bytes = 3 << 20;
        }
        series[0].mem_rss_bytes = 1 << 20;
        let (cpu, mem) = series_stats(&series);
        assert_eq!(cpu.mean, 1.5);
        assert_eq!(cpu.max, 2.0);
        assert_eq!(mem.mean, 2.5);
        assert_eq!(mem.max, 3.0);
        let flags = flag_series(&series, Some(1.5));
        assert_eq!(flags.gaps, 1);
        assert_eq!(flags.over_allocation, 1);
        assert!(!flags.empty);
    }

    #[test]
    fn empty_series_is_flagged() {
        let flags = flag_series(&[ResourceSample::gap_at(1)], None);
        assert!(flags.empty);
        assert_eq!(series_stats(&[]), (MeanMax::default(), MeanMax::default()));
    }

    #[test]
    fn endpoint_schemes() {
        assert!(StatsClient::connect("ftp://x").is_err());
        assert!(StatsClient::connect("http://127.0.0.1:1").is_ok());
    }

    #[tokio::test]
    async fn polls_stub_with_fixture() {
        let doc: serde_json::Value = serde_json::from_str(include_str!("../tests/fixtures/docker_stats_v2.json")).unwrap();
        let stub = stub::StatsStub::fixed("mqb-mosquitto", doc).await.unwrap();
        let got = poll_stats(&stub.endpoint(), "mqb-mosquitto").await.unwrap();
        assert_eq!(got.cpu_total_ns, 73_450_123_000);
        assert_eq!(got.mem_rss_bytes, 34_721_792);
        assert!(matches!(
            poll_stats(&stub.endpoint(), "other").await,
            Err(ResmonError::ContainerNotFound(_))
        ));
    }

    #[tokio::test]
    async fn unreachable_endpoint() {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = l.local_addr().unwrap();
        drop(l);
        let r = poll_stats(&format!("http://{addr}"), "x").await;
        assert!(matches!(r, Err(ResmonError::EndpointUnreachable(_))), "{r:?}");
    }

    #[tokio::test]
    async fn monitor_ramp_matches_closed_form() {
        let step = 0.1;
        let stub = stub::StatsStub::linear_ramp("b", step, 1_700_000_000_000_000_000).await.unwrap();
        let client = StatsClient::connect(&stub.endpoint()).unwrap();
        let stop = CancellationToken::new();
        let t = {
            let stop = stop.clone();
            tokio::spawn(async move { monitor(&client, "b", Duration::from_millis(40), stop).await })
        };
        tokio::time::sleep(Duration::from_millis(430)).await;
        stop.cancel();
        let out = t.await.unwrap();
        let k = out.samples.len() as f64 - 1.0;
        assert!(k >= 5.0, "only {} samples", out.samples.len());
        assert!(out.samples.iter().all(|s| !s.gap));
        let (cpu, mem) = series_stats(&out.samples);
        let expected = step * (k + 1.0) / 2.0;
        assert!((cpu.mean - expected).abs() < 1e-9, "{} vs {expected}", cpu.mean);
        assert!((cpu.max - step * k).abs() < 1e-9);
        assert_eq!(mem.mean, 48.0);
    }

    #[tokio::test]
    async fn monitor_records_gaps_after_kill() {
        let stub = stub::StatsStub::serve("b", |k| {
            if k < 3 {
                stub::StubReply::Stats(stub::ramp_doc(1.0, 1_000_000_000_000, k))
            } else {
                stub::StubReply::NotFound
            }
        })
        .await
        .unwrap();
        let client = StatsClient::connect(&stub.endpoint()).unwrap();
        let stop = CancellationToken::new();
        let t = {
            let stop = stop.clone();
            tokio::spawn(async move { monitor(&client, "b", Duration::from_millis(30), stop).await })
        };
        tokio::time::sleep(Duration::from_millis(250)).await;
        stop.cancel();
        let out = t.await.unwrap();
        assert!(out.samples.len() >= 6);
        assert!(out.samples[..3].iter().all(|s| !s.gap));
        assert!(out.samples[3..].iter().all(|s| s.gap));
        assert_eq!(out.flags.gaps, out.samples.len() - 3);
        assert!(!out.flags.empty);
    }
}
