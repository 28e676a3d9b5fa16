use std::time::Duration;

use serde::{Deserialize, Serialize};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::bucket::TokenBucket;
use super::LoadError;
use crate::header::{MessageHeader, PayloadTemplate};
use crate::model::wall_clock_ns;
use crate::spec::{ExperimentSpec, QosLevel};
use crate::transport::{Session, TransportError};

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublisherStats {
    pub topic: String,
    pub published_count: u64,
    pub publish_errors: u64,
    pub first_send_ns: u64,
    pub last_send_ns: u64,
}

impl PublisherStats {
    /// Messages emitted, successful or not (the next seq to be used).
    pub fn attempts(&self) -> u64 {
        self.published_count + self.publish_errors
    }
}

#[derive(Debug, Clone)]
pub struct PublisherConfig {
    pub rate: f64,
    pub capacity: f64,
    pub payload_bytes: usize,
    pub qos: QosLevel,
    /// Delay before the first token; spreads phase across publishers.
    pub start_offset: Duration,
    /// Emissions are scheduled only before this offset from the start.
    pub run_for: Option<Duration>,
}

impl PublisherConfig {
    pub fn from_spec(spec: &ExperimentSpec) -> Self {
        Self {
            rate: spec.rate_per_publisher,
            capacity: 1.0,
            payload_bytes: spec.payload_bytes,
            qos: spec.qos,
            start_offset: Duration::ZERO,
            run_for: None,
        }
    }
}

/// Offset for publisher `index` of `count`, spread evenly over one period.
pub fn stagger_offset(index: u32, count: u32, rate: f64) -> Duration {
    if count <= 1 {
        return Duration::ZERO;
    }
    Duration::from_secs_f64(index as f64 / count as f64 / rate)
}

pub async fn run_publisher(
    spec: &ExperimentSpec,
    session: &mut dyn Session,
    topic: &str,
    stop: CancellationToken,
) -> Result<PublisherStats, LoadError> {
    run_publisher_with(&PublisherConfig::from_spec(spec), session, topic, stop).await
}

pub async fn run_publisher_with(
    cfg: &PublisherConfig,
    session: &mut dyn Session,
    topic: &str,
    stop: CancellationToken,
) -> Result<PublisherStats, LoadError> {
    let mut template = PayloadTemplate::new(cfg.payload_bytes)?;
    let mut stats = PublisherStats {
        topic: topic.to_string(),
        ..Default::default()
    };
    let origin = Instant::now() + cfg.start_offset;
    tokio::select! {
        _ = stop.cancelled() => return Ok(stats),
        _ = tokio::time::sleep_until(origin) => {}
    }

    let period_ns = (1e9 / cfg.rate) as u64;
    // Sleeps overshoot by the timer granularity; a token that was due when
    // we went to sleep is taken at its due time so the bucket's cap does not
    // discard the overshoot and drift the rate.
    let slack_ns = (period_ns / 2).min(5_000_000);
    let limit_ns = cfg.run_for.map(|d| d.as_nanos() as u64);
    let mut bucket = TokenBucket::new(cfg.rate, cfg.capacity, 0);
    let mut due: Option<u64> = None;
    let mut seq = 0u64;

    loop {
        if stop.is_cancelled() {
            break;
        }
        let now_ns = Instant::now().saturating_duration_since(origin).as_nanos() as u64;
        let t = match due {
            Some(d) if now_ns >= d && now_ns - d < slack_ns => d,
            _ => now_ns,
        };
        if limit_ns.is_some_and(|l| t >= l) {
            break;
        }
        let a = bucket.try_acquire(t);
        if !a.granted {
            let target = a.next_eligible_ns;
            if limit_ns.is_some_and(|l| target >= l) {
                break;
            }
            due = Some(target);
            tokio::select! {
                _ = stop.cancelled() => break,
                _ = tokio::time::sleep_until(origin + Duration::from_nanos(target)) => {}
            }
            continue;
        }
        due = None;

        let send_ts_ns = wall_clock_ns();
        let payload = template.stamp(&MessageHeader::new(seq, send_ts_ns));
        seq += 1;
        match session.publish(topic, payload, cfg.qos).await {
            Ok(()) => {
                if stats.published_count == 0 {
                    stats.first_send_ns = send_ts_ns;
                }
                stats.published_count += 1;
                stats.last_send_ns = send_ts_ns;
            }
            Err(e) => {
                stats.publish_errors += 1;
                if matches!(e, TransportError::NotConnected) && session.is_closed() {
                    return Err(LoadError::AbortedByTransport { stats });
                }
                tracing::trace!(topic, error = %e, "publish failed");
            }
        }
    }
    Ok(stats)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::transport::wrappers::{DelayedPublish, RejectingPublish};
    use crate::transport::{connect, TransportKind, TransportOptions};

    async fn loopback(id: &str) -> Box<dyn Session> {
        connect(TransportKind::Loopback, &format!("loopback://{id}"), TransportOptions::default())
            .await
            .unwrap()
    }

    fn cfg(rate: f64, secs: u64) -> PublisherConfig {
        PublisherConfig {
            rate,
            capacity: 1.0,
            payload_bytes: 64,
            qos: QosLevel::AtMostOnce,
            start_offset: Duration::ZERO,
            run_for: Some(Duration::from_secs(secs)),
        }
    }

    #[tokio::test(start_paused = true)]
    async fn exact_count_on_fast_clock() {
        let mut s = loopback("pub-fast").await;
        let stats = run_publisher_with(&cfg(100.0, 60), s.as_mut(), "t", CancellationToken::new())
            .await
            .unwrap();
        assert_eq!(stats.published_count, 6000);
        assert_eq!(stats.publish_errors, 0);
        assert!(stats.last_send_ns >= stats.first_send_ns);
    }

    #[tokio::test(start_paused = true)]
    async fn publish_delay_does_not_slow_schedule() {
        let inner = loopback("pub-delay").await;
        let mut s = DelayedPublish::new(inner, Duration::from_millis(50));
        let stats = run_publisher_with(&cfg(10.0, 120), &mut s, "t", CancellationToken::new())
            .await
            .unwrap();
        assert_eq!(stats.published_count, 1200);
    }

    #[tokio::test(start_paused = true)]
    async fn rejected_publishes_counted_not_retried() {
        let inner = loopback("pub-reject").await;
        let mut s = RejectingPublish::new(inner);
        let stats = run_publisher_with(&cfg(10.0, 12), &mut s, "t", CancellationToken::new())
            .await
            .unwrap();
        assert_eq!(stats.published_count, 0);
        assert_eq!(stats.publish_errors, 120);
    }

    #[tokio::test]
    async fn closed_session_aborts() {
        let mut s = loopback("pub-closed").await;
        s.disconnect().await.unwrap();
        let err = run_publisher_with(&cfg(10.0, 1), s.as_mut(), "t", CancellationToken::new()).await;
        assert!(matches!(err, Err(LoadError::AbortedByTransport { stats }) if stats.publish_errors == 1));
    }

    #[tokio::test(start_paused = true)]
    async fn stop_signal_ends_run() {
        let mut s = loopback("pub-stop").await;
        let stop = CancellationToken::new();
        let c = PublisherConfig { run_for: None, ..cfg(10.0, 0) };
        let handle = {
            let stop = stop.clone();
            tokio::spawn(async move { run_publisher_with(&c, s.as_mut(), "t", stop).await })
        };
        tokio::time::sleep(Duration::from_millis(1_050)).await;
        stop.cancel();
        let stats = handle.await.unwrap().unwrap();
        assert_eq!(stats.published_count, 11);
    }

    #[test]
    fn stagger_spreads_one_period() {
        assert_eq!(stagger_offset(0, 10, 10.0), Duration::ZERO);
        assert_eq!(stagger_offset(5, 10, 10.0), Duration::from_millis(50));
        assert!(stagger_offset(9, 10, 10.0) < Duration::from_millis(100));
        assert_eq!(stagger_offset(3, 1, 10.0), Duration::ZERO);
    }
}
