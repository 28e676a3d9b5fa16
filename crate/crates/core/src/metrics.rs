//! Latency percentiles, stable-period detection, throughput and loss.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::load::{PublisherStats, SubscriberOutput};
use crate::model::{ConnectionEvent, LatencySample, LatencyStats, SummaryReport};
use crate::resmon::{self, ResourceSample};
use crate::spec::ExperimentSpec;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum MetricsError {
    #[error("empty sample set")]
    EmptySampleSet,
    #[error("no connection events")]
    NoEvents,
    #[error("sample topic `{0}` has no publish count")]
    UnknownTopic(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DetectionMode {
    AllConnected,
    SaturationPlateau,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StablePeriod {
    pub start_ns: u64,
    pub end_ns: u64,
    pub detection_mode: DetectionMode,
    pub connected_at_start: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub warning: Option<String>,
}

impl StablePeriod {
    pub fn duration_s(&self) -> f64 {
        self.end_ns.saturating_sub(self.start_ns) as f64 / 1e9
    }

    pub fn contains(&self, ts_ns: u64) -> bool {
        ts_ns >= self.start_ns && ts_ns <= self.end_ns
    }
}

/// 1-based nearest rank `⌈q/100 · n⌉`, clamped to `[1, n]`.
pub fn nearest_rank(q: f64, n: usize) -> usize {
    let x = q * n as f64 / 100.0;
    // Absorb representation error in fractional ranks such as 99.9.
    let r = (x - x.abs() * 1e-12).ceil();
    (r.max(1.0) as usize).min(n)
}

pub fn percentiles(samples: &[u64], qs: &[f64]) -> Result<Vec<u64>, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    Ok(percentiles_sorted(&sorted, qs))
}

fn percentiles_sorted(sorted: &[u64], qs: &[f64]) -> Vec<u64> {
    qs.iter().map(|&q| sorted[nearest_rank(q, sorted.len()) - 1]).collect()
}

pub fn latency_stats(samples: &[u64]) -> Result<LatencyStats, MetricsError> {
    if samples.is_empty() {
        return Err(MetricsError::EmptySampleSet);
    }
    let mut sorted = samples.to_vec();
    sorted.sort_unstable();
    let n = sorted.len() as f64;
    let sum: u128 = sorted.iter().map(|&v| v as u128).sum();
    let mean = sum as f64 / n;
    let var = sorted.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
    let p = percentiles_sorted(&sorted, &[50.0, 95.0, 99.0]);
    Ok(LatencyStats {
        min_ns: sorted[0],
        mean_ns: mean,
        stddev_ns: var.sqrt(),
        p50_ns: p[0],
        p95_ns: p[1],
        p99_ns: p[2],
        max_ns: *sorted.last().unwrap(),
    })
}

pub fn detect_stable_period(
    events: &[ConnectionEvent],
    target: u32,
    _run_start_ns: u64,
    run_end_ns: u64,
    plateau_window_s: f64,
) -> Result<StablePeriod, MetricsError> {
    let first = events.first().ok_or(MetricsError::NoEvents)?.ts_ns;
    let window_ns = (plateau_window_s.max(0.0) * 1e9) as u64;
    let mut up: HashMap<&str, bool> = HashMap::new();
    let mut count = 0u32;
    // (timestamp, count after the event) for every connect-type event.
    let mut connects: Vec<(u64, u32)> = Vec::new();
    for e in events {
        let was = up.insert(&e.client_id, e.kind.is_up()).unwrap_or(false);
        match (was, e.kind.is_up()) {
            (false, true) => count += 1,
            (true, false) => count -= 1,
            _ => {}
        }
        if e.kind.is_up() {
            if count >= target && e.ts_ns < run_end_ns {
                return Ok(StablePeriod {
                    start_ns: e.ts_ns,
                    end_ns: run_end_ns,
                    detection_mode: DetectionMode::AllConnected,
                    connected_at_start: count,
                    warning: None,
                });
            }
            connects.push((e.ts_ns, count));
        }
    }

    for (i, &(ts, c)) in connects.iter().enumerate() {
        if ts >= run_end_ns {
            break;
        }
        let quiet_until = connects.get(i + 1).map(|n| n.0).unwrap_or(run_end_ns);
        if quiet_until.saturating_sub(ts) >= window_ns && quiet_until > ts {
            return Ok(StablePeriod {
                start_ns: ts,
                end_ns: run_end_ns,
                detection_mode: DetectionMode::SaturationPlateau,
                connected_at_start: c,
                warning: None,
            });
        }
    }

    let start = run_end_ns.saturating_sub(window_ns).max(first).min(run_end_ns.saturating_sub(1));
    let connected = connects
        .iter()
        .take_while(|(ts, _)| *ts <= start)
        .last()
        .map(|c| c.1)
        .unwrap_or(0);
    Ok(StablePeriod {
        start_ns: start,
        end_ns: run_end_ns,
        detection_mode: DetectionMode::SaturationPlateau,
        connected_at_start: connected,
        warning: Some(format!(
            "connections never settled ({count}/{target} connected); using the final {plateau_window_s} s"
        )),
    })
}

pub fn compute_throughput(samples: &[LatencySample], period: &StablePeriod) -> f64 {
    let d = period.duration_s();
    if d <= 0.0 {
        return 0.0;
    }
    samples.iter().filter(|s| period.contains(s.recv_ts_ns)).count() as f64 / d
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub loss_fraction: f64,
    pub duplicate_count: u64,
    pub unique_received: u64,
    pub published: u64,
}

pub fn compute_loss(published: &HashMap<String, u64>, samples: &[LatencySample]) -> Result<LossReport, MetricsError> {
    let mut seen: HashSet<(&str, u64)> = HashSet::with_capacity(samples.len());
    for s in samples {
        if !published.contains_key(&s.topic) {
            return Err(MetricsError::UnknownTopic(s.topic.clone()));
        }
        seen.insert((&s.topic, s.seq));
    }
    let total: u64 = published.values().sum();
    let unique = seen.len() as u64;
    let loss_fraction = if total == 0 {
        0.0
    } else {
        (total.saturating_sub(unique)) as f64 / total as f64
    };
    Ok(LossReport {
        loss_fraction,
        duplicate_count: samples.len() as u64 - unique,
        unique_received: unique,
        published: total,
    })
}

/// Keeps the first copy of every `(topic, seq)`.
pub fn dedup_samples(samples: &[LatencySample]) -> Vec<&LatencySample> {
    let mut seen = HashSet::with_capacity(samples.len());
    samples.iter().filter(|s| seen.insert((s.topic.as_str(), s.seq))).collect()
}

/// Everything one completed run produced.
#[derive(Debug, Clone)]
pub struct RunData<'a> {
    pub spec: &'a ExperimentSpec,
    pub run_start_ns: u64,
    /// When load generation stopped.
    pub run_end_ns: u64,
    pub subscribers: &'a [SubscriberOutput],
    pub publishers: &'a [PublisherStats],
    pub events: &'a [ConnectionEvent],
    pub resources: &'a [ResourceSample],
    /// The broker or its container disappeared during the run.
    pub broker_lost: bool,
    pub publisher_stagger: String,
    pub broker: String,
}

pub fn summarize(run: &RunData) -> SummaryReport {
    let spec = run.spec;
    let mut warnings = Vec::new();

    let period = match detect_stable_period(
        run.events,
        spec.client_count(),
        run.run_start_ns,
        run.run_end_ns,
        spec.plateau_window_s,
    ) {
        Ok(p) => p,
        Err(e) => StablePeriod {
            start_ns: run.run_start_ns,
            end_ns: run.run_end_ns.max(run.run_start_ns + 1),
            detection_mode: DetectionMode::SaturationPlateau,
            connected_at_start: 0,
            warning: Some(format!("{e}; using the whole run")),
        },
    };
    warnings.extend(period.warning.clone());

    let mut published: HashMap<String, u64> = HashMap::new();
    for p in run.publishers {
        *published.entry(p.topic.clone()).or_default() += p.published_count;
    }
    let published_count: u64 = published.values().sum();

    let latency_from = period
        .start_ns
        .max(run.run_start_ns + (spec.warmup_s * 1e9) as u64);
    let mut received = 0u64;
    let mut duplicates = 0u64;
    let mut in_period = 0u64;
    let mut skew = 0u64;
    let mut unknown = 0u64;
    let mut latencies: Vec<u64> = Vec::new();

    for sub in run.subscribers {
        let known: Vec<LatencySample> = sub
            .samples
            .iter()
            .filter(|s| published.contains_key(&s.topic))
            .cloned()
            .collect();
        unknown += sub.samples.len() as u64 - known.len() as u64;
        let loss = compute_loss(&published, &known).expect("topics filtered");
        duplicates += loss.duplicate_count;
        received += loss.unique_received;
        let unique = dedup_samples(&known);
        for s in &unique {
            if period.contains(s.recv_ts_ns) {
                in_period += 1;
            }
            if s.is_skewed() {
                skew += 1;
            } else if s.recv_ts_ns >= latency_from && s.recv_ts_ns <= period.end_ns {
                latencies.push(s.latency_ns as u64);
            }
        }
    }

    let expected = expected_deliveries(spec, &published, run.subscribers.len());
    let loss_fraction = if expected == 0 {
        0.0
    } else {
        (expected.saturating_sub(received) as f64 / expected as f64).clamp(0.0, 1.0)
    };
    if unknown > 0 {
        warnings.push(format!("{unknown} samples on topics with no publisher"));
    }
    if skew > 0 {
        warnings.push(format!("{skew} samples with negative latency (clock skew)"));
    }
    let dropped: u64 = run.subscribers.iter().map(|s| s.dropped_samples).sum();
    if dropped > 0 {
        warnings.push(format!("{dropped} samples beyond the retention cap were not stored"));
    }

    let (latency, mut degenerate) = match latency_stats(&latencies) {
        Ok(s) => (s, false),
        Err(_) => {
            warnings.push("no latency samples in the measurement window".into());
            (LatencyStats::default(), true)
        }
    };
    if run.broker_lost {
        warnings.push("broker became unavailable during the run".into());
        degenerate = true;
    }

    let (cpu_cores, mem_mb) = resmon::series_stats(run.resources);
    let d = period.duration_s();
    SummaryReport {
        spec: spec.clone(),
        stable_start_ns: period.start_ns,
        stable_end_ns: period.end_ns,
        stable_mode: period.detection_mode,
        published_count,
        expected_deliveries: expected,
        received_count: received,
        duplicate_count: duplicates,
        throughput_msg_s: if d > 0.0 { in_period as f64 / d } else { 0.0 },
        latency,
        latency_sample_count: latencies.len() as u64,
        loss_fraction,
        cpu_cores,
        mem_mb,
        mem_usage_mb: resmon::usage_stats(run.resources),
        skew_count: skew,
        malformed_count: run.subscribers.iter().map(|s| s.malformed_count).sum(),
        publish_errors: run.publishers.iter().map(|p| p.publish_errors).sum(),
        degenerate,
        warnings,
        publisher_stagger: run.publisher_stagger.clone(),
        broker: run.broker.clone(),
    }
}

/// Deliveries a lossless broker makes: every subscriber receives every
/// message published on its topic.
pub fn expected_deliveries(spec: &ExperimentSpec, published: &HashMap<String, u64>, subscribers: usize) -> u64 {
    if spec.scenario.is_fanout() {
        published.values().sum::<u64>() * subscribers as u64
    } else {
        (0..subscribers as u32)
            .map(|i| published.get(&spec.topic_for(i)).copied().unwrap_or(0))
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ConnectionKind;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};

    const S: u64 = 1_000_000_000;

    fn oracle(samples: &[u64], q: u64) -> u64 {
        let mut v = samples.to_vec();
        v.sort();
        let n = v.len() as u64;
        let rank = ((q * n + 99) / 100).max(1);
        v[(rank - 1) as usize]
    }

    #[test]
    fn hand_ranks() {
        let v = [10, 20, 30, 40, 50, 60, 70, 80, 90, 100];
        assert_eq!(percentiles(&v, &[50.0, 95.0]).unwrap(), [50, 100]);
        assert_eq!(percentiles(&[7], &[0.0, 50.0, 99.0, 100.0]).unwrap(), [7, 7, 7, 7]);
        assert_eq!(percentiles(&[], &[50.0]), Err(MetricsError::EmptySampleSet));
        assert_eq!(nearest_rank(95.0, 20), 19);
        assert_eq!(nearest_rank(99.9, 1000), 999);
    }

    #[test]
    fn matches_sort_oracle() {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let v: Vec<u64> = (0..10_000).map(|_| rng.random_range(0..1_000_000)).collect();
        for q in [1, 25, 50, 90, 95, 99, 100] {
            assert_eq!(percentiles(&v, &[q as f64]).unwrap()[0], oracle(&v, q));
        }
    }

    #[test]
    fn stats_population_stddev() {
        let s = latency_stats(&[2, 4, 4, 4, 5, 5, 7, 9]).unwrap();
        assert_eq!(s.mean_ns, 5.0);
        assert_eq!(s.stddev_ns, 2.0);
        assert_eq!((s.min_ns, s.max_ns), (2, 9));
    }

    proptest! {
        #[test]
        fn permutation_invariant_and_ordered(mut v in proptest::collection::vec(0u64..1000, 1..300), seed in any::<u64>()) {
            let a = latency_stats(&v).unwrap();
            let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
            for i in (1..v.len()).rev() {
                v.swap(i, rng.random_range(0..=i));
            }
            let b = latency_stats(&v).unwrap();
            prop_assert_eq!(a, b);
            prop_assert!(a.min_ns <= a.p50_ns && a.p50_ns <= a.p95_ns && a.p95_ns <= a.p99_ns && a.p99_ns <= a.max_ns);
            let ends = percentiles(&v, &[100.0, 1e-9]).unwrap();
            prop_assert_eq!(ends, vec![a.max_ns, a.min_ns]);
        }
    }

    fn ev(id: &str, kind: ConnectionKind, ts_ns: u64) -> ConnectionEvent {
        ConnectionEvent { client_id: id.into(), kind, ts_ns }
    }

    #[test]
    fn all_connected_mode() {
        let events: Vec<_> = (0..100).map(|i| ev(&format!("c{i}"), ConnectionKind::Connect, (i + 1) * 120 * S / 1000)).collect();
        let p = detect_stable_period(&events, 100, 0, 132 * S, 10.0).unwrap();
        assert_eq!((p.start_ns, p.end_ns, p.detection_mode), (12 * S, 132 * S, DetectionMode::AllConnected));
        assert_eq!(p.connected_at_start, 100);
    }

    #[test]
    fn disconnects_lower_the_count() {
        let events = vec![
            ev("a", ConnectionKind::Connect, S),
            ev("a", ConnectionKind::Disconnect, 2 * S),
            ev("b", ConnectionKind::Connect, 3 * S),
            ev("a", ConnectionKind::Reconnect, 4 * S),
        ];
        let p = detect_stable_period(&events, 2, 0, 100 * S, 10.0).unwrap();
        assert_eq!(p.start_ns, 4 * S);
        assert_eq!(p.detection_mode, DetectionMode::AllConnected);
    }

    #[test]
    fn fallback_when_never_settled() {
        let events: Vec<_> = (0..60).map(|i| ev("c", ConnectionKind::Connect, i * S)).collect();
        let p = detect_stable_period(&events, 10, 0, 60 * S, 10.0).unwrap();
        assert_eq!((p.start_ns, p.end_ns), (50 * S, 60 * S));
        assert!(p.warning.is_some());
        assert_eq!(detect_stable_period(&[], 1, 0, S, 1.0), Err(MetricsError::NoEvents));
    }

    fn sample(topic: &str, seq: u64, recv: u64) -> LatencySample {
        LatencySample::new(topic, seq, recv.saturating_sub(1000), recv, 24)
    }

    #[test]
    fn throughput_over_period() {
        let period = StablePeriod {
            start_ns: 10 * S,
            end_ns: 190 * S,
            detection_mode: DetectionMode::AllConnected,
            connected_at_start: 20,
            warning: None,
        };
        let samples: Vec<_> = (0..18_000u64).map(|i| sample("t", i, 10 * S + i * 10_000_000)).collect();
        assert!((compute_throughput(&samples, &period) - 100.0).abs() < 1e-9);
        let early: Vec<_> = (0..100u64).map(|i| sample("t", i, i)).collect();
        assert_eq!(compute_throughput(&early, &period), 0.0);
    }

    #[test]
    fn loss_and_duplicates() {
        let published = HashMap::from([("t".to_string(), 18_000u64)]);
        let samples: Vec<_> = (0..16_830).map(|i| sample("t", i, 1)).collect();
        let r = compute_loss(&published, &samples).unwrap();
        assert!((r.loss_fraction - 0.065).abs() < 1e-12);
        let published = HashMap::from([("t".to_string(), 10u64)]);
        let mut samples: Vec<_> = (0..10).map(|i| sample("t", i, 1)).collect();
        samples.push(sample("t", 5, 2));
        let r = compute_loss(&published, &samples).unwrap();
        assert_eq!((r.loss_fraction, r.duplicate_count), (0.0, 1));
        assert_eq!(
            compute_loss(&published, &[sample("x", 0, 1)]),
            Err(MetricsError::UnknownTopic("x".into()))
        );
    }
}
