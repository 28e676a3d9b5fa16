use tokio::sync::mpsc;
use tokio_util::sync::CancellationToken;

use crate::header::decode_header;
use crate::model::LatencySample;
use crate::spec::ExperimentSpec;
use crate::transport::{Delivery, MessageSink, Session, TransportError};

#[derive(Debug, Clone, Default)]
pub struct SubscriberOutput {
    pub samples: Vec<LatencySample>,
    /// Deliveries with a valid header, including any not retained.
    pub received_count: u64,
    pub malformed_count: u64,
    /// Valid deliveries beyond the retention cap.
    pub dropped_samples: u64,
}

/// Per-subscriber sample buffer fed by one or more session sinks.
///
/// Several sinks may feed one collector, which lets a subscriber keep its
/// buffer across a reconnect that needs a fresh session.
pub struct SampleCollector {
    tx: mpsc::UnboundedSender<Delivery>,
    rx: mpsc::UnboundedReceiver<Delivery>,
    max_samples: usize,
}

impl Default for SampleCollector {
    fn default() -> Self {
        Self::new(0)
    }
}

impl SampleCollector {
    /// `max_samples = 0` keeps every sample.
    pub fn new(max_samples: usize) -> Self {
        let (tx, rx) = mpsc::unbounded_channel();
        Self { tx, rx, max_samples }
    }

    pub fn sink(&self) -> MessageSink {
        let tx = self.tx.clone();
        Box::new(move |d| {
            let _ = tx.send(d);
        })
    }

    /// A cloneable handle that can mint further sinks after `run` takes `self`.
    pub fn sink_factory(&self) -> SinkFactory {
        SinkFactory(self.tx.clone())
    }

    pub async fn run(mut self, stop: CancellationToken) -> SubscriberOutput {
        drop(self.tx);
        let mut out = SubscriberOutput::default();
        loop {
            let next = tokio::select! {
                biased;
                d = self.rx.recv() => d,
                _ = stop.cancelled() => break,
            };
            match next {
                Some(d) => record(&mut out, d, self.max_samples),
                None => return out,
            }
        }
        while let Ok(d) = self.rx.try_recv() {
            record(&mut out, d, self.max_samples);
        }
        out
    }
}

#[derive(Clone)]
pub struct SinkFactory(mpsc::UnboundedSender<Delivery>);

impl SinkFactory {
    pub fn sink(&self) -> MessageSink {
        let tx = self.0.clone();
        Box::new(move |d| {
            let _ = tx.send(d);
        })
    }
}

fn record(out: &mut SubscriberOutput, d: Delivery, max_samples: usize) {
    match decode_header(&d.payload) {
        Ok(h) => {
            out.received_count += 1;
            if max_samples == 0 || out.samples.len() < max_samples {
                out.samples.push(LatencySample::new(d.topic, h.seq, h.send_ts_ns, d.recv_ts_ns, d.payload.len()));
            } else {
                out.dropped_samples += 1;
            }
        }
        Err(_) => out.malformed_count += 1,
    }
}

/// Subscribes `session` to `topic` and records samples until `stop`.
pub async fn run_subscriber(
    spec: &ExperimentSpec,
    session: &mut dyn Session,
    topic: &str,
    stop: CancellationToken,
) -> Result<SubscriberOutput, TransportError> {
    let collector = SampleCollector::new(spec.max_samples_per_subscriber);
    session.subscribe(topic, spec.qos, collector.sink()).await?;
    Ok(collector.run(stop).await)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::load::{run_publisher_with, PublisherConfig};
    use crate::spec::{QosLevel, TransportKind};
    use crate::transport::{connect, TransportOptions};
    use bytes::Bytes;
    use std::time::Duration;

    fn spec() -> ExperimentSpec {
        ExperimentSpec::latency_payload(TransportKind::Loopback, "loopback://x", 128)
    }

    #[tokio::test(start_paused = true)]
    async fn pairs_with_publisher_losslessly() {
        let ep = "loopback://sub-pair";
        let mut sub = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
        let mut publ = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
        let stop = CancellationToken::new();
        let collector = SampleCollector::new(0);
        sub.subscribe("p/0", QosLevel::AtMostOnce, collector.sink()).await.unwrap();
        let task = tokio::spawn(collector.run(stop.clone()));
        let cfg = PublisherConfig {
            run_for: Some(Duration::from_secs(120)),
            payload_bytes: 128,
            ..PublisherConfig::from_spec(&spec())
        };
        let stats = run_publisher_with(&cfg, publ.as_mut(), "p/0", CancellationToken::new())
            .await
            .unwrap();
        tokio::time::sleep(Duration::from_millis(10)).await;
        stop.cancel();
        let out = task.await.unwrap();
        assert_eq!(stats.published_count, 1200);
        assert_eq!(out.received_count, 1200);
        assert!(out.samples.iter().all(|s| s.latency_ns >= 0 && s.payload_bytes == 128));
        let seqs: Vec<u64> = out.samples.iter().map(|s| s.seq).collect();
        assert_eq!(seqs, (0..1200).collect::<Vec<_>>());
    }

    #[tokio::test]
    async fn foreign_message_counted_as_malformed() {
        let ep = "loopback://sub-foreign";
        let mut sub = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
        let mut publ = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
        let stop = CancellationToken::new();
        let task = {
            let spec = spec();
            let stop = stop.clone();
            tokio::spawn(async move { run_subscriber(&spec, sub.as_mut(), "t", stop).await })
        };
        tokio::time::sleep(Duration::from_millis(20)).await;
        publ.publish("t", Bytes::from_static(&[1u8; 10]), QosLevel::AtMostOnce).await.unwrap();
        tokio::time::sleep(Duration::from_millis(20)).await;
        stop.cancel();
        let out = task.await.unwrap().unwrap();
        assert_eq!(out.malformed_count, 1);
        assert!(out.samples.is_empty());
    }

    #[tokio::test(start_paused = true)]
    async fn fanout_each_subscriber_sees_all() {
        let ep = "loopback://sub-fanout";
        let stop = CancellationToken::new();
        let mut tasks = Vec::new();
        let mut sessions = Vec::new();
        for _ in 0..5 {
            let mut s = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
            let c = SampleCollector::new(0);
            s.subscribe("f", QosLevel::AtMostOnce, c.sink()).await.unwrap();
            tasks.push(tokio::spawn(c.run(stop.clone())));
            sessions.push(s);
        }
        let mut publ = connect(TransportKind::Loopback, ep, TransportOptions::default()).await.unwrap();
        let cfg = PublisherConfig {
            rate: 100.0,
            run_for: Some(Duration::from_secs(6)),
            ..PublisherConfig::from_spec(&spec())
        };
        let stats = run_publisher_with(&cfg, publ.as_mut(), "f", CancellationToken::new())
            .await
            .unwrap();
        assert_eq!(stats.published_count, 600);
        tokio::time::sleep(Duration::from_millis(10)).await;
        stop.cancel();
        let mut total = 0;
        for t in tasks {
            let out = t.await.unwrap();
            assert_eq!(out.samples.len(), 600);
            total += out.samples.len();
        }
        assert_eq!(total, 3000);
    }

    #[tokio::test]
    async fn retention_cap() {
        let c = SampleCollector::new(2);
        let mut sink = c.sink();
        for seq in 0..5 {
            let h = crate::header::MessageHeader::new(seq, 1);
            sink(Delivery {
                topic: "t".into(),
                payload: crate::header::build_payload(&h, 24).unwrap(),
                recv_ts_ns: 2,
            });
        }
        drop(sink);
        let out = c.run(CancellationToken::new()).await;
        assert_eq!(out.received_count, 5);
        assert_eq!(out.samples.len(), 2);
        assert_eq!(out.dropped_samples, 3);
    }
}
