use std::collections::HashSet;
use std::time::Duration;

use mq_bench::cli::formats::{read_connections, read_faults, read_samples, read_summary};
use mq_bench::orchestrator::{run_scenario, run_sweep, BrokerConfig, RunConfig, SweepAxis};
use mq_bench::spec::{ExperimentSpec, QosLevel, TransportKind};
use mq_bench::transport::broker::mini_broker_serve;

fn short(mut spec: ExperimentSpec, secs: f64) -> ExperimentSpec {
    spec.duration_s = secs;
    spec.warmup_s = 0.0;
    spec.drain_s = 0.5;
    spec.plateau_window_s = 1.0;
    spec
}

#[tokio::test]
async fn loopback_run_writes_complete_artifacts() {
    let out = tempfile::tempdir().unwrap();
    let mut spec = short(
        ExperimentSpec::throughput_pairs(TransportKind::Loopback, "loopback://orch-a", 3),
        3.0,
    );
    spec.payload_bytes = 256;
    // Runs are spawnable onto a multi-threaded runtime.
    let root = out.path().to_path_buf();
    let art = tokio::spawn(async move { run_scenario(&RunConfig::new(spec, BrokerConfig::External), &root, None).await })
        .await
        .unwrap()
        .unwrap();
    assert_eq!(art.dir, out.path().join("throughput_pairs/loopback/3"));
    for p in [&art.samples, &art.connections, &art.resources, &art.faults, &art.summary] {
        assert!(std::fs::metadata(p).unwrap().len() > 0, "{}", p.display());
    }
    let r = read_summary(&art.summary).unwrap();
    assert_eq!(r, art.report);
    assert_eq!(r.published_count, 90);
    assert_eq!(r.received_count, 90);
    assert_eq!(r.loss_fraction, 0.0);
    assert!(!r.degenerate, "{:?}", r.warnings);

    // Subscribers were up before the first publish.
    let samples = read_samples(&art.samples).unwrap();
    let firsts: HashSet<&str> = samples.iter().filter(|s| s.seq == 0).map(|s| s.topic.as_str()).collect();
    assert_eq!(firsts.len(), 3);
    let events = read_connections(&art.connections).unwrap();
    assert_eq!(events.iter().filter(|e| e.kind.as_str() == "connect").count(), 6);
    assert_eq!(events.len(), 12);
}

#[tokio::test]
async fn mini_broker_runs_are_isolated() {
    let out = tempfile::tempdir().unwrap();
    let spec = short(
        ExperimentSpec::qos_reliability(TransportKind::Mqtt, "tcp://127.0.0.1:1", QosLevel::AtLeastOnce),
        2.0,
    );
    let spec = ExperimentSpec {
        mttf_s: None,
        mttr_s: None,
        pairs: 2,
        ..spec
    };
    let cfg = RunConfig::new(spec, BrokerConfig::MiniBroker { listen: None });
    for _ in 0..2 {
        let art = run_scenario(&cfg, out.path(), None).await.unwrap();
        let r = &art.report;
        assert_eq!(r.published_count, 40);
        assert_eq!(r.received_count, 40);
        assert_eq!(r.duplicate_count, 0);
        assert_eq!(r.broker, "mini-broker");
    }
}

#[tokio::test]
async fn fault_run_keeps_qos1_lossless() {
    let out = tempfile::tempdir().unwrap();
    let mut spec = short(
        ExperimentSpec::qos_reliability(TransportKind::Mqtt, "tcp://127.0.0.1:1", QosLevel::AtLeastOnce),
        8.0,
    );
    spec.pairs = 3;
    spec.mttf_s = Some(1.5);
    spec.mttr_s = Some(0.7);
    spec.rng_seed = 3;
    spec.drain_s = 1.5;
    let art = run_scenario(&RunConfig::new(spec, BrokerConfig::MiniBroker { listen: None }), out.path(), None)
        .await
        .unwrap();
    let faults = read_faults(&art.faults).unwrap();
    assert!(!faults.is_empty());
    assert!(faults.iter().all(|f| f.status == "ok"), "{faults:?}");
    let r = &art.report;
    assert_eq!(r.loss_fraction, 0.0, "{r:?}");
    assert_eq!(r.received_count, r.expected_deliveries);
    let events = read_connections(&art.connections).unwrap();
    assert!(events.iter().any(|e| e.kind.as_str() == "reconnect"));
}

#[tokio::test]
async fn killed_broker_gives_degenerate_report() {
    let out = tempfile::tempdir().unwrap();
    let broker = mini_broker_serve("127.0.0.1:0").await.unwrap();
    let mut spec = short(ExperimentSpec::throughput_pairs(TransportKind::Mqtt, &broker.endpoint(), 2), 4.0);
    spec.plateau_window_s = 0.5;
    let cfg = RunConfig::new(spec, BrokerConfig::External);
    let killer = tokio::spawn(async move {
        tokio::time::sleep(Duration::from_millis(1000)).await;
        broker.shutdown().await;
    });
    let art = run_scenario(&cfg, out.path(), None).await.unwrap();
    killer.await.unwrap();
    assert!(art.report.degenerate, "{:?}", art.report);
    assert!(art.summary.exists());
}

#[tokio::test]
async fn sweep_records_every_value_or_stops_on_saturation() {
    let out = tempfile::tempdir().unwrap();
    let dead = {
        let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let spec = short(
        ExperimentSpec::throughput_pairs(TransportKind::Mqtt, &format!("tcp://{dead}"), 1),
        0.5,
    );
    let cfg = RunConfig::new(spec, BrokerConfig::External);
    let values: Vec<String> = ["1", "2", "3"].iter().map(|s| s.to_string()).collect();
    let all = run_sweep(&cfg, SweepAxis::Pairs, &values, out.path(), false).await;
    assert_eq!(all.runs.len(), 3);
    assert!(all.runs.iter().all(|r| r.outcome.as_ref().is_ok_and(|a| a.report.degenerate)));
    assert!(out.path().join("throughput_pairs/mqtt/2/summary.json").exists());

    let stopped = run_sweep(&cfg, SweepAxis::Pairs, &values, out.path(), true).await;
    assert_eq!(stopped.runs.len(), 1);
    assert_eq!(stopped.stopped_at.as_deref(), Some("1"));
    assert!(out.path().join("throughput_pairs/mqtt/sweep-pairs.json").exists());

    let mut bad = cfg.clone();
    bad.spec.pairs = 0;
    let invalid = run_scenario(&bad, out.path(), None).await.unwrap_err().to_string();
    assert!(invalid.contains("pairs"), "{invalid}");
}
