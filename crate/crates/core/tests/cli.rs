use std::io::{BufRead, BufReader};
use std::path::Path;
use std::process::{Command, Output, Stdio};

use mq_bench::cli::formats::{read_samples, read_summary};
use mq_bench::cli::render::{fmt_ms, fmt_pct};
use mq_bench::transport::broker::mini_broker_serve;

const BIN: &str = env!("CARGO_BIN_EXE_mq-bench");

fn mq_bench(args: &[&str]) -> Output {
    Command::new(BIN).args(args).env_remove("MQBENCH_OUT").output().unwrap()
}

fn stdout_value(out: &Output, key: &str) -> u64 {
    let text = String::from_utf8_lossy(&out.stdout);
    text.lines()
        .find_map(|l| l.strip_prefix(&format!("{key}=")))
        .unwrap_or_else(|| panic!("no {key}= in {text}"))
        .parse()
        .unwrap()
}

fn write_config(dir: &Path, body: &str) -> String {
    let p = dir.join("config.json");
    std::fs::write(&p, body).unwrap();
    p.to_string_lossy().into_owned()
}

#[test]
fn pub_counts_at_fixed_rate() {
    let out = mq_bench(&[
        "pub", "--transport", "loopback", "--endpoint", "loopback://cli", "--topic", "t", "--rate", "10",
        "--payload", "64", "--duration", "12",
    ]);
    assert!(out.status.success(), "{out:?}");
    let n = stdout_value(&out, "published");
    assert!((119..=121).contains(&n), "{n}");
}

#[test]
fn pub_rejects_bad_arguments() {
    let out = mq_bench(&[
        "pub", "--transport", "nats", "--endpoint", "tcp://127.0.0.1:1", "--topic", "t", "--duration", "1",
        "--qos", "1",
    ]);
    assert_eq!(out.status.code(), Some(1));
    let out = mq_bench(&["pub", "--transport", "loopback", "--endpoint", "loopback://x", "--topic", "t", "--duration", "1", "--payload", "8"]);
    assert_eq!(out.status.code(), Some(1));
    let out = mq_bench(&["pub", "--transport", "carrier-pigeon", "--endpoint", "x", "--topic", "t", "--duration", "1"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(mq_bench(&["--help"]).status.success());
}

#[tokio::test(flavor = "multi_thread")]
async fn pub_and_sub_compose_losslessly() {
    let broker = mini_broker_serve("127.0.0.1:0").await.unwrap();
    let ep = broker.endpoint();
    let dir = tempfile::tempdir().unwrap();
    let samples = dir.path().join("samples.csv");
    let mut sub = Command::new(BIN)
        .args(["sub", "--transport", "mqtt", "--endpoint", &ep, "--topic", "cli/t", "--qos", "1", "--duration", "6"])
        .arg("--out")
        .arg(&samples)
        .stdout(Stdio::piped())
        .spawn()
        .unwrap();
    let mut lines = BufReader::new(sub.stdout.take().unwrap()).lines();
    let ready = tokio::task::spawn_blocking(move || {
        let first = lines.next().unwrap().unwrap();
        (first, lines)
    })
    .await
    .unwrap();
    assert!(ready.0.starts_with("subscribed"), "{}", ready.0);

    let ep2 = ep.clone();
    let publ = tokio::task::spawn_blocking(move || {
        mq_bench(&[
            "pub", "--transport", "mqtt", "--endpoint", &ep2, "--topic", "cli/t", "--qos", "1", "--rate", "50",
            "--payload", "256", "--duration", "2",
        ])
    })
    .await
    .unwrap();
    assert!(publ.status.success(), "{publ:?}");
    let published = stdout_value(&publ, "published");
    let status = tokio::task::spawn_blocking(move || sub.wait().unwrap()).await.unwrap();
    assert!(status.success());
    let rest: Vec<String> = ready.1.map(|l| l.unwrap()).collect();
    assert!(rest.contains(&format!("received={published}")), "{rest:?}");

    let got = read_samples(&samples).unwrap();
    assert_eq!(got.len() as u64, published);
    let seqs: Vec<u64> = got.iter().map(|s| s.seq).collect();
    assert_eq!(seqs, (0..published).collect::<Vec<_>>());
    assert!(got.iter().all(|s| s.payload_bytes == 256));
    broker.shutdown().await;
}

#[test]
fn run_rejects_invalid_config() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"spec": {"scenario": "throughput_pairs", "transport_kind": "loopback", "endpoint": "loopback://v",
            "pairs": 0, "fanout_subscribers": 1, "rate_per_publisher": 10, "payload_bytes": 1024,
            "duration_s": 1, "warmup_s": 0, "qos": 0}}"#,
    );
    let out = mq_bench(&["run", "--config", &cfg, "--out", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("pairs ≥ 1"), "{err}");

    let garbage = write_config(dir.path(), "{not json");
    assert_eq!(mq_bench(&["run", "--config", &garbage]).status.code(), Some(1));
}

#[test]
fn run_then_report_matches_summary() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        r#"{"scenario": "throughput_pairs", "transport_kind": "loopback", "endpoint": "loopback://cli-run",
            "pairs": 2, "fanout_subscribers": 1, "rate_per_publisher": 20, "payload_bytes": 512,
            "duration_s": 3, "warmup_s": 0, "qos": 0, "plateau_window_s": 1, "drain_s": 0.5}"#,
    );
    let results = dir.path().join("results");
    let out = Command::new(BIN)
        .args(["run", "--config", &cfg])
        .env("MQBENCH_OUT", &results)
        .output()
        .unwrap();
    assert!(out.status.success(), "{out:?}");
    let summary_path = results.join("throughput_pairs/loopback/2/summary.json");
    let s = read_summary(&summary_path).unwrap();
    assert_eq!(s.published_count, 120);

    let table = mq_bench(&["report", "--in", &results.to_string_lossy(), "--format", "table"]);
    assert!(table.status.success());
    let text = String::from_utf8_lossy(&table.stdout);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 2, "{text}");
    for col in ["Throughput", "p50", "p95", "Loss", "CPU", "Mem"] {
        assert!(lines[0].contains(col), "{col}");
    }
    for cell in [
        format!("{:.1} msg/s", s.throughput_msg_s),
        fmt_ms(s.latency.p50_ns),
        fmt_ms(s.latency.p95_ns),
        fmt_pct(s.loss_fraction),
        format!("{:.2} cores", s.cpu_cores.mean),
        format!("{:.1} MB", s.mem_mb.mean),
    ] {
        assert!(lines[1].contains(&cell), "{cell} not in {}", lines[1]);
    }

    let json = mq_bench(&["report", "--in", &results.to_string_lossy(), "--format", "json"]);
    let back: mq_bench::model::SummaryReport = serde_json::from_slice(&json.stdout).unwrap();
    assert_eq!(back, s);
    let csv = mq_bench(&["report", "--in", &results.to_string_lossy(), "--format", "csv"]);
    assert_eq!(String::from_utf8_lossy(&csv.stdout).lines().count(), 2);

    let empty = tempfile::tempdir().unwrap();
    assert_eq!(mq_bench(&["report", "--in", &empty.path().to_string_lossy()]).status.code(), Some(2));
}

#[test]
fn degenerate_run_exits_3() {
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let cfg = write_config(
        dir.path(),
        &format!(
            r#"{{"spec": {{"scenario": "throughput_pairs", "transport_kind": "mqtt", "endpoint": "tcp://{dead}",
                "pairs": 1, "fanout_subscribers": 1, "rate_per_publisher": 10, "payload_bytes": 64,
                "duration_s": 0.5, "warmup_s": 0, "qos": 0}}, "broker": {{"kind": "external"}}}}"#
        ),
    );
    let out = mq_bench(&["run", "--config", &cfg, "--out", &dir.path().to_string_lossy()]);
    assert_eq!(out.status.code(), Some(3), "{out:?}");
    assert!(String::from_utf8_lossy(&out.stdout).contains("[DEGENERATE]"));
}

#[test]
fn shipped_broker_configs_are_valid() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let mut n = 0;
    for entry in std::fs::read_dir(&dir).unwrap() {
        let path = entry.unwrap().path();
        if path.extension().is_none_or(|e| e != "json") {
            continue;
        }
        let cfg: mq_bench::orchestrator::RunConfig =
            serde_json::from_str(&std::fs::read_to_string(&path).unwrap()).unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(mq_bench::spec::validate_spec(&cfg.spec).is_ok(), "{}", path.display());
        assert!(matches!(cfg.broker, mq_bench::orchestrator::BrokerConfig::Container(_)));
        n += 1;
    }
    assert_eq!(n, 8);
}
