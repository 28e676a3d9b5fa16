use std::fmt::Write;

use anyhow::Result;
use clap::ValueEnum;
use serde::Serialize;

use super::formats::canonical_json;
use crate::model::SummaryReport;
use crate::orchestrator::axis_value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum ReportFormat {
    Json,
    Csv,
    Table,
}

pub fn fmt_ms(ns: u64) -> String {
    format!("{:.2} ms", ns as f64 / 1e6)
}

pub fn fmt_pct(fraction: f64) -> String {
    format!("{:.2} %", fraction * 100.0)
}

pub fn render_report(summary: &SummaryReport, format: ReportFormat) -> Result<String> {
    render_reports(std::slice::from_ref(summary), format)
}

/// One object (or an array for several), one CSV row each, or one table row each.
pub fn render_reports(reports: &[SummaryReport], format: ReportFormat) -> Result<String> {
    match format {
        ReportFormat::Json if reports.len() == 1 => Ok(canonical_json(&reports[0])? + "\n"),
        ReportFormat::Json => Ok(canonical_json(&reports)? + "\n"),
        ReportFormat::Csv => csv_rows(reports),
        ReportFormat::Table => Ok(table(reports)),
    }
}

#[derive(Serialize)]
struct CsvRow<'a> {
    broker: &'a str,
    scenario: &'a str,
    transport: &'a str,
    axis_value: String,
    pairs: u32,
    fanout_subscribers: u32,
    payload_bytes: usize,
    qos: u8,
    published_count: u64,
    expected_deliveries: u64,
    received_count: u64,
    duplicate_count: u64,
    throughput_msg_s: f64,
    p50_ns: u64,
    p95_ns: u64,
    p99_ns: u64,
    mean_ns: f64,
    max_ns: u64,
    loss_fraction: f64,
    cpu_mean_cores: f64,
    cpu_max_cores: f64,
    mem_mean_mb: f64,
    mem_max_mb: f64,
    degenerate: bool,
}

fn csv_rows(reports: &[SummaryReport]) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            broker: &r.broker,
            scenario: r.spec.scenario.as_str(),
            transport: r.spec.transport_kind.as_str(),
            axis_value: axis_value(&r.spec),
            pairs: r.spec.pairs,
            fanout_subscribers: r.spec.fanout_subscribers,
            payload_bytes: r.spec.payload_bytes,
            qos: r.spec.qos.into(),
            published_count: r.published_count,
            expected_deliveries: r.expected_deliveries,
            received_count: r.received_count,
            duplicate_count: r.duplicate_count,
            throughput_msg_s: r.throughput_msg_s,
            p50_ns: r.latency.p50_ns,
            p95_ns: r.latency.p95_ns,
            p99_ns: r.latency.p99_ns,
            mean_ns: r.latency.mean_ns,
            max_ns: r.latency.max_ns,
            loss_fraction: r.loss_fraction,
            cpu_mean_cores: r.cpu_cores.mean,
            cpu_max_cores: r.cpu_cores.max,
            mem_mean_mb: r.mem_mb.mean,
            mem_max_mb: r.mem_mb.max,
            degenerate: r.degenerate,
        })?;
    }
    if reports.is_empty() {
        return Ok(String::new());
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

pub const TABLE_COLUMNS: [&str; 10] = [
    "Broker", "Scenario", "Axis", "Throughput", "p50", "p95", "p99", "Loss", "CPU", "Mem",
];

fn table_cells(r: &SummaryReport) -> [String; 10] {
    [
        r.broker.clone(),
        r.spec.scenario.as_str().to_string(),
        axis_value(&r.spec),
        format!("{:.1} msg/s", r.throughput_msg_s),
        fmt_ms(r.latency.p50_ns),
        fmt_ms(r.latency.p95_ns),
        fmt_ms(r.latency.p99_ns),
        fmt_pct(r.loss_fraction),
        format!("{:.2} cores", r.cpu_cores.mean),
        format!("{:.1} MB", r.mem_mb.mean),
    ]
}

fn table(reports: &[SummaryReport]) -> String {
    let rows: Vec<[String; 10]> = reports.iter().map(table_cells).collect();
    let mut width = TABLE_COLUMNS.map(str::len);
    for row in &rows {
        for (w, cell) in width.iter_mut().zip(row) {
            *w = (*w).max(cell.chars().count());
        }
    }
    let mut out = String::new();
    let line = |out: &mut String, cells: &[&str], suffix: &str| {
        let mut s = String::new();
        for (i, (c, w)) in cells.iter().zip(width).enumerate() {
            if i > 0 {
                s.push_str("  ");
            }
            // Text left, numbers right.
            if i < 3 {
                let _ = write!(s, "{c:<w$}");
            } else {
                let _ = write!(s, "{c:>w$}");
            }
        }
        s.push_str(suffix);
        out.push_str(s.trim_end());
        out.push('\n');
    };
    line(&mut out, &TABLE_COLUMNS, "");
    for (row, r) in rows.iter().zip(reports) {
        let cells: Vec<&str> = row.iter().map(String::as_str).collect();
        line(&mut out, &cells, if r.degenerate { "  [DEGENERATE]" } else { "" });
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::metrics::DetectionMode;
    use crate::model::{LatencyStats, MeanMax};
    use crate::spec::{ExperimentSpec, TransportKind};

    fn sample_report() -> SummaryReport {
        SummaryReport {
            spec: ExperimentSpec::latency_payload(TransportKind::Nats, "tcp://127.0.0.1:4222", 1024),
            stable_start_ns: 1_000,
            stable_end_ns: 121_000_001_000,
            stable_mode: DetectionMode::AllConnected,
            published_count: 12_000,
            expected_deliveries: 12_000,
            received_count: 11_220,
            duplicate_count: 0,
            throughput_msg_s: 93.5,
            latency: LatencyStats {
                min_ns: 90_000,
                mean_ns: 250_000.5,
                stddev_ns: 10.0,
                p50_ns: 210_000,
                p95_ns: 1_234_567,
                p99_ns: 2_000_000,
                max_ns: 9_000_000,
            },
            latency_sample_count: 11_220,
            loss_fraction: 0.065,
            cpu_cores: MeanMax { mean: 3.4, max: 4.0 },
            mem_mb: MeanMax { mean: 48.25, max: 50.0 },
            mem_usage_mb: MeanMax::default(),
            skew_count: 0,
            malformed_count: 0,
            publish_errors: 0,
            degenerate: false,
            warnings: vec![],
            publisher_stagger: "even".into(),
            broker: "nats".into(),
        }
    }

    #[test]
    fn units() {
        assert_eq!(fmt_ms(210_000), "0.21 ms");
        assert_eq!(fmt_pct(0.065), "6.50 %");
        assert_eq!(fmt_pct(0.0), "0.00 %");
    }

    #[test]
    fn table_has_units_and_flag() {
        let mut r = sample_report();
        let t = render_report(&r, ReportFormat::Table).unwrap();
        let lines: Vec<&str> = t.lines().collect();
        for col in ["Throughput", "p50", "p95", "Loss", "CPU", "Mem"] {
            assert!(lines[0].contains(col));
        }
        assert!(lines[1].contains("0.21 ms") && lines[1].contains("6.50 %") && lines[1].contains("93.5 msg/s"));
        assert!(lines[1].contains("3.40 cores") && lines[1].contains("48.2 MB"));
        assert!(!lines[1].contains("[DEGENERATE]"));
        r.degenerate = true;
        let t = render_report(&r, ReportFormat::Table).unwrap();
        assert!(t.lines().nth(1).unwrap().ends_with("[DEGENERATE]"));
    }

    #[test]
    fn json_roundtrips_with_sorted_keys() {
        let r = sample_report();
        let text = render_report(&r, ReportFormat::Json).unwrap();
        let back: SummaryReport = serde_json::from_str(&text).unwrap();
        assert_eq!(back, r);
        let v: serde_json::Value = serde_json::from_str(&text).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
        let top: Vec<&str> = text.lines().filter(|l| l.starts_with("  \"")).map(|l| l.trim()).collect();
        assert!(top[0].starts_with("\"broker\""));
    }

    #[test]
    fn csv_one_row_per_summary() {
        let r = sample_report();
        let text = render_reports(&[r.clone(), r], ReportFormat::Csv).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines.len(), 3);
        assert!(lines[0].starts_with("broker,scenario,transport,axis_value"));
        assert!(lines[1].contains(",0.065,"));
    }

    #[test]
    fn schema_accepts_reports_and_flags_breakage() {
        use crate::cli::formats::summary_schema_violations;
        let mut v = serde_json::to_value(sample_report()).unwrap();
        assert_eq!(summary_schema_violations(&v), Vec::<String>::new());
        v["loss_fraction"] = serde_json::json!(1.5);
        v["latency"]["p50_ns"] = serde_json::json!(-1);
        v.as_object_mut().unwrap().remove("broker");
        let errs = summary_schema_violations(&v);
        assert_eq!(errs.len(), 3, "{errs:?}");
    }
}
