//! On-disk artifact formats. CSV columns may only ever be appended.

use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::Path;

use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::chaos::ExecutedFault;
use crate::model::{ConnectionEvent, ConnectionKind, LatencySample, SummaryReport};
use crate::resmon::ResourceSample;

pub const SAMPLES_HEADER: &str = "topic,seq,send_ts_ns,recv_ts_ns,latency_ns,payload_bytes";
pub const CONNECTIONS_HEADER: &str = "client_id,kind,ts_ns";
pub const RESOURCES_HEADER: &str = "ts_ns,cpu_total_ns,mem_rss_bytes,gap";
pub const FAULTS_HEADER: &str =
    "event_index,scheduled_fail_s,scheduled_recover_s,actual_fail_ns,actual_recover_ns,status";

#[derive(Debug, Serialize, Deserialize)]
struct ConnectionRow {
    client_id: String,
    kind: String,
    ts_ns: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct ResourceRow {
    ts_ns: u64,
    cpu_total_ns: u64,
    mem_rss_bytes: u64,
    gap: u8,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FaultRow {
    pub event_index: usize,
    pub scheduled_fail_s: f64,
    pub scheduled_recover_s: f64,
    pub actual_fail_ns: u64,
    pub actual_recover_ns: u64,
    pub status: String,
}

impl From<&ExecutedFault> for FaultRow {
    fn from(f: &ExecutedFault) -> Self {
        Self {
            event_index: f.event_index,
            scheduled_fail_s: f.scheduled_fail_s,
            scheduled_recover_s: f.scheduled_recover_s,
            actual_fail_ns: f.actual_fail_ns,
            actual_recover_ns: f.actual_recover_ns,
            status: f.status.as_str().to_string(),
        }
    }
}

fn writer(path: &Path, header: &str) -> Result<csv::Writer<BufWriter<File>>> {
    let f = File::create(path).with_context(|| format!("creating {}", path.display()))?;
    let mut w = BufWriter::new(f);
    writeln!(w, "{header}")?;
    Ok(csv::WriterBuilder::new().has_headers(false).from_writer(w))
}

fn reader(path: &Path, header: &str) -> Result<csv::Reader<BufReader<File>>> {
    let f = File::open(path).with_context(|| format!("opening {}", path.display()))?;
    let mut r = csv::Reader::from_reader(BufReader::new(f));
    let got = r.headers()?.iter().collect::<Vec<_>>().join(",");
    // Newer writers may append columns.
    anyhow::ensure!(
        got.starts_with(header),
        "{}: unexpected header {got:?}",
        path.display()
    );
    Ok(r)
}

pub fn write_samples<'a>(path: &Path, samples: impl IntoIterator<Item = &'a LatencySample>) -> Result<()> {
    let mut w = writer(path, SAMPLES_HEADER)?;
    for s in samples {
        w.serialize(s)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: &Path) -> Result<Vec<LatencySample>> {
    let mut r = reader(path, SAMPLES_HEADER)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

pub fn write_connections(path: &Path, events: &[ConnectionEvent]) -> Result<()> {
    let mut w = writer(path, CONNECTIONS_HEADER)?;
    for e in events {
        w.serialize(ConnectionRow {
            client_id: e.client_id.clone(),
            kind: e.kind.as_str().to_string(),
            ts_ns: e.ts_ns,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_connections(path: &Path) -> Result<Vec<ConnectionEvent>> {
    let mut r = reader(path, CONNECTIONS_HEADER)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ConnectionRow = row?;
        let kind = ConnectionKind::parse(&row.kind).with_context(|| format!("unknown event kind {:?}", row.kind))?;
        out.push(ConnectionEvent {
            client_id: row.client_id,
            kind,
            ts_ns: row.ts_ns,
        });
    }
    Ok(out)
}

pub fn write_resources(path: &Path, series: &[ResourceSample]) -> Result<()> {
    let mut w = writer(path, RESOURCES_HEADER)?;
    for s in series {
        w.serialize(ResourceRow {
            ts_ns: s.ts_ns,
            cpu_total_ns: s.cpu_total_ns,
            mem_rss_bytes: s.mem_rss_bytes,
            gap: s.gap as u8,
        })?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_resources(path: &Path) -> Result<Vec<ResourceSample>> {
    let mut r = reader(path, RESOURCES_HEADER)?;
    let mut out = Vec::new();
    for row in r.deserialize() {
        let row: ResourceRow = row?;
        out.push(ResourceSample {
            ts_ns: row.ts_ns,
            cpu_total_ns: row.cpu_total_ns,
            mem_rss_bytes: row.mem_rss_bytes,
            mem_usage_bytes: 0,
            gap: row.gap != 0,
        });
    }
    Ok(out)
}

pub fn write_faults(path: &Path, log: &[ExecutedFault]) -> Result<()> {
    let mut w = writer(path, FAULTS_HEADER)?;
    for f in log {
        w.serialize(FaultRow::from(f))?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_faults(path: &Path) -> Result<Vec<FaultRow>> {
    let mut r = reader(path, FAULTS_HEADER)?;
    r.deserialize().map(|row| row.map_err(Into::into)).collect()
}

fn sort_keys(v: Value) -> Value {
    match v {
        Value::Object(m) => {
            let mut entries: Vec<(String, Value)> = m.into_iter().collect();
            entries.sort_by(|a, b| a.0.cmp(&b.0));
            Value::Object(entries.into_iter().map(|(k, v)| (k, sort_keys(v))).collect::<Map<_, _>>())
        }
        Value::Array(a) => Value::Array(a.into_iter().map(sort_keys).collect()),
        other => other,
    }
}

/// Pretty JSON with object keys in lexical order.
pub fn canonical_json<T: Serialize>(value: &T) -> Result<String> {
    let v = sort_keys(serde_json::to_value(value)?);
    Ok(serde_json::to_string_pretty(&v)?)
}

pub fn write_summary(path: &Path, summary: &SummaryReport) -> Result<()> {
    let mut text = canonical_json(summary)?;
    text.push('\n');
    std::fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

pub fn read_summary(path: &Path) -> Result<SummaryReport> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
}

#[derive(Clone, Copy)]
enum Kind {
    Uint,
    Num,
    Fraction,
    Bool,
    Str,
    Strings,
    Object,
    MeanMax,
}

const SUMMARY_FIELDS: &[(&str, Kind)] = &[
    ("spec", Kind::Object),
    ("stable_start_ns", Kind::Uint),
    ("stable_end_ns", Kind::Uint),
    ("stable_mode", Kind::Str),
    ("published_count", Kind::Uint),
    ("expected_deliveries", Kind::Uint),
    ("received_count", Kind::Uint),
    ("duplicate_count", Kind::Uint),
    ("throughput_msg_s", Kind::Num),
    ("latency", Kind::Object),
    ("latency_sample_count", Kind::Uint),
    ("loss_fraction", Kind::Fraction),
    ("cpu_cores", Kind::MeanMax),
    ("mem_mb", Kind::MeanMax),
    ("mem_usage_mb", Kind::MeanMax),
    ("skew_count", Kind::Uint),
    ("malformed_count", Kind::Uint),
    ("publish_errors", Kind::Uint),
    ("degenerate", Kind::Bool),
    ("warnings", Kind::Strings),
    ("publisher_stagger", Kind::Str),
    ("broker", Kind::Str),
];

const LATENCY_FIELDS: &[(&str, Kind)] = &[
    ("min_ns", Kind::Uint),
    ("mean_ns", Kind::Num),
    ("stddev_ns", Kind::Num),
    ("p50_ns", Kind::Uint),
    ("p95_ns", Kind::Uint),
    ("p99_ns", Kind::Uint),
    ("max_ns", Kind::Uint),
];

fn check_fields(obj: &Map<String, Value>, fields: &[(&str, Kind)], prefix: &str, out: &mut Vec<String>) {
    for &(name, kind) in fields {
        let path = format!("{prefix}{name}");
        let Some(v) = obj.get(name) else {
            out.push(format!("{path}: missing"));
            continue;
        };
        let ok = match kind {
            Kind::Uint => v.is_u64(),
            Kind::Num => v.as_f64().is_some_and(f64::is_finite),
            Kind::Fraction => v.as_f64().is_some_and(|f| (0.0..=1.0).contains(&f)),
            Kind::Bool => v.is_boolean(),
            Kind::Str => v.is_string(),
            Kind::Strings => v.as_array().is_some_and(|a| a.iter().all(Value::is_string)),
            Kind::Object => v.is_object(),
            Kind::MeanMax => {
                v.as_object().is_some_and(|m| ["mean", "max"].iter().all(|k| m.get(*k).is_some_and(Value::is_number)))
            }
        };
        if !ok {
            out.push(format!("{path}: unexpected value {v}"));
        }
    }
}

/// Checks a parsed summary.json: every field present with its JSON type,
/// timestamps and counts as unsigned integers, fractions in [0, 1].
pub fn summary_schema_violations(v: &Value) -> Vec<String> {
    let mut out = Vec::new();
    let Some(obj) = v.as_object() else {
        return vec!["summary is not an object".into()];
    };
    check_fields(obj, SUMMARY_FIELDS, "", &mut out);
    if let Some(lat) = obj.get("latency").and_then(Value::as_object) {
        check_fields(lat, LATENCY_FIELDS, "latency.", &mut out);
    }
    if let Some(spec) = obj.get("spec") {
        if let Err(e) = serde_json::from_value::<crate::spec::ExperimentSpec>(spec.clone()) {
            out.push(format!("spec: {e}"));
        }
    }
    if obj.get("stable_start_ns").and_then(Value::as_u64) > obj.get("stable_end_ns").and_then(Value::as_u64) {
        out.push("stable_start_ns after stable_end_ns".into());
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::chaos::FaultStatus;
    use tempfile::tempdir;

    fn first_line(path: &Path) -> String {
        std::fs::read_to_string(path).unwrap().lines().next().unwrap().to_string()
    }

    #[test]
    fn headers_are_fixed() {
        let dir = tempdir().unwrap();
        let p = |n: &str| dir.path().join(n);
        write_samples(&p("s.csv"), &[]).unwrap();
        write_connections(&p("c.csv"), &[]).unwrap();
        write_resources(&p("r.csv"), &[]).unwrap();
        write_faults(&p("f.csv"), &[]).unwrap();
        assert_eq!(first_line(&p("s.csv")), "topic,seq,send_ts_ns,recv_ts_ns,latency_ns,payload_bytes");
        assert_eq!(first_line(&p("c.csv")), "client_id,kind,ts_ns");
        assert_eq!(first_line(&p("r.csv")), "ts_ns,cpu_total_ns,mem_rss_bytes,gap");
        assert_eq!(
            first_line(&p("f.csv")),
            "event_index,scheduled_fail_s,scheduled_recover_s,actual_fail_ns,actual_recover_ns,status"
        );
    }

    #[test]
    fn rows_roundtrip() {
        let dir = tempdir().unwrap();
        let samples = vec![
            LatencySample::new("bench/0", 0, 100, 350, 1024),
            LatencySample::new("a,b", 1, 500, 400, 24),
        ];
        let path = dir.path().join("s.csv");
        write_samples(&path, &samples).unwrap();
        assert_eq!(read_samples(&path).unwrap(), samples);
        let text = std::fs::read_to_string(&path).unwrap();
        assert_eq!(text.lines().nth(1).unwrap(), "bench/0,0,100,350,250,1024");

        let events = vec![ConnectionEvent {
            client_id: "sub-0".into(),
            kind: ConnectionKind::Reconnect,
            ts_ns: 7,
        }];
        write_connections(&dir.path().join("c.csv"), &events).unwrap();
        assert_eq!(read_connections(&dir.path().join("c.csv")).unwrap(), events);

        let res = vec![
            ResourceSample {
                ts_ns: 1,
                cpu_total_ns: 2,
                mem_rss_bytes: 3,
                mem_usage_bytes: 0,
                gap: false,
            },
            ResourceSample::gap_at(9),
        ];
        write_resources(&dir.path().join("r.csv"), &res).unwrap();
        assert_eq!(read_resources(&dir.path().join("r.csv")).unwrap(), res);
        let text = std::fs::read_to_string(dir.path().join("r.csv")).unwrap();
        assert_eq!(text.lines().nth(2).unwrap(), "9,0,0,1");

        let fault = ExecutedFault {
            event_index: 0,
            scheduled_fail_s: 12.5,
            scheduled_recover_s: 17.5,
            actual_fail_ns: 10,
            actual_recover_ns: 20,
            fail_offset_s: 12.5,
            recover_offset_s: 17.5,
            status: FaultStatus::ApplyFailed,
            error: Some("x".into()),
            reconnect: None,
        };
        write_faults(&dir.path().join("f.csv"), &[fault]).unwrap();
        let rows = read_faults(&dir.path().join("f.csv")).unwrap();
        assert_eq!(rows[0].status, "apply_failed");
        assert_eq!(rows[0].scheduled_recover_s, 17.5);
    }

    #[test]
    fn canonical_json_sorts_nested_keys() {
        let v = serde_json::json!({"b": 1, "a": {"z": 0, "c": [ {"y": 1, "x": 2} ]}});
        assert_eq!(
            canonical_json(&v).unwrap().split_whitespace().collect::<String>(),
            r#"{"a":{"c":[{"x":2,"y":1}],"z":0},"b":1}"#
        );
    }
}
