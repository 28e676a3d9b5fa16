use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::run::{run_scenario, run_dir, RunArtifacts, RunConfig};
use crate::cli::formats::canonical_json;
use crate::spec::{ExperimentSpec, QosLevel};

/// Fraction of the target rate below which a sweep point counts as saturated.
pub const SATURATION_THRESHOLD: f64 = 0.95;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweepAxis {
    Pairs,
    PayloadBytes,
    FanoutSubscribers,
    Qos,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "pairs" => Ok(SweepAxis::Pairs),
            "payload_bytes" | "payload" => Ok(SweepAxis::PayloadBytes),
            "fanout_subscribers" | "fanout" => Ok(SweepAxis::FanoutSubscribers),
            "qos" => Ok(SweepAxis::Qos),
            other => Err(format!(
                "unknown axis `{other}` (expected pairs, payload_bytes, fanout_subscribers or qos)"
            )),
        }
    }
}

impl fmt::Display for SweepAxis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            SweepAxis::Pairs => "pairs",
            SweepAxis::PayloadBytes => "payload_bytes",
            SweepAxis::FanoutSubscribers => "fanout_subscribers",
            SweepAxis::Qos => "qos",
        })
    }
}

impl SweepAxis {
    pub fn apply(self, spec: &mut ExperimentSpec, value: &str) -> Result<(), String> {
        let bad = || format!("bad {self} value `{value}`");
        match self {
            SweepAxis::Pairs => spec.pairs = value.parse().map_err(|_| bad())?,
            SweepAxis::PayloadBytes => spec.payload_bytes = value.parse().map_err(|_| bad())?,
            SweepAxis::FanoutSubscribers => spec.fanout_subscribers = value.parse().map_err(|_| bad())?,
            SweepAxis::Qos => {
                let q: u8 = value.parse().map_err(|_| bad())?;
                spec.qos = QosLevel::try_from(q)?;
            }
        }
        Ok(())
    }
}

#[derive(Debug)]
pub struct SweepRun {
    pub value: String,
    pub outcome: Result<RunArtifacts, String>,
}

#[derive(Debug, Default)]
pub struct SweepReport {
    pub runs: Vec<SweepRun>,
    /// The value at which the sweep stopped on saturation.
    pub stopped_at: Option<String>,
}

#[derive(Serialize)]
struct SweepIndex<'a> {
    axis: String,
    values: &'a [String],
    completed: Vec<IndexEntry>,
    stopped_at: Option<String>,
}

#[derive(Serialize)]
struct IndexEntry {
    value: String,
    ok: bool,
    degenerate: bool,
    throughput_msg_s: f64,
    error: Option<String>,
}

pub fn saturated(report: &crate::model::SummaryReport) -> bool {
    report.throughput_msg_s < SATURATION_THRESHOLD * report.spec.target_delivery_rate()
}

/// One fresh run per value, in order. A failed run is recorded and the sweep
/// moves on; with `early_stop` a saturated run ends it.
pub async fn run_sweep(
    base: &RunConfig,
    axis: SweepAxis,
    values: &[String],
    out: &Path,
    early_stop: bool,
) -> SweepReport {
    let mut report = SweepReport::default();
    for value in values {
        let mut cfg = base.clone();
        let outcome = match axis.apply(&mut cfg.spec, value) {
            Err(e) => Err(e),
            Ok(()) => run_scenario(&cfg, out, Some(value)).await.map_err(|e| e.to_string()),
        };
        if let Err(e) = &outcome {
            tracing::warn!(%axis, value, error = %e, "sweep point failed");
        }
        let stop = early_stop && outcome.as_ref().is_ok_and(|a| saturated(&a.report));
        report.runs.push(SweepRun {
            value: value.clone(),
            outcome,
        });
        if stop {
            report.stopped_at = Some(value.clone());
            break;
        }
    }
    write_index(base, axis, values, out, &report);
    report
}

fn write_index(base: &RunConfig, axis: SweepAxis, values: &[String], out: &Path, report: &SweepReport) {
    let dir = run_dir(out, &base.spec, &base.label(), "");
    let index = SweepIndex {
        axis: axis.to_string(),
        values,
        completed: report
            .runs
            .iter()
            .map(|r| match &r.outcome {
                Ok(a) => IndexEntry {
                    value: r.value.clone(),
                    ok: true,
                    degenerate: a.report.degenerate,
                    throughput_msg_s: a.report.throughput_msg_s,
                    error: None,
                },
                Err(e) => IndexEntry {
                    value: r.value.clone(),
                    ok: false,
                    degenerate: false,
                    throughput_msg_s: 0.0,
                    error: Some(e.clone()),
                },
            })
            .collect(),
        stopped_at: report.stopped_at.clone(),
    };
    let write = || -> anyhow::Result<()> {
        std::fs::create_dir_all(&dir)?;
        std::fs::write(dir.join(format!("sweep-{axis}.json")), canonical_json(&index)? + "\n")?;
        Ok(())
    };
    if let Err(e) = write() {
        tracing::warn!(error = %e, "writing sweep index");
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::spec::TransportKind;

    #[test]
    fn axis_parse_and_apply() {
        let mut s = ExperimentSpec::throughput_pairs(TransportKind::Loopback, "loopback://x", 1);
        "pairs".parse::<SweepAxis>().unwrap().apply(&mut s, "500").unwrap();
        assert_eq!(s.pairs, 500);
        SweepAxis::Qos.apply(&mut s, "1").unwrap();
        assert_eq!(s.qos, QosLevel::AtLeastOnce);
        assert!(SweepAxis::Qos.apply(&mut s, "3").is_err());
        assert!(SweepAxis::PayloadBytes.apply(&mut s, "1k").is_err());
        assert!("rate".parse::<SweepAxis>().is_err());
    }
}
