use std::path::PathBuf;
use std::sync::{Mutex, OnceLock};

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use mq_bench::cli::formats::canonical_json;
use mq_bench::cli::render::{render_report as render, ReportFormat};
use mq_bench::header::{self, MessageHeader};
use mq_bench::orchestrator::{self, BrokerConfig, OrchestratorError, RunConfig};
use mq_bench::resmon::{self, ResourceSample};
use mq_bench::spec::{ExperimentSpec as Spec, QosLevel, TransportKind};
use mq_bench::transport::broker::{mini_broker_serve, BrokerHandle};
use mq_bench::{chaos, metrics, model};

fn runtime() -> &'static tokio::runtime::Runtime {
    static RT: OnceLock<tokio::runtime::Runtime> = OnceLock::new();
    RT.get_or_init(|| tokio::runtime::Runtime::new().expect("tokio runtime"))
}

fn value_err(e: impl std::fmt::Display) -> PyErr {
    PyValueError::new_err(e.to_string())
}

#[pyclass(name = "MessageHeader", frozen, get_all, skip_from_py_object)]
#[derive(Clone, Copy)]
struct PyHeader {
    version_flags: u32,
    seq: u64,
    send_ts_ns: u64,
}

#[pymethods]
impl PyHeader {
    #[new]
    #[pyo3(signature = (seq, send_ts_ns, version_flags = header::DEFAULT_VERSION_FLAGS))]
    fn new(seq: u64, send_ts_ns: u64, version_flags: u32) -> Self {
        Self { version_flags, seq, send_ts_ns }
    }

    fn encode(&self) -> Vec<u8> {
        header::encode_header(self.seq, self.send_ts_ns, self.version_flags).to_vec()
    }

    /// Header followed by filler up to `total_bytes`.
    fn payload(&self, total_bytes: usize) -> PyResult<Vec<u8>> {
        let h = MessageHeader {
            version_flags: self.version_flags,
            seq: self.seq,
            send_ts_ns: self.send_ts_ns,
        };
        Ok(header::build_payload(&h, total_bytes).map_err(value_err)?.to_vec())
    }

    #[staticmethod]
    fn decode(data: &[u8]) -> PyResult<Self> {
        let h = header::decode_header(data).map_err(value_err)?;
        Ok(Self {
            version_flags: h.version_flags,
            seq: h.seq,
            send_ts_ns: h.send_ts_ns,
        })
    }

    fn __repr__(&self) -> String {
        format!("MessageHeader(seq={}, send_ts_ns={}, version_flags={:#010x})", self.seq, self.send_ts_ns, self.version_flags)
    }

    fn __eq__(&self, other: &Self) -> bool {
        (self.version_flags, self.seq, self.send_ts_ns) == (other.version_flags, other.seq, other.send_ts_ns)
    }
}

#[pyclass(name = "ExperimentSpec", skip_from_py_object)]
#[derive(Clone)]
struct PySpec {
    inner: Spec,
}

fn kind(name: &str) -> PyResult<TransportKind> {
    name.parse().map_err(value_err)
}

#[pymethods]
impl PySpec {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(value_err)?,
        })
    }

    #[staticmethod]
    fn latency_payload(transport: &str, endpoint: &str, payload_bytes: usize) -> PyResult<Self> {
        Ok(Self {
            inner: Spec::latency_payload(kind(transport)?, endpoint, payload_bytes),
        })
    }

    #[staticmethod]
    fn throughput_pairs(transport: &str, endpoint: &str, pairs: u32) -> PyResult<Self> {
        Ok(Self {
            inner: Spec::throughput_pairs(kind(transport)?, endpoint, pairs),
        })
    }

    #[staticmethod]
    fn fanout(transport: &str, endpoint: &str, subscribers: u32) -> PyResult<Self> {
        Ok(Self {
            inner: Spec::fanout(kind(transport)?, endpoint, subscribers),
        })
    }

    #[staticmethod]
    fn qos_reliability(transport: &str, endpoint: &str, qos: u8) -> PyResult<Self> {
        let qos = QosLevel::try_from(qos).map_err(value_err)?;
        Ok(Self {
            inner: Spec::qos_reliability(kind(transport)?, endpoint, qos),
        })
    }

    fn to_json(&self) -> PyResult<String> {
        canonical_json(&self.inner).map_err(value_err)
    }

    /// Violated constraints; empty when the spec is runnable.
    fn validate(&self) -> Vec<String> {
        match mq_bench::spec::validate_spec(&self.inner) {
            Ok(()) => vec![],
            Err(v) => v.iter().map(|v| v.to_string()).collect(),
        }
    }

    fn target_delivery_rate(&self) -> f64 {
        self.inner.target_delivery_rate()
    }

    #[getter]
    fn pairs(&self) -> u32 {
        self.inner.pairs
    }
    #[setter]
    fn set_pairs(&mut self, v: u32) {
        self.inner.pairs = v;
    }
    #[getter]
    fn payload_bytes(&self) -> usize {
        self.inner.payload_bytes
    }
    #[setter]
    fn set_payload_bytes(&mut self, v: usize) {
        self.inner.payload_bytes = v;
    }
    #[getter]
    fn rate_per_publisher(&self) -> f64 {
        self.inner.rate_per_publisher
    }
    #[setter]
    fn set_rate_per_publisher(&mut self, v: f64) {
        self.inner.rate_per_publisher = v;
    }
    #[getter]
    fn duration_s(&self) -> f64 {
        self.inner.duration_s
    }
    #[setter]
    fn set_duration_s(&mut self, v: f64) {
        self.inner.duration_s = v;
    }
    #[getter]
    fn warmup_s(&self) -> f64 {
        self.inner.warmup_s
    }
    #[setter]
    fn set_warmup_s(&mut self, v: f64) {
        self.inner.warmup_s = v;
    }
    #[getter]
    fn drain_s(&self) -> f64 {
        self.inner.drain_s
    }
    #[setter]
    fn set_drain_s(&mut self, v: f64) {
        self.inner.drain_s = v;
    }
    #[getter]
    fn plateau_window_s(&self) -> f64 {
        self.inner.plateau_window_s
    }
    #[setter]
    fn set_plateau_window_s(&mut self, v: f64) {
        self.inner.plateau_window_s = v;
    }
    #[getter]
    fn qos(&self) -> u8 {
        self.inner.qos.into()
    }
    #[setter]
    fn set_qos(&mut self, v: u8) -> PyResult<()> {
        self.inner.qos = QosLevel::try_from(v).map_err(value_err)?;
        Ok(())
    }
    #[getter]
    fn endpoint(&self) -> String {
        self.inner.endpoint.clone()
    }
    #[setter]
    fn set_endpoint(&mut self, v: String) {
        self.inner.endpoint = v;
    }
    #[getter]
    fn scenario(&self) -> &'static str {
        self.inner.scenario.as_str()
    }
    #[getter]
    fn transport(&self) -> &'static str {
        self.inner.transport_kind.as_str()
    }

    fn __repr__(&self) -> String {
        format!(
            "ExperimentSpec({} over {} at {}, pairs={}, payload={} B)",
            self.inner.scenario.as_str(),
            self.inner.transport_kind,
            self.inner.endpoint,
            self.inner.pairs,
            self.inner.payload_bytes
        )
    }
}

#[pyclass(name = "SummaryReport", frozen)]
struct PySummary {
    inner: model::SummaryReport,
    dir: Option<PathBuf>,
}

#[pymethods]
impl PySummary {
    #[staticmethod]
    fn from_json(text: &str) -> PyResult<Self> {
        Ok(Self {
            inner: serde_json::from_str(text).map_err(value_err)?,
            dir: None,
        })
    }

    fn to_json(&self) -> PyResult<String> {
        canonical_json(&self.inner).map_err(value_err)
    }

    /// `json`, `csv` or `table`.
    #[pyo3(signature = (format = "table"))]
    fn render(&self, format: &str) -> PyResult<String> {
        render(&self.inner, parse_format(format)?).map_err(value_err)
    }

    #[getter]
    fn artifacts_dir(&self) -> Option<String> {
        self.dir.as_ref().map(|d| d.display().to_string())
    }
    #[getter]
    fn published_count(&self) -> u64 {
        self.inner.published_count
    }
    #[getter]
    fn expected_deliveries(&self) -> u64 {
        self.inner.expected_deliveries
    }
    #[getter]
    fn received_count(&self) -> u64 {
        self.inner.received_count
    }
    #[getter]
    fn duplicate_count(&self) -> u64 {
        self.inner.duplicate_count
    }
    #[getter]
    fn throughput_msg_s(&self) -> f64 {
        self.inner.throughput_msg_s
    }
    #[getter]
    fn loss_fraction(&self) -> f64 {
        self.inner.loss_fraction
    }
    #[getter]
    fn p50_ns(&self) -> u64 {
        self.inner.latency.p50_ns
    }
    #[getter]
    fn p95_ns(&self) -> u64 {
        self.inner.latency.p95_ns
    }
    #[getter]
    fn p99_ns(&self) -> u64 {
        self.inner.latency.p99_ns
    }
    #[getter]
    fn cpu_cores_mean(&self) -> f64 {
        self.inner.cpu_cores.mean
    }
    #[getter]
    fn mem_mb_mean(&self) -> f64 {
        self.inner.mem_mb.mean
    }
    #[getter]
    fn degenerate(&self) -> bool {
        self.inner.degenerate
    }
    #[getter]
    fn warnings(&self) -> Vec<String> {
        self.inner.warnings.clone()
    }

    fn __repr__(&self) -> String {
        format!(
            "SummaryReport(throughput={:.1} msg/s, p50={} ns, loss={:.4}, degenerate={})",
            self.inner.throughput_msg_s, self.inner.latency.p50_ns, self.inner.loss_fraction, self.inner.degenerate
        )
    }
}

fn parse_format(f: &str) -> PyResult<ReportFormat> {
    match f {
        "json" => Ok(ReportFormat::Json),
        "csv" => Ok(ReportFormat::Csv),
        "table" => Ok(ReportFormat::Table),
        other => Err(PyValueError::new_err(format!("unknown format {other:?}"))),
    }
}

/// The built-in MQTT broker, served on a background runtime.
#[pyclass(name = "MiniBroker")]
struct PyMiniBroker {
    handle: Mutex<Option<BrokerHandle>>,
    endpoint: String,
}

#[pymethods]
impl PyMiniBroker {
    #[new]
    #[pyo3(signature = (listen = "127.0.0.1:0"))]
    fn new(py: Python<'_>, listen: &str) -> PyResult<Self> {
        let listen = listen.to_string();
        let handle = py
            .detach(|| runtime().block_on(mini_broker_serve(&listen)))
            .map_err(|e| PyRuntimeError::new_err(e.to_string()))?;
        Ok(Self {
            endpoint: handle.endpoint(),
            handle: Mutex::new(Some(handle)),
        })
    }

    #[getter]
    fn endpoint(&self) -> String {
        self.endpoint.clone()
    }

    fn stop(&self, py: Python<'_>) {
        let handle = self.handle.lock().unwrap().take();
        if let Some(h) = handle {
            py.detach(|| runtime().block_on(h.shutdown()));
        }
    }
}

#[pyfunction]
#[pyo3(signature = (seq, send_ts_ns, version_flags = header::DEFAULT_VERSION_FLAGS))]
fn encode_header(seq: u64, send_ts_ns: u64, version_flags: u32) -> Vec<u8> {
    header::encode_header(seq, send_ts_ns, version_flags).to_vec()
}

#[pyfunction]
fn decode_header(data: &[u8]) -> PyResult<PyHeader> {
    PyHeader::decode(data)
}

/// Nearest-rank percentiles, `qs` in percent.
#[pyfunction]
fn percentiles(samples: Vec<u64>, qs: Vec<f64>) -> PyResult<Vec<u64>> {
    metrics::percentiles(&samples, &qs).map_err(value_err)
}

/// min, mean, stddev, p50, p95, p99 and max, in ns, as JSON.
#[pyfunction]
fn latency_stats(samples: Vec<u64>) -> PyResult<String> {
    let s = metrics::latency_stats(&samples).map_err(value_err)?;
    canonical_json(&s).map_err(value_err)
}

/// `(fail_at_s, recover_at_s)` pairs for one seeded run.
#[pyfunction]
fn schedule_failures(mttf_s: f64, mttr_s: f64, duration_s: f64, rng_seed: u64) -> Vec<(f64, f64)> {
    chaos::schedule_failures(mttf_s, mttr_s, duration_s, rng_seed)
        .into_iter()
        .map(|e| (e.fail_at_s, e.recover_at_s))
        .collect()
}

#[pyfunction]
fn cpu_cores_used(prev_ts_ns: u64, prev_cpu_ns: u64, curr_ts_ns: u64, curr_cpu_ns: u64) -> PyResult<f64> {
    let s = |ts_ns, cpu_total_ns| ResourceSample {
        ts_ns,
        cpu_total_ns,
        mem_rss_bytes: 0,
        mem_usage_bytes: 0,
        gap: false,
    };
    Ok(resmon::cpu_cores_used(&s(prev_ts_ns, prev_cpu_ns), &s(curr_ts_ns, curr_cpu_ns))
        .map_err(value_err)?
        .cores)
}

/// Runs one experiment and writes its artifacts under `out`. `broker` is
/// `external` (use the spec endpoint) or `mini` (spawn the built-in broker).
#[pyfunction]
#[pyo3(signature = (spec, out, broker = "external"))]
fn run_scenario(py: Python<'_>, spec: &PySpec, out: &str, broker: &str) -> PyResult<PySummary> {
    let broker = match broker {
        "external" => BrokerConfig::External,
        "mini" => BrokerConfig::MiniBroker { listen: None },
        other => return Err(PyValueError::new_err(format!("unknown broker {other:?}"))),
    };
    run_config(py, RunConfig::new(spec.inner.clone(), broker), out)
}

/// Like `run_scenario`, from a full run config document.
#[pyfunction]
fn run_config_json(py: Python<'_>, config: &str, out: &str) -> PyResult<PySummary> {
    let cfg: RunConfig = serde_json::from_str(config).map_err(value_err)?;
    run_config(py, cfg, out)
}

fn run_config(py: Python<'_>, cfg: RunConfig, out: &str) -> PyResult<PySummary> {
    let out = PathBuf::from(out);
    let art = py
        .detach(|| runtime().block_on(orchestrator::run_scenario(&cfg, &out, None)))
        .map_err(|e| match e {
            OrchestratorError::Invalid(_) | OrchestratorError::Config(_) => value_err(e),
            other => PyRuntimeError::new_err(other.to_string()),
        })?;
    Ok(PySummary {
        inner: art.report,
        dir: Some(art.dir),
    })
}

#[pyfunction]
#[pyo3(signature = (summary, format = "table"))]
fn render_report(summary: &PySummary, format: &str) -> PyResult<String> {
    summary.render(format)
}

#[pymodule]
fn mqbench(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyHeader>()?;
    m.add_class::<PySpec>()?;
    m.add_class::<PySummary>()?;
    m.add_class::<PyMiniBroker>()?;
    m.add_function(wrap_pyfunction!(encode_header, m)?)?;
    m.add_function(wrap_pyfunction!(decode_header, m)?)?;
    m.add_function(wrap_pyfunction!(percentiles, m)?)?;
    m.add_function(wrap_pyfunction!(latency_stats, m)?)?;
    m.add_function(wrap_pyfunction!(schedule_failures, m)?)?;
    m.add_function(wrap_pyfunction!(cpu_cores_used, m)?)?;
    m.add_function(wrap_pyfunction!(run_scenario, m)?)?;
    m.add_function(wrap_pyfunction!(run_config_json, m)?)?;
    m.add_function(wrap_pyfunction!(render_report, m)?)?;
    m.add("HEADER_LEN", header::HEADER_LEN)?;
    Ok(())
}
