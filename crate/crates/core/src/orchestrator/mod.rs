//! Experiment lifecycle: broker up, fleet, load, faults, artifacts, broker down.

mod container;
mod run;
mod sweep;

use thiserror::Error;

use crate::chaos::ChaosError;
use crate::spec::Violation;
use crate::transport::TransportError;

pub use container::{is_reachable, wait_ready, BrokerDeployment, ContainerEngine, PortPair, DEFAULT_NOFILE};
pub use run::{
    axis_value, run_dir, run_scenario, BrokerConfig, FaultConfig, MonitorConfig, RunArtifacts, RunConfig, StaggerMode,
};
pub use sweep::{run_sweep, saturated, SweepAxis, SweepReport, SweepRun, SATURATION_THRESHOLD};

#[derive(Debug, Error)]
pub enum OrchestratorError {
    #[error("invalid experiment: {}", .0.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; "))]
    Invalid(Vec<Violation>),
    #[error("configuration: {0}")]
    Config(String),
    #[error("image unavailable: {0}")]
    ImageUnavailable(String),
    #[error("broker failed to start: {0}")]
    StartFailed(String),
    #[error("broker not accepting connections at {0}")]
    ReadinessTimeout(String),
    #[error("container engine: {0}")]
    Engine(String),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Chaos(#[from] ChaosError),
    #[error("writing artifacts: {0}")]
    Artifacts(String),
}
