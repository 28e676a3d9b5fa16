use std::collections::{BTreeMap, HashMap};
use std::time::Duration;

use bollard::errors::Error as DockerError;
use bollard::models::{ContainerCreateBody, HostConfig, PortBinding, ResourcesUlimits};
use bollard::query_parameters::{
    CreateContainerOptions, CreateImageOptions, RemoveContainerOptions, StartContainerOptions, StopContainerOptions,
};
use futures::StreamExt;
use serde::{Deserialize, Serialize};
use tokio::net::TcpStream;
use tokio::time::Instant;

use super::OrchestratorError;
use crate::resmon::StatsClient;

pub const DEFAULT_NOFILE: u64 = 300_000;
const STOP_GRACE_S: i32 = 10;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PortPair {
    pub host: u16,
    pub container: u16,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BrokerDeployment {
    /// Container engine API, e.g. `unix:///var/run/docker.sock`.
    pub container_ctl: String,
    pub image: String,
    pub name: String,
    #[serde(default)]
    pub env: BTreeMap<String, String>,
    #[serde(default)]
    pub ports: Vec<PortPair>,
    #[serde(default = "default_nofile")]
    pub nofile_limit: u64,
    #[serde(default = "default_readiness")]
    pub readiness_timeout_s: f64,
    /// Optional command override.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub cmd: Option<Vec<String>>,
}

fn default_nofile() -> u64 {
    DEFAULT_NOFILE
}

fn default_readiness() -> f64 {
    30.0
}

pub struct ContainerEngine {
    client: StatsClient,
}

impl ContainerEngine {
    pub fn connect(container_ctl: &str) -> Result<Self, OrchestratorError> {
        let client = StatsClient::connect(container_ctl).map_err(|e| OrchestratorError::Engine(e.to_string()))?;
        Ok(Self { client })
    }

    pub fn stats(&self) -> &StatsClient {
        &self.client
    }

    async fn ensure_image(&self, image: &str) -> Result<(), OrchestratorError> {
        let docker = self.client.docker();
        if docker.inspect_image(image).await.is_ok() {
            return Ok(());
        }
        let opts = CreateImageOptions {
            from_image: Some(image.to_string()),
            ..Default::default()
        };
        let mut pull = docker.create_image(Some(opts), None, None);
        while let Some(step) = pull.next().await {
            if let Err(e) = step {
                return Err(OrchestratorError::ImageUnavailable(format!("{image}: {e}")));
            }
        }
        docker
            .inspect_image(image)
            .await
            .map(|_| ())
            .map_err(|e| OrchestratorError::ImageUnavailable(format!("{image}: {e}")))
    }

    /// Starts a fresh container (replacing any of the same name) and waits
    /// until `probe_addr` accepts TCP connections.
    pub async fn start_broker(&self, d: &BrokerDeployment, probe_addr: &str) -> Result<String, OrchestratorError> {
        self.ensure_image(&d.image).await?;
        self.stop_broker(&d.name).await;
        let docker = self.client.docker();

        let mut bindings: HashMap<String, Option<Vec<PortBinding>>> = HashMap::new();
        let mut exposed = Vec::new();
        for p in &d.ports {
            let key = format!("{}/tcp", p.container);
            exposed.push(key.clone());
            bindings.insert(
                key,
                Some(vec![PortBinding {
                    host_ip: None,
                    host_port: Some(p.host.to_string()),
                }]),
            );
        }
        let nofile = i64::try_from(d.nofile_limit).unwrap_or(i64::MAX);
        let body = ContainerCreateBody {
            image: Some(d.image.clone()),
            env: Some(d.env.iter().map(|(k, v)| format!("{k}={v}")).collect()),
            cmd: d.cmd.clone(),
            exposed_ports: Some(exposed),
            host_config: Some(HostConfig {
                port_bindings: Some(bindings),
                ulimits: Some(vec![ResourcesUlimits {
                    name: Some("nofile".into()),
                    soft: Some(nofile),
                    hard: Some(nofile),
                }]),
                ..Default::default()
            }),
            ..Default::default()
        };
        let opts = CreateContainerOptions {
            name: Some(d.name.clone()),
            ..Default::default()
        };
        let created = docker
            .create_container(Some(opts), body)
            .await
            .map_err(|e| match e {
                DockerError::DockerResponseServerError { status_code: 404, message } => {
                    OrchestratorError::ImageUnavailable(message)
                }
                other => OrchestratorError::StartFailed(other.to_string()),
            })?;
        docker
            .start_container(&created.id, None::<StartContainerOptions>)
            .await
            .map_err(|e| OrchestratorError::StartFailed(e.to_string()))?;
        wait_ready(probe_addr, Duration::from_secs_f64(d.readiness_timeout_s)).await?;
        Ok(created.id)
    }

    /// Stops and removes `id`; missing containers are fine.
    pub async fn stop_broker(&self, id: &str) {
        let docker = self.client.docker();
        let stop = StopContainerOptions {
            t: Some(STOP_GRACE_S),
            ..Default::default()
        };
        if let Err(e) = docker.stop_container(id, Some(stop)).await {
            tracing::debug!(id, error = %e, "stop");
        }
        let rm = RemoveContainerOptions {
            force: true,
            v: true,
            ..Default::default()
        };
        if let Err(e) = docker.remove_container(id, Some(rm)).await {
            tracing::debug!(id, error = %e, "remove");
        }
    }
}

/// Retries a TCP connect until it succeeds or `budget` runs out.
pub async fn wait_ready(addr: &str, budget: Duration) -> Result<(), OrchestratorError> {
    let deadline = Instant::now() + budget;
    loop {
        let attempt = tokio::time::timeout(Duration::from_secs(1), TcpStream::connect(addr)).await;
        if let Ok(Ok(_)) = attempt {
            return Ok(());
        }
        if Instant::now() >= deadline {
            return Err(OrchestratorError::ReadinessTimeout(addr.to_string()));
        }
        tokio::time::sleep(Duration::from_millis(200)).await;
    }
}

pub async fn is_reachable(addr: &str) -> bool {
    matches!(
        tokio::time::timeout(Duration::from_secs(1), TcpStream::connect(addr)).await,
        Ok(Ok(_))
    )
}
