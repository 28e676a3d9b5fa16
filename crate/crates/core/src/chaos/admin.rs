use std::time::Duration;

use reqwest::StatusCode;
use serde_json::json;

use super::proxy::ProxyInfo;
use super::ChaosError;

pub const RESET_TOXIC: &str = "mqbench_reset";

/// Client for a Toxiproxy-compatible admin API.
#[derive(Clone)]
pub struct ProxyAdmin {
    base: String,
    http: reqwest::Client,
}

impl ProxyAdmin {
    pub fn new(admin_url: &str) -> Self {
        let http = reqwest::Client::builder()
            .timeout(Duration::from_secs(3))
            .build()
            .expect("http client");
        Self {
            base: admin_url.trim_end_matches('/').to_string(),
            http,
        }
    }

    pub fn url(&self) -> &str {
        &self.base
    }

    async fn send(&self, req: reqwest::RequestBuilder) -> Result<reqwest::Response, ChaosError> {
        req.send().await.map_err(|e| ChaosError::AdminUnreachable(e.to_string()))
    }

    async fn check(resp: reqwest::Response, name: &str, ok_conflict: bool) -> Result<reqwest::Response, ChaosError> {
        let status = resp.status();
        if status.is_success() || (ok_conflict && status == StatusCode::CONFLICT) {
            return Ok(resp);
        }
        if status == StatusCode::NOT_FOUND {
            return Err(ChaosError::ProxyNotFound(name.to_string()));
        }
        let body = resp.text().await.unwrap_or_default();
        Err(ChaosError::Admin {
            status: status.as_u16(),
            body,
        })
    }

    pub async fn version(&self) -> Result<String, ChaosError> {
        let resp = self.send(self.http.get(format!("{}/version", self.base))).await?;
        let resp = Self::check(resp, "", false).await?;
        resp.text().await.map_err(|e| ChaosError::AdminUnreachable(e.to_string()))
    }

    pub async fn get_proxy(&self, name: &str) -> Result<ProxyInfo, ChaosError> {
        let resp = self.send(self.http.get(format!("{}/proxies/{name}", self.base))).await?;
        let resp = Self::check(resp, name, false).await?;
        resp.json().await.map_err(|e| ChaosError::AdminUnreachable(e.to_string()))
    }

    /// Creates the proxy, or points an existing one of that name at `upstream`
    /// and enables it.
    pub async fn ensure_proxy(&self, name: &str, listen: &str, upstream: &str) -> Result<ProxyInfo, ChaosError> {
        let body = json!({ "name": name, "listen": listen, "upstream": upstream, "enabled": true });
        let resp = self.send(self.http.post(format!("{}/proxies", self.base)).json(&body)).await?;
        if resp.status() == StatusCode::CONFLICT {
            let body = json!({ "upstream": upstream, "enabled": true });
            let resp = self
                .send(self.http.post(format!("{}/proxies/{name}", self.base)).json(&body))
                .await?;
            let resp = Self::check(resp, name, false).await?;
            return resp.json().await.map_err(|e| ChaosError::AdminUnreachable(e.to_string()));
        }
        let resp = Self::check(resp, name, false).await?;
        resp.json().await.map_err(|e| ChaosError::AdminUnreachable(e.to_string()))
    }

    pub async fn delete_proxy(&self, name: &str) -> Result<(), ChaosError> {
        let resp = self.send(self.http.delete(format!("{}/proxies/{name}", self.base))).await?;
        Self::check(resp, name, false).await.map(|_| ())
    }

    async fn set_enabled(&self, name: &str, enabled: bool) -> Result<(), ChaosError> {
        let resp = self
            .send(
                self.http
                    .post(format!("{}/proxies/{name}", self.base))
                    .json(&json!({ "enabled": enabled })),
            )
            .await?;
        Self::check(resp, name, false).await.map(|_| ())
    }

    /// Resets every connection through `name` and refuses new ones.
    pub async fn apply_failure(&self, name: &str) -> Result<(), ChaosError> {
        let toxic = json!({
            "name": RESET_TOXIC,
            "type": "reset_peer",
            "stream": "downstream",
            "toxicity": 1.0,
            "attributes": { "timeout": 0 }
        });
        let resp = self
            .send(
                self.http
                    .post(format!("{}/proxies/{name}/toxics", self.base))
                    .json(&toxic),
            )
            .await?;
        Self::check(resp, name, true).await?;
        self.set_enabled(name, false).await
    }

    /// Accepts connections through `name` again.
    pub async fn restore(&self, name: &str) -> Result<(), ChaosError> {
        self.set_enabled(name, true).await?;
        let resp = self
            .send(self.http.delete(format!("{}/proxies/{name}/toxics/{RESET_TOXIC}", self.base)))
            .await?;
        match Self::check(resp, name, false).await {
            Ok(_) => Ok(()),
            // No toxic left over from a prior apply.
            Err(ChaosError::ProxyNotFound(_)) => self.get_proxy(name).await.map(|_| ()),
            Err(e) => Err(e),
        }
    }
}

pub async fn apply_failure(proxy_admin: &str, proxy_name: &str) -> Result<(), ChaosError> {
    ProxyAdmin::new(proxy_admin).apply_failure(proxy_name).await
}

pub async fn restore(proxy_admin: &str, proxy_name: &str) -> Result<(), ChaosError> {
    ProxyAdmin::new(proxy_admin).restore(proxy_name).await
}
