//! Network fault injection through a TCP proxy.

mod admin;
mod executor;
pub mod proxy;
mod schedule;

use thiserror::Error;

pub use admin::{apply_failure, restore, ProxyAdmin, RESET_TOXIC};
pub use executor::{
    no_reconnect, run_fault_schedule, ExecutedFault, FaultStatus, HookOutcome, ReconnectHook, RunClock, HOOK_TIMEOUT,
};
pub use proxy::{fault_proxy_serve, FaultProxyServer, ProxyInfo, Toxic};
pub use schedule::{downtime_within, schedule_failures, FailureEvent};

#[derive(Debug, Error)]
pub enum ChaosError {
    #[error("proxy {0:?} not found")]
    ProxyNotFound(String),
    #[error("proxy admin unreachable: {0}")]
    AdminUnreachable(String),
    #[error("proxy admin returned {status}: {body}")]
    Admin { status: u16, body: String },
}
