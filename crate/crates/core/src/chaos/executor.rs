use std::time::Duration;

use futures::future::BoxFuture;
use serde::{Deserialize, Serialize};
use tokio::time::Instant;
use tokio_util::sync::CancellationToken;

use super::admin::ProxyAdmin;
use super::schedule::FailureEvent;
use crate::model::wall_clock_ns;

pub const HOOK_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookOutcome {
    pub reconnected: usize,
    pub failed: usize,
}

/// Re-establishes subscriber sessions after a restore.
pub type ReconnectHook = Box<dyn Fn() -> BoxFuture<'static, HookOutcome> + Send + Sync>;

pub fn no_reconnect() -> ReconnectHook {
    Box::new(|| Box::pin(async { HookOutcome::default() }))
}

/// Maps schedule offsets to instants. `scale` shrinks schedule seconds, so
/// 0.01 runs a 180 s schedule in 1.8 s.
#[derive(Debug, Clone, Copy)]
pub struct RunClock {
    pub origin: Instant,
    pub scale: f64,
}

impl RunClock {
    pub fn starting_now() -> Self {
        Self {
            origin: Instant::now(),
            scale: 1.0,
        }
    }

    pub fn at(&self, offset_s: f64) -> Instant {
        self.origin + Duration::from_secs_f64((offset_s * self.scale).max(0.0))
    }

    /// Schedule seconds elapsed since the origin.
    pub fn offset_now(&self) -> f64 {
        self.origin.elapsed().as_secs_f64() / self.scale
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultStatus {
    Ok,
    ApplyFailed,
    RestoreFailed,
    ReconnectTimeout,
    /// The run stopped before this event was due.
    Skipped,
}

impl FaultStatus {
    pub fn as_str(&self) -> &'static str {
        match self {
            FaultStatus::Ok => "ok",
            FaultStatus::ApplyFailed => "apply_failed",
            FaultStatus::RestoreFailed => "restore_failed",
            FaultStatus::ReconnectTimeout => "reconnect_timeout",
            FaultStatus::Skipped => "skipped",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExecutedFault {
    pub event_index: usize,
    pub scheduled_fail_s: f64,
    pub scheduled_recover_s: f64,
    /// Wall clock, 0 when not attempted.
    pub actual_fail_ns: u64,
    pub actual_recover_ns: u64,
    /// Run-clock offsets of the two actions, in schedule seconds.
    pub fail_offset_s: f64,
    pub recover_offset_s: f64,
    pub status: FaultStatus,
    pub error: Option<String>,
    pub reconnect: Option<HookOutcome>,
}

impl ExecutedFault {
    pub fn downtime_s(&self) -> f64 {
        if self.status == FaultStatus::Skipped {
            0.0
        } else {
            self.recover_offset_s - self.fail_offset_s
        }
    }
}

/// Executes `schedule` in order. Admin errors are logged against the event
/// and the run carries on. A failed proxy is always restored, including when
/// `stop` fires mid-outage, and the hook runs after every restore.
pub async fn run_fault_schedule(
    schedule: &[FailureEvent],
    admin: &ProxyAdmin,
    proxy_name: &str,
    hook: &ReconnectHook,
    clock: RunClock,
    stop: CancellationToken,
) -> Vec<ExecutedFault> {
    let mut log = Vec::with_capacity(schedule.len());
    for (i, ev) in schedule.iter().enumerate() {
        let mut rec = ExecutedFault {
            event_index: i,
            scheduled_fail_s: ev.fail_at_s,
            scheduled_recover_s: ev.recover_at_s,
            actual_fail_ns: 0,
            actual_recover_ns: 0,
            fail_offset_s: 0.0,
            recover_offset_s: 0.0,
            status: FaultStatus::Skipped,
            error: None,
            reconnect: None,
        };
        let stopped = tokio::select! {
            _ = stop.cancelled() => true,
            _ = tokio::time::sleep_until(clock.at(ev.fail_at_s)) => false,
        };
        if stopped {
            log.push(rec);
            continue;
        }

        rec.actual_fail_ns = wall_clock_ns();
        rec.fail_offset_s = clock.offset_now();
        rec.status = FaultStatus::Ok;
        if let Err(e) = admin.apply_failure(proxy_name).await {
            tracing::warn!(event = i, error = %e, "fault apply failed");
            rec.status = FaultStatus::ApplyFailed;
            rec.error = Some(e.to_string());
        }

        let interrupted = tokio::select! {
            _ = stop.cancelled() => true,
            _ = tokio::time::sleep_until(clock.at(ev.recover_at_s)) => false,
        };
        rec.actual_recover_ns = wall_clock_ns();
        rec.recover_offset_s = clock.offset_now();
        if let Err(e) = admin.restore(proxy_name).await {
            tracing::warn!(event = i, error = %e, "fault restore failed");
            if rec.status == FaultStatus::Ok {
                rec.status = FaultStatus::RestoreFailed;
            }
            rec.error.get_or_insert(e.to_string());
        }
        if interrupted {
            tracing::debug!(event = i, "restored early on stop");
        }
        match tokio::time::timeout(HOOK_TIMEOUT, hook()).await {
            Ok(outcome) => rec.reconnect = Some(outcome),
            Err(_) => {
                if rec.status == FaultStatus::Ok {
                    rec.status = FaultStatus::ReconnectTimeout;
                }
            }
        }
        log.push(rec);
    }
    log
}
