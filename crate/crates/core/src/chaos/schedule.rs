use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FailureEvent {
    pub fail_at_s: f64,
    pub recover_at_s: f64,
}

impl FailureEvent {
    pub fn downtime_s(&self) -> f64 {
        self.recover_at_s - self.fail_at_s
    }
}

/// Exponential up-times between fixed-length outages, starting at run start.
///
/// Outages that would begin at or after `duration_s` are dropped. The last one
/// may end past `duration_s`.
pub fn schedule_failures(mttf_s: f64, mttr_s: f64, duration_s: f64, rng_seed: u64) -> Vec<FailureEvent> {
    assert!(mttf_s > 0.0 && mttr_s >= 0.0 && duration_s > 0.0, "invalid schedule parameters");
    let exp = Exp::new(1.0 / mttf_s).expect("positive rate");
    let mut rng = ChaCha8Rng::seed_from_u64(rng_seed);
    let mut out = Vec::new();
    let mut t = 0.0;
    loop {
        let fail_at_s = t + exp.sample(&mut rng);
        if fail_at_s >= duration_s {
            return out;
        }
        let recover_at_s = fail_at_s + mttr_s;
        out.push(FailureEvent { fail_at_s, recover_at_s });
        t = recover_at_s;
    }
}

/// Time within `[0, duration_s]` spent failed.
pub fn downtime_within(events: &[FailureEvent], duration_s: f64) -> f64 {
    events
        .iter()
        .map(|e| e.recover_at_s.min(duration_s) - e.fail_at_s.min(duration_s))
        .sum()
}
