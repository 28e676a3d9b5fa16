/// Token bucket over a caller-supplied monotonic clock in nanoseconds.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenBucket {
    rate: f64,
    capacity: f64,
    tokens: f64,
    last_refill_ns: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Acquire {
    pub granted: bool,
    /// Earliest time a token exists; equals `now_ns` when one already does.
    pub next_eligible_ns: u64,
}

const EPS: f64 = 1e-9;

impl TokenBucket {
    /// A full bucket, so the first acquire at `now_ns` is granted.
    pub fn new(rate: f64, capacity: f64, now_ns: u64) -> Self {
        assert!(rate > 0.0, "rate must be positive");
        let capacity = capacity.max(1.0);
        Self {
            rate,
            capacity,
            tokens: capacity,
            last_refill_ns: now_ns,
        }
    }

    pub fn rate(&self) -> f64 {
        self.rate
    }

    pub fn capacity(&self) -> f64 {
        self.capacity
    }

    pub fn tokens(&self) -> f64 {
        self.tokens
    }

    pub fn last_refill_ns(&self) -> u64 {
        self.last_refill_ns
    }

    fn refill(&mut self, now_ns: u64) {
        let now = now_ns.max(self.last_refill_ns);
        let elapsed = (now - self.last_refill_ns) as f64 / 1e9;
        self.tokens = (self.tokens + self.rate * elapsed).min(self.capacity);
        self.last_refill_ns = now;
    }

    fn eligible_at(&self) -> u64 {
        let missing = 1.0 - self.tokens;
        if missing <= EPS {
            self.last_refill_ns
        } else {
            self.last_refill_ns + (missing / self.rate * 1e9).ceil() as u64
        }
    }

    pub fn try_acquire(&mut self, now_ns: u64) -> Acquire {
        self.refill(now_ns);
        let granted = self.tokens >= 1.0 - EPS;
        if granted {
            self.tokens = (self.tokens - 1.0).max(0.0);
        }
        Acquire {
            granted,
            next_eligible_ns: self.eligible_at(),
        }
    }
}
