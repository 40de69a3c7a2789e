//! Injectable time source.
//!
//! Everything that waits (in-memory link delays, the replication cycle) goes
//! through a [`Clock`] so tests can drive time by hand.

use std::sync::{Arc, Condvar, Mutex};
use std::time::{Duration, Instant};

pub trait Clock: Send + Sync {
    /// Time elapsed since the clock's epoch.
    fn now(&self) -> Duration;

    /// Block the calling thread until `now() >= deadline`.
    fn sleep_until(&self, deadline: Duration);

    fn sleep(&self, d: Duration) {
        let deadline = self.now() + d;
        self.sleep_until(deadline);
    }
}

pub type SharedClock = Arc<dyn Clock>;

/// Wall-clock time measured from construction.
#[derive(Debug)]
pub struct SystemClock {
    epoch: Instant,
}

impl SystemClock {
    pub fn new() -> Self {
        Self { epoch: Instant::now() }
    }

    pub fn shared() -> SharedClock {
        Arc::new(Self::new())
    }
}

impl Default for SystemClock {
    fn default() -> Self {
        Self::new()
    }
}

impl Clock for SystemClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed()
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep(deadline - now);
        }
    }
}

/// Wall-clock time sped up by a constant factor: one real second reads as
/// `factor` seconds.
#[derive(Debug)]
pub struct ScaledClock {
    epoch: Instant,
    factor: f64,
}

impl ScaledClock {
    pub fn new(factor: f64) -> Arc<Self> {
        assert!(factor.is_finite() && factor > 0.0, "clock factor must be positive");
        Arc::new(Self { epoch: Instant::now(), factor })
    }

    pub fn factor(&self) -> f64 {
        self.factor
    }
}

impl Clock for ScaledClock {
    fn now(&self) -> Duration {
        self.epoch.elapsed().mul_f64(self.factor)
    }

    fn sleep_until(&self, deadline: Duration) {
        let now = self.now();
        if deadline > now {
            std::thread::sleep((deadline - now).div_f64(self.factor));
        }
    }
}

/// A clock that only moves when [`ManualClock::advance`] is called.
///
/// Sleepers block on a condition variable; `sleepers()` lets a harness wait
/// until every party it expects is parked before moving time forward.
#[derive(Debug, Default)]
pub struct ManualClock {
    state: Mutex<ManualState>,
    cv: Condvar,
}

#[derive(Debug, Default)]
struct ManualState {
    now: Duration,
    sleepers: usize,
}

impl ManualClock {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn advance(&self, d: Duration) {
        let mut st = self.state.lock().unwrap();
        st.now += d;
        self.cv.notify_all();
    }

    /// Number of threads currently parked in `sleep_until`.
    pub fn sleepers(&self) -> usize {
        self.state.lock().unwrap().sleepers
    }

    /// Spin (in real time) until at least `n` threads are parked, or `timeout`
    /// of real time elapses. Returns whether the condition was met.
    pub fn wait_for_sleepers(&self, n: usize, timeout: Duration) -> bool {
        let start = Instant::now();
        while start.elapsed() < timeout {
            if self.sleepers() >= n {
                return true;
            }
            std::thread::sleep(Duration::from_micros(200));
        }
        self.sleepers() >= n
    }
}

impl Clock for ManualClock {
    fn now(&self) -> Duration {
        self.state.lock().unwrap().now
    }

    fn sleep_until(&self, deadline: Duration) {
        let mut st = self.state.lock().unwrap();
        if st.now >= deadline {
            return;
        }
        st.sleepers += 1;
        while st.now < deadline {
            st = self.cv.wait(st).unwrap();
        }
        st.sleepers -= 1;
    }
}
