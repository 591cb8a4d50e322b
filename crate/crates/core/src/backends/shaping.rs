//! Latency and fault shaping around any backend, for latency targets,
//! scripted per-turn delays and fault-injection runs.

use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendReply, BackendRequest, SharedBackend, Task};

/// How an injected fault shows up to the caller.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FaultMode {
    /// Return an error immediately.
    #[default]
    Error,
    /// Never answer (sleeps far past any timeout).
    Hang,
}

const HANG: Duration = Duration::from_secs(24 * 3600);

/// Extra per-turn, per-task delays, keyed by engine turn id.
#[derive(Debug, Clone, Default)]
pub struct DelaySchedule {
    inner: Arc<Mutex<HashMap<(u64, Task), Duration>>>,
}

impl DelaySchedule {
    pub fn set(&self, turn_id: u64, task: Task, delay: Duration) {
        self.inner.lock().insert((turn_id, task), delay);
    }

    pub fn get(&self, turn_id: u64, task: Task) -> Option<Duration> {
        self.inner.lock().get(&(turn_id, task)).copied()
    }
}

pub struct Shaped {
    inner: SharedBackend,
    delay: Duration,
    schedule: Option<DelaySchedule>,
    fault_rate: f64,
    fault_mode: FaultMode,
    rng: Mutex<ChaCha8Rng>,
}

impl Shaped {
    pub fn new(inner: SharedBackend) -> Self {
        Shaped {
            inner,
            delay: Duration::ZERO,
            schedule: None,
            fault_rate: 0.0,
            fault_mode: FaultMode::Error,
            rng: Mutex::new(ChaCha8Rng::seed_from_u64(0)),
        }
    }

    pub fn delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }

    pub fn schedule(mut self, schedule: DelaySchedule) -> Self {
        self.schedule = Some(schedule);
        self
    }

    /// Each call independently fails with probability `rate`, drawn from a
    /// ChaCha stream seeded with `seed`.
    pub fn faults(mut self, rate: f64, mode: FaultMode, seed: u64) -> Self {
        self.fault_rate = rate.clamp(0.0, 1.0);
        self.fault_mode = mode;
        self.rng = Mutex::new(ChaCha8Rng::seed_from_u64(seed));
        self
    }

    pub fn into_shared(self) -> SharedBackend {
        Arc::new(self)
    }
}

#[async_trait]
impl Backend for Shaped {
    fn name(&self) -> &str {
        self.inner.name()
    }

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError> {
        let scheduled = match (&self.schedule, request.turn_id) {
            (Some(s), Some(turn)) => s.get(turn, request.task),
            _ => None,
        };
        let delay = scheduled.unwrap_or(self.delay);
        let fault = self.fault_rate > 0.0 && self.rng.lock().random_bool(self.fault_rate);
        if fault && self.fault_mode == FaultMode::Hang {
            tokio::time::sleep(HANG).await;
        }
        if !delay.is_zero() {
            tokio::time::sleep(delay).await;
        }
        if fault {
            return Err(BackendError::failed(self.name(), "injected fault"));
        }
        self.inner.call(request).await
    }
}
