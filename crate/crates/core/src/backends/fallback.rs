//! Primary/backup invocation.
//!
//! The primary gets `timeout` to produce a usable reply. A timeout, an
//! error, or a reply the task cannot interpret all count as a primary
//! failure and hand the same request to the backup.

use std::sync::atomic::{AtomicU64, Ordering};
use std::time::Duration;

use tokio::time::Instant;

use super::{BackendError, BackendReply, BackendRequest, SharedBackend, Task};
use crate::model::Provenance;

#[derive(Clone)]
pub struct BackendSlot {
    pub backend: SharedBackend,
    pub timeout: Duration,
}

impl BackendSlot {
    pub fn new(backend: SharedBackend, timeout: Duration) -> Self {
        BackendSlot { backend, timeout }
    }
}

impl std::fmt::Debug for BackendSlot {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("BackendSlot")
            .field("backend", &self.backend.name())
            .field("timeout", &self.timeout)
            .finish()
    }
}

/// One task's primary backend and optional backup, with usage counters.
#[derive(Debug)]
pub struct FallbackPair {
    pub task: Task,
    pub primary: BackendSlot,
    pub backup: Option<BackendSlot>,
    calls: AtomicU64,
    backup_used: AtomicU64,
}

impl FallbackPair {
    pub fn new(task: Task, primary: BackendSlot, backup: Option<BackendSlot>) -> Self {
        FallbackPair {
            task,
            primary,
            backup,
            calls: AtomicU64::new(0),
            backup_used: AtomicU64::new(0),
        }
    }

    pub fn calls(&self) -> u64 {
        self.calls.load(Ordering::Relaxed)
    }

    /// How many calls were answered by the backup.
    pub fn backup_used(&self) -> u64 {
        self.backup_used.load(Ordering::Relaxed)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BackendResponse<T> {
    pub task: Task,
    pub payload: T,
    pub provenance: Provenance,
    pub latency: Duration,
}

async fn attempt<T>(
    slot: &BackendSlot,
    request: &BackendRequest,
    interpret: &impl Fn(&str, BackendReply) -> Result<T, BackendError>,
) -> Result<T, BackendError> {
    let name = slot.backend.name();
    match tokio::time::timeout(slot.timeout, slot.backend.call(request)).await {
        Ok(Ok(reply)) => interpret(name, reply),
        Ok(Err(e)) => Err(e),
        Err(_) => Err(BackendError::Timeout {
            backend: name.to_string(),
            after: slot.timeout,
        }),
    }
}

/// Calls the primary, falling back to the backup on timeout, error, or an
/// uninterpretable reply.
pub async fn invoke_with_fallback<T>(
    pair: &FallbackPair,
    request: &BackendRequest,
    interpret: impl Fn(&str, BackendReply) -> Result<T, BackendError>,
) -> Result<BackendResponse<T>, BackendError> {
    pair.calls.fetch_add(1, Ordering::Relaxed);
    let started = Instant::now();
    let primary_err = match attempt(&pair.primary, request, &interpret).await {
        Ok(payload) => {
            return Ok(BackendResponse {
                task: pair.task,
                payload,
                provenance: Provenance::PrimaryBackend,
                latency: started.elapsed(),
            })
        }
        Err(e) => e,
    };
    let Some(backup) = &pair.backup else {
        return Err(BackendError::BothBackendsFailed {
            task: pair.task,
            primary: Box::new(primary_err),
            backup: None,
        });
    };
    tracing::warn!(
        task = %pair.task,
        primary = pair.primary.backend.name(),
        backup = backup.backend.name(),
        error = %primary_err,
        "primary backend failed, activating backup"
    );
    pair.backup_used.fetch_add(1, Ordering::Relaxed);
    match attempt(backup, request, &interpret).await {
        Ok(payload) => Ok(BackendResponse {
            task: pair.task,
            payload,
            provenance: Provenance::BackupBackend,
            latency: started.elapsed(),
        }),
        Err(backup_err) => Err(BackendError::BothBackendsFailed {
            task: pair.task,
            primary: Box::new(primary_err),
            backup: Some(Box::new(backup_err)),
        }),
    }
}
