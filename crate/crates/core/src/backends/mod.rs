//! Pluggable inference adapters for transcription, translation, the three
//! norm classifiers and the two generators.
//!
//! Every adapter speaks the same request/reply shape ([`BackendRequest`],
//! [`BackendReply`]), which is also the JSON body of the remote HTTP
//! protocol. Task-specific interpretation lives in [`tasks`]; the
//! primary/backup policy lives in [`fallback`].

use std::fmt;
use std::sync::Arc;
use std::time::Duration;

use async_trait::async_trait;
use serde::{Deserialize, Serialize};
use thiserror::Error;

pub mod config;
pub mod extract;
pub mod fallback;
pub mod remote;
pub mod shaping;
pub mod stacked;
pub mod stubs;
pub mod tasks;

pub use config::{BackendKind, BackendSpec, BackendsConfig, TaskSpec};
pub use extract::{parse_generation, GenerationLabels, ParseError};
pub use fallback::{invoke_with_fallback, BackendResponse, BackendSlot, FallbackPair};
pub use tasks::Backends;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Task {
    #[serde(rename = "asr")]
    Asr,
    #[serde(rename = "mt")]
    Mt,
    #[serde(rename = "category")]
    CategoryCls,
    #[serde(rename = "violation")]
    ViolationCls,
    #[serde(rename = "impact")]
    ImpactCls,
    #[serde(rename = "remediation")]
    RemediationGen,
    #[serde(rename = "justification")]
    JustificationGen,
}

impl Task {
    pub const ALL: [Task; 7] = [
        Task::Asr,
        Task::Mt,
        Task::CategoryCls,
        Task::ViolationCls,
        Task::ImpactCls,
        Task::RemediationGen,
        Task::JustificationGen,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Task::Asr => "asr",
            Task::Mt => "mt",
            Task::CategoryCls => "category",
            Task::ViolationCls => "violation",
            Task::ImpactCls => "impact",
            Task::RemediationGen => "remediation",
            Task::JustificationGen => "justification",
        }
    }

    pub fn is_classifier(self) -> bool {
        matches!(
            self,
            Task::CategoryCls | Task::ViolationCls | Task::ImpactCls
        )
    }

    pub fn default_timeout(self) -> Duration {
        match self {
            Task::CategoryCls | Task::ViolationCls | Task::ImpactCls => Duration::from_secs(3),
            Task::RemediationGen | Task::JustificationGen => Duration::from_secs(10),
            Task::Asr | Task::Mt => Duration::from_secs(5),
        }
    }
}

impl fmt::Display for Task {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Task {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Task::ALL
            .into_iter()
            .find(|t| t.as_str().eq_ignore_ascii_case(s.trim()))
            .ok_or_else(|| format!("unknown task {s:?}"))
    }
}

/// Labels of the two binary classifiers, in probability-vector order.
pub const VIOLATION_LABELS: [&str; 2] = ["adhered", "violated"];
pub const IMPACT_LABELS: [&str; 2] = ["low", "high"];

/// Request body sent to every adapter (and POSTed verbatim by the remote one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendRequest {
    pub task: Task,
    #[serde(default)]
    pub context: Vec<String>,
    pub current: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub remediation: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source_lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target_lang: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub turn_id: Option<u64>,
}

impl BackendRequest {
    pub fn new(task: Task, current: impl Into<String>) -> Self {
        BackendRequest {
            task,
            context: Vec::new(),
            current: current.into(),
            category: None,
            remediation: None,
            source_lang: None,
            target_lang: None,
            turn_id: None,
        }
    }

    /// Every text in the request window, oldest first, current last.
    pub fn window(&self) -> impl Iterator<Item = &str> {
        self.context
            .iter()
            .map(String::as_str)
            .chain(std::iter::once(self.current.as_str()))
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct BackendReply {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub label: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub probs: Option<Vec<f64>>,
}

impl BackendReply {
    pub fn label(label: impl Into<String>) -> Self {
        BackendReply {
            label: Some(label.into()),
            ..Default::default()
        }
    }

    pub fn text(text: impl Into<String>) -> Self {
        BackendReply {
            text: Some(text.into()),
            ..Default::default()
        }
    }

    pub fn probs(probs: Vec<f64>) -> Self {
        BackendReply {
            probs: Some(probs),
            ..Default::default()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum BackendError {
    #[error("{backend} did not answer within {after:?}")]
    Timeout { backend: String, after: Duration },
    #[error("{backend} failed: {message}")]
    Failed { backend: String, message: String },
    #[error("{backend} returned an unusable reply: {reason}")]
    InvalidReply { backend: String, reason: String },
    #[error("{task}: primary failed ({primary}){}", .backup.as_ref().map(|b| format!("; backup failed ({b})")).unwrap_or_else(|| "; no backup configured".into()))]
    BothBackendsFailed {
        task: Task,
        primary: Box<BackendError>,
        backup: Option<Box<BackendError>>,
    },
    #[error("backend configuration: {0}")]
    Config(String),
}

impl BackendError {
    pub fn failed(backend: impl Into<String>, message: impl Into<String>) -> Self {
        BackendError::Failed {
            backend: backend.into(),
            message: message.into(),
        }
    }

    pub fn invalid(backend: impl Into<String>, reason: impl Into<String>) -> Self {
        BackendError::InvalidReply {
            backend: backend.into(),
            reason: reason.into(),
        }
    }
}

/// An inference adapter. Implementations are stateless with respect to the
/// dialogue and safe to call concurrently.
#[async_trait]
pub trait Backend: Send + Sync {
    fn name(&self) -> &str;

    async fn call(&self, request: &BackendRequest) -> Result<BackendReply, BackendError>;
}

pub type SharedBackend = Arc<dyn Backend>;
