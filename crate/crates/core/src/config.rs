//! Service configuration file.
//!
//! ```json
//! {
//!   "listen": "127.0.0.1:8080",
//!   "categories": ["greeting", "apology", "request", "persuasion", "criticism", "thanks", "leave-taking"],
//!   "timeout_policy": {"timeout_ms": 60000, "on_timeout": "translation"},
//!   "lang_pair": {"sme": "en", "fle": "zh"},
//!   "backends": { "violation": {"primary": {"kind": "rule_based", "lexicon": "violation.tsv"}} }
//! }
//! ```

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::shaping::DelaySchedule;
use crate::backends::{
    BackendError, BackendKind, Backends, BackendsConfig, GenerationLabels, Task,
};
use crate::engine::EngineConfig;
use crate::fsm::TimeoutPolicy;
use crate::middleware::hub::DEFAULT_OFFLINE_BUFFER;
use crate::model::{CategorySet, LangPair};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("{path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("{path}: {message}")]
    Parse { path: PathBuf, message: String },
    #[error(transparent)]
    Backend(#[from] BackendError),
}

fn default_listen() -> String {
    "127.0.0.1:8080".into()
}

fn default_context_turns() -> usize {
    2
}

fn default_offline_buffer() -> usize {
    DEFAULT_OFFLINE_BUFFER
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AppConfig {
    #[serde(default = "default_listen")]
    pub listen: String,
    pub categories: CategorySet,
    #[serde(default)]
    pub timeout_policy: TimeoutPolicy,
    #[serde(default)]
    pub lang_pair: LangPair,
    #[serde(default = "default_context_turns")]
    pub context_turns: usize,
    #[serde(default)]
    pub generation_labels: GenerationLabels,
    #[serde(default)]
    pub backends: BackendsConfig,
    /// Web client assets served under `/app`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub static_dir: Option<PathBuf>,
    /// Where `transitions.tsv` and `turns.jsonl` are written.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub transcript_dir: Option<PathBuf>,
    #[serde(default = "default_offline_buffer")]
    pub offline_buffer: usize,
    /// Directory relative paths resolve against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl AppConfig {
    /// Stub backends everywhere; useful as a starting point.
    pub fn with_categories(categories: CategorySet) -> Self {
        AppConfig {
            listen: default_listen(),
            categories,
            timeout_policy: TimeoutPolicy::default(),
            lang_pair: LangPair::default(),
            context_turns: default_context_turns(),
            generation_labels: GenerationLabels::default(),
            backends: BackendsConfig::default(),
            static_dir: None,
            transcript_dir: None,
            offline_buffer: default_offline_buffer(),
            base_dir: PathBuf::from("."),
        }
    }

    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse {
                path: path.to_path_buf(),
                message,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str, base_dir: PathBuf) -> Result<Self, ConfigError> {
        let mut cfg: AppConfig = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            path: PathBuf::from("<config>"),
            message: e.to_string(),
        })?;
        cfg.base_dir = base_dir;
        Ok(cfg)
    }

    pub fn resolve(&self, path: &Path) -> PathBuf {
        self.base_dir.join(path)
    }

    pub fn engine_config(&self) -> EngineConfig {
        EngineConfig {
            policy: self.timeout_policy,
            lang_pair: self.lang_pair.clone(),
            context_turns: self.context_turns,
        }
    }

    pub fn build_backends(
        &self,
        schedule: Option<&DelaySchedule>,
    ) -> Result<Backends, ConfigError> {
        let pairs = self
            .backends
            .build(&self.categories, &self.base_dir, schedule)?;
        Ok(Backends::new(
            self.categories.clone(),
            self.generation_labels.clone(),
            pairs,
        )?)
    }

    /// True if any configured backend talks to a remote service.
    pub fn uses_remote(&self) -> bool {
        fn remote(kind: &BackendKind) -> bool {
            match kind {
                BackendKind::RemoteHttp { .. } => true,
                BackendKind::Stacked {
                    discrete,
                    probabilistic,
                    ..
                } => remote(&discrete.kind) || remote(&probabilistic.kind),
                _ => false,
            }
        }
        Task::ALL.iter().any(|&t| {
            let spec = self.backends.spec(t);
            remote(&spec.primary.kind) || spec.backup.as_ref().is_some_and(|b| remote(&b.kind))
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const CATS: &str =
        r#"["greeting","apology","request","persuasion","criticism","thanks","leave-taking"]"#;

    #[test]
    fn minimal_config_uses_defaults() {
        let cfg =
            AppConfig::from_json(&format!(r#"{{"categories": {CATS}}}"#), ".".into()).unwrap();
        assert_eq!(cfg.listen, "127.0.0.1:8080");
        assert_eq!(cfg.categories.len(), 8);
        assert_eq!(cfg.timeout_policy, TimeoutPolicy::default());
        assert!(!cfg.uses_remote());
        cfg.build_backends(None).unwrap();
    }

    #[test]
    fn rejects_bad_configs() {
        for bad in [
            r#"{}"#.to_string(),
            r#"{"categories": ["a"]}"#.to_string(),
            format!(r#"{{"categories": {CATS}, "bogus": 1}}"#),
        ] {
            assert!(matches!(
                AppConfig::from_json(&bad, ".".into()),
                Err(ConfigError::Parse { .. })
            ));
        }
    }

    #[test]
    fn timeout_policy_fields() {
        let cfg = AppConfig::from_json(
            &format!(
                r#"{{"categories": {CATS}, "timeout_policy": {{"on_timeout": "remediation"}}}}"#
            ),
            ".".into(),
        )
        .unwrap();
        assert_eq!(
            cfg.timeout_policy.on_timeout,
            crate::model::DeliveryKind::Remediation
        );
        assert_eq!(
            cfg.timeout_policy.timeout,
            std::time::Duration::from_secs(60)
        );
    }
}
