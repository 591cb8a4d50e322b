//! Declarative backend configuration and the builder that turns it into
//! live adapters.
//!
//! ```json
//! {
//!   "violation": {
//!     "primary": {"kind": "remote_http", "endpoint": "http://gpu:9000/v1", "timeout_ms": 3000},
//!     "backup": {"kind": "rule_based", "lexicon": "violation.tsv"}
//!   }
//! }
//! ```
//!
//! Relative paths resolve against the directory of the config file.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::remote::RemoteHttp;
use super::shaping::{DelaySchedule, FaultMode, Shaped};
use super::stacked::StackedClassifier;
use super::stubs::{
    default_templates, parse_pairs, DictionaryMt, IdentityAsr, Lexicon, LexiconClassifier,
    ProbabilisticLexicon, Template, TemplateGenerator,
};
use super::{
    BackendError, BackendSlot, FallbackPair, SharedBackend, Task, IMPACT_LABELS, VIOLATION_LABELS,
};
use crate::ensemble::StackingModel;
use crate::model::CategorySet;

/// Inline rules, a rules file, or both (file rules come first).
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct LexiconSource {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lexicon: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub rules: Vec<(String, String)>,
}

impl LexiconSource {
    fn load(&self, base: &Path) -> Result<Lexicon, BackendError> {
        let mut rules = Vec::new();
        if let Some(path) = &self.lexicon {
            let path = base.join(path);
            let text = std::fs::read_to_string(&path)
                .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
            let lex = Lexicon::parse(&text)
                .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
            rules.extend(lex.rules().iter().cloned());
        }
        rules.extend(self.rules.iter().cloned());
        Ok(Lexicon::new(rules))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendKind {
    /// JSON-over-HTTP adapter.
    RemoteHttp { endpoint: String },
    /// Returns the speech payload as the transcript.
    Identity,
    /// Bidirectional dictionary translator; `path` holds `source<TAB>target` lines.
    Dictionary {
        #[serde(default)]
        path: Option<PathBuf>,
        #[serde(default)]
        entries: Vec<(String, String)>,
    },
    /// Remediation/justification templates keyed by target language.
    Template {
        #[serde(default)]
        templates: Option<BTreeMap<String, Template>>,
        #[serde(default)]
        combined: bool,
    },
    /// Discrete lexicon classifier.
    RuleBased {
        #[serde(flatten)]
        source: LexiconSource,
        #[serde(default)]
        default_label: Option<String>,
    },
    /// Lexicon classifier answering with a probability vector.
    Probabilistic {
        #[serde(flatten)]
        source: LexiconSource,
        confidence: f64,
    },
    /// Stacking combiner over two base classifiers.
    Stacked {
        discrete: Box<BackendSpec>,
        probabilistic: Box<BackendSpec>,
        model: PathBuf,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendSpec {
    #[serde(flatten)]
    pub kind: BackendKind,
    /// Defaults to the task's standard timeout.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timeout_ms: Option<u64>,
    /// Fixed latency added to every call.
    #[serde(default)]
    pub delay_ms: u64,
    #[serde(default)]
    pub failure_rate: f64,
    #[serde(default)]
    pub failure_mode: FaultMode,
    #[serde(default)]
    pub seed: u64,
}

impl BackendSpec {
    pub fn of(kind: BackendKind) -> Self {
        BackendSpec {
            kind,
            timeout_ms: None,
            delay_ms: 0,
            failure_rate: 0.0,
            failure_mode: FaultMode::Error,
            seed: 0,
        }
    }

    pub fn timeout(&self, task: Task) -> Duration {
        self.timeout_ms
            .map(Duration::from_millis)
            .unwrap_or_else(|| task.default_timeout())
    }

    fn build_inner(
        &self,
        task: Task,
        labels: &[String],
        base: &Path,
        schedule: Option<&DelaySchedule>,
    ) -> Result<SharedBackend, BackendError> {
        let need_classifier = |what: &str| {
            if task.is_classifier() {
                Ok(())
            } else {
                Err(BackendError::Config(format!(
                    "{what} backend cannot serve task {task}"
                )))
            }
        };
        let backend: SharedBackend = match &self.kind {
            BackendKind::RemoteHttp { endpoint } => Arc::new(RemoteHttp::new(endpoint.clone())),
            BackendKind::Identity => Arc::new(IdentityAsr),
            BackendKind::Dictionary { path, entries } => {
                let mut pairs = Vec::new();
                if let Some(path) = path {
                    let path = base.join(path);
                    let text = std::fs::read_to_string(&path)
                        .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
                    pairs.extend(
                        parse_pairs(&text).map_err(|e| {
                            BackendError::Config(format!("{}: {e}", path.display()))
                        })?,
                    );
                }
                pairs.extend(entries.iter().cloned());
                Arc::new(DictionaryMt::new(pairs))
            }
            BackendKind::Template {
                templates,
                combined,
            } => Arc::new(TemplateGenerator::new(
                templates.clone().unwrap_or_else(default_templates),
                *combined,
            )),
            BackendKind::RuleBased {
                source,
                default_label,
            } => {
                need_classifier("rule_based")?;
                let mut c = LexiconClassifier::new(task, source.load(base)?);
                if let Some(d) = default_label {
                    c = c.with_default(d.clone());
                }
                Arc::new(c)
            }
            BackendKind::Probabilistic { source, confidence } => {
                need_classifier("probabilistic")?;
                Arc::new(ProbabilisticLexicon::new(
                    task,
                    source.load(base)?,
                    labels.to_vec(),
                    *confidence,
                )?)
            }
            BackendKind::Stacked {
                discrete,
                probabilistic,
                model,
            } => {
                need_classifier("stacked")?;
                let path = base.join(model);
                let text = std::fs::read_to_string(&path)
                    .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
                let model = StackingModel::from_text(&text)
                    .map_err(|e| BackendError::Config(format!("{}: {e}", path.display())))?;
                Arc::new(StackedClassifier::new(
                    task,
                    discrete.build_inner(task, labels, base, schedule)?,
                    probabilistic.build_inner(task, labels, base, schedule)?,
                    model,
                    labels.to_vec(),
                )?)
            }
        };
        let shaped = self.delay_ms > 0 || self.failure_rate > 0.0 || schedule.is_some();
        if !shaped {
            return Ok(backend);
        }
        let mut s = Shaped::new(backend)
            .delay(Duration::from_millis(self.delay_ms))
            .faults(self.failure_rate, self.failure_mode, self.seed);
        if let Some(schedule) = schedule {
            s = s.schedule(schedule.clone());
        }
        Ok(s.into_shared())
    }

    pub fn build(
        &self,
        task: Task,
        labels: &[String],
        base: &Path,
        schedule: Option<&DelaySchedule>,
    ) -> Result<BackendSlot, BackendError> {
        Ok(BackendSlot::new(
            self.build_inner(task, labels, base, schedule)?,
            self.timeout(task),
        ))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskSpec {
    pub primary: BackendSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub backup: Option<BackendSpec>,
}

impl TaskSpec {
    pub fn primary(kind: BackendKind) -> Self {
        TaskSpec {
            primary: BackendSpec::of(kind),
            backup: None,
        }
    }
}

fn rule_based() -> TaskSpec {
    TaskSpec::primary(BackendKind::RuleBased {
        source: LexiconSource::default(),
        default_label: None,
    })
}

fn template() -> TaskSpec {
    TaskSpec::primary(BackendKind::Template {
        templates: None,
        combined: false,
    })
}

fn default_asr() -> TaskSpec {
    TaskSpec::primary(BackendKind::Identity)
}

fn default_mt() -> TaskSpec {
    TaskSpec::primary(BackendKind::Dictionary {
        path: None,
        entries: Vec::new(),
    })
}

/// One primary and optional backup per task. Missing tasks default to the
/// deterministic local stubs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackendsConfig {
    #[serde(default = "default_asr")]
    pub asr: TaskSpec,
    #[serde(default = "default_mt")]
    pub mt: TaskSpec,
    #[serde(default = "rule_based")]
    pub category: TaskSpec,
    #[serde(default = "rule_based")]
    pub violation: TaskSpec,
    #[serde(default = "rule_based")]
    pub impact: TaskSpec,
    #[serde(default = "template")]
    pub remediation: TaskSpec,
    #[serde(default = "template")]
    pub justification: TaskSpec,
}

impl Default for BackendsConfig {
    fn default() -> Self {
        BackendsConfig {
            asr: default_asr(),
            mt: default_mt(),
            category: rule_based(),
            violation: rule_based(),
            impact: rule_based(),
            remediation: template(),
            justification: template(),
        }
    }
}

impl BackendsConfig {
    pub fn spec(&self, task: Task) -> &TaskSpec {
        match task {
            Task::Asr => &self.asr,
            Task::Mt => &self.mt,
            Task::CategoryCls => &self.category,
            Task::ViolationCls => &self.violation,
            Task::ImpactCls => &self.impact,
            Task::RemediationGen => &self.remediation,
            Task::JustificationGen => &self.justification,
        }
    }

    pub fn spec_mut(&mut self, task: Task) -> &mut TaskSpec {
        match task {
            Task::Asr => &mut self.asr,
            Task::Mt => &mut self.mt,
            Task::CategoryCls => &mut self.category,
            Task::ViolationCls => &mut self.violation,
            Task::ImpactCls => &mut self.impact,
            Task::RemediationGen => &mut self.remediation,
            Task::JustificationGen => &mut self.justification,
        }
    }

    /// Builds all seven fallback pairs. With a `schedule`, every backend
    /// also honours scripted per-turn delays.
    pub fn build(
        &self,
        categories: &CategorySet,
        base: &Path,
        schedule: Option<&DelaySchedule>,
    ) -> Result<Vec<FallbackPair>, BackendError> {
        Task::ALL
            .iter()
            .map(|&task| {
                let labels: Vec<String> = match task {
                    Task::CategoryCls => categories.names().to_vec(),
                    Task::ViolationCls => VIOLATION_LABELS.iter().map(|s| s.to_string()).collect(),
                    Task::ImpactCls => IMPACT_LABELS.iter().map(|s| s.to_string()).collect(),
                    _ => Vec::new(),
                };
                let spec = self.spec(task);
                let primary = spec.primary.build(task, &labels, base, schedule)?;
                let backup = spec
                    .backup
                    .as_ref()
                    .map(|b| b.build(task, &labels, base, schedule))
                    .transpose()?;
                Ok(FallbackPair::new(task, primary, backup))
            })
            .collect()
    }
}
