//! Typed task operations on top of the uniform adapter protocol.

use std::collections::BTreeMap;

use super::extract::{parse_generation_with, GenerationLabels};
use super::fallback::{invoke_with_fallback, BackendResponse, FallbackPair};
use super::{BackendError, BackendReply, BackendRequest, Task, IMPACT_LABELS, VIOLATION_LABELS};
use crate::model::{CategorySet, CorrectionBundle, Impact, NormCategory, Utterance};

/// Accepted slack on an incoming probability vector before renormalising.
const INPUT_SUM_TOLERANCE: f64 = 1e-6;

/// Resolves a reply label to a class index: by name (case-insensitive),
/// by numeric index, or by a task-specific synonym.
pub fn label_index(task: Task, labels: &[String], label: &str) -> Option<usize> {
    let label = label.trim();
    if let Some(i) = labels.iter().position(|l| l.eq_ignore_ascii_case(label)) {
        return Some(i);
    }
    if let Ok(i) = label.parse::<usize>() {
        return (i < labels.len()).then_some(i);
    }
    let lower = label.to_ascii_lowercase();
    match task {
        Task::ViolationCls => match lower.as_str() {
            "true" | "yes" | "violation" | "violates" | "violate" => Some(1),
            "false" | "no" | "adheres" | "adhere" | "adherence" => Some(0),
            _ => None,
        },
        _ => None,
    }
}

/// Interprets a classifier reply as `(class, distribution)`.
///
/// Discrete-only replies are lifted to a degenerate one-hot distribution.
/// Probability vectors are checked and renormalised so they sum to 1.
pub fn interpret_distribution(
    task: Task,
    backend: &str,
    reply: BackendReply,
    labels: &[String],
) -> Result<(usize, Vec<f64>), BackendError> {
    let k = labels.len();
    let labelled = match reply.label.as_deref() {
        Some(l) => Some(
            label_index(task, labels, l)
                .ok_or_else(|| BackendError::invalid(backend, format!("unknown label {l:?}")))?,
        ),
        None => None,
    };
    match reply.probs {
        Some(probs) => {
            if probs.len() != k {
                return Err(BackendError::invalid(
                    backend,
                    format!("expected {k} probabilities, got {}", probs.len()),
                ));
            }
            if probs.iter().any(|p| !p.is_finite() || *p < 0.0) {
                return Err(BackendError::invalid(
                    backend,
                    "negative or non-finite probability",
                ));
            }
            let sum: f64 = probs.iter().sum();
            if (sum - 1.0).abs() > INPUT_SUM_TOLERANCE {
                return Err(BackendError::invalid(
                    backend,
                    format!("probabilities sum to {sum}"),
                ));
            }
            let probs: Vec<f64> = probs.iter().map(|p| p / sum).collect();
            let class = labelled.unwrap_or_else(|| crate::ensemble::argmax(&probs));
            Ok((class, probs))
        }
        None => {
            let class = labelled.ok_or_else(|| {
                BackendError::invalid(backend, "reply has neither label nor probs")
            })?;
            let mut probs = vec![0.0; k];
            probs[class] = 1.0;
            Ok((class, probs))
        }
    }
}

fn non_empty_text(backend: &str, reply: BackendReply) -> Result<String, BackendError> {
    match reply.text.as_deref().map(str::trim) {
        Some(t) if !t.is_empty() => Ok(t.to_string()),
        _ => Err(BackendError::invalid(backend, "empty generation")),
    }
}

/// Remediation text, plus a justification when the generator returned a
/// combined labelled blob.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationOutput {
    pub remediation: String,
    pub justification: Option<String>,
}

pub fn interpret_generation(
    backend: &str,
    reply: BackendReply,
    labels: &GenerationLabels,
) -> Result<GenerationOutput, BackendError> {
    let text = non_empty_text(backend, reply)?;
    if labels.is_labeled(&text) {
        let (remediation, justification) = parse_generation_with(&text, labels)
            .map_err(|e| BackendError::invalid(backend, e.to_string()))?;
        Ok(GenerationOutput {
            remediation,
            justification: Some(justification),
        })
    } else {
        Ok(GenerationOutput {
            remediation: text,
            justification: None,
        })
    }
}

/// The seven task pairs plus the configuration needed to interpret replies.
#[derive(Debug)]
pub struct Backends {
    pub categories: CategorySet,
    pub generation_labels: GenerationLabels,
    pairs: BTreeMap<Task, FallbackPair>,
}

fn texts(utterances: &[Utterance]) -> Vec<String> {
    utterances
        .iter()
        .map(|u| u.text_for_receiver().to_string())
        .collect()
}

fn translated(current: &Utterance) -> Result<&str, BackendError> {
    current
        .translated_text
        .as_deref()
        .ok_or_else(|| BackendError::Config(format!("turn {} has no translation", current.id)))
}

impl Backends {
    pub fn new(
        categories: CategorySet,
        generation_labels: GenerationLabels,
        pairs: impl IntoIterator<Item = FallbackPair>,
    ) -> Result<Self, BackendError> {
        let mut map = BTreeMap::new();
        for pair in pairs {
            let task = pair.task;
            if map.insert(task, pair).is_some() {
                return Err(BackendError::Config(format!(
                    "task {task} configured twice"
                )));
            }
        }
        if let Some(missing) = Task::ALL.iter().find(|t| !map.contains_key(t)) {
            return Err(BackendError::Config(format!(
                "task {missing} not configured"
            )));
        }
        Ok(Backends {
            categories,
            generation_labels,
            pairs: map,
        })
    }

    pub fn pair(&self, task: Task) -> &FallbackPair {
        &self.pairs[&task]
    }

    fn request(
        &self,
        task: Task,
        context: &[Utterance],
        current: &Utterance,
    ) -> Result<BackendRequest, BackendError> {
        let mut req = BackendRequest::new(task, translated(current)?);
        req.context = texts(context);
        req.source_lang = Some(current.source_lang.to_string());
        req.target_lang = Some(current.target_lang.to_string());
        req.turn_id = Some(current.id.0);
        Ok(req)
    }

    /// Speech payload (text or audio reference) to source-language text.
    pub async fn transcribe(
        &self,
        current: &Utterance,
        payload: &str,
    ) -> Result<BackendResponse<String>, BackendError> {
        let mut req = BackendRequest::new(Task::Asr, payload);
        req.source_lang = Some(current.source_lang.to_string());
        req.turn_id = Some(current.id.0);
        invoke_with_fallback(self.pair(Task::Asr), &req, non_empty_text).await
    }

    pub async fn translate(
        &self,
        current: &Utterance,
    ) -> Result<BackendResponse<String>, BackendError> {
        let mut req = BackendRequest::new(Task::Mt, current.source_text.clone());
        req.source_lang = Some(current.source_lang.to_string());
        req.target_lang = Some(current.target_lang.to_string());
        req.turn_id = Some(current.id.0);
        invoke_with_fallback(self.pair(Task::Mt), &req, non_empty_text).await
    }

    pub async fn classify_category(
        &self,
        context: &[Utterance],
        current: &Utterance,
    ) -> Result<BackendResponse<(NormCategory, Vec<f64>)>, BackendError> {
        let req = self.request(Task::CategoryCls, context, current)?;
        let labels = self.categories.names().to_vec();
        let resp = invoke_with_fallback(self.pair(Task::CategoryCls), &req, |name, reply| {
            interpret_distribution(Task::CategoryCls, name, reply, &labels)
        })
        .await?;
        let (class, probs) = resp.payload;
        let category = self.categories.get(class).expect("index < len");
        Ok(BackendResponse {
            task: resp.task,
            payload: (category, probs),
            provenance: resp.provenance,
            latency: resp.latency,
        })
    }

    pub async fn detect_violation(
        &self,
        context: &[Utterance],
        current: &Utterance,
        category: &NormCategory,
    ) -> Result<BackendResponse<(bool, Vec<f64>)>, BackendError> {
        let mut req = self.request(Task::ViolationCls, context, current)?;
        req.category = Some(category.name.clone());
        let labels: Vec<String> = VIOLATION_LABELS.iter().map(|s| s.to_string()).collect();
        let resp = invoke_with_fallback(self.pair(Task::ViolationCls), &req, |name, reply| {
            interpret_distribution(Task::ViolationCls, name, reply, &labels)
        })
        .await?;
        let (class, probs) = resp.payload;
        Ok(BackendResponse {
            task: resp.task,
            payload: (class == 1, probs),
            provenance: resp.provenance,
            latency: resp.latency,
        })
    }

    /// `window` is the current utterance preceded by its context, oldest first.
    pub async fn classify_impact(
        &self,
        window: &[Utterance],
    ) -> Result<BackendResponse<Impact>, BackendError> {
        let (current, context) = window
            .split_last()
            .ok_or_else(|| BackendError::Config("empty impact window".into()))?;
        let req = self.request(Task::ImpactCls, context, current)?;
        let labels: Vec<String> = IMPACT_LABELS.iter().map(|s| s.to_string()).collect();
        let resp = invoke_with_fallback(self.pair(Task::ImpactCls), &req, |name, reply| {
            interpret_distribution(Task::ImpactCls, name, reply, &labels)
        })
        .await?;
        Ok(BackendResponse {
            task: resp.task,
            payload: if resp.payload.0 == 1 {
                Impact::High
            } else {
                Impact::Low
            },
            provenance: resp.provenance,
            latency: resp.latency,
        })
    }

    pub async fn generate_remediation(
        &self,
        context: &[Utterance],
        current: &Utterance,
        category: &NormCategory,
    ) -> Result<BackendResponse<GenerationOutput>, BackendError> {
        let mut req = self.request(Task::RemediationGen, context, current)?;
        req.category = Some(category.name.clone());
        let labels = &self.generation_labels;
        invoke_with_fallback(self.pair(Task::RemediationGen), &req, |name, reply| {
            interpret_generation(name, reply, labels)
        })
        .await
    }

    pub async fn generate_justification(
        &self,
        context: &[Utterance],
        current: &Utterance,
        category: &NormCategory,
        remediation: &str,
    ) -> Result<BackendResponse<String>, BackendError> {
        let mut req = self.request(Task::JustificationGen, context, current)?;
        req.category = Some(category.name.clone());
        req.remediation = Some(remediation.to_string());
        let labels = &self.generation_labels;
        invoke_with_fallback(self.pair(Task::JustificationGen), &req, |name, reply| {
            let out = interpret_generation(name, reply, labels)?;
            Ok(out.justification.unwrap_or(out.remediation))
        })
        .await
    }

    /// Impact classification concurrently with remediation followed by
    /// justification. Failures name the task that failed.
    pub async fn run_generation(
        &self,
        window: &[Utterance],
        context: &[Utterance],
        current: &Utterance,
        category: &NormCategory,
    ) -> Result<(Impact, CorrectionBundle), (Task, BackendError)> {
        let impact = async {
            self.classify_impact(window)
                .await
                .map_err(|e| (Task::ImpactCls, e))
        };
        let texts = async {
            let rem = self
                .generate_remediation(context, current, category)
                .await
                .map_err(|e| (Task::RemediationGen, e))?;
            let (justification, just_prov) = match rem.payload.justification.clone() {
                Some(j) => (j, rem.provenance),
                None => {
                    let j = self
                        .generate_justification(
                            context,
                            current,
                            category,
                            &rem.payload.remediation,
                        )
                        .await
                        .map_err(|e| (Task::JustificationGen, e))?;
                    (j.payload, j.provenance)
                }
            };
            Ok::<_, (Task, BackendError)>((rem, justification, just_prov))
        };
        let (impact, texts) = tokio::join!(impact, texts);
        let impact = impact?;
        let (rem, justification, justification_provenance) = texts?;
        let translation = translated(current).map_err(|e| (Task::RemediationGen, e))?;
        Ok((
            impact.payload,
            CorrectionBundle {
                translation: translation.to_string(),
                remediation: rem.payload.remediation,
                justification,
                remediation_provenance: rem.provenance,
                justification_provenance,
            },
        ))
    }
}
