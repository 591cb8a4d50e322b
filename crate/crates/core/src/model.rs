//! Shared domain types for a two-party mediated dialogue.
//!
//! Everything here is a plain value object. `SessionState` is only ever
//! mutated by the session executor in [`crate::engine`].

use std::fmt;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::fsm::EngineState;

/// Number of configured norm categories; `Other` is appended after them.
pub const CONFIGURED_CATEGORIES: usize = 7;
/// Total category count seen by classifiers (configured + `Other`).
pub const CATEGORY_COUNT: usize = CONFIGURED_CATEGORIES + 1;
pub const OTHER_CATEGORY: &str = "other";

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("expected exactly {CONFIGURED_CATEGORIES} category names, got {0}")]
    CategoryCount(usize),
    #[error("category name {0:?} is reserved or duplicated")]
    CategoryName(String),
    #[error("turn {0} has no delivered text")]
    NotDelivered(TurnId),
    #[error("turn {got} does not match pending turn {pending}")]
    PendingMismatch { pending: TurnId, got: TurnId },
    #[error("turn {0} is timestamped before the end of history")]
    NonMonotonic(TurnId),
    #[error("impact must be set exactly when a violation is present")]
    ImpactInvariant,
}

/// Which interlocutor a message belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Role {
    #[serde(rename = "SME")]
    Sme,
    #[serde(rename = "FLE")]
    Fle,
}

impl Role {
    pub const ALL: [Role; 2] = [Role::Sme, Role::Fle];

    /// The other party of the conversation.
    pub fn peer(self) -> Role {
        match self {
            Role::Sme => Role::Fle,
            Role::Fle => Role::Sme,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Role::Sme => "SME",
            Role::Fle => "FLE",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_uppercase().as_str() {
            "SME" => Ok(Role::Sme),
            "FLE" => Ok(Role::Fle),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Engine-assigned, per-session monotonically increasing turn id.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct TurnId(pub u64);

impl fmt::Display for TurnId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

impl std::str::FromStr for TurnId {
    type Err = std::num::ParseIntError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        s.parse().map(TurnId)
    }
}

/// BCP-47-ish language tag, kept opaque.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct LangTag(pub String);

impl LangTag {
    pub fn new(tag: impl Into<String>) -> Self {
        LangTag(tag.into())
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for LangTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Language spoken by each role.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LangPair {
    pub sme: LangTag,
    pub fle: LangTag,
}

impl LangPair {
    pub fn of(&self, role: Role) -> &LangTag {
        match role {
            Role::Sme => &self.sme,
            Role::Fle => &self.fle,
        }
    }
}

impl Default for LangPair {
    fn default() -> Self {
        LangPair {
            sme: LangTag::new("en"),
            fle: LangTag::new("zh"),
        }
    }
}

/// Milliseconds on the engine's monotonic clock, relative to engine start.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Timestamp(pub u64);

impl Timestamp {
    pub fn since(self, earlier: Timestamp) -> Duration {
        Duration::from_millis(self.0.saturating_sub(earlier.0))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Utterance {
    pub id: TurnId,
    pub speaker: Role,
    pub source_text: String,
    pub source_lang: LangTag,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub translated_text: Option<String>,
    pub target_lang: LangTag,
    pub received_at: Timestamp,
}

impl Utterance {
    /// Text the receiver would read: the translation if present, else the source.
    pub fn text_for_receiver(&self) -> &str {
        self.translated_text.as_deref().unwrap_or(&self.source_text)
    }
}

/// The seven configured norm category names plus the mandatory `Other`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct CategorySet {
    names: Vec<String>,
}

impl CategorySet {
    pub fn new<I, S>(names: I) -> Result<Self, ModelError>
    where
        I: IntoIterator<Item = S>,
        S: Into<String>,
    {
        let names: Vec<String> = names.into_iter().map(Into::into).collect();
        if names.len() != CONFIGURED_CATEGORIES {
            return Err(ModelError::CategoryCount(names.len()));
        }
        for (i, name) in names.iter().enumerate() {
            let clash = names[..i].iter().any(|n| n.eq_ignore_ascii_case(name));
            if name.trim().is_empty() || name.eq_ignore_ascii_case(OTHER_CATEGORY) || clash {
                return Err(ModelError::CategoryName(name.clone()));
            }
        }
        let mut names = names;
        names.push(OTHER_CATEGORY.to_string());
        Ok(CategorySet { names })
    }

    /// Always [`CATEGORY_COUNT`].
    pub fn len(&self) -> usize {
        self.names.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn get(&self, index: usize) -> Option<NormCategory> {
        self.names.get(index).map(|name| NormCategory {
            index,
            name: name.clone(),
        })
    }

    pub fn other(&self) -> NormCategory {
        self.get(CONFIGURED_CATEGORIES)
            .expect("other is always present")
    }

    /// Case-insensitive lookup by name.
    pub fn by_name(&self, name: &str) -> Option<NormCategory> {
        let name = name.trim();
        self.names
            .iter()
            .position(|n| n.eq_ignore_ascii_case(name))
            .and_then(|i| self.get(i))
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }
}

impl TryFrom<Vec<String>> for CategorySet {
    type Error = ModelError;

    fn try_from(mut names: Vec<String>) -> Result<Self, Self::Error> {
        // Accept round-tripped sets that already carry `other`.
        if names.len() == CATEGORY_COUNT
            && names
                .last()
                .is_some_and(|n| n.eq_ignore_ascii_case(OTHER_CATEGORY))
        {
            names.pop();
        }
        CategorySet::new(names)
    }
}

impl From<CategorySet> for Vec<String> {
    fn from(set: CategorySet) -> Self {
        set.names
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NormCategory {
    pub index: usize,
    pub name: String,
}

impl NormCategory {
    pub fn is_other(&self) -> bool {
        self.index == CONFIGURED_CATEGORIES
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Impact {
    Low,
    High,
}

impl fmt::Display for Impact {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Impact::Low => "Low",
            Impact::High => "High",
        })
    }
}

/// Outcome of the norm classifiers for one utterance.
///
/// `impact` is present exactly when `violated` is true; the constructors
/// are the only way to build one.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "RawAnalysis")]
pub struct NormAnalysis {
    category: NormCategory,
    violated: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    impact: Option<Impact>,
}

#[derive(Deserialize)]
struct RawAnalysis {
    category: NormCategory,
    violated: bool,
    #[serde(default)]
    impact: Option<Impact>,
}

impl TryFrom<RawAnalysis> for NormAnalysis {
    type Error = ModelError;

    fn try_from(raw: RawAnalysis) -> Result<Self, Self::Error> {
        NormAnalysis::new(raw.category, raw.violated, raw.impact)
    }
}

impl NormAnalysis {
    pub fn new(
        category: NormCategory,
        violated: bool,
        impact: Option<Impact>,
    ) -> Result<Self, ModelError> {
        if violated != impact.is_some() {
            return Err(ModelError::ImpactInvariant);
        }
        Ok(NormAnalysis {
            category,
            violated,
            impact,
        })
    }

    pub fn adhering(category: NormCategory) -> Self {
        NormAnalysis {
            category,
            violated: false,
            impact: None,
        }
    }

    pub fn violating(category: NormCategory, impact: Impact) -> Self {
        NormAnalysis {
            category,
            violated: true,
            impact: Some(impact),
        }
    }

    pub fn category(&self) -> &NormCategory {
        &self.category
    }

    pub fn violated(&self) -> bool {
        self.violated
    }

    pub fn impact(&self) -> Option<Impact> {
        self.impact
    }
}

/// Which backend of a primary/backup pair produced a result.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    PrimaryBackend,
    BackupBackend,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionBundle {
    pub translation: String,
    pub remediation: String,
    pub justification: String,
    pub remediation_provenance: Provenance,
    pub justification_provenance: Provenance,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DeliveryKind {
    Translation,
    Remediation,
}

/// What the sender picked when prompted. `TimedOut` means no pick arrived.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SenderChoice {
    Translation,
    Remediation,
    TimedOut,
}

impl From<DeliveryKind> for SenderChoice {
    fn from(kind: DeliveryKind) -> Self {
        match kind {
            DeliveryKind::Translation => SenderChoice::Translation,
            DeliveryKind::Remediation => SenderChoice::Remediation,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DialogueTurn {
    pub utterance: Utterance,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub analysis: Option<NormAnalysis>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bundle: Option<CorrectionBundle>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivered_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivery_kind: Option<DeliveryKind>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sender_choice: Option<SenderChoice>,
    /// When the turn entered `Delivering` (or `Faulted`).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub delivering_at: Option<Timestamp>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_notice: Option<String>,
}

impl DialogueTurn {
    pub fn new(utterance: Utterance) -> Self {
        DialogueTurn {
            utterance,
            analysis: None,
            bundle: None,
            delivered_text: None,
            delivery_kind: None,
            sender_choice: None,
            delivering_at: None,
            error_notice: None,
        }
    }

    pub fn id(&self) -> TurnId {
        self.utterance.id
    }

    pub fn receiver(&self) -> Role {
        self.utterance.speaker.peer()
    }

    pub fn translation(&self) -> Option<&str> {
        self.utterance.translated_text.as_deref()
    }

    /// Sets `delivered_text` and `delivery_kind` from the chosen variant.
    /// Returns the delivered text, or `None` if that variant does not exist.
    pub fn mark_delivery(&mut self, kind: DeliveryKind) -> Option<String> {
        let text = match kind {
            DeliveryKind::Translation => self.utterance.translated_text.clone()?,
            DeliveryKind::Remediation => self.bundle.as_ref()?.remediation.clone(),
        };
        self.delivery_kind = Some(kind);
        self.delivered_text = Some(text.clone());
        Some(text)
    }
}

/// Per-session engine state: FSM position, history and the in-flight turn.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SessionState {
    pub session_id: String,
    pub fsm_state: EngineState,
    history: Vec<DialogueTurn>,
    pub pending: Option<DialogueTurn>,
    pub lang_pair: LangPair,
}

impl SessionState {
    pub fn new(session_id: impl Into<String>, lang_pair: LangPair) -> Self {
        SessionState {
            session_id: session_id.into(),
            fsm_state: EngineState::Idle,
            history: Vec::new(),
            pending: None,
            lang_pair,
        }
    }

    pub fn history(&self) -> &[DialogueTurn] {
        &self.history
    }

    /// Appends a completed turn. History is append-only.
    pub fn append_turn(&mut self, turn: DialogueTurn) -> Result<(), ModelError> {
        if turn.delivered_text.is_none() {
            return Err(ModelError::NotDelivered(turn.id()));
        }
        if let Some(pending) = &self.pending {
            if pending.id() != turn.id() {
                return Err(ModelError::PendingMismatch {
                    pending: pending.id(),
                    got: turn.id(),
                });
            }
        }
        if let Some(last) = self.history.last() {
            if turn.utterance.received_at < last.utterance.received_at {
                return Err(ModelError::NonMonotonic(turn.id()));
            }
        }
        self.history.push(turn);
        self.pending = None;
        Ok(())
    }

    /// The last `n` history utterances followed by the pending one, oldest first.
    pub fn context_window(&self, n: usize) -> Vec<Utterance> {
        let start = self.history.len().saturating_sub(n);
        self.history[start..]
            .iter()
            .map(|t| t.utterance.clone())
            .chain(self.pending.iter().map(|t| t.utterance.clone()))
            .collect()
    }
}
