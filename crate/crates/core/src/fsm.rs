//! The main engine's finite-state machine.
//!
//! [`advance`] is a pure function over `(state, event, turn)`. It mutates the
//! in-flight turn and returns the next state together with the side effects
//! the session executor must perform. It never performs I/O itself.
//!
//! ```text
//! Idle --SpeechReceived--> Transcribing --TranscriptReady--> Translating
//! Translating --TranslationReady--> Analyzing
//! Analyzing --AnalysisReady(adhered)--> Delivering
//! Analyzing --AnalysisReady(violated)--> Generating
//! Generating --GenerationReady(Low)--> Delivering
//! Generating --GenerationReady(High)--> AwaitingChoice
//! AwaitingChoice --ChoiceReceived|ChoiceTimeout--> Delivering
//! Delivering --DeliveryAcked--> Idle
//! *busy* --BackendError--> Faulted --DeliveryAcked--> Idle
//! ```

use std::fmt;
use std::str::FromStr;
use std::time::Duration;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backends::Task;
use crate::model::{
    CorrectionBundle, DeliveryKind, DialogueTurn, Impact, NormAnalysis, NormCategory, Role,
    SenderChoice, Timestamp, TurnId,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum EngineState {
    Idle,
    Transcribing,
    Translating,
    Analyzing,
    Generating,
    AwaitingChoice,
    Delivering,
    Faulted,
}

impl EngineState {
    pub const ALL: [EngineState; 8] = [
        EngineState::Idle,
        EngineState::Transcribing,
        EngineState::Translating,
        EngineState::Analyzing,
        EngineState::Generating,
        EngineState::AwaitingChoice,
        EngineState::Delivering,
        EngineState::Faulted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            EngineState::Idle => "Idle",
            EngineState::Transcribing => "Transcribing",
            EngineState::Translating => "Translating",
            EngineState::Analyzing => "Analyzing",
            EngineState::Generating => "Generating",
            EngineState::AwaitingChoice => "AwaitingChoice",
            EngineState::Delivering => "Delivering",
            EngineState::Faulted => "Faulted",
        }
    }
}

impl fmt::Display for EngineState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for EngineState {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        EngineState::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| format!("unknown engine state {s:?}"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum EventKind {
    /// The engine has built the pending turn from an inbound `speech` frame.
    SpeechReceived,
    TranscriptReady {
        text: String,
    },
    TranslationReady {
        text: String,
    },
    AnalysisReady {
        category: NormCategory,
        violated: bool,
    },
    GenerationReady {
        analysis: NormAnalysis,
        bundle: CorrectionBundle,
    },
    ChoiceReceived {
        choice: DeliveryKind,
    },
    ChoiceTimeout,
    BackendError {
        task: Task,
        message: String,
    },
    DeliveryAcked,
}

impl EventKind {
    /// Short label used in transition logs. Payload-bearing events carry the
    /// routing-relevant part of their payload in parentheses.
    pub fn label(&self) -> String {
        match self {
            EventKind::SpeechReceived => "SpeechReceived".into(),
            EventKind::TranscriptReady { .. } => "TranscriptReady".into(),
            EventKind::TranslationReady { .. } => "TranslationReady".into(),
            EventKind::AnalysisReady { violated, .. } => {
                if *violated {
                    "AnalysisReady(violated)".into()
                } else {
                    "AnalysisReady(adhered)".into()
                }
            }
            EventKind::GenerationReady { analysis, .. } => match analysis.impact() {
                Some(impact) => format!("GenerationReady({impact})"),
                None => "GenerationReady".into(),
            },
            EventKind::ChoiceReceived { choice } => format!("ChoiceReceived({choice:?})"),
            EventKind::ChoiceTimeout => "ChoiceTimeout".into(),
            EventKind::BackendError { task, .. } => format!("BackendError({task})"),
            EventKind::DeliveryAcked => "DeliveryAcked".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EngineEvent {
    pub session_id: String,
    pub turn_id: TurnId,
    pub kind: EventKind,
}

impl EngineEvent {
    pub fn new(session_id: impl Into<String>, turn_id: TurnId, kind: EventKind) -> Self {
        EngineEvent {
            session_id: session_id.into(),
            turn_id,
            kind,
        }
    }
}

/// Side effects requested by a transition.
#[derive(Debug, Clone, PartialEq)]
pub enum Action {
    InvokeAsr,
    InvokeMt,
    InvokeAnalysis,
    /// Impact classification and remediation/justification generation,
    /// run concurrently and joined into one `GenerationReady`.
    InvokeGeneration {
        category: NormCategory,
    },
    /// Informational echo of intermediate text back to the speaker.
    Echo {
        target: Role,
        stage: EchoStage,
        text: String,
    },
    PromptSender {
        target: Role,
        translation: String,
        remediation: String,
        justification: String,
    },
    StartChoiceTimer(Duration),
    CancelChoiceTimer,
    Deliver {
        target: Role,
        kind: DeliveryKind,
        text: String,
        notice: Option<String>,
    },
    NotifyError {
        target: Role,
        message: String,
    },
    AppendHistory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EchoStage {
    Transcript,
    Translation,
}

/// What to deliver when the sender does not answer a correction prompt.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct TimeoutPolicy {
    #[serde(with = "duration_ms", rename = "timeout_ms")]
    pub timeout: Duration,
    pub on_timeout: DeliveryKind,
}

impl Default for TimeoutPolicy {
    fn default() -> Self {
        TimeoutPolicy {
            timeout: Duration::from_secs(60),
            on_timeout: DeliveryKind::Translation,
        }
    }
}

pub(crate) mod duration_ms {
    use std::time::Duration;

    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(d: &Duration, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_u64(d.as_millis() as u64)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Duration, D::Error> {
        u64::deserialize(d).map(Duration::from_millis)
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FsmError {
    #[error("event {event} is not legal in state {state}")]
    IllegalTransition { state: EngineState, event: String },
    #[error("event for turn {got} but turn {expected} is in flight")]
    StaleTurn { expected: TurnId, got: TurnId },
    #[error("turn {0} already has a sender choice")]
    AlreadyChosen(TurnId),
    #[error("generation result is inconsistent: {0}")]
    InvalidPayload(&'static str),
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RoutingError {
    #[error("no correction bundle for a violated turn")]
    MissingBundle,
    #[error("routing requires a violation with an impact level")]
    NotViolated,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RouteAction {
    DeliverTranslation,
    DeliverRemediation,
    PromptSender,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RoutingDecision {
    pub action: RouteAction,
    pub target: Role,
}

/// Low impact goes straight to the receiver as a remediation; high impact
/// asks the sender first.
pub fn route_by_impact(
    analysis: &NormAnalysis,
    bundle: Option<&CorrectionBundle>,
    sender: Role,
) -> Result<RoutingDecision, RoutingError> {
    let impact = match (analysis.violated(), analysis.impact()) {
        (true, Some(impact)) => impact,
        _ => return Err(RoutingError::NotViolated),
    };
    if bundle.is_none() {
        return Err(RoutingError::MissingBundle);
    }
    Ok(match impact {
        Impact::Low => RoutingDecision {
            action: RouteAction::DeliverRemediation,
            target: sender.peer(),
        },
        Impact::High => RoutingDecision {
            action: RouteAction::PromptSender,
            target: sender,
        },
    })
}

/// Routing after the sender answered (or failed to answer) a prompt.
pub fn route_choice(choice: SenderChoice, policy: &TimeoutPolicy, sender: Role) -> RoutingDecision {
    let kind = match choice {
        SenderChoice::Translation => DeliveryKind::Translation,
        SenderChoice::Remediation => DeliveryKind::Remediation,
        SenderChoice::TimedOut => policy.on_timeout,
    };
    RoutingDecision {
        action: match kind {
            DeliveryKind::Translation => RouteAction::DeliverTranslation,
            DeliveryKind::Remediation => RouteAction::DeliverRemediation,
        },
        target: sender.peer(),
    }
}

/// Applies the sender's pick to a prompted turn. The first choice wins.
pub fn resolve_choice(
    turn: &mut DialogueTurn,
    turn_id: TurnId,
    choice: DeliveryKind,
) -> Result<String, FsmError> {
    if turn.id() != turn_id {
        return Err(FsmError::StaleTurn {
            expected: turn.id(),
            got: turn_id,
        });
    }
    if turn.sender_choice.is_some() {
        return Err(FsmError::AlreadyChosen(turn_id));
    }
    let text = turn
        .mark_delivery(choice)
        .ok_or(FsmError::InvalidPayload("chosen variant is missing"))?;
    turn.sender_choice = Some(choice.into());
    Ok(text)
}

/// Applies the timeout policy to a prompted turn that got no answer.
pub fn timeout_choice(turn: &mut DialogueTurn, policy: &TimeoutPolicy) -> Option<String> {
    if turn.sender_choice.is_some() {
        return turn.delivered_text.clone();
    }
    let text = turn.mark_delivery(policy.on_timeout)?;
    turn.sender_choice = Some(SenderChoice::TimedOut);
    Some(text)
}

fn illegal(state: EngineState, kind: &EventKind) -> FsmError {
    FsmError::IllegalTransition {
        state,
        event: kind.label(),
    }
}

/// Computes the next state and actions for `event`.
///
/// On error the state and the turn are left untouched; the caller logs and
/// drops the event.
pub fn advance(
    state: EngineState,
    event: &EngineEvent,
    turn: &mut DialogueTurn,
    policy: &TimeoutPolicy,
    now: Timestamp,
) -> Result<(EngineState, Vec<Action>), FsmError> {
    use EngineState as S;
    use EventKind as E;

    if state == S::Idle && event.kind != E::SpeechReceived {
        return Err(illegal(state, &event.kind));
    }
    if event.turn_id != turn.id() {
        return Err(FsmError::StaleTurn {
            expected: turn.id(),
            got: event.turn_id,
        });
    }
    let sender = turn.utterance.speaker;
    let receiver = sender.peer();

    let out = match (state, &event.kind) {
        (S::Idle, E::SpeechReceived) => (S::Transcribing, vec![Action::InvokeAsr]),
        (S::Transcribing, E::TranscriptReady { text }) => {
            turn.utterance.source_text = text.clone();
            (
                S::Translating,
                vec![
                    Action::Echo {
                        target: sender,
                        stage: EchoStage::Transcript,
                        text: text.clone(),
                    },
                    Action::InvokeMt,
                ],
            )
        }
        (S::Translating, E::TranslationReady { text }) => {
            turn.utterance.translated_text = Some(text.clone());
            (
                S::Analyzing,
                vec![
                    Action::Echo {
                        target: sender,
                        stage: EchoStage::Translation,
                        text: text.clone(),
                    },
                    Action::InvokeAnalysis,
                ],
            )
        }
        (S::Analyzing, E::AnalysisReady { category, violated }) => {
            if *violated {
                (
                    S::Generating,
                    vec![Action::InvokeGeneration {
                        category: category.clone(),
                    }],
                )
            } else {
                turn.analysis = Some(NormAnalysis::adhering(category.clone()));
                let text = turn
                    .mark_delivery(DeliveryKind::Translation)
                    .ok_or(FsmError::InvalidPayload("translation missing"))?;
                turn.delivering_at = Some(now);
                (
                    S::Delivering,
                    vec![Action::Deliver {
                        target: receiver,
                        kind: DeliveryKind::Translation,
                        text,
                        notice: None,
                    }],
                )
            }
        }
        (S::Generating, E::GenerationReady { analysis, bundle }) => {
            let decision = route_by_impact(analysis, Some(bundle), sender)
                .map_err(|_| FsmError::InvalidPayload("generation without violation"))?;
            if bundle.remediation.trim().is_empty() || bundle.justification.trim().is_empty() {
                return Err(FsmError::InvalidPayload(
                    "empty remediation or justification",
                ));
            }
            turn.analysis = Some(analysis.clone());
            turn.bundle = Some(bundle.clone());
            match decision.action {
                RouteAction::PromptSender => (
                    S::AwaitingChoice,
                    vec![
                        Action::PromptSender {
                            target: decision.target,
                            translation: bundle.translation.clone(),
                            remediation: bundle.remediation.clone(),
                            justification: bundle.justification.clone(),
                        },
                        Action::StartChoiceTimer(policy.timeout),
                    ],
                ),
                _ => {
                    let text = turn
                        .mark_delivery(DeliveryKind::Remediation)
                        .ok_or(FsmError::InvalidPayload("remediation missing"))?;
                    turn.delivering_at = Some(now);
                    (
                        S::Delivering,
                        vec![Action::Deliver {
                            target: decision.target,
                            kind: DeliveryKind::Remediation,
                            text,
                            notice: None,
                        }],
                    )
                }
            }
        }
        (S::AwaitingChoice, E::ChoiceReceived { choice }) => {
            let text = resolve_choice(turn, event.turn_id, *choice)?;
            turn.delivering_at = Some(now);
            (
                S::Delivering,
                vec![
                    Action::CancelChoiceTimer,
                    Action::Deliver {
                        target: receiver,
                        kind: *choice,
                        text,
                        notice: None,
                    },
                ],
            )
        }
        (S::AwaitingChoice, E::ChoiceTimeout) => {
            let text = timeout_choice(turn, policy)
                .ok_or(FsmError::InvalidPayload("timeout variant missing"))?;
            turn.delivering_at = Some(now);
            (
                S::Delivering,
                vec![Action::Deliver {
                    target: receiver,
                    kind: policy.on_timeout,
                    text,
                    notice: None,
                }],
            )
        }
        (S::Delivering, E::DeliveryAcked) => (S::Idle, vec![Action::AppendHistory]),
        (S::Faulted, E::DeliveryAcked) => {
            let actions = if turn.delivered_text.is_some() {
                vec![Action::AppendHistory]
            } else {
                Vec::new()
            };
            (S::Idle, actions)
        }
        (S::Faulted, E::BackendError { .. }) => return Err(illegal(state, &event.kind)),
        (_, E::BackendError { task, message }) => {
            let notice = format!("{task} backend failed: {message}");
            let mut actions = Vec::new();
            if state == S::AwaitingChoice {
                actions.push(Action::CancelChoiceTimer);
            }
            // A turn already in Delivering has been delivered once; never twice.
            if turn.delivered_text.is_none() {
                if let Some(text) = turn.mark_delivery(DeliveryKind::Translation) {
                    actions.push(Action::Deliver {
                        target: receiver,
                        kind: DeliveryKind::Translation,
                        text,
                        notice: Some(notice.clone()),
                    });
                }
                turn.delivering_at = Some(now);
            }
            turn.error_notice = Some(notice.clone());
            actions.push(Action::NotifyError {
                target: sender,
                message: notice,
            });
            (S::Faulted, actions)
        }
        (state, kind) => return Err(illegal(state, kind)),
    };
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum LatencyPath {
    NoRemediation,
    LowImpact,
    HighImpact,
}

impl fmt::Display for LatencyPath {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LatencyRecord {
    pub path: LatencyPath,
    #[serde(with = "duration_ms", rename = "elapsed_ms")]
    pub elapsed: Duration,
}

/// Time from `SpeechReceived` to entering `Delivering`. Faulted or
/// unfinished turns have no record.
pub fn record_latency(turn: &DialogueTurn) -> Option<LatencyRecord> {
    if turn.error_notice.is_some() {
        return None;
    }
    let analysis = turn.analysis.as_ref()?;
    let delivering_at = turn.delivering_at?;
    let path = match analysis.impact() {
        None => LatencyPath::NoRemediation,
        Some(Impact::Low) => LatencyPath::LowImpact,
        Some(Impact::High) => LatencyPath::HighImpact,
    };
    Some(LatencyRecord {
        path,
        elapsed: delivering_at.since(turn.utterance.received_at),
    })
}

pub const TRANSITION_LOG_HEADER: &str =
    "session_id\tturn_id\tfrom_state\tevent\tto_state\telapsed_ms";

/// One tab-separated line of the transition log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TransitionRecord {
    pub session_id: String,
    pub turn_id: TurnId,
    pub from: EngineState,
    pub event: String,
    pub to: EngineState,
    /// Milliseconds since the turn's `SpeechReceived`.
    pub elapsed_ms: u64,
}

impl fmt::Display for TransitionRecord {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}\t{}\t{}\t{}\t{}\t{}",
            self.session_id, self.turn_id, self.from, self.event, self.to, self.elapsed_ms
        )
    }
}

impl FromStr for TransitionRecord {
    type Err = String;

    fn from_str(line: &str) -> Result<Self, Self::Err> {
        let fields: Vec<&str> = line.split('\t').collect();
        let [session_id, turn_id, from, event, to, elapsed] = fields[..] else {
            return Err(format!(
                "expected 6 tab-separated fields, got {}",
                fields.len()
            ));
        };
        Ok(TransitionRecord {
            session_id: session_id.to_string(),
            turn_id: turn_id.parse().map_err(|e| format!("turn_id: {e}"))?,
            from: from.parse()?,
            event: event.to_string(),
            to: to.parse()?,
            elapsed_ms: elapsed.parse().map_err(|e| format!("elapsed_ms: {e}"))?,
        })
    }
}
