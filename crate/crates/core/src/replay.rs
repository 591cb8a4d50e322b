//! Scripted dialogues and their headless replay through the loopback
//! middleware.
//!
//! Script format, one step per line:
//!
//! ```text
//! # comment
//! @session demo
//! @lang SME en
//! @lang FLE zh
//! SME<TAB>Hurry up and sign the contract.<TAB>choice=remediation<TAB>delay=asr:300,mt:400
//! FLE<TAB>好的。
//! ```
//!
//! `choice` is `translation`, `remediation` or `timeout` and must be given
//! exactly for the turns that raise a correction prompt. `delay` adds
//! per-stage latency (milliseconds) for that turn only.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use serde::Serialize;
use thiserror::Error;

use crate::backends::shaping::DelaySchedule;
use crate::backends::Task;
use crate::config::{AppConfig, ConfigError};
use crate::engine::{latency_records, Engine, MemoryTranscript};
use crate::eval::{choice_stats, latency_means, ChoiceStats};
use crate::fsm::{LatencyPath, LatencyRecord};
use crate::middleware::{Body, Gateway, Hub, LoopbackClient};
use crate::model::{DeliveryKind, DialogueTurn, LangPair, LangTag, Role, TurnId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum ScriptedChoice {
    Translation,
    Remediation,
    Timeout,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Step {
    pub line: usize,
    pub speaker: Role,
    pub text: String,
    pub choice: Option<ScriptedChoice>,
    pub delays: Vec<(Task, Duration)>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptedDialogue {
    pub session_id: String,
    pub lang_pair: Option<LangPair>,
    pub steps: Vec<Step>,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("script line {line}: {reason}")]
pub struct ScriptError {
    pub line: usize,
    pub reason: String,
}

impl ScriptedDialogue {
    pub fn parse(text: &str) -> Result<Self, ScriptError> {
        let mut session_id = "replay".to_string();
        let mut langs: BTreeMap<Role, LangTag> = BTreeMap::new();
        let mut steps = Vec::new();
        for (i, raw) in text.lines().enumerate() {
            let line = i + 1;
            let err = |reason: String| ScriptError { line, reason };
            let l = raw.trim_end_matches('\r');
            if l.trim().is_empty() || l.trim_start().starts_with('#') {
                continue;
            }
            if let Some(directive) = l.strip_prefix('@') {
                let parts: Vec<&str> = directive.split_whitespace().collect();
                match parts.as_slice() {
                    ["session", id] => session_id = id.to_string(),
                    ["lang", role, tag] => {
                        let role: Role = role
                            .parse()
                            .map_err(|_| err(format!("unknown role {role:?}")))?;
                        langs.insert(role, LangTag::new(*tag));
                    }
                    _ => return Err(err(format!("unknown directive @{directive}"))),
                }
                continue;
            }
            let mut fields = l.split('\t');
            let speaker = fields.next().unwrap_or_default();
            let speaker: Role = speaker
                .parse()
                .map_err(|_| err(format!("unknown speaker {speaker:?}")))?;
            let text = fields.next().unwrap_or_default().trim().to_string();
            if text.is_empty() {
                return Err(err("empty utterance".into()));
            }
            let mut step = Step {
                line,
                speaker,
                text,
                choice: None,
                delays: Vec::new(),
            };
            for field in fields {
                let (key, value) = field
                    .split_once('=')
                    .ok_or_else(|| err(format!("expected key=value, got {field:?}")))?;
                match key.trim() {
                    "choice" => {
                        step.choice = Some(match value.trim() {
                            "translation" => ScriptedChoice::Translation,
                            "remediation" => ScriptedChoice::Remediation,
                            "timeout" => ScriptedChoice::Timeout,
                            other => return Err(err(format!("unknown choice {other:?}"))),
                        })
                    }
                    "delay" => {
                        for item in value.split(',').filter(|s| !s.trim().is_empty()) {
                            let (task, ms) = item
                                .split_once(':')
                                .ok_or_else(|| err(format!("expected task:ms, got {item:?}")))?;
                            let task: Task = task.trim().parse().map_err(|e: String| err(e))?;
                            let ms: u64 = ms
                                .trim()
                                .parse()
                                .map_err(|_| err(format!("bad delay {ms:?}")))?;
                            step.delays.push((task, Duration::from_millis(ms)));
                        }
                    }
                    other => return Err(err(format!("unknown field {other:?}"))),
                }
            }
            steps.push(step);
        }
        let lang_pair = match (langs.get(&Role::Sme), langs.get(&Role::Fle)) {
            (None, None) => None,
            (sme, fle) => {
                let default = LangPair::default();
                Some(LangPair {
                    sme: sme.cloned().unwrap_or(default.sme),
                    fle: fle.cloned().unwrap_or(default.fle),
                })
            }
        };
        Ok(ScriptedDialogue {
            session_id,
            lang_pair,
            steps,
        })
    }
}

#[derive(Debug, Error)]
pub enum ReplayError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("turn {turn} (script line {line}): {reason}")]
    Mismatch {
        turn: TurnId,
        line: usize,
        reason: String,
    },
    #[error("turn {turn} (script line {line}) did not complete")]
    Stalled { turn: TurnId, line: usize },
    #[error("middleware: {0}")]
    Protocol(String),
    #[error("runtime: {0}")]
    Runtime(String),
}

#[derive(Debug, Clone, Serialize)]
pub struct ReplayOutcome {
    /// Tab-separated transition log, header included.
    pub transcript: String,
    /// One JSON object per finished turn.
    pub turns: String,
    #[serde(skip)]
    pub history: Vec<DialogueTurn>,
    pub choices: ChoiceStats,
    #[serde(skip)]
    pub latency_records: Vec<LatencyRecord>,
    #[serde(skip)]
    pub latency: BTreeMap<LatencyPath, Duration>,
    /// Per task: (calls, answered by backup).
    #[serde(skip)]
    pub backend_usage: BTreeMap<Task, (u64, u64)>,
}

/// Virtual-time budget for one step; covers injected hangs and the choice timeout.
const STEP_BUDGET: Duration = Duration::from_secs(48 * 3600);

/// Drives `script` through a fresh engine and loopback clients. Run inside
/// a paused-clock runtime for deterministic timings (see [`replay_blocking`]).
pub async fn replay(
    config: &AppConfig,
    script: &ScriptedDialogue,
) -> Result<ReplayOutcome, ReplayError> {
    let schedule = DelaySchedule::default();
    for (i, step) in script.steps.iter().enumerate() {
        for (task, delay) in &step.delays {
            schedule.set(i as u64 + 1, *task, *delay);
        }
    }
    let backends = Arc::new(config.build_backends(Some(&schedule))?);
    let mut engine_config = config.engine_config();
    if let Some(pair) = &script.lang_pair {
        engine_config.lang_pair = pair.clone();
    }
    let hub = Arc::new(Hub::new(config.offline_buffer));
    let sink = Arc::new(MemoryTranscript::new());
    let engine = Engine::new(backends.clone(), engine_config, hub.clone(), sink.clone());
    let gateway = Gateway::new(hub, engine.clone());
    let session = script.session_id.as_str();
    let connect = |role| {
        let gateway = gateway.clone();
        async move {
            LoopbackClient::connect(gateway, session, role)
                .await
                .map_err(|e| ReplayError::Protocol(e.to_string()))
        }
    };
    let mut sme = connect(Role::Sme).await?;
    let mut fle = connect(Role::Fle).await?;

    for (i, step) in script.steps.iter().enumerate() {
        let turn = TurnId(i as u64 + 1);
        let (sender, receiver) = match step.speaker {
            Role::Sme => (&mut sme, &mut fle),
            Role::Fle => (&mut fle, &mut sme),
        };
        let outcome =
            tokio::time::timeout(STEP_BUDGET, run_step(sender, receiver, step, turn)).await;
        match outcome {
            Ok(result) => result?,
            Err(_) => {
                return Err(ReplayError::Stalled {
                    turn,
                    line: step.line,
                })
            }
        }
        engine.when_idle(session).await;
    }
    engine.when_idle(session).await;
    let state = engine
        .snapshot(session)
        .await
        .ok_or_else(|| ReplayError::Runtime("session vanished".into()))?;
    drop((sme, fle));
    engine
        .shutdown()
        .await
        .map_err(|e| ReplayError::Runtime(e.to_string()))?;

    let history = state.history().to_vec();
    let records = latency_records(&history);
    let backend_usage = Task::ALL
        .iter()
        .map(|&t| {
            let pair = backends.pair(t);
            (t, (pair.calls(), pair.backup_used()))
        })
        .collect();
    Ok(ReplayOutcome {
        transcript: sink.transition_log(),
        turns: sink.turns_jsonl(),
        choices: choice_stats(&history),
        latency: latency_means(&records),
        latency_records: records,
        history,
        backend_usage,
    })
}

async fn run_step(
    sender: &mut LoopbackClient,
    receiver: &mut LoopbackClient,
    step: &Step,
    turn: TurnId,
) -> Result<(), ReplayError> {
    let mismatch = |reason: &str| ReplayError::Mismatch {
        turn,
        line: step.line,
        reason: reason.to_string(),
    };
    sender.send(
        None,
        Body::Speech {
            text: step.text.clone(),
            audio_ref: None,
        },
    );
    let mut prompted = false;
    loop {
        tokio::select! {
            biased;
            msg = receiver.recv() => {
                let msg = msg.ok_or_else(|| ReplayError::Protocol("receiver connection closed".into()))?;
                if msg.turn_id == Some(turn) && matches!(msg.body, Body::Deliver { .. }) {
                    break;
                }
            }
            msg = sender.recv() => {
                let msg = msg.ok_or_else(|| ReplayError::Protocol("sender connection closed".into()))?;
                if msg.turn_id != Some(turn) {
                    continue;
                }
                match msg.body {
                    Body::CorrectionPrompt { .. } => {
                        prompted = true;
                        let kind = match step.choice {
                            Some(ScriptedChoice::Translation) => Some(DeliveryKind::Translation),
                            Some(ScriptedChoice::Remediation) => Some(DeliveryKind::Remediation),
                            Some(ScriptedChoice::Timeout) => None,
                            None => return Err(mismatch("correction prompt arose but the script has no choice")),
                        };
                        if let Some(choice) = kind {
                            sender.send(Some(turn), Body::Choice { choice });
                        }
                    }
                    // Faulted turn: the receiver gets the raw translation, if
                    // there was one, in the same engine step.
                    Body::Error { .. } => {
                        while let Some(m) = receiver.try_recv() {
                            if m.turn_id == Some(turn) {
                                break;
                            }
                        }
                        break;
                    }
                    _ => {}
                }
            }
        }
    }
    if step.choice.is_some() && !prompted {
        return Err(mismatch(
            "script has a choice but no correction prompt arose",
        ));
    }
    Ok(())
}

/// Runs [`replay`] on a private current-thread runtime. With only local
/// backends the clock is paused, so stub delays cost no wall time and the
/// timings in the transcript are exact.
pub fn replay_blocking(
    config: &AppConfig,
    script: &ScriptedDialogue,
) -> Result<ReplayOutcome, ReplayError> {
    let mut builder = tokio::runtime::Builder::new_current_thread();
    builder.enable_all();
    if !config.uses_remote() {
        builder.start_paused(true);
    }
    let rt = builder
        .build()
        .map_err(|e| ReplayError::Runtime(e.to_string()))?;
    rt.block_on(replay(config, script))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_steps_and_directives() {
        let s = ScriptedDialogue::parse(
            "# demo\n@session s9\n@lang SME en-US\n\nSME\tHurry up.\tchoice=remediation\tdelay=asr:300, mt:400\nFLE\t好的\n",
        )
        .unwrap();
        assert_eq!(s.session_id, "s9");
        assert_eq!(s.lang_pair.unwrap().sme, LangTag::new("en-US"));
        assert_eq!(s.steps.len(), 2);
        assert_eq!(s.steps[0].choice, Some(ScriptedChoice::Remediation));
        assert_eq!(
            s.steps[0].delays,
            vec![
                (Task::Asr, Duration::from_millis(300)),
                (Task::Mt, Duration::from_millis(400))
            ]
        );
        assert_eq!(s.steps[1].line, 6);
    }

    #[test]
    fn reports_line_numbers() {
        for (text, line) in [
            ("SME\thi\nXYZ\thello\n", 2),
            ("\nSME\t\n", 2),
            ("SME\thi\tchoice=maybe\n", 1),
            ("SME\thi\tdelay=gpu:5\n", 1),
            ("@speed 2\n", 1),
        ] {
            assert_eq!(
                ScriptedDialogue::parse(text).unwrap_err().line,
                line,
                "{text:?}"
            );
        }
    }

    #[test]
    fn empty_script() {
        let s = ScriptedDialogue::parse("# nothing\n").unwrap();
        assert!(s.steps.is_empty());
    }
}
