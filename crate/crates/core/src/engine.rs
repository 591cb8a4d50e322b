//! Session runtime around the pure transition function.
//!
//! Each session owns one task that consumes its input queue strictly in
//! arrival order. Backend calls run as separate tasks and post their
//! results back onto the same queue, so the FSM only ever sees one event at
//! a time and sessions never share mutable state.

use std::collections::{BTreeSet, HashMap, VecDeque};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Arc;

use parking_lot::Mutex;
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};
use tokio::task::JoinHandle;
use tokio::time::Instant;

use crate::backends::{Backends, Task};
use crate::fsm::{
    advance, record_latency, Action, EchoStage, EngineEvent, EngineState, EventKind, LatencyRecord,
    TimeoutPolicy, TransitionRecord, TRANSITION_LOG_HEADER,
};
use crate::middleware::protocol::Body;
use crate::model::{
    DeliveryKind, DialogueTurn, LangPair, NormAnalysis, Role, SessionState, Timestamp, TurnId,
    Utterance,
};

/// Where the engine sends client-bound messages.
pub trait Outbox: Send + Sync {
    fn send(&self, session_id: &str, target: Role, turn_id: Option<TurnId>, body: Body);
}

impl Outbox for crate::middleware::Hub {
    fn send(&self, session_id: &str, target: Role, turn_id: Option<TurnId>, body: Body) {
        crate::middleware::Hub::send(self, session_id, target, turn_id, body);
    }
}

/// Receives the transition log and finished turns.
pub trait TranscriptSink: Send + Sync {
    fn transition(&self, record: &TransitionRecord);
    fn turn(&self, session_id: &str, turn: &DialogueTurn);
    fn flush(&self) -> io::Result<()>;
}

#[derive(Serialize)]
struct TurnLine<'a> {
    session_id: &'a str,
    turn: &'a DialogueTurn,
}

fn turn_line(session_id: &str, turn: &DialogueTurn) -> String {
    serde_json::to_string(&TurnLine { session_id, turn }).expect("turns serialise")
}

/// In-memory transcript: the transition log (with header) and JSON lines
/// of finished turns.
#[derive(Debug, Default)]
pub struct MemoryTranscript {
    log: Mutex<String>,
    turns: Mutex<String>,
}

impl MemoryTranscript {
    pub fn new() -> Self {
        MemoryTranscript {
            log: Mutex::new(format!("{TRANSITION_LOG_HEADER}\n")),
            turns: Mutex::new(String::new()),
        }
    }

    pub fn transition_log(&self) -> String {
        self.log.lock().clone()
    }

    pub fn turns_jsonl(&self) -> String {
        self.turns.lock().clone()
    }
}

impl TranscriptSink for MemoryTranscript {
    fn transition(&self, record: &TransitionRecord) {
        let mut log = self.log.lock();
        log.push_str(&record.to_string());
        log.push('\n');
    }

    fn turn(&self, session_id: &str, turn: &DialogueTurn) {
        let mut turns = self.turns.lock();
        turns.push_str(&turn_line(session_id, turn));
        turns.push('\n');
    }

    fn flush(&self) -> io::Result<()> {
        Ok(())
    }
}

/// Drops everything; for services run without a transcript directory.
pub struct DiscardTranscript;

impl TranscriptSink for DiscardTranscript {
    fn transition(&self, _: &TransitionRecord) {}

    fn turn(&self, _: &str, _: &DialogueTurn) {}

    fn flush(&self) -> io::Result<()> {
        Ok(())
    }
}

/// `transitions.tsv` and `turns.jsonl` in a directory, appended to.
pub struct FileTranscript {
    log: Mutex<io::BufWriter<std::fs::File>>,
    turns: Mutex<io::BufWriter<std::fs::File>>,
}

impl FileTranscript {
    pub fn create(dir: &Path) -> io::Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| {
            std::fs::OpenOptions::new()
                .create(true)
                .append(true)
                .open(dir.join(name))
        };
        let log_file = open("transitions.tsv")?;
        let fresh = log_file.metadata()?.len() == 0;
        let mut log = io::BufWriter::new(log_file);
        if fresh {
            writeln!(log, "{TRANSITION_LOG_HEADER}")?;
        }
        Ok(FileTranscript {
            log: Mutex::new(log),
            turns: Mutex::new(io::BufWriter::new(open("turns.jsonl")?)),
        })
    }
}

impl TranscriptSink for FileTranscript {
    fn transition(&self, record: &TransitionRecord) {
        if let Err(e) = writeln!(self.log.lock(), "{record}") {
            tracing::error!(error = %e, "writing transition log");
        }
    }

    fn turn(&self, session_id: &str, turn: &DialogueTurn) {
        if let Err(e) = writeln!(self.turns.lock(), "{}", turn_line(session_id, turn)) {
            tracing::error!(error = %e, "writing turn transcript");
        }
    }

    fn flush(&self) -> io::Result<()> {
        self.log.lock().flush()?;
        self.turns.lock().flush()
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub policy: TimeoutPolicy,
    pub lang_pair: LangPair,
    /// Preceding utterances given to classifiers and generators.
    pub context_turns: usize,
}

impl Default for EngineConfig {
    fn default() -> Self {
        EngineConfig {
            policy: TimeoutPolicy::default(),
            lang_pair: LangPair::default(),
            context_turns: 2,
        }
    }
}

enum Input {
    Speech {
        speaker: Role,
        payload: String,
    },
    Choice {
        from: Role,
        turn_id: TurnId,
        choice: DeliveryKind,
    },
    Event(EngineEvent),
    Snapshot(oneshot::Sender<SessionState>),
    WhenIdle(oneshot::Sender<()>),
    Shutdown,
}

struct SessionHandle {
    tx: mpsc::UnboundedSender<Input>,
    task: JoinHandle<()>,
}

struct Shared {
    backends: Arc<Backends>,
    config: EngineConfig,
    outbox: Arc<dyn Outbox>,
    sink: Arc<dyn TranscriptSink>,
    origin: Instant,
    sessions: Mutex<HashMap<String, SessionHandle>>,
    ready: Mutex<BTreeSet<String>>,
}

impl Shared {
    fn now(&self) -> Timestamp {
        Timestamp(self.origin.elapsed().as_millis() as u64)
    }
}

/// Cheap to clone; all clones drive the same sessions.
#[derive(Clone)]
pub struct Engine {
    shared: Arc<Shared>,
}

impl Engine {
    /// Must be called inside a tokio runtime; timestamps count from here.
    pub fn new(
        backends: Arc<Backends>,
        config: EngineConfig,
        outbox: Arc<dyn Outbox>,
        sink: Arc<dyn TranscriptSink>,
    ) -> Self {
        Engine {
            shared: Arc::new(Shared {
                backends,
                config,
                outbox,
                sink,
                origin: Instant::now(),
                sessions: Mutex::new(HashMap::new()),
                ready: Mutex::new(BTreeSet::new()),
            }),
        }
    }

    pub fn backends(&self) -> &Backends {
        &self.shared.backends
    }

    fn input(&self, session_id: &str, input: Input) {
        let mut sessions = self.shared.sessions.lock();
        let handle = sessions.entry(session_id.to_string()).or_insert_with(|| {
            let (tx, rx) = mpsc::unbounded_channel();
            let actor = SessionActor::new(self.shared.clone(), session_id, tx.clone());
            SessionHandle {
                tx,
                task: tokio::spawn(actor.run(rx)),
            }
        });
        if handle.tx.send(input).is_err() {
            tracing::warn!(session = session_id, "session has shut down; input dropped");
        }
    }

    /// Both roles of the session are connected.
    pub fn session_ready(&self, session_id: &str) {
        if self.shared.ready.lock().insert(session_id.to_string()) {
            tracing::info!(session = session_id, "session ready");
        }
    }

    pub fn is_session_ready(&self, session_id: &str) -> bool {
        self.shared.ready.lock().contains(session_id)
    }

    /// Queues a press-to-talk utterance. Speech arriving while a turn is in
    /// flight waits for it to finish.
    pub fn speech(&self, session_id: &str, speaker: Role, payload: impl Into<String>) {
        self.input(
            session_id,
            Input::Speech {
                speaker,
                payload: payload.into(),
            },
        );
    }

    pub fn choice(&self, session_id: &str, from: Role, turn_id: TurnId, choice: DeliveryKind) {
        self.input(
            session_id,
            Input::Choice {
                from,
                turn_id,
                choice,
            },
        );
    }

    pub async fn snapshot(&self, session_id: &str) -> Option<SessionState> {
        let (tx, rx) = oneshot::channel();
        self.input(session_id, Input::Snapshot(tx));
        rx.await.ok()
    }

    /// Resolves once the session is idle with no queued speech.
    pub async fn when_idle(&self, session_id: &str) {
        let (tx, rx) = oneshot::channel();
        self.input(session_id, Input::WhenIdle(tx));
        let _ = rx.await;
    }

    /// Stops every session and flushes the transcript.
    pub async fn shutdown(&self) -> io::Result<()> {
        let handles: Vec<SessionHandle> = self
            .shared
            .sessions
            .lock()
            .drain()
            .map(|(_, h)| h)
            .collect();
        for h in &handles {
            let _ = h.tx.send(Input::Shutdown);
        }
        for h in handles {
            let _ = h.task.await;
        }
        self.shared.sink.flush()
    }
}

struct SessionActor {
    shared: Arc<Shared>,
    state: SessionState,
    tx: mpsc::UnboundedSender<Input>,
    queued: VecDeque<(Role, String)>,
    speech_payload: String,
    next_turn: u64,
    timer: Option<JoinHandle<()>>,
    idle_waiters: Vec<oneshot::Sender<()>>,
}

impl SessionActor {
    fn new(shared: Arc<Shared>, session_id: &str, tx: mpsc::UnboundedSender<Input>) -> Self {
        let lang_pair = shared.config.lang_pair.clone();
        SessionActor {
            shared,
            state: SessionState::new(session_id, lang_pair),
            tx,
            queued: VecDeque::new(),
            speech_payload: String::new(),
            next_turn: 1,
            timer: None,
            idle_waiters: Vec::new(),
        }
    }

    fn session_id(&self) -> &str {
        &self.state.session_id
    }

    async fn run(mut self, mut rx: mpsc::UnboundedReceiver<Input>) {
        while let Some(input) = rx.recv().await {
            match input {
                Input::Speech { speaker, payload } => {
                    self.queued.push_back((speaker, payload));
                }
                Input::Choice {
                    from,
                    turn_id,
                    choice,
                } => self.on_choice(from, turn_id, choice),
                Input::Event(event) => {
                    self.apply(event);
                }
                Input::Snapshot(reply) => {
                    let _ = reply.send(self.state.clone());
                }
                Input::WhenIdle(reply) => self.idle_waiters.push(reply),
                Input::Shutdown => break,
            }
            self.start_next_turn();
            if self.is_idle() {
                for w in self.idle_waiters.drain(..) {
                    let _ = w.send(());
                }
            }
        }
        if let Some(timer) = self.timer.take() {
            timer.abort();
        }
    }

    fn is_idle(&self) -> bool {
        self.state.fsm_state == EngineState::Idle && self.queued.is_empty()
    }

    fn start_next_turn(&mut self) {
        if self.state.fsm_state != EngineState::Idle || self.state.pending.is_some() {
            return;
        }
        let Some((speaker, payload)) = self.queued.pop_front() else {
            return;
        };
        let id = TurnId(self.next_turn);
        self.next_turn += 1;
        let pair = &self.state.lang_pair;
        let utterance = Utterance {
            id,
            speaker,
            source_text: String::new(),
            source_lang: pair.of(speaker).clone(),
            translated_text: None,
            target_lang: pair.of(speaker.peer()).clone(),
            received_at: self.shared.now(),
        };
        self.state.pending = Some(DialogueTurn::new(utterance));
        self.speech_payload = payload;
        self.apply(self.event(id, EventKind::SpeechReceived));
    }

    fn event(&self, turn_id: TurnId, kind: EventKind) -> EngineEvent {
        EngineEvent {
            session_id: self.session_id().to_string(),
            turn_id,
            kind,
        }
    }

    fn on_choice(&mut self, from: Role, turn_id: TurnId, choice: DeliveryKind) {
        let sender = self.state.pending.as_ref().map(|t| t.utterance.speaker);
        if sender.is_some_and(|s| s != from) {
            self.shared.outbox.send(
                self.session_id(),
                from,
                Some(turn_id),
                Body::Error {
                    message: "only the speaker of a turn can choose its delivery".into(),
                },
            );
            return;
        }
        let event = self.event(turn_id, EventKind::ChoiceReceived { choice });
        if !self.apply(event) {
            self.shared.outbox.send(
                self.session_id(),
                from,
                Some(turn_id),
                Body::Error {
                    message: format!("choice for turn {turn_id} is stale or already resolved"),
                },
            );
        }
    }

    /// Feeds one event to the FSM and runs the resulting actions. Returns
    /// false if the event was rejected.
    fn apply(&mut self, event: EngineEvent) -> bool {
        let from = self.state.fsm_state;
        let now = self.shared.now();
        let policy = self.shared.config.policy;
        let Some(turn) = self.state.pending.as_mut() else {
            tracing::debug!(session = %event.session_id, turn = %event.turn_id, event = %event.kind.label(), "no turn in flight; event dropped");
            return false;
        };
        let (to, actions) = match advance(from, &event, turn, &policy, now) {
            Ok(out) => out,
            Err(e) => {
                tracing::warn!(session = %event.session_id, turn = %event.turn_id, error = %e, "event rejected");
                return false;
            }
        };
        let received_at = turn.utterance.received_at;
        self.state.fsm_state = to;
        self.shared.sink.transition(&TransitionRecord {
            session_id: event.session_id.clone(),
            turn_id: event.turn_id,
            from,
            event: event.kind.label(),
            to,
            elapsed_ms: now.since(received_at).as_millis() as u64,
        });
        for action in actions {
            self.execute(event.turn_id, action);
        }
        match to {
            EngineState::Delivering | EngineState::Faulted => {
                let _ = self.tx.send(Input::Event(
                    self.event(event.turn_id, EventKind::DeliveryAcked),
                ));
            }
            EngineState::Idle => {
                // Faulted before anything could be delivered: logged, not kept.
                if let Some(turn) = self.state.pending.take() {
                    self.shared.sink.turn(self.session_id(), &turn);
                }
            }
            _ => {}
        }
        true
    }

    fn post_result<T: Send + 'static>(
        &self,
        turn_id: TurnId,
        fut: impl std::future::Future<Output = Result<T, (Task, String)>> + Send + 'static,
        on_ok: impl FnOnce(T) -> EventKind + Send + 'static,
    ) {
        let tx = self.tx.clone();
        let session_id = self.session_id().to_string();
        tokio::spawn(async move {
            let kind = match fut.await {
                Ok(v) => on_ok(v),
                Err((task, message)) => EventKind::BackendError { task, message },
            };
            let _ = tx.send(Input::Event(EngineEvent {
                session_id,
                turn_id,
                kind,
            }));
        });
    }

    fn execute(&mut self, turn_id: TurnId, action: Action) {
        let session = self.state.session_id.clone();
        let outbox = &self.shared.outbox;
        let n = self.shared.config.context_turns;
        match action {
            Action::InvokeAsr => {
                let backends = self.shared.backends.clone();
                let current = self.current();
                let payload = std::mem::take(&mut self.speech_payload);
                self.post_result(
                    turn_id,
                    async move {
                        backends
                            .transcribe(&current, &payload)
                            .await
                            .map_err(|e| (Task::Asr, e.to_string()))
                    },
                    |r| EventKind::TranscriptReady { text: r.payload },
                );
            }
            Action::InvokeMt => {
                let backends = self.shared.backends.clone();
                let current = self.current();
                self.post_result(
                    turn_id,
                    async move {
                        backends
                            .translate(&current)
                            .await
                            .map_err(|e| (Task::Mt, e.to_string()))
                    },
                    |r| EventKind::TranslationReady { text: r.payload },
                );
            }
            Action::InvokeAnalysis => {
                let backends = self.shared.backends.clone();
                let (context, current) = self.context(n);
                self.post_result(
                    turn_id,
                    async move {
                        let category = backends
                            .classify_category(&context, &current)
                            .await
                            .map_err(|e| (Task::CategoryCls, e.to_string()))?
                            .payload
                            .0;
                        let violated = backends
                            .detect_violation(&context, &current, &category)
                            .await
                            .map_err(|e| (Task::ViolationCls, e.to_string()))?
                            .payload
                            .0;
                        Ok((category, violated))
                    },
                    |(category, violated)| EventKind::AnalysisReady { category, violated },
                );
            }
            Action::InvokeGeneration { category } => {
                let backends = self.shared.backends.clone();
                let window = self.state.context_window(n);
                let (context, current) = self.context(n);
                self.post_result(
                    turn_id,
                    async move {
                        let (impact, bundle) = backends
                            .run_generation(&window, &context, &current, &category)
                            .await
                            .map_err(|(task, e)| (task, e.to_string()))?;
                        Ok((NormAnalysis::violating(category, impact), bundle))
                    },
                    |(analysis, bundle)| EventKind::GenerationReady { analysis, bundle },
                );
            }
            Action::Echo {
                target,
                stage,
                text,
            } => {
                let body = match stage {
                    EchoStage::Transcript => Body::Transcript { text },
                    EchoStage::Translation => Body::Translation { text },
                };
                outbox.send(&session, target, Some(turn_id), body);
            }
            Action::PromptSender {
                target,
                translation,
                remediation,
                justification,
            } => outbox.send(
                &session,
                target,
                Some(turn_id),
                Body::CorrectionPrompt {
                    translation,
                    remediation,
                    justification,
                },
            ),
            Action::StartChoiceTimer(after) => {
                let tx = self.tx.clone();
                let event = self.event(turn_id, EventKind::ChoiceTimeout);
                if let Some(old) = self.timer.replace(tokio::spawn(async move {
                    tokio::time::sleep(after).await;
                    let _ = tx.send(Input::Event(event));
                })) {
                    old.abort();
                }
            }
            Action::CancelChoiceTimer => {
                if let Some(timer) = self.timer.take() {
                    timer.abort();
                }
            }
            Action::Deliver {
                target,
                kind: _,
                text,
                notice,
            } => outbox.send(
                &session,
                target,
                Some(turn_id),
                Body::Deliver { text, notice },
            ),
            Action::NotifyError { target, message } => {
                outbox.send(&session, target, Some(turn_id), Body::Error { message })
            }
            Action::AppendHistory => {
                if let Some(turn) = self.state.pending.clone() {
                    if let Some(latency) = record_latency(&turn) {
                        tracing::debug!(session = %session, turn = %turn_id, path = %latency.path, ms = latency.elapsed.as_millis() as u64, "turn delivered");
                    }
                    self.shared.sink.turn(&session, &turn);
                    if let Err(e) = self.state.append_turn(turn) {
                        tracing::error!(session = %session, error = %e, "history append failed");
                    }
                }
            }
        }
    }

    fn current(&self) -> Utterance {
        self.state
            .pending
            .as_ref()
            .expect("actions run with a turn in flight")
            .utterance
            .clone()
    }

    /// Up to `n` preceding utterances and the current one.
    fn context(&self, n: usize) -> (Vec<Utterance>, Utterance) {
        let mut window = self.state.context_window(n);
        let current = window.pop().expect("pending turn is in the window");
        (window, current)
    }
}

/// Latency records for every delivered turn in a history.
pub fn latency_records(history: &[DialogueTurn]) -> Vec<LatencyRecord> {
    history.iter().filter_map(record_latency).collect()
}
