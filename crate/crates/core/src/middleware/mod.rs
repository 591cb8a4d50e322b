//! Two-way message layer between clients and the engine.
//!
//! [`Gateway`] is transport-independent: the WebSocket server in
//! [`server`] and the in-process [`LoopbackClient`] used for headless
//! replays both go through it.

pub mod hub;
pub mod protocol;
pub mod server;

use std::sync::Arc;

use tokio::sync::mpsc;

pub use hub::{ConnId, Hub, Outbound, Receipt};
pub use protocol::{decode, encode, Body, ProtocolError, WireMessage};

use crate::engine::Engine;
use crate::fsm::EngineState;
use crate::model::{Role, SessionState, TurnId};

/// A registered client connection as the gateway sees it.
#[derive(Debug)]
pub struct ClientLink {
    pub session_id: String,
    pub role: Role,
    pub conn_id: ConnId,
    last_seq: u64,
}

pub struct Gateway {
    hub: Arc<Hub>,
    engine: Engine,
}

impl Gateway {
    pub fn new(hub: Arc<Hub>, engine: Engine) -> Arc<Self> {
        Arc::new(Gateway { hub, engine })
    }

    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    pub fn engine(&self) -> &Engine {
        &self.engine
    }

    /// Registers a client from its `hello` frame.
    pub async fn connect(
        &self,
        hello: &WireMessage,
    ) -> Result<(ClientLink, mpsc::UnboundedReceiver<Outbound>), ProtocolError> {
        let Body::Hello { sync, .. } = hello.body else {
            return Err(ProtocolError::Body {
                kind: "hello",
                reason: format!("first frame must be hello, got {}", hello.body.kind()),
            });
        };
        let role = hello
            .identity
            .ok_or(ProtocolError::MissingIdentity("hello"))?;
        if hello.session_id.is_empty() {
            return Err(ProtocolError::Body {
                kind: "hello",
                reason: "empty session_id".into(),
            });
        }
        let session_id = hello.session_id.clone();
        let reg = self.hub.register(&session_id, role, sync);
        if sync {
            if let Some(state) = self.engine.snapshot(&session_id).await {
                for (turn, body) in role_view(&state, role) {
                    self.hub.send(&session_id, role, Some(turn), body);
                }
            }
        }
        if reg.session_ready {
            self.engine.session_ready(&session_id);
        }
        tracing::info!(session = %session_id, %role, conn = reg.conn_id, "client connected");
        Ok((
            ClientLink {
                session_id,
                role,
                conn_id: reg.conn_id,
                last_seq: hello.seq,
            },
            reg.rx,
        ))
    }

    fn reject(&self, link: &ClientLink, turn_id: Option<TurnId>, message: String) {
        tracing::warn!(session = %link.session_id, role = %link.role, %message, "client frame rejected");
        self.hub.send(
            &link.session_id,
            link.role,
            turn_id,
            Body::Error { message },
        );
    }

    /// Handles a frame received on an established connection.
    pub fn handle(&self, link: &mut ClientLink, msg: WireMessage) {
        if msg.session_id != link.session_id || msg.identity.is_some_and(|r| r != link.role) {
            self.reject(
                link,
                msg.turn_id,
                "frame does not match this connection's session or role".into(),
            );
            return;
        }
        if msg.seq <= link.last_seq {
            self.reject(
                link,
                msg.turn_id,
                format!("seq {} is not greater than {}", msg.seq, link.last_seq),
            );
            return;
        }
        link.last_seq = msg.seq;
        let ack = Body::Ack { ack_seq: msg.seq };
        match msg.body {
            Body::Speech { text, audio_ref } => {
                let payload = match audio_ref {
                    Some(r) if text.trim().is_empty() => r,
                    _ => text,
                };
                if payload.trim().is_empty() {
                    self.reject(link, None, "empty speech".into());
                    return;
                }
                self.hub.send(&link.session_id, link.role, None, ack);
                self.engine.speech(&link.session_id, link.role, payload);
            }
            Body::Choice { choice } => {
                let Some(turn_id) = msg.turn_id else {
                    self.reject(link, None, "choice without turn_id".into());
                    return;
                };
                self.hub
                    .send(&link.session_id, link.role, Some(turn_id), ack);
                self.engine
                    .choice(&link.session_id, link.role, turn_id, choice);
            }
            Body::Ack { .. } => {}
            other => self.reject(
                link,
                msg.turn_id,
                format!("unexpected {} frame from client", other.kind()),
            ),
        }
    }

    pub fn disconnect(&self, link: &ClientLink) {
        self.hub
            .unregister(&link.session_id, link.role, link.conn_id);
        tracing::info!(session = %link.session_id, role = %link.role, conn = link.conn_id, "client disconnected");
    }
}

/// Frames that rebuild one role's view of a session after a reconnect.
pub fn role_view(state: &SessionState, role: Role) -> Vec<(TurnId, Body)> {
    let mut out = Vec::new();
    let push_turn = |turn: &crate::model::DialogueTurn, out: &mut Vec<(TurnId, Body)>| {
        let id = turn.id();
        if turn.utterance.speaker == role {
            if !turn.utterance.source_text.is_empty() {
                out.push((
                    id,
                    Body::Transcript {
                        text: turn.utterance.source_text.clone(),
                    },
                ));
            }
            if let Some(t) = &turn.utterance.translated_text {
                out.push((id, Body::Translation { text: t.clone() }));
            }
        } else if let Some(text) = &turn.delivered_text {
            out.push((
                id,
                Body::Deliver {
                    text: text.clone(),
                    notice: turn.error_notice.clone(),
                },
            ));
        }
    };
    for turn in state.history() {
        push_turn(turn, &mut out);
    }
    if let Some(pending) = &state.pending {
        push_turn(pending, &mut out);
        if state.fsm_state == EngineState::AwaitingChoice && pending.utterance.speaker == role {
            if let Some(b) = &pending.bundle {
                out.push((
                    pending.id(),
                    Body::CorrectionPrompt {
                        translation: b.translation.clone(),
                        remediation: b.remediation.clone(),
                        justification: b.justification.clone(),
                    },
                ));
            }
        }
    }
    out
}

/// In-process client. Every frame still goes through encode/decode so the
/// loopback exercises the same wire format as a socket.
pub struct LoopbackClient {
    gateway: Arc<Gateway>,
    link: ClientLink,
    rx: mpsc::UnboundedReceiver<Outbound>,
    next_seq: u64,
}

fn over_the_wire(msg: &WireMessage) -> WireMessage {
    decode(encode(msg).as_bytes()).expect("canonical frames decode")
}

impl LoopbackClient {
    pub async fn connect(
        gateway: Arc<Gateway>,
        session_id: &str,
        role: Role,
    ) -> Result<Self, ProtocolError> {
        let hello = WireMessage {
            session_id: session_id.to_string(),
            turn_id: None,
            identity: Some(role),
            seq: 1,
            body: Body::hello(),
        };
        let (link, rx) = gateway.connect(&over_the_wire(&hello)).await?;
        Ok(LoopbackClient {
            gateway,
            link,
            rx,
            next_seq: 2,
        })
    }

    pub fn role(&self) -> Role {
        self.link.role
    }

    pub fn send(&mut self, turn_id: Option<TurnId>, body: Body) {
        let msg = WireMessage {
            session_id: self.link.session_id.clone(),
            turn_id,
            identity: Some(self.link.role),
            seq: self.next_seq,
            body,
        };
        self.next_seq += 1;
        self.gateway.handle(&mut self.link, over_the_wire(&msg));
    }

    /// Next frame, or `None` once the hub has closed this connection.
    pub async fn recv(&mut self) -> Option<WireMessage> {
        match self.rx.recv().await? {
            Outbound::Frame(m) => Some(over_the_wire(&m)),
            Outbound::Close => None,
        }
    }

    pub fn try_recv(&mut self) -> Option<WireMessage> {
        match self.rx.try_recv().ok()? {
            Outbound::Frame(m) => Some(over_the_wire(&m)),
            Outbound::Close => None,
        }
    }
}

impl Drop for LoopbackClient {
    fn drop(&mut self) {
        self.gateway.disconnect(&self.link);
    }
}
