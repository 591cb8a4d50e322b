//! Wire protocol v1: one canonical JSON object per WebSocket text frame.
//!
//! ```json
//! {"type":"choice","session_id":"s1","turn_id":"4","identity":"SME","seq":9,"body":{"choice":"remediation"}}
//! ```
//!
//! Top-level fields always appear in the order `type, session_id, turn_id,
//! identity, seq, body`; absent optional fields are omitted.

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{DeliveryKind, Role, TurnId};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ProtocolError {
    #[error("malformed frame: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("{kind} body: {reason}")]
    Body { kind: &'static str, reason: String },
    #[error("{0} message must carry an identity")]
    MissingIdentity(&'static str),
    #[error("unsupported protocol version {0}")]
    Version(u32),
    #[error("turn_id {0:?} is not a turn number")]
    TurnId(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub enum Body {
    Hello {
        v: u32,
        /// Ask the server to replay this role's view of the session.
        #[serde(default, skip_serializing_if = "std::ops::Not::not")]
        sync: bool,
    },
    Speech {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        audio_ref: Option<String>,
    },
    Transcript {
        text: String,
    },
    Translation {
        text: String,
    },
    CorrectionPrompt {
        translation: String,
        remediation: String,
        justification: String,
    },
    Choice {
        choice: DeliveryKind,
    },
    Deliver {
        text: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        notice: Option<String>,
    },
    Error {
        message: String,
    },
    Ack {
        ack_seq: u64,
    },
}

impl Body {
    pub fn kind(&self) -> &'static str {
        match self {
            Body::Hello { .. } => "hello",
            Body::Speech { .. } => "speech",
            Body::Transcript { .. } => "transcript",
            Body::Translation { .. } => "translation",
            Body::CorrectionPrompt { .. } => "correction_prompt",
            Body::Choice { .. } => "choice",
            Body::Deliver { .. } => "deliver",
            Body::Error { .. } => "error",
            Body::Ack { .. } => "ack",
        }
    }

    pub fn hello() -> Self {
        Body::Hello {
            v: PROTOCOL_VERSION,
            sync: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WireMessage {
    pub session_id: String,
    pub turn_id: Option<TurnId>,
    pub identity: Option<Role>,
    pub seq: u64,
    pub body: Body,
}

// Body payloads as they appear under "body". Separate from `Body` so the
// variant tag lives in the top-level "type" field.
#[derive(Serialize, Deserialize)]
struct HelloBody {
    v: u32,
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    sync: bool,
}
#[derive(Serialize, Deserialize)]
struct SpeechBody {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    audio_ref: Option<String>,
}
#[derive(Serialize, Deserialize)]
struct TextBody {
    text: String,
}
#[derive(Serialize, Deserialize)]
struct PromptBody {
    translation: String,
    remediation: String,
    justification: String,
}
#[derive(Serialize, Deserialize)]
struct ChoiceBody {
    choice: DeliveryKind,
}
#[derive(Serialize, Deserialize)]
struct DeliverBody {
    text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    notice: Option<String>,
}
#[derive(Serialize, Deserialize)]
struct ErrorBody {
    message: String,
}
#[derive(Serialize, Deserialize)]
struct AckBody {
    ack_seq: u64,
}

#[derive(Serialize)]
struct FrameOut<'a> {
    #[serde(rename = "type")]
    kind: &'static str,
    session_id: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    turn_id: Option<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    identity: Option<Role>,
    seq: u64,
    body: serde_json::Value,
}

#[derive(Deserialize)]
struct FrameIn {
    #[serde(rename = "type")]
    kind: String,
    session_id: String,
    #[serde(default)]
    turn_id: Option<String>,
    #[serde(default)]
    identity: Option<Role>,
    seq: u64,
    #[serde(default = "empty_object")]
    body: serde_json::Value,
}

fn empty_object() -> serde_json::Value {
    serde_json::Value::Object(Default::default())
}

fn to_value<T: Serialize>(body: T) -> serde_json::Value {
    serde_json::to_value(body).expect("body types always serialise")
}

fn body_value(body: &Body) -> serde_json::Value {
    match body.clone() {
        Body::Hello { v, sync } => to_value(HelloBody { v, sync }),
        Body::Speech { text, audio_ref } => to_value(SpeechBody { text, audio_ref }),
        Body::Transcript { text } | Body::Translation { text } => to_value(TextBody { text }),
        Body::CorrectionPrompt {
            translation,
            remediation,
            justification,
        } => to_value(PromptBody {
            translation,
            remediation,
            justification,
        }),
        Body::Choice { choice } => to_value(ChoiceBody { choice }),
        Body::Deliver { text, notice } => to_value(DeliverBody { text, notice }),
        Body::Error { message } => to_value(ErrorBody { message }),
        Body::Ack { ack_seq } => to_value(AckBody { ack_seq }),
    }
}

/// Serialises to the canonical frame text.
pub fn encode(msg: &WireMessage) -> String {
    let frame = FrameOut {
        kind: msg.body.kind(),
        session_id: &msg.session_id,
        turn_id: msg.turn_id.map(|t| t.to_string()),
        identity: msg.identity,
        seq: msg.seq,
        body: body_value(&msg.body),
    };
    serde_json::to_string(&frame).expect("frames always serialise")
}

fn parse_body<T: DeserializeOwned>(
    kind: &'static str,
    value: serde_json::Value,
) -> Result<T, ProtocolError> {
    serde_json::from_value(value).map_err(|e| ProtocolError::Body {
        kind,
        reason: e.to_string(),
    })
}

/// Parses and validates a frame. Never panics on arbitrary input.
pub fn decode(bytes: &[u8]) -> Result<WireMessage, ProtocolError> {
    let frame: FrameIn =
        serde_json::from_slice(bytes).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let body = match frame.kind.as_str() {
        "hello" => {
            let b: HelloBody = parse_body("hello", frame.body)?;
            if b.v != PROTOCOL_VERSION {
                return Err(ProtocolError::Version(b.v));
            }
            Body::Hello {
                v: b.v,
                sync: b.sync,
            }
        }
        "speech" => {
            let b: SpeechBody = parse_body("speech", frame.body)?;
            Body::Speech {
                text: b.text,
                audio_ref: b.audio_ref,
            }
        }
        "transcript" => Body::Transcript {
            text: parse_body::<TextBody>("transcript", frame.body)?.text,
        },
        "translation" => Body::Translation {
            text: parse_body::<TextBody>("translation", frame.body)?.text,
        },
        "correction_prompt" => {
            let b: PromptBody = parse_body("correction_prompt", frame.body)?;
            Body::CorrectionPrompt {
                translation: b.translation,
                remediation: b.remediation,
                justification: b.justification,
            }
        }
        "choice" => Body::Choice {
            choice: parse_body::<ChoiceBody>("choice", frame.body)?.choice,
        },
        "deliver" => {
            let b: DeliverBody = parse_body("deliver", frame.body)?;
            Body::Deliver {
                text: b.text,
                notice: b.notice,
            }
        }
        "error" => Body::Error {
            message: parse_body::<ErrorBody>("error", frame.body)?.message,
        },
        "ack" => Body::Ack {
            ack_seq: parse_body::<AckBody>("ack", frame.body)?.ack_seq,
        },
        other => return Err(ProtocolError::UnknownType(other.to_string())),
    };
    if frame.identity.is_none() {
        match body {
            Body::Speech { .. } => return Err(ProtocolError::MissingIdentity("speech")),
            Body::Hello { .. } => return Err(ProtocolError::MissingIdentity("hello")),
            _ => {}
        }
    }
    let turn_id = frame
        .turn_id
        .map(|t| t.parse::<TurnId>().map_err(|_| ProtocolError::TurnId(t)))
        .transpose()?;
    Ok(WireMessage {
        session_id: frame.session_id,
        turn_id,
        identity: frame.identity,
        seq: frame.seq,
        body,
    })
}
