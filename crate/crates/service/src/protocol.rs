//! Versioned JSON messages exchanged over the live socket.
//!
//! Every frame is a text frame holding one object with a `"v"` version and a
//! `"type"` tag; the object's other fields depend on the type.

use reachmap::deployment::Condition;
use reachmap::session_store::TrialSummary;
use reachmap::task::{DotState, MachineState, Phase, Target};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ControlAction {
    StartPhase,
    SetCondition,
    Break,
    Resume,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ClientMessage {
    /// One raw interface sample, components in `[-1, 1]`.
    Input { t: f64, x: f64, y: f64, z: f64 },
    Control {
        action: ControlAction,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        condition: Option<Condition>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StateMessage {
    /// Broadcast tick counter.
    pub seq: u64,
    pub machine: MachineState,
    /// Running phase, or the next one between phases.
    pub phase: Option<Phase>,
    pub condition: Option<Condition>,
    pub trial_index: usize,
    pub trials_in_phase: usize,
    pub target: Option<Target>,
    pub dot: DotState,
    pub hold_progress: f64,
    /// Seconds left before the running trial times out.
    pub countdown: Option<f64>,
    pub alpha: f64,
    pub frequency: f64,
    pub active_bin: Option<usize>,
    pub last_input_t: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum CompileState {
    Started,
    Done,
    Failed,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ErrorCode {
    /// Not valid JSON, unknown type, or missing fields.
    Malformed,
    UnsupportedVersion,
    /// Valid message the session cannot act on in its current state.
    OutOfPhase,
    /// Observers may not send input or control.
    Forbidden,
    OperatorTaken,
    Internal,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum ServerMessage {
    State(StateMessage),
    /// Sent once per connection before any broadcast.
    Snapshot {
        state: StateMessage,
        phases: Vec<Phase>,
        trials: Vec<TrialSummary>,
        /// Per-bin hull outlines once calibrated.
        hulls: Vec<Vec<[f64; 2]>>,
    },
    TrialResult {
        trial: TrialSummary,
    },
    CalibrationProgress {
        stage: String,
        fraction: f64,
        samples: usize,
    },
    CompileStatus {
        status: CompileState,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        elapsed_ms: Option<f64>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        profile_hash: Option<String>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        message: Option<String>,
    },
    Ack {
        action: ControlAction,
    },
    Error {
        code: ErrorCode,
        message: String,
    },
}

#[derive(Serialize)]
struct Outgoing<'a> {
    v: u32,
    #[serde(flatten)]
    message: &'a ServerMessage,
}

#[derive(Deserialize)]
struct Incoming<T> {
    v: u32,
    #[serde(flatten)]
    message: T,
}

impl ServerMessage {
    pub fn error(code: ErrorCode, message: impl Into<String>) -> Self {
        ServerMessage::Error {
            code,
            message: message.into(),
        }
    }

    pub fn to_text(&self) -> String {
        serde_json::to_string(&Outgoing {
            v: PROTOCOL_VERSION,
            message: self,
        })
        .expect("server message serializes")
    }

    pub fn parse(text: &str) -> Result<Self, ServerMessage> {
        parse_versioned(text)
    }
}

impl ClientMessage {
    pub fn to_text(&self) -> String {
        #[derive(Serialize)]
        struct Out<'a> {
            v: u32,
            #[serde(flatten)]
            message: &'a ClientMessage,
        }
        serde_json::to_string(&Out {
            v: PROTOCOL_VERSION,
            message: self,
        })
        .expect("client message serializes")
    }

    /// Parses one frame; the error is the reply to send back.
    pub fn parse(text: &str) -> Result<Self, ServerMessage> {
        parse_versioned(text)
    }
}

fn parse_versioned<T: for<'de> Deserialize<'de>>(text: &str) -> Result<T, ServerMessage> {
    let value: serde_json::Value =
        serde_json::from_str(text).map_err(|e| ServerMessage::error(ErrorCode::Malformed, format!("invalid JSON: {e}")))?;
    match value.get("v").and_then(|v| v.as_u64()) {
        Some(v) if v == PROTOCOL_VERSION as u64 => {}
        Some(v) => {
            return Err(ServerMessage::error(
                ErrorCode::UnsupportedVersion,
                format!("protocol version {v} is not supported (expected {PROTOCOL_VERSION})"),
            ))
        }
        None => return Err(ServerMessage::error(ErrorCode::Malformed, "missing protocol version `v`")),
    }
    serde_json::from_value::<Incoming<T>>(value)
        .map(|m| {
            debug_assert_eq!(m.v, PROTOCOL_VERSION);
            m.message
        })
        .map_err(|e| ServerMessage::error(ErrorCode::Malformed, e.to_string()))
}
