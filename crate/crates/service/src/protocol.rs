//! Wire format: one JSON document per text frame,
//! `{"type", "revision"?, "cmd_id"?, "payload"}`.

use hitl_sgraph::scene_graph::{Change, Delta, GraphError, GraphSnapshot, PlaneId, RoomId};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

pub const PROTOCOL_VERSION: u32 = 1;

/// Websocket close code sent for malformed or out-of-order messages.
pub const CLOSE_PROTOCOL_ERROR: u16 = 1002;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Hello {
    pub protocol_version: u32,
    /// Client: last revision it holds. Server: its current revision.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub last_revision: Option<u64>,
}

/// Progress of the running session, pushed after every step.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LiveMetrics {
    pub stamp: Option<f64>,
    pub keyframes: usize,
    pub planes: usize,
    pub rooms: usize,
    pub human_rooms: usize,
    /// Aligned ATE against the log's ground truth so far.
    pub ate_m: Option<f64>,
    pub cost: Option<f64>,
    pub iterations: Option<usize>,
    pub finished: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Message {
    Hello(Hello),
    Snapshot(GraphSnapshot),
    Delta(Delta),
    CreateRoom { cmd_id: String, plane_ids: [PlaneId; 4] },
    Ack { cmd_id: String, revision: u64, room_id: RoomId },
    Nack { cmd_id: String, violation: String, message: String },
    MetricsUpdate { revision: u64, metrics: LiveMetrics },
}

impl Message {
    pub fn type_name(&self) -> &'static str {
        match self {
            Message::Hello(_) => "hello",
            Message::Snapshot(_) => "snapshot",
            Message::Delta(_) => "delta",
            Message::CreateRoom { .. } => "create_room",
            Message::Ack { .. } => "ack",
            Message::Nack { .. } => "nack",
            Message::MetricsUpdate { .. } => "metrics_update",
        }
    }

    pub fn revision(&self) -> Option<u64> {
        match self {
            Message::Snapshot(s) => Some(s.revision),
            Message::Delta(d) => Some(d.revision),
            Message::Ack { revision, .. } | Message::MetricsUpdate { revision, .. } => Some(*revision),
            _ => None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum ProtocolError {
    #[error("malformed message: {0}")]
    Malformed(String),
    #[error("unknown message type {0:?}")]
    UnknownType(String),
    #[error("{kind}: missing {field}")]
    MissingField { kind: &'static str, field: &'static str },
    #[error("{kind}: unexpected {field}")]
    UnexpectedField { kind: &'static str, field: &'static str },
    #[error("snapshot revision {envelope} disagrees with payload revision {payload}")]
    RevisionMismatch { envelope: u64, payload: u64 },
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Envelope {
    #[serde(rename = "type")]
    kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    revision: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    cmd_id: Option<String>,
    payload: Value,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DeltaPayload {
    changes: Vec<Change>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRoomPayload {
    plane_ids: [PlaneId; 4],
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct AckPayload {
    room_id: RoomId,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct NackPayload {
    violation: String,
    message: String,
}

fn to_value<T: Serialize>(v: &T) -> Value {
    serde_json::to_value(v).expect("protocol payloads serialize")
}

pub fn encode(msg: &Message) -> String {
    let (revision, cmd_id, payload) = match msg {
        Message::Hello(h) => (None, None, to_value(h)),
        Message::Snapshot(s) => (Some(s.revision), None, to_value(s)),
        Message::Delta(d) => (Some(d.revision), None, to_value(&DeltaPayload { changes: d.changes.clone() })),
        Message::CreateRoom { cmd_id, plane_ids } => {
            (None, Some(cmd_id.clone()), to_value(&CreateRoomPayload { plane_ids: *plane_ids }))
        }
        Message::Ack { cmd_id, revision, room_id } => {
            (Some(*revision), Some(cmd_id.clone()), to_value(&AckPayload { room_id: *room_id }))
        }
        Message::Nack { cmd_id, violation, message } => (
            None,
            Some(cmd_id.clone()),
            to_value(&NackPayload { violation: violation.clone(), message: message.clone() }),
        ),
        Message::MetricsUpdate { revision, metrics } => (Some(*revision), None, to_value(metrics)),
    };
    let env = Envelope { kind: msg.type_name().to_string(), revision, cmd_id, payload };
    serde_json::to_string(&env).expect("envelope serializes")
}

fn payload<T: DeserializeOwned>(v: Value) -> Result<T, ProtocolError> {
    serde_json::from_value(v).map_err(|e| ProtocolError::Malformed(e.to_string()))
}

pub fn decode(text: &str) -> Result<Message, ProtocolError> {
    let env: Envelope = serde_json::from_str(text).map_err(|e| ProtocolError::Malformed(e.to_string()))?;
    let kind: &'static str = match env.kind.as_str() {
        "hello" => "hello",
        "snapshot" => "snapshot",
        "delta" => "delta",
        "create_room" => "create_room",
        "ack" => "ack",
        "nack" => "nack",
        "metrics_update" => "metrics_update",
        other => return Err(ProtocolError::UnknownType(other.to_string())),
    };
    let need_revision = matches!(kind, "snapshot" | "delta" | "ack" | "metrics_update");
    let need_cmd = matches!(kind, "create_room" | "ack" | "nack");
    let revision = match (env.revision, need_revision) {
        (Some(r), true) => r,
        (None, true) => return Err(ProtocolError::MissingField { kind, field: "revision" }),
        (Some(_), false) => return Err(ProtocolError::UnexpectedField { kind, field: "revision" }),
        (None, false) => 0,
    };
    let cmd_id = match (env.cmd_id, need_cmd) {
        (Some(c), true) => c,
        (None, true) => return Err(ProtocolError::MissingField { kind, field: "cmd_id" }),
        (Some(_), false) => return Err(ProtocolError::UnexpectedField { kind, field: "cmd_id" }),
        (None, false) => String::new(),
    };
    Ok(match kind {
        "hello" => Message::Hello(payload(env.payload)?),
        "snapshot" => {
            let s: GraphSnapshot = payload(env.payload)?;
            if s.revision != revision {
                return Err(ProtocolError::RevisionMismatch { envelope: revision, payload: s.revision });
            }
            Message::Snapshot(s)
        }
        "delta" => {
            let p: DeltaPayload = payload(env.payload)?;
            Message::Delta(Delta { revision, changes: p.changes })
        }
        "create_room" => {
            let p: CreateRoomPayload = payload(env.payload)?;
            Message::CreateRoom { cmd_id, plane_ids: p.plane_ids }
        }
        "ack" => {
            let p: AckPayload = payload(env.payload)?;
            Message::Ack { cmd_id, revision, room_id: p.room_id }
        }
        "nack" => {
            let p: NackPayload = payload(env.payload)?;
            Message::Nack { cmd_id, violation: p.violation, message: p.message }
        }
        _ => Message::MetricsUpdate { revision, metrics: payload(env.payload)? },
    })
}

/// Client-side reconstruction of the server graph from a message stream.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Mirror {
    pub graph: GraphSnapshot,
    pub synced: bool,
}

impl Mirror {
    /// Apply a snapshot or delta; other messages are ignored. Deltas at or
    /// below the held revision are duplicates and skipped.
    pub fn apply(&mut self, msg: &Message) -> Result<(), GraphError> {
        match msg {
            Message::Snapshot(s) => {
                self.graph = s.clone();
                self.synced = true;
            }
            Message::Delta(d) if d.revision > self.graph.revision => self.graph.apply(d)?,
            _ => {}
        }
        Ok(())
    }
}

/// FNV-1a over the canonical JSON of a snapshot, for cheap state comparison.
pub fn state_hash(snapshot: &GraphSnapshot) -> String {
    let text = serde_json::to_string(snapshot).expect("snapshot serializes");
    let mut h: u64 = 0xcbf29ce484222325;
    for b in text.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    format!("{h:016x}")
}
