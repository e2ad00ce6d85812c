use serde::{Deserialize, Serialize};

use crate::netfs::proto::{FsOp, FsOutcome};
use crate::task::{TaskError, TaskId, TaskSpec, TaskState, Value};
use crate::volume::{VolumeCall, VolumeOutcome};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogStream {
    Out,
    Err,
}

/// Every frame exchanged between tasks, parents, backends and file-system peers.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Message {
    Hello {
        task_id: String,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        token: Option<String>,
    },
    /// Export daemon accepted a session opened by `hello`.
    Accept {
        session: u64,
    },
    /// Export daemon refused a session opened by `hello`.
    Reject {
        reason: String,
    },
    Status {
        task_id: TaskId,
        state: TaskState,
    },
    Log {
        task_id: TaskId,
        stream: LogStream,
        text: String,
    },
    Return {
        task_id: TaskId,
        value: Value,
    },
    Fail {
        task_id: TaskId,
        error: TaskError,
    },
    SpawnRequest {
        spec: TaskSpec,
    },
    SpawnAck {
        task_id: TaskId,
        instance: String,
    },
    SpawnReject {
        task_id: TaskId,
        error: TaskError,
    },
    FsRequest {
        session: u64,
        seq: u64,
        op: FsOp,
    },
    FsResponse {
        session: u64,
        seq: u64,
        result: FsOutcome,
    },
    VolumeRpc {
        call: VolumeCall,
    },
    VolumeReply {
        result: VolumeOutcome,
    },
}

impl Message {
    /// The `type` discriminator as it appears on the wire.
    pub fn kind(&self) -> &'static str {
        match self {
            Message::Hello { .. } => "hello",
            Message::Accept { .. } => "accept",
            Message::Reject { .. } => "reject",
            Message::Status { .. } => "status",
            Message::Log { .. } => "log",
            Message::Return { .. } => "return",
            Message::Fail { .. } => "fail",
            Message::SpawnRequest { .. } => "spawn_request",
            Message::SpawnAck { .. } => "spawn_ack",
            Message::SpawnReject { .. } => "spawn_reject",
            Message::FsRequest { .. } => "fs_request",
            Message::FsResponse { .. } => "fs_response",
            Message::VolumeRpc { .. } => "volume_rpc",
            Message::VolumeReply { .. } => "volume_reply",
        }
    }

    pub fn is_terminal(&self) -> bool {
        matches!(self, Message::Return { .. } | Message::Fail { .. })
    }

    /// File content bytes carried by this message; everything else is control data.
    pub fn payload_len(&self) -> usize {
        match self {
            Message::FsRequest { op, .. } => op.payload_len(),
            Message::FsResponse {
                result: FsOutcome::Ok(reply),
                ..
            } => reply.payload_len(),
            _ => 0,
        }
    }
}
