//! Append-only record of every frame a runtime sends or receives.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{self, BufRead, Write};
use std::path::Path;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::task::TaskId;
use crate::wire::Message;

/// Peer name used for the executor backend interface.
pub const BACKEND_PEER: &str = "backend";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    Send,
    Recv,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceEvent {
    pub at_ns: u64,
    /// Runtime that recorded the event (a task id, or a service name).
    pub actor: String,
    pub dir: Direction,
    pub peer: String,
    /// Message `type`.
    pub kind: String,
    /// Task the message is about.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub task: Option<TaskId>,
    /// Declared parent of the task, for spawn requests.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<TaskId>,
}

/// Shared trace. Appends are atomic; an optional file receives one JSON line
/// per event so traces from separate processes can be merged.
#[derive(Clone, Default)]
pub struct Trace {
    events: Arc<Mutex<Vec<TraceEvent>>>,
    file: Option<Arc<Mutex<File>>>,
}

impl Trace {
    pub fn new() -> Self {
        Self::default()
    }

    /// Also append every event to `path`.
    pub fn with_file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Trace {
            events: Arc::default(),
            file: Some(Arc::new(Mutex::new(file))),
        })
    }

    pub fn record(&self, at: Duration, actor: &str, dir: Direction, peer: &str, message: &Message) {
        let (task, parent) = subject(message);
        let event = TraceEvent {
            at_ns: u64::try_from(at.as_nanos()).unwrap_or(u64::MAX),
            actor: actor.to_string(),
            dir,
            peer: peer.to_string(),
            kind: message.kind().to_string(),
            task,
            parent,
        };
        if let Some(file) = &self.file {
            let mut line = serde_json::to_vec(&event).expect("trace events serialize");
            line.push(b'\n');
            // One write per line keeps concurrent appenders from interleaving.
            let _ = file.lock().write_all(&line);
        }
        self.events.lock().push(event);
    }

    pub fn events(&self) -> Vec<TraceEvent> {
        self.events.lock().clone()
    }

    pub fn len(&self) -> usize {
        self.events.lock().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn subject(message: &Message) -> (Option<TaskId>, Option<TaskId>) {
    match message {
        Message::Hello { task_id, .. } => (task_id.parse().ok(), None),
        Message::Status { task_id, .. }
        | Message::Log { task_id, .. }
        | Message::Return { task_id, .. }
        | Message::Fail { task_id, .. }
        | Message::SpawnAck { task_id, .. }
        | Message::SpawnReject { task_id, .. } => (Some(*task_id), None),
        Message::SpawnRequest { spec } => (Some(spec.id), spec.parent),
        _ => (None, None),
    }
}

/// Reads a JSON-lines trace file.
pub fn read_trace_file(path: &Path) -> io::Result<Vec<TraceEvent>> {
    let file = File::open(path)?;
    io::BufReader::new(file)
        .lines()
        .filter(|l| !matches!(l, Ok(s) if s.trim().is_empty()))
        .map(|line| {
            let line = line?;
            serde_json::from_str(&line).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
        })
        .collect()
}

const UPSTREAM_KINDS: [&str; 5] = ["hello", "status", "log", "return", "fail"];

/// Checks that task traffic follows parent links only: every spawn request
/// goes from the spawning task's own runtime to the backend, and every frame
/// a child reports is sent by the child and received by its parent.
/// Returns a description of each violation.
pub fn check_decentralized(events: &[TraceEvent]) -> Vec<String> {
    let mut violations = Vec::new();
    let mut parent_of: BTreeMap<TaskId, TaskId> = BTreeMap::new();
    for e in events.iter().filter(|e| e.kind == "spawn_request") {
        match e.dir {
            Direction::Send => {
                let (Some(child), Some(parent)) = (e.task, e.parent) else {
                    violations.push(format!("spawn_request without task/parent: {e:?}"));
                    continue;
                };
                if e.actor != parent.to_string() {
                    violations.push(format!(
                        "spawn_request for {child} sent by {} instead of its parent {parent}",
                        e.actor
                    ));
                }
                if e.peer != BACKEND_PEER {
                    violations.push(format!(
                        "spawn_request for {child} sent to {} instead of the backend",
                        e.peer
                    ));
                }
                parent_of.insert(child, parent);
            }
            Direction::Recv => {
                violations.push(format!("spawn_request received by runtime {}", e.actor));
            }
        }
    }
    for e in events.iter().filter(|e| UPSTREAM_KINDS.contains(&e.kind.as_str())) {
        let Some(child) = e.task else {
            continue;
        };
        let Some(parent) = parent_of.get(&child) else {
            violations.push(format!("{} frame about unspawned task {child}", e.kind));
            continue;
        };
        let (expected_actor, expected_peer) = match e.dir {
            Direction::Send => (child.to_string(), parent.to_string()),
            Direction::Recv => (parent.to_string(), child.to_string()),
        };
        if e.actor != expected_actor || e.peer != expected_peer {
            violations.push(format!(
                "{} frame of {child} went {} -> {} ({:?}), expected direct child/parent link",
                e.kind, e.actor, e.peer, e.dir
            ));
        }
    }
    violations
}
