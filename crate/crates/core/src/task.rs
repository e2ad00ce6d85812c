//! Task identity, specification, lifecycle state machine and outcomes.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

/// Document values exchanged between tasks (JSON data model).
pub type Value = serde_json::Value;

/// Named task inputs. Keys are unique by construction.
pub type Inputs = BTreeMap<String, Value>;

/// 128-bit task identifier, rendered as 32 lowercase hex characters.
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct TaskId(u128);

impl TaskId {
    pub fn from_u128(raw: u128) -> Self {
        TaskId(raw)
    }

    pub fn random<R: Rng + ?Sized>(rng: &mut R) -> Self {
        TaskId(rng.random())
    }

    pub fn as_u128(self) -> u128 {
        self.0
    }
}

impl fmt::Display for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:032x}", self.0)
    }
}

impl fmt::Debug for TaskId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskId({self})")
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("task id must be 32 lowercase hex characters, got {0:?}")]
pub struct BadTaskId(pub String);

impl FromStr for TaskId {
    type Err = BadTaskId;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let well_formed = s.len() == 32 && s.bytes().all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !well_formed {
            return Err(BadTaskId(s.to_string()));
        }
        u128::from_str_radix(s, 16)
            .map(TaskId)
            .map_err(|_| BadTaskId(s.to_string()))
    }
}

impl Serialize for TaskId {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        serializer.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for TaskId {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let s = String::deserialize(deserializer)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Opaque identifier of a workspace volume.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct VolumeId(pub String);

impl fmt::Display for VolumeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskSpec {
    pub id: TaskId,
    pub name: String,
    pub entrypoint: String,
    #[serde(default)]
    pub inputs: Inputs,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub parent: Option<TaskId>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub placement: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub workspace: Option<VolumeId>,
}

impl TaskSpec {
    /// A spec whose name equals its entrypoint, with no parent or placement.
    pub fn new(id: TaskId, entrypoint: impl Into<String>, inputs: Inputs) -> Self {
        let entrypoint = entrypoint.into();
        TaskSpec {
            id,
            name: entrypoint.clone(),
            entrypoint,
            inputs,
            parent: None,
            placement: None,
            workspace: None,
        }
    }

    pub fn with_parent(mut self, parent: TaskId) -> Self {
        self.parent = Some(parent);
        self
    }

    pub fn with_placement(mut self, node: impl Into<String>) -> Self {
        self.placement = Some(node.into());
        self
    }

    pub fn with_workspace(mut self, volume: VolumeId) -> Self {
        self.workspace = Some(volume);
        self
    }
}

/// A violated spec invariant with a stable machine-readable code.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Violation {
    pub code: String,
    pub detail: String,
}

impl Violation {
    fn new(code: &str, detail: impl Into<String>) -> Self {
        Violation {
            code: code.to_string(),
            detail: detail.into(),
        }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.detail)
    }
}

fn is_identifier(s: &str) -> bool {
    !s.is_empty()
        && s.chars()
            .all(|c| c.is_ascii_alphanumeric() || matches!(c, '_' | '-' | '.'))
}

/// Checks every spec invariant; an empty list means the spec is valid.
pub fn validate_spec(spec: &TaskSpec) -> Vec<Violation> {
    let mut out = Vec::new();
    if spec.name.is_empty() {
        out.push(Violation::new("empty-name", "name must not be empty"));
    } else if !is_identifier(&spec.name) {
        out.push(Violation::new(
            "invalid-name",
            format!("name {:?} is not an identifier", spec.name),
        ));
    }
    if spec.entrypoint.is_empty() {
        out.push(Violation::new("empty-entrypoint", "entrypoint must not be empty"));
    } else if !is_identifier(&spec.entrypoint) {
        out.push(Violation::new(
            "invalid-entrypoint",
            format!("entrypoint {:?} is not an identifier", spec.entrypoint),
        ));
    }
    if spec.parent == Some(spec.id) {
        out.push(Violation::new("self-parent", "a task cannot be its own parent"));
    }
    if matches!(&spec.placement, Some(p) if p.is_empty()) {
        out.push(Violation::new("empty-placement", "placement label is empty"));
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskState {
    Created,
    Scheduled,
    Running,
    Completed,
    Failed,
    Canceled,
}

impl TaskState {
    pub fn is_terminal(self) -> bool {
        matches!(self, TaskState::Completed | TaskState::Failed | TaskState::Canceled)
    }
}

impl fmt::Display for TaskState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            TaskState::Created => "created",
            TaskState::Scheduled => "scheduled",
            TaskState::Running => "running",
            TaskState::Completed => "completed",
            TaskState::Failed => "failed",
            TaskState::Canceled => "canceled",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum LifecycleEvent {
    Schedule,
    Start,
    Return,
    Fail,
    Cancel,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("illegal transition from {from} on {event:?}")]
pub struct IllegalTransition {
    pub from: TaskState,
    pub event: LifecycleEvent,
}

/// The lifecycle table. `fail` is also accepted while Scheduled, which covers
/// a child that reports failure before it starts running.
pub fn transition(state: TaskState, event: LifecycleEvent) -> Result<TaskState, IllegalTransition> {
    use LifecycleEvent::*;
    use TaskState::*;
    match (state, event) {
        (Created, Schedule) => Ok(Scheduled),
        (Scheduled, Start) => Ok(Running),
        (Running, Return) => Ok(Completed),
        (Running, Fail) | (Scheduled, Fail) => Ok(Failed),
        (s, Cancel) if !s.is_terminal() => Ok(Canceled),
        (from, event) => Err(IllegalTransition { from, event }),
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskError {
    pub code: String,
    pub message: String,
}

impl TaskError {
    pub fn new(code: impl Into<String>, message: impl Into<String>) -> Self {
        TaskError {
            code: code.into(),
            message: message.into(),
        }
    }

    /// Generic failure raised by a task body.
    pub fn failed(message: impl Into<String>) -> Self {
        TaskError::new("task-failed", message)
    }
}

impl fmt::Display for TaskError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.code, self.message)
    }
}

impl std::error::Error for TaskError {}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaskResult {
    pub task: TaskId,
    pub outcome: Result<Value, TaskError>,
}

impl TaskResult {
    pub fn value(&self) -> Option<&Value> {
        self.outcome.as_ref().ok()
    }

    pub fn error(&self) -> Option<&TaskError> {
        self.outcome.as_ref().err()
    }
}
