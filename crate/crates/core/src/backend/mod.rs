//! Executor backends standing in for a container orchestrator.
//!
//! A runtime asks its backend for a new instance directly; the backend starts
//! the task's runtime in isolation and hands it the parent's endpoint. Real
//! container orchestrators would implement the same trait.

mod process;
mod sim;

use std::collections::BTreeMap;
use std::fmt;

use futures::future::BoxFuture;
use serde::{Deserialize, Serialize};

pub use crate::sim::NetworkProfile;
pub use process::ProcessBackend;
pub use sim::{SimBackend, SimBackendConfig};

use crate::task::{TaskId, TaskSpec, TaskState};

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct InstanceId(pub String);

impl fmt::Display for InstanceId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// Name of a (simulated) machine.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct NodeLabel(pub String);

impl fmt::Display for NodeLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct InstanceInfo {
    pub instance: InstanceId,
    pub task: TaskId,
    pub node: NodeLabel,
    pub state: TaskState,
}

#[derive(Debug, thiserror::Error)]
pub enum BackendError {
    #[error("unknown node {0:?}")]
    UnknownNode(String),
    #[error("node {0:?} is at capacity")]
    CapacityExceeded(String),
    #[error("unknown instance {0}")]
    UnknownInstance(InstanceId),
    #[error("backend refused the instance: {0}")]
    Refused(String),
    #[error("failed to launch instance: {0}")]
    Launch(#[from] std::io::Error),
}

impl BackendError {
    /// Stable error code used in `spawn_reject` frames.
    pub fn code(&self) -> &'static str {
        match self {
            BackendError::UnknownNode(_) => "unknown-node",
            BackendError::CapacityExceeded(_) => "capacity-exceeded",
            BackendError::UnknownInstance(_) => "unknown-instance",
            BackendError::Refused(_) => "spawn-rejected",
            BackendError::Launch(_) => "launch-failed",
        }
    }
}

pub trait Backend: Send + Sync {
    /// Starts an isolated runtime serving `spec`. `env` holds the child's
    /// bootstrap variables, including `parent_endpoint`.
    fn create_instance(
        &self,
        spec: &TaskSpec,
        parent_endpoint: &str,
        env: &BTreeMap<String, String>,
    ) -> BoxFuture<'static, Result<InstanceId, BackendError>>;

    fn destroy_instance(&self, id: &InstanceId) -> BoxFuture<'static, Result<(), BackendError>>;

    /// Snapshot of live instances, taken at a single instant.
    fn list_instances(&self) -> Vec<InstanceInfo>;
}
