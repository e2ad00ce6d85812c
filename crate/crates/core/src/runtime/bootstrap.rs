use std::collections::BTreeMap;

use crate::task::{TaskId, TaskSpec};
use crate::volume::MountSpec;
use crate::wire::canonical_document;

pub const ENV_PARENT: &str = "TASKMESH_PARENT";
pub const ENV_TASK_ID: &str = "TASKMESH_TASK_ID";
pub const ENV_TOKEN: &str = "TASKMESH_TOKEN";
pub const ENV_SPEC: &str = "TASKMESH_SPEC";
/// Canonical text of the workspace mount, when the task has one.
pub const ENV_MOUNT: &str = "TASKMESH_MOUNT";
/// Optional JSON-lines file that child runtimes append trace events to.
pub const ENV_TRACE: &str = "TASKMESH_TRACE";

#[derive(Debug, thiserror::Error)]
pub enum BootstrapError {
    #[error("missing environment variable {0}")]
    Missing(&'static str),
    #[error("bad value in {var}: {reason}")]
    Invalid { var: &'static str, reason: String },
}

/// Everything a child runtime needs to start: what to run and where its
/// parent listens.
#[derive(Debug, Clone, PartialEq)]
pub struct Bootstrap {
    pub spec: TaskSpec,
    pub parent_endpoint: String,
    pub token: String,
    pub mount: Option<MountSpec>,
}

impl Bootstrap {
    pub fn to_map(&self) -> BTreeMap<String, String> {
        let mut env = BTreeMap::new();
        env.insert(ENV_PARENT.to_string(), self.parent_endpoint.clone());
        env.insert(ENV_TASK_ID.to_string(), self.spec.id.to_string());
        env.insert(ENV_TOKEN.to_string(), self.token.clone());
        env.insert(ENV_SPEC.to_string(), canonical_text(&self.spec));
        if let Some(mount) = &self.mount {
            env.insert(ENV_MOUNT.to_string(), canonical_text(mount));
        }
        env
    }

    pub fn from_map(env: &BTreeMap<String, String>) -> Result<Self, BootstrapError> {
        Self::from_lookup(|key| env.get(key).cloned())
    }

    /// Reads the bootstrap from the process environment.
    pub fn from_process_env() -> Result<Self, BootstrapError> {
        Self::from_lookup(|key| std::env::var(key).ok())
    }

    pub fn from_lookup(lookup: impl Fn(&str) -> Option<String>) -> Result<Self, BootstrapError> {
        let get = |var: &'static str| lookup(var).ok_or(BootstrapError::Missing(var));
        let parent_endpoint = get(ENV_PARENT)?;
        let token = get(ENV_TOKEN)?;
        let id: TaskId = get(ENV_TASK_ID)?
            .parse()
            .map_err(|e: crate::task::BadTaskId| BootstrapError::Invalid {
                var: ENV_TASK_ID,
                reason: e.to_string(),
            })?;
        let spec: TaskSpec = serde_json::from_str(&get(ENV_SPEC)?).map_err(|e| BootstrapError::Invalid {
            var: ENV_SPEC,
            reason: e.to_string(),
        })?;
        if spec.id != id {
            return Err(BootstrapError::Invalid {
                var: ENV_TASK_ID,
                reason: format!("{id} does not match spec id {}", spec.id),
            });
        }
        let mount = match lookup(ENV_MOUNT) {
            None => None,
            Some(text) => Some(serde_json::from_str(&text).map_err(|e| BootstrapError::Invalid {
                var: ENV_MOUNT,
                reason: e.to_string(),
            })?),
        };
        Ok(Bootstrap {
            spec,
            parent_endpoint,
            token,
            mount,
        })
    }
}

fn canonical_text<T: serde::Serialize>(value: &T) -> String {
    let doc = serde_json::to_value(value).expect("bootstrap values serialize");
    let bytes = canonical_document(&doc).expect("bootstrap values are documents");
    String::from_utf8(bytes).expect("canonical text is utf-8")
}
