//! Workspace volume lifecycle, modeled on the Container Storage Interface:
//! create, publish to a task, unpublish, delete.

use std::collections::{BTreeMap, BTreeSet};
use std::sync::Arc;

use futures::future::{BoxFuture, FutureExt};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};

use crate::env::Env;
use crate::task::{TaskId, VolumeId};
use crate::wire::Message;

/// Where a published volume appears inside a task.
pub const MOUNT_PATH: &str = "/workspace";

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MountSpec {
    pub endpoint: String,
    pub token: String,
    pub mount_path: String,
}

impl MountSpec {
    pub fn new(endpoint: impl Into<String>, token: impl Into<String>) -> Self {
        MountSpec {
            endpoint: endpoint.into(),
            token: token.into(),
            mount_path: MOUNT_PATH.to_string(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumeState {
    Created,
    Published,
    Deleted,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VolumeRecord {
    pub id: VolumeId,
    pub endpoint: String,
    pub token: String,
    pub published_to: BTreeSet<TaskId>,
    pub state: VolumeState,
}

impl VolumeRecord {
    /// Checks the record's own invariants.
    pub fn check(&self) -> Result<(), String> {
        let consistent = match self.state {
            VolumeState::Created | VolumeState::Deleted => self.published_to.is_empty(),
            VolumeState::Published => !self.published_to.is_empty(),
        };
        if consistent {
            Ok(())
        } else {
            Err(format!(
                "volume {} in state {:?} published to {} tasks",
                self.id,
                self.state,
                self.published_to.len()
            ))
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum VolumeError {
    #[error("export endpoint {0} is unreachable")]
    EndpointUnreachable(String),
    #[error("export rejected the token")]
    AuthRejected,
    #[error("unknown volume {0}")]
    UnknownVolume(VolumeId),
    #[error("volume {0} is deleted")]
    VolumeDeleted(VolumeId),
    #[error("volume {0} is still published")]
    VolumeBusy(VolumeId),
    #[error("no volume broker available")]
    NoBroker,
    #[error("broker protocol error: {0}")]
    Protocol(String),
}

impl VolumeError {
    pub fn code(&self) -> &'static str {
        match self {
            VolumeError::EndpointUnreachable(_) => "endpoint-unreachable",
            VolumeError::AuthRejected => "auth-rejected",
            VolumeError::UnknownVolume(_) => "unknown-volume",
            VolumeError::VolumeDeleted(_) => "volume-deleted",
            VolumeError::VolumeBusy(_) => "volume-busy",
            VolumeError::NoBroker => "no-broker",
            VolumeError::Protocol(_) => "protocol",
        }
    }

    /// Rebuilds an error reported by a remote broker about `volume`.
    pub fn from_remote(code: &str, message: String, volume: &VolumeId) -> Self {
        match code {
            "endpoint-unreachable" => VolumeError::EndpointUnreachable(message),
            "auth-rejected" => VolumeError::AuthRejected,
            "unknown-volume" => VolumeError::UnknownVolume(volume.clone()),
            "volume-deleted" => VolumeError::VolumeDeleted(volume.clone()),
            "volume-busy" => VolumeError::VolumeBusy(volume.clone()),
            "no-broker" => VolumeError::NoBroker,
            _ => VolumeError::Protocol(format!("{code}: {message}")),
        }
    }
}

/// Calls carried by `volume_rpc` frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "call", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeCall {
    Create { endpoint: String, token: String },
    Publish { volume: VolumeId, task: TaskId },
    Unpublish { volume: VolumeId, task: TaskId },
    Delete { volume: VolumeId },
}

/// Result carried by `volume_reply` frames.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum VolumeOutcome {
    Created { volume: VolumeId },
    Published { mount: MountSpec },
    Done,
    Error { code: String, message: String },
}

impl From<&VolumeError> for VolumeOutcome {
    fn from(e: &VolumeError) -> Self {
        VolumeOutcome::Error {
            code: e.code().to_string(),
            message: e.to_string(),
        }
    }
}

/// Checks that an export endpoint is reachable and accepts a token.
pub trait Prober: Send + Sync {
    fn probe(&self, endpoint: &str, token: &str) -> BoxFuture<'static, Result<(), VolumeError>>;
}

/// Probes with a real `hello` handshake over the environment's network.
pub struct HelloProber {
    env: Arc<dyn Env>,
}

impl HelloProber {
    pub fn new(env: Arc<dyn Env>) -> Self {
        HelloProber { env }
    }
}

impl Prober for HelloProber {
    fn probe(&self, endpoint: &str, token: &str) -> BoxFuture<'static, Result<(), VolumeError>> {
        let env = self.env.clone();
        let endpoint = endpoint.to_string();
        let token = token.to_string();
        async move {
            let mut conn = env
                .connect(&endpoint)
                .await
                .map_err(|_| VolumeError::EndpointUnreachable(endpoint.clone()))?;
            let hello = Message::Hello {
                task_id: "volume-probe".into(),
                token: Some(token),
            };
            match conn.request(hello).await {
                Ok(Message::Accept { .. }) => Ok(()),
                Ok(Message::Reject { .. }) => Err(VolumeError::AuthRejected),
                Ok(other) => Err(VolumeError::Protocol(format!("unexpected {}", other.kind()))),
                Err(_) => Err(VolumeError::AuthRejected),
            }
        }
        .boxed()
    }
}

/// What the runtime needs from a broker when spawning a task with a workspace.
pub trait VolumeService: Send + Sync {
    fn publish(&self, volume: &VolumeId, task: TaskId) -> BoxFuture<'static, Result<MountSpec, VolumeError>>;
}

#[derive(Default)]
struct Registry {
    next: u64,
    volumes: BTreeMap<VolumeId, VolumeRecord>,
}

/// Thread-safe volume registry; every call is atomic.
pub struct Broker {
    prober: Arc<dyn Prober>,
    state: Mutex<Registry>,
}

impl Broker {
    pub fn new(prober: Arc<dyn Prober>) -> Self {
        Broker {
            prober,
            state: Mutex::default(),
        }
    }

    pub async fn create_volume(&self, endpoint: &str, token: &str) -> Result<VolumeId, VolumeError> {
        self.prober.probe(endpoint, token).await?;
        let mut s = self.state.lock();
        let id = VolumeId(format!("vol-{:08}", s.next));
        s.next += 1;
        s.volumes.insert(
            id.clone(),
            VolumeRecord {
                id: id.clone(),
                endpoint: endpoint.to_string(),
                token: token.to_string(),
                published_to: BTreeSet::new(),
                state: VolumeState::Created,
            },
        );
        Ok(id)
    }

    /// Idempotent per task: publishing again returns the same mount.
    pub fn publish_volume(&self, volume: &VolumeId, task: TaskId) -> Result<MountSpec, VolumeError> {
        let mut s = self.state.lock();
        let record = s
            .volumes
            .get_mut(volume)
            .ok_or_else(|| VolumeError::UnknownVolume(volume.clone()))?;
        if record.state == VolumeState::Deleted {
            return Err(VolumeError::VolumeDeleted(volume.clone()));
        }
        record.published_to.insert(task);
        record.state = VolumeState::Published;
        Ok(MountSpec::new(record.endpoint.clone(), record.token.clone()))
    }

    /// Unpublishing a task that does not hold the volume is a no-op.
    pub fn unpublish_volume(&self, volume: &VolumeId, task: TaskId) -> Result<(), VolumeError> {
        let mut s = self.state.lock();
        let record = s
            .volumes
            .get_mut(volume)
            .ok_or_else(|| VolumeError::UnknownVolume(volume.clone()))?;
        record.published_to.remove(&task);
        if record.state == VolumeState::Published && record.published_to.is_empty() {
            record.state = VolumeState::Created;
        }
        Ok(())
    }

    /// Deleting an already deleted volume is a no-op.
    pub fn delete_volume(&self, volume: &VolumeId) -> Result<(), VolumeError> {
        let mut s = self.state.lock();
        let record = s
            .volumes
            .get_mut(volume)
            .ok_or_else(|| VolumeError::UnknownVolume(volume.clone()))?;
        if !record.published_to.is_empty() {
            return Err(VolumeError::VolumeBusy(volume.clone()));
        }
        record.state = VolumeState::Deleted;
        Ok(())
    }

    pub fn record(&self, volume: &VolumeId) -> Option<VolumeRecord> {
        self.state.lock().volumes.get(volume).cloned()
    }

    pub fn records(&self) -> Vec<VolumeRecord> {
        self.state.lock().volumes.values().cloned().collect()
    }

    /// Executes one `volume_rpc` call.
    pub async fn handle_call(&self, call: VolumeCall) -> VolumeOutcome {
        let result = match call {
            VolumeCall::Create { endpoint, token } => self
                .create_volume(&endpoint, &token)
                .await
                .map(|volume| VolumeOutcome::Created { volume }),
            VolumeCall::Publish { volume, task } => self
                .publish_volume(&volume, task)
                .map(|mount| VolumeOutcome::Published { mount }),
            VolumeCall::Unpublish { volume, task } => {
                self.unpublish_volume(&volume, task).map(|()| VolumeOutcome::Done)
            }
            VolumeCall::Delete { volume } => self.delete_volume(&volume).map(|()| VolumeOutcome::Done),
        };
        result.unwrap_or_else(|e| VolumeOutcome::from(&e))
    }
}

impl VolumeService for Broker {
    fn publish(&self, volume: &VolumeId, task: TaskId) -> BoxFuture<'static, Result<MountSpec, VolumeError>> {
        crate::env::ready(self.publish_volume(volume, task))
    }
}

impl VolumeService for Arc<Broker> {
    fn publish(&self, volume: &VolumeId, task: TaskId) -> BoxFuture<'static, Result<MountSpec, VolumeError>> {
        crate::env::ready(self.publish_volume(volume, task))
    }
}

/// Reaches a broker hosted by another process through `volume_rpc` frames.
pub struct BrokerClient {
    env: Arc<dyn Env>,
    addr: String,
}

impl BrokerClient {
    pub fn new(env: Arc<dyn Env>, addr: impl Into<String>) -> Self {
        BrokerClient { env, addr: addr.into() }
    }

    pub async fn call(&self, call: VolumeCall) -> Result<VolumeOutcome, VolumeError> {
        let mut conn = self
            .env
            .connect(&self.addr)
            .await
            .map_err(|_| VolumeError::EndpointUnreachable(self.addr.clone()))?;
        match conn.request(Message::VolumeRpc { call }).await {
            Ok(Message::VolumeReply { result }) => Ok(result),
            Ok(Message::Reject { reason }) if reason == "no-broker" => Err(VolumeError::NoBroker),
            Ok(other) => Err(VolumeError::Protocol(format!("unexpected {}", other.kind()))),
            Err(e) => Err(VolumeError::Protocol(e.to_string())),
        }
    }
}

impl VolumeService for BrokerClient {
    fn publish(&self, volume: &VolumeId, task: TaskId) -> BoxFuture<'static, Result<MountSpec, VolumeError>> {
        let client = BrokerClient {
            env: self.env.clone(),
            addr: self.addr.clone(),
        };
        let volume = volume.clone();
        let call = VolumeCall::Publish {
            volume: volume.clone(),
            task,
        };
        async move {
            match client.call(call).await? {
                VolumeOutcome::Published { mount } => Ok(mount),
                VolumeOutcome::Error { code, message } => Err(VolumeError::from_remote(&code, message, &volume)),
                other => Err(VolumeError::Protocol(format!("unexpected reply {other:?}"))),
            }
        }
        .boxed()
    }
}
