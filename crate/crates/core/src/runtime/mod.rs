//! Per-task runtime.
//!
//! Every task runs inside a runtime that talks to exactly two kinds of peers:
//! the executor backend, which it asks directly for new instances, and its
//! own parent, to which it reports over a framed connection. Children connect
//! back to the runtime that spawned them; nothing is relayed through a third
//! party.

mod bootstrap;
mod handle;

use std::collections::BTreeMap;
use std::future::Future;
use std::sync::{Arc, Weak};
use std::time::Duration;

use futures::channel::{mpsc, oneshot};
use futures::future::{self, BoxFuture, Either, FutureExt};
use futures::lock::Mutex as AsyncMutex;
use parking_lot::Mutex;

pub use bootstrap::{Bootstrap, BootstrapError, ENV_MOUNT, ENV_PARENT, ENV_SPEC, ENV_TASK_ID, ENV_TOKEN, ENV_TRACE};
pub use handle::{AwaitTimeout, TaskHandle};

use crate::backend::{Backend, BackendError};
use crate::env::{timeout, Connection, Env, FrameSink, Listener};
use crate::netfs::client::{FsClientError, Workspace};
use crate::task::{validate_spec, Inputs, TaskError, TaskId, TaskSpec, TaskState, Value, Violation};
use crate::trace::{Direction, Trace, BACKEND_PEER};
use crate::volume::{MountSpec, VolumeError, VolumeService};
use crate::wire::{LogStream, Message};

/// Asynchronous task body, resolved by entrypoint name.
pub type TaskBody = Arc<dyn Fn(TaskContext, Inputs) -> BoxFuture<'static, Result<Value, TaskError>> + Send + Sync>;

/// Entrypoint name to task body. Immutable once handed to a runtime.
#[derive(Clone, Default)]
pub struct Registry {
    bodies: BTreeMap<String, TaskBody>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register<F, Fut>(&mut self, name: &str, body: F) -> &mut Self
    where
        F: Fn(TaskContext, Inputs) -> Fut + Send + Sync + 'static,
        Fut: Future<Output = Result<Value, TaskError>> + Send + 'static,
    {
        let body: TaskBody = Arc::new(move |ctx, inputs| body(ctx, inputs).boxed());
        self.bodies.insert(name.to_string(), body);
        self
    }

    pub fn get(&self, name: &str) -> Option<TaskBody> {
        self.bodies.get(name).cloned()
    }

    pub fn contains(&self, name: &str) -> bool {
        self.bodies.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.bodies.keys().map(String::as_str)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct RuntimeConfig {
    /// How long a spawn waits for the backend's acknowledgement.
    pub spawn_timeout: Duration,
}

impl Default for RuntimeConfig {
    fn default() -> Self {
        RuntimeConfig {
            spawn_timeout: Duration::from_secs(10),
        }
    }
}

/// Services shared by every runtime of one process or simulated world.
#[derive(Clone)]
pub struct Runtime {
    pub env: Arc<dyn Env>,
    pub backend: Arc<dyn Backend>,
    pub registry: Arc<Registry>,
    pub trace: Trace,
    pub volumes: Option<Arc<dyn VolumeService>>,
    pub config: RuntimeConfig,
}

#[derive(Debug, thiserror::Error)]
pub enum SpawnError {
    #[error("invalid task spec: {0:?}")]
    Invalid(Vec<Violation>),
    #[error("spec parent {found:?} is not the spawning task {expected}")]
    NotParent { expected: TaskId, found: Option<TaskId> },
    #[error("spawn rejected: {0}")]
    Rejected(TaskError),
    #[error("backend did not acknowledge the spawn in time")]
    Timeout,
    #[error("workspace: {0}")]
    Volume(#[from] VolumeError),
    #[error("cannot accept child connections: {0}")]
    Listen(std::io::Error),
}

impl SpawnError {
    pub fn code(&self) -> &str {
        match self {
            SpawnError::Invalid(_) | SpawnError::NotParent { .. } => "invalid-spec",
            SpawnError::Rejected(e) => &e.code,
            SpawnError::Timeout => "timeout",
            SpawnError::Volume(e) => e.code(),
            SpawnError::Listen(_) => "io",
        }
    }

    pub fn into_task_error(self) -> TaskError {
        TaskError::new(self.code().to_string(), self.to_string())
    }
}

impl From<SpawnError> for TaskError {
    fn from(e: SpawnError) -> Self {
        e.into_task_error()
    }
}

pub(crate) enum ChildEvent {
    Frame(Message),
    Closed { reset: bool },
}

struct PendingChild {
    token: String,
    events: mpsc::UnboundedSender<ChildEvent>,
}

struct Upstream {
    parent: TaskId,
    sink: AsyncMutex<Box<dyn FrameSink>>,
}

struct CtxInner {
    id: TaskId,
    rt: Runtime,
    upstream: Option<Upstream>,
    mount: Option<MountSpec>,
    pending: Mutex<BTreeMap<TaskId, PendingChild>>,
    endpoint: AsyncMutex<Option<String>>,
    shutdown: Mutex<Option<oneshot::Sender<()>>>,
}

/// The runtime context a task body runs in.
#[derive(Clone)]
pub struct TaskContext {
    inner: Arc<CtxInner>,
}

impl TaskContext {
    /// Context for a top-level driver that has no parent.
    pub fn root(rt: Runtime) -> Self {
        let id = TaskId::from_u128(rt.env.random_u128());
        Self::build(id, rt, None, None)
    }

    fn build(id: TaskId, rt: Runtime, upstream: Option<Upstream>, mount: Option<MountSpec>) -> Self {
        TaskContext {
            inner: Arc::new(CtxInner {
                id,
                rt,
                upstream,
                mount,
                pending: Mutex::default(),
                endpoint: AsyncMutex::new(None),
                shutdown: Mutex::new(None),
            }),
        }
    }

    pub fn id(&self) -> TaskId {
        self.inner.id
    }

    pub fn env(&self) -> &Arc<dyn Env> {
        &self.inner.rt.env
    }

    pub fn runtime(&self) -> &Runtime {
        &self.inner.rt
    }

    pub fn trace(&self) -> &Trace {
        &self.inner.rt.trace
    }

    pub fn mount(&self) -> Option<&MountSpec> {
        self.inner.mount.as_ref()
    }

    fn record(&self, dir: Direction, peer: &str, message: &Message) {
        let rt = &self.inner.rt;
        rt.trace
            .record(rt.env.now(), &self.inner.id.to_string(), dir, peer, message);
    }

    /// A spec for a child of this task with a fresh id.
    pub fn child_spec(&self, entrypoint: &str, inputs: Inputs) -> TaskSpec {
        let id = TaskId::from_u128(self.inner.rt.env.random_u128());
        TaskSpec::new(id, entrypoint, inputs).with_parent(self.inner.id)
    }

    /// Spawns `entrypoint` as a child of this task.
    pub async fn spawn_task(&self, entrypoint: &str, inputs: Inputs) -> Result<TaskHandle, SpawnError> {
        self.spawn(self.child_spec(entrypoint, inputs)).await
    }

    /// Spawns a child directly through the backend; no other runtime is
    /// involved. Returns once the backend has acknowledged the instance.
    pub async fn spawn(&self, spec: TaskSpec) -> Result<TaskHandle, SpawnError> {
        let violations = validate_spec(&spec);
        if !violations.is_empty() {
            return Err(SpawnError::Invalid(violations));
        }
        if spec.parent != Some(self.inner.id) {
            return Err(SpawnError::NotParent {
                expected: self.inner.id,
                found: spec.parent,
            });
        }
        let rt = &self.inner.rt;
        let endpoint = self.child_endpoint().await.map_err(SpawnError::Listen)?;
        let mount = match &spec.workspace {
            None => None,
            Some(volume) => {
                let volumes = rt.volumes.as_ref().ok_or(VolumeError::NoBroker)?;
                Some(volumes.publish(volume, spec.id).await?)
            }
        };
        let token = format!("{:032x}", rt.env.random_u128());
        let boot = Bootstrap {
            spec: spec.clone(),
            parent_endpoint: endpoint.clone(),
            token: token.clone(),
            mount,
        };
        let (tx, rx) = mpsc::unbounded();
        self.inner
            .pending
            .lock()
            .insert(spec.id, PendingChild { token, events: tx });

        self.record(
            Direction::Send,
            BACKEND_PEER,
            &Message::SpawnRequest { spec: spec.clone() },
        );
        let created = timeout(
            rt.env.as_ref(),
            rt.config.spawn_timeout,
            rt.backend.create_instance(&spec, &endpoint, &boot.to_map()),
        )
        .await;
        let instance = match created {
            Ok(Ok(instance)) => instance,
            Ok(Err(e)) => {
                self.inner.pending.lock().remove(&spec.id);
                let error = TaskError::new(reject_code(&e), e.to_string());
                self.record(
                    Direction::Recv,
                    BACKEND_PEER,
                    &Message::SpawnReject {
                        task_id: spec.id,
                        error: error.clone(),
                    },
                );
                return Err(SpawnError::Rejected(error));
            }
            Err(_) => {
                self.inner.pending.lock().remove(&spec.id);
                return Err(SpawnError::Timeout);
            }
        };
        self.record(
            Direction::Recv,
            BACKEND_PEER,
            &Message::SpawnAck {
                task_id: spec.id,
                instance: instance.0.clone(),
            },
        );
        Ok(TaskHandle::new(spec.id, instance, rt.env.clone(), rx))
    }

    /// Address children connect to; the listener starts on first use.
    async fn child_endpoint(&self) -> std::io::Result<String> {
        let mut endpoint = self.inner.endpoint.lock().await;
        if let Some(addr) = endpoint.as_ref() {
            return Ok(addr.clone());
        }
        let listener = self.inner.rt.env.listen().await?;
        let addr = listener.local_addr();
        let (stop_tx, stop_rx) = oneshot::channel();
        *self.inner.shutdown.lock() = Some(stop_tx);
        self.inner
            .rt
            .env
            .spawn(accept_loop(Arc::downgrade(&self.inner), listener, stop_rx).boxed());
        *endpoint = Some(addr.clone());
        Ok(addr)
    }

    /// Sends a log line to the parent. Without a parent the line is dropped.
    pub async fn log(&self, stream: LogStream, text: impl Into<String>) -> Result<(), TaskError> {
        let Some(up) = &self.inner.upstream else {
            return Ok(());
        };
        let message = Message::Log {
            task_id: self.inner.id,
            stream,
            text: text.into(),
        };
        self.send_upstream(up, message).await
    }

    async fn send_upstream(&self, up: &Upstream, message: Message) -> Result<(), TaskError> {
        let mut sink = up.sink.lock().await;
        self.record(Direction::Send, &up.parent.to_string(), &message);
        sink.send(message)
            .await
            .map_err(|e| TaskError::new("connection-lost", e.to_string()))
    }

    /// Opens a session on the workspace volume mounted into this task.
    pub async fn workspace(&self) -> Result<Workspace, FsClientError> {
        let mount = self.inner.mount.clone().ok_or(FsClientError::NoWorkspace)?;
        Workspace::connect(self.inner.rt.env.clone(), &self.inner.id.to_string(), mount).await
    }

    /// Stops accepting child connections.
    pub fn close(&self) {
        self.inner.shutdown.lock().take();
    }
}

fn reject_code(e: &BackendError) -> &'static str {
    match e {
        BackendError::Refused(_) => "spawn-rejected",
        other => other.code(),
    }
}

async fn accept_loop(ctx: Weak<CtxInner>, mut listener: Box<dyn Listener>, mut stop: oneshot::Receiver<()>) {
    loop {
        let accepted = {
            let accept = listener.accept();
            match future::select(accept, &mut stop).await {
                Either::Left((conn, _)) => conn,
                Either::Right(_) => return,
            }
        };
        let Ok(conn) = accepted else {
            return;
        };
        let Some(inner) = ctx.upgrade() else {
            return;
        };
        let env = inner.rt.env.clone();
        env.spawn(child_connection(TaskContext { inner }, conn).boxed());
    }
}

/// Reads one child's upstream connection and forwards its frames to the
/// matching handle until the terminal frame or a close.
async fn child_connection(ctx: TaskContext, mut conn: Connection) {
    let Ok(Some(hello)) = conn.source.recv().await else {
        return;
    };
    let Message::Hello { task_id, token } = &hello else {
        return;
    };
    let Ok(child) = task_id.parse::<TaskId>() else {
        return;
    };
    let events = {
        let pending = ctx.inner.pending.lock();
        match pending.get(&child) {
            Some(p) if token.as_deref() == Some(p.token.as_str()) => p.events.clone(),
            _ => return,
        }
    };
    let peer = child.to_string();
    ctx.record(Direction::Recv, &peer, &hello);
    loop {
        match conn.source.recv().await {
            Ok(Some(message)) => {
                ctx.record(Direction::Recv, &peer, &message);
                let terminal = message.is_terminal();
                let _ = events.unbounded_send(ChildEvent::Frame(message));
                if terminal {
                    break;
                }
            }
            Ok(None) => {
                let _ = events.unbounded_send(ChildEvent::Closed { reset: false });
                break;
            }
            Err(_) => {
                let _ = events.unbounded_send(ChildEvent::Closed { reset: true });
                break;
            }
        }
    }
    ctx.inner.pending.lock().remove(&child);
}

/// Exit status of [`serve_task`].
pub const EXIT_OK: i32 = 0;
pub const EXIT_TASK_FAILED: i32 = 1;
pub const EXIT_CONNECTION_LOST: i32 = 2;

/// Child side of a task: connects to the parent, reports `hello` and
/// `status(running)`, runs the body and sends exactly one terminal frame.
/// Returns 0 iff a `return` frame was sent.
pub async fn serve_task(rt: Runtime, boot: Bootstrap) -> i32 {
    let Bootstrap {
        spec,
        parent_endpoint,
        token,
        mount,
    } = boot;
    let Some(parent) = spec.parent else {
        return EXIT_TASK_FAILED;
    };
    let Ok(conn) = rt.env.connect(&parent_endpoint).await else {
        return EXIT_CONNECTION_LOST;
    };
    let Connection { sink, mut source, .. } = conn;
    let body = rt.registry.get(&spec.entrypoint);
    let ctx = TaskContext::build(
        spec.id,
        rt,
        Some(Upstream {
            parent,
            sink: AsyncMutex::new(sink),
        }),
        mount,
    );
    let up = ctx.inner.upstream.as_ref().expect("child has upstream");
    let hello = Message::Hello {
        task_id: spec.id.to_string(),
        token: Some(token),
    };
    if ctx.send_upstream(up, hello).await.is_err() {
        return EXIT_CONNECTION_LOST;
    }
    let Some(body) = body else {
        let fail = Message::Fail {
            task_id: spec.id,
            error: TaskError::new(
                "unknown-entrypoint",
                format!("no task registered as {:?}", spec.entrypoint),
            ),
        };
        let _ = ctx.send_upstream(up, fail).await;
        return EXIT_TASK_FAILED;
    };
    let running = Message::Status {
        task_id: spec.id,
        state: TaskState::Running,
    };
    if ctx.send_upstream(up, running).await.is_err() {
        return EXIT_CONNECTION_LOST;
    }

    // The parent never writes to this connection, so any inbound event means
    // it has gone away.
    let run = body(ctx.clone(), spec.inputs.clone());
    let parent_gone = async move {
        let _ = source.recv().await;
    };
    let outcome = match future::select(run, parent_gone.boxed()).await {
        Either::Left((outcome, _)) => outcome,
        Either::Right(_) => {
            ctx.close();
            return EXIT_CONNECTION_LOST;
        }
    };
    let (terminal, code) = match outcome {
        Ok(value) => (
            Message::Return {
                task_id: spec.id,
                value,
            },
            EXIT_OK,
        ),
        Err(error) => (
            Message::Fail {
                task_id: spec.id,
                error,
            },
            EXIT_TASK_FAILED,
        ),
    };
    let sent = ctx.send_upstream(up, terminal).await;
    ctx.close();
    match sent {
        Ok(()) => code,
        Err(_) => EXIT_CONNECTION_LOST,
    }
}
