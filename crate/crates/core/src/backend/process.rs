use std::collections::BTreeMap;
use std::path::PathBuf;
use std::process::Stdio;
use std::sync::Arc;

use futures::future::{BoxFuture, FutureExt};
use parking_lot::Mutex;
use tokio::process::Command;
use tokio::sync::oneshot;

use super::{Backend, BackendError, InstanceId, InstanceInfo, NodeLabel};
use crate::env::ready;
use crate::task::{TaskId, TaskSpec, TaskState};

struct Instance {
    task: TaskId,
    node: String,
    state: Arc<Mutex<TaskState>>,
    kill: Option<oneshot::Sender<()>>,
}

#[derive(Default)]
struct State {
    next: u64,
    instances: BTreeMap<InstanceId, Instance>,
}

/// Runs each instance as a separate OS process executing `program serve-task`.
/// Placement hints are recorded but everything runs on this machine. Must be
/// used from inside a tokio runtime.
#[derive(Clone)]
pub struct ProcessBackend {
    program: PathBuf,
    extra_env: BTreeMap<String, String>,
    state: Arc<Mutex<State>>,
}

impl ProcessBackend {
    pub fn new(program: impl Into<PathBuf>) -> Self {
        ProcessBackend {
            program: program.into(),
            extra_env: BTreeMap::new(),
            state: Arc::default(),
        }
    }

    /// Extra variable passed to every child.
    pub fn with_env(mut self, key: impl Into<String>, value: impl Into<String>) -> Self {
        self.extra_env.insert(key.into(), value.into());
        self
    }
}

impl Backend for ProcessBackend {
    fn create_instance(
        &self,
        spec: &TaskSpec,
        _parent_endpoint: &str,
        env: &BTreeMap<String, String>,
    ) -> BoxFuture<'static, Result<InstanceId, BackendError>> {
        let mut cmd = Command::new(&self.program);
        cmd.arg("serve-task")
            .envs(&self.extra_env)
            .envs(env)
            .stdin(Stdio::null())
            .stdout(Stdio::null())
            .stderr(Stdio::inherit());
        let state = self.state.clone();
        let task = spec.id;
        let node = spec.placement.clone().unwrap_or_else(|| "local".into());
        async move {
            let mut child = cmd.spawn()?;
            let (kill_tx, kill_rx) = oneshot::channel::<()>();
            let observed = Arc::new(Mutex::new(TaskState::Running));
            let id = {
                let mut s = state.lock();
                let id = InstanceId(format!("proc-{}", s.next));
                s.next += 1;
                s.instances.insert(
                    id.clone(),
                    Instance {
                        task,
                        node,
                        state: observed.clone(),
                        kill: Some(kill_tx),
                    },
                );
                id
            };
            // Reaper: records the exit, or kills the child on destroy.
            tokio::spawn(async move {
                let outcome = tokio::select! {
                    status = child.wait() => match status {
                        Ok(s) if s.success() => TaskState::Completed,
                        _ => TaskState::Failed,
                    },
                    _ = kill_rx => {
                        let _ = child.kill().await;
                        TaskState::Canceled
                    }
                };
                let mut s = observed.lock();
                if !s.is_terminal() {
                    *s = outcome;
                }
            });
            Ok(id)
        }
        .boxed()
    }

    fn destroy_instance(&self, id: &InstanceId) -> BoxFuture<'static, Result<(), BackendError>> {
        let removed = self.state.lock().instances.remove(id);
        let result = match removed {
            None => Err(BackendError::UnknownInstance(id.clone())),
            Some(mut instance) => {
                if let Some(kill) = instance.kill.take() {
                    let _ = kill.send(());
                }
                Ok(())
            }
        };
        ready(result)
    }

    fn list_instances(&self) -> Vec<InstanceInfo> {
        let s = self.state.lock();
        s.instances
            .iter()
            .map(|(id, i)| InstanceInfo {
                instance: id.clone(),
                task: i.task,
                node: NodeLabel(i.node.clone()),
                state: *i.state.lock(),
            })
            .collect()
    }
}
