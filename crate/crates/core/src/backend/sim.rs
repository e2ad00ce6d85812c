use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use futures::future::{BoxFuture, FutureExt};
use parking_lot::Mutex;

use super::{Backend, BackendError, InstanceId, InstanceInfo, NodeLabel};
use crate::env::{ready, Env};
use crate::runtime::{serve_task, Bootstrap, Registry, Runtime, RuntimeConfig};
use crate::sim::{SimHandle, SimTaskId};
use crate::task::{transition, LifecycleEvent, TaskSpec, TaskState};
use crate::trace::Trace;
use crate::volume::VolumeService;

#[derive(Debug, Clone)]
pub struct SimBackendConfig {
    pub nodes: Vec<String>,
    /// Live instances allowed per node.
    pub capacity: usize,
    /// Refuse every create request.
    pub refuse: bool,
    /// Virtual delay before a create request is acknowledged.
    pub ack_delay: Duration,
}

impl Default for SimBackendConfig {
    fn default() -> Self {
        SimBackendConfig {
            nodes: vec!["node-a".into(), "node-b".into()],
            capacity: 64,
            refuse: false,
            ack_delay: Duration::ZERO,
        }
    }
}

struct Instance {
    task: crate::task::TaskId,
    node: String,
    state: Arc<Mutex<TaskState>>,
    sim_task: SimTaskId,
}

#[derive(Default)]
struct State {
    next: u64,
    instances: BTreeMap<InstanceId, Instance>,
}

struct Inner {
    sim: SimHandle,
    registry: Arc<Registry>,
    trace: Trace,
    volumes: Option<Arc<dyn VolumeService>>,
    config: Mutex<SimBackendConfig>,
    state: Mutex<State>,
}

/// Runs every instance as a task of the simulator, bound to a simulated node.
#[derive(Clone)]
pub struct SimBackend {
    inner: Arc<Inner>,
}

impl SimBackend {
    pub fn new(sim: SimHandle, registry: Arc<Registry>, trace: Trace, config: SimBackendConfig) -> Self {
        SimBackend {
            inner: Arc::new(Inner {
                sim,
                registry,
                trace,
                volumes: None,
                config: Mutex::new(config),
                state: Mutex::default(),
            }),
        }
    }

    /// Broker that spawned tasks use to publish their workspace volumes.
    pub fn with_volumes(self, volumes: Arc<dyn VolumeService>) -> Self {
        let inner = Arc::try_unwrap(self.inner)
            .unwrap_or_else(|_| panic!("with_volumes must be called before the backend is shared"));
        SimBackend {
            inner: Arc::new(Inner {
                volumes: Some(volumes),
                ..inner
            }),
        }
    }

    pub fn set_refusing(&self, refuse: bool) {
        self.inner.config.lock().refuse = refuse;
    }

    pub fn set_ack_delay(&self, delay: Duration) {
        self.inner.config.lock().ack_delay = delay;
    }

    /// Runtime services for code running on `node` of this world.
    pub fn runtime(&self, node: &str) -> Runtime {
        Runtime {
            env: self.inner.sim.env(node),
            backend: Arc::new(self.clone()),
            registry: self.inner.registry.clone(),
            trace: self.inner.trace.clone(),
            volumes: self.inner.volumes.clone(),
            config: RuntimeConfig::default(),
        }
    }

    /// Simulates a machine failure: every instance on `node` dies and its
    /// connections are reset.
    pub fn crash_node(&self, node: &str) {
        self.inner.sim.crash_node(node);
        let victims: Vec<(SimTaskId, Arc<Mutex<TaskState>>)> = {
            let state = self.inner.state.lock();
            state
                .instances
                .values()
                .filter(|i| i.node == node)
                .map(|i| (i.sim_task, i.state.clone()))
                .collect()
        };
        for (task, st) in victims {
            self.inner.sim.abort(task);
            let mut s = st.lock();
            if !s.is_terminal() {
                *s = TaskState::Failed;
            }
        }
    }

    fn pick_node(&self, spec: &TaskSpec, config: &SimBackendConfig, state: &State) -> Result<String, BackendError> {
        let load = |node: &str| {
            state
                .instances
                .values()
                .filter(|i| i.node == node && !i.state.lock().is_terminal())
                .count()
        };
        match &spec.placement {
            Some(label) => {
                if !config.nodes.iter().any(|n| n == label) {
                    return Err(BackendError::UnknownNode(label.clone()));
                }
                if load(label) >= config.capacity {
                    return Err(BackendError::CapacityExceeded(label.clone()));
                }
                Ok(label.clone())
            }
            None => config
                .nodes
                .iter()
                .map(|n| (load(n), n))
                .filter(|(l, _)| *l < config.capacity)
                .min_by_key(|(l, _)| *l)
                .map(|(_, n)| n.clone())
                .ok_or_else(|| BackendError::CapacityExceeded("all nodes".into())),
        }
    }

    fn create_now(&self, spec: &TaskSpec, env: &BTreeMap<String, String>) -> Result<InstanceId, BackendError> {
        let config = self.inner.config.lock().clone();
        if config.refuse {
            return Err(BackendError::Refused("backend configured to refuse".into()));
        }
        let boot = Bootstrap::from_map(env).map_err(|e| BackendError::Refused(e.to_string()))?;
        let mut state = self.inner.state.lock();
        let node = self.pick_node(spec, &config, &state)?;
        let id = InstanceId(format!("sim-{}", state.next));
        state.next += 1;

        let task_state = Arc::new(Mutex::new(TaskState::Scheduled));
        let runtime = self.runtime(&node);
        let observed = task_state.clone();
        let fut = async move {
            set_state(&observed, LifecycleEvent::Start);
            let code = serve_task(runtime, boot).await;
            let event = if code == 0 {
                LifecycleEvent::Return
            } else {
                LifecycleEvent::Fail
            };
            set_state(&observed, event);
        };
        let sim_task = self.inner.sim.spawn(fut.boxed());
        state.instances.insert(
            id.clone(),
            Instance {
                task: spec.id,
                node,
                state: task_state,
                sim_task,
            },
        );
        Ok(id)
    }
}

fn set_state(state: &Mutex<TaskState>, event: LifecycleEvent) {
    let mut s = state.lock();
    if let Ok(next) = transition(*s, event) {
        *s = next;
    }
}

impl Backend for SimBackend {
    fn create_instance(
        &self,
        spec: &TaskSpec,
        _parent_endpoint: &str,
        env: &BTreeMap<String, String>,
    ) -> BoxFuture<'static, Result<InstanceId, BackendError>> {
        let delay = self.inner.config.lock().ack_delay;
        let result = self.create_now(spec, env);
        if delay.is_zero() {
            return ready(result);
        }
        let sleep = self.inner.sim.env("control").sleep(delay);
        async move {
            sleep.await;
            result
        }
        .boxed()
    }

    fn destroy_instance(&self, id: &InstanceId) -> BoxFuture<'static, Result<(), BackendError>> {
        let removed = self.inner.state.lock().instances.remove(id);
        let result = match removed {
            None => Err(BackendError::UnknownInstance(id.clone())),
            Some(instance) => {
                self.inner.sim.abort(instance.sim_task);
                set_state(&instance.state, LifecycleEvent::Cancel);
                Ok(())
            }
        };
        ready(result)
    }

    fn list_instances(&self) -> Vec<InstanceInfo> {
        let state = self.inner.state.lock();
        state
            .instances
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
