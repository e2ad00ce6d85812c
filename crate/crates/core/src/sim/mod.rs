//! Deterministic discrete-event simulator.
//!
//! A single-threaded executor drives every simulated task. Time only moves
//! when no task is runnable: the earliest pending event is popped and the
//! virtual clock jumps to its timestamp. Events at the same instant run in
//! the order they were scheduled, so a fixed seed reproduces a run exactly.

mod net;

use std::collections::{BTreeMap, HashMap, HashSet, VecDeque};
use std::future::Future;
use std::pin::Pin;
use std::sync::{Arc, Weak};
use std::task::{Context, Poll, Wake, Waker};
use std::time::Duration;

use futures::future::BoxFuture;
use parking_lot::Mutex;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub use net::{NetworkProfile, SimEnv};

use crate::env::duration_ns;

type Event = Box<dyn FnOnce() + Send>;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum SimError {
    #[error("simulation stalled at {at:?}: no runnable task and no pending event")]
    Deadlock { at: Duration },
    #[error("simulation exceeded its virtual time limit of {limit:?}")]
    TimeLimit { limit: Duration },
}

/// Identifier of a task inside the simulator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct SimTaskId(u64);

enum Slot {
    Idle(BoxFuture<'static, ()>),
    Polling,
    AbortRequested,
}

#[derive(Default)]
struct Sched {
    now: u64,
    seq: u64,
    events: BTreeMap<(u64, u64), Event>,
    ready: VecDeque<u64>,
    queued: HashSet<u64>,
    tasks: HashMap<u64, Slot>,
    next_task: u64,
    shut_down: bool,
}

pub(crate) struct Inner {
    sched: Mutex<Sched>,
    rng: Mutex<ChaCha8Rng>,
    pub(crate) net: Mutex<net::NetState>,
    pub(crate) profile: NetworkProfile,
}

/// Cloneable handle used by simulated environments and backends.
#[derive(Clone)]
pub struct SimHandle {
    pub(crate) inner: Arc<Inner>,
}

/// Owner of a simulated world. Dropping it tears down every task and event.
pub struct Sim {
    handle: SimHandle,
}

impl Sim {
    pub fn new(seed: u64, profile: NetworkProfile) -> Self {
        Sim {
            handle: SimHandle {
                inner: Arc::new(Inner {
                    sched: Mutex::new(Sched::default()),
                    rng: Mutex::new(ChaCha8Rng::seed_from_u64(seed)),
                    net: Mutex::new(net::NetState::default()),
                    profile,
                }),
            },
        }
    }

    pub fn handle(&self) -> SimHandle {
        self.handle.clone()
    }

    /// Environment for code running on `node`.
    pub fn env(&self, node: &str) -> Arc<SimEnv> {
        self.handle.env(node)
    }

    /// Drives the simulation until `fut` completes.
    pub fn block_on<T, F>(&self, fut: F) -> Result<T, SimError>
    where
        T: Send + 'static,
        F: Future<Output = T> + Send + 'static,
    {
        self.block_on_limited(fut, None)
    }

    /// Like [`Sim::block_on`] but fails once virtual time passes `limit`.
    pub fn block_on_limited<T, F>(&self, fut: F, limit: Option<Duration>) -> Result<T, SimError>
    where
        T: Send + 'static,
        F: Future<Output = T> + Send + 'static,
    {
        let out: Arc<Mutex<Option<T>>> = Arc::new(Mutex::new(None));
        let slot = out.clone();
        self.handle.spawn(Box::pin(async move {
            let value = fut.await;
            *slot.lock() = Some(value);
        }));
        let limit_ns = limit.map(duration_ns);
        loop {
            if let Some(value) = out.lock().take() {
                return Ok(value);
            }
            if self.handle.run_one_task() {
                continue;
            }
            match self.handle.fire_next_event(limit_ns) {
                Fire::Fired => {}
                Fire::Empty => return Err(SimError::Deadlock { at: self.handle.now() }),
                Fire::PastLimit => {
                    return Err(SimError::TimeLimit {
                        limit: limit.unwrap_or_default(),
                    })
                }
            }
        }
    }

    pub fn now(&self) -> Duration {
        self.handle.now()
    }
}

impl Drop for Sim {
    fn drop(&mut self) {
        self.handle.shutdown();
    }
}

enum Fire {
    Fired,
    Empty,
    PastLimit,
}

struct TaskWaker {
    id: u64,
    sim: Weak<Inner>,
}

impl Wake for TaskWaker {
    fn wake(self: Arc<Self>) {
        self.wake_by_ref();
    }

    fn wake_by_ref(self: &Arc<Self>) {
        if let Some(inner) = self.sim.upgrade() {
            let mut sched = inner.sched.lock();
            if sched.tasks.contains_key(&self.id) && sched.queued.insert(self.id) {
                sched.ready.push_back(self.id);
            }
        }
    }
}

impl SimHandle {
    pub fn env(&self, node: &str) -> Arc<SimEnv> {
        Arc::new(SimEnv::new(self.clone(), node))
    }

    pub fn now(&self) -> Duration {
        Duration::from_nanos(self.now_ns())
    }

    pub(crate) fn now_ns(&self) -> u64 {
        self.inner.sched.lock().now
    }

    pub fn spawn(&self, fut: BoxFuture<'static, ()>) -> SimTaskId {
        let mut sched = self.inner.sched.lock();
        let id = sched.next_task;
        sched.next_task += 1;
        if sched.shut_down {
            return SimTaskId(id);
        }
        sched.tasks.insert(id, Slot::Idle(fut));
        sched.queued.insert(id);
        sched.ready.push_back(id);
        SimTaskId(id)
    }

    /// Stops a task. Its future is dropped, closing whatever it owned.
    pub fn abort(&self, task: SimTaskId) {
        let dropped = {
            let mut sched = self.inner.sched.lock();
            match sched.tasks.get_mut(&task.0) {
                Some(slot @ Slot::Polling) => {
                    *slot = Slot::AbortRequested;
                    None
                }
                Some(Slot::Idle(_)) => sched.tasks.remove(&task.0),
                _ => None,
            }
        };
        drop(dropped);
    }

    pub fn is_alive(&self, task: SimTaskId) -> bool {
        self.inner.sched.lock().tasks.contains_key(&task.0)
    }

    pub(crate) fn schedule_at(&self, at_ns: u64, event: Event) {
        let mut sched = self.inner.sched.lock();
        if sched.shut_down {
            return;
        }
        let at = at_ns.max(sched.now);
        let seq = sched.seq;
        sched.seq += 1;
        sched.events.insert((at, seq), event);
    }

    pub(crate) fn with_rng<T>(&self, f: impl FnOnce(&mut ChaCha8Rng) -> T) -> T {
        f(&mut self.inner.rng.lock())
    }

    pub(crate) fn random_u128(&self) -> u128 {
        self.with_rng(|rng| rng.random())
    }

    pub fn sleep(&self, duration: Duration) -> SimSleep {
        SimSleep {
            sim: self.clone(),
            deadline: self.now_ns().saturating_add(duration_ns(duration)),
            state: None,
        }
    }

    fn run_one_task(&self) -> bool {
        let (id, mut fut) = {
            let mut sched = self.inner.sched.lock();
            loop {
                let Some(id) = sched.ready.pop_front() else {
                    return false;
                };
                sched.queued.remove(&id);
                match sched.tasks.get_mut(&id) {
                    Some(slot @ Slot::Idle(_)) => {
                        let Slot::Idle(fut) = std::mem::replace(slot, Slot::Polling) else {
                            unreachable!()
                        };
                        break (id, fut);
                    }
                    _ => continue,
                }
            }
        };
        let waker = Waker::from(Arc::new(TaskWaker {
            id,
            sim: Arc::downgrade(&self.inner),
        }));
        let mut cx = Context::from_waker(&waker);
        let poll = fut.as_mut().poll(&mut cx);
        let finished = {
            let mut sched = self.inner.sched.lock();
            match (poll, sched.tasks.remove(&id)) {
                (Poll::Pending, Some(Slot::Polling)) => {
                    sched.tasks.insert(id, Slot::Idle(fut));
                    None
                }
                _ => Some(fut),
            }
        };
        drop(finished);
        true
    }

    fn fire_next_event(&self, limit_ns: Option<u64>) -> Fire {
        let event = {
            let mut sched = self.inner.sched.lock();
            let Some((&(at, _), _)) = sched.events.first_key_value() else {
                return Fire::Empty;
            };
            if limit_ns.is_some_and(|limit| at > limit) {
                return Fire::PastLimit;
            }
            let ((at, _), event) = sched.events.pop_first().expect("checked above");
            sched.now = sched.now.max(at);
            event
        };
        event();
        Fire::Fired
    }

    fn shutdown(&self) {
        loop {
            let (tasks, events) = {
                let mut sched = self.inner.sched.lock();
                sched.shut_down = true;
                sched.ready.clear();
                sched.queued.clear();
                (std::mem::take(&mut sched.tasks), std::mem::take(&mut sched.events))
            };
            if tasks.is_empty() && events.is_empty() {
                break;
            }
            drop(tasks);
            drop(events);
        }
        self.clear_listeners();
    }
}

/// Virtual-time sleep.
pub struct SimSleep {
    sim: SimHandle,
    deadline: u64,
    state: Option<Arc<Mutex<SleepState>>>,
}

#[derive(Default)]
struct SleepState {
    fired: bool,
    waker: Option<Waker>,
}

impl Future for SimSleep {
    type Output = ();

    fn poll(mut self: Pin<&mut Self>, cx: &mut Context<'_>) -> Poll<()> {
        if self.state.is_none() {
            if self.deadline <= self.sim.now_ns() {
                return Poll::Ready(());
            }
            let state = Arc::new(Mutex::new(SleepState::default()));
            let fire = state.clone();
            self.sim.schedule_at(
                self.deadline,
                Box::new(move || {
                    let waker = {
                        let mut s = fire.lock();
                        s.fired = true;
                        s.waker.take()
                    };
                    if let Some(w) = waker {
                        w.wake();
                    }
                }),
            );
            self.state = Some(state);
        }
        let mut s = self.state.as_ref().expect("registered").lock();
        if s.fired {
            Poll::Ready(())
        } else {
            s.waker = Some(cx.waker().clone());
            Poll::Pending
        }
    }
}
