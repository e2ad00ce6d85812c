//! Simulated links between nodes.
//!
//! Each direction of a connection is a FIFO pipe with its own transmitter.
//! A message of `b` content bytes occupies the transmitter for `b / bandwidth`
//! and then propagates for `rtt / 2` plus seeded uniform jitter. Only file
//! content counts against bandwidth; control frames cost propagation only.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io;
use std::sync::Arc;
use std::task::{Poll, Waker};
use std::time::Duration;

use futures::future::{self, BoxFuture, FutureExt};
use parking_lot::Mutex;
use rand::Rng;

use super::SimHandle;
use crate::env::{duration_ns, ready, Connection, Env, FrameSink, FrameSource, Listener};
use crate::wire::Message;

/// Injected link characteristics, applied symmetrically to every link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NetworkProfile {
    pub rtt: Duration,
    /// Bytes per second; must be positive.
    pub bandwidth: u64,
    /// Upper bound of uniform per-message extra delay.
    pub jitter: Duration,
}

impl NetworkProfile {
    pub fn new(rtt: Duration, bandwidth: u64, jitter: Duration) -> Self {
        assert!(bandwidth > 0, "bandwidth must be positive");
        NetworkProfile { rtt, bandwidth, jitter }
    }

    /// Profile from milliseconds and megabits per second.
    pub fn from_ms_mbit(rtt_ms: u64, mbit_per_s: u64) -> Self {
        Self::new(
            Duration::from_millis(rtt_ms),
            mbit_per_s * 1_000_000 / 8,
            Duration::ZERO,
        )
    }

    /// Zero latency, 1 GiB/s.
    pub fn ideal() -> Self {
        Self::new(Duration::ZERO, 1 << 30, Duration::ZERO)
    }

    /// Serialization delay of `bytes` on one transmitter, rounded up to 1 ns.
    pub fn transmit_ns(&self, bytes: usize) -> u64 {
        let num = bytes as u128 * 1_000_000_000;
        let bw = self.bandwidth as u128;
        u64::try_from(num.div_ceil(bw)).unwrap_or(u64::MAX)
    }
}

#[derive(Default)]
pub(crate) struct NetState {
    listeners: BTreeMap<String, Arc<Mutex<AcceptQueue>>>,
    next_port: BTreeMap<String, u32>,
    crashed: BTreeSet<String>,
}

impl SimHandle {
    /// Drops every listener outside the network lock.
    pub(crate) fn clear_listeners(&self) {
        let listeners = std::mem::take(&mut self.inner.net.lock().listeners);
        drop(listeners);
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Close {
    Eof,
    Reset,
}

#[derive(Default)]
struct Pipe {
    items: VecDeque<Message>,
    closed: Option<Close>,
    waker: Option<Waker>,
    busy_until: u64,
    last_arrival: u64,
}

impl Pipe {
    fn wake(&mut self) -> Option<Waker> {
        self.waker.take()
    }
}

#[derive(Default)]
struct AcceptQueue {
    pending: VecDeque<Connection>,
    waker: Option<Waker>,
}

impl SimHandle {
    fn propagation_ns(&self) -> u64 {
        let profile = self.inner.profile;
        let half = duration_ns(profile.rtt) / 2;
        let jitter = duration_ns(profile.jitter);
        if jitter == 0 {
            half
        } else {
            half + self.with_rng(|rng| rng.random_range(0..=jitter))
        }
    }

    /// Marks a node as failed: connections it owns close with a reset.
    pub fn crash_node(&self, node: &str) {
        self.inner.net.lock().crashed.insert(node.to_string());
    }

    fn is_crashed(&self, node: &str) -> bool {
        self.inner.net.lock().crashed.contains(node)
    }

    fn connect_to(&self, from: &str, addr: &str) -> io::Result<Connection> {
        let queue = self
            .inner
            .net
            .lock()
            .listeners
            .get(addr)
            .cloned()
            .ok_or_else(|| io::Error::new(io::ErrorKind::ConnectionRefused, addr.to_string()))?;
        let server_node = addr.rsplit_once(':').map_or(addr, |(n, _)| n).to_string();
        let up = Arc::new(Mutex::new(Pipe::default()));
        let down = Arc::new(Mutex::new(Pipe::default()));
        let client = Connection {
            peer: addr.to_string(),
            sink: Box::new(SimSink::new(self.clone(), from, up.clone())),
            source: Box::new(SimSource { pipe: down.clone() }),
        };
        let server = Connection {
            peer: from.to_string(),
            sink: Box::new(SimSink::new(self.clone(), &server_node, down)),
            source: Box::new(SimSource { pipe: up }),
        };
        let arrival = self.now_ns() + self.propagation_ns();
        let mut server = Some(server);
        self.schedule_at(
            arrival,
            Box::new(move || {
                let waker = {
                    let mut q = queue.lock();
                    q.pending.extend(server.take());
                    q.waker.take()
                };
                if let Some(w) = waker {
                    w.wake();
                }
            }),
        );
        Ok(client)
    }
}

struct SimSink {
    sim: SimHandle,
    node: String,
    pipe: Arc<Mutex<Pipe>>,
}

impl SimSink {
    fn new(sim: SimHandle, node: &str, pipe: Arc<Mutex<Pipe>>) -> Self {
        SimSink {
            sim,
            node: node.to_string(),
            pipe,
        }
    }

    fn deliver_at(&self, at: u64, item: Result<Message, Close>) {
        let pipe = self.pipe.clone();
        self.sim.schedule_at(
            at,
            Box::new(move || {
                let waker = {
                    let mut p = pipe.lock();
                    if p.closed.is_none() {
                        match item {
                            Ok(m) => p.items.push_back(m),
                            Err(close) => p.closed = Some(close),
                        }
                    }
                    p.wake()
                };
                if let Some(w) = waker {
                    w.wake();
                }
            }),
        );
    }
}

impl FrameSink for SimSink {
    fn send(&mut self, message: Message) -> BoxFuture<'_, io::Result<()>> {
        let now = self.sim.now_ns();
        let tx = self.sim.inner.profile.transmit_ns(message.payload_len());
        let propagation = self.sim.propagation_ns();
        let arrival = {
            let mut p = self.pipe.lock();
            let start = now.max(p.busy_until);
            p.busy_until = start + tx;
            let arrival = (p.busy_until + propagation).max(p.last_arrival);
            p.last_arrival = arrival;
            arrival
        };
        self.deliver_at(arrival, Ok(message));
        ready(Ok(()))
    }
}

impl Drop for SimSink {
    fn drop(&mut self) {
        let close = if self.sim.is_crashed(&self.node) {
            Close::Reset
        } else {
            Close::Eof
        };
        let at = {
            let p = self.pipe.lock();
            (self.sim.now_ns() + self.sim.propagation_ns()).max(p.last_arrival)
        };
        self.deliver_at(at, Err(close));
    }
}

struct SimSource {
    pipe: Arc<Mutex<Pipe>>,
}

impl FrameSource for SimSource {
    fn recv(&mut self) -> BoxFuture<'_, io::Result<Option<Message>>> {
        let pipe = self.pipe.clone();
        future::poll_fn(move |cx| {
            let mut p = pipe.lock();
            if let Some(m) = p.items.pop_front() {
                return Poll::Ready(Ok(Some(m)));
            }
            match p.closed {
                Some(Close::Eof) => Poll::Ready(Ok(None)),
                Some(Close::Reset) => Poll::Ready(Err(io::ErrorKind::ConnectionReset.into())),
                None => {
                    p.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
        .boxed()
    }
}

struct SimListener {
    sim: SimHandle,
    addr: String,
    queue: Arc<Mutex<AcceptQueue>>,
}

impl Listener for SimListener {
    fn local_addr(&self) -> String {
        self.addr.clone()
    }

    fn accept(&mut self) -> BoxFuture<'_, io::Result<Connection>> {
        let queue = self.queue.clone();
        future::poll_fn(move |cx| {
            let mut q = queue.lock();
            match q.pending.pop_front() {
                Some(conn) => Poll::Ready(Ok(conn)),
                None => {
                    q.waker = Some(cx.waker().clone());
                    Poll::Pending
                }
            }
        })
        .boxed()
    }
}

impl Drop for SimListener {
    fn drop(&mut self) {
        let mut net = self.sim.inner.net.lock();
        if net
            .listeners
            .get(&self.addr)
            .is_some_and(|q| Arc::ptr_eq(q, &self.queue))
        {
            net.listeners.remove(&self.addr);
        }
    }
}

/// Environment of code running on one simulated node.
pub struct SimEnv {
    sim: SimHandle,
    node: String,
}

impl SimEnv {
    pub fn new(sim: SimHandle, node: &str) -> Self {
        SimEnv {
            sim,
            node: node.to_string(),
        }
    }

    pub fn handle(&self) -> &SimHandle {
        &self.sim
    }

    /// Opens a listener synchronously.
    pub fn listen_now(&self) -> Box<dyn Listener> {
        let mut net = self.sim.inner.net.lock();
        let port = net.next_port.entry(self.node.clone()).or_insert(1000);
        let addr = format!("{}:{}", self.node, *port);
        *port += 1;
        let queue = Arc::new(Mutex::new(AcceptQueue::default()));
        net.listeners.insert(addr.clone(), queue.clone());
        Box::new(SimListener {
            sim: self.sim.clone(),
            addr,
            queue,
        })
    }
}

impl Env for SimEnv {
    fn now(&self) -> Duration {
        self.sim.now()
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()> {
        self.sim.sleep(duration).boxed()
    }

    fn spawn(&self, task: BoxFuture<'static, ()>) {
        self.sim.spawn(task);
    }

    fn listen(&self) -> BoxFuture<'static, io::Result<Box<dyn Listener>>> {
        ready(Ok(self.listen_now()))
    }

    fn connect(&self, addr: &str) -> BoxFuture<'static, io::Result<Connection>> {
        ready(self.sim.connect_to(&self.node, addr))
    }

    fn random_u128(&self) -> u128 {
        self.sim.random_u128()
    }

    fn node(&self) -> String {
        self.node.clone()
    }

    fn is_simulated(&self) -> bool {
        true
    }
}
