//! Execution environment seen by runtimes, file-system peers and the broker:
//! a clock, a task spawner and a message-oriented network. Implemented by the
//! deterministic simulator and by real TCP.

use std::future::Future;
use std::io;
use std::time::Duration;

use futures::future::{self, BoxFuture, Either, FutureExt};

use crate::wire::Message;

pub trait FrameSink: Send {
    fn send(&mut self, message: Message) -> BoxFuture<'_, io::Result<()>>;
}

pub trait FrameSource: Send {
    /// `Ok(None)` on orderly close; an error when the peer vanished abruptly.
    fn recv(&mut self) -> BoxFuture<'_, io::Result<Option<Message>>>;
}

pub struct Connection {
    pub peer: String,
    pub sink: Box<dyn FrameSink>,
    pub source: Box<dyn FrameSource>,
}

impl Connection {
    /// Sends one message and waits for the next inbound one.
    pub async fn request(&mut self, message: Message) -> io::Result<Message> {
        self.sink.send(message).await?;
        match self.source.recv().await? {
            Some(reply) => Ok(reply),
            None => Err(io::ErrorKind::UnexpectedEof.into()),
        }
    }
}

pub trait Listener: Send {
    fn local_addr(&self) -> String;
    fn accept(&mut self) -> BoxFuture<'_, io::Result<Connection>>;
}

pub trait Env: Send + Sync + 'static {
    /// Time since the environment started (virtual under simulation).
    fn now(&self) -> Duration;
    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()>;
    fn spawn(&self, task: BoxFuture<'static, ()>);
    /// Opens a listener on this environment's host.
    fn listen(&self) -> BoxFuture<'static, io::Result<Box<dyn Listener>>>;
    fn connect(&self, addr: &str) -> BoxFuture<'static, io::Result<Connection>>;
    fn random_u128(&self) -> u128;
    /// Label of the machine this environment runs on.
    fn node(&self) -> String;
    fn is_simulated(&self) -> bool;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("deadline elapsed")]
pub struct Elapsed;

/// Runs `fut` until it completes or `limit` passes on the environment clock.
pub async fn timeout<F: Future>(env: &dyn Env, limit: Duration, fut: F) -> Result<F::Output, Elapsed> {
    let fut = std::pin::pin!(fut);
    match future::select(fut, env.sleep(limit)).await {
        Either::Left((out, _)) => Ok(out),
        Either::Right(_) => Err(Elapsed),
    }
}

/// Like [`timeout`], with `None` meaning no limit.
pub async fn maybe_timeout<F: Future>(env: &dyn Env, limit: Option<Duration>, fut: F) -> Result<F::Output, Elapsed> {
    match limit {
        Some(limit) => timeout(env, limit, fut).await,
        None => Ok(fut.await),
    }
}

pub(crate) fn ready<T: Send + 'static>(value: T) -> BoxFuture<'static, T> {
    future::ready(value).boxed()
}

pub(crate) fn duration_ns(d: Duration) -> u64 {
    u64::try_from(d.as_nanos()).unwrap_or(u64::MAX)
}
