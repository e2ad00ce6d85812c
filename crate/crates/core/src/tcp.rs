//! Real-network environment on top of tokio TCP.

use std::io;
use std::net::SocketAddr;
use std::time::{Duration, Instant};

use futures::future::{BoxFuture, FutureExt};
use tokio::io::{AsyncReadExt, AsyncWriteExt};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};

use crate::env::{Connection, Env, FrameSink, FrameSource, Listener};
use crate::wire::{encode_frame, FrameDecoder, Message};

/// Must be used from inside a tokio runtime.
pub struct TcpEnv {
    started: Instant,
    host: String,
}

impl TcpEnv {
    pub fn new() -> Self {
        Self::with_host("127.0.0.1")
    }

    pub fn with_host(host: impl Into<String>) -> Self {
        TcpEnv {
            started: Instant::now(),
            host: host.into(),
        }
    }
}

impl Default for TcpEnv {
    fn default() -> Self {
        Self::new()
    }
}

impl Env for TcpEnv {
    fn now(&self) -> Duration {
        self.started.elapsed()
    }

    fn sleep(&self, duration: Duration) -> BoxFuture<'static, ()> {
        tokio::time::sleep(duration).boxed()
    }

    fn spawn(&self, task: BoxFuture<'static, ()>) {
        tokio::spawn(task);
    }

    fn listen(&self) -> BoxFuture<'static, io::Result<Box<dyn Listener>>> {
        let addr = format!("{}:0", self.host);
        async move {
            let listener = TcpListener::bind(addr).await?;
            Ok(Box::new(TcpFrameListener::new(listener)?) as Box<dyn Listener>)
        }
        .boxed()
    }

    fn connect(&self, addr: &str) -> BoxFuture<'static, io::Result<Connection>> {
        let addr = addr.to_string();
        async move {
            let stream = TcpStream::connect(&addr).await?;
            Ok(framed(stream, addr))
        }
        .boxed()
    }

    fn random_u128(&self) -> u128 {
        rand::random()
    }

    fn node(&self) -> String {
        self.host.clone()
    }

    fn is_simulated(&self) -> bool {
        false
    }
}

pub struct TcpFrameListener {
    listener: TcpListener,
    addr: SocketAddr,
}

impl TcpFrameListener {
    pub fn new(listener: TcpListener) -> io::Result<Self> {
        let addr = listener.local_addr()?;
        Ok(TcpFrameListener { listener, addr })
    }

    pub async fn bind(addr: &str) -> io::Result<Self> {
        Self::new(TcpListener::bind(addr).await?)
    }
}

impl Listener for TcpFrameListener {
    fn local_addr(&self) -> String {
        self.addr.to_string()
    }

    fn accept(&mut self) -> BoxFuture<'_, io::Result<Connection>> {
        async move {
            let (stream, peer) = self.listener.accept().await?;
            Ok(framed(stream, peer.to_string()))
        }
        .boxed()
    }
}

pub fn framed(stream: TcpStream, peer: String) -> Connection {
    let _ = stream.set_nodelay(true);
    let (read, write) = stream.into_split();
    Connection {
        peer,
        sink: Box::new(TcpSink { write }),
        source: Box::new(TcpSource {
            read,
            decoder: FrameDecoder::new(),
            buf: vec![0; 64 * 1024],
        }),
    }
}

struct TcpSink {
    write: OwnedWriteHalf,
}

impl FrameSink for TcpSink {
    fn send(&mut self, message: Message) -> BoxFuture<'_, io::Result<()>> {
        async move {
            let frame = encode_frame(&message).map_err(|e| io::Error::new(io::ErrorKind::InvalidInput, e))?;
            self.write.write_all(&frame).await?;
            self.write.flush().await
        }
        .boxed()
    }
}

struct TcpSource {
    read: OwnedReadHalf,
    decoder: FrameDecoder,
    buf: Vec<u8>,
}

impl FrameSource for TcpSource {
    fn recv(&mut self) -> BoxFuture<'_, io::Result<Option<Message>>> {
        async move {
            loop {
                if let Some(message) = self
                    .decoder
                    .next_message()
                    .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))?
                {
                    return Ok(Some(message));
                }
                let n = self.read.read(&mut self.buf).await?;
                if n == 0 {
                    return if self.decoder.pending() == 0 {
                        Ok(None)
                    } else {
                        Err(io::ErrorKind::UnexpectedEof.into())
                    };
                }
                self.decoder.push(&self.buf[..n]);
            }
        }
        .boxed()
    }
}
