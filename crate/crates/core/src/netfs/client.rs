//! Client side of the file protocol.

use std::collections::BTreeMap;
use std::sync::Arc;
use std::time::Duration;

use super::path::{join, normalize};
use super::proto::{FileAttr, FsErrorCode, FsOp, FsReply, OpenMode, CHUNK_SIZE};
use super::{DEFAULT_ATTR_TTL, DEFAULT_READ_WINDOW};
use crate::env::{Connection, Env};
use crate::volume::MountSpec;
use crate::wire::Message;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum FsClientError {
    #[error("{0}")]
    Server(FsErrorCode),
    #[error("connection to the export was lost")]
    ConnectionLost,
    #[error("export refused the session: {0}")]
    Rejected(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("task has no workspace")]
    NoWorkspace,
    #[error("{0} is outside the workspace")]
    OutsideWorkspace(String),
}

impl From<FsErrorCode> for FsClientError {
    fn from(code: FsErrorCode) -> Self {
        FsClientError::Server(code)
    }
}

/// Counters of frames this session has put on the wire.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct WireStats {
    pub requests: u64,
    pub reads: u64,
}

/// A session with an export daemon.
pub struct FsSession {
    env: Arc<dyn Env>,
    conn: Option<Connection>,
    session: u64,
    next_seq: u64,
    attr_ttl: Duration,
    attrs: BTreeMap<String, (FileAttr, Duration)>,
    stats: WireStats,
}

impl FsSession {
    pub async fn connect(
        env: Arc<dyn Env>,
        endpoint: &str,
        token: &str,
        client_id: &str,
    ) -> Result<Self, FsClientError> {
        let mut conn = env.connect(endpoint).await.map_err(|_| FsClientError::ConnectionLost)?;
        let hello = Message::Hello {
            task_id: client_id.to_string(),
            token: Some(token.to_string()),
        };
        let session = match conn.request(hello).await {
            Ok(Message::Accept { session }) => session,
            Ok(Message::Reject { reason }) => return Err(FsClientError::Rejected(reason)),
            Ok(other) => return Err(FsClientError::Protocol(format!("unexpected {}", other.kind()))),
            Err(_) => return Err(FsClientError::ConnectionLost),
        };
        Ok(FsSession {
            env,
            conn: Some(conn),
            session,
            next_seq: 1,
            attr_ttl: DEFAULT_ATTR_TTL,
            attrs: BTreeMap::new(),
            stats: WireStats::default(),
        })
    }

    pub fn with_attr_ttl(mut self, ttl: Duration) -> Self {
        self.attr_ttl = ttl;
        self
    }

    pub fn session_id(&self) -> u64 {
        self.session
    }

    pub fn stats(&self) -> WireStats {
        self.stats
    }

    /// Sends one request and waits for its response. `getattr` and `lookup`
    /// answers are cached for the attribute TTL; any mutation clears the cache.
    pub async fn fs_call(&mut self, op: FsOp) -> Result<FsReply, FsClientError> {
        let cache_key = match &op {
            FsOp::Getattr { path } | FsOp::Lookup { path } => Some(cache_key(path)?),
            _ => None,
        };
        if let Some(key) = &cache_key {
            if let Some((attr, expires)) = self.attrs.get(key) {
                if self.env.now() < *expires {
                    return Ok(FsReply::Attr { attr: *attr });
                }
            }
        }
        let mut results = self.fs_call_batch(vec![op]).await?;
        let reply = results.pop().expect("one response per request")?;
        if let (Some(key), FsReply::Attr { attr }) = (cache_key, &reply) {
            self.attrs.insert(key, (*attr, self.env.now() + self.attr_ttl));
        }
        Ok(reply)
    }

    /// Sends every request before reading any response, so the batch costs
    /// one round trip. Results are in request order.
    pub async fn fs_call_batch(&mut self, ops: Vec<FsOp>) -> Result<Vec<Result<FsReply, FsErrorCode>>, FsClientError> {
        if ops.iter().any(FsOp::is_mutation) {
            self.attrs.clear();
        }
        let conn = self.conn.as_mut().ok_or(FsClientError::ConnectionLost)?;
        let first = self.next_seq;
        let count = ops.len() as u64;
        for op in ops {
            if matches!(op, FsOp::Read { .. }) {
                self.stats.reads += 1;
            }
            self.stats.requests += 1;
            let request = Message::FsRequest {
                session: self.session,
                seq: self.next_seq,
                op,
            };
            self.next_seq += 1;
            if conn.sink.send(request).await.is_err() {
                self.conn = None;
                return Err(FsClientError::ConnectionLost);
            }
        }
        let mut results = Vec::with_capacity(count as usize);
        for expected in first..first + count {
            match conn.source.recv().await {
                Ok(Some(Message::FsResponse { seq, result, .. })) if seq == expected => {
                    results.push(result.into());
                }
                Ok(Some(other)) => {
                    self.conn = None;
                    return Err(FsClientError::Protocol(format!(
                        "expected response {expected}, got {}",
                        other.kind()
                    )));
                }
                Ok(None) | Err(_) => {
                    self.conn = None;
                    return Err(FsClientError::ConnectionLost);
                }
            }
        }
        Ok(results)
    }

    pub async fn getattr(&mut self, path: &str) -> Result<FileAttr, FsClientError> {
        match self.fs_call(FsOp::Getattr { path: path.into() }).await? {
            FsReply::Attr { attr } => Ok(attr),
            other => Err(unexpected(&other)),
        }
    }

    pub async fn readdir(&mut self, path: &str) -> Result<Vec<String>, FsClientError> {
        match self.fs_call(FsOp::Readdir { path: path.into() }).await? {
            FsReply::Entries { names } => Ok(names),
            other => Err(unexpected(&other)),
        }
    }

    /// Opens always go to the server, which is what makes a reopen observe
    /// content released by other sessions.
    pub async fn open(&mut self, path: &str, mode: OpenMode) -> Result<(u64, FileAttr), FsClientError> {
        match self
            .fs_call(FsOp::Open {
                path: path.into(),
                mode,
            })
            .await?
        {
            FsReply::Opened { fh, attr } => Ok((fh, attr)),
            other => Err(unexpected(&other)),
        }
    }

    pub async fn release(&mut self, fh: u64) -> Result<(), FsClientError> {
        self.fs_call(FsOp::Release { fh }).await.map(drop)
    }

    /// Reads `len` bytes at `offset` through an open handle, one chunk per
    /// request, keeping up to `window` requests in flight.
    pub async fn read_range(
        &mut self,
        fh: u64,
        offset: u64,
        len: u64,
        window: usize,
    ) -> Result<Vec<u8>, FsClientError> {
        let window = window.max(1);
        let chunk = CHUNK_SIZE as u64;
        let chunks: Vec<(u64, u32)> = (0..len.div_ceil(chunk))
            .map(|i| {
                let start = offset + i * chunk;
                (start, chunk.min(offset + len - start) as u32)
            })
            .collect();
        let mut data = Vec::with_capacity(len as usize);
        for round in chunks.chunks(window) {
            let ops = round
                .iter()
                .map(|&(offset, len)| FsOp::Read { fh, offset, len })
                .collect();
            for result in self.fs_call_batch(ops).await? {
                match result? {
                    FsReply::Data { data: bytes } => data.extend_from_slice(&bytes),
                    other => return Err(unexpected(&other)),
                }
            }
        }
        Ok(data)
    }

    /// Opens `path`, reads it whole with `window` reads in flight and
    /// releases it. Issues exactly ceil(size / chunk) read requests.
    pub async fn read_file(&mut self, path: &str, window: usize) -> Result<Vec<u8>, FsClientError> {
        let (fh, attr) = self.open(path, OpenMode::Read).await?;
        let data = self.read_range(fh, 0, attr.size, window).await;
        let released = self.release(fh).await;
        let data = data?;
        released?;
        Ok(data)
    }

    /// Replaces the content of `path`, creating it when missing; the data is
    /// visible to later opens once this returns.
    pub async fn write_file(&mut self, path: &str, data: &[u8]) -> Result<(), FsClientError> {
        let (fh, _) = self.open(path, OpenMode::CreateTruncate).await?;
        self.write_at(fh, 0, data).await?;
        self.fs_call(FsOp::Flush { fh }).await?;
        self.release(fh).await
    }

    /// Writes `data` at `offset` in chunk-sized requests.
    pub async fn write_at(&mut self, fh: u64, offset: u64, data: &[u8]) -> Result<(), FsClientError> {
        let ops: Vec<FsOp> = data
            .chunks(CHUNK_SIZE)
            .enumerate()
            .map(|(i, piece)| FsOp::Write {
                fh,
                offset: offset + (i * CHUNK_SIZE) as u64,
                data: piece.to_vec(),
            })
            .collect();
        for window in ops.chunks(DEFAULT_READ_WINDOW) {
            for result in self.fs_call_batch(window.to_vec()).await? {
                result?;
            }
        }
        Ok(())
    }

    /// Drops the connection; later calls report a lost connection.
    pub fn disconnect(&mut self) {
        self.conn = None;
    }
}

fn cache_key(path: &str) -> Result<String, FsClientError> {
    Ok(join(&normalize(path)?))
}

fn unexpected(reply: &FsReply) -> FsClientError {
    FsClientError::Protocol(format!("unexpected reply {reply:?}"))
}

/// A task's mounted workspace: paths under the mount point map onto the
/// exported tree.
pub struct Workspace {
    mount: MountSpec,
    session: FsSession,
}

impl Workspace {
    pub async fn connect(env: Arc<dyn Env>, client_id: &str, mount: MountSpec) -> Result<Self, FsClientError> {
        let session = FsSession::connect(env, &mount.endpoint, &mount.token, client_id).await?;
        Ok(Workspace { mount, session })
    }

    pub fn mount(&self) -> &MountSpec {
        &self.mount
    }

    pub fn session(&mut self) -> &mut FsSession {
        &mut self.session
    }

    /// Path on the export for a path inside the mount.
    pub fn export_path(&self, path: &str) -> Result<String, FsClientError> {
        let rest = path
            .strip_prefix(self.mount.mount_path.as_str())
            .filter(|rest| rest.is_empty() || rest.starts_with('/'))
            .ok_or_else(|| FsClientError::OutsideWorkspace(path.to_string()))?;
        Ok(if rest.is_empty() { "/".into() } else { rest.into() })
    }

    pub async fn read(&mut self, path: &str) -> Result<Vec<u8>, FsClientError> {
        let p = self.export_path(path)?;
        self.session.read_file(&p, DEFAULT_READ_WINDOW).await
    }

    pub async fn write(&mut self, path: &str, data: &[u8]) -> Result<(), FsClientError> {
        let p = self.export_path(path)?;
        self.session.write_file(&p, data).await
    }

    pub async fn list(&mut self, path: &str) -> Result<Vec<String>, FsClientError> {
        let p = self.export_path(path)?;
        self.session.readdir(&p).await
    }

    pub async fn stat(&mut self, path: &str) -> Result<FileAttr, FsClientError> {
        let p = self.export_path(path)?;
        self.session.getattr(&p).await
    }
}
