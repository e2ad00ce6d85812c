//! Export daemon: serves one local directory to remote sessions.

use std::collections::BTreeMap;
use std::fs::{self, File, Metadata, OpenOptions};
use std::io;
use std::os::unix::fs::{FileExt, OpenOptionsExt, PermissionsExt};
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::UNIX_EPOCH;

use futures::FutureExt;
use parking_lot::Mutex;

use super::path::normalize;
use super::proto::{FileAttr, FileKind, FsErrorCode, FsOp, FsReply, OpenMode, CHUNK_SIZE};
use super::ExportConfig;
use crate::env::{Connection, Env, Listener};
use crate::volume::Broker;
use crate::wire::Message;

pub const FILE_MODE: u16 = 0o644;
pub const DIR_MODE: u16 = 0o755;

type FsResult<T> = Result<T, FsErrorCode>;

/// Shared state of one export. Operations on the tree are serialized.
pub struct Export {
    config: ExportConfig,
    tree: Mutex<()>,
    next_session: AtomicU64,
}

enum Located {
    Found(PathBuf, Metadata),
    /// The final component does not exist but its parent is a directory.
    Missing(PathBuf),
}

impl Export {
    pub fn new(config: ExportConfig) -> io::Result<Arc<Self>> {
        let meta = fs::metadata(&config.root)?;
        if !meta.is_dir() {
            return Err(io::Error::new(
                io::ErrorKind::InvalidInput,
                format!("{} is not a directory", config.root.display()),
            ));
        }
        Ok(Arc::new(Export {
            config,
            tree: Mutex::new(()),
            next_session: AtomicU64::new(1),
        }))
    }

    pub fn config(&self) -> &ExportConfig {
        &self.config
    }

    /// A fresh session with an empty handle table.
    pub fn open_session(self: &Arc<Self>) -> Session {
        Session {
            export: self.clone(),
            id: self.next_session.fetch_add(1, Ordering::Relaxed),
            handles: BTreeMap::new(),
            next_fh: 1,
            last_seq: None,
        }
    }

    fn locate(&self, parts: &[String]) -> FsResult<Located> {
        let mut cur = self.config.root.clone();
        if parts.is_empty() {
            let meta = fs::metadata(&cur).map_err(io_code)?;
            return Ok(Located::Found(cur, meta));
        }
        let last = parts.len() - 1;
        for (i, part) in parts.iter().enumerate() {
            cur.push(part);
            match fs::symlink_metadata(&cur) {
                Err(e) if e.kind() == io::ErrorKind::NotFound => {
                    return if i == last {
                        Ok(Located::Missing(cur))
                    } else {
                        Err(FsErrorCode::NotFound)
                    };
                }
                Err(e) if e.raw_os_error() == Some(20) => return Err(FsErrorCode::NotDir),
                Err(e) => return Err(io_code(e)),
                // Links could point outside the root; they do not exist here.
                Ok(meta) if meta.file_type().is_symlink() => return Err(FsErrorCode::NotFound),
                Ok(meta) if i == last => return Ok(Located::Found(cur, meta)),
                Ok(meta) if !meta.is_dir() => return Err(FsErrorCode::NotDir),
                Ok(_) => {}
            }
        }
        unreachable!("loop returns on the last component")
    }

    fn existing(&self, path: &str) -> FsResult<(PathBuf, Metadata)> {
        match self.locate(&normalize(path)?)? {
            Located::Found(p, m) => Ok((p, m)),
            Located::Missing(_) => Err(FsErrorCode::NotFound),
        }
    }
}

fn io_code(e: io::Error) -> FsErrorCode {
    match e.kind() {
        io::ErrorKind::NotFound => FsErrorCode::NotFound,
        io::ErrorKind::AlreadyExists => FsErrorCode::Exists,
        _ => match e.raw_os_error() {
            Some(20) => FsErrorCode::NotDir,
            Some(21) => FsErrorCode::IsDir,
            Some(39) => FsErrorCode::NotEmpty,
            Some(30) => FsErrorCode::ReadOnly,
            _ => FsErrorCode::Io,
        },
    }
}

pub fn attr_of(meta: &Metadata) -> FileAttr {
    let kind = if meta.is_dir() {
        FileKind::Directory
    } else {
        FileKind::File
    };
    let mtime = meta
        .modified()
        .ok()
        .and_then(|t| t.duration_since(UNIX_EPOCH).ok())
        .map_or(0, |d| d.as_millis() as u64);
    FileAttr {
        kind,
        size: if meta.is_dir() { 0 } else { meta.len() },
        mtime,
        mode: (meta.permissions().mode() & 0o7777) as u16,
    }
}

fn set_mode(path: &std::path::Path, mode: u16) -> FsResult<()> {
    fs::set_permissions(path, fs::Permissions::from_mode(u32::from(mode & 0o7777))).map_err(io_code)
}

struct Handle {
    file: File,
    mode: OpenMode,
}

/// One client's view of an export: its handle table and request ordering.
pub struct Session {
    export: Arc<Export>,
    id: u64,
    handles: BTreeMap<u64, Handle>,
    next_fh: u64,
    last_seq: Option<u64>,
}

impl Session {
    pub fn id(&self) -> u64 {
        self.id
    }

    /// Applies a sequenced request. Requests must arrive with strictly
    /// increasing `seq`; a stale or repeated one is refused with "io".
    pub fn handle_request(&mut self, seq: u64, op: FsOp) -> FsResult<FsReply> {
        if self.last_seq.is_some_and(|last| seq <= last) {
            return Err(FsErrorCode::Io);
        }
        self.last_seq = Some(seq);
        self.handle(op)
    }

    /// Applies one operation against the exported tree.
    pub fn handle(&mut self, op: FsOp) -> FsResult<FsReply> {
        let export = self.export.clone();
        if export.config.read_only && op.is_mutation() {
            return Err(FsErrorCode::ReadOnly);
        }
        let _tree = export.tree.lock();
        match op {
            FsOp::Lookup { path } | FsOp::Getattr { path } => {
                let (_, meta) = export.existing(&path)?;
                Ok(FsReply::Attr { attr: attr_of(&meta) })
            }
            FsOp::Readdir { path } => {
                let (dir, meta) = export.existing(&path)?;
                if !meta.is_dir() {
                    return Err(FsErrorCode::NotDir);
                }
                let mut names = Vec::new();
                for entry in fs::read_dir(dir).map_err(io_code)? {
                    let entry = entry.map_err(io_code)?;
                    if entry.file_type().map_err(io_code)?.is_symlink() {
                        continue;
                    }
                    if let Ok(name) = entry.file_name().into_string() {
                        names.push(name);
                    }
                }
                names.sort();
                Ok(FsReply::Entries { names })
            }
            FsOp::Open { path, mode } => self.open(&export, &path, mode),
            FsOp::Read { fh, offset, len } => {
                let handle = self.handles.get(&fh).ok_or(FsErrorCode::BadHandle)?;
                if !handle.mode.readable() {
                    return Err(FsErrorCode::BadHandle);
                }
                if len as usize > CHUNK_SIZE {
                    return Err(FsErrorCode::Io);
                }
                let mut data = vec![0u8; len as usize];
                let mut filled = 0;
                while filled < data.len() {
                    match handle.file.read_at(&mut data[filled..], offset + filled as u64) {
                        Ok(0) => break,
                        Ok(n) => filled += n,
                        Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                        Err(e) => return Err(io_code(e)),
                    }
                }
                data.truncate(filled);
                Ok(FsReply::Data { data })
            }
            FsOp::Write { fh, offset, data } => {
                let handle = self.handles.get(&fh).ok_or(FsErrorCode::BadHandle)?;
                if !handle.mode.writable() {
                    return Err(FsErrorCode::BadHandle);
                }
                if data.len() > CHUNK_SIZE {
                    return Err(FsErrorCode::Io);
                }
                handle.file.write_all_at(&data, offset).map_err(io_code)?;
                Ok(FsReply::Written {
                    count: data.len() as u64,
                })
            }
            FsOp::Create { path, mode } => {
                let parts = normalize(&path)?;
                match export.locate(&parts)? {
                    Located::Found(..) => Err(FsErrorCode::Exists),
                    Located::Missing(p) => {
                        OpenOptions::new()
                            .write(true)
                            .create_new(true)
                            .open(&p)
                            .map_err(io_code)?;
                        set_mode(&p, mode)?;
                        let meta = fs::metadata(&p).map_err(io_code)?;
                        Ok(FsReply::Attr { attr: attr_of(&meta) })
                    }
                }
            }
            FsOp::Mkdir { path } => {
                let parts = normalize(&path)?;
                match export.locate(&parts)? {
                    Located::Found(..) => Err(FsErrorCode::Exists),
                    Located::Missing(p) => {
                        fs::create_dir(&p).map_err(io_code)?;
                        set_mode(&p, DIR_MODE)?;
                        let meta = fs::metadata(&p).map_err(io_code)?;
                        Ok(FsReply::Attr { attr: attr_of(&meta) })
                    }
                }
            }
            FsOp::Unlink { path } => {
                let (p, meta) = export.existing(&path)?;
                if meta.is_dir() {
                    return Err(FsErrorCode::IsDir);
                }
                fs::remove_file(p).map_err(io_code)?;
                Ok(FsReply::Done)
            }
            FsOp::Rmdir { path } => {
                let parts = normalize(&path)?;
                if parts.is_empty() {
                    return Err(FsErrorCode::Io);
                }
                let (p, meta) = export.existing(&path)?;
                if !meta.is_dir() {
                    return Err(FsErrorCode::NotDir);
                }
                if fs::read_dir(&p).map_err(io_code)?.next().is_some() {
                    return Err(FsErrorCode::NotEmpty);
                }
                fs::remove_dir(p).map_err(io_code)?;
                Ok(FsReply::Done)
            }
            FsOp::Rename { from, to } => {
                let src = normalize(&from)?;
                let dst = normalize(&to)?;
                if src.is_empty() || dst.is_empty() {
                    return Err(FsErrorCode::Io);
                }
                let (src_path, src_meta) = match export.locate(&src)? {
                    Located::Found(p, m) => (p, m),
                    Located::Missing(_) => return Err(FsErrorCode::NotFound),
                };
                let dst_found = export.locate(&dst)?;
                if src == dst {
                    return Ok(FsReply::Done);
                }
                if src_meta.is_dir() && dst.starts_with(&src) {
                    return Err(FsErrorCode::Io);
                }
                let dst_path = match dst_found {
                    Located::Missing(p) => p,
                    Located::Found(p, dst_meta) => {
                        match (src_meta.is_dir(), dst_meta.is_dir()) {
                            (false, true) => return Err(FsErrorCode::IsDir),
                            (true, false) => return Err(FsErrorCode::NotDir),
                            (true, true) => {
                                if fs::read_dir(&p).map_err(io_code)?.next().is_some() {
                                    return Err(FsErrorCode::NotEmpty);
                                }
                            }
                            (false, false) => {}
                        }
                        p
                    }
                };
                fs::rename(src_path, dst_path).map_err(io_code)?;
                Ok(FsReply::Done)
            }
            FsOp::Truncate { path, size } => {
                let (p, meta) = export.existing(&path)?;
                if meta.is_dir() {
                    return Err(FsErrorCode::IsDir);
                }
                let file = OpenOptions::new().write(true).open(p).map_err(io_code)?;
                file.set_len(size).map_err(io_code)?;
                Ok(FsReply::Done)
            }
            FsOp::Flush { fh } => {
                self.handles.get(&fh).ok_or(FsErrorCode::BadHandle)?;
                Ok(FsReply::Done)
            }
            FsOp::Release { fh } => {
                self.handles.remove(&fh).ok_or(FsErrorCode::BadHandle)?;
                Ok(FsReply::Done)
            }
        }
    }

    fn open(&mut self, export: &Export, path: &str, mode: OpenMode) -> FsResult<FsReply> {
        let parts = normalize(path)?;
        let file = match (export.locate(&parts)?, mode) {
            (Located::Found(_, meta), _) if meta.is_dir() => return Err(FsErrorCode::IsDir),
            (Located::Missing(_), OpenMode::Read | OpenMode::Write | OpenMode::Rw) => {
                return Err(FsErrorCode::NotFound)
            }
            (Located::Missing(p), OpenMode::CreateTruncate) => {
                let file = OpenOptions::new()
                    .write(true)
                    .create_new(true)
                    .mode(u32::from(FILE_MODE))
                    .open(&p)
                    .map_err(io_code)?;
                set_mode(&p, FILE_MODE)?;
                file
            }
            (Located::Found(p, _), mode) => OpenOptions::new()
                .read(mode.readable())
                .write(mode.writable())
                .truncate(mode == OpenMode::CreateTruncate)
                .open(p)
                .map_err(io_code)?,
        };
        let attr = attr_of(&file.metadata().map_err(io_code)?);
        let fh = self.next_fh;
        self.next_fh += 1;
        self.handles.insert(fh, Handle { file, mode });
        Ok(FsReply::Opened { fh, attr })
    }
}

/// Accepts connections until the listener fails. A connection opening with
/// `hello` becomes a file session once its token matches; one opening with
/// `volume_rpc` is served by `broker` when present.
pub async fn serve_export(
    env: Arc<dyn Env>,
    mut listener: Box<dyn Listener>,
    export: Arc<Export>,
    broker: Option<Arc<Broker>>,
) {
    while let Ok(conn) = listener.accept().await {
        env.spawn(serve_connection(export.clone(), broker.clone(), conn).boxed());
    }
}

async fn serve_connection(export: Arc<Export>, broker: Option<Arc<Broker>>, mut conn: Connection) {
    let Ok(Some(first)) = conn.source.recv().await else {
        return;
    };
    match first {
        Message::Hello { token, .. } => {
            if token.as_deref() != Some(export.config.token.as_str()) {
                let reject = Message::Reject {
                    reason: "bad-token".into(),
                };
                let _ = conn.sink.send(reject).await;
                return;
            }
            let mut session = export.open_session();
            let accept = Message::Accept { session: session.id() };
            if conn.sink.send(accept).await.is_err() {
                return;
            }
            while let Ok(Some(message)) = conn.source.recv().await {
                let Message::FsRequest { session: sid, seq, op } = message else {
                    return;
                };
                let result = if sid == session.id() {
                    session.handle_request(seq, op)
                } else {
                    Err(FsErrorCode::BadHandle)
                };
                let reply = Message::FsResponse {
                    session: sid,
                    seq,
                    result: result.into(),
                };
                if conn.sink.send(reply).await.is_err() {
                    return;
                }
            }
        }
        Message::VolumeRpc { call } => {
            let Some(broker) = broker else {
                let _ = conn
                    .sink
                    .send(Message::Reject {
                        reason: "no-broker".into(),
                    })
                    .await;
                return;
            };
            let mut next = Some(call);
            while let Some(call) = next.take() {
                let result = broker.handle_call(call).await;
                if conn.sink.send(Message::VolumeReply { result }).await.is_err() {
                    return;
                }
                if let Ok(Some(Message::VolumeRpc { call })) = conn.source.recv().await {
                    next = Some(call);
                }
            }
        }
        _ => {}
    }
}
