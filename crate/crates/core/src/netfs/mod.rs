//! Networked workspace file system: an export daemon serving a local
//! directory and a client used by remote tasks.

pub mod client;
pub mod path;
pub mod proto;
pub mod server;

use std::path::PathBuf;
use std::time::Duration;

pub use client::{FsClientError, FsSession, Workspace};
pub use proto::{FileAttr, FileKind, FsErrorCode, FsOp, FsOutcome, FsReply, OpenMode, CHUNK_SIZE};
pub use server::{serve_export, Export, Session};

pub const DEFAULT_ATTR_TTL: Duration = Duration::from_millis(500);

/// Default number of read requests kept in flight by [`FsSession::read_file`].
pub const DEFAULT_READ_WINDOW: usize = 16;

#[derive(Debug, Clone)]
pub struct ExportConfig {
    pub root: PathBuf,
    pub read_only: bool,
    pub token: String,
    pub attr_ttl: Duration,
}

impl ExportConfig {
    pub fn new(root: impl Into<PathBuf>, token: impl Into<String>) -> Self {
        ExportConfig {
            root: root.into(),
            read_only: false,
            token: token.into(),
            attr_ttl: DEFAULT_ATTR_TTL,
        }
    }

    pub fn read_only(mut self, read_only: bool) -> Self {
        self.read_only = read_only;
        self
    }
}
