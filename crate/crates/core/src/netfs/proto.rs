//! File protocol vocabulary carried inside `fs_request` / `fs_response` frames.

use std::fmt;

use serde::{Deserialize, Serialize};

/// Maximum bytes moved by a single read or write request.
pub const CHUNK_SIZE: usize = 64 * 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FileKind {
    File,
    Directory,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FileAttr {
    pub kind: FileKind,
    pub size: u64,
    /// Milliseconds since the Unix epoch.
    pub mtime: u64,
    pub mode: u16,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OpenMode {
    Read,
    Write,
    Rw,
    CreateTruncate,
}

impl OpenMode {
    pub fn readable(self) -> bool {
        matches!(self, OpenMode::Read | OpenMode::Rw)
    }

    pub fn writable(self) -> bool {
        !matches!(self, OpenMode::Read)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FsOp {
    Lookup {
        path: String,
    },
    Getattr {
        path: String,
    },
    Readdir {
        path: String,
    },
    Open {
        path: String,
        mode: OpenMode,
    },
    Read {
        fh: u64,
        offset: u64,
        len: u32,
    },
    Write {
        fh: u64,
        offset: u64,
        #[serde(with = "crate::wire::base64_bytes")]
        data: Vec<u8>,
    },
    Create {
        path: String,
        mode: u16,
    },
    Mkdir {
        path: String,
    },
    Unlink {
        path: String,
    },
    Rmdir {
        path: String,
    },
    Rename {
        from: String,
        to: String,
    },
    Truncate {
        path: String,
        size: u64,
    },
    Flush {
        fh: u64,
    },
    Release {
        fh: u64,
    },
}

impl FsOp {
    /// Operations that change the exported tree or file contents.
    pub fn is_mutation(&self) -> bool {
        match self {
            FsOp::Write { .. }
            | FsOp::Create { .. }
            | FsOp::Mkdir { .. }
            | FsOp::Unlink { .. }
            | FsOp::Rmdir { .. }
            | FsOp::Rename { .. }
            | FsOp::Truncate { .. } => true,
            FsOp::Open { mode, .. } => mode.writable(),
            _ => false,
        }
    }

    /// File content bytes carried by the request.
    pub fn payload_len(&self) -> usize {
        match self {
            FsOp::Write { data, .. } => data.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum FsReply {
    Attr {
        attr: FileAttr,
    },
    Entries {
        names: Vec<String>,
    },
    Opened {
        fh: u64,
        attr: FileAttr,
    },
    Data {
        #[serde(with = "crate::wire::base64_bytes")]
        data: Vec<u8>,
    },
    Written {
        count: u64,
    },
    Done,
}

impl FsReply {
    pub fn payload_len(&self) -> usize {
        match self {
            FsReply::Data { data } => data.len(),
            _ => 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FsErrorCode {
    NotFound,
    Exists,
    NotDir,
    IsDir,
    NotEmpty,
    BadHandle,
    ReadOnly,
    Io,
}

impl FsErrorCode {
    pub fn as_str(self) -> &'static str {
        match self {
            FsErrorCode::NotFound => "not-found",
            FsErrorCode::Exists => "exists",
            FsErrorCode::NotDir => "not-dir",
            FsErrorCode::IsDir => "is-dir",
            FsErrorCode::NotEmpty => "not-empty",
            FsErrorCode::BadHandle => "bad-handle",
            FsErrorCode::ReadOnly => "read-only",
            FsErrorCode::Io => "io",
        }
    }
}

impl fmt::Display for FsErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::error::Error for FsErrorCode {}

/// Result half of an `fs_response` frame: `{"ok":{..}}` or `{"error":"code"}`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FsOutcome {
    Ok(FsReply),
    Error(FsErrorCode),
}

impl From<Result<FsReply, FsErrorCode>> for FsOutcome {
    fn from(r: Result<FsReply, FsErrorCode>) -> Self {
        match r {
            Ok(reply) => FsOutcome::Ok(reply),
            Err(code) => FsOutcome::Error(code),
        }
    }
}

impl From<FsOutcome> for Result<FsReply, FsErrorCode> {
    fn from(o: FsOutcome) -> Self {
        match o {
            FsOutcome::Ok(reply) => Ok(reply),
            FsOutcome::Error(code) => Err(code),
        }
    }
}
