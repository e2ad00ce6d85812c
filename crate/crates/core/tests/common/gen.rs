//! Seeded generators for wire messages.

use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::{Map, Number, Value};

use taskmesh::netfs::{FileAttr, FileKind, FsErrorCode, FsOp, FsOutcome, FsReply, OpenMode};
use taskmesh::task::{Inputs, TaskError, TaskId, TaskSpec, TaskState, VolumeId};
use taskmesh::volume::{MountSpec, VolumeCall, VolumeOutcome};
use taskmesh::wire::{LogStream, Message};

const ALPHABET: &[char] = &[
    'a', 'b', 'z', 'A', '0', '9', ' ', '_', '-', '"', '\\', '/', '\n', '\t', '\u{0}', '\u{1f}', 'é', 'ß', '€', '日',
    '😀', '\u{ffff}',
];

pub fn string(rng: &mut impl Rng, max: usize) -> String {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| *ALPHABET.choose(rng).unwrap()).collect()
}

fn ident(rng: &mut impl Rng) -> String {
    let n = rng.random_range(1..=10);
    (0..n)
        .map(|i| {
            let set: &[u8] = if i == 0 { b"abcxyz" } else { b"abcxyz019_-" };
            *set.choose(rng).unwrap() as char
        })
        .collect()
}

pub fn number(rng: &mut impl Rng) -> Value {
    match rng.random_range(0..5) {
        0 => Value::from(rng.random::<i64>()),
        1 => Value::from(rng.random::<u64>()),
        2 => Value::from(rng.random_range(-1000i64..1000)),
        3 => {
            let x: f64 = rng.random_range(-1e6..1e6);
            Value::Number(Number::from_f64(x).unwrap())
        }
        _ => {
            let x = f64::from_bits(rng.random::<u64>());
            Value::Number(Number::from_f64(if x.is_finite() { x } else { 0.5 }).unwrap())
        }
    }
}

pub fn value(rng: &mut impl Rng, depth: u32) -> Value {
    let leaf = depth == 0 || rng.random_bool(0.5);
    match rng.random_range(0..if leaf { 4 } else { 6 }) {
        0 => Value::Null,
        1 => Value::Bool(rng.random()),
        2 => number(rng),
        3 => Value::String(string(rng, 12)),
        4 => Value::Array((0..rng.random_range(0..4)).map(|_| value(rng, depth - 1)).collect()),
        _ => {
            let mut m = Map::new();
            for _ in 0..rng.random_range(0..4) {
                m.insert(string(rng, 6), value(rng, depth - 1));
            }
            Value::Object(m)
        }
    }
}

fn task_id(rng: &mut impl Rng) -> TaskId {
    TaskId::from_u128(rng.random())
}

fn spec(rng: &mut impl Rng) -> TaskSpec {
    let mut inputs = Inputs::new();
    for _ in 0..rng.random_range(0..4) {
        inputs.insert(string(rng, 6), value(rng, 2));
    }
    TaskSpec {
        id: task_id(rng),
        name: ident(rng),
        entrypoint: ident(rng),
        inputs,
        parent: rng.random_bool(0.5).then(|| task_id(rng)),
        placement: rng.random_bool(0.5).then(|| format!("node-{}", rng.random::<u8>())),
        workspace: rng
            .random_bool(0.5)
            .then(|| VolumeId(format!("vol-{}", rng.random::<u16>()))),
    }
}

fn error(rng: &mut impl Rng) -> TaskError {
    TaskError::new(ident(rng), string(rng, 20))
}

fn state(rng: &mut impl Rng) -> TaskState {
    *[
        TaskState::Created,
        TaskState::Scheduled,
        TaskState::Running,
        TaskState::Completed,
        TaskState::Failed,
        TaskState::Canceled,
    ]
    .choose(rng)
    .unwrap()
}

fn bytes(rng: &mut impl Rng, max: usize) -> Vec<u8> {
    let n = rng.random_range(0..=max);
    (0..n).map(|_| rng.random()).collect()
}

fn path(rng: &mut impl Rng) -> String {
    (0..rng.random_range(0..4))
        .map(|_| *["a", "b", "..", ".", "", "c.txt", "日"].choose(rng).unwrap())
        .collect::<Vec<_>>()
        .join("/")
}

fn open_mode(rng: &mut impl Rng) -> OpenMode {
    *[OpenMode::Read, OpenMode::Write, OpenMode::Rw, OpenMode::CreateTruncate]
        .choose(rng)
        .unwrap()
}

pub fn fs_op(rng: &mut impl Rng) -> FsOp {
    match rng.random_range(0..14) {
        0 => FsOp::Lookup { path: path(rng) },
        1 => FsOp::Getattr { path: path(rng) },
        2 => FsOp::Readdir { path: path(rng) },
        3 => FsOp::Open {
            path: path(rng),
            mode: open_mode(rng),
        },
        4 => FsOp::Read {
            fh: rng.random(),
            offset: rng.random(),
            len: rng.random(),
        },
        5 => FsOp::Write {
            fh: rng.random(),
            offset: rng.random(),
            data: bytes(rng, 64),
        },
        6 => FsOp::Create {
            path: path(rng),
            mode: rng.random(),
        },
        7 => FsOp::Mkdir { path: path(rng) },
        8 => FsOp::Unlink { path: path(rng) },
        9 => FsOp::Rmdir { path: path(rng) },
        10 => FsOp::Rename {
            from: path(rng),
            to: path(rng),
        },
        11 => FsOp::Truncate {
            path: path(rng),
            size: rng.random(),
        },
        12 => FsOp::Flush { fh: rng.random() },
        _ => FsOp::Release { fh: rng.random() },
    }
}

fn attr(rng: &mut impl Rng) -> FileAttr {
    FileAttr {
        kind: if rng.random() {
            FileKind::File
        } else {
            FileKind::Directory
        },
        size: rng.random(),
        mtime: rng.random(),
        mode: rng.random(),
    }
}

fn fs_outcome(rng: &mut impl Rng) -> FsOutcome {
    if rng.random_bool(0.3) {
        let code = *[
            FsErrorCode::NotFound,
            FsErrorCode::Exists,
            FsErrorCode::NotDir,
            FsErrorCode::IsDir,
            FsErrorCode::NotEmpty,
            FsErrorCode::BadHandle,
            FsErrorCode::ReadOnly,
            FsErrorCode::Io,
        ]
        .choose(rng)
        .unwrap();
        return FsOutcome::Error(code);
    }
    FsOutcome::Ok(match rng.random_range(0..6) {
        0 => FsReply::Attr { attr: attr(rng) },
        1 => FsReply::Entries {
            names: (0..rng.random_range(0..4)).map(|_| string(rng, 8)).collect(),
        },
        2 => FsReply::Opened {
            fh: rng.random(),
            attr: attr(rng),
        },
        3 => FsReply::Data { data: bytes(rng, 100) },
        4 => FsReply::Written { count: rng.random() },
        _ => FsReply::Done,
    })
}

fn volume(rng: &mut impl Rng) -> VolumeId {
    VolumeId(string(rng, 10))
}

fn volume_call(rng: &mut impl Rng) -> VolumeCall {
    match rng.random_range(0..4) {
        0 => VolumeCall::Create {
            endpoint: string(rng, 10),
            token: string(rng, 10),
        },
        1 => VolumeCall::Publish {
            volume: volume(rng),
            task: task_id(rng),
        },
        2 => VolumeCall::Unpublish {
            volume: volume(rng),
            task: task_id(rng),
        },
        _ => VolumeCall::Delete { volume: volume(rng) },
    }
}

fn volume_outcome(rng: &mut impl Rng) -> VolumeOutcome {
    match rng.random_range(0..4) {
        0 => VolumeOutcome::Created { volume: volume(rng) },
        1 => VolumeOutcome::Published {
            mount: MountSpec {
                endpoint: string(rng, 10),
                token: string(rng, 10),
                mount_path: string(rng, 10),
            },
        },
        2 => VolumeOutcome::Done,
        _ => VolumeOutcome::Error {
            code: ident(rng),
            message: string(rng, 20),
        },
    }
}

/// A random well-formed message; every variant is reachable.
pub fn message(rng: &mut impl Rng) -> Message {
    match rng.random_range(0..14) {
        0 => Message::Hello {
            task_id: string(rng, 32),
            token: if rng.random() { Some(string(rng, 16)) } else { None },
        },
        1 => Message::Accept { session: rng.random() },
        2 => Message::Reject {
            reason: string(rng, 16),
        },
        3 => Message::Status {
            task_id: task_id(rng),
            state: state(rng),
        },
        4 => Message::Log {
            task_id: task_id(rng),
            stream: if rng.random() { LogStream::Out } else { LogStream::Err },
            text: string(rng, 40),
        },
        5 => Message::Return {
            task_id: task_id(rng),
            value: value(rng, 3),
        },
        6 => Message::Fail {
            task_id: task_id(rng),
            error: error(rng),
        },
        7 => Message::SpawnRequest { spec: spec(rng) },
        8 => Message::SpawnAck {
            task_id: task_id(rng),
            instance: string(rng, 12),
        },
        9 => Message::SpawnReject {
            task_id: task_id(rng),
            error: error(rng),
        },
        10 => Message::FsRequest {
            session: rng.random(),
            seq: rng.random(),
            op: fs_op(rng),
        },
        11 => Message::FsResponse {
            session: rng.random(),
            seq: rng.random(),
            result: fs_outcome(rng),
        },
        12 => Message::VolumeRpc { call: volume_call(rng) },
        _ => Message::VolumeReply {
            result: volume_outcome(rng),
        },
    }
}
