#![allow(dead_code)]

pub mod gen;
pub mod oracle;

use std::os::unix::fs::PermissionsExt;
use std::sync::Arc;

use futures::future::BoxFuture;
use rand::seq::IndexedRandom;
use rand::Rng;
use serde_json::Value;

use taskmesh::backend::{ProcessBackend, SimBackend, SimBackendConfig};
use taskmesh::env::Env;
use taskmesh::netfs::{
    serve_export, Export, ExportConfig, FsClientError, FsErrorCode, FsOp, FsReply, FsSession, OpenMode,
};
use taskmesh::runtime::{Runtime, RuntimeConfig, TaskContext, ENV_TRACE};
use taskmesh::sim::{NetworkProfile, Sim};
use taskmesh::task::{Inputs, TaskError, TaskId, TaskResult, VolumeId};
use taskmesh::tasks::builtin_registry;
use taskmesh::tcp::TcpEnv;
use taskmesh::trace::{read_trace_file, Trace, TraceEvent};
use taskmesh::volume::{Broker, Prober, VolumeError, VolumeState, MOUNT_PATH};

pub const BIN: &str = env!("CARGO_BIN_EXE_taskmesh");

pub fn inputs(value: Value) -> Inputs {
    match value {
        Value::Object(map) => map.into_iter().collect(),
        other => panic!("inputs must be an object, got {other}"),
    }
}

async fn drive(rt: Runtime, entrypoint: String, inputs: Inputs) -> Result<TaskResult, TaskError> {
    let root = TaskContext::root(rt);
    let mut handle = root.spawn_task(&entrypoint, inputs).await?;
    let result = handle.await_result(None).await.expect("unbounded await");
    root.close();
    Ok(result)
}

/// Runs `entrypoint` on the simulated backend.
pub fn run_sim(seed: u64, entrypoint: &str, inputs: Inputs) -> (Result<TaskResult, TaskError>, Vec<TraceEvent>) {
    let sim = Sim::new(seed, NetworkProfile::from_ms_mbit(1, 1000));
    let trace = Trace::new();
    let backend = SimBackend::new(
        sim.handle(),
        Arc::new(builtin_registry()),
        trace.clone(),
        SimBackendConfig::default(),
    );
    let rt = backend.runtime("control");
    let outcome = sim
        .block_on(drive(rt, entrypoint.into(), inputs))
        .expect("simulation finished");
    (outcome, trace.events())
}

/// Runs `entrypoint` with one OS process per task. Every process appends
/// its trace to one file, which is read back once the workflow ends.
pub fn run_process(entrypoint: &str, inputs: Inputs) -> (Result<TaskResult, TaskError>, Vec<TraceEvent>) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("trace.jsonl");
    let trace = Trace::with_file(&path).unwrap();
    let tokio = tokio::runtime::Builder::new_multi_thread()
        .worker_threads(2)
        .enable_all()
        .build()
        .unwrap();
    let rt = Runtime {
        env: Arc::new(TcpEnv::new()),
        backend: Arc::new(ProcessBackend::new(BIN).with_env(ENV_TRACE, path.to_string_lossy())),
        registry: Arc::new(builtin_registry()),
        trace,
        volumes: None,
        config: RuntimeConfig::default(),
    };
    let outcome = tokio.block_on(drive(rt, entrypoint.into(), inputs));
    drop(tokio);
    (outcome, read_trace_file(&path).unwrap())
}

/// Value of an arithmetic tree, computed directly with wide integers.
pub fn tree_value(node: &Value) -> i64 {
    const M: i128 = 1_000_003;
    fn go(node: &Value) -> i128 {
        let kids = || node["children"].as_array().unwrap().iter().map(go);
        match node["op"].as_str().unwrap() {
            "const" => i128::from(node["value"].as_i64().unwrap()),
            "add" => kids().sum::<i128>(),
            "mul" => kids().fold(1, |a, b| (a * b).rem_euclid(M)),
            op => panic!("unknown op {op}"),
        }
        .rem_euclid(M)
    }
    go(node) as i64
}

const NAMES: &[&str] = &["a", "b", "c", "d.txt"];
const MODES: &[u16] = &[0o600, 0o644, 0o640, 0o755, 0o700];

fn fresh_path(rng: &mut impl Rng) -> String {
    let depth = *[0, 1, 1, 1, 1, 2, 2, 3].choose(rng).unwrap();
    let mut parts: Vec<&str> = (0..depth).map(|_| *NAMES.choose(rng).unwrap()).collect();
    if rng.random_bool(0.08) {
        let at = rng.random_range(0..=parts.len());
        parts.insert(at, "..");
    }
    let path = parts.join("/");
    if rng.random_bool(0.5) {
        format!("/{path}")
    } else {
        path
    }
}

/// Generates operation sequences that mostly revisit paths and handles that
/// exist at that point, tracked through a reference model, with some fresh
/// and stale ones mixed in.
pub struct FsOpGen {
    model: oracle::MemFs,
    paths: Vec<String>,
    handles: Vec<u64>,
}

impl Default for FsOpGen {
    fn default() -> Self {
        let mut model = oracle::MemFs::new(0o755, false);
        model.seed_file("/seed.txt", SEED_DATA, 0o644);
        FsOpGen {
            model,
            paths: vec!["seed.txt".into()],
            handles: Vec::new(),
        }
    }
}

impl FsOpGen {
    fn path(&mut self, rng: &mut impl Rng) -> String {
        if rng.random_bool(0.7) {
            let known = self.paths.choose(rng).unwrap().clone();
            if rng.random_bool(0.2) {
                return format!("{known}/{}", NAMES.choose(rng).unwrap());
            }
            return known;
        }
        fresh_path(rng)
    }

    fn fh(&self, rng: &mut impl Rng) -> u64 {
        match self.handles.choose(rng) {
            Some(&fh) if rng.random_bool(0.9) => fh,
            _ => rng.random_range(1..6),
        }
    }

    fn pick(&mut self, rng: &mut impl Rng) -> FsOp {
        let fh = self.fh(rng);
        match rng.random_range(0..20) {
            0 => FsOp::Lookup { path: self.path(rng) },
            1 => FsOp::Getattr { path: self.path(rng) },
            2 => FsOp::Readdir { path: self.path(rng) },
            3..=5 | 18 | 19 => FsOp::Open {
                path: self.path(rng),
                mode: *[OpenMode::Read, OpenMode::Write, OpenMode::Rw, OpenMode::CreateTruncate]
                    .choose(rng)
                    .unwrap(),
            },
            6 | 7 => FsOp::Read {
                fh,
                offset: rng.random_range(0..40),
                len: if rng.random_bool(0.05) {
                    70_000
                } else {
                    rng.random_range(0..40)
                },
            },
            8 | 9 => FsOp::Write {
                fh,
                offset: rng.random_range(0..40),
                data: if rng.random_bool(0.03) {
                    vec![1; 70_000]
                } else {
                    (0..rng.random_range(0..24)).map(|_| rng.random()).collect()
                },
            },
            10 => FsOp::Create {
                path: self.path(rng),
                mode: *MODES.choose(rng).unwrap(),
            },
            11 => FsOp::Mkdir { path: self.path(rng) },
            12 => FsOp::Unlink { path: self.path(rng) },
            13 => FsOp::Rmdir { path: self.path(rng) },
            14 => FsOp::Rename {
                from: self.path(rng),
                to: self.path(rng),
            },
            15 => FsOp::Truncate {
                path: self.path(rng),
                size: rng.random_range(0..50),
            },
            16 => FsOp::Flush { fh },
            _ => FsOp::Release { fh },
        }
    }

    pub fn op(&mut self, rng: &mut impl Rng) -> FsOp {
        let op = self.pick(rng);
        let reply = self.model.apply(&op);
        match (&op, reply) {
            (FsOp::Open { path, .. } | FsOp::Create { path, .. } | FsOp::Mkdir { path }, Ok(reply)) => {
                if let FsReply::Opened { fh, .. } = reply {
                    self.handles.push(fh);
                }
                if !self.paths.contains(path) {
                    self.paths.push(path.clone());
                }
            }
            (FsOp::Rename { to, .. }, Ok(_)) if !self.paths.contains(to) => self.paths.push(to.clone()),
            (FsOp::Release { fh }, Ok(_)) => self.handles.retain(|h| h != fh),
            _ => {}
        }
        op
    }
}

pub const SEED_DATA: &[u8] = b"hello world";

pub fn fs_ops(rng: &mut impl Rng, max: usize) -> Vec<FsOp> {
    let n = rng.random_range(1..=max);
    let mut gen = FsOpGen::default();
    (0..n).map(|_| gen.op(rng)).collect()
}

pub const TOKEN: &str = "t0ken";

/// A simulated world with one export of a fresh directory on node "laptop".
pub struct SimExport {
    pub sim: Sim,
    pub endpoint: String,
    pub dir: tempfile::TempDir,
}

impl SimExport {
    pub fn new(seed: u64, read_only: bool) -> Self {
        let dir = tempfile::tempdir().unwrap();
        Self::over(seed, dir, read_only)
    }

    pub fn over(seed: u64, dir: tempfile::TempDir, read_only: bool) -> Self {
        let sim = Sim::new(seed, NetworkProfile::from_ms_mbit(1, 1000));
        let export = Export::new(ExportConfig::new(dir.path(), TOKEN).read_only(read_only)).unwrap();
        let laptop = sim.env("laptop");
        let listener = laptop.listen_now();
        let endpoint = listener.local_addr();
        sim.handle()
            .spawn(Box::pin(serve_export(laptop, listener, export, None)));
        SimExport { sim, endpoint, dir }
    }

    pub async fn session(env: Arc<dyn Env>, endpoint: &str, name: &str) -> FsSession {
        FsSession::connect(env, endpoint, TOKEN, name).await.unwrap()
    }
}

fn plain(reply: Result<FsReply, FsClientError>) -> Result<FsReply, FsErrorCode> {
    match reply {
        Ok(r) => Ok(r),
        Err(FsClientError::Server(code)) => Err(code),
        Err(other) => panic!("transport failure: {other}"),
    }
}

/// Applies `ops` through a client session and to the reference model and
/// reports the first divergence, in replies or in the final tree.
pub fn check_fs_sequence(seed: u64, ops: &[FsOp], read_only: bool) -> Result<(), String> {
    let world = SimExport::new(seed, read_only);
    let seeded = world.dir.path().join("seed.txt");
    std::fs::write(&seeded, SEED_DATA).unwrap();
    std::fs::set_permissions(&seeded, std::fs::Permissions::from_mode(0o644)).unwrap();
    let root_mode = (std::fs::metadata(world.dir.path()).unwrap().permissions().mode() & 0o7777) as u16;
    let mut model = oracle::MemFs::new(root_mode, read_only);
    model.seed_file("/seed.txt", SEED_DATA, 0o644);

    let env: Arc<dyn Env> = world.sim.env("client");
    let endpoint = world.endpoint.clone();
    let ops_owned = ops.to_vec();
    let replies = world
        .sim
        .block_on(async move {
            let mut s = SimExport::session(env, &endpoint, "model").await;
            let mut out = Vec::new();
            for op in ops_owned {
                out.push(plain(s.fs_call(op).await));
            }
            out
        })
        .map_err(|e| e.to_string())?;
    for (i, (op, got)) in ops.iter().zip(replies).enumerate() {
        let want = oracle::without_mtime(model.apply(op));
        let got = oracle::without_mtime(got);
        if want != got {
            return Err(format!("op {i} {op:?}: export {got:?}, model {want:?}"));
        }
    }
    let disk = oracle::disk_tree(world.dir.path());
    let expected = model.tree();
    if disk != expected {
        return Err(format!("final tree differs: export {disk:?}, model {expected:?}"));
    }
    Ok(())
}

/// One round of a close-to-open pattern: writers open, write and close, then
/// a reader opens and must see every write closed before its open.
#[derive(Debug, Clone)]
pub struct Round {
    /// (session, offset, bytes) per write; a session's writes share one handle.
    pub writes: Vec<(usize, u64, Vec<u8>)>,
    /// Session that looks at the file's attributes before the round starts.
    pub peeker: Option<usize>,
    pub reader: usize,
}

pub const C2O_SESSIONS: usize = 3;

/// A random pattern. Concurrent writers in one round touch disjoint ranges.
pub fn c2o_pattern(rng: &mut impl Rng) -> Vec<Round> {
    (0..rng.random_range(1..=4))
        .map(|_| {
            let writers = rng.random_range(1..=2);
            let mut ranges: Vec<(u64, u64)> = Vec::new();
            let mut writes = Vec::new();
            let first = rng.random_range(0..C2O_SESSIONS);
            for w in 0..writers {
                let session = (first + w) % C2O_SESSIONS;
                for _ in 0..rng.random_range(1..=3) {
                    // Each writer owns a stripe of 200_000 bytes.
                    let base = w as u64 * 200_000;
                    let offset = base + rng.random_range(0..100_000);
                    let len = if rng.random_bool(0.2) {
                        rng.random_range(60_000..100_000)
                    } else {
                        rng.random_range(1..64)
                    };
                    ranges.push((offset, len));
                    writes.push((session, offset, (0..len).map(|_| rng.random()).collect()));
                }
            }
            // Interleave the writers' requests.
            if writers == 2 && rng.random_bool(0.5) {
                writes.sort_by_key(|(_, offset, _)| *offset % 7);
            }
            Round {
                writes,
                peeker: rng.random_bool(0.5).then(|| rng.random_range(0..C2O_SESSIONS)),
                reader: rng.random_range(0..C2O_SESSIONS),
            }
        })
        .collect()
}

fn apply_write(content: &mut Vec<u8>, offset: u64, data: &[u8]) {
    let end = offset as usize + data.len();
    if content.len() < end {
        content.resize(end, 0);
    }
    content[offset as usize..end].copy_from_slice(data);
}

/// Runs `pattern` against an export through separate sessions and checks
/// every reader's view against the expected content.
pub fn check_close_to_open(seed: u64, pattern: &[Round]) -> Result<(), String> {
    let world = SimExport::new(seed, false);
    let initial: Vec<u8> = (0..1000u32).map(|i| (i % 251) as u8).collect();
    std::fs::write(world.dir.path().join("shared.bin"), &initial).unwrap();
    let sim = &world.sim;
    let envs: Vec<Arc<dyn Env>> = (0..C2O_SESSIONS)
        .map(|i| sim.env(&format!("client-{i}")) as Arc<dyn Env>)
        .collect();
    let endpoint = world.endpoint.clone();
    let pattern = pattern.to_vec();
    sim.block_on(async move {
        let mut sessions = Vec::new();
        for (i, env) in envs.into_iter().enumerate() {
            sessions.push(SimExport::session(env, &endpoint, &format!("c{i}")).await);
        }
        let mut expected = initial;
        for (r, round) in pattern.iter().enumerate() {
            if let Some(p) = round.peeker {
                // Warms the attribute cache, which may be stale from here on.
                sessions[p].getattr("shared.bin").await.map_err(|e| e.to_string())?;
            }
            let mut handles = std::collections::BTreeMap::new();
            for (s, _, _) in &round.writes {
                if !handles.contains_key(s) {
                    let (fh, _) = sessions[*s]
                        .open("shared.bin", OpenMode::Rw)
                        .await
                        .map_err(|e| e.to_string())?;
                    handles.insert(*s, fh);
                }
            }
            for (s, offset, data) in &round.writes {
                sessions[*s]
                    .write_at(handles[s], *offset, data)
                    .await
                    .map_err(|e| e.to_string())?;
                apply_write(&mut expected, *offset, data);
            }
            for (s, fh) in handles {
                sessions[s]
                    .fs_call(FsOp::Flush { fh })
                    .await
                    .map_err(|e| e.to_string())?;
                sessions[s].release(fh).await.map_err(|e| e.to_string())?;
            }
            let (fh, attr) = sessions[round.reader]
                .open("shared.bin", OpenMode::Read)
                .await
                .map_err(|e| e.to_string())?;
            if attr.size != expected.len() as u64 {
                return Err(format!(
                    "round {r}: open reported size {}, expected {}",
                    attr.size,
                    expected.len()
                ));
            }
            let got = sessions[round.reader]
                .read_range(fh, 0, attr.size, 16)
                .await
                .map_err(|e| e.to_string())?;
            sessions[round.reader].release(fh).await.map_err(|e| e.to_string())?;
            if got != expected {
                let at = got.iter().zip(&expected).position(|(a, b)| a != b);
                return Err(format!("round {r}: reader {} differs at {at:?}", round.reader));
            }
        }
        Ok(())
    })
    .map_err(|e| e.to_string())?
}

/// Probe outcome decided by the endpoint and token alone.
pub struct ScriptedProber;

impl Prober for ScriptedProber {
    fn probe(&self, endpoint: &str, token: &str) -> BoxFuture<'static, Result<(), VolumeError>> {
        let result = if endpoint == "down" {
            Err(VolumeError::EndpointUnreachable(endpoint.into()))
        } else if token == "bad" {
            Err(VolumeError::AuthRejected)
        } else {
            Ok(())
        };
        Box::pin(std::future::ready(result))
    }
}

#[derive(Debug, Clone)]
pub enum VolOp {
    Create {
        endpoint: &'static str,
        token: &'static str,
    },
    Publish {
        volume: usize,
        task: u128,
    },
    Unpublish {
        volume: usize,
        task: u128,
    },
    Delete {
        volume: usize,
    },
}

fn vol_name(i: usize) -> VolumeId {
    VolumeId(format!("vol-{i:08}"))
}

pub fn vol_ops(rng: &mut impl Rng, n: usize) -> Vec<VolOp> {
    (0..n)
        .map(|_| {
            let volume = rng.random_range(0..6);
            let task = rng.random_range(1..4);
            match rng.random_range(0..10) {
                0 | 1 => VolOp::Create {
                    endpoint: ["good", "good", "good", "down"].choose(rng).unwrap(),
                    token: ["t", "t", "t", "bad"].choose(rng).unwrap(),
                },
                2..=4 => VolOp::Publish { volume, task },
                5..=7 => VolOp::Unpublish { volume, task },
                _ => VolOp::Delete { volume },
            }
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Eq)]
enum Life {
    Created,
    Published(std::collections::BTreeSet<u128>),
    Deleted,
}

/// Applies `ops` to a broker and to a small state machine, comparing every
/// outcome and checking each record's invariant after every step. Returns
/// how many deletes of a published volume were refused.
pub fn check_volume_sequence(ops: &[VolOp]) -> Result<usize, String> {
    let broker = Broker::new(Arc::new(ScriptedProber));
    let mut model: Vec<Life> = Vec::new();
    let mut busy = 0;
    for (i, op) in ops.iter().enumerate() {
        let (got, want): (Result<(), String>, Result<(), String>) = match op {
            VolOp::Create { endpoint, token } => {
                let got = futures::executor::block_on(broker.create_volume(endpoint, token));
                let want = if *endpoint == "down" {
                    Err("endpoint-unreachable".to_string())
                } else if *token == "bad" {
                    Err("auth-rejected".to_string())
                } else {
                    model.push(Life::Created);
                    Ok(())
                };
                if let Ok(id) = &got {
                    if *id != vol_name(model.len() - 1) {
                        return Err(format!("op {i}: unexpected id {id:?}"));
                    }
                }
                (got.map(drop).map_err(|e| e.code().to_string()), want)
            }
            VolOp::Publish { volume, task } => {
                let got = broker.publish_volume(&vol_name(*volume), TaskId::from_u128(*task));
                let want = match model.get_mut(*volume) {
                    None => Err("unknown-volume".to_string()),
                    Some(Life::Deleted) => Err("volume-deleted".to_string()),
                    Some(life) => {
                        let mut holders = match life {
                            Life::Published(h) => h.clone(),
                            _ => Default::default(),
                        };
                        holders.insert(*task);
                        *life = Life::Published(holders);
                        Ok(())
                    }
                };
                if let Ok(mount) = &got {
                    if mount.endpoint != "good" || mount.mount_path != MOUNT_PATH {
                        return Err(format!("op {i}: bad mount {mount:?}"));
                    }
                }
                (got.map(drop).map_err(|e| e.code().to_string()), want)
            }
            VolOp::Unpublish { volume, task } => {
                let got = broker.unpublish_volume(&vol_name(*volume), TaskId::from_u128(*task));
                let want = match model.get_mut(*volume) {
                    None => Err("unknown-volume".to_string()),
                    Some(life) => {
                        if let Life::Published(h) = life {
                            h.remove(task);
                            if h.is_empty() {
                                *life = Life::Created;
                            }
                        }
                        Ok(())
                    }
                };
                (got.map_err(|e| e.code().to_string()), want)
            }
            VolOp::Delete { volume } => {
                let got = broker.delete_volume(&vol_name(*volume));
                let want = match model.get_mut(*volume) {
                    None => Err("unknown-volume".to_string()),
                    Some(Life::Published(_)) => {
                        busy += 1;
                        Err("volume-busy".to_string())
                    }
                    Some(life) => {
                        *life = Life::Deleted;
                        Ok(())
                    }
                };
                (got.map_err(|e| e.code().to_string()), want)
            }
        };
        if got != want {
            return Err(format!("op {i} {op:?}: broker {got:?}, model {want:?}"));
        }
        for record in broker.records() {
            record.check().map_err(|e| format!("op {i}: {e}"))?;
        }
        for (v, life) in model.iter().enumerate() {
            let record = broker
                .record(&vol_name(v))
                .ok_or(format!("op {i}: volume {v} vanished"))?;
            let same = match life {
                Life::Created => record.state == VolumeState::Created && record.published_to.is_empty(),
                Life::Deleted => record.state == VolumeState::Deleted && record.published_to.is_empty(),
                Life::Published(h) => {
                    record.state == VolumeState::Published
                        && record
                            .published_to
                            .iter()
                            .map(|t| t.as_u128())
                            .collect::<std::collections::BTreeSet<_>>()
                            == *h
                }
            };
            if !same {
                return Err(format!("op {i}: volume {v} is {record:?}, model {life:?}"));
            }
        }
    }
    Ok(busy)
}

/// An `export` daemon process, killed on drop.
pub struct Daemon(std::process::Child);

impl Drop for Daemon {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Starts `taskmesh export` on an ephemeral port with token "t".
pub fn start_export(root: &std::path::Path, read_only: bool) -> (Daemon, String) {
    use std::io::BufRead;
    let mut cmd = std::process::Command::new(BIN);
    cmd.arg("export")
        .arg("--root")
        .arg(root)
        .args(["--listen", "127.0.0.1:0", "--token", "t"])
        .stdout(std::process::Stdio::piped());
    if read_only {
        cmd.arg("--read-only");
    }
    let mut child = cmd.spawn().unwrap();
    let mut line = String::new();
    std::io::BufReader::new(child.stdout.take().unwrap())
        .read_line(&mut line)
        .unwrap();
    let addr = line.trim().strip_prefix("listening on ").unwrap().to_string();
    (Daemon(child), addr)
}
