//! Built-in task bodies shipped with the binary.

use std::time::Duration;

use futures::future::try_join_all;
use rand::Rng;
use serde_json::{json, Number};

use crate::netfs::OpenMode;
use crate::runtime::{Registry, TaskContext, TaskHandle};
use crate::task::{Inputs, TaskError, Value};
use crate::wire::LogStream;

/// Arithmetic in random workflows is reduced modulo this prime.
pub const TREE_MODULUS: i64 = 1_000_003;

pub fn builtin_registry() -> Registry {
    let mut r = Registry::new();
    r.register("add", |_, inputs| async move {
        let a = number_input(&inputs, "a")?;
        let b = number_input(&inputs, "b")?;
        add_numbers(&a, &b)
    });
    r.register("echo", |_, inputs| async move {
        Ok(inputs.get("x").cloned().unwrap_or(Value::Null))
    });
    r.register("fail", |_, inputs| async move {
        let message = inputs
            .get("message")
            .and_then(Value::as_str)
            .unwrap_or("task body raised")
            .to_string();
        Err(TaskError::failed(message))
    });
    r.register("log-echo", |ctx, inputs| async move {
        let x = inputs.get("x").cloned().unwrap_or(Value::Null);
        let text = match &x {
            Value::String(s) => s.clone(),
            other => other.to_string(),
        };
        ctx.log(LogStream::Out, text).await?;
        Ok(x)
    });
    r.register("sleep", |ctx, inputs| async move {
        let ms = inputs.get("ms").and_then(Value::as_u64).unwrap_or(0);
        ctx.env().sleep(Duration::from_millis(ms)).await;
        Ok(json!(ms))
    });
    r.register("square", |_, inputs| async move {
        let x = number_input(&inputs, "x")?;
        mul_numbers(&x, &x)
    });
    r.register("mapper", |ctx, inputs| async move {
        let x = inputs.get("x").cloned().unwrap_or(Value::Null);
        let child = ctx.spawn_task("square", one("x", x)).await?;
        value_of(child).await
    });
    r.register("joiner", |ctx, inputs| async move {
        let values = inputs
            .get("values")
            .and_then(Value::as_array)
            .filter(|v| v.len() == 2)
            .ok_or_else(|| bad_input("values must be a list of two numbers"))?;
        let mut args = Inputs::new();
        args.insert("a".into(), values[0].clone());
        args.insert("b".into(), values[1].clone());
        let child = ctx.spawn_task("add", args).await?;
        value_of(child).await
    });
    r.register("diamond", diamond);
    r.register("tree", tree);
    r.register("bench-reader", bench_reader);
    r.register("notebook", notebook);
    r
}

fn bad_input(message: impl Into<String>) -> TaskError {
    TaskError::new("bad-input", message)
}

fn one(key: &str, value: Value) -> Inputs {
    let mut inputs = Inputs::new();
    inputs.insert(key.into(), value);
    inputs
}

fn number_input(inputs: &Inputs, key: &str) -> Result<Number, TaskError> {
    match inputs.get(key) {
        Some(Value::Number(n)) => Ok(n.clone()),
        _ => Err(bad_input(format!("input {key:?} must be a number"))),
    }
}

fn float(x: f64) -> Result<Value, TaskError> {
    crate::wire::number(x).map_err(|e| bad_input(e.to_string()))
}

fn add_numbers(a: &Number, b: &Number) -> Result<Value, TaskError> {
    if let Some(sum) = a.as_i64().zip(b.as_i64()).and_then(|(a, b)| a.checked_add(b)) {
        return Ok(json!(sum));
    }
    float(a.as_f64().unwrap_or(f64::NAN) + b.as_f64().unwrap_or(f64::NAN))
}

fn mul_numbers(a: &Number, b: &Number) -> Result<Value, TaskError> {
    if let Some(product) = a.as_i64().zip(b.as_i64()).and_then(|(a, b)| a.checked_mul(b)) {
        return Ok(json!(product));
    }
    float(a.as_f64().unwrap_or(f64::NAN) * b.as_f64().unwrap_or(f64::NAN))
}

async fn value_of(mut handle: TaskHandle) -> Result<Value, TaskError> {
    let result = handle.await_result(None).await.expect("unbounded await");
    result.outcome
}

async fn join_values(handles: Vec<TaskHandle>) -> Result<Vec<Value>, TaskError> {
    try_join_all(handles.into_iter().map(value_of)).await
}

/// root -> two mappers (each squaring through a child) -> joiner (adding
/// through a child): seven tasks in all.
async fn diamond(ctx: TaskContext, inputs: Inputs) -> Result<Value, TaskError> {
    let xs = inputs.get("xs").cloned().unwrap_or_else(|| json!([3, 4]));
    let xs = xs
        .as_array()
        .filter(|v| v.len() == 2)
        .ok_or_else(|| bad_input("xs must be a list of two numbers"))?
        .clone();
    let mut mappers = Vec::new();
    for x in xs {
        mappers.push(ctx.spawn_task("mapper", one("x", x)).await?);
    }
    let mapped = join_values(mappers).await?;
    let joiner = ctx.spawn_task("joiner", one("values", Value::Array(mapped))).await?;
    value_of(joiner).await
}

/// One node of an arithmetic workflow. `{"op":"const","value":n}` returns
/// n; `add` and `mul` spawn one task per child and combine their results
/// modulo [`TREE_MODULUS`].
async fn tree(ctx: TaskContext, inputs: Inputs) -> Result<Value, TaskError> {
    let node = inputs.get("node").ok_or_else(|| bad_input("missing node"))?;
    let op = node.get("op").and_then(Value::as_str).unwrap_or("");
    if op == "const" {
        return node
            .get("value")
            .and_then(Value::as_i64)
            .map(|v| json!(v.rem_euclid(TREE_MODULUS)))
            .ok_or_else(|| bad_input("const needs an integer value"));
    }
    let children = node
        .get("children")
        .and_then(Value::as_array)
        .ok_or_else(|| bad_input("missing children"))?;
    let mut handles = Vec::new();
    for child in children {
        handles.push(ctx.spawn_task("tree", one("node", child.clone())).await?);
    }
    let values = join_values(handles).await?;
    let ints = values
        .iter()
        .map(|v| v.as_i64().ok_or_else(|| bad_input("child returned a non-integer")));
    let mut acc: i64 = if op == "mul" { 1 } else { 0 };
    for v in ints {
        let v = v?;
        acc = match op {
            "add" => (acc + v).rem_euclid(TREE_MODULUS),
            "mul" => (acc * v).rem_euclid(TREE_MODULUS),
            other => return Err(bad_input(format!("unknown op {other:?}"))),
        };
    }
    Ok(json!(acc))
}

/// A random arithmetic workflow for the `tree` entrypoint, at most `depth`
/// levels of operators with at most `fanout` children each.
pub fn random_tree(rng: &mut impl Rng, depth: u32, fanout: u32) -> Value {
    if depth == 0 || rng.random_bool(0.3) {
        return json!({"op": "const", "value": rng.random_range(-50..=50)});
    }
    let op = if rng.random_bool(0.5) { "add" } else { "mul" };
    let n = rng.random_range(1..=fanout);
    let children: Vec<Value> = (0..n).map(|_| random_tree(rng, depth - 1, fanout)).collect();
    json!({"op": op, "children": children})
}

/// Value the `tree` entrypoint computes for `node`, without spawning.
pub fn eval_tree(node: &Value) -> i64 {
    match node["op"].as_str() {
        Some("const") => node["value"].as_i64().unwrap_or(0).rem_euclid(TREE_MODULUS),
        Some(op) => {
            let children = node["children"].as_array().map(Vec::as_slice).unwrap_or(&[]);
            children
                .iter()
                .map(eval_tree)
                .fold(if op == "mul" { 1 } else { 0 }, |acc, v| {
                    if op == "mul" {
                        (acc * v).rem_euclid(TREE_MODULUS)
                    } else {
                        (acc + v).rem_euclid(TREE_MODULUS)
                    }
                })
        }
        None => 0,
    }
}

/// Number of tasks a `tree` workflow runs.
pub fn tree_size(node: &Value) -> usize {
    1 + node["children"].as_array().map_or(0, |c| c.iter().map(tree_size).sum())
}

/// Reads every file in `files` from the workspace in order and reports, per
/// file, the open-plus-read time and the read phase alone (nanoseconds on
/// the environment clock), plus the span of the whole pass.
async fn bench_reader(ctx: TaskContext, inputs: Inputs) -> Result<Value, TaskError> {
    let files: Vec<String> = inputs
        .get("files")
        .and_then(Value::as_array)
        .ok_or_else(|| bad_input("files must be a list of paths"))?
        .iter()
        .filter_map(|v| v.as_str().map(String::from))
        .collect();
    let window = inputs.get("window").and_then(Value::as_u64).unwrap_or(16) as usize;
    let fs_error = |e: crate::netfs::FsClientError| TaskError::new("fs-error", e.to_string());
    let mut ws = ctx.workspace().await.map_err(fs_error)?;
    let env = ctx.env().clone();
    let mut access = Vec::new();
    let mut transfer = Vec::new();
    let mut bytes = 0u64;
    let start = env.now();
    for file in &files {
        let path = ws.export_path(file).map_err(fs_error)?;
        let session = ws.session();
        let t0 = env.now();
        let (fh, attr) = session.open(&path, OpenMode::Read).await.map_err(fs_error)?;
        let t1 = env.now();
        let data = session.read_range(fh, 0, attr.size, window).await.map_err(fs_error)?;
        let t2 = env.now();
        session.release(fh).await.map_err(fs_error)?;
        if data.len() as u64 != attr.size {
            return Err(TaskError::new("fs-error", format!("short read of {file}")));
        }
        bytes += attr.size;
        access.push((t2 - t0).as_nanos() as u64);
        transfer.push((t2 - t1).as_nanos() as u64);
    }
    let aggregate = (env.now() - start).as_nanos() as u64;
    Ok(json!({
        "access_ns": access,
        "transfer_ns": transfer,
        "aggregate_ns": aggregate,
        "bytes": bytes,
    }))
}

/// Hosts a placeholder notebook page and reports its URL as a log line
/// `url <address>`. On a real network it serves until `max_requests`
/// requests were answered (forever when absent); under simulation it only
/// reports the address.
async fn notebook(ctx: TaskContext, inputs: Inputs) -> Result<Value, TaskError> {
    if ctx.env().is_simulated() {
        let url = format!("sim://{}/notebook/{}", ctx.env().node(), ctx.id());
        ctx.log(LogStream::Out, format!("url {url}")).await?;
        return Ok(json!({"url": url}));
    }
    let io_error = |e: std::io::Error| TaskError::new("io", e.to_string());
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.map_err(io_error)?;
    let url = format!("http://{}/", listener.local_addr().map_err(io_error)?);
    ctx.log(LogStream::Out, format!("url {url}")).await?;
    let limit = inputs.get("max_requests").and_then(Value::as_u64);
    let mut served = 0u64;
    while limit.is_none_or(|l| served < l) {
        let (mut stream, _) = listener.accept().await.map_err(io_error)?;
        serve_placeholder(&mut stream, ctx.id().to_string()).await;
        served += 1;
    }
    Ok(json!({"url": url, "served": served}))
}

async fn serve_placeholder(stream: &mut tokio::net::TcpStream, task: String) {
    use tokio::io::{AsyncReadExt, AsyncWriteExt};
    let mut buf = [0u8; 4096];
    let mut request = Vec::new();
    while !request.windows(4).any(|w| w == b"\r\n\r\n") && request.len() < 64 * 1024 {
        match stream.read(&mut buf).await {
            Ok(0) | Err(_) => break,
            Ok(n) => request.extend_from_slice(&buf[..n]),
        }
    }
    let body = format!("<html><body><h1>notebook</h1><p>task {task}</p></body></html>\n");
    let response = format!(
        "HTTP/1.1 200 OK\r\ncontent-type: text/html\r\ncontent-length: {}\r\nconnection: close\r\n\r\n{body}",
        body.len()
    );
    let _ = stream.write_all(response.as_bytes()).await;
    let _ = stream.shutdown().await;
}
