//! Command-line interface. Exit codes: 0 success, 1 domain error, 2 usage.

use std::ffi::OsString;
use std::io::Write;
use std::path::PathBuf;
use std::sync::Arc;

use clap::{Parser, Subcommand, ValueEnum};

use crate::backend::{Backend, ProcessBackend, SimBackend, SimBackendConfig};
use crate::bench::{self, BenchMatrix};
use crate::env::Env;
use crate::netfs::{serve_export, Export, ExportConfig};
use crate::runtime::{serve_task, Bootstrap, Runtime, RuntimeConfig, TaskContext, ENV_TRACE};
use crate::sim::{NetworkProfile, Sim};
use crate::task::{Inputs, TaskError, TaskId, TaskResult, Value, VolumeId};
use crate::tasks::builtin_registry;
use crate::tcp::{TcpEnv, TcpFrameListener};
use crate::trace::Trace;
use crate::volume::{Broker, BrokerClient, HelloProber, VolumeCall, VolumeOutcome, VolumeService};
use crate::wire::canonical_document;

pub const EXIT_OK: i32 = 0;
pub const EXIT_DOMAIN: i32 = 1;
pub const EXIT_USAGE: i32 = 2;

/// Address of a broker that `serve-task` children use to publish workspaces.
pub const ENV_BROKER: &str = "TASKMESH_BROKER";

#[derive(Debug, Parser)]
#[command(
    name = "taskmesh",
    version,
    about = "Decentralized task workflows with a networked workspace"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
enum BackendKind {
    Sim,
    Process,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Run a task and print its result.
    Run {
        entrypoint: String,
        /// Task input as key=value; values parse as JSON when possible.
        #[arg(long = "input", value_name = "KEY=VALUE")]
        inputs: Vec<String>,
        #[arg(long, value_enum, default_value = "sim")]
        backend: BackendKind,
        /// Simulator seed.
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Child mode used by the process backend.
    #[command(hide = true)]
    ServeTask,
    /// Serve a local directory to remote tasks; also hosts a volume broker.
    Export {
        #[arg(long)]
        root: PathBuf,
        #[arg(long)]
        listen: String,
        #[arg(long)]
        token: String,
        #[arg(long)]
        read_only: bool,
    },
    /// Manage workspace volumes through a broker.
    Volume {
        #[command(subcommand)]
        call: VolumeCommand,
    },
    /// Run the file access latency matrix on the simulator.
    Bench {
        /// Matrix file; defaults apply when absent.
        #[arg(long)]
        matrix: Option<PathBuf>,
    },
    /// Host a placeholder notebook task and print its URL.
    Notebook {
        #[arg(long, value_enum, default_value = "process")]
        backend: BackendKind,
        /// Stop after answering this many requests.
        #[arg(long)]
        max_requests: Option<u64>,
    },
}

#[derive(Debug, Subcommand)]
enum VolumeCommand {
    Create {
        #[arg(long)]
        endpoint: String,
        #[arg(long)]
        token: String,
        /// Broker address; defaults to the export endpoint.
        #[arg(long)]
        broker: Option<String>,
    },
    Publish {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        volume: String,
        #[arg(long)]
        task: String,
    },
    Unpublish {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        volume: String,
        #[arg(long)]
        task: String,
    },
    Delete {
        #[arg(long)]
        broker: String,
        #[arg(long)]
        volume: String,
    },
}

/// Entry point of the binary.
pub fn main_entry() -> i32 {
    let stdout = std::io::stdout();
    let stderr = std::io::stderr();
    run(std::env::args_os(), &mut stdout.lock(), &mut stderr.lock())
}

/// Parses `args` (program name first) and executes the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { EXIT_USAGE } else { EXIT_OK };
            let text = e.render().to_string();
            let _ = if e.use_stderr() {
                err.write_all(text.as_bytes())
            } else {
                out.write_all(text.as_bytes())
            };
            return code;
        }
    };
    let code = match cli.command {
        Command::Run {
            entrypoint,
            inputs,
            backend,
            seed,
        } => match parse_inputs(&inputs) {
            Ok(inputs) => run_task(&entrypoint, inputs, backend, seed, out, err),
            Err(bad) => {
                let _ = writeln!(err, "error: input {bad:?} is not KEY=VALUE");
                EXIT_USAGE
            }
        },
        Command::ServeTask => serve_child(err),
        Command::Export {
            root,
            listen,
            token,
            read_only,
        } => export(root, &listen, token, read_only, out, err),
        Command::Volume { call } => volume(call, out, err),
        Command::Bench { matrix } => run_bench(matrix, out, err),
        Command::Notebook { backend, max_requests } => notebook(backend, max_requests, out, err),
    };
    let _ = out.flush();
    code
}

/// `key=value` pairs; values are JSON documents when they parse, else text.
pub fn parse_inputs(pairs: &[String]) -> Result<Inputs, String> {
    let mut inputs = Inputs::new();
    for pair in pairs {
        let (key, value) = pair.split_once('=').ok_or_else(|| pair.clone())?;
        if key.is_empty() {
            return Err(pair.clone());
        }
        let value = serde_json::from_str::<Value>(value).unwrap_or_else(|_| Value::String(value.to_string()));
        inputs.insert(key.to_string(), value);
    }
    Ok(inputs)
}

fn canonical(value: &Value) -> String {
    match canonical_document(value) {
        Ok(bytes) => String::from_utf8(bytes).unwrap_or_default(),
        Err(e) => format!("<{e}>"),
    }
}

fn report_result(result: TaskResult, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    match result.outcome {
        Ok(value) => {
            let _ = writeln!(out, "{}", canonical(&value));
            EXIT_OK
        }
        Err(e) => report_error(&e, err),
    }
}

fn report_error(e: &TaskError, err: &mut dyn Write) -> i32 {
    let _ = writeln!(err, "error {}: {}", e.code, e.message);
    EXIT_DOMAIN
}

fn tokio_runtime() -> tokio::runtime::Runtime {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .expect("tokio runtime")
}

fn program() -> PathBuf {
    std::env::current_exe().unwrap_or_else(|_| PathBuf::from("taskmesh"))
}

fn process_trace() -> Trace {
    std::env::var_os(ENV_TRACE)
        .and_then(|p| Trace::with_file(std::path::Path::new(&p)).ok())
        .unwrap_or_default()
}

fn process_runtime(env: Arc<dyn Env>) -> Runtime {
    let volumes = std::env::var(ENV_BROKER)
        .ok()
        .map(|addr| Arc::new(BrokerClient::new(env.clone(), addr)) as Arc<dyn VolumeService>);
    let backend: Arc<dyn Backend> = Arc::new(ProcessBackend::new(program()));
    Runtime {
        env,
        backend,
        registry: Arc::new(builtin_registry()),
        trace: process_trace(),
        volumes,
        config: RuntimeConfig::default(),
    }
}

fn run_task(
    entrypoint: &str,
    inputs: Inputs,
    backend: BackendKind,
    seed: u64,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let entrypoint = entrypoint.to_string();
    let drive = |rt: Runtime| async move {
        let root = TaskContext::root(rt);
        let mut handle = root.spawn_task(&entrypoint, inputs).await?;
        let result = handle.await_result(None).await.expect("unbounded await");
        root.close();
        Ok::<TaskResult, TaskError>(result)
    };
    let outcome = match backend {
        BackendKind::Sim => {
            let sim = Sim::new(seed, NetworkProfile::from_ms_mbit(1, 1000));
            let backend = SimBackend::new(
                sim.handle(),
                Arc::new(builtin_registry()),
                Trace::new(),
                SimBackendConfig::default(),
            );
            let rt = backend.runtime("control");
            match sim.block_on(drive(rt)) {
                Ok(outcome) => outcome,
                Err(e) => Err(TaskError::new("simulation", e.to_string())),
            }
        }
        BackendKind::Process => {
            let tokio = tokio_runtime();
            let rt = process_runtime(Arc::new(TcpEnv::new()));
            tokio.block_on(drive(rt))
        }
    };
    match outcome {
        Ok(result) => report_result(result, out, err),
        Err(e) => report_error(&e, err),
    }
}

fn serve_child(err: &mut dyn Write) -> i32 {
    let boot = match Bootstrap::from_process_env() {
        Ok(boot) => boot,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let tokio = tokio_runtime();
    let rt = process_runtime(Arc::new(TcpEnv::new()));
    tokio.block_on(serve_task(rt, boot))
}

fn export(
    root: PathBuf,
    listen: &str,
    token: String,
    read_only: bool,
    out: &mut dyn Write,
    err: &mut dyn Write,
) -> i32 {
    let export = match Export::new(ExportConfig::new(root, token).read_only(read_only)) {
        Ok(export) => export,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_DOMAIN;
        }
    };
    let tokio = tokio_runtime();
    tokio.block_on(async move {
        let listener = match TcpFrameListener::bind(listen).await {
            Ok(listener) => listener,
            Err(e) => {
                let _ = writeln!(err, "error: cannot listen on {listen}: {e}");
                return EXIT_DOMAIN;
            }
        };
        let env: Arc<dyn Env> = Arc::new(TcpEnv::new());
        let broker = Arc::new(Broker::new(Arc::new(HelloProber::new(env.clone()))));
        use crate::env::Listener;
        let _ = writeln!(out, "listening on {}", listener.local_addr());
        let _ = out.flush();
        serve_export(env, Box::new(listener), export, Some(broker)).await;
        EXIT_DOMAIN
    })
}

fn volume(call: VolumeCommand, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let parse_task = |task: &str| task.parse::<TaskId>().map_err(|e| e.to_string());
    let request = match call {
        VolumeCommand::Create {
            endpoint,
            token,
            broker,
        } => Ok((
            broker.unwrap_or_else(|| endpoint.clone()),
            VolumeCall::Create { endpoint, token },
        )),
        VolumeCommand::Publish { broker, volume, task } => parse_task(&task).map(|task| {
            (
                broker,
                VolumeCall::Publish {
                    volume: VolumeId(volume),
                    task,
                },
            )
        }),
        VolumeCommand::Unpublish { broker, volume, task } => parse_task(&task).map(|task| {
            (
                broker,
                VolumeCall::Unpublish {
                    volume: VolumeId(volume),
                    task,
                },
            )
        }),
        VolumeCommand::Delete { broker, volume } => Ok((
            broker,
            VolumeCall::Delete {
                volume: VolumeId(volume),
            },
        )),
    };
    let (broker, call) = match request {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_USAGE;
        }
    };
    let tokio = tokio_runtime();
    let reply = tokio.block_on(async move {
        let client = BrokerClient::new(Arc::new(TcpEnv::new()), broker);
        client.call(call).await
    });
    match reply {
        Ok(VolumeOutcome::Created { volume }) => {
            let _ = writeln!(out, "{volume}");
            EXIT_OK
        }
        Ok(VolumeOutcome::Published { mount }) => {
            let doc = serde_json::to_value(&mount).unwrap_or_default();
            let _ = writeln!(out, "{}", canonical(&doc));
            EXIT_OK
        }
        Ok(VolumeOutcome::Done) => {
            let _ = writeln!(out, "ok");
            EXIT_OK
        }
        Ok(VolumeOutcome::Error { code, message }) => {
            let _ = writeln!(err, "error {code}: {message}");
            EXIT_DOMAIN
        }
        Err(e) => {
            let _ = writeln!(err, "error {}: {e}", e.code());
            EXIT_DOMAIN
        }
    }
}

fn run_bench(matrix: Option<PathBuf>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let matrix = match matrix {
        None => BenchMatrix::default(),
        Some(path) => match std::fs::read_to_string(&path)
            .map_err(bench::BenchError::from)
            .and_then(|text| BenchMatrix::from_csv(&text))
        {
            Ok(m) => m,
            Err(e) => {
                let _ = writeln!(err, "error: {e}");
                return EXIT_USAGE;
            }
        },
    };
    let results = match bench::run_matrix(&matrix) {
        Ok(r) => r,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            return EXIT_DOMAIN;
        }
    };
    if let Err(e) = bench::write_csv(&results, &mut *out) {
        let _ = writeln!(err, "error: {e}");
        return EXIT_DOMAIN;
    }
    let report = bench::check_threshold(&results, matrix.threshold);
    let _ = write!(out, "{}", bench::summary(&results, &report, matrix.threshold));
    if report.exit_ok() {
        EXIT_OK
    } else {
        EXIT_DOMAIN
    }
}

fn notebook(backend: BackendKind, max_requests: Option<u64>, out: &mut dyn Write, err: &mut dyn Write) -> i32 {
    let mut inputs = Inputs::new();
    if let Some(n) = max_requests {
        inputs.insert("max_requests".into(), n.into());
    }
    let url_line = |stream, text: &str| stream == crate::wire::LogStream::Out && text.starts_with("url ");
    match backend {
        BackendKind::Sim => {
            let sim = Sim::new(0, NetworkProfile::ideal());
            let backend = SimBackend::new(
                sim.handle(),
                Arc::new(builtin_registry()),
                Trace::new(),
                SimBackendConfig::default(),
            );
            let rt = backend.runtime("control");
            let outcome = sim.block_on(async move {
                let root = TaskContext::root(rt);
                let mut handle = root.spawn_task("notebook", inputs).await?;
                let url = handle.wait_for_log(None, url_line).await.expect("unbounded wait");
                let result = handle.await_result(None).await.expect("unbounded await");
                Ok::<_, TaskError>((url, result))
            });
            match outcome {
                Ok(Ok((Some(url), _))) => {
                    let _ = writeln!(out, "{}", &url["url ".len()..]);
                    EXIT_OK
                }
                Ok(Ok((None, result))) => report_result(result, out, err),
                Ok(Err(e)) => report_error(&e, err),
                Err(e) => report_error(&TaskError::new("simulation", e.to_string()), err),
            }
        }
        BackendKind::Process => {
            let tokio = tokio_runtime();
            let rt = process_runtime(Arc::new(TcpEnv::new()));
            tokio.block_on(async move {
                let root = TaskContext::root(rt);
                let mut handle = match root.spawn_task("notebook", inputs).await {
                    Ok(h) => h,
                    Err(e) => return report_error(&e.into_task_error(), err),
                };
                if let Some(url) = handle.wait_for_log(None, url_line).await.expect("unbounded wait") {
                    let _ = writeln!(out, "{}", &url["url ".len()..]);
                    let _ = out.flush();
                }
                let result = handle.await_result(None).await.expect("unbounded await");
                match result.outcome {
                    Ok(_) => EXIT_OK,
                    Err(e) => report_error(&e, err),
                }
            })
        }
    }
}
