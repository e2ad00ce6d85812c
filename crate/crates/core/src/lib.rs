//! A decentralized task workflow engine: tasks spawn subtasks straight
//! through an executor backend and report to their parents over framed
//! connections. Also provides a networked workspace file system, a volume
//! broker binding exports to tasks, and a latency bench over a simulated
//! network.

pub mod backend;
pub mod bench;
pub mod cli;
pub mod env;
pub mod netfs;
pub mod runtime;
pub mod sim;
pub mod task;
pub mod tasks;
pub mod tcp;
pub mod trace;
pub mod volume;
pub mod wire;
