use std::sync::Arc;
use std::time::Duration;

use futures::channel::mpsc;
use futures::StreamExt;

use super::ChildEvent;
use crate::backend::InstanceId;
use crate::env::{maybe_timeout, Env};
use crate::task::{transition, LifecycleEvent, TaskError, TaskId, TaskResult, TaskState};
use crate::wire::{LogStream, Message};

#[derive(Debug, Clone, Copy, PartialEq, Eq, thiserror::Error)]
#[error("timed out waiting for task {0}")]
pub struct AwaitTimeout(pub TaskId);

/// Parent-side view of a spawned child.
pub struct TaskHandle {
    task: TaskId,
    instance: InstanceId,
    state: TaskState,
    env: Arc<dyn Env>,
    events: mpsc::UnboundedReceiver<ChildEvent>,
    logs: Vec<(LogStream, String)>,
    result: Option<TaskResult>,
}

impl TaskHandle {
    pub(crate) fn new(
        task: TaskId,
        instance: InstanceId,
        env: Arc<dyn Env>,
        events: mpsc::UnboundedReceiver<ChildEvent>,
    ) -> Self {
        TaskHandle {
            task,
            instance,
            state: TaskState::Scheduled,
            env,
            events,
            logs: Vec::new(),
            result: None,
        }
    }

    pub fn task(&self) -> TaskId {
        self.task
    }

    pub fn instance(&self) -> &InstanceId {
        &self.instance
    }

    /// State as observed from the frames received so far.
    pub fn state(&self) -> TaskState {
        self.state
    }

    /// Log lines received so far, in order.
    pub fn logs(&self) -> &[(LogStream, String)] {
        &self.logs
    }

    /// Waits for the child's outcome. On timeout the handle stays usable.
    pub async fn await_result(&mut self, timeout: Option<Duration>) -> Result<TaskResult, AwaitTimeout> {
        let deadline = timeout.map(|t| self.env.now() + t);
        loop {
            if let Some(result) = &self.result {
                return Ok(result.clone());
            }
            self.step(deadline).await?;
        }
    }

    /// Waits until a log line satisfies `pred` or the task ends.
    pub async fn wait_for_log(
        &mut self,
        timeout: Option<Duration>,
        pred: impl Fn(LogStream, &str) -> bool,
    ) -> Result<Option<String>, AwaitTimeout> {
        let deadline = timeout.map(|t| self.env.now() + t);
        let mut seen = 0;
        loop {
            if let Some((_, text)) = self.logs[seen..].iter().find(|(s, t)| pred(*s, t)) {
                return Ok(Some(text.clone()));
            }
            seen = self.logs.len();
            if self.result.is_some() {
                return Ok(None);
            }
            self.step(deadline).await?;
        }
    }

    async fn step(&mut self, deadline: Option<Duration>) -> Result<(), AwaitTimeout> {
        let remaining = deadline.map(|d| d.saturating_sub(self.env.now()));
        let event = maybe_timeout(self.env.as_ref(), remaining, self.events.next())
            .await
            .map_err(|_| AwaitTimeout(self.task))?;
        match event {
            Some(ChildEvent::Frame(message)) => self.apply(message),
            Some(ChildEvent::Closed { reset: false }) | None => self.finish(
                LifecycleEvent::Cancel,
                Err(TaskError::new("canceled", "instance closed its connection")),
            ),
            Some(ChildEvent::Closed { reset: true }) => self.finish(
                LifecycleEvent::Fail,
                Err(TaskError::new("connection-lost", "connection to the task was lost")),
            ),
        }
        Ok(())
    }

    fn apply(&mut self, message: Message) {
        match message {
            Message::Status {
                state: TaskState::Running,
                ..
            } => self.advance(LifecycleEvent::Start),
            Message::Log { stream, text, .. } => self.logs.push((stream, text)),
            Message::Return { value, .. } => self.finish(LifecycleEvent::Return, Ok(value)),
            Message::Fail { error, .. } => self.finish(LifecycleEvent::Fail, Err(error)),
            _ => {}
        }
    }

    fn advance(&mut self, event: LifecycleEvent) {
        if let Ok(next) = transition(self.state, event) {
            self.state = next;
        }
    }

    fn finish(&mut self, event: LifecycleEvent, outcome: Result<crate::task::Value, TaskError>) {
        if self.result.is_some() {
            return;
        }
        match transition(self.state, event) {
            Ok(next) => self.state = next,
            // A connection lost before the child started still fails it.
            Err(_) if !self.state.is_terminal() => {
                self.state = match event {
                    LifecycleEvent::Cancel => TaskState::Canceled,
                    _ => TaskState::Failed,
                }
            }
            Err(_) => {}
        }
        self.result = Some(TaskResult {
            task: self.task,
            outcome,
        });
    }
}
