//! Controller and compute nodes.
//!
//! The master hands a batch of jobs to a [`Cluster`]; the cluster assigns them
//! greedily to the least-loaded healthy node with spare capacity, frees capacity
//! as soon as a result arrives, retries retriable failures up to a bound, and
//! returns one terminal [`JobRecord`] per job, sorted by job id. Two transports
//! share the same message schema: [`SimulatedCluster`] runs everything in-process
//! on a virtual clock, [`SocketCluster`] talks to [`compute_node_serve`] over TCP.

mod server;
mod sim;
mod socket;

pub use server::{compute_node_serve, spawn_compute_node, NodeServer, ServeStats};
pub use sim::{CrashFault, DispatchOrder, FaultPlan, LatencyModel, SimNode, SimulatedCluster};
pub use socket::SocketCluster;

use std::io::{self, Write};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalError, EvalRequest, EvalResult};
use crate::nsc::NscCode;

/// Default retry budget per job after its first attempt.
pub const MAX_RETRIES: u32 = 2;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum RuntimeError {
    #[error("no healthy compute node can take the {queued} queued jobs")]
    Stall { queued: usize },
    #[error("illegal job transition for job {job}: {from:?} -> {to:?}")]
    Transition { job: u64, from: JobState, to: JobState },
    #[error("batch failed: {failed} of {total} jobs failed permanently")]
    BatchFailed { failed: usize, total: usize },
    #[error("invalid cluster configuration: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(String),
}

impl From<io::Error> for RuntimeError {
    fn from(e: io::Error) -> Self {
        RuntimeError::Io(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JobState {
    Queued,
    Dispatched,
    Done,
    Failed,
    Retried,
}

impl JobState {
    pub fn can_become(self, next: JobState) -> bool {
        use JobState::*;
        matches!(
            (self, next),
            (Queued, Dispatched) | (Dispatched, Done) | (Dispatched, Failed) | (Failed, Retried) | (Retried, Dispatched)
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct JobRecord {
    pub id: u64,
    pub codes: Vec<NscCode>,
    pub state: JobState,
    pub node: Option<usize>,
    /// Dispatches so far, including the current one.
    pub attempts: u32,
    pub submitted: f64,
    pub completed: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub result: Option<EvalResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub failure: Option<String>,
}

impl JobRecord {
    pub fn new(request: &EvalRequest, submitted: f64) -> Self {
        JobRecord {
            id: request.id,
            codes: request.codes.clone(),
            state: JobState::Queued,
            node: None,
            attempts: 0,
            submitted,
            completed: None,
            result: None,
            failure: None,
        }
    }

    pub fn transition(&mut self, next: JobState) -> Result<(), RuntimeError> {
        if !self.state.can_become(next) {
            return Err(RuntimeError::Transition { job: self.id, from: self.state, to: next });
        }
        self.state = next;
        Ok(())
    }

    pub fn is_done(&self) -> bool {
        self.state == JobState::Done
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "transport", content = "address")]
pub enum Endpoint {
    InProcess,
    Socket(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Health {
    Healthy,
    Down,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDescriptor {
    pub id: usize,
    pub capacity: usize,
    pub endpoint: Endpoint,
    pub health: Health,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "event")]
pub enum EventKind {
    Submitted,
    Dispatched { attempt: u32 },
    Completed,
    Failed { reason: String, retriable: bool },
    Requeued,
    NodeDown,
    NodeUp,
}

/// One line of the scheduling log. `in_flight` is the node's load after the event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Event {
    pub time: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub job: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub node: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub in_flight: Option<usize>,
    #[serde(flatten)]
    pub kind: EventKind,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchReport {
    /// One terminal record per submitted job, sorted by id.
    pub records: Vec<JobRecord>,
    pub events: Vec<Event>,
    pub started: f64,
    pub finished: f64,
}

impl BatchReport {
    pub fn makespan(&self) -> f64 {
        self.finished - self.started
    }

    pub fn failed(&self) -> usize {
        self.records.iter().filter(|r| !r.is_done()).count()
    }

    pub fn write_events<W: Write>(&self, out: &mut W) -> io::Result<()> {
        for e in &self.events {
            crate::protocol::write_message(out, e)?;
        }
        Ok(())
    }
}

/// Runs batches of jobs to completion.
pub trait Cluster {
    fn run_batch(&mut self, jobs: Vec<EvalRequest>) -> Result<BatchReport, RuntimeError>;

    fn nodes(&self) -> Vec<NodeDescriptor>;
}

impl<C: Cluster + ?Sized> Cluster for Box<C> {
    fn run_batch(&mut self, jobs: Vec<EvalRequest>) -> Result<BatchReport, RuntimeError> {
        (**self).run_batch(jobs)
    }

    fn nodes(&self) -> Vec<NodeDescriptor> {
        (**self).nodes()
    }
}

/// Least-loaded healthy node with spare capacity: lowest in-flight over capacity,
/// then the caller's tie-break key, then lowest id.
pub(crate) fn pick_node<K: PartialOrd>(
    nodes: &[NodeDescriptor],
    in_flight: &[usize],
    tie: impl Fn(usize) -> K,
) -> Option<usize> {
    let mut best: Option<usize> = None;
    for n in nodes.iter().filter(|n| n.health == Health::Healthy && in_flight[n.id] < n.capacity) {
        let better = match best {
            None => true,
            Some(b) => {
                let lhs = in_flight[n.id] * nodes[b].capacity;
                let rhs = in_flight[b] * n.capacity;
                lhs < rhs || (lhs == rhs && tie(n.id) < tie(b))
            }
        };
        if better {
            best = Some(n.id);
        }
    }
    best
}

/// Bookkeeping shared by both transports: records, events and the retry rule.
pub(crate) struct Ledger {
    pub records: Vec<JobRecord>,
    pub events: Vec<Event>,
    pub max_retries: u32,
}

impl Ledger {
    pub fn new(jobs: &[EvalRequest], now: f64, max_retries: u32) -> Self {
        let records = jobs.iter().map(|j| JobRecord::new(j, now)).collect();
        let events = jobs
            .iter()
            .map(|j| Event { time: now, job: Some(j.id), node: None, in_flight: None, kind: EventKind::Submitted })
            .collect();
        Ledger { records, events, max_retries }
    }

    pub fn dispatch(&mut self, slot: usize, node: usize, now: f64, load: usize) -> Result<u32, RuntimeError> {
        let r = &mut self.records[slot];
        r.transition(JobState::Dispatched)?;
        r.attempts += 1;
        r.node = Some(node);
        let attempt = r.attempts;
        self.events.push(Event {
            time: now,
            job: Some(r.id),
            node: Some(node),
            in_flight: Some(load),
            kind: EventKind::Dispatched { attempt },
        });
        Ok(attempt)
    }

    pub fn complete(&mut self, slot: usize, result: EvalResult, now: f64, load: usize) -> Result<(), RuntimeError> {
        let r = &mut self.records[slot];
        r.transition(JobState::Done)?;
        r.completed = Some(now);
        r.result = Some(result);
        r.failure = None;
        self.events.push(Event { time: now, job: Some(r.id), node: r.node, in_flight: Some(load), kind: EventKind::Completed });
        Ok(())
    }

    /// Records a failed attempt; returns true when the job goes back in the queue.
    pub fn fail(&mut self, slot: usize, error: &EvalError, now: f64, load: usize) -> Result<bool, RuntimeError> {
        let r = &mut self.records[slot];
        r.transition(JobState::Failed)?;
        r.failure = Some(error.to_string());
        let retriable = error.is_retriable();
        self.events.push(Event {
            time: now,
            job: Some(r.id),
            node: r.node,
            in_flight: Some(load),
            kind: EventKind::Failed { reason: error.to_string(), retriable },
        });
        if retriable && r.attempts <= self.max_retries {
            r.transition(JobState::Retried)?;
            self.events.push(Event { time: now, job: Some(r.id), node: None, in_flight: None, kind: EventKind::Requeued });
            Ok(true)
        } else {
            r.completed = Some(now);
            Ok(false)
        }
    }

    pub fn node_event(&mut self, node: usize, now: f64, kind: EventKind) {
        self.events.push(Event { time: now, job: None, node: Some(node), in_flight: Some(0), kind });
    }

    pub fn finish(mut self, started: f64, finished: f64) -> BatchReport {
        self.records.sort_by_key(|r| r.id);
        BatchReport { records: self.records, events: self.events, started, finished }
    }
}
