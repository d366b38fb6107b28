use std::collections::{BTreeMap, VecDeque};
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{
    pick_node, BatchReport, Cluster, Endpoint, EventKind, Health, Ledger, NodeDescriptor, RuntimeError, MAX_RETRIES,
};
use crate::evaluation::{EvalError, EvalRequest, Evaluator};
use crate::mix64;

/// Virtual training time of one job: `(base + per_gflop * GFLOPs) / speed`,
/// scaled by a seeded factor in `[1 - jitter, 1 + jitter]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyModel {
    pub base: f64,
    pub per_gflop: f64,
    pub jitter: f64,
}

impl Default for LatencyModel {
    fn default() -> Self {
        LatencyModel { base: 60.0, per_gflop: 30.0, jitter: 0.2 }
    }
}

impl LatencyModel {
    pub fn estimate(&self, flops: u64) -> f64 {
        self.base + self.per_gflop * flops as f64 / 1e9
    }

    pub fn duration(&self, flops: u64, speed: f64, seed: u64, job: u64, attempt: u32) -> f64 {
        let mut rng = ChaCha8Rng::seed_from_u64(mix64(mix64(seed, job), attempt as u64));
        let scale = if self.jitter > 0.0 { 1.0 + rng.gen_range(-self.jitter..=self.jitter) } else { 1.0 };
        self.estimate(flops) * scale / speed
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimNode {
    pub capacity: usize,
    /// Relative throughput; durations are divided by it.
    pub speed: f64,
}

impl SimNode {
    pub fn new(capacity: usize) -> Self {
        SimNode { capacity, speed: 1.0 }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DispatchOrder {
    /// Submit order; requeued jobs go to the back.
    #[default]
    Fifo,
    /// Longest estimated job first within each batch.
    LongestFirst,
}

/// A node outage at an absolute virtual time, optionally followed by recovery.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CrashFault {
    pub node: usize,
    pub at: f64,
    pub recover_after: Option<f64>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct FaultPlan {
    pub crashes: Vec<CrashFault>,
    /// Job id -> number of leading attempts that fail (`u32::MAX` for always).
    pub job_failures: BTreeMap<u64, u32>,
}

#[derive(Debug, Clone, Copy)]
enum NodeChange {
    Down,
    Up,
}

struct Running {
    slot: usize,
    node: usize,
    finish: f64,
    seq: u64,
}

/// In-process cluster on a virtual clock. Given the same seed, evaluator and
/// fault plan, every batch produces identical records and events.
pub struct SimulatedCluster {
    nodes: Vec<NodeDescriptor>,
    speeds: Vec<f64>,
    evaluator: Arc<dyn Evaluator>,
    pub latency: LatencyModel,
    pub order: DispatchOrder,
    pub max_retries: u32,
    seed: u64,
    clock: f64,
    /// Pending node changes, ordered by time then insertion.
    changes: Vec<(f64, usize, NodeChange)>,
    job_failures: BTreeMap<u64, u32>,
    dispatch_seq: u64,
}

impl SimulatedCluster {
    pub fn new(nodes: &[SimNode], evaluator: Arc<dyn Evaluator>, seed: u64) -> Result<Self, RuntimeError> {
        if nodes.is_empty() {
            return Err(RuntimeError::Config("at least one node is required".into()));
        }
        if let Some(i) = nodes.iter().position(|n| n.capacity == 0 || n.speed.is_nan() || n.speed <= 0.0) {
            return Err(RuntimeError::Config(format!("node {i} needs capacity >= 1 and positive speed")));
        }
        let descriptors = nodes
            .iter()
            .enumerate()
            .map(|(id, n)| NodeDescriptor { id, capacity: n.capacity, endpoint: Endpoint::InProcess, health: Health::Healthy })
            .collect();
        Ok(SimulatedCluster {
            nodes: descriptors,
            speeds: nodes.iter().map(|n| n.speed).collect(),
            evaluator,
            latency: LatencyModel::default(),
            order: DispatchOrder::Fifo,
            max_retries: MAX_RETRIES,
            seed,
            clock: 0.0,
            changes: Vec::new(),
            job_failures: BTreeMap::new(),
            dispatch_seq: 0,
        })
    }

    /// `count` identical nodes of unit speed.
    pub fn uniform(count: usize, capacity: usize, evaluator: Arc<dyn Evaluator>, seed: u64) -> Result<Self, RuntimeError> {
        Self::new(&vec![SimNode::new(capacity); count], evaluator, seed)
    }

    pub fn with_faults(mut self, faults: FaultPlan) -> Result<Self, RuntimeError> {
        for c in &faults.crashes {
            if c.node >= self.nodes.len() {
                return Err(RuntimeError::Config(format!("crash targets unknown node {}", c.node)));
            }
            self.changes.push((c.at, c.node, NodeChange::Down));
            if let Some(d) = c.recover_after {
                self.changes.push((c.at + d, c.node, NodeChange::Up));
            }
        }
        self.changes.sort_by(|a, b| a.0.total_cmp(&b.0));
        self.job_failures = faults.job_failures;
        Ok(self)
    }

    pub fn clock(&self) -> f64 {
        self.clock
    }

    fn injected_failure(&mut self, job: u64) -> Option<EvalError> {
        let left = self.job_failures.get_mut(&job)?;
        if *left == 0 {
            return None;
        }
        if *left != u32::MAX {
            *left -= 1;
        }
        Some(EvalError::Remote { reason: "injected failure".into(), retriable: true })
    }
}

impl Cluster for SimulatedCluster {
    fn run_batch(&mut self, jobs: Vec<EvalRequest>) -> Result<BatchReport, RuntimeError> {
        let started = self.clock;
        let mut ledger = Ledger::new(&jobs, started, self.max_retries);
        let mut now = started;
        // controller side: build each structure once to size the job; structures
        // that do not build still go out and fail on the node with a reason
        let flops: Vec<u64> = jobs.iter().map(|j| j.complexity().map(|c| c.flops).unwrap_or(0)).collect();
        let mut queue: VecDeque<usize> = (0..jobs.len()).collect();
        if self.order == DispatchOrder::LongestFirst {
            let est: Vec<f64> = flops.iter().map(|&f| self.latency.estimate(f)).collect();
            let mut v: Vec<usize> = queue.into_iter().collect();
            v.sort_by(|&a, &b| est[b].total_cmp(&est[a]).then(a.cmp(&b)));
            queue = v.into();
        }

        let mut load = vec![0usize; self.nodes.len()];
        let mut running: Vec<Running> = Vec::new();
        loop {
            while let Some(&slot) = queue.front() {
                let speeds = &self.speeds;
                let Some(node) = pick_node(&self.nodes, &load, |i| -speeds[i]) else { break };
                queue.pop_front();
                load[node] += 1;
                let attempt = ledger.dispatch(slot, node, now, load[node])?;
                let d = self.latency.duration(flops[slot], self.speeds[node], self.seed, jobs[slot].id, attempt);
                self.dispatch_seq += 1;
                running.push(Running { slot, node, finish: now + d, seq: self.dispatch_seq });
            }
            if running.is_empty() && queue.is_empty() {
                break;
            }
            let next_done = running
                .iter()
                .enumerate()
                .min_by(|a, b| a.1.finish.total_cmp(&b.1.finish).then(a.1.seq.cmp(&b.1.seq)))
                .map(|(i, r)| (i, r.finish));
            let next_change = self.changes.first().map(|c| c.0);
            match (next_done, next_change) {
                (None, None) => return Err(RuntimeError::Stall { queued: queue.len() }),
                (Some((i, t)), change) if change.is_none_or(|c| t <= c) => {
                    let r = running.swap_remove(i);
                    now = t;
                    load[r.node] -= 1;
                    let outcome = match self.injected_failure(jobs[r.slot].id) {
                        Some(e) => Err(e),
                        None => self.evaluator.evaluate(&jobs[r.slot]),
                    };
                    match outcome {
                        Ok(result) => ledger.complete(r.slot, result, now, load[r.node])?,
                        Err(e) => {
                            if ledger.fail(r.slot, &e, now, load[r.node])? {
                                queue.push_back(r.slot);
                            }
                        }
                    }
                }
                _ => {
                    let (t, node, change) = self.changes.remove(0);
                    now = now.max(t);
                    match change {
                        NodeChange::Down => {
                            if self.nodes[node].health == Health::Down {
                                continue;
                            }
                            self.nodes[node].health = Health::Down;
                            load[node] = 0;
                            ledger.node_event(node, now, EventKind::NodeDown);
                            let (lost, kept): (Vec<Running>, Vec<Running>) =
                                running.into_iter().partition(|r| r.node == node);
                            running = kept;
                            let err = EvalError::Io(format!("node {node} crashed"));
                            for r in lost {
                                if ledger.fail(r.slot, &err, now, 0)? {
                                    queue.push_back(r.slot);
                                }
                            }
                        }
                        NodeChange::Up => {
                            self.nodes[node].health = Health::Healthy;
                            ledger.node_event(node, now, EventKind::NodeUp);
                        }
                    }
                }
            }
        }
        self.clock = now;
        Ok(ledger.finish(started, now))
    }

    fn nodes(&self) -> Vec<NodeDescriptor> {
        self.nodes.clone()
    }
}
