use std::collections::VecDeque;
use std::io::BufReader;
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc;
use std::thread;
use std::time::{Duration, Instant};

use log::warn;

use super::{pick_node, BatchReport, Cluster, Endpoint, EventKind, Health, Ledger, NodeDescriptor, RuntimeError, MAX_RETRIES};
use crate::evaluation::{EvalError, EvalRequest, EvalResult, Evaluator, ExternalEvaluator};
use crate::protocol::{read_line, write_message, ControlMessage, HealthReply};

/// Controller that dispatches jobs to remote compute nodes over TCP, one
/// connection per in-flight job.
pub struct SocketCluster {
    nodes: Vec<NodeDescriptor>,
    /// Per-job budget for connect, send and result.
    pub timeout: Duration,
    pub max_retries: u32,
    /// How long a batch may wait with work queued and no usable node.
    pub stall_timeout: Duration,
    epoch: Instant,
}

type Completion = (usize, usize, Result<EvalResult, EvalError>);

impl SocketCluster {
    /// `nodes` holds `(address, capacity)` pairs.
    pub fn new(nodes: &[(String, usize)], timeout: Duration) -> Result<Self, RuntimeError> {
        if nodes.is_empty() {
            return Err(RuntimeError::Config("at least one node is required".into()));
        }
        if let Some((addr, _)) = nodes.iter().find(|n| n.1 == 0) {
            return Err(RuntimeError::Config(format!("node {addr} has zero capacity")));
        }
        let nodes = nodes
            .iter()
            .enumerate()
            .map(|(id, (addr, capacity))| NodeDescriptor {
                id,
                capacity: *capacity,
                endpoint: Endpoint::Socket(addr.clone()),
                health: Health::Healthy,
            })
            .collect();
        Ok(SocketCluster {
            nodes,
            timeout,
            max_retries: MAX_RETRIES,
            stall_timeout: Duration::from_secs(10),
            epoch: Instant::now(),
        })
    }

    fn address(&self, node: usize) -> &str {
        match &self.nodes[node].endpoint {
            Endpoint::Socket(a) => a,
            Endpoint::InProcess => unreachable!("socket cluster nodes are sockets"),
        }
    }

    /// Sends a health message; true when the node answers.
    pub fn probe(&self, node: usize) -> bool {
        let attempt = || -> Option<HealthReply> {
            let addr = self.address(node).to_socket_addrs().ok()?.next()?;
            let stream = TcpStream::connect_timeout(&addr, self.timeout).ok()?;
            stream.set_read_timeout(Some(self.timeout)).ok()?;
            let mut w = stream.try_clone().ok()?;
            write_message(&mut w, &ControlMessage::Health).ok()?;
            let line = read_line(&mut BufReader::new(stream)).ok()??;
            serde_json::from_str(&line).ok()
        };
        attempt().is_some_and(|h| h.status == "ok")
    }
}

impl Cluster for SocketCluster {
    fn run_batch(&mut self, jobs: Vec<EvalRequest>) -> Result<BatchReport, RuntimeError> {
        let now = |epoch: &Instant| epoch.elapsed().as_secs_f64();
        let started = now(&self.epoch);
        let mut ledger = Ledger::new(&jobs, started, self.max_retries);
        let mut queue: VecDeque<usize> = (0..jobs.len()).collect();
        let mut load = vec![0usize; self.nodes.len()];
        let mut running = 0usize;
        let (tx, rx) = mpsc::channel::<Completion>();
        let mut stalled_since: Option<Instant> = None;

        loop {
            while let Some(&slot) = queue.front() {
                let Some(node) = pick_node(&self.nodes, &load, |i| i) else { break };
                queue.pop_front();
                load[node] += 1;
                running += 1;
                ledger.dispatch(slot, node, now(&self.epoch), load[node])?;
                let client = ExternalEvaluator::new(self.address(node), self.timeout);
                let job = jobs[slot].clone();
                let tx = tx.clone();
                thread::spawn(move || {
                    let _ = tx.send((slot, node, client.evaluate(&job)));
                });
            }
            if running == 0 && queue.is_empty() {
                break;
            }
            if running == 0 {
                for id in 0..self.nodes.len() {
                    if self.nodes[id].health == Health::Down && self.probe(id) {
                        self.nodes[id].health = Health::Healthy;
                        ledger.node_event(id, now(&self.epoch), EventKind::NodeUp);
                    }
                }
                if self.nodes.iter().any(|n| n.health == Health::Healthy) {
                    stalled_since = None;
                    continue;
                }
                let since = *stalled_since.get_or_insert_with(Instant::now);
                if since.elapsed() > self.stall_timeout {
                    return Err(RuntimeError::Stall { queued: queue.len() });
                }
                thread::sleep(Duration::from_millis(50));
                continue;
            }
            let (slot, node, outcome) = match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(c) => c,
                Err(mpsc::RecvTimeoutError::Timeout) => continue,
                Err(mpsc::RecvTimeoutError::Disconnected) => unreachable!("controller holds a sender"),
            };
            running -= 1;
            load[node] -= 1;
            let t = now(&self.epoch);
            match outcome {
                Ok(result) => ledger.complete(slot, result, t, load[node])?,
                Err(e) => {
                    if matches!(e, EvalError::Io(_)) && self.nodes[node].health == Health::Healthy {
                        warn!("node {node} unreachable: {e}");
                        self.nodes[node].health = Health::Down;
                        ledger.node_event(node, t, EventKind::NodeDown);
                    }
                    if ledger.fail(slot, &e, t, load[node])? {
                        queue.push_back(slot);
                    }
                }
            }
        }
        Ok(ledger.finish(started, now(&self.epoch)))
    }

    fn nodes(&self) -> Vec<NodeDescriptor> {
        self.nodes.clone()
    }
}
