use std::collections::{BTreeMap, HashMap};
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use blockqnn::agent::{sample_trajectory, ActionSpace, QTable};
use blockqnn::evaluation::{EvalError, EvalRequest, EvalResult, Evaluator, SurrogateEvaluator};
use blockqnn::protocol::{ResultMessage, ResultStatus};
use blockqnn::runtime::{
    spawn_compute_node, BatchReport, Cluster, CrashFault, DispatchOrder, EventKind, FaultPlan, JobState,
    LatencyModel, SimNode, SimulatedCluster, SocketCluster,
};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn random_jobs(n: u64, seed: u64) -> Vec<EvalRequest> {
    let space = ActionSpace::block();
    let q = QTable::new(0.01, 1.0).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|id| EvalRequest::block(id, sample_trajectory(&q, 1.0, &space, &mut rng).into_codes(), 12, id ^ seed))
        .collect()
}

fn surrogate() -> Arc<SurrogateEvaluator> {
    Arc::new(SurrogateEvaluator::default())
}

/// Replays the event log and returns each node's peak load, checking the
/// recorded `in_flight` against the replayed count on the way.
fn peak_loads(report: &BatchReport, nodes: usize) -> Vec<usize> {
    let mut load = vec![0usize; nodes];
    let mut peak = vec![0usize; nodes];
    for e in &report.events {
        let Some(n) = e.node else { continue };
        match e.kind {
            EventKind::Dispatched { .. } => load[n] += 1,
            EventKind::Completed | EventKind::Failed { .. } => load[n] = load[n].saturating_sub(1),
            // a crash drops everything the node was running
            EventKind::NodeDown => load[n] = 0,
            _ => {}
        }
        if let Some(f) = e.in_flight {
            assert_eq!(f, load[n], "event log load disagrees at {e:?}");
        }
        peak[n] = peak[n].max(load[n]);
    }
    peak
}

fn assert_terminal(report: &BatchReport, n: usize) {
    assert_eq!(report.records.len(), n);
    for (i, r) in report.records.iter().enumerate() {
        assert_eq!(r.id, i as u64);
        assert!(matches!(r.state, JobState::Done | JobState::Failed), "job {} ended {:?}", r.id, r.state);
    }
}

#[test]
fn simulation_is_bit_identical_across_repeats() {
    let run = || {
        let nodes = [SimNode::new(3), SimNode { capacity: 2, speed: 1.7 }, SimNode::new(1)];
        let faults = FaultPlan {
            crashes: vec![CrashFault { node: 0, at: 150.0, recover_after: Some(200.0) }],
            job_failures: BTreeMap::from([(5, 1)]),
        };
        let mut c = SimulatedCluster::new(&nodes, surrogate(), 77).unwrap().with_faults(faults).unwrap();
        let a = c.run_batch(random_jobs(40, 1)).unwrap();
        let b = c.run_batch(random_jobs(40, 2).into_iter().map(|mut j| { j.id += 40; j }).collect()).unwrap();
        (serde_json::to_string(&a).unwrap(), serde_json::to_string(&b).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn crashes_lose_no_jobs_and_capacity_holds() {
    let nodes = [SimNode::new(4), SimNode::new(4), SimNode::new(2)];
    let faults = FaultPlan {
        crashes: vec![
            CrashFault { node: 0, at: 70.0, recover_after: None },
            CrashFault { node: 2, at: 100.0, recover_after: Some(50.0) },
        ],
        job_failures: BTreeMap::from([(3, 2), (9, u32::MAX)]),
    };
    let mut c = SimulatedCluster::new(&nodes, surrogate(), 3).unwrap().with_faults(faults).unwrap();
    let report = c.run_batch(random_jobs(60, 9)).unwrap();
    assert_terminal(&report, 60);
    // job 9 always fails and exhausts its retries, everything else completes
    let failed: Vec<u64> = report.records.iter().filter(|r| r.state == JobState::Failed).map(|r| r.id).collect();
    assert_eq!(failed, vec![9]);
    assert_eq!(report.records[9].attempts, 3);
    assert_eq!(report.records[3].attempts, 3);
    assert!(report.events.iter().any(|e| e.kind == EventKind::NodeDown && e.node == Some(0)));
    assert!(report.events.iter().any(|e| e.kind == EventKind::NodeUp && e.node == Some(2)));
    let peak = peak_loads(&report, 3);
    for (p, n) in peak.iter().zip(&nodes) {
        assert!(*p <= n.capacity);
    }
    // nothing runs on node 0 after it went down for good
    assert!(report
        .events
        .iter()
        .filter(|e| e.time > 70.0)
        .all(|e| !(matches!(e.kind, EventKind::Dispatched { .. }) && e.node == Some(0))));
}

#[test]
fn every_node_down_is_a_stall_not_a_hang() {
    let faults = FaultPlan {
        crashes: vec![CrashFault { node: 0, at: 1.0, recover_after: None }],
        ..FaultPlan::default()
    };
    let mut c = SimulatedCluster::uniform(1, 2, surrogate(), 0).unwrap().with_faults(faults).unwrap();
    assert!(c.run_batch(random_jobs(10, 0)).is_err());
}

#[test]
fn longest_first_never_loses_to_fifo_on_skewed_batches() {
    // a few expensive jobs at the end of the batch: LPT starts them first
    let mut jobs = random_jobs(30, 4);
    let heavy = blockqnn::nsc::parse_block("1,1,5,0,0;2,1,5,1,0;3,1,5,2,0;4,1,5,3,0;5,7,0,0,0").unwrap();
    for j in jobs.iter_mut().skip(26) {
        j.codes = heavy.clone();
    }
    let latency = LatencyModel { base: 1.0, per_gflop: 2000.0, jitter: 0.0 };
    let makespan = |order| {
        let mut c = SimulatedCluster::uniform(2, 2, surrogate(), 1).unwrap();
        c.latency = latency;
        c.order = order;
        let r = c.run_batch(jobs.clone()).unwrap();
        assert_terminal(&r, 30);
        r.makespan()
    };
    let fifo = makespan(DispatchOrder::Fifo);
    let lpt = makespan(DispatchOrder::LongestFirst);
    assert!(lpt < fifo, "lpt {lpt} fifo {fifo}");
}

#[test]
fn dispatch_prefers_the_least_loaded_node() {
    let mut c = SimulatedCluster::new(&[SimNode::new(4), SimNode::new(1)], surrogate(), 2).unwrap();
    let r = c.run_batch(random_jobs(5, 5)).unwrap();
    let first: Vec<usize> = r
        .events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::Dispatched { attempt: 1 }))
        .take(5)
        .map(|e| e.node.unwrap())
        .collect();
    // node 1 fills its single slot, node 0 takes the rest
    assert_eq!(first.iter().filter(|&&n| n == 1).count(), 1);
    assert_eq!(peak_loads(&r, 2), vec![4, 1]);
}

#[test]
fn socket_cluster_matches_the_simulation() {
    let a = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    let b = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    let nodes = vec![(a.local_addr().to_string(), 3), (b.local_addr().to_string(), 2)];
    let mut sock = SocketCluster::new(&nodes, Duration::from_secs(10)).unwrap();
    let jobs = random_jobs(25, 12);
    let remote = sock.run_batch(jobs.clone()).unwrap();
    assert_terminal(&remote, 25);
    let mut sim = SimulatedCluster::uniform(2, 3, surrogate(), 0).unwrap();
    let local = sim.run_batch(jobs).unwrap();
    for (r, l) in remote.records.iter().zip(&local.records) {
        let (r, l) = (r.result.as_ref().unwrap(), l.result.as_ref().unwrap());
        assert_eq!(r.accuracy_curve, l.accuracy_curve);
        assert_eq!(r.complexity, l.complexity);
    }
    let peak = peak_loads(&remote, 2);
    assert!(peak[0] <= 3 && peak[1] <= 2);
    let served = a.shutdown().unwrap().jobs + b.shutdown().unwrap().jobs;
    assert_eq!(served, 25);
}

/// Fails the first attempt of every job with a retriable error.
struct Flaky {
    calls: AtomicUsize,
    seen: std::sync::Mutex<HashMap<u64, u32>>,
}

impl Evaluator for Flaky {
    fn evaluate(&self, r: &EvalRequest) -> Result<EvalResult, EvalError> {
        self.calls.fetch_add(1, Ordering::SeqCst);
        let mut seen = self.seen.lock().unwrap();
        let n = seen.entry(r.id).or_default();
        *n += 1;
        if *n == 1 {
            return Err(EvalError::Remote { reason: "transient".into(), retriable: true });
        }
        SurrogateEvaluator::default().evaluate(r)
    }

    fn name(&self) -> &str {
        "flaky"
    }
}

#[test]
fn socket_retries_transient_failures() {
    let flaky = Arc::new(Flaky { calls: AtomicUsize::new(0), seen: Default::default() });
    let node = spawn_compute_node("127.0.0.1:0", flaky.clone()).unwrap();
    let mut sock = SocketCluster::new(&[(node.local_addr().to_string(), 2)], Duration::from_secs(10)).unwrap();
    let r = sock.run_batch(random_jobs(6, 3)).unwrap();
    assert_terminal(&r, 6);
    assert!(r.records.iter().all(|j| j.state == JobState::Done && j.attempts == 2));
    assert_eq!(flaky.calls.load(Ordering::SeqCst), 12);
}

#[test]
fn unreachable_nodes_are_skipped() {
    let live = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    // bind and drop to get a port nobody listens on
    let dead = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let nodes = vec![(dead.to_string(), 4), (live.local_addr().to_string(), 2)];
    let mut sock = SocketCluster::new(&nodes, Duration::from_secs(5)).unwrap();
    let r = sock.run_batch(random_jobs(8, 8)).unwrap();
    assert_terminal(&r, 8);
    assert!(r.records.iter().all(|j| j.state == JobState::Done && j.node == Some(1)));
}

fn connect(addr: std::net::SocketAddr) -> (TcpStream, BufReader<TcpStream>) {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

fn exchange(w: &mut TcpStream, r: &mut BufReader<TcpStream>, line: &str) -> serde_json::Value {
    w.write_all(line.as_bytes()).unwrap();
    w.write_all(b"\n").unwrap();
    let mut reply = String::new();
    r.read_line(&mut reply).unwrap();
    serde_json::from_str(&reply).unwrap()
}

#[test]
fn server_answers_malformed_lines_and_keeps_the_connection() {
    let node = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    let (mut w, mut r) = connect(node.local_addr());
    let bad = exchange(&mut w, &mut r, "{not json");
    assert_eq!(bad["status"], "protocol_error");
    assert!(bad["id"].is_null());
    let wrong = exchange(&mut w, &mut r, r#"{"id":4,"hello":1}"#);
    assert_eq!(wrong["status"], "protocol_error");
    assert_eq!(wrong["id"], 4);
    let ok = exchange(&mut w, &mut r, r#"{"id":5,"codes":[[1,1,3,0,0],[2,7,0,0,0]],"epochs":3,"seed":1}"#);
    let msg: ResultMessage = serde_json::from_value(ok).unwrap();
    assert_eq!(msg.status, ResultStatus::Ok);
    assert_eq!(msg.curve.len(), 3);
    let broken = exchange(&mut w, &mut r, r#"{"id":6,"codes":[[1,1,3,4,0],[2,7,0,0,0]],"epochs":3}"#);
    assert_eq!(broken["status"], "failed");
    assert!(broken.get("retriable").is_none());
    let health = exchange(&mut w, &mut r, r#"{"type":"health"}"#);
    assert_eq!(health["status"], "ok");
    assert_eq!(node.shutdown().unwrap().protocol_errors, 2);
}

#[test]
fn server_evaluates_a_repeated_job_once() {
    let node = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    let job = r#"{"id":9,"codes":[[1,1,3,0,0],[2,7,0,0,0]],"epochs":12,"seed":4}"#;
    let mut replies = Vec::new();
    for _ in 0..3 {
        let (mut w, mut r) = connect(node.local_addr());
        replies.push(exchange(&mut w, &mut r, job));
    }
    assert!(replies.windows(2).all(|p| p[0] == p[1]));
    let stats = node.shutdown().unwrap();
    assert_eq!((stats.jobs, stats.evaluations), (3, 1));
}

#[test]
fn shutdown_message_stops_the_node_after_answering() {
    let node = spawn_compute_node("127.0.0.1:0", surrogate()).unwrap();
    let addr = node.local_addr();
    let (mut w, mut r) = connect(addr);
    exchange(&mut w, &mut r, r#"{"id":1,"codes":[[1,7,0,0,0]],"epochs":2}"#);
    let bye = exchange(&mut w, &mut r, r#"{"type":"shutdown"}"#);
    assert_eq!(bye["type"], "shutdown");
    let stats = node.join().unwrap();
    assert_eq!(stats.jobs, 1);
    assert!(TcpStream::connect_timeout(&addr, Duration::from_millis(500)).is_err());
}
