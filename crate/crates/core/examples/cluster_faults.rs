//! Simulated cluster with a node crash and flaky jobs; reads the event log.

use std::collections::BTreeMap;
use std::sync::Arc;

use blockqnn::evaluation::{EvalRequest, SurrogateEvaluator};
use blockqnn::nsc::parse_block;
use blockqnn::runtime::{Cluster, CrashFault, DispatchOrder, EventKind, FaultPlan, JobState, SimNode, SimulatedCluster};

fn main() {
    let nodes = [SimNode::new(2), SimNode::new(2), SimNode { capacity: 4, speed: 2.0 }];
    let faults = FaultPlan {
        crashes: vec![CrashFault { node: 1, at: 90.0, recover_after: Some(300.0) }],
        job_failures: BTreeMap::from([(3, 1), (7, u32::MAX)]),
    };
    let mut cluster = SimulatedCluster::new(&nodes, Arc::new(SurrogateEvaluator::default()), 5)
        .unwrap()
        .with_faults(faults)
        .unwrap();
    cluster.order = DispatchOrder::LongestFirst;

    let blocks = ["1,1,3,0,0;2,7,0,0,0", "1,1,5,0,0;2,1,5,1,0;3,7,0,0,0", "1,4,0,0,0;2,7,0,0,0"];
    let jobs: Vec<EvalRequest> = (0..24)
        .map(|i| EvalRequest::block(i, parse_block(blocks[i as usize % 3]).unwrap(), 12, i))
        .collect();
    let report = cluster.run_batch(jobs).unwrap();

    let done = report.records.iter().filter(|r| r.state == JobState::Done).count();
    let failed: Vec<u64> = report.records.iter().filter(|r| r.state == JobState::Failed).map(|r| r.id).collect();
    println!("{done} done, failed {failed:?}, makespan {:.0}s", report.makespan());
    for e in report.events.iter().filter(|e| !matches!(e.kind, EventKind::Dispatched { .. } | EventKind::Completed | EventKind::Submitted)) {
        println!("{:>7.1}s job {:?} node {:?}: {:?}", e.time, e.job, e.node, e.kind);
    }
    let peak = report.events.iter().filter_map(|e| Some((e.node?, e.in_flight?))).fold([0usize; 3], |mut m, (n, f)| {
        m[n] = m[n].max(f);
        m
    });
    println!("peak in-flight per node {peak:?} (capacities 2, 2, 4)");
}
