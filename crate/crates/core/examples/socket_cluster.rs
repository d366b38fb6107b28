//! Two compute nodes on localhost driven over TCP by a short search.

use std::sync::Arc;
use std::time::Duration;

use blockqnn::agent::EpsilonSchedule;
use blockqnn::evaluation::SurrogateEvaluator;
use blockqnn::runtime::{spawn_compute_node, SocketCluster};
use blockqnn::search::{Master, SearchConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let surrogate = Arc::new(SurrogateEvaluator::default());
    let a = spawn_compute_node("127.0.0.1:0", surrogate.clone())?;
    let b = spawn_compute_node("127.0.0.1:0", surrogate)?;
    println!("nodes at {} and {}", a.local_addr(), b.local_addr());

    let nodes = vec![(a.local_addr().to_string(), 4), (b.local_addr().to_string(), 2)];
    let cluster = SocketCluster::new(&nodes, Duration::from_secs(10))?;
    let config = SearchConfig {
        schedule: EpsilonSchedule::new(vec![(1.0, 4), (0.5, 3), (0.1, 3)])?,
        batch_size: 32,
        ..SearchConfig::block(2)
    };
    let outcome = Master::new(config, cluster)?.run_with(|_, row, report| {
        let per_node = report.records.iter().fold([0; 2], |mut n, r| {
            n[r.node.unwrap_or(0)] += 1;
            n
        });
        println!("iteration {:>2}: mean reward {:>7.3}, jobs per node {per_node:?}", row.iteration, row.mean_reward);
    })?;
    println!("{} blocks evaluated", outcome.samples.len());

    for node in [a, b] {
        let stats = node.shutdown()?;
        println!("node served {} jobs ({} evaluations)", stats.jobs, stats.evaluations);
    }
    Ok(())
}
