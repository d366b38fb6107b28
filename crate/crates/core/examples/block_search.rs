//! A full block search on the surrogate: 178 iterations of 64 blocks on a
//! simulated 8-node cluster.
//!
//! `cargo run --release --example block_search -- [seed] [centered]`

use std::sync::Arc;

use blockqnn::agent::LearningConfig;
use blockqnn::evaluation::SurrogateEvaluator;
use blockqnn::nsc::serialize_block;
use blockqnn::runtime::SimulatedCluster;
use blockqnn::search::{Master, RewardSignal, SearchConfig};

fn main() {
    let mut args = std::env::args().skip(1);
    let seed: u64 = args.next().map(|s| s.parse().expect("seed")).unwrap_or(0);
    let centered = args.next().as_deref() == Some("centered");

    let mut config = SearchConfig::block(seed);
    if centered {
        // learn from accuracy with a replay-mean baseline; see LearningConfig::centered
        config.signal = RewardSignal::Accuracy;
        config.learning = LearningConfig::centered();
    }
    let cluster = SimulatedCluster::uniform(8, 4, Arc::new(SurrogateEvaluator::default()), seed).unwrap();
    let master = Master::new(config, cluster).unwrap();

    let mut last_eps = f64::NAN;
    let outcome = master
        .run_with(|m, row, _| {
            if row.epsilon != last_eps {
                last_eps = row.epsilon;
                println!(
                    "iteration {:>3} epsilon {:.1}: mean reward {:>7.3}, mean accuracy {:.4}, virtual clock {:.0}s",
                    row.iteration,
                    row.epsilon,
                    row.mean_reward,
                    row.mean_accuracy,
                    m.cluster().clock()
                );
            }
        })
        .unwrap();

    println!("{} iterations, {} blocks sampled", outcome.rows.len(), outcome.total_samples());
    for s in outcome.top(5) {
        println!("reward {:>7.3} acc {:.4} iter {:>3}: {}", s.reward, s.accuracy, s.iteration, serialize_block(&s.codes));
    }
}
