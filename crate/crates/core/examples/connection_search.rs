//! Search how instances of a fixed block are wired together (46 iterations).

use std::sync::Arc;

use blockqnn::agent::LearningConfig;
use blockqnn::evaluation::SurrogateEvaluator;
use blockqnn::graph::{build_block, build_connection_network, Template};
use blockqnn::nsc::{parse_block, serialize_block};
use blockqnn::runtime::SimulatedCluster;
use blockqnn::search::{Master, RewardSignal, SearchConfig};

fn main() {
    let block = parse_block("1,1,3,0,0;2,1,3,1,0;3,5,0,0,2;4,7,0,0,0").unwrap();
    // accuracy only: under the composite reward, networks with fewer block
    // instances win on FLOPs alone
    let config = SearchConfig {
        signal: RewardSignal::Accuracy,
        learning: LearningConfig::centered(),
        ..SearchConfig::connection(11, block.clone())
    };
    let cluster = SimulatedCluster::uniform(4, 8, Arc::new(SurrogateEvaluator::default()), 11).unwrap();
    let outcome = Master::new(config, cluster).unwrap().run().unwrap();
    println!("{} iterations, {} connection styles sampled", outcome.rows.len(), outcome.total_samples());

    let template = Template::cifar();
    let graph = build_block(&block, template.base_width).unwrap();
    for s in outcome.top(3) {
        let plan = build_connection_network(&s.codes, &graph, &template).unwrap();
        println!(
            "reward {:.3}: {} blocks, {} poolings, {} adapters  {}",
            s.reward,
            plan.block_instances(),
            plan.pooling_count(),
            plan.adapter_count(),
            serialize_block(&s.codes)
        );
    }
}
