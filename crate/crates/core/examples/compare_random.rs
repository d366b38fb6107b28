//! Q-learning against uniform random sampling on equal budgets.

use std::sync::Arc;

use blockqnn::agent::LearningConfig;
use blockqnn::app::compare_rows;
use blockqnn::evaluation::SurrogateEvaluator;
use blockqnn::runtime::SimulatedCluster;
use blockqnn::search::{Master, RewardSignal, SearchConfig};

fn main() {
    let seed = 4;
    let config = SearchConfig { signal: RewardSignal::Accuracy, learning: LearningConfig::centered(), ..SearchConfig::block(seed) };
    let surrogate = Arc::new(SurrogateEvaluator::default());
    let run = |c: SearchConfig| {
        let cluster = SimulatedCluster::uniform(8, 4, surrogate.clone(), seed).unwrap();
        Master::new(c, cluster).unwrap().run().unwrap()
    };
    let q = run(config.clone());
    let r = run(config.random());
    println!("iteration  epsilon  top-5 accuracy (Q-learning / random)");
    for row in compare_rows(&q, &r, 5).iter().filter(|row| row.iteration % 20 == 0 || row.iteration == 178) {
        println!(
            "{:>9}  {:>7.1}  {:.4} / {:.4}",
            row.iteration, row.epsilon, row.qlearning_top5_accuracy, row.random_top5_accuracy
        );
    }
}
