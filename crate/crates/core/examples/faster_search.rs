//! Search with a trained predictor in place of training, then rescore the
//! best blocks with the surrogate.

use std::sync::Arc;

use blockqnn::agent::{ActionSpace, LearningConfig};
use blockqnn::evaluation::{EvalRequest, Evaluator, SurrogateEvaluator};
use blockqnn::nsc::serialize_block;
use blockqnn::predictor::{train, CurveDataset, Predictor, PredictorConfig, PredictorEvaluator, TrainConfig};
use blockqnn::runtime::SimulatedCluster;
use blockqnn::search::{Master, SearchConfig};

fn main() {
    let surrogate = SurrogateEvaluator::default();
    let data = CurveDataset::generate(&surrogate, &ActionSpace::block(), 2000, 12, 1).unwrap();
    let mut pred = Predictor::new(PredictorConfig::default(), 1).unwrap();
    train(&mut pred, &data, &TrainConfig::default()).unwrap();

    let config = SearchConfig { learning: LearningConfig::centered(), ..SearchConfig::block(3) };
    let evaluator = Arc::new(PredictorEvaluator::new(Arc::new(pred)));
    let cluster = SimulatedCluster::uniform(8, 4, evaluator, 3).unwrap();
    let outcome = Master::new(config.clone(), cluster).unwrap().run().unwrap();

    for s in outcome.top(5) {
        let real = surrogate.evaluate(&EvalRequest::block(s.job, s.codes.clone(), 12, 0)).unwrap();
        println!(
            "predicted reward {:>7.3}, surrogate reward {:>7.3}: {}",
            s.reward,
            config.reward_of(&real).unwrap(),
            serialize_block(&s.codes)
        );
    }
}
