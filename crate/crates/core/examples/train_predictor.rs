//! Train the accuracy predictor on surrogate-labeled blocks, check its
//! gradients, and measure held-out rank correlation.
//!
//! `cargo run --release --example train_predictor -- [samples]`

use blockqnn::agent::ActionSpace;
use blockqnn::evaluation::SurrogateEvaluator;
use blockqnn::predictor::{gradient_check, spearman, train, CurveDataset, Predictor, PredictorConfig, TrainConfig};

fn main() {
    let samples: usize = std::env::args().nth(1).map(|s| s.parse().expect("sample count")).unwrap_or(2000);
    let surrogate = SurrogateEvaluator::default();
    let space = ActionSpace::block();
    let data = CurveDataset::generate(&surrogate, &space, samples, 12, 1).unwrap();
    let held = CurveDataset::generate(&surrogate, &space, 500, 12, 2).unwrap();

    // gradient check on a tiny network first
    let small = PredictorConfig { embed_dim: 4, hidden: 6, mlp_width: 5, ..PredictorConfig::default() };
    let probe = Predictor::new(small, 3).unwrap();
    let batch: Vec<_> = data.samples[..4].iter().map(|s| (s.codes.as_slice(), 12, s.curve[11])).collect();
    let gc = gradient_check(&probe, &batch, 30, 1e-5, 7).unwrap();
    println!("gradient check: {} parameters, max relative error {:.2e} ({})", gc.checked, gc.max_rel_error, gc.worst);

    let mut pred = Predictor::new(PredictorConfig::default(), 1).unwrap();
    let report = train(&mut pred, &data, &TrainConfig { seed: 1, ..TrainConfig::default() }).unwrap();
    for (epoch, loss) in report.epoch_losses.iter().enumerate().filter(|(e, _)| e % 10 == 9) {
        println!("epoch {:>2}: loss {loss:.3e}", epoch + 1);
    }

    let items: Vec<_> = held.samples.iter().map(|s| (s.codes.as_slice(), 12)).collect();
    let predicted = pred.predict_batch(&items).unwrap();
    let actual: Vec<f64> = held.samples.iter().map(|s| s.curve[11]).collect();
    println!("held-out Spearman over {} blocks: {:.4}", actual.len(), spearman(&predicted, &actual));
}
