//! Score a few blocks with the surrogate trainer and the composite reward.

use blockqnn::evaluation::{composite_reward, EvalRequest, Evaluator, RewardConfig, StructureFeatures, SurrogateEvaluator};
use blockqnn::nsc::parse_block;

fn main() {
    let surrogate = SurrogateEvaluator::default();
    let reward = RewardConfig::default();
    let blocks = [
        ("identity", "1,7,0,0,0"),
        ("single conv", "1,1,3,0,0;2,7,0,0,0"),
        ("residual", "1,1,3,0,0;2,1,3,1,0;3,5,0,0,2;4,7,0,0,0"),
        ("two branches", "1,1,3,0,0;2,1,1,0,0;3,6,0,1,2;4,7,0,0,0"),
    ];
    println!("{:<13} {:>6} {:>6} {:>7} {:>12} {:>8}", "block", "layers", "a*", "acc@12", "FLOPs", "reward");
    for (name, text) in blocks {
        let codes = parse_block(text).unwrap();
        let f = StructureFeatures::of(&codes);
        let result = surrogate.evaluate(&EvalRequest::block(0, codes.clone(), 12, 1)).unwrap();
        let r = composite_reward(&result, &reward).unwrap();
        println!(
            "{name:<13} {:>6} {:>6.3} {:>7.4} {:>12} {:>8.3}",
            f.layers,
            surrogate.true_accuracy(&codes),
            result.early_stop_accuracy,
            result.complexity.flops,
            r
        );
    }
    let curve = surrogate.curve(&parse_block("1,1,3,0,0;2,7,0,0,0").unwrap(), 12, 3);
    let shown: Vec<String> = curve.iter().map(|v| format!("{v:.3}")).collect();
    println!("learning curve: {}", shown.join(" "));
}
