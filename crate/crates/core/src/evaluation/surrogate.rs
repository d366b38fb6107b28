use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::mix64 as fold;
use crate::nsc::{NscCode, OpType};

/// Weights of the deterministic accuracy oracle
///
/// ```text
/// a* = clamp(base + w_add [has Add] + w_branch [multi-branch]
///            + w_depth min(d, d0) / d0 - w_excess max(0, d - d0) + eta, 0, 1)
/// ```
///
/// where `d` is the number of layers and `eta` is a per-topology offset in
/// `[-noise, noise]` (zero for the empty block).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SurrogateConfig {
    pub base: f64,
    pub w_add: f64,
    pub w_branch: f64,
    pub w_depth: f64,
    pub w_excess: f64,
    pub noise: f64,
    pub depth_knee: u32,
    /// Range of the learning-curve time constant, in epochs.
    pub tau_min: f64,
    pub tau_max: f64,
    /// Seeded jitter on every epoch but the last.
    pub curve_noise: f64,
}

impl Default for SurrogateConfig {
    fn default() -> Self {
        SurrogateConfig {
            base: 0.56,
            w_add: 0.03,
            w_branch: 0.03,
            w_depth: 0.04,
            w_excess: 0.01,
            noise: 0.02,
            depth_knee: 12,
            tau_min: 1.0,
            tau_max: 3.0,
            curve_noise: 0.005,
        }
    }
}

/// What the oracle looks at.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct StructureFeatures {
    pub layers: u32,
    pub has_add: bool,
    /// Some node (the input included) feeds two or more consumers, counting
    /// the implicit output concat.
    pub multi_branch: bool,
    pub hash: u64,
}

impl StructureFeatures {
    pub fn of(codes: &[NscCode]) -> Self {
        let body: Vec<&NscCode> = codes.iter().take_while(|c| !c.is_terminal()).collect();
        let n = body.len();
        let mut consumers = vec![0u32; n + 1];
        for c in &body {
            for p in c.inputs() {
                consumers[p as usize] += 1;
            }
        }
        let out_degree = |i: usize| consumers[i] + u32::from(consumers[i] == 0);
        StructureFeatures {
            layers: n as u32,
            has_add: body.iter().any(|c| c.op == OpType::ElementalAdd),
            multi_branch: (0..=n).any(|i| out_degree(i) >= 2),
            hash: topology_hash(codes),
        }
    }
}

const INPUT_SALT: u64 = 0x5eed_0000_0000_0001;
const OUTPUT_SALT: u64 = 0x5eed_0000_0000_0002;
const TAU_SALT: u64 = 0x5eed_0000_0000_0003;

/// Structural hash that ignores layer numbering: each node hashes its op,
/// kernel and the hashes of its inputs (sorted for the commutative merges), and
/// the block hashes the sorted hashes of its leaves.
pub fn topology_hash(codes: &[NscCode]) -> u64 {
    let body: Vec<&NscCode> = codes.iter().take_while(|c| !c.is_terminal()).collect();
    let mut node = Vec::with_capacity(body.len() + 1);
    node.push(INPUT_SALT);
    let mut consumed = vec![false; body.len() + 1];
    for c in &body {
        let mut inputs: Vec<u64> = c.inputs().map(|p| node[p as usize]).collect();
        for p in c.inputs() {
            consumed[p as usize] = true;
        }
        inputs.sort_unstable();
        let mut h = fold(c.op.code() as u64, c.kernel as u64);
        for x in inputs {
            h = fold(h, x);
        }
        node.push(h);
    }
    let mut leaves: Vec<u64> = (0..node.len()).filter(|&i| !consumed[i]).map(|i| node[i]).collect();
    leaves.sort_unstable();
    leaves.into_iter().fold(OUTPUT_SALT, fold)
}

fn unit(h: u64) -> f64 {
    (h >> 11) as f64 / (1u64 << 53) as f64
}

/// Deterministic stand-in for early-stop training.
#[derive(Debug, Clone, Default)]
pub struct SurrogateEvaluator {
    pub config: SurrogateConfig,
}

impl SurrogateEvaluator {
    pub fn new(config: SurrogateConfig) -> Self {
        SurrogateEvaluator { config }
    }

    /// The asymptotic accuracy `a*` the curve approaches.
    pub fn true_accuracy(&self, codes: &[NscCode]) -> f64 {
        self.accuracy_of(&StructureFeatures::of(codes))
    }

    pub fn accuracy_of(&self, f: &StructureFeatures) -> f64 {
        let c = &self.config;
        let d = f.layers as f64;
        let knee = c.depth_knee.max(1) as f64;
        let eta = if f.layers == 0 { 0.0 } else { c.noise * (2.0 * unit(f.hash) - 1.0) };
        let a = c.base
            + c.w_add * f64::from(u8::from(f.has_add))
            + c.w_branch * f64::from(u8::from(f.multi_branch))
            + c.w_depth * d.min(knee) / knee
            - c.w_excess * (d - knee).max(0.0)
            + eta;
        a.clamp(0.0, 1.0)
    }

    /// Learning-curve time constant of a topology.
    pub fn tau(&self, hash: u64) -> f64 {
        let c = &self.config;
        c.tau_min + (c.tau_max - c.tau_min) * unit(fold(hash, TAU_SALT))
    }

    pub fn curve(&self, codes: &[NscCode], epochs: u32, seed: u64) -> Vec<f64> {
        let f = StructureFeatures::of(codes);
        let a = self.accuracy_of(&f);
        let tau = self.tau(f.hash);
        let mut rng = ChaCha8Rng::seed_from_u64(fold(seed, f.hash));
        (1..=epochs)
            .map(|t| {
                let v = a * (1.0 - (-(t as f64) / tau).exp());
                let jitter = if t < epochs { self.config.curve_noise * rng.gen_range(-1.0..=1.0) } else { 0.0 };
                (v + jitter).clamp(0.0, 1.0)
            })
            .collect()
    }
}

impl Evaluator for SurrogateEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<EvalResult, EvalError> {
        let start = Instant::now();
        if request.epochs == 0 {
            return Err(EvalError::Validation("epochs must be at least 1".into()));
        }
        let complexity = request.complexity()?;
        let curve = self.curve(&request.codes, request.epochs, request.seed);
        EvalResult::new(curve, complexity, start.elapsed())
    }

    fn name(&self) -> &str {
        "surrogate"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(i: u8, op: OpType, k: u16, p1: u8, p2: u8) -> NscCode {
        NscCode::new(i, op, k, p1, p2)
    }

    #[test]
    fn identity_block_scores_base() {
        let s = SurrogateEvaluator::default();
        assert_eq!(s.true_accuracy(&[NscCode::terminal(1)]), 0.56);
        assert_eq!(s.true_accuracy(&[]), 0.56);
    }

    #[test]
    fn residual_block_collects_bonuses() {
        let codes = [
            c(1, OpType::Convolution, 3, 0, 0),
            c(2, OpType::Convolution, 3, 1, 0),
            c(3, OpType::ElementalAdd, 0, 0, 2),
            NscCode::terminal(4),
        ];
        let f = StructureFeatures::of(&codes);
        assert_eq!(f.layers, 3);
        assert!(f.has_add && f.multi_branch);
        let s = SurrogateEvaluator::default();
        let expected = 0.56 + 0.03 + 0.03 + 0.04 * 3.0 / 12.0;
        assert!((s.true_accuracy(&codes) - expected).abs() <= 0.02 + 1e-12);
    }

    #[test]
    fn chain_is_not_multi_branch() {
        let codes = [c(1, OpType::Convolution, 3, 0, 0), c(2, OpType::MaxPooling, 3, 1, 0), NscCode::terminal(3)];
        let f = StructureFeatures::of(&codes);
        assert!(!f.multi_branch && !f.has_add);
    }

    #[test]
    fn hash_ignores_numbering() {
        // two parallel branches listed in either order
        let a = [
            c(1, OpType::Convolution, 1, 0, 0),
            c(2, OpType::Convolution, 5, 0, 0),
            c(3, OpType::Concat, 0, 1, 2),
            NscCode::terminal(4),
        ];
        let b = [
            c(1, OpType::Convolution, 5, 0, 0),
            c(2, OpType::Convolution, 1, 0, 0),
            c(3, OpType::Concat, 0, 2, 1),
            NscCode::terminal(4),
        ];
        assert_eq!(topology_hash(&a), topology_hash(&b));
        let other = [
            c(1, OpType::Convolution, 3, 0, 0),
            c(2, OpType::Convolution, 5, 0, 0),
            c(3, OpType::Concat, 0, 1, 2),
            NscCode::terminal(4),
        ];
        assert_ne!(topology_hash(&a), topology_hash(&other));
    }

    #[test]
    fn curve_is_deterministic_and_ends_on_the_envelope() {
        let s = SurrogateEvaluator::default();
        let codes = [c(1, OpType::Convolution, 3, 0, 0), NscCode::terminal(2)];
        let req = EvalRequest::block(1, codes.to_vec(), 12, 9);
        let a = s.evaluate(&req).unwrap();
        let b = s.evaluate(&req).unwrap();
        assert_eq!(a.accuracy_curve, b.accuracy_curve);
        assert_eq!(a.accuracy_curve.len(), 12);
        let f = StructureFeatures::of(&codes);
        let last = s.accuracy_of(&f) * (1.0 - (-12.0 / s.tau(f.hash)).exp());
        assert_eq!(a.early_stop_accuracy, last);
        assert_eq!(a.complexity.flops, 9_437_184);
    }

    #[test]
    fn broken_structure_is_a_structure_error() {
        let s = SurrogateEvaluator::default();
        let codes = vec![
            c(1, OpType::Convolution, 3, 0, 0),
            c(2, OpType::Concat, 0, 0, 1),
            c(3, OpType::ElementalAdd, 0, 1, 2),
            NscCode::terminal(4),
        ];
        assert!(matches!(s.evaluate(&EvalRequest::block(1, codes, 12, 0)), Err(EvalError::Structure(_))));
    }
}
