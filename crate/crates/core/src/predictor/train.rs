use std::collections::{BTreeMap, BTreeSet};
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::seq::{index, SliceRandom};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::net::loss_and_grad;
use super::{LayerRows, Params, Predictor, PredictorError};
use crate::agent::{ActionSpace, Prefix};
use crate::evaluation::{EvalRequest, Evaluator};
use crate::mix64;
use crate::nsc::NscCode;

/// A random valid block whose layer count is uniform in `0..max_position`.
///
/// Uniform choices at every position almost never pick Terminal early, so
/// plain random rollouts are nearly all maximum depth; drawing the depth first
/// covers the whole range.
pub fn sample_structure<R: Rng + ?Sized>(space: &ActionSpace, rng: &mut R) -> Vec<NscCode> {
    let layers = rng.gen_range(0..space.max_position());
    let mut prefix = Prefix::new();
    let mut codes = Vec::with_capacity(layers as usize + 1);
    for _ in 0..layers {
        let legal: Vec<&NscCode> = space.legal(&prefix).filter(|c| !c.is_terminal()).collect();
        let code = **legal.choose(rng).expect("non-final positions offer layers");
        prefix.push(&code);
        codes.push(code);
    }
    codes.push(NscCode::terminal(layers as u8 + 1));
    codes
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurveSample {
    pub codes: Vec<NscCode>,
    pub curve: Vec<f64>,
}

/// Structures with their accuracy curves; stored as JSON lines.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CurveDataset {
    pub samples: Vec<CurveSample>,
}

impl CurveDataset {
    /// Labels `count` sampled structures with `evaluator`.
    pub fn generate(
        evaluator: &dyn Evaluator,
        space: &ActionSpace,
        count: usize,
        epochs: u32,
        seed: u64,
    ) -> Result<Self, PredictorError> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut samples = Vec::with_capacity(count);
        for id in 0..count as u64 {
            let codes = sample_structure(space, &mut rng);
            let req = EvalRequest::block(id, codes, epochs, mix64(seed, id));
            let result = evaluator.evaluate(&req).map_err(|e| PredictorError::Dataset(e.to_string()))?;
            samples.push(CurveSample { codes: req.codes, curve: result.accuracy_curve });
        }
        Ok(CurveDataset { samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Shuffles, then puts `ceil(fraction * len)` samples in the second half.
    pub fn split(&self, fraction: f64, seed: u64) -> (CurveDataset, CurveDataset) {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        let held = ((self.len() as f64 * fraction).ceil() as usize).min(self.len());
        let pick = |ids: &[usize]| CurveDataset { samples: ids.iter().map(|&i| self.samples[i].clone()).collect() };
        (pick(&order[held..]), pick(&order[..held]))
    }

    pub fn check(&self) -> Result<(), PredictorError> {
        if self.is_empty() {
            return Err(PredictorError::Dataset("dataset is empty".into()));
        }
        for (i, s) in self.samples.iter().enumerate() {
            if s.codes.is_empty() || s.curve.is_empty() {
                return Err(PredictorError::Dataset(format!("sample {i} has no codes or no curve")));
            }
            if s.curve.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(PredictorError::Dataset(format!("sample {i} has a curve value outside [0, 1]")));
            }
        }
        Ok(())
    }

    pub fn write_jsonl(&self, path: &Path) -> Result<(), PredictorError> {
        let mut out = BufWriter::new(File::create(path)?);
        for s in &self.samples {
            let line = serde_json::to_string(s).map_err(|e| PredictorError::Dataset(e.to_string()))?;
            writeln!(out, "{line}")?;
        }
        out.flush()?;
        Ok(())
    }

    pub fn read_jsonl(path: &Path) -> Result<Self, PredictorError> {
        let mut samples = Vec::new();
        for (n, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let s = serde_json::from_str(&line).map_err(|e| PredictorError::Dataset(format!("line {}: {e}", n + 1)))?;
            samples.push(s);
        }
        let data = CurveDataset { samples };
        data.check()?;
        Ok(data)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub seed: u64,
    /// Stop after this many optimizer steps even if epochs remain.
    pub max_steps: Option<usize>,
    /// Before the first step, set the output bias to the mean target and scale
    /// the output weights by the target standard deviation. Meant for freshly
    /// initialized predictors: accuracies vary by a few hundredths, and an
    /// output layer sized for unit targets spends most of training shrinking.
    pub calibrate_output: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 1e-3,
            batch_size: 64,
            epochs: 50,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            seed: 0,
            max_steps: None,
            calibrate_output: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    /// Mean batch loss of every step.
    pub losses: Vec<f64>,
    /// Mean of the step losses within each epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainReport {
    pub fn steps(&self) -> usize {
        self.losses.len()
    }
}

struct Adam {
    m: Params,
    v: Params,
    t: i32,
}

impl Adam {
    fn step(&mut self, params: &mut Params, grads: &Params, cfg: &TrainConfig) {
        self.t += 1;
        let c1 = 1.0 - cfg.beta1.powi(self.t);
        let c2 = 1.0 - cfg.beta2.powi(self.t);
        let groups = params.tensors_mut().into_iter().zip(grads.tensors()).zip(self.m.tensors_mut()).zip(self.v.tensors_mut());
        for ((((_, p), (_, g)), (_, m)), (_, v)) in groups {
            for i in 0..p.len() {
                m[i] = cfg.beta1 * m[i] + (1.0 - cfg.beta1) * g[i];
                v[i] = cfg.beta2 * v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
                p[i] -= cfg.learning_rate * (m[i] / c1) / ((v[i] / c2).sqrt() + cfg.adam_eps);
            }
        }
    }
}

struct Encoded {
    seqs: Vec<Vec<LayerRows>>,
    epochs: Vec<usize>,
    targets: Vec<f64>,
}

fn encode_batch(pred: &Predictor, items: &[(&[NscCode], u32, f64)]) -> Result<Encoded, PredictorError> {
    let mut e = Encoded { seqs: Vec::new(), epochs: Vec::new(), targets: Vec::new() };
    for (codes, t, y) in items {
        if !y.is_finite() {
            return Err(PredictorError::Dataset(format!("non-finite target {y}")));
        }
        e.seqs.push(pred.sequence(codes)?);
        e.epochs.push(pred.epoch_row(*t)?);
        e.targets.push(*y);
    }
    Ok(e)
}

/// Mean smooth-L1 between `f(x, T)` and the last curve value, by mini-batch Adam.
/// Batch statistics normalize during training; running statistics are updated
/// after every step for prediction.
pub fn train(pred: &mut Predictor, data: &CurveDataset, cfg: &TrainConfig) -> Result<TrainReport, PredictorError> {
    data.check()?;
    if cfg.batch_size == 0 || cfg.learning_rate.is_nan() || cfg.learning_rate <= 0.0 {
        return Err(PredictorError::Input("batch_size and learning_rate must be positive".into()));
    }
    let items: Vec<(&[NscCode], u32, f64)> = data
        .samples
        .iter()
        .map(|s| (s.codes.as_slice(), s.curve.len() as u32, *s.curve.last().expect("checked non-empty")))
        .collect();
    let all = encode_batch(pred, &items)?;
    if cfg.calibrate_output {
        let n = all.targets.len() as f64;
        let mean = all.targets.iter().sum::<f64>() / n;
        let sd = (all.targets.iter().map(|y| (y - mean) * (y - mean)).sum::<f64>() / n).sqrt();
        pred.params.b_out.fill(mean);
        pred.params.w_out *= sd;
    }
    let mut adam = Adam { m: pred.params.zeros_like(), v: pred.params.zeros_like(), t: 0 };
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..items.len()).collect();
    let mut report = TrainReport { losses: Vec::new(), epoch_losses: Vec::new() };
    let momentum = pred.config.bn_momentum;
    'outer: for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let first = report.losses.len();
        for chunk in order.chunks(cfg.batch_size) {
            if cfg.max_steps.is_some_and(|m| report.losses.len() >= m) {
                break 'outer;
            }
            let seqs: Vec<Vec<LayerRows>> = chunk.iter().map(|&i| all.seqs[i].clone()).collect();
            let epochs: Vec<usize> = chunk.iter().map(|&i| all.epochs[i]).collect();
            let targets: Vec<f64> = chunk.iter().map(|&i| all.targets[i]).collect();
            let g = loss_and_grad(&pred.params, &seqs, &epochs, &targets, pred.config.hidden, pred.config.bn_eps);
            if !g.loss.is_finite() {
                return Err(PredictorError::Diverged { step: report.losses.len(), loss: g.loss });
            }
            adam.step(&mut pred.params, &g.grads, cfg);
            let n = chunk.len() as f64;
            for k in 0..pred.stats.mean.len() {
                let mean = &mut pred.stats.mean[k];
                *mean = &*mean * (1.0 - momentum) + &g.batch_mean[k] * momentum;
                if chunk.len() > 1 {
                    let var = &mut pred.stats.var[k];
                    *var = &*var * (1.0 - momentum) + &g.batch_var[k] * (momentum * n / (n - 1.0));
                }
            }
            report.losses.push(g.loss);
        }
        let epoch = &report.losses[first..];
        if !epoch.is_empty() {
            report.epoch_losses.push(epoch.iter().sum::<f64>() / epoch.len() as f64);
        }
    }
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradCheck {
    pub checked: usize,
    /// Parameters whose perturbation flipped a ReLU; their difference quotient
    /// straddles a kink and says nothing about the gradient.
    pub skipped: usize,
    pub max_rel_error: f64,
    pub worst: String,
    pub per_group: BTreeMap<String, usize>,
}

/// Relative error denominators are floored here so that exact zeros compare.
const REL_FLOOR: f64 = 1e-8;

/// Compares the analytic gradient of the training loss on `batch` with central
/// differences at up to `per_group` random parameters of every group. LSTM
/// tensors are split by gate, and embedding tables are sampled only in rows the
/// batch reads.
pub fn gradient_check(
    pred: &Predictor,
    batch: &[(&[NscCode], u32, f64)],
    per_group: usize,
    step: f64,
    seed: u64,
) -> Result<GradCheck, PredictorError> {
    if batch.is_empty() {
        return Err(PredictorError::Input("gradient check needs a batch".into()));
    }
    let enc = encode_batch(pred, batch)?;
    let (hidden, eps) = (pred.config.hidden, pred.config.bn_eps);
    let eval = |p: &Params| loss_and_grad(p, &enc.seqs, &enc.epochs, &enc.targets, hidden, eps);
    let base = eval(&pred.params);
    let d = pred.config.embed_dim;

    let mut touched: BTreeMap<&str, BTreeSet<usize>> = BTreeMap::new();
    for seq in &enc.seqs {
        for r in seq {
            touched.entry("op_table").or_default().insert(r.op);
            touched.entry("kernel_table").or_default().insert(r.kernel);
            touched.entry("pred_table").or_default().extend([r.pred1, r.pred2]);
        }
    }
    touched.entry("epoch_table").or_default().extend(enc.epochs.iter().copied());

    // (group label, tensor position, candidate flat indices)
    let mut groups: Vec<(String, usize, Vec<usize>)> = Vec::new();
    for (pos, (name, t)) in pred.params.tensors().into_iter().enumerate() {
        if let Some(rows) = touched.get(name.as_str()) {
            let idx = rows.iter().flat_map(|&r| r * d..(r + 1) * d).collect();
            groups.push((name, pos, idx));
        } else if name.starts_with("lstm.") {
            let cols = 4 * hidden;
            for (gate, label) in ["input", "forget", "cell", "output"].into_iter().enumerate() {
                let idx = (0..t.len()).filter(|i| (i % cols) / hidden == gate).collect();
                groups.push((format!("{name}.{label}"), pos, idx));
            }
        } else {
            groups.push((name, pos, (0..t.len()).collect()));
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut work = pred.params.clone();
    let mut report =
        GradCheck { checked: 0, skipped: 0, max_rel_error: 0.0, worst: String::new(), per_group: BTreeMap::new() };
    let grads = base.grads.tensors();
    for (label, pos, candidates) in groups {
        let picks = index::sample(&mut rng, candidates.len(), per_group.min(candidates.len()));
        for pick in picks {
            let i = candidates[pick];
            let original = work.tensors()[pos].1[i];
            work.tensors_mut()[pos].1[i] = original + step;
            let plus = eval(&work);
            work.tensors_mut()[pos].1[i] = original - step;
            let minus = eval(&work);
            work.tensors_mut()[pos].1[i] = original;
            if plus.relu_pattern != base.relu_pattern || minus.relu_pattern != base.relu_pattern {
                report.skipped += 1;
                continue;
            }
            let numeric = (plus.loss - minus.loss) / (2.0 * step);
            let analytic = grads[pos].1[i];
            let rel = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR);
            if rel > report.max_rel_error {
                report.max_rel_error = rel;
                report.worst = format!("{label}[{i}]: analytic {analytic:e}, numeric {numeric:e}");
            }
            report.checked += 1;
            *report.per_group.entry(label.clone()).or_default() += 1;
        }
    }
    Ok(report)
}

fn ranks(v: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..v.len()).collect();
    order.sort_by(|&a, &b| v[a].total_cmp(&v[b]));
    let mut r = vec![0.0; v.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && v[order[j + 1]] == v[order[i]] {
            j += 1;
        }
        // ties share the mean of their 1-based positions
        let mean = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            r[k] = mean;
        }
        i = j + 1;
    }
    r
}

/// Spearman rank correlation with average ranks for ties; NaN when either
/// side is constant or the lengths differ.
pub fn spearman(a: &[f64], b: &[f64]) -> f64 {
    if a.len() != b.len() || a.len() < 2 {
        return f64::NAN;
    }
    let (ra, rb) = (ranks(a), ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let mut cov = 0.0;
    let (mut va, mut vb) = (0.0, 0.0);
    for (x, y) in ra.iter().zip(&rb) {
        cov += (x - ma) * (y - mb);
        va += (x - ma) * (x - ma);
        vb += (y - mb) * (y - mb);
    }
    cov / (va * vb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::SurrogateEvaluator;
    use crate::nsc::OpType;
    use crate::predictor::PredictorConfig;

    fn small() -> PredictorConfig {
        PredictorConfig { embed_dim: 6, hidden: 8, mlp_width: 10, ..PredictorConfig::default() }
    }

    fn blocks() -> Vec<Vec<NscCode>> {
        let space = ActionSpace::block();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        (0..6).map(|_| sample_structure(&space, &mut rng)).collect()
    }

    #[test]
    fn spearman_known_values() {
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[10.0, 20.0, 30.0, 40.0]), 1.0);
        assert_eq!(spearman(&[1.0, 2.0, 3.0, 4.0], &[4.0, 3.0, 2.0, 1.0]), -1.0);
        // d = (0, 0, 1, -1): 1 - 6*2/(4*15) = 0.8
        assert!((spearman(&[1.0, 2.0, 3.0, 4.0], &[1.0, 2.0, 4.0, 3.0]) - 0.8).abs() < 1e-12);
        assert_eq!(ranks(&[5.0, 1.0, 5.0]), vec![2.5, 1.0, 2.5]);
    }

    #[test]
    fn sampled_structures_cover_depths_and_build() {
        let space = ActionSpace::block();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut depths = BTreeSet::new();
        for _ in 0..400 {
            let codes = sample_structure(&space, &mut rng);
            crate::agent::Trajectory::new(codes.clone(), &space).unwrap();
            depths.insert(codes.len() - 1);
        }
        assert_eq!(depths.len(), 23);
    }

    #[test]
    fn small_network_gradients_match() {
        let pred = Predictor::new(small(), 3).unwrap();
        let b = blocks();
        let batch: Vec<(&[NscCode], u32, f64)> =
            b.iter().enumerate().map(|(i, c)| (c.as_slice(), 1 + i as u32 * 2, 0.2 + 0.1 * i as f64)).collect();
        let r = gradient_check(&pred, &batch, 6, 1e-5, 1).unwrap();
        assert!(r.max_rel_error < 1e-5, "{r:?}");
        assert!(r.per_group.contains_key("lstm.w_h.forget"));
    }

    #[test]
    fn training_is_seeded_and_lowers_the_loss() {
        let space = ActionSpace::block();
        let data = CurveDataset::generate(&SurrogateEvaluator::default(), &space, 40, 12, 5).unwrap();
        let cfg = TrainConfig { epochs: 15, batch_size: 8, learning_rate: 3e-3, ..TrainConfig::default() };
        let mut a = Predictor::new(small(), 1).unwrap();
        let mut b = a.clone();
        let ra = train(&mut a, &data, &cfg).unwrap();
        let rb = train(&mut b, &data, &cfg).unwrap();
        assert_eq!(ra, rb);
        assert_eq!(a, b);
        assert!(ra.epoch_losses.last().unwrap() < &ra.epoch_losses[0]);
    }

    #[test]
    fn dataset_jsonl_round_trip() {
        let space = ActionSpace::block();
        let data = CurveDataset::generate(&SurrogateEvaluator::default(), &space, 5, 12, 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("curves.jsonl");
        data.write_jsonl(&path).unwrap();
        assert_eq!(CurveDataset::read_jsonl(&path).unwrap(), data);
        let (train, held) = data.split(0.2, 0);
        assert_eq!((train.len(), held.len()), (4, 1));
    }

    #[test]
    fn bad_datasets_are_rejected() {
        assert!(CurveDataset::default().check().is_err());
        let bad = CurveDataset {
            samples: vec![CurveSample { codes: vec![NscCode::new(1, OpType::Identity, 0, 0, 0)], curve: vec![1.5] }],
        };
        assert!(bad.check().is_err());
    }
}
