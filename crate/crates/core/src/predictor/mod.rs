//! Learned accuracy predictor: layer embeddings, an LSTM over the reversed
//! layer sequence, and an epoch-conditioned MLP with batch normalization.

mod net;
mod train;

use std::fs;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::{s, Array1, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::evaluation::{EvalError, EvalRequest, EvalResult, Evaluator};
use crate::nsc::{NscCode, OpType};

pub use net::smooth_l1;
pub use train::{
    gradient_check, sample_structure, spearman, train, CurveDataset, CurveSample, GradCheck, TrainConfig, TrainReport,
};

#[derive(Debug, Error)]
pub enum PredictorError {
    #[error("input error: {0}")]
    Input(String),
    #[error("{what} {value} is outside the embedding table ({rows} rows)")]
    Index { what: &'static str, value: u32, rows: usize },
    #[error("training diverged at step {step}: loss {loss}")]
    Diverged { step: usize, loss: f64 },
    #[error("dataset: {0}")]
    Dataset(String),
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PredictorConfig {
    pub embed_dim: usize,
    pub hidden: usize,
    pub mlp_width: usize,
    pub mlp_layers: usize,
    /// Rows of the epoch table: epochs 1..=max_epoch.
    pub max_epoch: u32,
    /// Kernel values with a row in the kernel table.
    pub kernels: Vec<u16>,
    /// Rows of the predecessor table: predecessors 0..max_layer_index.
    pub max_layer_index: u8,
    pub bn_eps: f64,
    pub bn_momentum: f64,
}

impl Default for PredictorConfig {
    fn default() -> Self {
        PredictorConfig {
            embed_dim: 40,
            hidden: 160,
            mlp_width: 200,
            mlp_layers: 3,
            max_epoch: 12,
            kernels: vec![0, 1, 3, 5],
            max_layer_index: 23,
            bn_eps: 1e-5,
            bn_momentum: 0.1,
        }
    }
}

impl PredictorConfig {
    pub fn layer_width(&self) -> usize {
        4 * self.embed_dim
    }

    pub fn check(&self) -> Result<(), PredictorError> {
        let bad = |m: &str| Err(PredictorError::Input(m.to_string()));
        if self.embed_dim == 0 || self.hidden == 0 || self.mlp_width == 0 || self.mlp_layers == 0 {
            return bad("predictor dimensions must be positive");
        }
        if self.max_epoch == 0 || self.kernels.is_empty() || self.max_layer_index == 0 {
            return bad("embedding tables must have at least one row");
        }
        if self.bn_eps.is_nan() || self.bn_eps <= 0.0 || !(0.0..=1.0).contains(&self.bn_momentum) {
            return bad("bn_eps must be positive and bn_momentum in [0, 1]");
        }
        Ok(())
    }
}

/// Every trainable tensor. LSTM gate blocks are laid out `[input, forget, cell, output]`
/// along the columns of `w_x`, `w_h` and `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Params {
    pub op_table: Array2<f64>,
    pub kernel_table: Array2<f64>,
    pub pred_table: Array2<f64>,
    pub epoch_table: Array2<f64>,
    pub w_x: Array2<f64>,
    pub w_h: Array2<f64>,
    pub b: Array1<f64>,
    /// Hidden MLP layers; no bias since batch norm's shift replaces it.
    pub mlp_w: Vec<Array2<f64>>,
    pub gamma: Vec<Array1<f64>>,
    pub beta: Vec<Array1<f64>>,
    pub w_out: Array2<f64>,
    pub b_out: Array1<f64>,
}

impl Params {
    fn init(cfg: &PredictorConfig, rng: &mut ChaCha8Rng) -> Self {
        let (d, h, w) = (cfg.embed_dim, cfg.hidden, cfg.mlp_width);
        let mut uniform = |rows: usize, cols: usize, fan_in: usize| {
            let a = 1.0 / (fan_in as f64).sqrt();
            Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-a..=a))
        };
        // a lookup table is a linear map from a one-hot vector, so its fan-in is 1
        let op_table = uniform(OpType::ALL.len(), d, 1);
        let kernel_table = uniform(cfg.kernels.len(), d, 1);
        let pred_table = uniform(cfg.max_layer_index as usize, d, 1);
        let epoch_table = uniform(cfg.max_epoch as usize, d, 1);
        let w_x = uniform(4 * d, 4 * h, 4 * d);
        let w_h = uniform(h, 4 * h, h);
        let mut mlp_w = Vec::new();
        let mut fan_in = h + d;
        for _ in 0..cfg.mlp_layers {
            mlp_w.push(uniform(fan_in, w, fan_in));
            fan_in = w;
        }
        let w_out = uniform(w, 1, w);
        let mut b = Array1::zeros(4 * h);
        b.slice_mut(s![h..2 * h]).fill(1.0);
        Params {
            op_table,
            kernel_table,
            pred_table,
            epoch_table,
            w_x,
            w_h,
            b,
            gamma: vec![Array1::ones(w); cfg.mlp_layers],
            beta: vec![Array1::zeros(w); cfg.mlp_layers],
            mlp_w,
            w_out,
            b_out: Array1::zeros(1),
        }
    }

    pub(crate) fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        for (_, t) in z.tensors_mut() {
            t.fill(0.0);
        }
        z
    }

    /// Named flat views, in a fixed order.
    pub fn tensors(&self) -> Vec<(String, &[f64])> {
        fn flat(a: &Array2<f64>) -> &[f64] {
            a.as_slice().expect("standard layout")
        }
        let mut v: Vec<(String, &[f64])> = vec![
            ("op_table".into(), flat(&self.op_table)),
            ("kernel_table".into(), flat(&self.kernel_table)),
            ("pred_table".into(), flat(&self.pred_table)),
            ("epoch_table".into(), flat(&self.epoch_table)),
            ("lstm.w_x".into(), flat(&self.w_x)),
            ("lstm.w_h".into(), flat(&self.w_h)),
            ("lstm.b".into(), self.b.as_slice().expect("standard layout")),
        ];
        for k in 0..self.mlp_w.len() {
            v.push((format!("mlp.{k}.w"), flat(&self.mlp_w[k])));
            v.push((format!("mlp.{k}.gamma"), self.gamma[k].as_slice().expect("standard layout")));
            v.push((format!("mlp.{k}.beta"), self.beta[k].as_slice().expect("standard layout")));
        }
        v.push(("out.w".into(), flat(&self.w_out)));
        v.push(("out.b".into(), self.b_out.as_slice().expect("standard layout")));
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<(String, &mut [f64])> {
        fn flat(a: &mut Array2<f64>) -> &mut [f64] {
            a.as_slice_mut().expect("standard layout")
        }
        let mut v: Vec<(String, &mut [f64])> = vec![
            ("op_table".into(), flat(&mut self.op_table)),
            ("kernel_table".into(), flat(&mut self.kernel_table)),
            ("pred_table".into(), flat(&mut self.pred_table)),
            ("epoch_table".into(), flat(&mut self.epoch_table)),
            ("lstm.w_x".into(), flat(&mut self.w_x)),
            ("lstm.w_h".into(), flat(&mut self.w_h)),
            ("lstm.b".into(), self.b.as_slice_mut().expect("standard layout")),
        ];
        let layers = self.mlp_w.iter_mut().zip(self.gamma.iter_mut()).zip(self.beta.iter_mut());
        for (k, ((w, g), b)) in layers.enumerate() {
            v.push((format!("mlp.{k}.w"), flat(w)));
            v.push((format!("mlp.{k}.gamma"), g.as_slice_mut().expect("standard layout")));
            v.push((format!("mlp.{k}.beta"), b.as_slice_mut().expect("standard layout")));
        }
        v.push(("out.w".into(), flat(&mut self.w_out)));
        v.push(("out.b".into(), self.b_out.as_slice_mut().expect("standard layout")));
        v
    }

    pub fn count(&self) -> usize {
        self.tensors().iter().map(|(_, t)| t.len()).sum()
    }
}

/// Batch-norm running statistics, used at prediction time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunningStats {
    pub mean: Vec<Array1<f64>>,
    pub var: Vec<Array1<f64>>,
}

/// Table rows of one layer code.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) struct LayerRows {
    pub op: usize,
    pub kernel: usize,
    pub pred1: usize,
    pub pred2: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Predictor {
    pub config: PredictorConfig,
    pub params: Params,
    pub stats: RunningStats,
}

const CHECKPOINT_FORMAT: &str = "blockqnn-predictor";
const CHECKPOINT_VERSION: u32 = 1;

#[derive(Serialize, Deserialize)]
struct Checkpoint {
    format: String,
    version: u32,
    #[serde(flatten)]
    predictor: Predictor,
}

impl Predictor {
    pub fn new(config: PredictorConfig, seed: u64) -> Result<Self, PredictorError> {
        config.check()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let params = Params::init(&config, &mut rng);
        let w = config.mlp_width;
        let stats =
            RunningStats { mean: vec![Array1::zeros(w); config.mlp_layers], var: vec![Array1::ones(w); config.mlp_layers] };
        Ok(Predictor { config, params, stats })
    }

    pub(crate) fn rows(&self, code: &NscCode) -> Result<LayerRows, PredictorError> {
        let cfg = &self.config;
        let kernel = cfg.kernels.iter().position(|&k| k == code.kernel).ok_or(PredictorError::Index {
            what: "kernel",
            value: code.kernel as u32,
            rows: cfg.kernels.len(),
        })?;
        let pred = |p: u8| {
            if (p as usize) < cfg.max_layer_index as usize {
                Ok(p as usize)
            } else {
                Err(PredictorError::Index { what: "predecessor", value: p as u32, rows: cfg.max_layer_index as usize })
            }
        };
        Ok(LayerRows { op: code.op.code() as usize - 1, kernel, pred1: pred(code.pred1)?, pred2: pred(code.pred2)? })
    }

    /// Table rows in the order the LSTM consumes them: last layer first.
    pub(crate) fn sequence(&self, codes: &[NscCode]) -> Result<Vec<LayerRows>, PredictorError> {
        if codes.is_empty() {
            return Err(PredictorError::Input("structure has no layers".into()));
        }
        codes.iter().rev().map(|c| self.rows(c)).collect()
    }

    pub(crate) fn epoch_row(&self, t: u32) -> Result<usize, PredictorError> {
        if t == 0 || t > self.config.max_epoch {
            return Err(PredictorError::Index { what: "epoch", value: t, rows: self.config.max_epoch as usize });
        }
        Ok(t as usize - 1)
    }

    /// `[op ; kernel ; pred1 ; pred2]` rows for one code. The layer index is not
    /// embedded; position comes from sequence order.
    pub fn embed_layer(&self, code: &NscCode) -> Result<Vec<f64>, PredictorError> {
        let r = self.rows(code)?;
        let p = &self.params;
        Ok([p.op_table.row(r.op), p.kernel_table.row(r.kernel), p.pred_table.row(r.pred1), p.pred_table.row(r.pred2)]
            .iter()
            .flat_map(|row| row.iter().copied())
            .collect())
    }

    /// Final LSTM hidden state over the reversed code sequence.
    pub fn encode(&self, codes: &[NscCode]) -> Result<Vec<f64>, PredictorError> {
        let seq = self.sequence(codes)?;
        let h = net::encode(&self.params, &[seq], self.config.hidden);
        Ok(h.row(0).to_vec())
    }

    pub fn predict(&self, codes: &[NscCode], t: u32) -> Result<f64, PredictorError> {
        Ok(self.predict_batch(&[(codes, t)])?[0])
    }

    /// Predictions for several `(structure, epoch)` pairs. Each output depends
    /// only on its own pair.
    pub fn predict_batch(&self, items: &[(&[NscCode], u32)]) -> Result<Vec<f64>, PredictorError> {
        let mut seqs = Vec::with_capacity(items.len());
        let mut epochs = Vec::with_capacity(items.len());
        for (codes, t) in items {
            seqs.push(self.sequence(codes)?);
            epochs.push(self.epoch_row(*t)?);
        }
        let h = net::encode(&self.params, &seqs, self.config.hidden);
        Ok(net::head_eval(&self.params, &self.stats, &h, &epochs, self.config.bn_eps))
    }

    /// `f(x, t)` for `t = 1..=epochs`, running the LSTM once.
    pub fn predict_curve(&self, codes: &[NscCode], epochs: u32) -> Result<Vec<f64>, PredictorError> {
        let seq = self.sequence(codes)?;
        let rows = (1..=epochs).map(|t| self.epoch_row(t)).collect::<Result<Vec<_>, _>>()?;
        let h = net::encode(&self.params, &[seq], self.config.hidden);
        let h = h.broadcast((rows.len(), self.config.hidden)).expect("one row").to_owned();
        Ok(net::head_eval(&self.params, &self.stats, &h, &rows, self.config.bn_eps))
    }

    pub fn save(&self, path: &Path) -> Result<(), PredictorError> {
        let ck = Checkpoint { format: CHECKPOINT_FORMAT.into(), version: CHECKPOINT_VERSION, predictor: self.clone() };
        let text = serde_json::to_string(&ck).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self, PredictorError> {
        let text = fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text).map_err(|e| PredictorError::Checkpoint(e.to_string()))?;
        if ck.format != CHECKPOINT_FORMAT || ck.version != CHECKPOINT_VERSION {
            return Err(PredictorError::Checkpoint(format!("unsupported checkpoint {} v{}", ck.format, ck.version)));
        }
        let p = ck.predictor;
        p.config.check()?;
        let fresh = Predictor::new(p.config.clone(), 0)?;
        let shapes_match = fresh.params.tensors().iter().zip(p.params.tensors()).all(|(a, b)| a.0 == b.0 && a.1.len() == b.1.len())
            && fresh.params.mlp_w.len() == p.params.mlp_w.len();
        if !shapes_match {
            return Err(PredictorError::Checkpoint("tensor shapes do not match the stored config".into()));
        }
        Ok(p)
    }
}

/// Stands in for training: the curve is the clamped prediction at every epoch.
#[derive(Debug, Clone)]
pub struct PredictorEvaluator {
    predictor: Arc<Predictor>,
}

impl PredictorEvaluator {
    pub fn new(predictor: Arc<Predictor>) -> Self {
        PredictorEvaluator { predictor }
    }
}

impl Evaluator for PredictorEvaluator {
    fn evaluate(&self, request: &EvalRequest) -> Result<EvalResult, EvalError> {
        let start = Instant::now();
        if request.epochs == 0 {
            return Err(EvalError::Validation("epochs must be at least 1".into()));
        }
        let complexity = request.complexity()?;
        let curve = self
            .predictor
            .predict_curve(&request.codes, request.epochs)
            .map_err(|e| EvalError::Validation(e.to_string()))?
            .into_iter()
            .map(|v| if v.is_finite() { v.clamp(0.0, 1.0) } else { 0.0 })
            .collect();
        EvalResult::new(curve, complexity, start.elapsed())
    }

    fn name(&self) -> &str {
        "predictor"
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn conv(i: u8, p: u8) -> NscCode {
        NscCode::new(i, OpType::Convolution, 3, p, 0)
    }

    fn sigmoid(x: f64) -> f64 {
        1.0 / (1.0 + (-x).exp())
    }

    #[test]
    fn layer_width_and_shared_pred_rows() {
        let p = Predictor::new(PredictorConfig::default(), 1).unwrap();
        let add = NscCode::new(5, OpType::ElementalAdd, 0, 2, 2);
        let v = p.embed_layer(&add).unwrap();
        assert_eq!(v.len(), 160);
        assert_eq!(v[80..120], v[120..160]);
        // the layer index is not embedded
        assert_eq!(p.embed_layer(&conv(3, 1)).unwrap(), p.embed_layer(&conv(7, 1)).unwrap());
    }

    #[test]
    fn out_of_table_codes_are_index_errors() {
        let p = Predictor::new(PredictorConfig::default(), 1).unwrap();
        let wide = NscCode::new(1, OpType::Convolution, 64, 0, 0);
        assert!(matches!(p.embed_layer(&wide), Err(PredictorError::Index { what: "kernel", .. })));
        assert!(matches!(p.predict(&[conv(1, 0)], 13), Err(PredictorError::Index { what: "epoch", .. })));
        assert!(matches!(p.encode(&[]), Err(PredictorError::Input(_))));
    }

    #[test]
    fn single_layer_is_one_cell_step() {
        let p = Predictor::new(PredictorConfig::default(), 4).unwrap();
        let code = conv(1, 0);
        let x = p.embed_layer(&code).unwrap();
        let h = p.config.hidden;
        let z: Vec<f64> = (0..4 * h).map(|j| p.params.b[j] + (0..x.len()).map(|k| x[k] * p.params.w_x[[k, j]]).sum::<f64>()).collect();
        let expected: Vec<f64> = (0..h)
            .map(|j| {
                let (i, g, o) = (sigmoid(z[j]), z[2 * h + j].tanh(), sigmoid(z[3 * h + j]));
                o * (i * g).tanh()
            })
            .collect();
        let got = p.encode(&[code]).unwrap();
        for (a, b) in got.iter().zip(&expected) {
            assert!((a - b).abs() < 1e-12, "{a} vs {b}");
        }
    }

    #[test]
    fn zero_weights_give_zero_feature() {
        let mut p = Predictor::new(PredictorConfig::default(), 2).unwrap();
        p.params.w_x.fill(0.0);
        p.params.w_h.fill(0.0);
        p.params.b.fill(0.0);
        let codes = [conv(1, 0), conv(2, 1), NscCode::terminal(3)];
        assert!(p.encode(&codes).unwrap().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn first_layer_reaches_the_feature() {
        let p = Predictor::new(PredictorConfig::default(), 3).unwrap();
        let a = [conv(1, 0), conv(2, 1), NscCode::terminal(3)];
        let mut b = a;
        b[0] = NscCode::new(1, OpType::MaxPooling, 3, 0, 0);
        assert_ne!(p.encode(&a).unwrap(), p.encode(&b).unwrap());
    }

    #[test]
    fn prediction_is_deterministic_epoch_aware_and_batch_independent() {
        let p = Predictor::new(PredictorConfig::default(), 5).unwrap();
        let codes = [conv(1, 0), NscCode::new(2, OpType::ElementalAdd, 0, 0, 1), NscCode::terminal(3)];
        let a = p.predict(&codes, 12).unwrap();
        assert_eq!(a, p.predict(&codes, 12).unwrap());
        assert_ne!(a, p.predict(&codes, 3).unwrap());
        let other = [conv(1, 0), NscCode::terminal(2)];
        let mut items: Vec<(&[NscCode], u32)> = (0..31).map(|i| (&other[..], 1 + i % 12)).collect();
        items.insert(17, (&codes[..], 12));
        assert_eq!(p.predict_batch(&items).unwrap()[17], a);
        let curve = p.predict_curve(&codes, 12).unwrap();
        assert_eq!(curve[11], a);
    }

    #[test]
    fn checkpoint_round_trip() {
        let p = Predictor::new(PredictorConfig::default(), 6).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("predictor.json");
        p.save(&path).unwrap();
        assert_eq!(Predictor::load(&path).unwrap(), p);
    }
}
