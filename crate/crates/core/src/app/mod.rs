//! Run configurations and the mode runners behind the `blockqnn` binary.
//!
//! Every run writes `config.json` next to its outputs. Loading that file with
//! [`RunConfig::load`] and running it again reproduces the run.

mod artifacts;
mod report;

pub use artifacts::{compare_rows, ArchitectureDoc, CompareRow, PredictorMetrics, TopEntry};
pub use report::report;

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::sync::Arc;
use std::time::Duration;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{EpsilonSchedule, SpaceKind};
use crate::evaluation::{EvalRequest, Evaluator, ExternalEvaluator, SurrogateConfig, SurrogateEvaluator};
use crate::graph::Template;
use crate::mix64;
use crate::nsc::{parse_block, NscCode};
use crate::predictor::{train, CurveDataset, Predictor, PredictorConfig, PredictorEvaluator, TrainConfig};
use crate::runtime::{Cluster, DispatchOrder, LatencyModel, SimulatedCluster, SocketCluster};
use crate::search::{top_samples, Master, Sample, SearchCheckpoint, SearchConfig, SearchOutcome, Strategy};

use artifacts::{read_json, write_csv, write_json, write_jsonl};

/// Environment variable naming the directory runs are created under.
pub const OUTPUT_ROOT_ENV: &str = "BLOCKQNN_OUTPUT_ROOT";
pub const DEFAULT_OUTPUT_ROOT: &str = "runs";

pub const CONFIG_FILE: &str = "config.json";
pub const ITERATIONS_FILE: &str = "iterations.csv";
pub const REPLAY_FILE: &str = "replay.jsonl";
pub const QTABLE_FILE: &str = "qtable.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const TOP_FILE: &str = "top.json";
pub const EVENTS_FILE: &str = "events.jsonl";
pub const COMPARE_FILE: &str = "compare.csv";
pub const PREDICTOR_FILE: &str = "predictor.json";
pub const METRICS_FILE: &str = "metrics.json";

#[derive(Debug, Error)]
pub enum AppError {
    #[error("invalid {field}: {message}")]
    Usage { field: String, message: String },
    #[error("{0}")]
    Runtime(String),
}

impl AppError {
    pub fn usage(field: impl Into<String>, message: impl fmt::Display) -> Self {
        AppError::Usage { field: field.into(), message: message.to_string() }
    }

    pub fn runtime(context: impl fmt::Display, error: impl fmt::Display) -> Self {
        AppError::Runtime(format!("{context}: {error}"))
    }

    /// 2 for configuration mistakes, 3 for failures while running.
    pub fn exit_code(&self) -> i32 {
        match self {
            AppError::Usage { .. } => 2,
            AppError::Runtime(_) => 3,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Mode {
    SearchBlock,
    SearchConnection,
    TrainPredictor,
    SearchWithPredictor,
    CompareRandom,
    Export,
    Report,
}

impl Mode {
    pub const ALL: [Mode; 7] = [
        Mode::SearchBlock,
        Mode::SearchConnection,
        Mode::TrainPredictor,
        Mode::SearchWithPredictor,
        Mode::CompareRandom,
        Mode::Export,
        Mode::Report,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::SearchBlock => "search-block",
            Mode::SearchConnection => "search-connection",
            Mode::TrainPredictor => "train-predictor",
            Mode::SearchWithPredictor => "search-with-predictor",
            Mode::CompareRandom => "compare-random",
            Mode::Export => "export",
            Mode::Report => "report",
        }
    }

    fn searches(self) -> bool {
        matches!(self, Mode::SearchBlock | Mode::SearchConnection | Mode::SearchWithPredictor | Mode::CompareRandom)
    }
}

impl fmt::Display for Mode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Mode {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Mode::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| AppError::usage("mode", format!("unknown mode {s:?}")))
    }
}

/// What labels structures: the surrogate in process, or a trainer reached over
/// the job/result line protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum EvaluatorChoice {
    Surrogate(SurrogateConfig),
    External { endpoint: String, timeout_ms: u64 },
}

impl Default for EvaluatorChoice {
    fn default() -> Self {
        EvaluatorChoice::Surrogate(SurrogateConfig::default())
    }
}

impl EvaluatorChoice {
    pub fn build(&self) -> Arc<dyn Evaluator> {
        match self {
            EvaluatorChoice::Surrogate(cfg) => Arc::new(SurrogateEvaluator::new(cfg.clone())),
            EvaluatorChoice::External { endpoint, timeout_ms } => {
                Arc::new(ExternalEvaluator::new(endpoint.clone(), Duration::from_millis(*timeout_ms)))
            }
        }
    }
}

/// A compute node address, written `host:port` or `host:port@capacity`.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeAddress {
    pub addr: String,
    pub capacity: usize,
}

impl FromStr for NodeAddress {
    type Err = AppError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let (addr, capacity) = match s.rsplit_once('@') {
            Some((a, c)) => {
                let c = c.parse().map_err(|_| AppError::usage("nodes", format!("bad capacity in {s:?}")))?;
                (a, c)
            }
            None => (s, 1),
        };
        if addr.is_empty() {
            return Err(AppError::usage("nodes", format!("missing address in {s:?}")));
        }
        Ok(NodeAddress { addr: addr.to_string(), capacity })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Transport {
    /// In-process nodes on a virtual clock, evaluating with the run's evaluator.
    Simulated {
        nodes: usize,
        capacity: usize,
        #[serde(default)]
        latency: LatencyModel,
        #[serde(default)]
        order: DispatchOrder,
    },
    /// Remote compute nodes; each evaluates with whatever it was started with.
    Socket { nodes: Vec<NodeAddress>, timeout_ms: u64 },
}

impl Default for Transport {
    fn default() -> Self {
        Transport::Simulated { nodes: 8, capacity: 4, latency: LatencyModel::default(), order: DispatchOrder::Fifo }
    }
}

impl Transport {
    fn check(&self) -> Result<(), AppError> {
        match self {
            Transport::Simulated { nodes, capacity, latency, .. } => {
                if *nodes == 0 || *capacity == 0 {
                    return Err(AppError::usage("transport", "simulated clusters need at least one node of capacity >= 1"));
                }
                let finite = [latency.base, latency.per_gflop, latency.jitter].iter().all(|v| v.is_finite() && *v >= 0.0);
                if !finite || latency.jitter >= 1.0 {
                    return Err(AppError::usage("transport.latency", "terms must be non-negative with jitter below 1"));
                }
            }
            Transport::Socket { nodes, timeout_ms } => {
                if nodes.is_empty() {
                    return Err(AppError::usage("nodes", "the socket transport needs at least one node address"));
                }
                if let Some(n) = nodes.iter().find(|n| n.capacity == 0) {
                    return Err(AppError::usage("nodes", format!("node {} has capacity 0", n.addr)));
                }
                if *timeout_ms == 0 {
                    return Err(AppError::usage("timeout", "must be positive"));
                }
            }
        }
        Ok(())
    }

    /// A fresh cluster; simulated ones evaluate with `evaluator`.
    pub fn build(&self, evaluator: Arc<dyn Evaluator>, seed: u64) -> Result<Box<dyn Cluster>, AppError> {
        match self {
            Transport::Simulated { nodes, capacity, latency, order } => {
                let mut c = SimulatedCluster::uniform(*nodes, *capacity, evaluator, seed)
                    .map_err(|e| AppError::usage("transport", e))?;
                c.latency = *latency;
                c.order = *order;
                Ok(Box::new(c))
            }
            Transport::Socket { nodes, timeout_ms } => {
                let list: Vec<(String, usize)> = nodes.iter().map(|n| (n.addr.clone(), n.capacity)).collect();
                let c = SocketCluster::new(&list, Duration::from_millis(*timeout_ms))
                    .map_err(|e| AppError::runtime("connecting to compute nodes", e))?;
                Ok(Box::new(c))
            }
        }
    }
}

/// Predictor training settings shared by `train-predictor` and
/// `search-with-predictor`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorRun {
    pub network: PredictorConfig,
    pub train: TrainConfig,
    /// Labeled structures to train on.
    pub samples: usize,
    /// Separately sampled structures for the held-out rank correlation.
    pub holdout: usize,
    pub dataset_seed: u64,
    /// Labeled curves (JSON lines) to train on instead of sampling new ones.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub dataset: Option<PathBuf>,
    /// A trained predictor to search with instead of training one.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub checkpoint: Option<PathBuf>,
}

impl PredictorRun {
    pub fn new(seed: u64) -> Self {
        PredictorRun {
            network: PredictorConfig::default(),
            train: TrainConfig { seed, ..TrainConfig::default() },
            samples: 2000,
            holdout: 500,
            dataset_seed: seed,
            dataset: None,
            checkpoint: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub mode: Mode,
    pub output: PathBuf,
    pub search: SearchConfig,
    pub evaluator: EvaluatorChoice,
    pub transport: Transport,
    pub predictor: PredictorRun,
    /// Structures kept in `top.json`, and written by `export`.
    pub top: usize,
    /// Block repetitions per stage in exported networks.
    pub repeats: u32,
    /// Run directory read by `export` and `report`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub source: Option<PathBuf>,
    /// Iterations between search checkpoints.
    pub checkpoint_every: u32,
    /// Continue the run already in `output` from its last checkpoint.
    #[serde(skip)]
    pub resume: bool,
}

impl RunConfig {
    /// Defaults for `mode`, with every seed set to `seed`.
    pub fn new(mode: Mode, seed: u64, output: impl Into<PathBuf>) -> Self {
        let search = match mode {
            Mode::SearchConnection => SearchConfig::connection(seed, Vec::new()),
            _ => SearchConfig::block(seed),
        };
        RunConfig {
            mode,
            output: output.into(),
            search,
            evaluator: EvaluatorChoice::default(),
            transport: Transport::default(),
            predictor: PredictorRun::new(seed),
            top: 10,
            repeats: 4,
            source: None,
            checkpoint_every: 10,
            resume: false,
        }
    }

    /// `<root>/<mode>-seed<seed>`, the root taken from [`OUTPUT_ROOT_ENV`] when set.
    pub fn default_output(mode: Mode, seed: u64) -> PathBuf {
        let root = std::env::var_os(OUTPUT_ROOT_ENV).map(PathBuf::from).unwrap_or_else(|| DEFAULT_OUTPUT_ROOT.into());
        root.join(format!("{mode}-seed{seed}"))
    }

    pub fn load(path: &Path) -> Result<Self, AppError> {
        let text = fs::read_to_string(path).map_err(|e| AppError::usage("config", format!("{}: {e}", path.display())))?;
        serde_json::from_str(&text).map_err(|e| AppError::usage("config", format!("{}: {e}", path.display())))
    }

    pub fn check(&self) -> Result<(), AppError> {
        if self.output.as_os_str().is_empty() && self.mode != Mode::Report {
            return Err(AppError::usage("output", "must not be empty"));
        }
        if matches!(self.mode, Mode::Export | Mode::Report) {
            let src = self.source.as_ref().ok_or_else(|| AppError::usage("from", "a run directory is required"))?;
            if !src.is_dir() {
                return Err(AppError::usage("from", format!("{} is not a directory", src.display())));
            }
            if self.mode == Mode::Export && self.top == 0 {
                return Err(AppError::usage("top", "must be at least 1"));
            }
            if self.repeats == 0 {
                return Err(AppError::usage("repeats", "must be at least 1"));
            }
            return Ok(());
        }
        if self.resume && !self.mode.searches() {
            return Err(AppError::usage("resume", format!("{} runs cannot be resumed", self.mode)));
        }
        let space = if self.mode == Mode::SearchConnection { SpaceKind::Connection } else { SpaceKind::Block };
        if self.search.space != space {
            return Err(AppError::usage("search.space", format!("{} needs the {space:?} space", self.mode)));
        }
        if self.mode == Mode::SearchConnection && self.search.connection.as_ref().is_none_or(|c| c.block.is_empty()) {
            return Err(AppError::usage("block", "connection search needs the block to connect"));
        }
        if self.mode == Mode::CompareRandom && self.search.strategy != Strategy::QLearning {
            return Err(AppError::usage("search.strategy", "compare-random runs the random arm itself"));
        }
        self.search.check().map_err(|e| AppError::usage("search", e))?;
        self.transport.check()?;
        if let EvaluatorChoice::External { endpoint, timeout_ms } = &self.evaluator {
            if endpoint.is_empty() || *timeout_ms == 0 {
                return Err(AppError::usage("evaluator", "external trainers need an endpoint and a positive timeout"));
            }
        }
        if self.top == 0 {
            return Err(AppError::usage("top", "must be at least 1"));
        }
        if self.checkpoint_every == 0 {
            return Err(AppError::usage("checkpoint_every", "must be at least 1"));
        }
        if matches!(self.mode, Mode::TrainPredictor | Mode::SearchWithPredictor) {
            self.check_predictor()?;
        }
        Ok(())
    }

    fn check_predictor(&self) -> Result<(), AppError> {
        let p = &self.predictor;
        if self.mode == Mode::SearchWithPredictor {
            if !matches!(self.transport, Transport::Simulated { .. }) {
                return Err(AppError::usage("transport", "the predictor evaluates in process; use the simulated transport"));
            }
            if let Some(path) = &p.checkpoint {
                if !path.is_file() {
                    return Err(AppError::usage("predictor", format!("{} does not exist", path.display())));
                }
                return Ok(());
            }
        }
        p.network.check().map_err(|e| AppError::usage("predictor.network", e))?;
        if self.search.epochs > p.network.max_epoch {
            return Err(AppError::usage(
                "epochs",
                format!("{} exceeds the predictor's {} epoch rows", self.search.epochs, p.network.max_epoch),
            ));
        }
        match &p.dataset {
            Some(path) if !path.is_file() => {
                return Err(AppError::usage("dataset", format!("{} does not exist", path.display())))
            }
            None if p.samples < 2 => return Err(AppError::usage("samples", "need at least 2 training structures")),
            _ => {}
        }
        if p.holdout < 2 {
            return Err(AppError::usage("holdout", "need at least 2 held-out structures"));
        }
        let t = &p.train;
        if t.batch_size == 0 || t.epochs == 0 || !(t.learning_rate > 0.0 && t.learning_rate.is_finite()) {
            return Err(AppError::usage("predictor.train", "batch size, epochs and learning rate must be positive"));
        }
        Ok(())
    }
}

/// Parses `epsilon:iterations` stages separated by commas, e.g. `1.0:95,0.1:12`.
pub fn parse_schedule(text: &str) -> Result<EpsilonSchedule, AppError> {
    let bad = |part: &str| AppError::usage("schedule", format!("expected epsilon:iterations, found {part:?}"));
    let mut stages = Vec::new();
    for part in text.split(',').map(str::trim) {
        let (eps, n) = part.split_once(':').ok_or_else(|| bad(part))?;
        let eps: f64 = eps.trim().parse().map_err(|_| bad(part))?;
        let n: u32 = n.trim().parse().map_err(|_| bad(part))?;
        stages.push((eps, n));
    }
    EpsilonSchedule::new(stages).map_err(|e| AppError::usage("schedule", e))
}

/// A block given on the command line: the canonical text form, a file holding
/// it, or an exported architecture document of a searched block.
pub fn block_argument(arg: &str) -> Result<Vec<NscCode>, AppError> {
    let path = Path::new(arg);
    if !path.is_file() {
        return parse_block(arg.trim()).map_err(|e| AppError::usage("block", e));
    }
    let text = fs::read_to_string(path).map_err(|e| AppError::usage("block", format!("{arg}: {e}")))?;
    if text.trim_start().starts_with('{') {
        let doc = ArchitectureDoc::read(path).map_err(|e| AppError::usage("block", e))?;
        return match doc.space {
            SpaceKind::Block => Ok(doc.codes),
            SpaceKind::Connection => Err(AppError::usage("block", format!("{arg} holds a connection network"))),
        };
    }
    parse_block(text.trim()).map_err(|e| AppError::usage("block", format!("{arg}: {e}")))
}

/// What a run left behind.
#[derive(Debug, Clone, Default)]
pub struct RunSummary {
    pub output: Option<PathBuf>,
    pub files: Vec<PathBuf>,
    /// Human-readable summary, one finding per line.
    pub text: String,
}

impl RunSummary {
    fn line(&mut self, s: impl AsRef<str>) {
        self.text.push_str(s.as_ref());
        self.text.push('\n');
    }
}

pub fn run(config: &RunConfig) -> Result<RunSummary, AppError> {
    config.check()?;
    match config.mode {
        Mode::Report => {
            let source = config.source.as_ref().expect("checked");
            Ok(RunSummary { output: None, files: Vec::new(), text: report(source)? })
        }
        Mode::Export => export(config),
        Mode::SearchBlock | Mode::SearchConnection => {
            let mut summary = prepare(config)?;
            let evaluator = config.evaluator.build();
            let cluster = config.transport.build(evaluator, config.search.seed)?;
            let outcome = run_search(config, &config.search, cluster, &config.output, &mut summary)?;
            write_top(&config.output, &outcome, config.top, None, &mut summary)?;
            describe(&outcome, &mut summary);
            Ok(summary)
        }
        Mode::TrainPredictor => {
            let mut summary = prepare(config)?;
            train_predictor(config, &config.output, &mut summary)?;
            Ok(summary)
        }
        Mode::SearchWithPredictor => faster_search(config),
        Mode::CompareRandom => compare_random(config),
    }
}

/// Creates the output directory and writes the config snapshot, or checks the
/// existing snapshot when resuming.
fn prepare(config: &RunConfig) -> Result<RunSummary, AppError> {
    let dir = &config.output;
    let snapshot = dir.join(CONFIG_FILE);
    if snapshot.exists() {
        if !config.resume {
            return Err(AppError::usage(
                "output",
                format!("{} already holds a run; resume it or choose another directory", dir.display()),
            ));
        }
        let previous = RunConfig::load(&snapshot)?;
        let current = RunConfig { resume: false, ..config.clone() };
        if previous != current {
            return Err(AppError::usage("resume", format!("{} was written by a different configuration", snapshot.display())));
        }
    } else {
        if config.resume {
            return Err(AppError::usage("resume", format!("no run to resume in {}", dir.display())));
        }
        fs::create_dir_all(dir).map_err(|e| AppError::runtime(dir.display(), e))?;
        write_json(&snapshot, config)?;
    }
    Ok(RunSummary { output: Some(dir.clone()), files: vec![snapshot], text: String::new() })
}

fn run_search(
    config: &RunConfig,
    search: &SearchConfig,
    cluster: Box<dyn Cluster>,
    dir: &Path,
    summary: &mut RunSummary,
) -> Result<SearchOutcome, AppError> {
    fs::create_dir_all(dir).map_err(|e| AppError::runtime(dir.display(), e))?;
    let cp_path = dir.join(CHECKPOINT_FILE);
    let events_path = dir.join(EVENTS_FILE);
    let resuming = config.resume && cp_path.exists();
    let mut master = if resuming {
        let cp: SearchCheckpoint = read_json(&cp_path)?;
        if &cp.config != search {
            return Err(AppError::usage("resume", format!("{} belongs to a different search", cp_path.display())));
        }
        info!("resuming {} after iteration {}", dir.display(), cp.iteration);
        Master::resume(cp, cluster)
    } else {
        Master::new(search.clone(), cluster)
    }
    .map_err(|e| AppError::usage("search", e))?;

    let mut events = fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(resuming)
        .truncate(!resuming)
        .open(&events_path)
        .map_err(|e| AppError::runtime(events_path.display(), e))?;
    while !master.is_finished() {
        let next = master.iteration() + 1;
        let (row, batch) = master.step().map_err(|e| AppError::runtime(format!("iteration {next}"), e))?;
        batch.write_events(&mut events).map_err(|e| AppError::runtime(events_path.display(), e))?;
        if row.iteration % config.checkpoint_every == 0 {
            write_json(&cp_path, &master.checkpoint())?;
        }
    }
    write_json(&cp_path, &master.checkpoint())?;
    let outcome = master.finish();

    let csv_path = dir.join(ITERATIONS_FILE);
    write_csv(&csv_path, &outcome.rows)?;
    let replay_path = dir.join(REPLAY_FILE);
    write_jsonl(&replay_path, outcome.replay.records())?;
    let q_path = dir.join(QTABLE_FILE);
    write_json(&q_path, &outcome.q.to_checkpoint())?;
    summary.files.extend([csv_path, replay_path, q_path, cp_path, events_path]);
    Ok(outcome)
}

/// Rescores a finished sample with `labeler`, returning its accuracy and reward.
type Rescore<'a> = &'a dyn Fn(&Sample) -> Result<(f64, f64), AppError>;

fn write_top(
    dir: &Path,
    outcome: &SearchOutcome,
    k: usize,
    rescore: Option<Rescore<'_>>,
    summary: &mut RunSummary,
) -> Result<Vec<TopEntry>, AppError> {
    let mut entries = Vec::new();
    for (i, s) in top_samples(&outcome.samples, k).into_iter().enumerate() {
        let mut e = TopEntry::new(i + 1, s);
        if let Some(f) = rescore {
            let (acc, reward) = f(s)?;
            e.true_accuracy = Some(acc);
            e.true_reward = Some(reward);
        }
        entries.push(e);
    }
    let path = dir.join(TOP_FILE);
    write_json(&path, &entries)?;
    summary.files.push(path);
    Ok(entries)
}

fn describe(outcome: &SearchOutcome, summary: &mut RunSummary) {
    let evaluated = outcome.samples.len();
    summary.line(format!(
        "{} iterations, {} structures sampled, {} evaluated, {} failed",
        outcome.rows.len(),
        outcome.total_samples(),
        evaluated,
        outcome.failed_jobs
    ));
    if let Some(best) = outcome.top(1).first() {
        summary.line(format!(
            "best reward {:.4} (accuracy {:.4}) from iteration {}: {}",
            best.reward,
            best.accuracy,
            best.iteration,
            crate::nsc::serialize_block(&best.codes)
        ));
    }
}

fn train_predictor(config: &RunConfig, dir: &Path, summary: &mut RunSummary) -> Result<Predictor, AppError> {
    let p = &config.predictor;
    let labeler = config.evaluator.build();
    let space = config.search.action_space().map_err(|e| AppError::usage("search", e))?;
    let epochs = config.search.epochs;
    let labeling = |e| AppError::runtime("labeling structures", e);
    let data = match &p.dataset {
        Some(path) => CurveDataset::read_jsonl(path).map_err(|e| AppError::usage("dataset", e))?,
        None => CurveDataset::generate(&*labeler, &space, p.samples, epochs, p.dataset_seed).map_err(labeling)?,
    };
    data.check().map_err(|e| AppError::usage("dataset", e))?;
    let held = CurveDataset::generate(&*labeler, &space, p.holdout, epochs, mix64(p.dataset_seed, 1)).map_err(labeling)?;
    fs::create_dir_all(dir).map_err(|e| AppError::runtime(dir.display(), e))?;
    let data_path = dir.join("dataset.jsonl");
    let held_path = dir.join("heldout.jsonl");
    for (path, set) in [(&data_path, &data), (&held_path, &held)] {
        set.write_jsonl(path).map_err(|e| AppError::runtime(path.display(), e))?;
    }

    info!("training the predictor on {} structures", data.len());
    let mut pred = Predictor::new(p.network.clone(), p.train.seed).map_err(|e| AppError::usage("predictor.network", e))?;
    let report = train(&mut pred, &data, &p.train).map_err(|e| AppError::runtime("training the predictor", e))?;
    let pred_path = dir.join(PREDICTOR_FILE);
    pred.save(&pred_path).map_err(|e| AppError::runtime(pred_path.display(), e))?;

    let items: Vec<(&[NscCode], u32)> =
        held.samples.iter().map(|s| (s.codes.as_slice(), s.curve.len() as u32)).collect();
    let predicted = pred.predict_batch(&items).map_err(|e| AppError::runtime("scoring held-out structures", e))?;
    let actual: Vec<f64> = held.samples.iter().map(|s| *s.curve.last().expect("checked")).collect();
    let metrics = PredictorMetrics::new(data.len(), &report, &predicted, &actual);

    let loss_path = dir.join("loss.csv");
    write_csv(&loss_path, report.losses.iter().enumerate().map(|(i, l)| artifacts::LossRow { step: i + 1, loss: *l }))?;
    let metrics_path = dir.join(METRICS_FILE);
    write_json(&metrics_path, &metrics)?;
    summary.files.extend([data_path, held_path, pred_path, loss_path, metrics_path]);
    summary.line(format!(
        "predictor trained on {} structures in {} steps; held-out Spearman {:.4}, mean absolute error {:.4}",
        metrics.train_samples, metrics.steps, metrics.heldout_spearman, metrics.heldout_mae
    ));
    Ok(pred)
}

fn faster_search(config: &RunConfig) -> Result<RunSummary, AppError> {
    let mut summary = prepare(config)?;
    let dir = &config.output;
    let pred = match &config.predictor.checkpoint {
        Some(path) => Predictor::load(path).map_err(|e| AppError::usage("predictor", e))?,
        None => {
            let saved = dir.join("predictor").join(PREDICTOR_FILE);
            if config.resume && saved.is_file() {
                Predictor::load(&saved).map_err(|e| AppError::runtime(saved.display(), e))?
            } else {
                train_predictor(config, &dir.join("predictor"), &mut summary)?
            }
        }
    };
    let evaluator = Arc::new(PredictorEvaluator::new(Arc::new(pred)));
    let cluster = config.transport.build(evaluator, config.search.seed)?;
    let outcome = run_search(config, &config.search, cluster, dir, &mut summary)?;

    let labeler = config.evaluator.build();
    let search = &config.search;
    let rescore = |s: &Sample| {
        let req = EvalRequest::block(s.job, s.codes.clone(), search.epochs, mix64(search.seed, s.job));
        let result = labeler.evaluate(&req).map_err(|e| AppError::runtime(format!("rescoring job {}", s.job), e))?;
        let reward = search.reward_of(&result).map_err(|e| AppError::runtime(format!("rescoring job {}", s.job), e))?;
        Ok((result.early_stop_accuracy, reward))
    };
    let top = write_top(dir, &outcome, config.top, Some(&rescore), &mut summary)?;
    describe(&outcome, &mut summary);
    if let Some(best) = top.iter().max_by(|a, b| a.true_reward.partial_cmp(&b.true_reward).expect("finite")) {
        summary.line(format!(
            "best rescored reward {:.4} (accuracy {:.4}) at predicted rank {}",
            best.true_reward.unwrap_or(f64::NAN),
            best.true_accuracy.unwrap_or(f64::NAN),
            best.rank
        ));
    }
    Ok(summary)
}

fn compare_random(config: &RunConfig) -> Result<RunSummary, AppError> {
    let mut summary = prepare(config)?;
    let dir = &config.output;
    let evaluator = config.evaluator.build();
    let mut arms = Vec::new();
    for (name, search) in [("qlearning", config.search.clone()), ("random", config.search.clone().random())] {
        let cluster = config.transport.build(evaluator.clone(), search.seed)?;
        let sub = dir.join(name);
        let outcome = run_search(config, &search, cluster, &sub, &mut summary)?;
        write_top(&sub, &outcome, config.top, None, &mut summary)?;
        arms.push(outcome);
    }
    let rows = compare_rows(&arms[0], &arms[1], 5);
    let path = dir.join(COMPARE_FILE);
    write_csv(&path, &rows)?;
    summary.files.push(path);
    if let Some(last) = rows.last() {
        summary.line(format!(
            "after {} iterations, top-5 mean reward: Q-learning {:.4}, random {:.4}; top-5 mean accuracy: {:.4} vs {:.4}",
            last.iteration,
            last.qlearning_top5_reward,
            last.random_top5_reward,
            last.qlearning_top5_accuracy,
            last.random_top5_accuracy
        ));
    }
    Ok(summary)
}

fn export(config: &RunConfig) -> Result<RunSummary, AppError> {
    let source = config.source.as_ref().expect("checked");
    let cp_path = source.join(CHECKPOINT_FILE);
    if !cp_path.is_file() {
        return Err(AppError::usage(
            "from",
            format!("{} has no {CHECKPOINT_FILE}; point at a search run (for comparisons, one of its arms)", source.display()),
        ));
    }
    let cp: SearchCheckpoint = read_json(&cp_path)?;
    let dir = &config.output;
    if dir.join(CONFIG_FILE).exists() {
        return Err(AppError::usage("output", format!("{} already holds a run", dir.display())));
    }
    fs::create_dir_all(dir).map_err(|e| AppError::runtime(dir.display(), e))?;
    let snapshot = dir.join(CONFIG_FILE);
    write_json(&snapshot, config)?;
    let mut summary = RunSummary { output: Some(dir.clone()), files: vec![snapshot], text: String::new() };

    let top = top_samples(&cp.samples, config.top);
    if top.len() < config.top {
        summary.line(format!("the run holds only {} distinct structures", top.len()));
    }
    for (i, s) in top.into_iter().enumerate() {
        let doc = match (&cp.config.space, &cp.config.connection) {
            (SpaceKind::Connection, Some(ctx)) => {
                let template = Template::from_name(&ctx.template).map_err(|e| AppError::runtime(cp_path.display(), e))?;
                ArchitectureDoc::connection(i + 1, s, &ctx.block, &template)
            }
            _ => ArchitectureDoc::block(i + 1, s, &Template::cifar(), config.repeats),
        }
        .map_err(|e| AppError::runtime(format!("building structure from job {}", s.job), e))?;
        let path = dir.join(format!("arch-{:02}.json", i + 1));
        write_json(&path, &doc)?;
        summary.line(format!("{}: reward {:.4}, {}", path.display(), doc.reward, doc.text));
        summary.files.push(path);
    }
    Ok(summary)
}
