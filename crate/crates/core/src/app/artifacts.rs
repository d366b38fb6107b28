//! File formats a run leaves behind.

use std::fs;
use std::io::{BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use super::AppError;
use crate::agent::SpaceKind;
use crate::complexity::ComplexityReport;
use crate::graph::{build_block, build_connection_network, stack_network, BlockGraph, GraphError, NetworkPlan, Template};
use crate::nsc::{serialize_block, NscCode};
use crate::predictor::{spearman, TrainReport};
use crate::search::{top_samples, Sample, SearchOutcome};

pub(crate) fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, AppError> {
    let text = fs::read_to_string(path).map_err(|e| AppError::runtime(path.display(), e))?;
    serde_json::from_str(&text).map_err(|e| AppError::runtime(path.display(), e))
}

/// Writes through a temporary sibling and renames, so a crash never leaves a
/// half-written checkpoint behind.
pub(crate) fn write_json<T: Serialize + ?Sized>(path: &Path, value: &T) -> Result<(), AppError> {
    let tmp = path.with_extension("json.tmp");
    let mut text = serde_json::to_string_pretty(value).map_err(|e| AppError::runtime(path.display(), e))?;
    text.push('\n');
    fs::write(&tmp, text).map_err(|e| AppError::runtime(tmp.display(), e))?;
    fs::rename(&tmp, path).map_err(|e| AppError::runtime(path.display(), e))
}

pub(crate) fn write_jsonl<'a, T: Serialize + 'a>(
    path: &Path,
    items: impl IntoIterator<Item = &'a T>,
) -> Result<(), AppError> {
    let err = |e: std::io::Error| AppError::runtime(path.display(), e);
    let mut out = BufWriter::new(fs::File::create(path).map_err(err)?);
    for item in items {
        crate::protocol::write_message(&mut out, item).map_err(err)?;
    }
    out.flush().map_err(err)
}

pub(crate) fn write_csv<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>) -> Result<(), AppError> {
    let err = |e: csv::Error| AppError::runtime(path.display(), e);
    let mut w = csv::Writer::from_path(path).map_err(err)?;
    for row in rows {
        w.serialize(row).map_err(err)?;
    }
    w.flush().map_err(|e| AppError::runtime(path.display(), e))
}

pub(crate) fn read_csv<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, AppError> {
    let err = |e: csv::Error| AppError::runtime(path.display(), e);
    csv::Reader::from_path(path).map_err(err)?.deserialize().collect::<Result<_, _>>().map_err(err)
}

#[derive(Debug, Clone, Copy, Serialize, Deserialize)]
pub(crate) struct LossRow {
    pub step: usize,
    pub loss: f64,
}

/// One line of `top.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TopEntry {
    pub rank: usize,
    pub job: u64,
    pub iteration: u32,
    pub text: String,
    pub codes: Vec<NscCode>,
    pub reward: f64,
    pub accuracy: f64,
    pub complexity: ComplexityReport,
    /// Accuracy and reward from the labeling evaluator, for predictor-driven runs.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_accuracy: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_reward: Option<f64>,
}

impl TopEntry {
    pub fn new(rank: usize, s: &Sample) -> Self {
        TopEntry {
            rank,
            job: s.job,
            iteration: s.iteration,
            text: serialize_block(&s.codes),
            codes: s.codes.clone(),
            reward: s.reward,
            accuracy: s.accuracy,
            complexity: s.complexity,
            true_accuracy: None,
            true_reward: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictorMetrics {
    pub train_samples: usize,
    pub heldout_samples: usize,
    pub steps: usize,
    pub final_epoch_loss: f64,
    pub heldout_spearman: f64,
    pub heldout_mae: f64,
}

impl PredictorMetrics {
    pub(crate) fn new(train_samples: usize, report: &TrainReport, predicted: &[f64], actual: &[f64]) -> Self {
        let mae = predicted.iter().zip(actual).map(|(p, a)| (p - a).abs()).sum::<f64>() / actual.len().max(1) as f64;
        PredictorMetrics {
            train_samples,
            heldout_samples: actual.len(),
            steps: report.steps(),
            final_epoch_loss: report.epoch_losses.last().copied().unwrap_or(f64::NAN),
            heldout_spearman: spearman(predicted, actual),
            heldout_mae: mae,
        }
    }
}

/// One line of `compare.csv`: the best `k` distinct structures found so far by
/// each arm, averaged.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompareRow {
    pub iteration: u32,
    pub epsilon: f64,
    pub qlearning_top5_reward: f64,
    pub random_top5_reward: f64,
    pub qlearning_top5_accuracy: f64,
    pub random_top5_accuracy: f64,
}

/// Per-iteration top-`k` means of two runs with the same schedule.
pub fn compare_rows(qlearning: &SearchOutcome, random: &SearchOutcome, k: usize) -> Vec<CompareRow> {
    let running = |samples: &[Sample], iteration: u32| {
        let seen = samples.partition_point(|s| s.iteration <= iteration);
        let top = top_samples(&samples[..seen], k);
        let n = top.len().max(1) as f64;
        let reward = top.iter().map(|s| s.reward).sum::<f64>() / n;
        let accuracy = top.iter().map(|s| s.accuracy).sum::<f64>() / n;
        if top.is_empty() {
            (f64::NAN, f64::NAN)
        } else {
            (reward, accuracy)
        }
    };
    qlearning
        .rows
        .iter()
        .map(|row| {
            let (qr, qa) = running(&qlearning.samples, row.iteration);
            let (rr, ra) = running(&random.samples, row.iteration);
            CompareRow {
                iteration: row.iteration,
                epsilon: row.epsilon,
                qlearning_top5_reward: qr,
                random_top5_reward: rr,
                qlearning_top5_accuracy: qa,
                random_top5_accuracy: ra,
            }
        })
        .collect()
}

/// An exported architecture: the searched codes plus the block and network
/// graphs they build, with shapes and expanded primitives.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchitectureDoc {
    pub format: String,
    pub version: u32,
    pub rank: usize,
    pub space: SpaceKind,
    pub text: String,
    pub codes: Vec<NscCode>,
    pub reward: f64,
    pub accuracy: f64,
    pub complexity: ComplexityReport,
    pub template: Template,
    /// Block repetitions per stage; connection networks place blocks themselves.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub repeats: Option<u32>,
    /// The searched block, or the fixed block a connection network instantiates.
    pub block: BlockGraph,
    pub network: NetworkPlan,
}

impl ArchitectureDoc {
    pub const FORMAT: &'static str = "blockqnn-architecture";

    pub fn block(rank: usize, s: &Sample, template: &Template, repeats: u32) -> Result<Self, GraphError> {
        let block = build_block(&s.codes, template.base_width)?;
        let network = stack_network(&block, template, repeats)?;
        Ok(Self::assemble(rank, s, SpaceKind::Block, template, Some(repeats), block, network))
    }

    pub fn connection(rank: usize, s: &Sample, block: &[NscCode], template: &Template) -> Result<Self, GraphError> {
        let block = build_block(block, template.base_width)?;
        let network = build_connection_network(&s.codes, &block, template)?;
        Ok(Self::assemble(rank, s, SpaceKind::Connection, template, None, block, network))
    }

    fn assemble(
        rank: usize,
        s: &Sample,
        space: SpaceKind,
        template: &Template,
        repeats: Option<u32>,
        block: BlockGraph,
        network: NetworkPlan,
    ) -> Self {
        ArchitectureDoc {
            format: Self::FORMAT.into(),
            version: 1,
            rank,
            space,
            text: serialize_block(&s.codes),
            codes: s.codes.clone(),
            reward: s.reward,
            accuracy: s.accuracy,
            complexity: s.complexity,
            template: template.clone(),
            repeats,
            block,
            network,
        }
    }

    pub fn read(path: &Path) -> Result<Self, AppError> {
        let doc: ArchitectureDoc = read_json(path)?;
        if doc.format != Self::FORMAT || doc.version != 1 {
            return Err(AppError::runtime(path.display(), format!("not a {} v1 document", Self::FORMAT)));
        }
        Ok(doc)
    }

    /// Re-parses the text form and rebuilds both graphs from it; any
    /// difference from the stored document is an error.
    pub fn verify(&self) -> Result<(), AppError> {
        let codes = crate::nsc::parse_block(&self.text).map_err(|e| AppError::runtime("architecture text", e))?;
        if codes != self.codes {
            return Err(AppError::Runtime("architecture text and codes disagree".into()));
        }
        let rebuild = |e: GraphError| AppError::runtime("rebuilding architecture", e);
        let (block, network) = match (self.space, self.repeats) {
            (SpaceKind::Block, Some(n)) => {
                let b = build_block(&codes, self.template.base_width).map_err(rebuild)?;
                let net = stack_network(&b, &self.template, n).map_err(rebuild)?;
                (b, net)
            }
            (SpaceKind::Connection, None) => {
                let b = build_block(&self.block.codes, self.template.base_width).map_err(rebuild)?;
                let net = build_connection_network(&codes, &b, &self.template).map_err(rebuild)?;
                (b, net)
            }
            _ => return Err(AppError::Runtime("repeats must be set for blocks only".into())),
        };
        if block != self.block {
            return Err(AppError::Runtime("rebuilt block differs from the stored one".into()));
        }
        if network != self.network {
            return Err(AppError::Runtime("rebuilt network differs from the stored one".into()));
        }
        Ok(())
    }
}
