//! The master loop: sample a batch, evaluate it on a cluster, learn, repeat.

use std::collections::HashSet;

use log::info;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::agent::{
    ActionSpace, Agent, AgentError, EpsilonSchedule, LearningConfig, QCheckpoint, QTable, ReplayMemory, ReplayRecord,
    RngState, SpaceKind,
};
use crate::complexity::ComplexityReport;
use crate::evaluation::{composite_reward, ConnectionContext, EvalError, EvalRequest, EvalResult, RewardConfig};
use crate::mix64;
use crate::nsc::{CodeSpaceLimits, NscCode, NscError};
use crate::runtime::{BatchReport, Cluster, RuntimeError};

#[derive(Debug, Error)]
pub enum SearchError {
    #[error(transparent)]
    Agent(#[from] AgentError),
    #[error(transparent)]
    Runtime(#[from] RuntimeError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid search configuration: {0}")]
    Config(String),
}

impl From<NscError> for SearchError {
    fn from(e: NscError) -> Self {
        SearchError::Config(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Strategy {
    QLearning,
    /// Uniform legal actions at every step, no learning.
    Random,
}

/// What the agent is rewarded with.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RewardSignal {
    /// Early-stop accuracy corrected by FLOPs and density.
    Composite,
    /// Early-stop accuracy alone, in the reward's accuracy scale.
    Accuracy,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchConfig {
    pub space: SpaceKind,
    pub strategy: Strategy,
    pub schedule: EpsilonSchedule,
    pub batch_size: usize,
    pub epochs: u32,
    pub reward: RewardConfig,
    pub signal: RewardSignal,
    pub learning: LearningConfig,
    pub seed: u64,
    /// Largest tolerated fraction of permanently failed jobs per batch.
    pub failure_threshold: f64,
    /// Overrides the space's maximum layer index.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub max_layer_index: Option<u8>,
    /// Block and template for connection search.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub connection: Option<ConnectionContext>,
}

impl SearchConfig {
    pub fn block(seed: u64) -> Self {
        SearchConfig {
            space: SpaceKind::Block,
            strategy: Strategy::QLearning,
            schedule: EpsilonSchedule::block_search(),
            batch_size: 64,
            epochs: 12,
            reward: RewardConfig::default(),
            signal: RewardSignal::Composite,
            learning: LearningConfig::default(),
            seed,
            failure_threshold: 0.1,
            max_layer_index: None,
            connection: None,
        }
    }

    pub fn connection(seed: u64, block: Vec<NscCode>) -> Self {
        SearchConfig {
            space: SpaceKind::Connection,
            schedule: EpsilonSchedule::connection_search(),
            connection: Some(ConnectionContext { block, template: "cifar".into() }),
            ..Self::block(seed)
        }
    }

    pub fn random(self) -> Self {
        SearchConfig { strategy: Strategy::Random, ..self }
    }

    pub fn action_space(&self) -> Result<ActionSpace, SearchError> {
        let mut limits = match self.space {
            SpaceKind::Block => CodeSpaceLimits::block_search(),
            SpaceKind::Connection => CodeSpaceLimits::connection_search(),
        };
        if let Some(m) = self.max_layer_index {
            limits.max_layer_index = m;
        }
        Ok(ActionSpace::new(limits, self.space)?)
    }

    /// The scalar the agent learns from for one evaluation.
    pub fn reward_of(&self, result: &EvalResult) -> Result<f64, EvalError> {
        match self.signal {
            RewardSignal::Composite => composite_reward(result, &self.reward),
            RewardSignal::Accuracy => Ok(self.reward.accuracy_scale * result.early_stop_accuracy),
        }
    }

    pub fn check(&self) -> Result<(), SearchError> {
        if self.batch_size == 0 {
            return Err(SearchError::Config("batch_size must be at least 1".into()));
        }
        if self.epochs == 0 {
            return Err(SearchError::Config("epochs must be at least 1".into()));
        }
        if !(0.0..=1.0).contains(&self.failure_threshold) {
            return Err(SearchError::Config("failure_threshold must lie in [0, 1]".into()));
        }
        self.reward.check()?;
        match (self.space, &self.connection) {
            (SpaceKind::Connection, None) => {
                return Err(SearchError::Config("connection search needs a block and template".into()))
            }
            (SpaceKind::Connection, Some(ctx)) => {
                let probe = EvalRequest {
                    id: 0,
                    codes: vec![NscCode::terminal(1)],
                    epochs: 1,
                    seed: 0,
                    connection: Some(ctx.clone()),
                };
                probe.complexity()?;
            }
            (SpaceKind::Block, _) => {}
        }
        self.action_space()?;
        Ok(())
    }
}

/// One row of the per-iteration CSV.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: u32,
    pub epsilon: f64,
    pub mean_reward: f64,
    pub max_reward: f64,
    pub mean_accuracy: f64,
    pub max_accuracy: f64,
    pub completed: usize,
    pub failed: usize,
}

/// A structure that finished evaluation, with what the search saw of it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub job: u64,
    pub iteration: u32,
    pub codes: Vec<NscCode>,
    pub reward: f64,
    pub accuracy: f64,
    pub complexity: ComplexityReport,
}

/// Resumable state of a search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SearchCheckpoint {
    pub config: SearchConfig,
    pub iteration: u32,
    pub next_job: u64,
    pub q: QCheckpoint,
    pub replay: ReplayMemory,
    pub rng: RngState,
    pub rows: Vec<IterationRow>,
    pub samples: Vec<Sample>,
}

#[derive(Debug, Clone)]
pub struct SearchOutcome {
    pub config: SearchConfig,
    pub rows: Vec<IterationRow>,
    pub samples: Vec<Sample>,
    pub q: QTable,
    pub replay: ReplayMemory,
    pub failed_jobs: usize,
}

impl SearchOutcome {
    /// Best distinct structures by search reward, ties broken by job id.
    pub fn top(&self, k: usize) -> Vec<&Sample> {
        top_samples(&self.samples, k)
    }

    pub fn total_samples(&self) -> usize {
        self.samples.len() + self.failed_jobs
    }
}

pub fn top_samples(samples: &[Sample], k: usize) -> Vec<&Sample> {
    let mut sorted: Vec<&Sample> = samples.iter().collect();
    sorted.sort_by(|a, b| b.reward.total_cmp(&a.reward).then(a.job.cmp(&b.job)));
    let mut seen = HashSet::new();
    sorted.into_iter().filter(|s| seen.insert(s.codes.clone())).take(k).collect()
}

/// Master node: owns the agent and drives a cluster one batch at a time.
pub struct Master<C: Cluster> {
    config: SearchConfig,
    agent: Agent,
    cluster: C,
    iteration: u32,
    next_job: u64,
    rows: Vec<IterationRow>,
    samples: Vec<Sample>,
    failed_jobs: usize,
}

impl<C: Cluster> Master<C> {
    pub fn new(config: SearchConfig, cluster: C) -> Result<Self, SearchError> {
        config.check()?;
        let agent = Agent::new(config.action_space()?, config.learning.clone(), config.seed)?;
        Ok(Master { config, agent, cluster, iteration: 0, next_job: 0, rows: Vec::new(), samples: Vec::new(), failed_jobs: 0 })
    }

    pub fn resume(checkpoint: SearchCheckpoint, cluster: C) -> Result<Self, SearchError> {
        let mut m = Master::new(checkpoint.config, cluster)?;
        m.agent.q = QTable::from_checkpoint(&checkpoint.q)?;
        m.agent.replay = checkpoint.replay;
        m.agent.restore_rng(&checkpoint.rng)?;
        m.iteration = checkpoint.iteration;
        m.next_job = checkpoint.next_job;
        m.failed_jobs = checkpoint.next_job as usize - checkpoint.samples.len();
        m.rows = checkpoint.rows;
        m.samples = checkpoint.samples;
        Ok(m)
    }

    pub fn checkpoint(&self) -> SearchCheckpoint {
        SearchCheckpoint {
            config: self.config.clone(),
            iteration: self.iteration,
            next_job: self.next_job,
            q: self.agent.q.to_checkpoint(),
            replay: self.agent.replay.clone(),
            rng: self.agent.rng_state(),
            rows: self.rows.clone(),
            samples: self.samples.clone(),
        }
    }

    pub fn agent(&self) -> &Agent {
        &self.agent
    }

    pub fn cluster(&self) -> &C {
        &self.cluster
    }

    /// Iterations completed so far.
    pub fn iteration(&self) -> u32 {
        self.iteration
    }

    pub fn is_finished(&self) -> bool {
        self.iteration >= self.config.schedule.total_iterations()
    }

    /// Runs the next iteration and returns its row with the batch log.
    pub fn step(&mut self) -> Result<(IterationRow, BatchReport), SearchError> {
        let iteration = self.iteration + 1;
        let epsilon = self.config.schedule.epsilon_at(iteration)?;
        let explore = match self.config.strategy {
            Strategy::QLearning => epsilon,
            Strategy::Random => 1.0,
        };
        let batch = self.agent.sample_batch(explore, self.config.batch_size);
        let first = self.next_job;
        let jobs: Vec<EvalRequest> = batch
            .into_iter()
            .enumerate()
            .map(|(i, t)| {
                let id = first + i as u64;
                EvalRequest {
                    id,
                    codes: t.into_codes(),
                    epochs: self.config.epochs,
                    seed: mix64(self.config.seed, id),
                    connection: self.config.connection.clone(),
                }
            })
            .collect();
        self.next_job += jobs.len() as u64;
        let report = self.cluster.run_batch(jobs)?;

        let total = report.records.len();
        debug_assert!(report.records.iter().map(|r| r.id).eq(first..first + total as u64));
        let failed = report.failed();
        if failed as f64 > self.config.failure_threshold * total as f64 {
            return Err(RuntimeError::BatchFailed { failed, total }.into());
        }
        let mut rewards = Vec::with_capacity(total);
        let mut accs = Vec::with_capacity(total);
        for rec in report.records.iter().filter(|r| r.is_done()) {
            let result = rec.result.as_ref().expect("done jobs carry a result");
            let reward = self.config.reward_of(result)?;
            self.agent.remember(ReplayRecord { codes: rec.codes.clone(), reward });
            rewards.push(reward);
            accs.push(result.early_stop_accuracy);
            self.samples.push(Sample {
                job: rec.id,
                iteration,
                codes: rec.codes.clone(),
                reward,
                accuracy: result.early_stop_accuracy,
                complexity: result.complexity,
            });
        }
        self.failed_jobs += failed;
        if self.config.strategy == Strategy::QLearning && !self.agent.replay.is_empty() {
            self.agent.replay()?;
        }
        let mean = |v: &[f64]| if v.is_empty() { f64::NAN } else { v.iter().sum::<f64>() / v.len() as f64 };
        let max = |v: &[f64]| v.iter().copied().fold(f64::NAN, f64::max);
        let row = IterationRow {
            iteration,
            epsilon,
            mean_reward: mean(&rewards),
            max_reward: max(&rewards),
            mean_accuracy: mean(&accs),
            max_accuracy: max(&accs),
            completed: rewards.len(),
            failed,
        };
        info!(
            "iteration {iteration} epsilon {epsilon:.1}: mean reward {:.3}, mean accuracy {:.4}, {failed} failed",
            row.mean_reward, row.mean_accuracy
        );
        self.rows.push(row.clone());
        self.iteration = iteration;
        Ok((row, report))
    }

    /// Runs the remaining iterations, handing each row and batch log to `observe`.
    pub fn run_with(
        mut self,
        mut observe: impl FnMut(&Self, &IterationRow, &BatchReport),
    ) -> Result<SearchOutcome, SearchError> {
        while !self.is_finished() {
            let (row, report) = self.step()?;
            observe(&self, &row, &report);
        }
        Ok(self.finish())
    }

    pub fn run(self) -> Result<SearchOutcome, SearchError> {
        self.run_with(|_, _, _| {})
    }

    pub fn finish(self) -> SearchOutcome {
        SearchOutcome {
            config: self.config,
            rows: self.rows,
            samples: self.samples,
            q: self.agent.q,
            replay: self.agent.replay,
            failed_jobs: self.failed_jobs,
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::evaluation::SurrogateEvaluator;
    use crate::runtime::SimulatedCluster;
    use std::sync::Arc;

    fn short(seed: u64) -> SearchConfig {
        SearchConfig {
            schedule: EpsilonSchedule::new(vec![(1.0, 3), (0.5, 2)]).unwrap(),
            batch_size: 8,
            ..SearchConfig::block(seed)
        }
    }

    fn cluster(seed: u64) -> SimulatedCluster {
        SimulatedCluster::uniform(2, 2, Arc::new(SurrogateEvaluator::default()), seed).unwrap()
    }

    #[test]
    fn short_run_bookkeeping() {
        let out = Master::new(short(1), cluster(1)).unwrap().run().unwrap();
        assert_eq!(out.rows.len(), 5);
        assert_eq!(out.samples.len(), 40);
        assert_eq!(out.replay.len(), 40);
        let eps: Vec<f64> = out.rows.iter().map(|r| r.epsilon).collect();
        assert_eq!(eps, vec![1.0, 1.0, 1.0, 0.5, 0.5]);
        assert!(!out.q.is_empty());
        let top = out.top(3);
        assert_eq!(top.len(), 3);
        assert!(top[0].reward >= top[1].reward && top[1].reward >= top[2].reward);
    }

    #[test]
    fn resume_matches_uninterrupted_run() {
        let full = Master::new(short(4), cluster(4)).unwrap().run().unwrap();
        let mut m = Master::new(short(4), cluster(4)).unwrap();
        m.step().unwrap();
        m.step().unwrap();
        let json = serde_json::to_string(&m.checkpoint()).unwrap();
        let cp: SearchCheckpoint = serde_json::from_str(&json).unwrap();
        let resumed = Master::resume(cp, cluster(4)).unwrap().run().unwrap();
        assert_eq!(resumed.rows, full.rows);
        assert_eq!(resumed.samples, full.samples);
        assert_eq!(resumed.q, full.q);
    }

    #[test]
    fn random_strategy_leaves_q_empty() {
        let out = Master::new(short(2).random(), cluster(2)).unwrap().run().unwrap();
        assert!(out.q.is_empty());
        assert_eq!(out.samples.len(), 40);
    }

    #[test]
    fn connection_search_needs_context() {
        let mut cfg = SearchConfig::connection(0, vec![NscCode::terminal(1)]);
        cfg.connection = None;
        assert!(Master::new(cfg, cluster(0)).is_err());
    }
}
