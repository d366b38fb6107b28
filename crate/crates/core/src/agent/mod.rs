//! Tabular Q-learning over code sequences.
//!
//! A state is the code of the most recently chosen layer (or `Start`); an action
//! is the next code. Sampling is epsilon-greedy over legal, unmasked actions.
//! After a block with reward `r_T` and length `T` (Terminal included), values
//! are updated backwards:
//!
//! ```text
//! Q(s_{T-1}, a_T) <- (1 - alpha) Q + alpha r_T
//! Q(s_t, a_{t+1}) <- (1 - alpha) Q + alpha [r_t + gamma max_a' Q(s_{t+1}, a')]   t = T-2 .. 0
//! ```
//!
//! with the shaped intermediate reward `r_t = r_T / T` (or 0 when shaping is off).
//! Terminal rows are never written.

mod qtable;
mod replay;
mod schedule;
mod space;

pub use qtable::{QCheckpoint, QTable, State};
pub use replay::{ReplayMemory, ReplayRecord};
pub use schedule::EpsilonSchedule;
pub use space::{ActionSpace, Prefix, SpaceKind};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::nsc::{validate_code, NscCode, Rejection};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AgentError {
    #[error("invalid agent configuration: {0}")]
    Config(String),
    #[error("iteration {iteration} outside 1..={total}")]
    IterationOutOfRange { iteration: u32, total: u32 },
    #[error("non-finite reward {0}")]
    NonFiniteReward(f64),
    #[error("replay memory is empty")]
    EmptyReplay,
    #[error("invalid trajectory at step {step}: {reason}")]
    Trajectory { step: usize, reason: String },
    #[error("checkpoint error: {0}")]
    Checkpoint(String),
}

/// How intermediate rewards are assigned along a trajectory.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Shaping {
    /// `r_t = r_T / T`.
    Shaped,
    /// `r_t = 0`; only the terminal transition sees the reward.
    Unshaped,
}

/// An ordered code list ending in Terminal.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Trajectory {
    codes: Vec<NscCode>,
}

impl Trajectory {
    /// Checks every step is legal and unmasked given the steps before it.
    pub fn new(codes: Vec<NscCode>, space: &ActionSpace) -> Result<Self, AgentError> {
        let mut prefix = Prefix::new();
        for (i, code) in codes.iter().enumerate() {
            let position = i as u32 + 1;
            validate_code(code, position, space.limits())
                .map_err(|r: Rejection| AgentError::Trajectory { step: position as usize, reason: r.to_string() })?;
            if !space.is_allowed(&prefix, code) {
                return Err(AgentError::Trajectory { step: position as usize, reason: format!("{code} is masked") });
            }
            if code.is_terminal() {
                if i + 1 != codes.len() {
                    return Err(AgentError::Trajectory { step: position as usize, reason: "codes after Terminal".into() });
                }
                return Ok(Trajectory { codes });
            }
            prefix.push(code);
        }
        Err(AgentError::Trajectory { step: codes.len(), reason: "missing Terminal".into() })
    }

    pub fn codes(&self) -> &[NscCode] {
        &self.codes
    }

    /// Number of codes, Terminal included.
    pub fn len(&self) -> usize {
        self.codes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.codes.is_empty()
    }

    pub fn into_codes(self) -> Vec<NscCode> {
        self.codes
    }
}

/// `r_T / T`.
pub fn shaped_reward(terminal_reward: f64, length: usize) -> f64 {
    assert!(length >= 1, "trajectory length must be positive");
    terminal_reward / length as f64
}

/// Epsilon-greedy rollout from `Start` until Terminal.
pub fn sample_trajectory<R: Rng + ?Sized>(q: &QTable, epsilon: f64, space: &ActionSpace, rng: &mut R) -> Trajectory {
    let mut prefix = Prefix::new();
    let mut state = State::Start;
    let mut codes = Vec::new();
    loop {
        let action = if rng.gen::<f64>() < epsilon {
            let legal: Vec<&NscCode> = space.legal(&prefix).collect();
            **legal.choose(rng).expect("every position has a legal action")
        } else {
            let ties = q.greedy_actions(&state, &prefix, space);
            *ties.choose(rng).expect("every position has a legal action")
        };
        codes.push(action);
        if action.is_terminal() {
            break;
        }
        prefix.push(&action);
        state = State::Layer(action);
    }
    Trajectory { codes }
}

/// Backward value update for one finished block.
pub fn update_from_trajectory(
    q: &mut QTable,
    trajectory: &Trajectory,
    terminal_reward: f64,
    space: &ActionSpace,
    shaping: Shaping,
) -> Result<(), AgentError> {
    if !terminal_reward.is_finite() {
        return Err(AgentError::NonFiniteReward(terminal_reward));
    }
    let codes = trajectory.codes();
    let t_len = codes.len();
    let state = |k: usize| if k == 0 { State::Start } else { State::Layer(codes[k - 1]) };
    let (alpha, gamma) = (q.alpha, q.gamma);

    let last = state(t_len - 1);
    let old = q.get(&last, &codes[t_len - 1]);
    q.set(last, codes[t_len - 1], (1.0 - alpha) * old + alpha * terminal_reward);

    if t_len < 2 {
        return Ok(());
    }
    let step_reward = match shaping {
        Shaping::Shaped => shaped_reward(terminal_reward, t_len),
        Shaping::Unshaped => 0.0,
    };
    // prefixes[k] = masking state after the first k codes
    let mut prefixes = Vec::with_capacity(t_len);
    let mut p = Prefix::new();
    prefixes.push(p.clone());
    for c in &codes[..t_len - 1] {
        p.push(c);
        prefixes.push(p.clone());
    }
    for t in (0..t_len - 1).rev() {
        let next = state(t + 1);
        let target = step_reward + gamma * q.max_value(&next, &prefixes[t + 1], space);
        let s = state(t);
        let old = q.get(&s, &codes[t]);
        q.set(s, codes[t], (1.0 - alpha) * old + alpha * target);
    }
    Ok(())
}

/// `count` uniform draws from memory, each followed by a trajectory update.
pub fn replay_pass<R: Rng + ?Sized>(
    q: &mut QTable,
    memory: &ReplayMemory,
    count: usize,
    space: &ActionSpace,
    shaping: Shaping,
    rng: &mut R,
) -> Result<(), AgentError> {
    if memory.is_empty() {
        return Err(AgentError::EmptyReplay);
    }
    for _ in 0..count {
        let rec = memory.sample(rng).expect("memory is non-empty");
        let traj = Trajectory { codes: rec.codes.clone() };
        update_from_trajectory(q, &traj, rec.reward, space, shaping)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LearningConfig {
    pub alpha: f64,
    pub gamma: f64,
    pub shaping: Shaping,
    pub replay_samples: usize,
    pub replay_capacity: Option<usize>,
    #[serde(default)]
    pub baseline: Baseline,
}

/// Offset subtracted from every replayed reward.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    None,
    /// Mean reward of the replay memory at the start of each pass.
    ReplayMean,
}

impl Default for LearningConfig {
    fn default() -> Self {
        LearningConfig { alpha: 0.01, gamma: 1.0, shaping: Shaping::Shaped, replay_samples: 64, replay_capacity: None, baseline: Baseline::None }
    }
}

impl LearningConfig {
    /// Settings under which the greedy policy improves on the surrogate within
    /// the default budget. With the defaults every observed reward is positive,
    /// so the terminal action (which collects the whole reward) wins the argmax
    /// at every state and greedy blocks collapse to the identity.
    pub fn centered() -> Self {
        LearningConfig { alpha: 0.3, baseline: Baseline::ReplayMean, ..Self::default() }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: [u8; 32],
    pub stream: u64,
    /// Decimal string; the value does not fit every JSON reader's integers.
    pub word_pos: String,
}

/// Q-table, replay memory and random stream owned by the master.
#[derive(Debug, Clone)]
pub struct Agent {
    pub q: QTable,
    pub space: ActionSpace,
    pub replay: ReplayMemory,
    pub config: LearningConfig,
    rng: ChaCha8Rng,
}

impl Agent {
    pub fn new(space: ActionSpace, config: LearningConfig, seed: u64) -> Result<Self, AgentError> {
        let replay = match config.replay_capacity {
            Some(cap) => ReplayMemory::with_capacity(cap),
            None => ReplayMemory::new(),
        };
        Ok(Agent { q: QTable::new(config.alpha, config.gamma)?, space, replay, config, rng: ChaCha8Rng::seed_from_u64(seed) })
    }

    pub fn sample_batch(&mut self, epsilon: f64, size: usize) -> Vec<Trajectory> {
        (0..size).map(|_| sample_trajectory(&self.q, epsilon, &self.space, &mut self.rng)).collect()
    }

    pub fn remember(&mut self, record: ReplayRecord) {
        self.replay.push(record);
    }

    /// Position of the random stream, for checkpoints.
    pub fn rng_state(&self) -> RngState {
        RngState { seed: self.rng.get_seed(), stream: self.rng.get_stream(), word_pos: self.rng.get_word_pos().to_string() }
    }

    pub fn restore_rng(&mut self, state: &RngState) -> Result<(), AgentError> {
        let pos: u128 = state.word_pos.parse().map_err(|_| AgentError::Checkpoint(format!("bad word position {:?}", state.word_pos)))?;
        let mut rng = ChaCha8Rng::from_seed(state.seed);
        rng.set_stream(state.stream);
        rng.set_word_pos(pos);
        self.rng = rng;
        Ok(())
    }

    pub fn replay(&mut self) -> Result<(), AgentError> {
        let offset = match self.config.baseline {
            Baseline::None => 0.0,
            Baseline::ReplayMean => self.replay.mean_reward().unwrap_or(0.0),
        };
        if self.replay.is_empty() {
            return Err(AgentError::EmptyReplay);
        }
        for _ in 0..self.config.replay_samples {
            let rec = self.replay.sample(&mut self.rng).expect("memory is non-empty");
            let traj = Trajectory { codes: rec.codes.clone() };
            update_from_trajectory(&mut self.q, &traj, rec.reward - offset, &self.space, self.config.shaping)?;
        }
        Ok(())
    }
}
