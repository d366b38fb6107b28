use std::collections::hash_map::DefaultHasher;
use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::hash::BuildHasherDefault;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use super::space::{ActionSpace, Prefix};
use super::AgentError;
use crate::nsc::{parse_block, NscCode};

type FixedMap<K, V> = HashMap<K, V, BuildHasherDefault<DefaultHasher>>;

/// Agent state: before the first layer, or the most recently chosen layer code.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum State {
    Start,
    Layer(NscCode),
}

impl State {
    pub fn is_terminal(&self) -> bool {
        matches!(self, State::Layer(c) if c.is_terminal())
    }
}

impl fmt::Display for State {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            State::Start => f.write_str("start"),
            State::Layer(c) => c.fmt(f),
        }
    }
}

impl FromStr for State {
    type Err = AgentError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        if s == "start" {
            return Ok(State::Start);
        }
        match parse_block(s).map_err(|e| AgentError::Checkpoint(e.to_string()))?.as_slice() {
            [c] => Ok(State::Layer(*c)),
            _ => Err(AgentError::Checkpoint(format!("expected one code in state {s:?}"))),
        }
    }
}

/// Tabular action values. Unseen pairs read as 0.
#[derive(Debug, Clone)]
pub struct QTable {
    pub alpha: f64,
    pub gamma: f64,
    rows: FixedMap<State, FixedMap<NscCode, f64>>,
}

impl QTable {
    pub fn new(alpha: f64, gamma: f64) -> Result<Self, AgentError> {
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(AgentError::Config(format!("learning rate {alpha} outside (0, 1]")));
        }
        if !(gamma > 0.0 && gamma <= 1.0) {
            return Err(AgentError::Config(format!("discount {gamma} outside (0, 1]")));
        }
        Ok(QTable { alpha, gamma, rows: FixedMap::default() })
    }

    pub fn get(&self, state: &State, action: &NscCode) -> f64 {
        self.rows.get(state).and_then(|r| r.get(action)).copied().unwrap_or(0.0)
    }

    pub fn set(&mut self, state: State, action: NscCode, value: f64) {
        debug_assert!(!state.is_terminal(), "terminal rows stay zero");
        debug_assert!(value.is_finite());
        self.rows.entry(state).or_default().insert(action, value);
    }

    pub fn len(&self) -> usize {
        self.rows.values().map(|r| r.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn iter(&self) -> impl Iterator<Item = (&State, &NscCode, f64)> {
        self.rows.iter().flat_map(|(s, r)| r.iter().map(move |(a, v)| (s, a, *v)))
    }

    /// Stored entries of a state that are legal after `prefix`.
    fn stored_legal<'a>(
        &'a self,
        state: &State,
        prefix: &'a Prefix,
        space: &'a ActionSpace,
    ) -> impl Iterator<Item = (&'a NscCode, f64)> + 'a {
        let position = prefix.position() as u8;
        self.rows
            .get(state)
            .into_iter()
            .flat_map(|r| r.iter())
            .filter(move |(a, _)| a.index == position && space.is_allowed(prefix, a))
            .map(|(a, v)| (a, *v))
    }

    fn has_unseen_legal(&self, stored: usize, prefix: &Prefix, space: &ActionSpace) -> bool {
        stored < space.legal_lower_bound(prefix) || stored < space.legal_count(prefix)
    }

    /// `max_a Q(state, a)` over the legal, unmasked actions after `prefix`.
    /// Terminal states read 0.
    pub fn max_value(&self, state: &State, prefix: &Prefix, space: &ActionSpace) -> f64 {
        if state.is_terminal() || prefix.position() > space.max_position() {
            return 0.0;
        }
        let mut best = f64::NEG_INFINITY;
        let mut stored = 0usize;
        for (_, v) in self.stored_legal(state, prefix, space) {
            stored += 1;
            best = best.max(v);
        }
        if (best < 0.0 || stored == 0) && self.has_unseen_legal(stored, prefix, space) {
            best = best.max(0.0);
        }
        if best == f64::NEG_INFINITY {
            0.0
        } else {
            best
        }
    }

    /// All maximizing legal actions, sorted.
    pub fn greedy_actions(&self, state: &State, prefix: &Prefix, space: &ActionSpace) -> Vec<NscCode> {
        let stored: Vec<(NscCode, f64)> = self.stored_legal(state, prefix, space).map(|(a, v)| (*a, v)).collect();
        let stored_max = stored.iter().map(|s| s.1).fold(f64::NEG_INFINITY, f64::max);
        let unseen = stored_max <= 0.0 && self.has_unseen_legal(stored.len(), prefix, space);
        let best = if unseen { stored_max.max(0.0) } else { stored_max };
        let mut ties: Vec<NscCode> = stored.iter().filter(|s| s.1 == best).map(|s| s.0).collect();
        if unseen && best == 0.0 {
            let row = self.rows.get(state);
            ties.extend(space.legal(prefix).filter(|a| row.is_none_or(|r| !r.contains_key(a))).copied());
        }
        ties.sort_unstable();
        ties
    }

    /// Checkpoint form: `"state;action" -> value`, sorted by key.
    pub fn to_checkpoint(&self) -> QCheckpoint {
        let entries = self.iter().map(|(s, a, v)| (format!("{s};{a}"), v)).collect();
        QCheckpoint { alpha: self.alpha, gamma: self.gamma, entries }
    }

    pub fn from_checkpoint(cp: &QCheckpoint) -> Result<Self, AgentError> {
        let mut q = QTable::new(cp.alpha, cp.gamma)?;
        for (key, &v) in &cp.entries {
            let (s, a) = key
                .split_once(';')
                .ok_or_else(|| AgentError::Checkpoint(format!("key {key:?} lacks a ';' separator")))?;
            let state: State = s.parse()?;
            let action = match State::from_str(a)? {
                State::Layer(c) => c,
                State::Start => return Err(AgentError::Checkpoint(format!("action in {key:?} is not a code"))),
            };
            if !v.is_finite() {
                return Err(AgentError::Checkpoint(format!("non-finite value for {key:?}")));
            }
            q.set(state, action, v);
        }
        Ok(q)
    }
}

impl PartialEq for QTable {
    fn eq(&self, other: &Self) -> bool {
        self.to_checkpoint() == other.to_checkpoint()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QCheckpoint {
    pub alpha: f64,
    pub gamma: f64,
    pub entries: BTreeMap<String, f64>,
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsc::OpType;

    #[test]
    fn unseen_reads_zero_and_checkpoint_round_trips() {
        let mut q = QTable::new(0.01, 1.0).unwrap();
        let a = NscCode::new(1, OpType::Convolution, 3, 0, 0);
        assert_eq!(q.get(&State::Start, &a), 0.0);
        q.set(State::Start, a, 0.25);
        q.set(State::Layer(a), NscCode::terminal(2), 0.5);
        let cp = q.to_checkpoint();
        assert!(cp.entries.contains_key("start;1,1,3,0,0"));
        assert!(cp.entries.contains_key("1,1,3,0,0;2,7,0,0,0"));
        let back = QTable::from_checkpoint(&cp).unwrap();
        assert_eq!(back, q);
        let json = serde_json::to_string(&cp).unwrap();
        assert_eq!(serde_json::from_str::<QCheckpoint>(&json).unwrap(), cp);
    }

    #[test]
    fn bad_hyperparameters() {
        assert!(QTable::new(0.0, 1.0).is_err());
        assert!(QTable::new(0.5, 1.5).is_err());
    }

    #[test]
    fn greedy_prefers_single_positive_action() {
        let space = ActionSpace::block();
        let mut q = QTable::new(0.01, 1.0).unwrap();
        let a = NscCode::new(1, OpType::MaxPooling, 3, 0, 0);
        q.set(State::Start, a, 1.0);
        let prefix = Prefix::new();
        assert_eq!(q.greedy_actions(&State::Start, &prefix, &space), vec![a]);
        assert_eq!(q.max_value(&State::Start, &prefix, &space), 1.0);
    }

    #[test]
    fn negative_values_lose_to_unseen() {
        let space = ActionSpace::block();
        let mut q = QTable::new(0.01, 1.0).unwrap();
        let a = NscCode::new(1, OpType::MaxPooling, 3, 0, 0);
        q.set(State::Start, a, -1.0);
        let prefix = Prefix::new();
        assert_eq!(q.max_value(&State::Start, &prefix, &space), 0.0);
        let ties = q.greedy_actions(&State::Start, &prefix, &space);
        assert_eq!(ties.len(), 8);
        assert!(!ties.contains(&a));
    }
}
