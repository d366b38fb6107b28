use serde::{Deserialize, Serialize};

use super::AgentError;

/// Piecewise-constant exploration schedule: `(epsilon, iterations)` stages.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpsilonSchedule {
    pub stages: Vec<(f64, u32)>,
}

impl EpsilonSchedule {
    pub fn new(stages: Vec<(f64, u32)>) -> Result<Self, AgentError> {
        if stages.is_empty() {
            return Err(AgentError::Config("epsilon schedule has no stages".into()));
        }
        for (i, &(eps, n)) in stages.iter().enumerate() {
            if !(0.0..=1.0).contains(&eps) {
                return Err(AgentError::Config(format!("epsilon {eps} outside [0, 1]")));
            }
            if n == 0 {
                return Err(AgentError::Config(format!("stage {i} has zero iterations")));
            }
            if i > 0 && eps >= stages[i - 1].0 {
                return Err(AgentError::Config("epsilons must strictly decrease".into()));
            }
        }
        Ok(EpsilonSchedule { stages })
    }

    /// Block search: 178 iterations decaying from 1.0 to 0.1.
    pub fn block_search() -> Self {
        let iters = [95, 7, 7, 7, 10, 10, 10, 10, 10, 12];
        Self::from_counts(&iters)
    }

    /// Connection search: 46 iterations over the same epsilon levels.
    pub fn connection_search() -> Self {
        let iters = [24, 2, 2, 2, 3, 3, 3, 2, 2, 3];
        Self::from_counts(&iters)
    }

    fn from_counts(iters: &[u32; 10]) -> Self {
        const LEVELS: [f64; 10] = [1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1];
        let stages = LEVELS.iter().copied().zip(iters.iter().copied()).collect();
        Self::new(stages).expect("built-in schedule is valid")
    }

    pub fn total_iterations(&self) -> u32 {
        self.stages.iter().map(|s| s.1).sum()
    }

    /// Epsilon at a 1-based iteration.
    pub fn epsilon_at(&self, iteration: u32) -> Result<f64, AgentError> {
        if iteration == 0 {
            return Err(AgentError::IterationOutOfRange { iteration, total: self.total_iterations() });
        }
        let mut left = iteration;
        for &(eps, n) in &self.stages {
            if left <= n {
                return Ok(eps);
            }
            left -= n;
        }
        Err(AgentError::IterationOutOfRange { iteration, total: self.total_iterations() })
    }

    /// The per-iteration epsilon sequence.
    pub fn trace(&self) -> Vec<f64> {
        self.stages.iter().flat_map(|&(e, n)| std::iter::repeat_n(e, n as usize)).collect()
    }
}

impl Default for EpsilonSchedule {
    fn default() -> Self {
        Self::block_search()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_lookups() {
        let s = EpsilonSchedule::block_search();
        assert_eq!(s.epsilon_at(1).unwrap(), 1.0);
        assert_eq!(s.epsilon_at(95).unwrap(), 1.0);
        assert_eq!(s.epsilon_at(96).unwrap(), 0.9);
        assert_eq!(s.epsilon_at(178).unwrap(), 0.1);
        assert!(s.epsilon_at(0).is_err());
        assert!(s.epsilon_at(179).is_err());
    }

    #[test]
    fn totals() {
        assert_eq!(EpsilonSchedule::block_search().total_iterations(), 178);
        assert_eq!(EpsilonSchedule::block_search().total_iterations() * 64, 11_392);
        assert_eq!(EpsilonSchedule::connection_search().total_iterations(), 46);
        assert_eq!(EpsilonSchedule::connection_search().total_iterations() * 64, 2_944);
    }

    #[test]
    fn rejects_bad_stages() {
        assert!(EpsilonSchedule::new(vec![]).is_err());
        assert!(EpsilonSchedule::new(vec![(0.5, 1), (0.5, 1)]).is_err());
        assert!(EpsilonSchedule::new(vec![(1.5, 1)]).is_err());
        assert!(EpsilonSchedule::new(vec![(1.0, 0)]).is_err());
    }

    #[test]
    fn config_file_form() {
        let s = EpsilonSchedule::block_search();
        let json = serde_json::to_string(&s).unwrap();
        assert!(json.starts_with("{\"stages\":[[1.0,95],[0.9,7]"));
        assert_eq!(serde_json::from_str::<EpsilonSchedule>(&json).unwrap(), s);
    }
}
