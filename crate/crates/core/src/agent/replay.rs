use std::collections::VecDeque;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::nsc::NscCode;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReplayRecord {
    pub codes: Vec<NscCode>,
    pub reward: f64,
}

/// Block/reward memory. Unbounded unless a capacity is set, in which case the
/// oldest records are evicted first.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ReplayMemory {
    records: VecDeque<ReplayRecord>,
    capacity: Option<usize>,
}

impl ReplayMemory {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with_capacity(capacity: usize) -> Self {
        ReplayMemory { records: VecDeque::new(), capacity: Some(capacity.max(1)) }
    }

    pub fn push(&mut self, record: ReplayRecord) {
        if let Some(cap) = self.capacity {
            while self.records.len() >= cap {
                self.records.pop_front();
            }
        }
        self.records.push_back(record);
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> impl Iterator<Item = &ReplayRecord> {
        self.records.iter()
    }

    pub fn mean_reward(&self) -> Option<f64> {
        if self.records.is_empty() {
            return None;
        }
        Some(self.records.iter().map(|r| r.reward).sum::<f64>() / self.records.len() as f64)
    }

    /// Uniform draw with replacement.
    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> Option<&ReplayRecord> {
        if self.records.is_empty() {
            return None;
        }
        let i = rng.gen_range(0..self.records.len());
        self.records.get(i)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn fifo_eviction() {
        let mut m = ReplayMemory::with_capacity(2);
        for r in 0..3 {
            m.push(ReplayRecord { codes: vec![NscCode::terminal(1)], reward: r as f64 });
        }
        let rewards: Vec<f64> = m.records().map(|r| r.reward).collect();
        assert_eq!(rewards, vec![1.0, 2.0]);
    }
}
