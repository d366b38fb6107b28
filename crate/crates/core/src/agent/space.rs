use serde::{Deserialize, Serialize};

use crate::graph::block::output_multiple;
use crate::nsc::{enumerate_actions, CodeSpaceLimits, NscCode, NscError, OpType};

/// Which structure the codes describe; decides the trajectory-level masks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpaceKind {
    /// Layers of a block; Adds over unequal channel counts are masked.
    Block,
    /// Block instances wired into a network; pooling is capped per trajectory.
    Connection,
}

/// The finite action sets `A(s)` for every position, plus masking.
#[derive(Debug, Clone)]
pub struct ActionSpace {
    limits: CodeSpaceLimits,
    kind: SpaceKind,
    /// `actions[p - 1]` holds the sorted legal codes at position `p`.
    actions: Vec<Vec<NscCode>>,
    /// Per position, how many actions no mask can ever remove.
    unmaskable: Vec<usize>,
}

impl ActionSpace {
    pub fn new(limits: CodeSpaceLimits, kind: SpaceKind) -> Result<Self, NscError> {
        limits.check()?;
        let mut actions = Vec::with_capacity(limits.max_layer_index as usize);
        let mut unmaskable = Vec::with_capacity(limits.max_layer_index as usize);
        for p in 1..=limits.max_layer_index as u32 {
            let list = enumerate_actions(p, &limits)?;
            unmaskable.push(list.iter().filter(|c| !Self::maskable(kind, c)).count());
            actions.push(list);
        }
        Ok(ActionSpace { limits, kind, actions, unmaskable })
    }

    pub fn block() -> Self {
        Self::new(CodeSpaceLimits::block_search(), SpaceKind::Block).expect("default limits are valid")
    }

    pub fn connection() -> Self {
        Self::new(CodeSpaceLimits::connection_search(), SpaceKind::Connection).expect("default limits are valid")
    }

    fn maskable(kind: SpaceKind, code: &NscCode) -> bool {
        match kind {
            SpaceKind::Block => code.op == OpType::ElementalAdd,
            SpaceKind::Connection => code.op.is_pooling(),
        }
    }

    pub fn limits(&self) -> &CodeSpaceLimits {
        &self.limits
    }

    pub fn kind(&self) -> SpaceKind {
        self.kind
    }

    pub fn max_position(&self) -> u32 {
        self.limits.max_layer_index as u32
    }

    /// Unmasked legal codes at a position.
    pub fn actions_at(&self, position: u32) -> &[NscCode] {
        &self.actions[position as usize - 1]
    }

    pub fn is_allowed(&self, prefix: &Prefix, action: &NscCode) -> bool {
        match self.kind {
            SpaceKind::Block => match action.op {
                OpType::ElementalAdd => {
                    let m = |p: u8| prefix.multiples.get(p as usize);
                    m(action.pred1).is_some() && m(action.pred1) == m(action.pred2)
                }
                _ => true,
            },
            SpaceKind::Connection => match (action.op.is_pooling(), self.limits.max_pooling_layers) {
                (true, Some(cap)) => prefix.pools < cap as u32,
                _ => true,
            },
        }
    }

    /// Legal, unmasked actions after `prefix`.
    pub fn legal<'a>(&'a self, prefix: &'a Prefix) -> impl Iterator<Item = &'a NscCode> + 'a {
        self.actions_at(prefix.position()).iter().filter(move |a| self.is_allowed(prefix, a))
    }

    /// A cheap lower bound on the number of legal actions after `prefix`.
    pub fn legal_lower_bound(&self, prefix: &Prefix) -> usize {
        self.unmaskable[prefix.position() as usize - 1]
    }

    pub fn legal_count(&self, prefix: &Prefix) -> usize {
        self.legal(prefix).count()
    }
}

/// What masking needs to know about the codes chosen so far.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Prefix {
    /// Channel multiple of each node; index 0 is the block input.
    multiples: Vec<u64>,
    pools: u32,
}

impl Default for Prefix {
    fn default() -> Self {
        Prefix::new()
    }
}

impl Prefix {
    pub fn new() -> Self {
        Prefix { multiples: vec![1], pools: 0 }
    }

    /// Position of the next code (1-based).
    pub fn position(&self) -> u32 {
        self.multiples.len() as u32
    }

    pub fn push(&mut self, code: &NscCode) {
        let first = self.multiples.get(code.pred1 as usize).copied().unwrap_or(1);
        let second = self.multiples.get(code.pred2 as usize).copied().unwrap_or(0);
        // masked Adds never reach here; fall back to the first input's width
        let m = output_multiple(code.op, first, second).unwrap_or(first);
        self.multiples.push(m);
        if code.op.is_pooling() {
            self.pools += 1;
        }
    }

    pub fn from_codes(codes: &[NscCode]) -> Self {
        let mut p = Prefix::new();
        for c in codes.iter().take_while(|c| !c.is_terminal()) {
            p.push(c);
        }
        p
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsc::OpType;

    #[test]
    fn add_mask_tracks_concat_widths() {
        let space = ActionSpace::block();
        let mut prefix = Prefix::new();
        prefix.push(&NscCode::new(1, OpType::Convolution, 3, 0, 0));
        prefix.push(&NscCode::new(2, OpType::Concat, 0, 0, 1));
        let ok = NscCode::new(3, OpType::ElementalAdd, 0, 0, 1);
        let bad = NscCode::new(3, OpType::ElementalAdd, 0, 2, 1);
        assert!(space.is_allowed(&prefix, &ok));
        assert!(!space.is_allowed(&prefix, &bad));
        assert_eq!(space.legal_count(&prefix), space.actions_at(3).len() - 3);
        assert!(space.legal_lower_bound(&prefix) <= space.legal_count(&prefix));
    }

    #[test]
    fn default_prefix_holds_the_block_input_and_stray_preds_are_rejected() {
        let space = ActionSpace::block();
        assert_eq!(Prefix::default(), Prefix::new());
        assert_eq!(Prefix::default().position(), 1);
        let mut p = Prefix::new();
        p.push(&NscCode::new(1, OpType::Convolution, 3, 0, 0));
        assert!(!space.is_allowed(&p, &NscCode::new(2, OpType::ElementalAdd, 0, 1, 5)));
        assert!(!space.is_allowed(&p, &NscCode::new(2, OpType::ElementalAdd, 0, 9, 0)));
    }

    #[test]
    fn pooling_cap_in_connection_space() {
        let space = ActionSpace::connection();
        let mut prefix = Prefix::new();
        for i in 1..=5u8 {
            prefix.push(&NscCode::new(i, OpType::MaxPooling, 1, i - 1, 0));
        }
        assert!(space.legal(&prefix).all(|a| !a.op.is_pooling()));
        assert!(space.legal(&prefix).any(|a| a.op == OpType::Convolution));
    }
}
