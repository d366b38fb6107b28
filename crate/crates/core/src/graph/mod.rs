//! Symbolic block DAGs and full-network plans built from code lists.

pub(crate) mod block;
mod connection;
mod network;

pub use block::{build_block, BlockGraph, BlockNode, NodeKind, Primitive};
pub use connection::build_connection_network;
pub use network::{stack_network, NetworkPlan, PlanNode, PlanOp, PoolKind, Stage, Template};

use std::cmp::Reverse;
use std::collections::BinaryHeap;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum GraphError {
    #[error("shape error: ElementalAdd node {node} joins node {left} ({left_channels} channels) with node {right} ({right_channels} channels)")]
    AddChannelMismatch {
        node: usize,
        left: usize,
        right: usize,
        left_channels: u64,
        right_channels: u64,
    },
    #[error("structure error: {0}")]
    Structure(String),
    #[error("limit error: {0}")]
    Limit(String),
    #[error("unknown network template {0:?}")]
    UnknownTemplate(String),
}

/// Spatial extent and channel count of a tensor flowing along an edge.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ShapeState {
    pub height: u64,
    pub width: u64,
    pub channels: u64,
}

impl ShapeState {
    pub const fn new(height: u64, width: u64, channels: u64) -> Self {
        ShapeState { height, width, channels }
    }

    pub fn with_channels(self, channels: u64) -> Self {
        ShapeState { channels, ..self }
    }

    /// Output of a stride-`stride` window with "same" padding.
    pub fn strided(self, stride: u64) -> Self {
        ShapeState { height: self.height.div_ceil(stride), width: self.width.div_ceil(stride), ..self }
    }

    pub fn spatial(&self) -> (u64, u64) {
        (self.height, self.width)
    }
}

/// Anything with numbered nodes and forward edges.
pub trait Dag {
    fn node_count(&self) -> usize;
    fn edge_list(&self) -> &[(usize, usize)];
}

impl Dag for BlockGraph {
    fn node_count(&self) -> usize {
        self.nodes.len()
    }
    fn edge_list(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

impl Dag for NetworkPlan {
    fn node_count(&self) -> usize {
        self.nodes.len()
    }
    fn edge_list(&self) -> &[(usize, usize)] {
        &self.edges
    }
}

/// Kahn's algorithm with ties broken by smallest node id.
pub fn topo_order<G: Dag + ?Sized>(graph: &G) -> Vec<usize> {
    let n = graph.node_count();
    let mut indegree = vec![0usize; n];
    let mut succ = vec![Vec::new(); n];
    for &(a, b) in graph.edge_list() {
        indegree[b] += 1;
        succ[a].push(b);
    }
    let mut ready: BinaryHeap<Reverse<usize>> =
        (0..n).filter(|&i| indegree[i] == 0).map(Reverse).collect();
    let mut order = Vec::with_capacity(n);
    while let Some(Reverse(v)) = ready.pop() {
        order.push(v);
        for &s in &succ[v] {
            indegree[s] -= 1;
            if indegree[s] == 0 {
                ready.push(Reverse(s));
            }
        }
    }
    order
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nsc::{NscCode, OpType};

    #[test]
    fn chain_order() {
        let codes = [
            NscCode::new(1, OpType::Convolution, 3, 0, 0),
            NscCode::new(2, OpType::Convolution, 3, 1, 0),
            NscCode::new(3, OpType::Convolution, 3, 2, 0),
            NscCode::terminal(4),
        ];
        let g = build_block(&codes, 32).unwrap();
        assert_eq!(topo_order(&g), vec![0, 1, 2, 3, 4]);
    }

    #[test]
    fn branches_precede_their_concat() {
        // input feeds two convolutions that are concatenated
        let codes = [
            NscCode::new(1, OpType::Convolution, 1, 0, 0),
            NscCode::new(2, OpType::Convolution, 3, 0, 0),
            NscCode::new(3, OpType::Concat, 0, 1, 2),
            NscCode::terminal(4),
        ];
        let g = build_block(&codes, 16).unwrap();
        let order = topo_order(&g);
        let pos = |id| order.iter().position(|&x| x == id).unwrap();
        assert!(pos(1) < pos(3) && pos(2) < pos(3));
    }

    #[test]
    fn strided_shape_rounds_up() {
        let s = ShapeState::new(7, 7, 8).strided(2);
        assert_eq!(s, ShapeState::new(4, 4, 8));
    }
}
