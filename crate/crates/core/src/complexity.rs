//! FLOPs, density and parameter counts for blocks and network plans.
//!
//! One multiply-accumulate counts as one FLOP. Only convolutions (and, for plans,
//! the classifier) contribute; pooling, ReLU, BatchNorm, Add and Concat are free.
//! Convolution parameters are `k*k*C_in*C_out` weights plus `2*C_out` for the
//! BatchNorm affine pair; there are no conv biases.

use serde::{Deserialize, Serialize};

use crate::graph::{build_block, BlockGraph, Dag, GraphError, NetworkPlan, PlanOp, ShapeState};
use crate::nsc::{NscCode, OpType};

/// Shape at which block complexity is measured for the reward.
pub const CANONICAL_BLOCK_INPUT: ShapeState = ShapeState::new(32, 32, 32);

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub flops: u64,
    /// Edge count over node count of the fully materialized DAG.
    pub density: f64,
    pub params: u64,
    pub edges: u64,
    pub nodes: u64,
}

impl ComplexityReport {
    /// Block complexity at the canonical 32x32 spatial, 32-channel input.
    pub fn of_block(codes: &[NscCode]) -> Result<Self, GraphError> {
        let g = build_block(codes, CANONICAL_BLOCK_INPUT.channels)?;
        Ok(Self::of_graph(&g, CANONICAL_BLOCK_INPUT))
    }

    pub fn of_graph(graph: &BlockGraph, input: ShapeState) -> Self {
        let g = graph.rescaled(input.channels);
        ComplexityReport {
            flops: count_flops(&g, input),
            density: density(&g),
            params: count_params(&g),
            edges: g.edges.len() as u64,
            nodes: g.nodes.len() as u64,
        }
    }

    pub fn of_plan(plan: &NetworkPlan) -> Result<Self, GraphError> {
        Ok(ComplexityReport {
            flops: plan_flops(plan)?,
            density: density(plan),
            params: plan_params(plan)?,
            edges: plan.edges.len() as u64,
            nodes: plan.nodes.len() as u64,
        })
    }

    pub fn exceeds_param_budget(&self, budget: u64) -> bool {
        self.params > budget
    }
}

/// Per-convolution MAC counts of a block, keyed by node id.
pub fn conv_flops(graph: &BlockGraph, input: ShapeState) -> Vec<(usize, u64)> {
    let g = if input.channels == graph.width { None } else { Some(graph.rescaled(input.channels)) };
    let g = g.as_ref().unwrap_or(graph);
    let hw = input.height * input.width;
    g.layers()
        .filter(|(_, c)| c.op == OpType::Convolution)
        .map(|(node, code)| {
            let c_in = g.nodes[code.pred1 as usize].channels;
            let k = code.kernel as u64;
            (node.id, k * k * c_in * node.channels * hw)
        })
        .collect()
}

/// Total MACs of the block's convolutions at the given input shape.
pub fn count_flops(graph: &BlockGraph, input: ShapeState) -> u64 {
    conv_flops(graph, input).iter().map(|(_, f)| f).sum()
}

/// Per-convolution parameter counts of a block, keyed by node id.
pub fn conv_params(graph: &BlockGraph) -> Vec<(usize, u64)> {
    graph
        .layers()
        .filter(|(_, c)| c.op == OpType::Convolution)
        .map(|(node, code)| {
            let c_in = graph.nodes[code.pred1 as usize].channels;
            let k = code.kernel as u64;
            (node.id, k * k * c_in * node.channels + 2 * node.channels)
        })
        .collect()
}

pub fn count_params(graph: &BlockGraph) -> u64 {
    conv_params(graph).iter().map(|(_, p)| p).sum()
}

/// Edges divided by nodes, input and implicit output included.
pub fn density<G: Dag + ?Sized>(graph: &G) -> f64 {
    graph.edge_list().len() as f64 / graph.node_count() as f64
}

fn conv_cost(k: u64, c_in: u64, out: ShapeState) -> (u64, u64) {
    let flops = k * k * c_in * out.channels * out.height * out.width;
    let params = k * k * c_in * out.channels + 2 * out.channels;
    (flops, params)
}

fn plan_costs(plan: &NetworkPlan) -> Result<Vec<(u64, u64)>, GraphError> {
    let block_graph = build_block(&plan.block, 1)?;
    let mut costs = Vec::with_capacity(plan.nodes.len());
    for node in &plan.nodes {
        let preds = plan.predecessors(node.id);
        let input = preds.first().map(|&p| plan.nodes[p].shape);
        let cost = match (&node.op, input) {
            (PlanOp::Conv { kernel, .. }, Some(inp)) => conv_cost(*kernel as u64, inp.channels, node.shape),
            (PlanOp::Projection | PlanOp::Adapter { .. }, Some(inp)) => conv_cost(1, inp.channels, node.shape),
            (PlanOp::Block { width }, Some(inp)) => {
                let shape = inp.with_channels(*width);
                let g = block_graph.rescaled(*width);
                (count_flops(&g, shape), count_params(&g))
            }
            (PlanOp::Linear, Some(inp)) => {
                let (i, o) = (inp.channels, node.shape.channels);
                (i * o, i * o + o)
            }
            (PlanOp::Input, _) => (0, 0),
            (_, Some(_)) => (0, 0),
            (op, None) => {
                return Err(GraphError::Structure(format!("plan node {} ({op:?}) has no input", node.id)));
            }
        };
        costs.push(cost);
    }
    Ok(costs)
}

pub fn plan_flops(plan: &NetworkPlan) -> Result<u64, GraphError> {
    Ok(plan_costs(plan)?.iter().map(|c| c.0).sum())
}

pub fn plan_params(plan: &NetworkPlan) -> Result<u64, GraphError> {
    Ok(plan_costs(plan)?.iter().map(|c| c.1).sum())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{stack_network, Template};
    use crate::nsc::{NscCode, OpType};

    fn c(i: u8, op: OpType, k: u16, p1: u8, p2: u8) -> NscCode {
        NscCode::new(i, op, k, p1, p2)
    }

    // independent nested-loop MAC count for one convolution
    fn loop_macs(k: u64, c_in: u64, c_out: u64, h: u64, w: u64) -> u64 {
        let mut n = 0;
        for _ in 0..h * w {
            for _ in 0..c_out {
                for _ in 0..c_in {
                    n += k * k;
                }
            }
        }
        n
    }

    #[test]
    fn single_conv_flops() {
        let g = build_block(&[c(1, OpType::Convolution, 3, 0, 0), NscCode::terminal(2)], 32).unwrap();
        let flops = count_flops(&g, ShapeState::new(32, 32, 32));
        assert_eq!(flops, loop_macs(3, 32, 32, 32, 32));
        assert_eq!(flops, 9_437_184);
    }

    #[test]
    fn parallel_pointwise_flops() {
        let codes = [c(1, OpType::Convolution, 1, 0, 0), c(2, OpType::Convolution, 1, 0, 0), NscCode::terminal(3)];
        let g = build_block(&codes, 16).unwrap();
        let flops = count_flops(&g, ShapeState::new(8, 8, 16));
        assert_eq!(flops, 2 * loop_macs(1, 16, 16, 8, 8));
        assert_eq!(flops, 32_768);
    }

    #[test]
    fn identity_block_is_free() {
        let g = build_block(&[NscCode::terminal(1)], 32).unwrap();
        assert_eq!(count_flops(&g, CANONICAL_BLOCK_INPUT), 0);
        assert_eq!(count_params(&g), 0);
    }

    #[test]
    fn conv_params_include_bn() {
        let (_, params) = conv_cost(3, 32, ShapeState::new(1, 1, 64));
        assert_eq!(params, 18_560);
    }

    #[test]
    fn chain_density() {
        let g = build_block(&[c(1, OpType::Identity, 0, 0, 0), NscCode::terminal(2)], 8).unwrap();
        assert_eq!(density(&g), 2.0 / 3.0);
    }

    #[test]
    fn shortcut_block_density() {
        let codes = [
            c(1, OpType::Convolution, 3, 0, 0),
            c(2, OpType::Convolution, 3, 1, 0),
            c(3, OpType::ElementalAdd, 0, 0, 2),
            NscCode::terminal(4),
        ];
        // hand count: in->1, 1->2, in->3, 2->3, 3->out over {in, 1, 2, 3, out}
        let g = build_block(&codes, 32).unwrap();
        assert_eq!(density(&g), 5.0 / 5.0);
    }

    #[test]
    fn doubling_channels_quadruples_flops() {
        let codes = [c(1, OpType::Convolution, 3, 0, 0), c(2, OpType::Convolution, 5, 1, 0), NscCode::terminal(3)];
        let g = build_block(&codes, 16).unwrap();
        let a = count_flops(&g, ShapeState::new(16, 16, 16));
        let b = count_flops(&g, ShapeState::new(16, 16, 32));
        assert_eq!(b, 4 * a);
    }

    #[test]
    fn plan_counts_head_and_budget() {
        let g = build_block(&[c(1, OpType::Convolution, 3, 0, 0), NscCode::terminal(2)], 32).unwrap();
        let plan = stack_network(&g, &Template::cifar(), 1).unwrap();
        let report = ComplexityReport::of_plan(&plan).unwrap();
        // stem 3x3 3->32, blocks at 32/64/128, projections 32->64 and 64->128, linear 128->100
        let expected_params = (9 * 3 * 32 + 64)
            + (9 * 32 * 32 + 64)
            + (32 * 64 + 128)
            + (9 * 64 * 64 + 128)
            + (64 * 128 + 256)
            + (9 * 128 * 128 + 256)
            + (128 * 100 + 100);
        assert_eq!(report.params, expected_params);
        assert!(report.exceeds_param_budget(expected_params - 1));
        assert!(!report.exceeds_param_budget(expected_params));
    }
}
