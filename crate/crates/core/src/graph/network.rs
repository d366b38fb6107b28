use serde::{Deserialize, Serialize};

use super::{BlockGraph, GraphError, ShapeState};
use crate::nsc::NscCode;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PoolKind {
    Max,
    Average,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum PlanOp {
    Input,
    /// Stem convolution; `pre_activation` marks a ReLU -> Conv -> BN cell.
    Conv { kernel: u16, stride: u64, pre_activation: bool },
    Pool { kind: PoolKind, kernel: u16, stride: u64 },
    /// 1x1 pre-activation cell bringing a block's input to its width.
    Projection,
    Block { width: u64 },
    /// 1x1 convolution (strided when resolutions differ) aligning a skip edge.
    Adapter { stride: u64 },
    Identity,
    Add,
    Concat,
    GlobalAvgPool,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PlanNode {
    pub id: usize,
    #[serde(flatten)]
    pub op: PlanOp,
    /// Output shape of this node.
    pub shape: ShapeState,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Stage {
    pub repeats: u32,
    pub width: u64,
}

/// A whole network: explicit DAG plus, for stacked plans, the stage summary.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct NetworkPlan {
    pub template: String,
    pub input: ShapeState,
    pub classes: u64,
    /// Codes of the block every `Block` node instantiates.
    pub block: Vec<NscCode>,
    /// Empty for connection-search plans.
    pub stages: Vec<Stage>,
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<(usize, usize)>,
}

impl NetworkPlan {
    pub fn predecessors(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    pub fn count(&self, pred: impl Fn(&PlanOp) -> bool) -> usize {
        self.nodes.iter().filter(|n| pred(&n.op)).count()
    }

    pub fn block_instances(&self) -> usize {
        self.count(|op| matches!(op, PlanOp::Block { .. }))
    }

    pub fn pooling_count(&self) -> usize {
        self.count(|op| matches!(op, PlanOp::Pool { .. }))
    }

    pub fn adapter_count(&self) -> usize {
        self.count(|op| matches!(op, PlanOp::Adapter { .. }))
    }

    /// Shape entering the global pooling head.
    pub fn feature_shape(&self) -> Option<ShapeState> {
        let head = self.nodes.iter().find(|n| matches!(n.op, PlanOp::GlobalAvgPool))?;
        let preds = self.predecessors(head.id);
        let first = self.nodes[*preds.first()?].shape;
        Some(first.with_channels(head.shape.channels))
    }
}

/// Fixed stem/head silhouette a block is stacked into.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Template {
    pub name: String,
    pub input: ShapeState,
    pub base_width: u64,
    pub stages: usize,
    pub classes: u64,
}

impl Template {
    /// 32x32 input, 3x3 pre-activation stem, three stages.
    pub fn cifar() -> Self {
        Template { name: "cifar".into(), input: ShapeState::new(32, 32, 3), base_width: 32, stages: 3, classes: 100 }
    }

    /// 224x224 input, strided stem plus max-pool, four stages.
    pub fn imagenet() -> Self {
        Template {
            name: "imagenet".into(),
            input: ShapeState::new(224, 224, 3),
            base_width: 64,
            stages: 4,
            classes: 1000,
        }
    }

    pub fn from_name(name: &str) -> Result<Self, GraphError> {
        match name {
            "cifar" => Ok(Self::cifar()),
            "imagenet" => Ok(Self::imagenet()),
            other => Err(GraphError::UnknownTemplate(other.to_string())),
        }
    }

    pub fn with_width(mut self, width: u64) -> Self {
        self.base_width = width;
        self
    }
}

#[derive(Debug, Default)]
pub(super) struct PlanBuilder {
    pub nodes: Vec<PlanNode>,
    pub edges: Vec<(usize, usize)>,
}

impl PlanBuilder {
    pub fn push(&mut self, op: PlanOp, shape: ShapeState, inputs: &[usize]) -> usize {
        let id = self.nodes.len();
        self.nodes.push(PlanNode { id, op, shape });
        self.edges.extend(inputs.iter().map(|&p| (p, id)));
        id
    }

    pub fn shape(&self, id: usize) -> ShapeState {
        self.nodes[id].shape
    }

    /// Stem for the given template; returns the node the first block reads.
    pub fn stem(&mut self, template: &Template) -> usize {
        let input = self.push(PlanOp::Input, template.input, &[]);
        let w = template.base_width;
        match template.name.as_str() {
            "imagenet" => {
                let shape = template.input.strided(2).with_channels(w);
                let conv = self.push(PlanOp::Conv { kernel: 3, stride: 2, pre_activation: false }, shape, &[input]);
                self.push(PlanOp::Pool { kind: PoolKind::Max, kernel: 3, stride: 2 }, shape.strided(2), &[conv])
            }
            _ => {
                let shape = template.input.with_channels(w);
                self.push(PlanOp::Conv { kernel: 3, stride: 1, pre_activation: true }, shape, &[input])
            }
        }
    }

    pub fn pool(&mut self, kind: PoolKind, kernel: u16, from: usize) -> usize {
        let shape = self.shape(from).strided(2);
        self.push(PlanOp::Pool { kind, kernel, stride: 2 }, shape, &[from])
    }

    /// One block instance at `width`, preceded by a projection when the incoming
    /// channel count differs from the width.
    pub fn block(&mut self, block: &BlockGraph, width: u64, from: usize) -> usize {
        let mut src = from;
        let in_shape = self.shape(from);
        if in_shape.channels != width {
            src = self.push(PlanOp::Projection, in_shape.with_channels(width), &[from]);
        }
        let out_channels = block.output_channels() / block.width * width;
        self.push(PlanOp::Block { width }, in_shape.with_channels(out_channels), &[src])
    }

    /// Global pooling over every given feature map, then the classifier.
    pub fn head(&mut self, features: &[usize], classes: u64) {
        let channels = features.iter().map(|&f| self.shape(f).channels).sum();
        let gap = self.push(PlanOp::GlobalAvgPool, ShapeState::new(1, 1, channels), features);
        self.push(PlanOp::Linear, ShapeState::new(1, 1, classes), &[gap]);
    }
}

/// Stacks `repeats` copies of the block per stage; every stage after the first
/// is entered through a stride-2 max-pool and doubles the width.
pub fn stack_network(block: &BlockGraph, template: &Template, repeats: u32) -> Result<NetworkPlan, GraphError> {
    if repeats == 0 {
        return Err(GraphError::Structure("block repetitions must be at least 1".into()));
    }
    if template.stages == 0 || template.base_width == 0 {
        return Err(GraphError::Structure("template needs at least one stage and a positive width".into()));
    }
    let mut b = PlanBuilder::default();
    let mut cur = b.stem(template);
    let mut stages = Vec::with_capacity(template.stages);
    for s in 0..template.stages {
        let width = template.base_width << s;
        if s > 0 {
            cur = b.pool(PoolKind::Max, 3, cur);
        }
        for _ in 0..repeats {
            cur = b.block(block, width, cur);
        }
        stages.push(Stage { repeats, width });
    }
    b.head(&[cur], template.classes);
    Ok(NetworkPlan {
        template: template.name.clone(),
        input: template.input,
        classes: template.classes,
        block: block.codes.clone(),
        stages,
        nodes: b.nodes,
        edges: b.edges,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_block;
    use crate::nsc::{NscCode, OpType};

    fn conv_block() -> BlockGraph {
        build_block(&[NscCode::new(1, OpType::Convolution, 3, 0, 0), NscCode::terminal(2)], 32).unwrap()
    }

    #[test]
    fn cifar_n4() {
        let plan = stack_network(&conv_block(), &Template::cifar().with_width(32), 4).unwrap();
        assert_eq!(plan.block_instances(), 12);
        assert_eq!(plan.stages.iter().map(|s| s.width).collect::<Vec<_>>(), vec![32, 64, 128]);
        assert_eq!(plan.pooling_count(), 2);
        assert_eq!(plan.feature_shape().unwrap(), ShapeState::new(8, 8, 128));
    }

    #[test]
    fn one_block_per_stage() {
        let plan = stack_network(&conv_block(), &Template::cifar(), 1).unwrap();
        assert_eq!(plan.block_instances(), 3);
    }

    #[test]
    fn imagenet_has_four_stages() {
        let plan = stack_network(&conv_block(), &Template::imagenet(), 2).unwrap();
        assert_eq!(plan.block_instances(), 8);
        assert_eq!(plan.feature_shape().unwrap().spatial(), (7, 7));
    }

    #[test]
    fn errors() {
        assert!(matches!(Template::from_name("mnist"), Err(GraphError::UnknownTemplate(_))));
        assert!(stack_network(&conv_block(), &Template::cifar(), 0).is_err());
    }

    #[test]
    fn identity_block_plan_only_adds_stage_projections() {
        let id = build_block(&[NscCode::terminal(1)], 32).unwrap();
        let plan = stack_network(&id, &Template::cifar(), 2).unwrap();
        // the only channel changes are the projections entering stages 2 and 3
        assert_eq!(plan.count(|op| matches!(op, PlanOp::Projection)), 2);
        assert_eq!(plan.count(|op| matches!(op, PlanOp::Conv { .. })), 1);
        for n in &plan.nodes {
            if let PlanOp::Block { width } = n.op {
                let preds = plan.predecessors(n.id);
                assert_eq!(plan.nodes[preds[0]].shape, n.shape);
                assert_eq!(n.shape.channels, width);
            }
        }
    }
}
