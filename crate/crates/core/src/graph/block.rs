use serde::{Deserialize, Serialize};

use super::GraphError;
use crate::nsc::{NscCode, OpType};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NodeKind {
    Input,
    Layer { code: NscCode },
    /// Implicit concatenation of every successor-less node.
    Output,
}

/// Primitive operations after expansion; convolutions become ReLU -> Conv -> BatchNorm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Primitive {
    Relu,
    Conv { kernel: u16 },
    BatchNorm,
    MaxPool { kernel: u16 },
    AvgPool { kernel: u16 },
    Identity,
    Add,
    Concat,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockNode {
    pub id: usize,
    #[serde(flatten)]
    pub kind: NodeKind,
    pub channels: u64,
    pub primitives: Vec<Primitive>,
}

/// A block DAG. Node 0 is the block input, nodes `1..=n` are the layers in code
/// order (node id = layer index) and the last node is the output concat.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockGraph {
    /// Channel width `w` every convolution in the block emits.
    pub width: u64,
    pub codes: Vec<NscCode>,
    pub nodes: Vec<BlockNode>,
    pub edges: Vec<(usize, usize)>,
}

impl BlockGraph {
    pub fn input_id(&self) -> usize {
        0
    }

    pub fn output_id(&self) -> usize {
        self.nodes.len() - 1
    }

    pub fn layer_count(&self) -> usize {
        self.nodes.len() - 2
    }

    pub fn layers(&self) -> impl Iterator<Item = (&BlockNode, &NscCode)> {
        self.nodes.iter().filter_map(|n| match &n.kind {
            NodeKind::Layer { code } => Some((n, code)),
            _ => None,
        })
    }

    pub fn output_channels(&self) -> u64 {
        self.nodes[self.output_id()].channels
    }

    /// Nodes feeding the output concat.
    pub fn leaves(&self) -> Vec<usize> {
        let out = self.output_id();
        self.edges.iter().filter(|e| e.1 == out).map(|e| e.0).collect()
    }

    pub fn predecessors(&self, id: usize) -> Vec<usize> {
        self.edges.iter().filter(|e| e.1 == id).map(|e| e.0).collect()
    }

    pub fn is_identity(&self) -> bool {
        self.layer_count() == 0
    }

    /// Sum of expanded primitives over all layer nodes.
    pub fn primitive_count(&self) -> usize {
        self.layers().map(|(n, _)| n.primitives.len()).sum()
    }

    /// Same block at another width.
    pub fn rescaled(&self, width: u64) -> BlockGraph {
        let mut g = self.clone();
        for n in &mut g.nodes {
            n.channels = n.channels / self.width * width;
        }
        g.width = width;
        g
    }
}

fn primitives(code: &NscCode) -> Vec<Primitive> {
    match code.op {
        OpType::Convolution => vec![Primitive::Relu, Primitive::Conv { kernel: code.kernel }, Primitive::BatchNorm],
        OpType::MaxPooling => vec![Primitive::MaxPool { kernel: code.kernel }],
        OpType::AveragePooling => vec![Primitive::AvgPool { kernel: code.kernel }],
        OpType::Identity => vec![Primitive::Identity],
        OpType::ElementalAdd => vec![Primitive::Add],
        OpType::Concat => vec![Primitive::Concat],
        OpType::Terminal => Vec::new(),
    }
}

/// Channel multiple (of the block width) a layer emits, given its inputs' multiples.
/// `None` marks an Add over unequal inputs.
pub(crate) fn output_multiple(op: OpType, first: u64, second: u64) -> Option<u64> {
    match op {
        OpType::Convolution => Some(1),
        OpType::MaxPooling | OpType::AveragePooling | OpType::Identity => Some(first),
        OpType::ElementalAdd => (first == second).then_some(first),
        OpType::Concat => Some(first + second),
        OpType::Terminal => Some(0),
    }
}

/// Compiles a code list into a block DAG. The list is cut at its first Terminal.
///
/// The block input carries `width` channels. Convolutions emit `width`,
/// identity and pooling keep their input's channels, Concat sums and Add
/// requires equal inputs.
pub fn build_block(codes: &[NscCode], width: u64) -> Result<BlockGraph, GraphError> {
    if width == 0 {
        return Err(GraphError::Structure("block width must be positive".into()));
    }
    let body: Vec<NscCode> = codes.iter().take_while(|c| !c.is_terminal()).copied().collect();
    let kept = codes.len().min(body.len() + 1);
    let n = body.len();

    let mut nodes = Vec::with_capacity(n + 2);
    nodes.push(BlockNode { id: 0, kind: NodeKind::Input, channels: width, primitives: Vec::new() });
    let mut edges = Vec::with_capacity(2 * n + 1);
    let mut has_successor = vec![false; n + 1];

    for (i, code) in body.iter().enumerate() {
        let id = i + 1;
        if code.index as usize != id {
            return Err(GraphError::Structure(format!(
                "code at position {id} carries layer index {}",
                code.index
            )));
        }
        let inputs: Vec<usize> = code.inputs().map(usize::from).collect();
        for &p in &inputs {
            if p >= id {
                return Err(GraphError::Structure(format!(
                    "layer {id} references predecessor {p}, which does not precede it"
                )));
            }
        }
        let m = |p: usize| nodes[p].channels / width;
        let first = m(inputs[0]);
        let second = inputs.get(1).map(|&p| m(p)).unwrap_or(0);
        let multiple = output_multiple(code.op, first, second).ok_or_else(|| GraphError::AddChannelMismatch {
            node: id,
            left: inputs[0],
            right: inputs[1],
            left_channels: first * width,
            right_channels: second * width,
        })?;
        for &p in &inputs {
            edges.push((p, id));
            has_successor[p] = true;
        }
        nodes.push(BlockNode {
            id,
            kind: NodeKind::Layer { code: *code },
            channels: multiple * width,
            primitives: primitives(code),
        });
    }

    let out = n + 1;
    let mut out_channels = 0;
    for (id, used) in has_successor.iter().enumerate() {
        if !used {
            edges.push((id, out));
            out_channels += nodes[id].channels;
        }
    }
    nodes.push(BlockNode { id: out, kind: NodeKind::Output, channels: out_channels, primitives: vec![Primitive::Concat] });

    Ok(BlockGraph { width, codes: codes[..kept].to_vec(), nodes, edges })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn c(i: u8, op: OpType, k: u16, p1: u8, p2: u8) -> NscCode {
        NscCode::new(i, op, k, p1, p2)
    }

    /// Two stacked 3x3 convolutions with a shortcut from the block input.
    pub(crate) fn shortcut_block() -> Vec<NscCode> {
        vec![
            c(1, OpType::Convolution, 3, 0, 0),
            c(2, OpType::Convolution, 3, 1, 0),
            c(3, OpType::ElementalAdd, 0, 0, 2),
            NscCode::terminal(4),
        ]
    }

    #[test]
    fn shortcut_block_has_one_add() {
        let g = build_block(&shortcut_block(), 32).unwrap();
        let adds: Vec<_> = g.layers().filter(|(_, c)| c.op == OpType::ElementalAdd).collect();
        assert_eq!(adds.len(), 1);
        let add_id = adds[0].0.id;
        let mut preds = g.predecessors(add_id);
        preds.sort();
        assert_eq!(preds, vec![0, 2]);
        assert_eq!(g.leaves(), vec![3]);
        assert_eq!(g.output_channels(), 32);
        assert_eq!(g.edges.len(), 5);
        assert_eq!(g.nodes.len(), 5);
    }

    #[test]
    fn terminal_only_is_identity() {
        let g = build_block(&[NscCode::terminal(1)], 32).unwrap();
        assert!(g.is_identity());
        assert_eq!(g.nodes.len(), 2);
        assert_eq!(g.edges, vec![(0, 1)]);
        assert_eq!(g.output_channels(), 32);
    }

    #[test]
    fn concat_sums_channels_and_add_checks_them() {
        let codes = [
            c(1, OpType::Convolution, 1, 0, 0),
            c(2, OpType::Concat, 0, 0, 1),
            c(3, OpType::ElementalAdd, 0, 2, 1),
            NscCode::terminal(4),
        ];
        match build_block(&codes, 16).unwrap_err() {
            GraphError::AddChannelMismatch { node, left, right, left_channels, right_channels } => {
                assert_eq!((node, left, right, left_channels, right_channels), (3, 2, 1, 32, 16));
            }
            e => panic!("unexpected {e}"),
        }
        let g = build_block(&codes[..2], 16).unwrap();
        assert_eq!(g.nodes[2].channels, 32);
    }

    #[test]
    fn dangling_reference_is_structure_error() {
        let codes = [c(1, OpType::Convolution, 3, 1, 0)];
        assert!(matches!(build_block(&codes, 8), Err(GraphError::Structure(_))));
        let codes = [c(2, OpType::Convolution, 3, 0, 0)];
        assert!(matches!(build_block(&codes, 8), Err(GraphError::Structure(_))));
    }

    #[test]
    fn truncates_at_first_terminal() {
        let codes = [c(1, OpType::Convolution, 3, 0, 0), NscCode::terminal(2), c(3, OpType::Identity, 0, 1, 0)];
        let g = build_block(&codes, 8).unwrap();
        assert_eq!(g.layer_count(), 1);
        assert_eq!(g.codes.len(), 2);
    }

    #[test]
    fn pcc_expansion_count() {
        let g = build_block(&shortcut_block(), 32).unwrap();
        // two convolutions expand to three primitives each, the add to one
        assert_eq!(g.primitive_count(), 3 * 2 + 1);
    }

    #[test]
    fn rescale_keeps_multiples() {
        let codes = [c(1, OpType::Convolution, 1, 0, 0), c(2, OpType::Concat, 0, 0, 1), NscCode::terminal(3)];
        let g = build_block(&codes, 16).unwrap();
        assert_eq!(g.rescaled(64), build_block(&codes, 64).unwrap());
    }
}
