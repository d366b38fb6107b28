use super::network::PlanBuilder;
use super::{BlockGraph, GraphError, NetworkPlan, PlanOp, PoolKind, ShapeState, Template};
use crate::nsc::{NscCode, OpType};

pub const MAX_CONNECTION_CODES: usize = 12;
pub const MAX_CONNECTION_POOLS: usize = 5;

/// Builds a network from connection-search codes.
///
/// Each "convolution" code is an instance of `block` whose width is the code's
/// kernel field; pooling codes are stride-2 down-sampling layers; predecessor 0
/// is the stem output. Merge inputs are aligned to the lowest-resolution input
/// with 1x1 adapters, and every successor-less node feeds the classifier head.
pub fn build_connection_network(
    codes: &[NscCode],
    block: &BlockGraph,
    template: &Template,
) -> Result<NetworkPlan, GraphError> {
    let body: Vec<NscCode> = codes.iter().take_while(|c| !c.is_terminal()).copied().collect();
    if body.len() >= MAX_CONNECTION_CODES {
        return Err(GraphError::Limit(format!(
            "{} connection codes exceed the maximum of {}",
            body.len(),
            MAX_CONNECTION_CODES - 1
        )));
    }
    let pools = body.iter().filter(|c| c.op.is_pooling()).count();
    if pools > MAX_CONNECTION_POOLS {
        return Err(GraphError::Limit(format!("{pools} pooling layers exceed the maximum of {MAX_CONNECTION_POOLS}")));
    }

    let mut b = PlanBuilder::default();
    let stem = b.stem(template);
    // plan node of each code position; position 0 is the stem
    let mut at = vec![stem];
    let mut used = vec![false];

    for (i, code) in body.iter().enumerate() {
        let pos = i + 1;
        if code.index as usize != pos {
            return Err(GraphError::Structure(format!("code at position {pos} carries index {}", code.index)));
        }
        let inputs: Vec<usize> = code.inputs().map(usize::from).collect();
        if let Some(&p) = inputs.iter().find(|&&p| p >= pos) {
            return Err(GraphError::Structure(format!("connection {pos} references later node {p}")));
        }
        for &p in &inputs {
            used[p] = true;
        }
        let src = at[inputs[0]];
        let node = match code.op {
            OpType::Convolution => {
                if code.kernel == 0 {
                    return Err(GraphError::Structure(format!("block instance {pos} has zero width")));
                }
                b.block(block, code.kernel as u64, src)
            }
            OpType::MaxPooling | OpType::AveragePooling => {
                let kind = if code.op == OpType::MaxPooling { PoolKind::Max } else { PoolKind::Average };
                b.pool(kind, code.kernel, src)
            }
            OpType::Identity => b.push(PlanOp::Identity, b.shape(src), &[src]),
            OpType::ElementalAdd | OpType::Concat => {
                let a = at[inputs[0]];
                let c = at[inputs[1]];
                merge(&mut b, code.op, a, c)
            }
            OpType::Terminal => unreachable!("body excludes Terminal"),
        };
        at.push(node);
        used.push(false);
    }

    let leaves: Vec<usize> = (0..at.len()).filter(|&p| !used[p]).map(|p| at[p]).collect();
    b.head(&leaves, template.classes);
    Ok(NetworkPlan {
        template: template.name.clone(),
        input: template.input,
        classes: template.classes,
        block: block.codes.clone(),
        stages: Vec::new(),
        nodes: b.nodes,
        edges: b.edges,
    })
}

fn merge(b: &mut PlanBuilder, op: OpType, first: usize, second: usize) -> usize {
    let (sa, sc) = (b.shape(first), b.shape(second));
    // target: the lower-resolution input, first input on ties
    let target = if sc.height < sa.height { sc } else { sa };
    let align = |b: &mut PlanBuilder, from: usize, keep_channels: bool| -> usize {
        let s = b.shape(from);
        let want = if keep_channels { target.with_channels(s.channels) } else { target };
        if s == want {
            return from;
        }
        let stride = s.height / want.height;
        b.push(PlanOp::Adapter { stride }, want, &[from])
    };
    match op {
        OpType::ElementalAdd => {
            let a = align(b, first, false);
            let c = align(b, second, false);
            b.push(PlanOp::Add, target, &[a, c])
        }
        _ => {
            let a = align(b, first, true);
            let c = align(b, second, true);
            let channels = b.shape(a).channels + b.shape(c).channels;
            b.push(PlanOp::Concat, ShapeState { channels, ..target }, &[a, c])
        }
    }
}
