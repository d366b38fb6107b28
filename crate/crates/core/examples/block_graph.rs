//! Build a block DAG from codes and stack it into CIFAR and ImageNet networks.

use blockqnn::complexity::ComplexityReport;
use blockqnn::graph::{build_block, stack_network, topo_order, NodeKind, Template};
use blockqnn::nsc::parse_block;

fn main() {
    // two branches (3x3 conv, 1x1 conv then max-pool) joined by a concat
    let codes = parse_block("1,1,3,0,0;2,1,1,0,0;3,2,3,2,0;4,6,0,1,3;5,7,0,0,0").unwrap();
    let block = build_block(&codes, 32).expect("valid block");

    println!("nodes in topological order:");
    for id in topo_order(&block) {
        let n = &block.nodes[id];
        let label = match &n.kind {
            NodeKind::Input => "input".to_string(),
            NodeKind::Layer { code } => format!("{} k{}", code.op, code.kernel),
            NodeKind::Output => "output concat".to_string(),
        };
        println!("  {id}: {label:<16} {:>4} ch  preds {:?}", n.channels, block.predecessors(id));
    }
    println!("primitives: {}", block.primitive_count());

    let report = ComplexityReport::of_block(&codes).unwrap();
    println!("block: {} FLOPs, {} params, density {:.3}", report.flops, report.params, report.density);

    for template in [Template::cifar(), Template::imagenet()] {
        let plan = stack_network(&block, &template, 4).unwrap();
        let c = ComplexityReport::of_plan(&plan).unwrap();
        let widths: Vec<u64> = plan.stages.iter().map(|s| s.width).collect();
        println!(
            "{}: {} nodes, {} blocks, {} poolings, stage widths {:?}, {:.2} GFLOPs, {:.2}M params",
            plan.template,
            plan.nodes.len(),
            plan.block_instances(),
            plan.pooling_count(),
            widths,
            c.flops as f64 / 1e9,
            c.params as f64 / 1e6
        );
    }
}
