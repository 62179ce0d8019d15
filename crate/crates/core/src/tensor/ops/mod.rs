//! Differentiable primitives. Each submodule adds forward methods to
//! [`Var`](super::Var) and owns the matching adjoints.

pub(crate) mod conv;
pub(crate) mod elementwise;
pub(crate) mod linalg;
pub(crate) mod nn;
pub(crate) mod pool;
pub(crate) mod shape;

use super::tape::{GradSink, Node, Op};
use super::Real;

pub(crate) fn backward<F: Real>(nodes: &[Node<F>], node: &Node<F>, g: &[F], sink: &mut GradSink<F>) {
    match node.op {
        Op::Leaf => {}
        Op::Reshape(_) | Op::Gather { .. } | Op::Concat { .. } => shape::backward(nodes, node, g, sink),
        Op::Linear { .. } | Op::Bmm { .. } => linalg::backward(nodes, node, g, sink),
        Op::Conv2d { .. } | Op::Deconv2d { .. } => conv::backward(nodes, node, g, sink),
        Op::Softmax(_) | Op::LayerNorm { .. } | Op::L2Normalize { .. } | Op::TokenBroadcast { .. } => {
            nn::backward(nodes, node, g, sink)
        }
        Op::AdaptiveAvgPool(_) | Op::Bilinear(_) | Op::MeanAxis { .. } | Op::OuterSum { .. } => {
            pool::backward(nodes, node, g, sink)
        }
        _ => elementwise::backward(nodes, node, g, sink),
    }
}
