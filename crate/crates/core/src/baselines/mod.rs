//! Comparison actors: soft decision trees and multilayer perceptrons.

mod cddt;
mod mlp;

pub use cddt::{Cddt, CddtLeaf, LeafKind};
pub use mlp::{dense_forward, push_dense, Mlp, TensorDoc};
