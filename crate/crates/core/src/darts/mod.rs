//! Differentiable architecture search: mixed operations, cells, the stacked
//! network, the bilevel step and discretization.

mod cell;
mod genotype;
mod network;
mod ops;
mod search;

pub use cell::Cell;
pub use genotype::{
    discretize, discretize_cell, edge_index, export_genotype_dot, CellKind, Genotype, OpKind, INPUTS_PER_NODE,
    NUM_EDGES, NUM_NODES, NUM_OPS,
};
pub use network::{reduce_positions, Architecture, Network, NetworkConfig};
pub use ops::{MixedOp, Op, ReluConvBn, SepConv};
pub use search::{alpha_step, search_step, weight_step, SearchOptimizers, StepLosses};
