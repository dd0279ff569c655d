use crate::error::{Error, Result};
use crate::nn::{ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::Var;

use super::genotype::{edge_index, CellKind, OpKind, INPUTS_PER_NODE, NUM_NODES, NUM_OPS};
use super::ops::{MixedOp, Op, ReluConvBn};

#[derive(Debug, Clone)]
enum Body {
    /// 14 edges × 8 ops, weighted by a softmax over α.
    Mixed(Vec<MixedOp>),
    /// Node-major `(pred, op)` pairs of a genotype.
    Fixed(Vec<(usize, Op)>),
}

/// One stacked cell: two preprocessed inputs, four intermediate nodes,
/// output = channel concat of the intermediates.
#[derive(Debug, Clone)]
pub struct Cell {
    pub kind: CellKind,
    pub channels: usize,
    pre0: ReluConvBn,
    pre1: ReluConvBn,
    body: Body,
}

fn edge_stride(kind: CellKind, pred: usize) -> usize {
    if kind == CellKind::Reduce && pred < 2 {
        2
    } else {
        1
    }
}

impl Cell {
    fn preprocess(
        store: &mut ParamStore,
        name: &str,
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction_prev: bool,
        rng: &mut Rng,
    ) -> (ReluConvBn, ReluConvBn) {
        let s0 = if reduction_prev { 2 } else { 1 };
        (
            ReluConvBn::new(store, &format!("{name}.pre0"), c_pp, c, s0, rng),
            ReluConvBn::new(store, &format!("{name}.pre1"), c_p, c, 1, rng),
        )
    }

    /// Search cell holding every candidate op on every edge.
    #[allow(clippy::too_many_arguments)]
    pub fn mixed(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction_prev: bool,
        rng: &mut Rng,
    ) -> Cell {
        let (pre0, pre1) = Self::preprocess(store, name, c_pp, c_p, c, reduction_prev, rng);
        let mut edges = Vec::new();
        for node in 0..NUM_NODES {
            for pred in 0..node + 2 {
                let e = edge_index(node, pred);
                edges.push(MixedOp::new(store, &format!("{name}.e{e}"), c, edge_stride(kind, pred), rng));
            }
        }
        Cell {
            kind,
            channels: c,
            pre0,
            pre1,
            body: Body::Mixed(edges),
        }
    }

    /// Discrete cell from the genotype entries for `kind`.
    #[allow(clippy::too_many_arguments)]
    pub fn fixed(
        store: &mut ParamStore,
        name: &str,
        kind: CellKind,
        edges: &[(usize, OpKind)],
        c_pp: usize,
        c_p: usize,
        c: usize,
        reduction_prev: bool,
        rng: &mut Rng,
    ) -> Cell {
        let (pre0, pre1) = Self::preprocess(store, name, c_pp, c_p, c, reduction_prev, rng);
        let ops = edges
            .iter()
            .enumerate()
            .map(|(i, &(pred, k))| (pred, Op::new(store, &format!("{name}.k{i}"), k, c, edge_stride(kind, pred), rng)))
            .collect();
        Cell {
            kind,
            channels: c,
            pre0,
            pre1,
            body: Body::Fixed(ops),
        }
    }

    pub fn output_channels(&self) -> usize {
        self.channels * NUM_NODES
    }

    /// Mixed op on edge `e` of a search cell.
    pub fn edge(&self, e: usize) -> Option<&MixedOp> {
        match &self.body {
            Body::Mixed(edges) => edges.get(e),
            Body::Fixed(_) => None,
        }
    }

    pub fn is_search(&self) -> bool {
        matches!(self.body, Body::Mixed(_))
    }

    /// `weights` is the `[14 × 8]` op-mixture matrix (softmax of α); it is
    /// required for search cells and ignored by fixed ones.
    pub fn forward(&self, s: &mut Session, s0: Var, s1: Var, weights: Option<Var>) -> Result<Var> {
        let s0 = self.pre0.forward(s, s0)?;
        let s1 = self.pre1.forward(s, s1)?;
        let states = self.nodes(s, vec![s0, s1], weights)?;
        s.tape.concat(&states[2..], 1)
    }

    /// Runs the intermediate nodes on already-preprocessed inputs and returns
    /// all six states.
    pub fn nodes(&self, s: &mut Session, mut states: Vec<Var>, weights: Option<Var>) -> Result<Vec<Var>> {
        for node in 0..NUM_NODES {
            let value = match &self.body {
                Body::Mixed(edges) => {
                    let w = weights.ok_or_else(|| Error::invalid("search cell needs op weights"))?;
                    let mut terms = Vec::with_capacity((node + 2) * NUM_OPS);
                    for pred in 0..node + 2 {
                        let e = edge_index(node, pred);
                        terms.extend(edges[e].terms(s, states[pred], e)?);
                    }
                    s.tape.weighted_sum(&terms, w)?
                }
                Body::Fixed(ops) => {
                    let mut acc: Option<Var> = None;
                    for (pred, op) in &ops[node * INPUTS_PER_NODE..(node + 1) * INPUTS_PER_NODE] {
                        if let Some(y) = op.forward(s, states[*pred])? {
                            acc = Some(match acc {
                                Some(a) => s.tape.add(a, y)?,
                                None => y,
                            });
                        }
                    }
                    acc.ok_or_else(|| Error::invalid("fixed cell node has only zero ops"))?
                }
            };
            states.push(value);
        }
        Ok(states)
    }
}
