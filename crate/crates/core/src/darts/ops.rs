use crate::error::Result;
use crate::nn::{BatchNorm, Conv2d, ParamGroup, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, PoolKind, Var};

use super::genotype::OpKind;

/// ReLU → 1×1 conv (optionally strided) → BN. With stride 2 this is the
/// reduction used for strided identities and for `c_{k-2}` after a reduce
/// cell.
#[derive(Debug, Clone)]
pub struct ReluConvBn {
    conv: Conv2d,
    bn: BatchNorm,
}

impl ReluConvBn {
    pub fn new(store: &mut ParamStore, name: &str, c_in: usize, c_out: usize, stride: usize, rng: &mut Rng) -> Self {
        let g = ConvGeometry::new(stride, 0, 1, 1);
        ReluConvBn {
            conv: Conv2d::new(store, &format!("{name}.conv"), c_in, c_out, 1, g, ParamGroup::Conv, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c_out, ParamGroup::Conv),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = s.tape.relu(x);
        let h = self.conv.forward(s, h)?;
        self.bn.forward(s, h)
    }
}

/// ReLU → depthwise k×k (optionally dilated) → pointwise 1×1 → BN.
#[derive(Debug, Clone)]
pub struct SepConv {
    depthwise: Conv2d,
    pointwise: Conv2d,
    bn: BatchNorm,
}

impl SepConv {
    #[allow(clippy::too_many_arguments)]
    pub fn new(store: &mut ParamStore, name: &str, c: usize, kernel: usize, stride: usize, dilation: usize, rng: &mut Rng) -> Self {
        let pad = dilation * (kernel - 1) / 2;
        let dw = ConvGeometry::new(stride, pad, dilation, c);
        SepConv {
            depthwise: Conv2d::new(store, &format!("{name}.dw"), c, c, kernel, dw, ParamGroup::Conv, rng),
            pointwise: Conv2d::new(store, &format!("{name}.pw"), c, c, 1, ConvGeometry::default(), ParamGroup::Conv, rng),
            bn: BatchNorm::new(store, &format!("{name}.bn"), c, ParamGroup::Conv),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let h = s.tape.relu(x);
        let h = self.depthwise.forward(s, h)?;
        let h = self.pointwise.forward(s, h)?;
        self.bn.forward(s, h)
    }
}

/// A concrete candidate operation on one edge.
#[derive(Debug, Clone)]
pub enum Op {
    Conv(SepConv),
    Pool { kind: PoolKind, stride: usize },
    Identity,
    Reduce(ReluConvBn),
    Zero,
}

impl Op {
    pub fn new(store: &mut ParamStore, name: &str, kind: OpKind, c: usize, stride: usize, rng: &mut Rng) -> Op {
        let name = format!("{name}.{}", kind.name());
        match kind {
            OpKind::SepConv3x3 => Op::Conv(SepConv::new(store, &name, c, 3, stride, 1, rng)),
            OpKind::SepConv5x5 => Op::Conv(SepConv::new(store, &name, c, 5, stride, 1, rng)),
            OpKind::DilConv3x3 => Op::Conv(SepConv::new(store, &name, c, 3, stride, 2, rng)),
            OpKind::DilConv5x5 => Op::Conv(SepConv::new(store, &name, c, 5, stride, 2, rng)),
            OpKind::MaxPool3x3 => Op::Pool {
                kind: PoolKind::Max,
                stride,
            },
            OpKind::AvgPool3x3 => Op::Pool {
                kind: PoolKind::Avg,
                stride,
            },
            OpKind::Identity if stride == 1 => Op::Identity,
            OpKind::Identity => Op::Reduce(ReluConvBn::new(store, &name, c, c, stride, rng)),
            OpKind::Zero => Op::Zero,
        }
    }

    /// `None` for the zero op, which contributes nothing to any sum.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Option<Var>> {
        Ok(Some(match self {
            Op::Conv(c) => c.forward(s, x)?,
            Op::Pool { kind, stride } => s.tape.pool2d(x, *kind, 3, *stride, 1)?,
            Op::Identity => x,
            Op::Reduce(r) => r.forward(s, x)?,
            Op::Zero => return Ok(None),
        }))
    }
}

/// All eight candidates on one edge; the output is their mixture under row
/// `row` of a weight matrix.
#[derive(Debug, Clone)]
pub struct MixedOp {
    pub ops: Vec<Op>,
}

impl MixedOp {
    pub fn new(store: &mut ParamStore, name: &str, c: usize, stride: usize, rng: &mut Rng) -> MixedOp {
        MixedOp {
            ops: OpKind::ALL.iter().map(|&k| Op::new(store, name, k, c, stride, rng)).collect(),
        }
    }

    /// `(output, flat weight index)` for every non-zero op, in op order.
    pub fn terms(&self, s: &mut Session, x: Var, row: usize) -> Result<Vec<(Var, usize)>> {
        let mut terms = Vec::with_capacity(self.ops.len());
        for (o, op) in self.ops.iter().enumerate() {
            if let Some(y) = op.forward(s, x)? {
                terms.push((y, row * self.ops.len() + o));
            }
        }
        Ok(terms)
    }

    pub fn forward(&self, s: &mut Session, x: Var, weights: Var, row: usize) -> Result<Var> {
        let terms = self.terms(s, x, row)?;
        s.tape.weighted_sum(&terms, weights)
    }
}
