use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{BatchNorm, Conv2d, Linear, ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, PoolKind, Tape, Tensor, Var};

use super::cell::Cell;
use super::genotype::{discretize, CellKind, Genotype, NUM_EDGES, NUM_OPS};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetworkConfig {
    /// Number of stacked cells.
    pub layers: usize,
    /// Cell channels before the first reduction.
    pub channels: usize,
    pub stem_multiplier: usize,
    /// Average-pool factor applied to the input before the stem conv.
    pub downsample: usize,
    pub out_dim: usize,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        NetworkConfig {
            layers: 8,
            channels: 4,
            stem_multiplier: 3,
            downsample: 16,
            out_dim: 64,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Architecture {
    Search,
    Fixed(Genotype),
}

/// Reduce cells sit at ⌊L/3⌋ and ⌊2L/3⌋.
pub fn reduce_positions(layers: usize) -> [usize; 2] {
    [layers / 3, 2 * layers / 3]
}

fn check_input(shape: &[usize]) -> Result<()> {
    if shape.len() != 4 || shape[1] != 3 {
        return Err(Error::shape("network input", shape, &[0, 3, 0, 0]));
    }
    Ok(())
}

/// Stem → stacked cells → global average pool → affine to `out_dim`.
#[derive(Debug, Clone)]
pub struct Network {
    pub config: NetworkConfig,
    stem_conv: Conv2d,
    stem_bn: BatchNorm,
    pub cells: Vec<Cell>,
    head: Linear,
    pub alpha_normal: Option<ParamId>,
    pub alpha_reduce: Option<ParamId>,
    genotype: Option<Genotype>,
}

impl Network {
    pub fn new(store: &mut ParamStore, name: &str, config: NetworkConfig, arch: &Architecture, rng: &mut Rng) -> Result<Network> {
        if config.layers < 2 {
            return Err(Error::Config(format!("network needs at least 2 layers, got {}", config.layers)));
        }
        if config.channels == 0 || config.stem_multiplier == 0 || config.downsample == 0 || config.out_dim == 0 {
            return Err(Error::Config("network dimensions must be positive".into()));
        }
        if let Architecture::Fixed(g) = arch {
            g.validate()?;
        }
        let c_stem = config.channels * config.stem_multiplier;
        let stem_conv = Conv2d::new(
            store,
            &format!("{name}.stem.conv"),
            3,
            c_stem,
            3,
            ConvGeometry::new(1, 1, 1, 1),
            ParamGroup::Conv,
            rng,
        );
        let stem_bn = BatchNorm::new(store, &format!("{name}.stem.bn"), c_stem, ParamGroup::Conv);

        let reduce_at = reduce_positions(config.layers);
        let (mut c_pp, mut c_p, mut c) = (c_stem, c_stem, config.channels);
        let mut reduction_prev = false;
        let mut cells = Vec::with_capacity(config.layers);
        for i in 0..config.layers {
            let kind = if reduce_at.contains(&i) {
                c *= 2;
                CellKind::Reduce
            } else {
                CellKind::Normal
            };
            let cname = format!("{name}.cell{i}");
            let cell = match arch {
                Architecture::Search => Cell::mixed(store, &cname, kind, c_pp, c_p, c, reduction_prev, rng),
                Architecture::Fixed(g) => Cell::fixed(store, &cname, kind, g.cell(kind), c_pp, c_p, c, reduction_prev, rng),
            };
            reduction_prev = kind == CellKind::Reduce;
            c_pp = c_p;
            c_p = cell.output_channels();
            cells.push(cell);
        }
        let head = Linear::new(store, &format!("{name}.head"), c_p, config.out_dim, true, ParamGroup::Conv, rng);

        let (alpha_normal, alpha_reduce, genotype) = match arch {
            Architecture::Search => {
                let mut alpha = |kind: &str| {
                    let t = Tensor::randn(&[NUM_EDGES, NUM_OPS], 1e-3, rng);
                    store.add(format!("{name}.alpha_{kind}"), t, ParamGroup::Alpha)
                };
                (Some(alpha("normal")), Some(alpha("reduce")), None)
            }
            Architecture::Fixed(g) => (None, None, Some(g.clone())),
        };
        Ok(Network {
            config,
            stem_conv,
            stem_bn,
            cells,
            head,
            alpha_normal,
            alpha_reduce,
            genotype,
        })
    }

    pub fn is_search(&self) -> bool {
        self.alpha_normal.is_some()
    }

    /// `[N, 3, H, W]` images → `[N, out_dim]`.
    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        check_input(s.tape.shape(x))?;
        let f = self.config.downsample;
        let x = if f > 1 { s.tape.pool2d(x, PoolKind::Avg, f, f, 0)? } else { x };
        self.forward_pooled(s, x)
    }

    /// The input average pooling, off the tape. Lets a fixed dataset be
    /// pooled once; `forward_pooled(downsample(x))` equals `forward(x)`.
    pub fn downsample(&self, x: &Tensor) -> Result<Tensor> {
        check_input(x.shape())?;
        let f = self.config.downsample;
        if f <= 1 {
            return Ok(x.clone());
        }
        let mut tape = Tape::new();
        let v = tape.constant(x.clone());
        let y = tape.pool2d(v, PoolKind::Avg, f, f, 0)?;
        Ok(tape.value(y).clone())
    }

    pub fn forward_pooled(&self, s: &mut Session, x: Var) -> Result<Var> {
        check_input(s.tape.shape(x))?;
        let h = self.stem_conv.forward(s, x)?;
        let stem = self.stem_bn.forward(s, h)?;

        let weights = match (self.alpha_normal, self.alpha_reduce) {
            (Some(an), Some(ar)) => {
                let (an, ar) = (s.param(an), s.param(ar));
                Some((s.tape.softmax(an, 1)?, s.tape.softmax(ar, 1)?))
            }
            _ => None,
        };
        let (mut s0, mut s1) = (stem, stem);
        for cell in &self.cells {
            let w = weights.map(|(wn, wr)| if cell.kind == CellKind::Reduce { wr } else { wn });
            let out = cell.forward(s, s0, s1, w)?;
            s0 = s1;
            s1 = out;
        }
        let pooled = s.tape.global_avg_pool(s1)?;
        self.head.forward(s, pooled)
    }

    /// The discrete architecture: the searched argmax for search networks,
    /// the construction genotype otherwise.
    pub fn genotype(&self, store: &ParamStore) -> Result<Genotype> {
        match (&self.genotype, self.alpha_normal, self.alpha_reduce) {
            (Some(g), _, _) => Ok(g.clone()),
            (None, Some(an), Some(ar)) => discretize(store.get(an), store.get(ar)),
            _ => Err(Error::invalid("network has neither genotype nor architecture weights")),
        }
    }
}
