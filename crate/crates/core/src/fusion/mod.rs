//! Text–audio fusion operators producing `z^f`, and the two-way classifier.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{xavier_uniform, Linear, ParamGroup, ParamId, ParamStore, Session};
use crate::rng::Rng;
use crate::tensor::{Tensor, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FusionMethod {
    Tucker,
    Mfb,
    Mfh,
    Block,
    Concat,
}

impl FusionMethod {
    pub const ALL: [FusionMethod; 5] = [
        FusionMethod::Tucker,
        FusionMethod::Mfb,
        FusionMethod::Mfh,
        FusionMethod::Block,
        FusionMethod::Concat,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FusionMethod::Tucker => "tucker",
            FusionMethod::Mfb => "mfb",
            FusionMethod::Mfh => "mfh",
            FusionMethod::Block => "block",
            FusionMethod::Concat => "concat",
        }
    }
}

impl fmt::Display for FusionMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for FusionMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        FusionMethod::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::invalid(format!("unknown fusion method {s:?}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub method: FusionMethod,
    pub t_dim: usize,
    pub v_dim: usize,
    pub out_dim: usize,
    /// Tucker projection size (t' = v').
    pub tucker_rank: usize,
    /// MFB/MFH sum-pooling window k.
    pub mfb_factor: usize,
    /// Number of cascaded MFB blocks in MFH.
    pub mfh_depth: usize,
    /// BLOCK projection size R.
    pub block_rank: usize,
    /// BLOCK chunk count C.
    pub block_chunks: usize,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            method: FusionMethod::Block,
            t_dim: 64,
            v_dim: 64,
            out_dim: 16,
            tucker_rank: 16,
            mfb_factor: 5,
            mfh_depth: 2,
            block_rank: 32,
            block_chunks: 4,
        }
    }
}

impl FusionConfig {
    pub fn with_method(method: FusionMethod) -> Self {
        FusionConfig {
            method,
            ..Default::default()
        }
    }

    /// Applies the tuned "fusion hidden dimension": the Tucker rank becomes
    /// `h` and the BLOCK rank `2h`.
    pub fn with_hidden_dim(mut self, h: usize) -> Self {
        self.tucker_rank = h;
        self.block_rank = 2 * h;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            self.t_dim,
            self.v_dim,
            self.out_dim,
            self.tucker_rank,
            self.mfb_factor,
            self.block_rank,
            self.block_chunks,
        ];
        if dims.contains(&0) {
            return Err(Error::Config("fusion dimensions must be positive".into()));
        }
        if self.mfh_depth == 0 {
            return Err(Error::Config("mfh depth must be at least 1".into()));
        }
        if self.block_rank % self.block_chunks != 0 {
            return Err(Error::Config(format!(
                "block rank {} is not divisible by {} chunks",
                self.block_rank, self.block_chunks
            )));
        }
        Ok(())
    }
}

fn check_inputs(s: &Session, zt: Var, zv: Var, cfg: &FusionConfig) -> Result<()> {
    let (a, b) = (s.tape.shape(zt), s.tape.shape(zv));
    if a.len() != 2 || b.len() != 2 || a[0] != b[0] || a[1] != cfg.t_dim || b[1] != cfg.v_dim {
        return Err(Error::shape("fusion", a, b));
    }
    Ok(())
}

fn projection(store: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut Rng) -> Linear {
    Linear::new(store, name, i, o, false, ParamGroup::Head, rng)
}

/// Core tensor stored as `[r_t·r_v × out]`, row `i·r_v + j` holding `T_ij·`.
fn core(store: &mut ParamStore, name: &str, rt: usize, rv: usize, out: usize, rng: &mut Rng) -> ParamId {
    let t = xavier_uniform(&[rt * rv, out], rt * rv, out, rng);
    store.add(name, t, ParamGroup::Head)
}

/// `z^f_k = Σ_ij T_ijk (U z^t)_i (V z^v)_j`.
#[derive(Debug, Clone)]
pub struct Tucker {
    pub u: Linear,
    pub v: Linear,
    pub core: ParamId,
}

impl Tucker {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let r = cfg.tucker_rank;
        Tucker {
            u: projection(store, &format!("{name}.u"), cfg.t_dim, r, rng),
            v: projection(store, &format!("{name}.v"), cfg.v_dim, r, rng),
            core: core(store, &format!("{name}.core"), r, r, cfg.out_dim, rng),
        }
    }

    fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let a = self.u.forward(s, zt)?;
        let b = self.v.forward(s, zv)?;
        let o = s.tape.outer(a, b)?;
        let t = s.param(self.core);
        s.tape.matmul(o, t)
    }
}

/// Low-rank bilinear product, sum-pooled by `k`, then signed square root
/// and ℓ2 normalization.
#[derive(Debug, Clone)]
pub struct Mfb {
    pub p: Linear,
    pub q: Linear,
    pub factor: usize,
}

impl Mfb {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let width = cfg.mfb_factor * cfg.out_dim;
        Mfb {
            p: projection(store, &format!("{name}.p"), cfg.t_dim, width, rng),
            q: projection(store, &format!("{name}.q"), cfg.v_dim, width, rng),
            factor: cfg.mfb_factor,
        }
    }

    /// Elementwise product of the two projections, before pooling.
    fn expand(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let a = self.p.forward(s, zt)?;
        let b = self.q.forward(s, zv)?;
        s.tape.mul(a, b)
    }

    fn finish(&self, s: &mut Session, h: Var) -> Result<Var> {
        let pooled = s.tape.sum_pool(h, self.factor)?;
        let r = s.tape.signed_sqrt(pooled);
        Ok(s.tape.l2_normalize(r))
    }

    fn bilinear(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let h = self.expand(s, zt, zv)?;
        s.tape.sum_pool(h, self.factor)
    }

    fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let h = self.expand(s, zt, zv)?;
        self.finish(s, h)
    }
}

/// Cascade of MFB blocks; each block's expansion is gated by the previous
/// one. Block outputs are concatenated and mapped back to `out_dim`.
#[derive(Debug, Clone)]
pub struct Mfh {
    pub blocks: Vec<Mfb>,
    pub merge: Linear,
}

impl Mfh {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let blocks = (0..cfg.mfh_depth)
            .map(|i| Mfb::new(store, &format!("{name}.b{i}"), cfg, rng))
            .collect();
        let merge = Linear::new(
            store,
            &format!("{name}.merge"),
            cfg.mfh_depth * cfg.out_dim,
            cfg.out_dim,
            true,
            ParamGroup::Head,
            rng,
        );
        Mfh { blocks, merge }
    }

    /// Concatenated normalized block outputs, `[N × p·out_dim]`.
    pub fn stack(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let mut prev: Option<Var> = None;
        let mut outs = Vec::with_capacity(self.blocks.len());
        for b in &self.blocks {
            let mut h = b.expand(s, zt, zv)?;
            if let Some(p) = prev {
                h = s.tape.mul(h, p)?;
            }
            prev = Some(h);
            outs.push(b.finish(s, h)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            s.tape.concat(&outs, 1)
        }
    }

    fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let h = self.stack(s, zt, zv)?;
        self.merge.forward(s, h)
    }
}

/// Block-term bilinear: per chunk of the two projections, a small Tucker
/// product; chunk outputs are summed and ℓ2-normalized.
#[derive(Debug, Clone)]
pub struct Block {
    pub a: Linear,
    pub b: Linear,
    pub cores: Vec<ParamId>,
    pub chunk: usize,
}

impl Block {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        let chunk = cfg.block_rank / cfg.block_chunks;
        Block {
            a: projection(store, &format!("{name}.a"), cfg.t_dim, cfg.block_rank, rng),
            b: projection(store, &format!("{name}.b"), cfg.v_dim, cfg.block_rank, rng),
            cores: (0..cfg.block_chunks)
                .map(|c| core(store, &format!("{name}.core{c}"), chunk, chunk, cfg.out_dim, rng))
                .collect(),
            chunk,
        }
    }

    fn bilinear(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let x = self.a.forward(s, zt)?;
        let y = self.b.forward(s, zv)?;
        let single = self.cores.len() == 1;
        let mut acc: Option<Var> = None;
        for (c, &core) in self.cores.iter().enumerate() {
            let (xc, yc) = if single {
                (x, y)
            } else {
                (
                    s.tape.slice(x, 1, c * self.chunk, self.chunk)?,
                    s.tape.slice(y, 1, c * self.chunk, self.chunk)?,
                )
            };
            let o = s.tape.outer(xc, yc)?;
            let t = s.param(core);
            let part = s.tape.matmul(o, t)?;
            acc = Some(match acc {
                Some(a) => s.tape.add(a, part)?,
                None => part,
            });
        }
        Ok(acc.expect("at least one chunk"))
    }

    fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let h = self.bilinear(s, zt, zv)?;
        Ok(s.tape.l2_normalize(h))
    }
}

/// `relu(W·[z^t; z^v] + b)`.
#[derive(Debug, Clone)]
pub struct Concat {
    pub dense: Linear,
}

impl Concat {
    fn new(store: &mut ParamStore, name: &str, cfg: &FusionConfig, rng: &mut Rng) -> Self {
        Concat {
            dense: Linear::new(
                store,
                &format!("{name}.dense"),
                cfg.t_dim + cfg.v_dim,
                cfg.out_dim,
                true,
                ParamGroup::Head,
                rng,
            ),
        }
    }

    fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        let p = s.tape.concat(&[zt, zv], 1)?;
        let h = self.dense.forward(s, p)?;
        Ok(s.tape.relu(h))
    }
}

#[derive(Debug, Clone)]
pub enum FusionOp {
    Tucker(Tucker),
    Mfb(Mfb),
    Mfh(Mfh),
    Block(Block),
    Concat(Concat),
}

#[derive(Debug, Clone)]
pub struct Fusion {
    pub config: FusionConfig,
    pub op: FusionOp,
}

impl Fusion {
    pub fn new(store: &mut ParamStore, name: &str, config: FusionConfig, rng: &mut Rng) -> Result<Fusion> {
        config.validate()?;
        let op = match config.method {
            FusionMethod::Tucker => FusionOp::Tucker(Tucker::new(store, name, &config, rng)),
            FusionMethod::Mfb => FusionOp::Mfb(Mfb::new(store, name, &config, rng)),
            FusionMethod::Mfh => FusionOp::Mfh(Mfh::new(store, name, &config, rng)),
            FusionMethod::Block => FusionOp::Block(Block::new(store, name, &config, rng)),
            FusionMethod::Concat => FusionOp::Concat(Concat::new(store, name, &config, rng)),
        };
        Ok(Fusion { config, op })
    }

    /// `[N × t_dim]`, `[N × v_dim]` → `[N × out_dim]`.
    pub fn forward(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        check_inputs(s, zt, zv, &self.config)?;
        match &self.op {
            FusionOp::Tucker(f) => f.forward(s, zt, zv),
            FusionOp::Mfb(f) => f.forward(s, zt, zv),
            FusionOp::Mfh(f) => f.forward(s, zt, zv),
            FusionOp::Block(f) => f.forward(s, zt, zv),
            FusionOp::Concat(f) => f.forward(s, zt, zv),
        }
    }

    /// The bilinear stage before any normalization, for methods that have
    /// one (Tucker, MFB pooled sums, BLOCK summed chunks).
    pub fn bilinear(&self, s: &mut Session, zt: Var, zv: Var) -> Result<Var> {
        check_inputs(s, zt, zv, &self.config)?;
        match &self.op {
            FusionOp::Tucker(f) => f.forward(s, zt, zv),
            FusionOp::Mfb(f) => f.bilinear(s, zt, zv),
            FusionOp::Block(f) => f.bilinear(s, zt, zv),
            _ => Err(Error::invalid(format!("{} has no single bilinear stage", self.config.method))),
        }
    }
}

/// Affine map to two logits with softmax cross-entropy.
#[derive(Debug, Clone)]
pub struct Classifier {
    pub dense: Linear,
}

impl Classifier {
    pub fn new(store: &mut ParamStore, name: &str, in_dim: usize, rng: &mut Rng) -> Self {
        Classifier {
            dense: Linear::new(store, name, in_dim, 2, true, ParamGroup::Head, rng),
        }
    }

    /// Logits, plus the mean cross-entropy when labels are given.
    pub fn forward(&self, s: &mut Session, z: Var, labels: Option<&[usize]>) -> Result<(Var, Option<Var>)> {
        let logits = self.dense.forward(s, z)?;
        let loss = labels.map(|y| s.tape.cross_entropy(logits, y)).transpose()?;
        Ok((logits, loss))
    }
}

/// Row-wise argmax of `[N × K]` logits; ties go to the lower class.
pub fn predict(logits: &Tensor) -> Vec<usize> {
    let k = *logits.shape().last().unwrap_or(&1);
    logits
        .data()
        .chunks(k)
        .map(|row| {
            let mut best = 0;
            for (i, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = i;
                }
            }
            best
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn method_names_round_trip() {
        for m in FusionMethod::ALL {
            assert_eq!(m.name().parse::<FusionMethod>().unwrap(), m);
        }
        assert!("mcb".parse::<FusionMethod>().is_err());
    }

    #[test]
    fn config_checks() {
        FusionConfig::default().validate().unwrap();
        let bad = FusionConfig {
            block_rank: 30,
            ..Default::default()
        };
        assert!(bad.validate().is_err());
        let zero_depth = FusionConfig {
            mfh_depth: 0,
            ..Default::default()
        };
        assert!(zero_depth.validate().is_err());
        let h = FusionConfig::default().with_hidden_dim(8);
        assert_eq!((h.tucker_rank, h.block_rank), (8, 16));
    }

    #[test]
    fn predict_ties_to_class_zero() {
        let t = Tensor::new(vec![3, 2], vec![0.0, 0.0, -1.0, 2.0, 3.0, 1.0]).unwrap();
        assert_eq!(predict(&t), vec![0, 1, 0]);
    }
}
