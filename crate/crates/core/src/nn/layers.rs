use crate::error::Result;
use crate::rng::Rng;
use crate::tensor::{ConvGeometry, Tensor, Var};

use super::params::{ParamGroup, ParamId, ParamStore, Session, StatUpdate};

/// Kaiming-uniform initialization for ReLU networks: `U(−b, b)` with
/// `b = √(6 / fan_in)`.
pub fn kaiming_uniform(shape: &[usize], fan_in: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Glorot-uniform; used for the bilinear fusion factors where there is no
/// ReLU to compensate for.
pub fn xavier_uniform(shape: &[usize], fan_in: usize, fan_out: usize, rng: &mut Rng) -> Tensor {
    let bound = (6.0 / (fan_in + fan_out).max(1) as f64).sqrt();
    Tensor::uniform(shape, -bound, bound, rng)
}

/// Affine map `x·W + b` on `[N × in]` rows.
#[derive(Debug, Clone)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub in_dim: usize,
    pub out_dim: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_dim: usize,
        out_dim: usize,
        bias: bool,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let w = xavier_uniform(&[in_dim, out_dim], in_dim, out_dim, rng);
        let weight = store.add(format!("{name}.weight"), w, group);
        let bias = bias.then(|| store.add(format!("{name}.bias"), Tensor::zeros(&[out_dim]), group));
        Linear {
            weight,
            bias,
            in_dim,
            out_dim,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        let y = s.tape.matmul(x, w)?;
        match self.bias {
            Some(b) => {
                let b = s.param(b);
                s.tape.add_bias(y, b)
            }
            None => Ok(y),
        }
    }
}

/// Bias-free convolution.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub weight: ParamId,
    pub geom: ConvGeometry,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_ch: usize,
        out_ch: usize,
        kernel: usize,
        geom: ConvGeometry,
        group: ParamGroup,
        rng: &mut Rng,
    ) -> Self {
        let cg = in_ch / geom.groups;
        let w = kaiming_uniform(&[out_ch, cg, kernel, kernel], cg * kernel * kernel, rng);
        Conv2d {
            weight: store.add(format!("{name}.weight"), w, group),
            geom,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let w = s.param(self.weight);
        s.tape.conv2d(x, w, self.geom)
    }
}

/// Per-channel batch standardization with learned affine and running
/// statistics (momentum 0.1, ε = 1e-5).
#[derive(Debug, Clone)]
pub struct BatchNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
    pub running_mean: ParamId,
    pub running_var: ParamId,
    pub eps: f64,
    pub momentum: f64,
}

impl BatchNorm {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, group: ParamGroup) -> Self {
        BatchNorm {
            gamma: store.add(format!("{name}.gamma"), Tensor::ones(&[channels]), group),
            beta: store.add(format!("{name}.beta"), Tensor::zeros(&[channels]), group),
            running_mean: store.add(format!("{name}.running_mean"), Tensor::zeros(&[channels]), ParamGroup::Buffer),
            running_var: store.add(format!("{name}.running_var"), Tensor::ones(&[channels]), ParamGroup::Buffer),
            eps: 1e-5,
            momentum: 0.1,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Result<Var> {
        let (g, b) = (s.param(self.gamma), s.param(self.beta));
        if s.train {
            let (y, stats) = s.tape.batch_norm(x, g, b, None, self.eps)?;
            if let Some(stats) = stats {
                s.record_stats(StatUpdate {
                    mean: self.running_mean,
                    var: self.running_var,
                    stats,
                    momentum: self.momentum,
                });
            }
            Ok(y)
        } else {
            let store = s.store();
            let (mean, var) = (store.get(self.running_mean).data(), store.get(self.running_var).data());
            let (y, _) = s.tape.batch_norm(x, g, b, Some((mean, var)), self.eps)?;
            Ok(y)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::apply_stat_updates;
    use crate::rng;

    #[test]
    fn batch_norm_standardizes_and_tracks_running_stats() {
        let mut store = ParamStore::new();
        let bn = BatchNorm::new(&mut store, "bn", 2, ParamGroup::Conv);
        let mut r = rng::stream(3, "bn");
        let x = Tensor::randn(&[4, 2, 3, 3], 2.0, &mut r);
        let mut s = Session::new(&store, true, &[ParamGroup::Conv]);
        let xv = s.tape.constant(x.clone());
        let y = bn.forward(&mut s, xv).unwrap();
        let out = s.tape.value(y).clone();
        let updates = s.finish();
        for ch in 0..2 {
            let vals: Vec<f64> = (0..4)
                .flat_map(|n| out.data()[(n * 2 + ch) * 9..(n * 2 + ch + 1) * 9].to_vec())
                .collect();
            let mean = vals.iter().sum::<f64>() / vals.len() as f64;
            let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / vals.len() as f64;
            assert!(mean.abs() < 1e-12);
            assert!((var - 1.0).abs() < 1e-3);
        }
        apply_stat_updates(&mut store, &updates);
        let rm = store.get(bn.running_mean).data()[0];
        assert!((rm - 0.1 * updates[0].stats.mean[0]).abs() < 1e-15);
    }
}
