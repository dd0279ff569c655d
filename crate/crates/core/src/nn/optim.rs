use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::params::{ParamGrads, ParamGroup, ParamId, ParamStore};

/// SGD with heavy-ball momentum and L2 weight decay:
/// `v ← μ·v + (g + λ·w)`, `w ← w − lr·v`.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    velocity: BTreeMap<ParamId, Vec<f64>>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Sgd {
            lr,
            momentum,
            weight_decay,
            velocity: BTreeMap::new(),
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, group: ParamGroup) {
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.param(id).group == group).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let w = store.get_mut(id);
            let v = self.velocity.entry(id).or_insert_with(|| vec![0.0; g.numel()]);
            for ((wi, vi), gi) in w.data_mut().iter_mut().zip(v.iter_mut()).zip(g.data()) {
                *vi = self.momentum * *vi + gi + self.weight_decay * *wi;
                *wi -= self.lr * *vi;
            }
        }
    }
}

/// Adam with L2 weight decay folded into the gradient.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    #[serde(skip)]
    state: BTreeMap<ParamId, (Vec<f64>, Vec<f64>)>,
    #[serde(skip)]
    t: u64,
}

impl Adam {
    pub fn new(lr: f64, weight_decay: f64) -> Self {
        Adam {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay,
            state: BTreeMap::new(),
            t: 0,
        }
    }

    pub fn step(&mut self, store: &mut ParamStore, grads: &ParamGrads, group: ParamGroup) {
        self.t += 1;
        let bc1 = 1.0 - self.beta1.powi(self.t as i32);
        let bc2 = 1.0 - self.beta2.powi(self.t as i32);
        let ids: Vec<ParamId> = store.ids().filter(|&id| store.param(id).group == group).collect();
        for id in ids {
            let Some(g) = grads.get(id) else { continue };
            let w = store.get_mut(id);
            let (m, v) = self
                .state
                .entry(id)
                .or_insert_with(|| (vec![0.0; g.numel()], vec![0.0; g.numel()]));
            for (((wi, mi), vi), gi) in w.data_mut().iter_mut().zip(m.iter_mut()).zip(v.iter_mut()).zip(g.data()) {
                let gd = gi + self.weight_decay * *wi;
                *mi = self.beta1 * *mi + (1.0 - self.beta1) * gd;
                *vi = self.beta2 * *vi + (1.0 - self.beta2) * gd * gd;
                let mhat = *mi / bc1;
                let vhat = *vi / bc2;
                *wi -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
    }
}
