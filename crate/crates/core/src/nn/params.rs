use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{read_tensor_from, write_tensor_to, BatchStats, Gradients, Tape, Tensor, Var};

/// Optimizer routing for a parameter.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    /// Convolution/projection weights of the acoustic network (SGD).
    Conv,
    /// Architecture weights (Adam, validation batches).
    Alpha,
    /// Text encoder, fusion and classifier (Adam).
    Head,
    /// Non-trainable state such as running statistics.
    Buffer,
}

impl ParamGroup {
    fn code(self) -> u8 {
        match self {
            ParamGroup::Conv => 0,
            ParamGroup::Alpha => 1,
            ParamGroup::Head => 2,
            ParamGroup::Buffer => 3,
        }
    }

    fn from_code(c: u8) -> Option<Self> {
        Some(match c {
            0 => ParamGroup::Conv,
            1 => ParamGroup::Alpha,
            2 => ParamGroup::Head,
            3 => ParamGroup::Buffer,
            _ => return None,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    value: Rc<Tensor>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Owns every parameter and buffer of a model. Cloning is cheap: values are
/// shared until one side writes.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

const CHECKPOINT_MAGIC: &[u8; 4] = b"DFCK";

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, group: ParamGroup) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value: Rc::new(value),
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Rc::make_mut(&mut self.params[id.0].value)
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let cur = self.get(id);
        if cur.shape() != value.shape() {
            return Err(Error::shape("ParamStore::set", cur.shape(), value.shape()));
        }
        self.params[id.0].value = Rc::new(value);
        Ok(())
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    /// Number of scalar values in `group`.
    pub fn count(&self, group: ParamGroup) -> usize {
        self.params.iter().filter(|p| p.group == group).map(|p| p.value.numel()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().all(|p| p.value.is_finite())
    }

    /// Bitwise equality of the values in `group`.
    pub fn same_values(&self, other: &ParamStore, group: ParamGroup) -> bool {
        self.params.len() == other.params.len()
            && self
                .params
                .iter()
                .zip(&other.params)
                .filter(|(a, _)| a.group == group)
                .all(|(a, b)| a.value.data().iter().zip(b.value.data()).all(|(x, y)| x.to_bits() == y.to_bits()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        w.write_all(CHECKPOINT_MAGIC)?;
        w.write_all(&(self.params.len() as u32).to_le_bytes())?;
        for p in &self.params {
            w.write_all(&(p.name.len() as u32).to_le_bytes())?;
            w.write_all(p.name.as_bytes())?;
            w.write_all(&[p.group.code()])?;
            write_tensor_to(&mut w, &p.value)?;
        }
        w.flush()?;
        Ok(())
    }

    /// Loads values by name into an identically structured store.
    pub fn load(&mut self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        let bad = |reason: String| Error::Format {
            path: path.to_path_buf(),
            reason,
        };
        let mut r = BufReader::new(File::open(path)?);
        let mut magic = [0u8; 4];
        r.read_exact(&mut magic)?;
        if &magic != CHECKPOINT_MAGIC {
            return Err(bad("missing DFCK magic".into()));
        }
        let mut buf = [0u8; 4];
        r.read_exact(&mut buf)?;
        let count = u32::from_le_bytes(buf) as usize;
        if count != self.params.len() {
            return Err(bad(format!("{count} entries, model has {}", self.params.len())));
        }
        for _ in 0..count {
            r.read_exact(&mut buf)?;
            let mut name = vec![0u8; u32::from_le_bytes(buf) as usize];
            r.read_exact(&mut name)?;
            let name = String::from_utf8(name).map_err(|_| bad("non-UTF-8 name".into()))?;
            let mut code = [0u8; 1];
            r.read_exact(&mut code)?;
            ParamGroup::from_code(code[0]).ok_or_else(|| bad(format!("unknown group {}", code[0])))?;
            let t = read_tensor_from(&mut r)?;
            let id = self.find(&name).ok_or_else(|| bad(format!("unexpected parameter {name}")))?;
            self.set(id, t).map_err(|e| bad(format!("{name}: {e}")))?;
        }
        Ok(())
    }
}

/// Running-statistics update produced by a training-mode batch norm.
#[derive(Debug, Clone)]
pub struct StatUpdate {
    pub mean: ParamId,
    pub var: ParamId,
    pub stats: BatchStats,
    pub momentum: f64,
}

/// One forward (and optionally backward) pass over a [`ParamStore`].
///
/// Parameters are attached to the tape lazily, once per session; only
/// groups listed as trainable receive gradients.
pub struct Session<'s> {
    pub tape: Tape,
    pub train: bool,
    store: &'s ParamStore,
    vars: Vec<Option<Var>>,
    trainable: Vec<ParamGroup>,
    updates: Vec<StatUpdate>,
}

impl<'s> Session<'s> {
    pub fn new(store: &'s ParamStore, train: bool, trainable: &[ParamGroup]) -> Self {
        Session {
            tape: Tape::new(),
            train,
            store,
            vars: vec![None; store.len()],
            trainable: trainable.to_vec(),
            updates: Vec::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.vars[id.0] {
            return v;
        }
        let p = &self.store.params[id.0];
        let wants = self.trainable.contains(&p.group);
        let v = self.tape.input(Rc::clone(&p.value), wants);
        self.vars[id.0] = Some(v);
        v
    }

    pub fn record_stats(&mut self, update: StatUpdate) {
        self.updates.push(update);
    }

    /// Backpropagates `loss` and collects per-parameter gradients.
    pub fn backward(mut self, loss: Var) -> Result<Backward> {
        let loss_value = self.tape.value(loss).item()?;
        let grads = self.tape.backward(loss)?;
        Ok(Backward {
            loss: loss_value,
            grads: ParamGrads::collect(&self.vars, &grads),
            updates: self.updates,
        })
    }

    /// Ends an inference pass, returning any statistics updates.
    pub fn finish(self) -> Vec<StatUpdate> {
        self.updates
    }
}

pub struct Backward {
    pub loss: f64,
    pub grads: ParamGrads,
    pub updates: Vec<StatUpdate>,
}

#[derive(Debug, Clone, Default)]
pub struct ParamGrads {
    grads: Vec<Option<Tensor>>,
}

impl ParamGrads {
    fn collect(vars: &[Option<Var>], grads: &Gradients) -> Self {
        ParamGrads {
            grads: vars.iter().map(|v| v.and_then(|v| grads.get(v).cloned())).collect(),
        }
    }

    pub fn get(&self, id: ParamId) -> Option<&Tensor> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    pub fn all_finite(&self) -> bool {
        self.grads.iter().flatten().all(Tensor::is_finite)
    }
}

/// Folds running-statistics updates into their buffers:
/// `running = (1 − momentum)·running + momentum·batch`.
pub fn apply_stat_updates(store: &mut ParamStore, updates: &[StatUpdate]) {
    for u in updates {
        for (id, batch) in [(u.mean, &u.stats.mean), (u.var, &u.stats.var)] {
            let buf = store.get_mut(id);
            for (r, b) in buf.data_mut().iter_mut().zip(batch) {
                *r = (1.0 - u.momentum) * *r + u.momentum * b;
            }
        }
    }
}
