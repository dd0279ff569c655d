use std::cell::RefCell;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::dataset::Sample;
use super::metrics::MetricsReport;
use crate::darts::{search_step, weight_step, Architecture, Genotype, Network, NetworkConfig, SearchOptimizers};
use crate::error::{Error, Result};
use crate::fusion::{predict, Classifier, Fusion, FusionConfig};
use crate::nn::{apply_stat_updates, Linear, ParamGroup, ParamStore, Session};
use crate::rng::{self, Rng};
use crate::tensor::{Tensor, Var};
use crate::text::{TextEncoder, TextEncoderConfig, TokenSequence, Vocabulary};

/// The searched hyperparameters. `lr_text` drives every non-convolutional
/// weight: text encoder, fusion and classifier.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct HyperParams {
    pub cnn_layers: usize,
    pub lr_cnn: f64,
    pub lr_alpha: f64,
    pub lr_text: f64,
    pub weight_decay: f64,
    pub fusion_hidden_dim: usize,
    pub seed: u64,
}

impl Default for HyperParams {
    fn default() -> Self {
        HyperParams {
            cnn_layers: 8,
            lr_cnn: 0.025,
            lr_alpha: 3e-3,
            lr_text: 1e-3,
            weight_decay: 3e-4,
            fusion_hidden_dim: 16,
            seed: 0,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if self.cnn_layers < 2 {
            return Err(Error::Config(format!("cnn_layers must be at least 2, got {}", self.cnn_layers)));
        }
        for (name, v) in [
            ("lr_cnn", self.lr_cnn),
            ("lr_alpha", self.lr_alpha),
            ("lr_text", self.lr_text),
            ("weight_decay", self.weight_decay),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!("{name} must be a non-negative number, got {v}")));
            }
        }
        if self.fusion_hidden_dim == 0 {
            return Err(Error::Config("fusion_hidden_dim must be positive".into()));
        }
        Ok(())
    }
}

/// Settings that stay fixed across an experiment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub val_fraction: f64,
    /// Cell channels before the first reduction.
    pub channels: usize,
    pub stem_multiplier: usize,
    pub downsample: usize,
    pub vocab_size: usize,
    pub text: TextEncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 50,
            batch_size: 8,
            val_fraction: 0.2,
            channels: 4,
            stem_multiplier: 3,
            downsample: 16,
            vocab_size: Vocabulary::default().size,
            text: TextEncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 || self.channels == 0 {
            return Err(Error::Config("epochs, batch_size and channels must be positive".into()));
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return Err(Error::Config(format!("val_fraction must lie in (0, 1), got {}", self.val_fraction)));
        }
        Ok(())
    }

    pub fn network(&self, layers: usize) -> NetworkConfig {
        NetworkConfig {
            layers,
            channels: self.channels,
            stem_multiplier: self.stem_multiplier,
            downsample: self.downsample,
            out_dim: 64,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Modality {
    Multimodal,
    AudioOnly,
    TextOnly,
}

impl std::str::FromStr for Modality {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "multimodal" => Ok(Modality::Multimodal),
            "audio_only" => Ok(Modality::AudioOnly),
            "text_only" => Ok(Modality::TextOnly),
            _ => Err(Error::invalid(format!("unknown modality {s:?} (multimodal, audio_only, text_only)"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum TrainMode {
    /// Bilevel search of the cell architecture alongside the weights.
    Search,
    /// Weights only, on a fixed cell.
    Fixed(Genotype),
}

impl TrainMode {
    fn architecture(&self) -> Architecture {
        match self {
            TrainMode::Search => Architecture::Search,
            TrainMode::Fixed(g) => Architecture::Fixed(g.clone()),
        }
    }
}

/// Inputs laid out for batching: audio pooled once, tokens, labels.
#[derive(Debug, Clone)]
pub struct Prepared {
    images: Vec<Vec<f64>>,
    image_shape: [usize; 3],
    tokens: Vec<TokenSequence>,
    pub labels: Vec<usize>,
}

impl Prepared {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    fn image_batch(&self, idx: &[usize]) -> Result<Tensor> {
        let [c, h, w] = self.image_shape;
        let mut data = Vec::with_capacity(idx.len() * c * h * w);
        for &i in idx {
            data.extend_from_slice(&self.images[i]);
        }
        Tensor::new(vec![idx.len(), c, h, w], data)
    }
}

/// Audio network and/or text encoder, the fusion (or a unimodal dense
/// layer) and the two-way classifier, with their parameters.
#[derive(Debug, Clone)]
pub struct Model {
    pub store: ParamStore,
    pub modality: Modality,
    pub audio: Option<Network>,
    pub text: Option<TextEncoder>,
    pub fusion: Option<Fusion>,
    pub unimodal: Option<Linear>,
    pub classifier: Classifier,
}

impl Model {
    pub fn new(
        modality: Modality,
        mode: &TrainMode,
        hp: &HyperParams,
        fusion: FusionConfig,
        cfg: &TrainConfig,
    ) -> Result<Model> {
        let mut store = ParamStore::new();
        let seed = hp.seed;
        let audio = match modality {
            Modality::TextOnly => None,
            _ => Some(Network::new(
                &mut store,
                "audio",
                cfg.network(hp.cnn_layers),
                &mode.architecture(),
                &mut rng::stream(seed, "model/audio"),
            )?),
        };
        let text = match modality {
            Modality::AudioOnly => None,
            _ => Some(TextEncoder::new(
                &mut store,
                "text",
                Vocabulary::new(cfg.vocab_size)?,
                cfg.text,
                &mut rng::stream(seed, "model/text"),
            )),
        };
        let mut r = rng::stream(seed, "model/head");
        let (fusion, unimodal, width) = match modality {
            Modality::Multimodal => {
                let fc = FusionConfig {
                    t_dim: cfg.text.out_dim,
                    v_dim: 64,
                    ..fusion.with_hidden_dim(hp.fusion_hidden_dim)
                };
                let out = fc.out_dim;
                (Some(Fusion::new(&mut store, "fusion", fc, &mut r)?), None, out)
            }
            _ => {
                let in_dim = if modality == Modality::TextOnly { cfg.text.out_dim } else { 64 };
                let dense = Linear::new(&mut store, "unimodal", in_dim, fusion.out_dim, true, ParamGroup::Head, &mut r);
                (None, Some(dense), fusion.out_dim)
            }
        };
        let classifier = Classifier::new(&mut store, "classifier", width, &mut r);
        Ok(Model {
            store,
            modality,
            audio,
            text,
            fusion,
            unimodal,
            classifier,
        })
    }

    pub fn prepare(&self, samples: &[Sample]) -> Result<Prepared> {
        let mut images = Vec::new();
        let mut image_shape = [0; 3];
        if let Some(net) = &self.audio {
            for s in samples {
                let (h, w, c) = s.feature_image.shape();
                let x = Tensor::new(vec![1, c, h, w], s.feature_image.to_chw())?;
                let pooled = net.downsample(&x)?;
                let sh = pooled.shape();
                image_shape = [sh[1], sh[2], sh[3]];
                images.push(pooled.into_data());
            }
        }
        Ok(Prepared {
            images,
            image_shape,
            tokens: samples.iter().map(|s| s.tokens.clone()).collect(),
            labels: samples.iter().map(|s| s.label).collect(),
        })
    }

    /// Logits `[B × 2]` for the rows `idx` of `data`.
    pub fn logits(&self, s: &mut Session, data: &Prepared, idx: &[usize]) -> Result<Var> {
        let zv = match &self.audio {
            Some(net) => {
                let x = s.tape.constant(data.image_batch(idx)?);
                Some(net.forward_pooled(s, x)?)
            }
            None => None,
        };
        let zt = match &self.text {
            Some(enc) => {
                let batch: Vec<&TokenSequence> = idx.iter().map(|&i| &data.tokens[i]).collect();
                Some(enc.forward(s, &batch)?)
            }
            None => None,
        };
        let z = match (&self.fusion, &self.unimodal, zt, zv) {
            (Some(f), _, Some(zt), Some(zv)) => f.forward(s, zt, zv)?,
            (None, Some(dense), zt, zv) => {
                let z = zt.or(zv).ok_or_else(|| Error::invalid("model has no encoder"))?;
                let h = dense.forward(s, z)?;
                s.tape.relu(h)
            }
            _ => return Err(Error::invalid("inconsistent model layout")),
        };
        Ok(self.classifier.forward(s, z, None)?.0)
    }

    fn loss(&self, s: &mut Session, data: &Prepared, idx: &[usize], preds: Option<&RefCell<Vec<usize>>>) -> Result<Var> {
        let logits = self.logits(s, data, idx)?;
        if let Some(p) = preds {
            *p.borrow_mut() = predict(s.tape.value(logits));
        }
        let labels: Vec<usize> = idx.iter().map(|&i| data.labels[i]).collect();
        s.tape.cross_entropy(logits, &labels)
    }

    /// Mean loss and predictions over `idx`, in batches. `batch_stats`
    /// normalizes with each batch's own statistics instead of the running
    /// ones.
    pub fn score(&self, data: &Prepared, idx: &[usize], batch_size: usize, batch_stats: bool) -> Result<(f64, Vec<usize>)> {
        let mut total = 0.0;
        let mut preds = Vec::with_capacity(idx.len());
        for chunk in idx.chunks(batch_size) {
            let mut s = Session::new(&self.store, batch_stats, &[]);
            let logits = self.logits(&mut s, data, chunk)?;
            preds.extend(predict(s.tape.value(logits)));
            let labels: Vec<usize> = chunk.iter().map(|&i| data.labels[i]).collect();
            let loss = s.tape.cross_entropy(logits, &labels)?;
            total += s.tape.value(loss).item()? * chunk.len() as f64;
        }
        Ok((total / idx.len() as f64, preds))
    }

    /// Replaces the running normalization statistics with their average
    /// over `idx` (in fixed batches) under the current weights.
    pub fn recalibrate(&mut self, data: &Prepared, idx: &[usize], batch_size: usize) -> Result<()> {
        if self.audio.is_none() {
            return Ok(());
        }
        let mut seen = 0;
        for chunk in idx.chunks(batch_size) {
            let mut updates = {
                let mut s = Session::new(&self.store, true, &[]);
                self.logits(&mut s, data, chunk)?;
                s.finish()
            };
            seen += chunk.len();
            for u in &mut updates {
                u.momentum = chunk.len() as f64 / seen as f64;
            }
            apply_stat_updates(&mut self.store, &updates);
        }
        Ok(())
    }

    /// Discrete cell of the audio network.
    pub fn genotype(&self) -> Option<Result<Genotype>> {
        self.audio.as_ref().map(|n| n.genotype(&self.store))
    }
}

/// Index of the smallest value; ties go to the earliest.
pub fn select_best_epoch(val_losses: &[f64]) -> Result<usize> {
    if val_losses.is_empty() {
        return Err(Error::invalid("no validation losses to select from"));
    }
    let mut best = 0;
    for (i, &v) in val_losses.iter().enumerate().skip(1) {
        if v < val_losses[best] {
            best = i;
        }
    }
    Ok(best)
}

/// Per class, `round(n_c · val_fraction)` indices (at least one when the
/// class has two or more) go to validation. Both halves come back sorted.
pub fn stratified_split(labels: &[usize], val_fraction: f64, rng: &mut Rng) -> (Vec<usize>, Vec<usize>) {
    let mut train = Vec::new();
    let mut val = Vec::new();
    let mut classes: Vec<usize> = labels.to_vec();
    classes.sort_unstable();
    classes.dedup();
    for c in classes {
        let mut members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        members.shuffle(rng);
        let n = members.len();
        let mut k = (n as f64 * val_fraction).round() as usize;
        if n >= 2 {
            k = k.clamp(1, n - 1);
        } else {
            k = 0;
        }
        val.extend_from_slice(&members[..k]);
        train.extend_from_slice(&members[k..]);
    }
    train.sort_unstable();
    val.sort_unstable();
    (train, val)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    pub batches: usize,
    pub train_loss: f64,
    pub train_accuracy: f64,
    pub val_loss: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub batch_size: usize,
    pub train_size: usize,
    pub val_size: usize,
    pub epochs: Vec<EpochLog>,
    pub best_epoch: usize,
}

impl TrainLog {
    pub fn best(&self) -> &EpochLog {
        &self.epochs[self.best_epoch]
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for e in &self.epochs {
            out.serialize(e)?;
        }
        out.flush()?;
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct TrainedModel {
    pub model: Model,
    pub log: TrainLog,
}

fn accuracy(preds: &[usize], labels: impl Iterator<Item = usize>) -> f64 {
    let n = preds.len();
    let hits = preds.iter().zip(labels).filter(|(p, y)| **p == *y).count();
    100.0 * hits as f64 / n.max(1) as f64
}

fn at(epoch: usize, batch: Option<usize>, e: Error) -> Error {
    let place = match batch {
        Some(b) => format!("epoch {epoch}, batch {b}"),
        None => format!("epoch {epoch}, validation"),
    };
    match e {
        Error::NonFinite(m) => Error::NonFinite(format!("{place}: {m}")),
        other => other,
    }
}

/// Trains on an internal stratified train/validation split of `train` and
/// keeps the parameters of the epoch with the smallest validation loss,
/// whose normalization statistics are then recomputed on the training part.
///
/// In search mode every batch takes a weight step on a training batch and
/// an α step on the next validation batch (cycling). Validation loss is
/// measured with per-batch normalization statistics over fixed batches.
pub fn train_model(
    train: &[Sample],
    hp: &HyperParams,
    fusion: FusionConfig,
    modality: Modality,
    mode: &TrainMode,
    cfg: &TrainConfig,
) -> Result<TrainedModel> {
    hp.validate()?;
    cfg.validate()?;
    if let TrainMode::Fixed(g) = mode {
        g.validate()?;
    }
    let mut model = Model::new(modality, mode, hp, fusion, cfg)?;
    let data = model.prepare(train)?;
    let (mut train_idx, val_idx) = stratified_split(&data.labels, cfg.val_fraction, &mut rng::stream(hp.seed, "split"));
    if train_idx.is_empty() || val_idx.is_empty() {
        return Err(Error::Dataset(format!(
            "{} samples are too few for a train/validation split",
            data.len()
        )));
    }
    let searching = matches!(mode, TrainMode::Search) && model.audio.is_some();
    let mut opt = SearchOptimizers::new(hp.lr_cnn, hp.lr_text, hp.lr_alpha, hp.weight_decay);
    let val_batches: Vec<&[usize]> = val_idx.chunks(cfg.batch_size).collect();
    let mut shuffle = rng::stream(hp.seed, "shuffle");
    let mut epochs = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(f64, ParamStore)> = None;
    let mut step = 0;

    for epoch in 0..cfg.epochs {
        train_idx.shuffle(&mut shuffle);
        let mut loss_sum = 0.0;
        let mut preds = Vec::with_capacity(train_idx.len());
        let mut batches = 0;
        for (b, batch) in train_idx.chunks(cfg.batch_size).enumerate() {
            let batch_preds = RefCell::new(Vec::new());
            let mut store = std::mem::take(&mut model.store);
            let loss = {
                let m = &model;
                let train_loss = |s: &mut Session| m.loss(s, &data, batch, Some(&batch_preds));
                if searching {
                    let vb = val_batches[step % val_batches.len()];
                    let val_loss = |s: &mut Session| m.loss(s, &data, vb, None);
                    search_step(&mut store, &mut opt, train_loss, val_loss).map(|l| l.train)
                } else {
                    weight_step(&mut store, &mut opt, train_loss)
                }
            };
            model.store = store;
            let loss = loss.map_err(|e| at(epoch, Some(b), e))?;
            loss_sum += loss * batch.len() as f64;
            preds.extend(batch_preds.into_inner());
            batches += 1;
            step += 1;
        }
        let train_accuracy = accuracy(&preds, train_idx.iter().map(|&i| data.labels[i]));
        let (val_loss, val_preds) = model
            .score(&data, &val_idx, cfg.batch_size, true)
            .map_err(|e| at(epoch, None, e))?;
        if !val_loss.is_finite() {
            return Err(Error::NonFinite(format!("epoch {epoch}, validation: loss is {val_loss}")));
        }
        let val_accuracy = accuracy(&val_preds, val_idx.iter().map(|&i| data.labels[i]));
        if best.as_ref().map_or(true, |(b, _)| val_loss < *b) {
            best = Some((val_loss, model.store.clone()));
        }
        epochs.push(EpochLog {
            epoch,
            batches,
            train_loss: loss_sum / train_idx.len() as f64,
            train_accuracy,
            val_loss,
            val_accuracy,
        });
    }
    let val_losses: Vec<f64> = epochs.iter().map(|e| e.val_loss).collect();
    let best_epoch = select_best_epoch(&val_losses)?;
    model.store = best.expect("at least one epoch").1;
    train_idx.sort_unstable();
    model.recalibrate(&data, &train_idx, cfg.batch_size)?;
    Ok(TrainedModel {
        model,
        log: TrainLog {
            batch_size: cfg.batch_size,
            train_size: train_idx.len(),
            val_size: val_idx.len(),
            epochs,
            best_epoch,
        },
    })
}

/// Test-set metrics with running normalization statistics.
pub fn evaluate(model: &Model, test: &[Sample]) -> Result<MetricsReport> {
    if test.is_empty() {
        return Err(Error::invalid("empty test set"));
    }
    let data = model.prepare(test)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let (_, preds) = model.score(&data, &idx, 8, false)?;
    MetricsReport::from_predictions(&preds, &data.labels)
}
