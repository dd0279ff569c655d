use rand::Rng as _;
use serde::{Deserialize, Serialize};

use super::dataset::Dataset;
use super::metrics::{AggregateReport, MetricsReport};
use super::train::{evaluate, train_model, HyperParams, Modality, TrainConfig, TrainMode, TrainedModel};
use crate::error::{Error, Result};
use crate::fusion::FusionConfig;
use crate::rng;

/// Independent repetitions per reported configuration.
pub const DEFAULT_RUNS: usize = 5;

/// Runs `run(index, seed)` for `n` seeds `base_seed + index` and aggregates.
/// The first failing run aborts the aggregation.
pub fn repeat_runs<F>(n: usize, base_seed: u64, mut run: F) -> Result<AggregateReport>
where
    F: FnMut(usize, u64) -> Result<MetricsReport>,
{
    if n == 0 {
        return Err(Error::invalid("repeat_runs needs at least one run"));
    }
    let seeds: Vec<u64> = (0..n as u64).map(|i| base_seed + i).collect();
    let mut runs = Vec::with_capacity(n);
    for (i, &seed) in seeds.iter().enumerate() {
        runs.push(run(i, seed)?);
    }
    AggregateReport::new(runs, seeds)
}

/// One complete experiment: train on the train split, score the test split.
pub fn train_and_evaluate(
    data: &Dataset,
    hp: &HyperParams,
    fusion: FusionConfig,
    modality: Modality,
    mode: &TrainMode,
    cfg: &TrainConfig,
) -> Result<(TrainedModel, MetricsReport)> {
    let trained = train_model(&data.train, hp, fusion, modality, mode, cfg)?;
    let report = evaluate(&trained.model, &data.test)?;
    Ok((trained, report))
}

/// Ranges for random search. Rates and decay are drawn log-uniformly from
/// `(lo, hi)`; layers and fusion width from their choice lists.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SearchSpace {
    pub cnn_layers: Vec<usize>,
    pub lr_cnn: (f64, f64),
    pub lr_alpha: (f64, f64),
    pub lr_text: (f64, f64),
    pub weight_decay: (f64, f64),
    pub fusion_hidden_dim: Vec<usize>,
}

impl Default for SearchSpace {
    fn default() -> Self {
        SearchSpace {
            cnn_layers: vec![4, 8, 12, 16],
            lr_cnn: (1e-3, 1e-1),
            lr_alpha: (1e-4, 1e-2),
            lr_text: (1e-4, 1e-2),
            weight_decay: (1e-5, 1e-3),
            fusion_hidden_dim: vec![8, 16, 32],
        }
    }
}

fn log_uniform(r: &mut rng::Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        lo
    } else {
        r.gen_range(lo.ln()..hi.ln()).exp()
    }
}

impl SearchSpace {
    pub fn validate(&self) -> Result<()> {
        for (name, (lo, hi)) in [
            ("lr_cnn", self.lr_cnn),
            ("lr_alpha", self.lr_alpha),
            ("lr_text", self.lr_text),
            ("weight_decay", self.weight_decay),
        ] {
            if !(lo > 0.0 && lo <= hi && hi.is_finite()) {
                return Err(Error::Config(format!("{name} range ({lo}, {hi}) must satisfy 0 < lo <= hi")));
            }
        }
        if self.cnn_layers.is_empty() || self.cnn_layers.iter().any(|&l| l < 2) {
            return Err(Error::Config("cnn_layers choices must be non-empty and each at least 2".into()));
        }
        if self.fusion_hidden_dim.is_empty() || self.fusion_hidden_dim.contains(&0) {
            return Err(Error::Config("fusion_hidden_dim choices must be non-empty and positive".into()));
        }
        Ok(())
    }

    /// One draw. Every trial trains with `seed`, so configurations are
    /// compared on the same split and initialization stream.
    pub fn sample(&self, r: &mut rng::Rng, seed: u64) -> HyperParams {
        HyperParams {
            cnn_layers: self.cnn_layers[r.gen_range(0..self.cnn_layers.len())],
            lr_cnn: log_uniform(r, self.lr_cnn),
            lr_alpha: log_uniform(r, self.lr_alpha),
            lr_text: log_uniform(r, self.lr_text),
            weight_decay: log_uniform(r, self.weight_decay),
            fusion_hidden_dim: self.fusion_hidden_dim[r.gen_range(0..self.fusion_hidden_dim.len())],
            seed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trial {
    pub index: usize,
    pub params: HyperParams,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct HpoResult {
    pub best: usize,
    pub trials: Vec<Trial>,
}

impl HpoResult {
    pub fn best_params(&self) -> &HyperParams {
        &self.trials[self.best].params
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        out.write_record([
            "trial",
            "cnn_layers",
            "lr_cnn",
            "lr_alpha",
            "lr_text",
            "weight_decay",
            "fusion_hidden_dim",
            "seed",
            "val_accuracy",
        ])?;
        for t in &self.trials {
            let p = &t.params;
            out.write_record([
                t.index.to_string(),
                p.cnn_layers.to_string(),
                format!("{:e}", p.lr_cnn),
                format!("{:e}", p.lr_alpha),
                format!("{:e}", p.lr_text),
                format!("{:e}", p.weight_decay),
                p.fusion_hidden_dim.to_string(),
                p.seed.to_string(),
                format!("{:.4}", t.val_accuracy),
            ])?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Samples `budget` configurations and keeps the one with the highest
/// objective (validation accuracy); ties go to the earlier trial.
pub fn random_search_hpo<F>(space: &SearchSpace, budget: usize, seed: u64, mut objective: F) -> Result<HpoResult>
where
    F: FnMut(&HyperParams) -> Result<f64>,
{
    space.validate()?;
    if budget == 0 {
        return Err(Error::Config("hpo budget must be at least 1".into()));
    }
    let mut r = rng::stream(seed, "hpo");
    let mut trials = Vec::with_capacity(budget);
    let mut best = 0;
    for index in 0..budget {
        let params = space.sample(&mut r, seed);
        let val_accuracy = objective(&params)?;
        if val_accuracy > trials.get(best).map_or(f64::NEG_INFINITY, |t: &Trial| t.val_accuracy) {
            best = index;
        }
        trials.push(Trial {
            index,
            params,
            val_accuracy,
        });
    }
    Ok(HpoResult { best, trials })
}

/// The depths of the layer ablation.
pub const DEFAULT_ABLATION_LAYERS: [usize; 8] = [4, 8, 12, 16, 20, 24, 28, 30];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub layers: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub specificity: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct AblationTable {
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    /// `(layers, accuracy)` points.
    pub fn series(&self) -> Vec<(usize, f64)> {
        self.rows.iter().map(|r| (r.layers, r.accuracy)).collect()
    }

    pub fn write_csv<W: std::io::Write>(&self, w: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(w);
        for r in &self.rows {
            out.serialize(r)?;
        }
        out.flush()?;
        Ok(())
    }
}

/// Evaluates `run(layers)` for each depth, everything else held fixed.
pub fn ablate_layers<F>(layers: &[usize], mut run: F) -> Result<AblationTable>
where
    F: FnMut(usize) -> Result<MetricsReport>,
{
    if layers.is_empty() {
        return Err(Error::Config("ablation needs at least one depth".into()));
    }
    if let Some(l) = layers.iter().find(|&&l| l < 2) {
        return Err(Error::Config(format!("ablation depth {l} is below 2")));
    }
    let rows = layers
        .iter()
        .map(|&l| {
            let m = run(l)?.metrics;
            Ok(AblationRow {
                layers: l,
                accuracy: m.accuracy,
                precision: m.precision,
                recall: m.recall,
                f1: m.f1,
                specificity: m.specificity,
            })
        })
        .collect::<Result<_>>()?;
    Ok(AblationTable { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::pipeline::metrics::Confusion;

    fn report(tp: usize, tn: usize) -> MetricsReport {
        MetricsReport::from_confusion(Confusion { tp, fp: 4 - tn, fn_: 4 - tp, tn })
    }

    #[test]
    fn identical_runs_have_zero_std() {
        let agg = repeat_runs(5, 10, |_, _| Ok(report(3, 2))).unwrap();
        assert_eq!(agg.std.values(), [0.0; 5]);
        assert_eq!(agg.mean, report(3, 2).metrics);
        assert_eq!(agg.seeds, vec![10, 11, 12, 13, 14]);
    }

    #[test]
    fn failing_run_aborts() {
        let r = repeat_runs(3, 0, |i, _| if i == 1 { Err(Error::invalid("boom")) } else { Ok(report(1, 1)) });
        assert!(r.is_err());
    }

    #[test]
    fn budget_one_returns_its_config() {
        let space = SearchSpace::default();
        let res = random_search_hpo(&space, 1, 3, |_| Ok(50.0)).unwrap();
        assert_eq!(res.best, 0);
        assert_eq!(res.best_params(), &space.sample(&mut rng::stream(3, "hpo"), 3));
    }

    #[test]
    fn invalid_space_is_rejected() {
        let space = SearchSpace {
            lr_cnn: (0.0, 1.0),
            ..SearchSpace::default()
        };
        assert!(random_search_hpo(&space, 2, 0, |_| Ok(0.0)).is_err());
        assert!(ablate_layers(&[4, 1], |_| Ok(report(1, 1))).is_err());
    }

    #[test]
    fn singleton_ablation() {
        let t = ablate_layers(&[4], |_| Ok(report(4, 4))).unwrap();
        assert_eq!(t.series(), vec![(4, 100.0)]);
    }
}
