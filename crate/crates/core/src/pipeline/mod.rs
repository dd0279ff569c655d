//! Datasets, training with validation-loss model selection, metrics and
//! the multi-run, random-search and depth-ablation harnesses.

mod dataset;
mod experiments;
mod manifest;
mod metrics;
mod synthetic;
mod train;

pub use dataset::{
    audio_path, build_samples, class_counts, feature_path, labels_path, load_dataset, load_raw_split, read_labels,
    transcript_path, write_split, Dataset, RawSample, Sample, Split,
};
pub use experiments::{
    ablate_layers, random_search_hpo, repeat_runs, train_and_evaluate, AblationRow, AblationTable, HpoResult,
    SearchSpace, Trial, DEFAULT_ABLATION_LAYERS, DEFAULT_RUNS,
};
pub use manifest::RunManifest;
pub use metrics::{mean_std, AggregateReport, Confusion, MetricSet, MetricsReport};
pub use synthetic::{generate_synthetic_dataset, synthesize, CrossmodalRule, SyntheticCorpus, SyntheticItem, SyntheticSpec};
pub use train::{
    evaluate, select_best_epoch, stratified_split, train_model, EpochLog, HyperParams, Modality, Model, Prepared,
    TrainConfig, TrainLog, TrainMode, TrainedModel,
};
