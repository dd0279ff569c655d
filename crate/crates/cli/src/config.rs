use std::path::{Path, PathBuf};

use adnas_core::fusion::{FusionConfig, FusionMethod};
use adnas_core::pipeline::{CrossmodalRule, HyperParams, Modality, SearchSpace, TrainConfig, DEFAULT_RUNS};
use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::{Deserialize, Serialize};

#[derive(Debug, Parser)]
#[command(name = "adnas", version, about = "Architecture search and multimodal fusion for speech-based dementia screening")]
pub struct Cli {
    /// TOML config file. Flags override its values.
    #[arg(long, global = true, value_name = "FILE")]
    pub config: Option<PathBuf>,

    /// Base seed for every random stream.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Run strictly sequentially so repeated invocations match byte for byte.
    #[arg(long, global = true)]
    pub deterministic: bool,

    /// Per-epoch progress on stderr.
    #[arg(long, short, global = true)]
    pub verbose: bool,

    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Write a synthetic corpus in the dataset layout.
    GenData(GenDataArgs),
    /// Cache feature images next to a dataset's audio.
    Features(FeaturesArgs),
    /// Search the cell architecture and export the genotype.
    Search(TrainArgs),
    /// Train, evaluate on the test split and write metrics.
    Train(TrainArgs),
    /// Evaluate a trained model on a dataset's test split.
    Eval(EvalArgs),
    /// Random hyperparameter search on the validation split.
    Hpo(HpoArgs),
    /// Test accuracy as a function of the number of cells.
    Ablate(AblateArgs),
    /// Render one cell of a genotype as Graphviz DOT.
    ExportCell(ExportArgs),
}

fn pair(s: &str) -> Result<(usize, usize), String> {
    let (a, b) = s.split_once(',').ok_or_else(|| format!("expected POS,NEG, got {s:?}"))?;
    let parse = |v: &str| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"));
    Ok((parse(a)?, parse(b)?))
}

fn usize_list(s: &str) -> Result<Vec<usize>, String> {
    s.split(',').map(|v| v.trim().parse::<usize>().map_err(|e| format!("{v:?}: {e}"))).collect()
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    /// Corpus directory.
    #[arg(long, env = "ADNAS_OUT")]
    pub out: PathBuf,
    /// Label rule: audio_only, text_only or xor.
    #[arg(long, default_value = "xor")]
    pub rule: CrossmodalRule,
    /// Train class sizes POS,NEG.
    #[arg(long, value_parser = pair, default_value = "78,78")]
    pub train: (usize, usize),
    /// Test class sizes POS,NEG.
    #[arg(long, value_parser = pair, default_value = "24,24")]
    pub test: (usize, usize),
    #[arg(long, default_value_t = 16_000)]
    pub sample_rate: u32,
}

#[derive(Debug, Args)]
pub struct FeaturesArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
}

/// Model and optimization flags shared by the training commands.
#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Dataset root.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory.
    #[arg(long, env = "ADNAS_OUT")]
    pub out: Option<PathBuf>,
    /// Fixed cell genotype (JSON). Without it the cell is searched.
    #[arg(long)]
    pub genotype: Option<PathBuf>,
    /// multimodal, audio_only or text_only.
    #[arg(long)]
    pub modality: Option<Modality>,
    /// tucker, mfb, mfh, block or concat.
    #[arg(long)]
    pub fusion: Option<FusionMethod>,
    /// Number of stacked cells.
    #[arg(long)]
    pub layers: Option<usize>,
    #[arg(long)]
    pub lr_cnn: Option<f64>,
    #[arg(long)]
    pub lr_alpha: Option<f64>,
    /// Learning rate of the text encoder, fusion and classifier.
    #[arg(long)]
    pub lr_text: Option<f64>,
    #[arg(long)]
    pub weight_decay: Option<f64>,
    #[arg(long)]
    pub fusion_hidden_dim: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    /// Cell channels before the first reduction.
    #[arg(long)]
    pub channels: Option<usize>,
    /// Independent runs with seeds seed, seed+1, ... (default 5)
    #[arg(long)]
    pub runs: Option<usize>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory written by `train`.
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (defaults to MODEL/eval).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct HpoArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Number of sampled configurations.
    #[arg(long)]
    pub budget: Option<usize>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub train: TrainArgs,
    /// Depths to evaluate, comma separated.
    #[arg(long, value_parser = usize_list)]
    pub depths: Option<Vec<usize>>,
}

#[derive(Debug, Args)]
pub struct ExportArgs {
    /// Genotype JSON.
    #[arg(long)]
    pub genotype: PathBuf,
    #[arg(long, default_value = "normal")]
    pub cell: adnas_core::darts::CellKind,
    /// DOT file; stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HpoConfig {
    pub budget: usize,
    pub space: SearchSpace,
}

impl Default for HpoConfig {
    fn default() -> Self {
        HpoConfig {
            budget: 10,
            space: SearchSpace::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AblationConfig {
    pub depths: Vec<usize>,
}

impl Default for AblationConfig {
    fn default() -> Self {
        AblationConfig {
            depths: adnas_core::pipeline::DEFAULT_ABLATION_LAYERS.to_vec(),
        }
    }
}

/// Fully resolved settings: defaults, then the config file, then flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub genotype: Option<PathBuf>,
    pub seed: u64,
    pub deterministic: bool,
    pub modality: Modality,
    pub runs: usize,
    pub hyper: HyperParams,
    pub train: TrainConfig,
    pub fusion: FusionConfig,
    pub hpo: HpoConfig,
    pub ablation: AblationConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            data: None,
            out: None,
            genotype: None,
            seed: 0,
            deterministic: false,
            modality: Modality::Multimodal,
            runs: DEFAULT_RUNS,
            hyper: HyperParams::default(),
            train: TrainConfig::default(),
            fusion: FusionConfig::default(),
            hpo: HpoConfig::default(),
            ablation: AblationConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn load(cli: &Cli) -> Result<Self> {
        let mut cfg = match &cli.config {
            Some(path) => Self::from_file(path)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = cli.seed {
            cfg.seed = seed;
        }
        cfg.deterministic |= cli.deterministic;
        cfg.hyper.seed = cfg.seed;
        Ok(cfg)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        toml::from_str(&text).with_context(|| format!("parsing config {}", path.display()))
    }

    pub fn apply(&mut self, a: &TrainArgs) {
        macro_rules! set {
            ($dst:expr, $src:expr) => {
                if let Some(v) = $src.clone() {
                    $dst = v;
                }
            };
        }
        if a.data.is_some() {
            self.data = a.data.clone();
        }
        if a.out.is_some() {
            self.out = a.out.clone();
        }
        if a.genotype.is_some() {
            self.genotype = a.genotype.clone();
        }
        set!(self.modality, a.modality);
        set!(self.fusion.method, a.fusion);
        set!(self.hyper.cnn_layers, a.layers);
        set!(self.hyper.lr_cnn, a.lr_cnn);
        set!(self.hyper.lr_alpha, a.lr_alpha);
        set!(self.hyper.lr_text, a.lr_text);
        set!(self.hyper.weight_decay, a.weight_decay);
        set!(self.hyper.fusion_hidden_dim, a.fusion_hidden_dim);
        set!(self.train.epochs, a.epochs);
        set!(self.train.batch_size, a.batch_size);
        set!(self.train.channels, a.channels);
        set!(self.runs, a.runs);
    }

    pub fn data_root(&self) -> Result<&Path> {
        match &self.data {
            Some(d) => Ok(d),
            None => bail!("no dataset given (use --data or `data` in the config file)"),
        }
    }

    pub fn out_dir(&self, fallback: &str) -> PathBuf {
        self.out.clone().unwrap_or_else(|| PathBuf::from(fallback))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file_values() {
        let mut cfg: RunConfig = toml::from_str(
            "seed = 3\n[hyper]\ncnn_layers = 12\nlr_cnn = 0.5\n[train]\nepochs = 7\n[fusion]\nmethod = \"mfh\"\n",
        )
        .unwrap();
        assert_eq!(cfg.train.batch_size, 8);
        let cli = Cli::try_parse_from(["adnas", "train", "--layers", "4", "--fusion", "tucker"]).unwrap();
        let Command::Train(args) = &cli.command else { panic!() };
        cfg.apply(args);
        assert_eq!(cfg.hyper.cnn_layers, 4);
        assert_eq!(cfg.hyper.lr_cnn, 0.5);
        assert_eq!(cfg.train.epochs, 7);
        assert_eq!(cfg.fusion.method, FusionMethod::Tucker);
        assert_eq!(cfg.seed, 3);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        assert!(toml::from_str::<RunConfig>("layers = 3\n").is_err());
    }

    #[test]
    fn class_size_pairs() {
        assert_eq!(pair("78,78").unwrap(), (78, 78));
        assert!(pair("78").is_err());
    }
}
