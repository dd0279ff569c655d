use std::fs::{self, File};
use std::io::BufWriter;
use std::path::{Path, PathBuf};

use adnas_core::audio::{write_feature_image, FeatureConfig, FeatureExtractor};
use adnas_core::darts::{export_genotype_dot, CellKind, Genotype};
use adnas_core::fusion::FusionConfig;
use adnas_core::pipeline::{
    ablate_layers, build_samples, evaluate, feature_path, generate_synthetic_dataset, load_dataset, load_raw_split,
    random_search_hpo, repeat_runs, train_model, Dataset, HyperParams, Modality, Model, RunManifest, Split,
    SyntheticSpec, TrainConfig, TrainMode, TrainedModel,
};
use adnas_core::text::Vocabulary;
use anyhow::{Context, Result};
use serde::{Deserialize, Serialize};

use crate::config::{Cli, Command, EvalArgs, ExportArgs, FeaturesArgs, GenDataArgs, RunConfig};

pub fn run(cli: Cli) -> Result<()> {
    let mut cfg = RunConfig::load(&cli)?;
    let verbose = cli.verbose;
    match &cli.command {
        Command::GenData(a) => gen_data(&cfg, a),
        Command::Features(a) => features(&mut cfg, a),
        Command::Search(a) => {
            cfg.apply(a);
            search(&cfg, verbose)
        }
        Command::Train(a) => {
            cfg.apply(a);
            train(&cfg, verbose)
        }
        Command::Eval(a) => eval(&mut cfg, a),
        Command::Hpo(a) => {
            cfg.apply(&a.train);
            if let Some(b) = a.budget {
                cfg.hpo.budget = b;
            }
            hpo(&cfg, verbose)
        }
        Command::Ablate(a) => {
            cfg.apply(&a.train);
            if let Some(d) = &a.depths {
                cfg.ablation.depths = d.clone();
            }
            ablate(&cfg, verbose)
        }
        Command::ExportCell(a) => export_cell(&cfg, a),
    }
}

fn create_dir(dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn csv_file(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path).with_context(|| format!("creating {}", path.display()))?))
}

fn manifest(command: &str, cfg: &RunConfig) -> Result<RunManifest> {
    let mut m = RunManifest::new(command, serde_json::to_value(cfg)?);
    m.seed("run", cfg.seed);
    Ok(m)
}

fn finish(mut m: RunManifest, dir: &Path, artifacts: &[&str]) -> Result<()> {
    for a in artifacts {
        m.artifact(*a);
    }
    let name = format!("manifest-{}.json", m.command);
    m.write(&dir.join(name))?;
    Ok(())
}

fn load_data(cfg: &RunConfig) -> Result<Dataset> {
    let root = cfg.data_root()?;
    let fx = FeatureExtractor::new(FeatureConfig::default())?;
    let vocab = Vocabulary::new(cfg.train.vocab_size)?;
    let data = load_dataset(root, &fx, &vocab).with_context(|| format!("loading dataset {}", root.display()))?;
    let [(tp, tn), (sp, sn)] = data.class_counts();
    eprintln!("dataset {}: train {tp}+/{tn}-, test {sp}+/{sn}-", root.display());
    Ok(data)
}

fn train_mode(cfg: &RunConfig) -> Result<TrainMode> {
    Ok(match &cfg.genotype {
        Some(p) => TrainMode::Fixed(Genotype::load(p).with_context(|| format!("loading genotype {}", p.display()))?),
        None => TrainMode::Search,
    })
}

fn report_epochs(t: &TrainedModel, verbose: bool) {
    if verbose {
        for e in &t.log.epochs {
            eprintln!(
                "epoch {:>3}  batches {:>3}  train loss {:.4} acc {:6.2}  val loss {:.4} acc {:6.2}",
                e.epoch, e.batches, e.train_loss, e.train_accuracy, e.val_loss, e.val_accuracy
            );
        }
    }
    let b = t.log.best();
    eprintln!("best epoch {} (val loss {:.4}, val acc {:.2})", b.epoch, b.val_loss, b.val_accuracy);
}

/// What `eval` needs to rebuild a trained model.
#[derive(Debug, Serialize, Deserialize)]
struct ModelSpec {
    modality: Modality,
    hyper: HyperParams,
    train: TrainConfig,
    fusion: FusionConfig,
    /// `None` for a searched (mixed-op) network.
    genotype: Option<Genotype>,
}

fn gen_data(cfg: &RunConfig, a: &GenDataArgs) -> Result<()> {
    let spec = SyntheticSpec {
        sample_rate: a.sample_rate,
        ..SyntheticSpec::new(a.rule, cfg.seed).with_sizes(a.train, a.test)
    };
    create_dir(&a.out)?;
    let corpus = generate_synthetic_dataset(&spec, &a.out)?;
    eprintln!("wrote {} train and {} test subjects to {}", corpus.train.len(), corpus.test.len(), a.out.display());
    let mut m = manifest("gen-data", cfg)?;
    m.config = serde_json::to_value(&spec)?;
    finish(m, &a.out, &["train/", "test/", "synthetic.json"])
}

fn features(cfg: &mut RunConfig, a: &FeaturesArgs) -> Result<()> {
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    let root = cfg.data_root()?.to_path_buf();
    let fx = FeatureExtractor::new(FeatureConfig::default())?;
    let vocab = Vocabulary::new(cfg.train.vocab_size)?;
    let mut count = 0;
    for split in [Split::Train, Split::Test] {
        let raw = load_raw_split(&root, split).with_context(|| format!("loading {}", root.display()))?;
        let samples = build_samples(&raw, &fx, &vocab, None)?;
        create_dir(&root.join(split.dir_name()).join("features"))?;
        for s in &samples {
            write_feature_image(feature_path(&root, split, &s.id), &s.feature_image)?;
            count += 1;
        }
    }
    eprintln!("cached {count} feature images under {}", root.display());
    let mut m = manifest("features", cfg)?;
    m.config = serde_json::json!({ "data": root, "features": FeatureConfig::default() });
    finish(m, &root, &["train/features/", "test/features/"])
}

fn search(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let out = cfg.out_dir("adnas-search");
    create_dir(&out)?;
    let trained = train_model(&data.train, &cfg.hyper, cfg.fusion, cfg.modality, &TrainMode::Search, &cfg.train)?;
    report_epochs(&trained, verbose);
    let genotype = trained
        .model
        .genotype()
        .context("the searched model has no audio network")??;
    genotype.save(out.join("genotype.json"))?;
    fs::write(out.join("normal.dot"), export_genotype_dot(&genotype, CellKind::Normal))?;
    fs::write(out.join("reduce.dot"), export_genotype_dot(&genotype, CellKind::Reduce))?;
    write_json(&out.join("log.json"), &trained.log)?;
    trained.log.write_csv(csv_file(&out.join("log.csv"))?)?;
    trained.model.store.save(out.join("model.dfck"))?;
    eprintln!("genotype written to {}", out.join("genotype.json").display());
    finish(
        manifest("search", cfg)?,
        &out,
        &["genotype.json", "normal.dot", "reduce.dot", "log.json", "log.csv", "model.dfck"],
    )
}

fn save_run(dir: &Path, cfg: &RunConfig, hp: &HyperParams, mode: &TrainMode, trained: &TrainedModel) -> Result<()> {
    let spec = ModelSpec {
        modality: cfg.modality,
        hyper: hp.clone(),
        train: cfg.train.clone(),
        fusion: cfg.fusion,
        genotype: match mode {
            TrainMode::Fixed(g) => Some(g.clone()),
            TrainMode::Search => None,
        },
    };
    write_json(&dir.join("model.json"), &spec)?;
    trained.model.store.save(dir.join("model.dfck"))?;
    write_json(&dir.join("log.json"), &trained.log)?;
    trained.log.write_csv(csv_file(&dir.join("log.csv"))?)?;
    if let Some(g) = trained.model.genotype() {
        g?.save(dir.join("genotype.json"))?;
    }
    Ok(())
}

fn train(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let mode = train_mode(cfg)?;
    let out = cfg.out_dir("adnas-train");
    create_dir(&out)?;
    let runs = cfg.runs.max(1);
    let aggregate = repeat_runs(runs, cfg.seed, |i, seed| {
        let hp = HyperParams {
            seed,
            ..cfg.hyper.clone()
        };
        let trained = train_model(&data.train, &hp, cfg.fusion, cfg.modality, &mode, &cfg.train)
            .with_context(|| format!("run {i} (seed {seed})"))
            .map_err(into_core)?;
        report_epochs(&trained, verbose);
        let report = evaluate(&trained.model, &data.test)?;
        eprintln!("run {i} (seed {seed}): test accuracy {:.2}", report.metrics.accuracy);
        let dir = if runs == 1 { out.clone() } else { out.join(format!("run-{i}")) };
        create_dir(&dir).map_err(into_core)?;
        save_run(&dir, cfg, &hp, &mode, &trained).map_err(into_core)?;
        if runs > 1 {
            write_json(&dir.join("metrics.json"), &report).map_err(into_core)?;
        }
        Ok(report)
    })?;
    if runs == 1 {
        write_json(&out.join("metrics.json"), &aggregate.runs[0])?;
    } else {
        write_json(&out.join("metrics.json"), &aggregate)?;
    }
    aggregate.write_csv(csv_file(&out.join("metrics.csv"))?)?;
    let m = &aggregate.mean;
    eprintln!(
        "precision {:.2}  recall {:.2}  f1 {:.2}  accuracy {:.2}  specificity {:.2}",
        m.precision, m.recall, m.f1, m.accuracy, m.specificity
    );
    let mut man = manifest("train", cfg)?;
    for (i, s) in aggregate.seeds.iter().enumerate() {
        man.seed(format!("run-{i}"), *s);
    }
    finish(man, &out, &["metrics.json", "metrics.csv", "model.json", "model.dfck", "log.json", "log.csv"])
}

/// Carries an anyhow error through a closure that must return the core error type.
fn into_core(e: anyhow::Error) -> adnas_core::Error {
    adnas_core::Error::Dataset(format!("{e:#}"))
}

fn eval(cfg: &mut RunConfig, a: &EvalArgs) -> Result<()> {
    if a.data.is_some() {
        cfg.data = a.data.clone();
    }
    let spec_path = a.model.join("model.json");
    let spec: ModelSpec = serde_json::from_str(
        &fs::read_to_string(&spec_path).with_context(|| format!("reading {}", spec_path.display()))?,
    )
    .with_context(|| format!("parsing {}", spec_path.display()))?;
    let mode = match &spec.genotype {
        Some(g) => TrainMode::Fixed(g.clone()),
        None => TrainMode::Search,
    };
    let mut model = Model::new(spec.modality, &mode, &spec.hyper, spec.fusion, &spec.train)?;
    model.store.load(a.model.join("model.dfck"))?;
    let data = load_data(cfg)?;
    let report = evaluate(&model, &data.test)?;
    let out = a.out.clone().unwrap_or_else(|| a.model.join("eval"));
    create_dir(&out)?;
    write_json(&out.join("metrics.json"), &report)?;
    eprintln!("test accuracy {:.2}", report.metrics.accuracy);
    let mut m = manifest("eval", cfg)?;
    m.config = serde_json::json!({ "model": a.model, "data": cfg.data, "spec": spec });
    finish(m, &out, &["metrics.json"])
}

fn hpo(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let mode = train_mode(cfg)?;
    let out = cfg.out_dir("adnas-hpo");
    create_dir(&out)?;
    let result = random_search_hpo(&cfg.hpo.space, cfg.hpo.budget, cfg.seed, |hp| {
        let trained = train_model(&data.train, hp, cfg.fusion, cfg.modality, &mode, &cfg.train)?;
        let acc = trained.log.best().val_accuracy;
        if verbose {
            eprintln!("trial: {hp:?} -> val acc {acc:.2}");
        }
        Ok(acc)
    })?;
    result.write_csv(csv_file(&out.join("trials.csv"))?)?;
    write_json(&out.join("best.json"), result.best_params())?;
    eprintln!(
        "best trial {} (val acc {:.2})",
        result.best, result.trials[result.best].val_accuracy
    );
    finish(manifest("hpo", cfg)?, &out, &["trials.csv", "best.json"])
}

fn ablate(cfg: &RunConfig, verbose: bool) -> Result<()> {
    let data = load_data(cfg)?;
    let mode = train_mode(cfg)?;
    let out = cfg.out_dir("adnas-ablate");
    create_dir(&out)?;
    let table = ablate_layers(&cfg.ablation.depths, |layers| {
        let hp = HyperParams {
            cnn_layers: layers,
            ..cfg.hyper.clone()
        };
        let trained = train_model(&data.train, &hp, cfg.fusion, cfg.modality, &mode, &cfg.train)?;
        let report = evaluate(&trained.model, &data.test)?;
        if verbose {
            eprintln!("{layers} layers: test accuracy {:.2}", report.metrics.accuracy);
        }
        Ok(report)
    })?;
    table.write_csv(csv_file(&out.join("ablation.csv"))?)?;
    write_json(&out.join("ablation_series.json"), &table.series())?;
    finish(manifest("ablate", cfg)?, &out, &["ablation.csv", "ablation_series.json"])
}

fn export_cell(cfg: &RunConfig, a: &ExportArgs) -> Result<()> {
    let g = Genotype::load(&a.genotype).with_context(|| format!("loading genotype {}", a.genotype.display()))?;
    let dot = export_genotype_dot(&g, a.cell);
    match &a.out {
        Some(path) => {
            fs::write(path, &dot).with_context(|| format!("writing {}", path.display()))?;
            let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).map_or(PathBuf::from("."), Path::to_path_buf);
            let mut m = manifest("export-cell", cfg)?;
            m.config = serde_json::json!({ "genotype": a.genotype, "cell": a.cell.name() });
            finish(m, &dir, &[&path.to_string_lossy()])
        }
        None => {
            print!("{dot}");
            Ok(())
        }
    }
}
