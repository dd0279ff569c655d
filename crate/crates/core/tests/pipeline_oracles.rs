use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use adnas_core::audio::{FeatureConfig, FeatureExtractor};
use adnas_core::darts::{Genotype, OpKind};
use adnas_core::fusion::{FusionConfig, FusionMethod};
use adnas_core::nn::ParamGroup;
use adnas_core::pipeline::*;
use adnas_core::rng;
use adnas_core::text::Vocabulary;
use adnas_core::Error;
use proptest::prelude::*;
use rand::Rng;

#[test]
fn metrics_match_counting_oracle() {
    let mut r = rng::stream(0, "metrics");
    for trial in 0..1000 {
        let n = r.gen_range(1..60);
        let bias = r.gen_range(0.0..1.0);
        let preds: Vec<usize> = (0..n).map(|_| r.gen_bool(bias) as usize).collect();
        let labels: Vec<usize> = (0..n).map(|_| r.gen_bool(0.5) as usize).collect();
        let (mut tp, mut fp, mut fn_, mut tn) = (0usize, 0usize, 0usize, 0usize);
        for i in 0..n {
            if preds[i] == 1 && labels[i] == 1 {
                tp += 1;
            } else if preds[i] == 1 {
                fp += 1;
            } else if labels[i] == 1 {
                fn_ += 1;
            } else {
                tn += 1;
            }
        }
        let rep = MetricsReport::from_predictions(&preds, &labels).unwrap();
        assert_eq!(rep.confusion, Confusion { tp, fp, fn_, tn }, "trial {trial}");
        let div = |a: usize, b: usize| if b == 0 { 0.0 } else { a as f64 / b as f64 };
        let p = div(tp, tp + fp);
        let rc = div(tp, tp + fn_);
        let f1 = if p + rc == 0.0 { 0.0 } else { 2.0 * p * rc / (p + rc) };
        assert_eq!(rep.metrics.precision, 100.0 * p);
        assert_eq!(rep.metrics.recall, 100.0 * rc);
        assert_eq!(rep.metrics.f1, 100.0 * f1);
        assert_eq!(rep.metrics.accuracy, 100.0 * div(tp + tn, n));
        assert_eq!(rep.metrics.specificity, 100.0 * div(tn, tn + fp));
        assert_eq!(rep.undefined.contains(&"precision".to_string()), tp + fp == 0);
        assert!(rep.is_consistent());
        assert!(rep.metrics.values().iter().all(|v| (0.0..=100.0).contains(v)));
    }
}

#[test]
fn best_epoch_matches_scan_oracle() {
    let mut r = rng::stream(1, "epochs");
    for _ in 0..200 {
        // coarse values so ties are common
        let losses: Vec<f64> = (0..50).map(|_| r.gen_range(0..20) as f64 / 10.0).collect();
        let mut best = 0;
        let mut min = f64::INFINITY;
        for (i, &l) in losses.iter().enumerate() {
            if l < min {
                min = l;
                best = i;
            }
        }
        assert_eq!(select_best_epoch(&losses).unwrap(), best);
    }
}

#[test]
fn aggregate_matches_direct_mean_and_std() {
    let mut r = rng::stream(2, "agg");
    for _ in 0..50 {
        let reports: Vec<MetricsReport> = (0..5)
            .map(|_| {
                let c = Confusion {
                    tp: r.gen_range(0..25),
                    fp: r.gen_range(0..25),
                    fn_: r.gen_range(0..25),
                    tn: r.gen_range(0..25),
                };
                MetricsReport::from_confusion(c)
            })
            .collect();
        let mut i = 0;
        let agg = repeat_runs(5, 100, |_, _| {
            i += 1;
            Ok(reports[i - 1].clone())
        })
        .unwrap();
        assert_eq!(agg.seeds, vec![100, 101, 102, 103, 104]);
        for k in 0..5 {
            let xs: Vec<f64> = reports.iter().map(|m| m.metrics.values()[k]).collect();
            let mean = xs.iter().sum::<f64>() / 5.0;
            let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 5.0;
            assert!((agg.mean.values()[k] - mean).abs() < 1e-12);
            assert!((agg.std.values()[k] - var.sqrt()).abs() < 1e-12);
        }
    }
}

#[test]
fn population_std_of_two_runs() {
    let mk = |tp| MetricsReport::from_confusion(Confusion { tp, fp: 0, fn_: 10 - tp, tn: 10 });
    // accuracies 80 and 90
    let agg = repeat_runs(2, 0, |i, _| Ok(mk(if i == 0 { 6 } else { 8 }))).unwrap();
    assert!((agg.mean.accuracy - 85.0).abs() < 1e-12);
    assert!((agg.std.accuracy - 5.0).abs() < 1e-12);
}

fn tree_bytes(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(root).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn synthetic_corpus_shape_round_trip_and_determinism() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let spec = SyntheticSpec::new(CrossmodalRule::Xor, 7);
    let corpus = generate_synthetic_dataset(&spec, a.path()).unwrap();
    assert_eq!((corpus.train.len(), corpus.test.len()), (156, 48));
    assert_eq!(corpus.train.iter().filter(|s| s.raw.label == 1).count(), 78);
    assert_eq!(corpus.test.iter().filter(|s| s.raw.label == 1).count(), 24);
    for it in corpus.train.iter().chain(&corpus.test) {
        assert_eq!(it.raw.label, it.audio_bit ^ it.text_bit);
        let secs = it.raw.clip.duration_secs();
        assert!((1.5..=3.0).contains(&secs));
    }
    for (split, items) in [(Split::Train, &corpus.train), (Split::Test, &corpus.test)] {
        let back = load_raw_split(a.path(), split).unwrap();
        assert_eq!(back.len(), items.len());
        for (x, y) in back.iter().zip(items.iter()) {
            assert_eq!(x, &y.raw);
        }
    }
    generate_synthetic_dataset(&spec, b.path()).unwrap();
    assert!(tree_bytes(a.path()) == tree_bytes(b.path()));
}

/// Energy of the first difference over the energy of the signal:
/// `4 sin²(π f / fs)` for a pure tone, so high tones sit far above low ones.
fn diff_energy_ratio(x: &[f32]) -> f64 {
    let e: f64 = x.iter().map(|&v| (v as f64).powi(2)).sum();
    let d: f64 = x.windows(2).map(|w| (w[1] as f64 - w[0] as f64).powi(2)).sum();
    d / e
}

#[test]
fn audio_threshold_oracle_is_perfect_on_audio_rule() {
    let corpus = synthesize(&SyntheticSpec::new(CrossmodalRule::AudioOnly, 3)).unwrap();
    for it in corpus.test.iter().chain(&corpus.train) {
        let pred = (diff_energy_ratio(it.raw.clip.samples()) > 0.5) as usize;
        assert_eq!(pred, it.raw.label, "{}", it.raw.id);
    }
}

fn small_corpus(dir: &Path, train: usize, test: usize) -> SyntheticCorpus {
    let corpus = synthesize(&SyntheticSpec::new(CrossmodalRule::AudioOnly, 11).with_sizes((4, 4), (2, 2))).unwrap();
    let raw = |items: &[SyntheticItem], n| items[..n].iter().map(|i| i.raw.clone()).collect::<Vec<_>>();
    write_split(dir, Split::Train, &raw(&corpus.train, train)).unwrap();
    write_split(dir, Split::Test, &raw(&corpus.test, test)).unwrap();
    corpus
}

fn extractor() -> FeatureExtractor {
    FeatureExtractor::new(FeatureConfig::default()).unwrap()
}

#[test]
fn loader_counts_and_labels() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 4, 2);
    let data = load_dataset(dir.path(), &extractor(), &Vocabulary::default()).unwrap();
    assert_eq!((data.train.len(), data.test.len()), (4, 2));
    for (s, it) in data.train.iter().zip(&corpus.train) {
        assert_eq!((s.id.as_str(), s.label), (it.raw.id.as_str(), it.raw.label));
        assert_eq!(s.feature_image.shape(), (224, 224, 3));
        assert_eq!(s.tokens.len(), 512);
    }
}

#[test]
fn loader_errors() {
    let dir = tempfile::tempdir().unwrap();
    let corpus = small_corpus(dir.path(), 4, 2);
    let victim = &corpus.train[2].raw.id;
    fs::remove_file(audio_path(dir.path(), Split::Train, victim)).unwrap();
    let err = load_dataset(dir.path(), &extractor(), &Vocabulary::default()).unwrap_err();
    assert!(err.to_string().contains(victim.as_str()), "{err}");

    let dir = tempfile::tempdir().unwrap();
    small_corpus(dir.path(), 4, 2);
    let victim = &corpus.test[0].raw.id;
    fs::remove_file(transcript_path(dir.path(), Split::Test, victim)).unwrap();
    let err = load_raw_split(dir.path(), Split::Test).unwrap_err();
    assert!(err.to_string().contains(victim.as_str()), "{err}");

    let labels = labels_path(dir.path(), Split::Train);
    fs::write(&labels, "id,label\ntrain_000,2\n").unwrap();
    assert!(matches!(read_labels(&labels), Err(Error::Dataset(_))));
    fs::write(&labels, "name,y\ntrain_000,1\n").unwrap();
    assert!(matches!(read_labels(&labels), Err(Error::Format { .. })));
    fs::write(&labels, "id,label\ntrain_000,1,3\n").unwrap();
    assert!(read_labels(&labels).is_err());
    assert!(load_dataset(&dir.path().join("absent"), &extractor(), &Vocabulary::default()).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]
    #[test]
    fn split_keeps_class_ratio(labels in prop::collection::vec(0usize..2, 2..200), seed in any::<u64>()) {
        let (tr, va) = stratified_split(&labels, 0.2, &mut rng::stream(seed, "split"));
        prop_assert_eq!(tr.len() + va.len(), labels.len());
        let pos = labels.iter().filter(|&&l| l == 1).count();
        let va_pos = va.iter().filter(|&&i| labels[i] == 1).count();
        let expect = pos as f64 * va.len() as f64 / labels.len() as f64;
        prop_assert!((va_pos as f64 - expect).abs() <= 1.0 + 1e-9);
    }
}

#[test]
fn random_search_finds_planted_optimum() {
    let space = SearchSpace {
        cnn_layers: vec![2, 3, 4, 5, 6],
        lr_cnn: (0.01, 0.01),
        lr_alpha: (1e-3, 1e-3),
        lr_text: (1e-3, 1e-3),
        weight_decay: (3e-4, 3e-4),
        fusion_hidden_dim: vec![16],
    };
    let planted = 5;
    let mut seen = Vec::new();
    let res = random_search_hpo(&space, 40, 9, |hp| {
        seen.push(hp.cnn_layers);
        Ok(if hp.cnn_layers == planted { 100.0 } else { 50.0 + hp.cnn_layers as f64 })
    })
    .unwrap();
    for l in &space.cnn_layers {
        assert!(seen.contains(l), "grid point {l} never sampled");
    }
    assert_eq!(res.best_params().cnn_layers, planted);
    assert_eq!(res.trials[res.best].index, seen.iter().position(|&l| l == planted).unwrap());

    let again = random_search_hpo(&space, 40, 9, |hp| Ok(hp.cnn_layers as f64)).unwrap();
    let a: Vec<_> = res.trials.iter().map(|t| t.params.clone()).collect();
    let b: Vec<_> = again.trials.iter().map(|t| t.params.clone()).collect();
    assert_eq!(a, b);
    let mut csv = Vec::new();
    res.write_csv(&mut csv).unwrap();
    assert_eq!(String::from_utf8(csv).unwrap().lines().count(), 41);
}

#[test]
fn ablation_schema() {
    assert_eq!(DEFAULT_ABLATION_LAYERS, [4, 8, 12, 16, 20, 24, 28, 30]);
    let table = ablate_layers(&DEFAULT_ABLATION_LAYERS, |l| {
        Ok(MetricsReport::from_confusion(Confusion { tp: l % 7, fp: 1, fn_: 2, tn: 3 }))
    })
    .unwrap();
    let mut csv = Vec::new();
    table.write_csv(&mut csv).unwrap();
    let text = String::from_utf8(csv).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "layers,accuracy,precision,recall,f1,specificity");
    assert_eq!(lines.count(), 8);
}

fn tiny_genotype() -> Genotype {
    let e = vec![
        (0, OpKind::SepConv3x3),
        (1, OpKind::Identity),
        (0, OpKind::AvgPool3x3),
        (2, OpKind::DilConv3x3),
        (1, OpKind::MaxPool3x3),
        (3, OpKind::SepConv5x5),
        (0, OpKind::Identity),
        (4, OpKind::DilConv5x5),
    ];
    Genotype {
        normal: e.clone(),
        reduce: e,
    }
}

fn tiny_setup() -> (Dataset, TrainConfig) {
    let corpus = synthesize(&SyntheticSpec::new(CrossmodalRule::Xor, 5).with_sizes((6, 6), (2, 2))).unwrap();
    let fx = extractor();
    let vocab = Vocabulary::new(64).unwrap();
    let raw = |items: &[SyntheticItem]| items.iter().map(|i| i.raw.clone()).collect::<Vec<_>>();
    let data = Dataset {
        train: build_samples(&raw(&corpus.train), &fx, &vocab, None).unwrap(),
        test: build_samples(&raw(&corpus.test), &fx, &vocab, None).unwrap(),
    };
    let cfg = TrainConfig {
        epochs: 3,
        channels: 2,
        vocab_size: 64,
        ..TrainConfig::default()
    };
    (data, cfg)
}

#[test]
fn protocol_defaults() {
    let cfg = TrainConfig::default();
    assert_eq!((cfg.batch_size, cfg.epochs), (8, 50));
}

#[test]
fn zero_learning_rates_freeze_everything() {
    let (data, cfg) = tiny_setup();
    let hp = HyperParams {
        cnn_layers: 2,
        lr_cnn: 0.0,
        lr_alpha: 0.0,
        lr_text: 0.0,
        ..HyperParams::default()
    };
    for mode in [TrainMode::Search, TrainMode::Fixed(tiny_genotype())] {
        let fresh = Model::new(Modality::Multimodal, &mode, &hp, FusionConfig::default(), &cfg).unwrap();
        let t = train_model(&data.train, &hp, FusionConfig::default(), Modality::Multimodal, &mode, &cfg).unwrap();
        for g in [ParamGroup::Conv, ParamGroup::Alpha, ParamGroup::Head] {
            assert!(t.model.store.same_values(&fresh.store, g), "{g:?} moved");
        }
        let v0 = t.log.epochs[0].val_loss;
        assert!(t.log.epochs.iter().all(|e| e.val_loss.to_bits() == v0.to_bits()));
    }
}

#[test]
fn log_has_one_row_per_epoch_and_ceil_batches() {
    let (data, cfg) = tiny_setup();
    let hp = HyperParams {
        cnn_layers: 2,
        ..HyperParams::default()
    };
    let t = train_model(&data.train, &hp, FusionConfig::default(), Modality::Multimodal, &TrainMode::Search, &cfg).unwrap();
    assert_eq!(t.log.epochs.len(), 3);
    assert_eq!(t.log.batch_size, 8);
    // 12 subjects, 2 held out for validation
    assert_eq!((t.log.train_size, t.log.val_size), (10, 2));
    assert!(t.log.epochs.iter().all(|e| e.batches == 2));
    let losses: Vec<f64> = t.log.epochs.iter().map(|e| e.val_loss).collect();
    assert_eq!(t.log.best_epoch, select_best_epoch(&losses).unwrap());
    let g = t.model.genotype().unwrap().unwrap();
    g.validate().unwrap();
}

#[test]
fn training_is_bitwise_reproducible() {
    let (data, cfg) = tiny_setup();
    let hp = HyperParams {
        cnn_layers: 2,
        seed: 4,
        ..HyperParams::default()
    };
    let run = || {
        let (t, r) =
            train_and_evaluate(&data, &hp, FusionConfig::with_method(FusionMethod::Mfh), Modality::Multimodal, &TrainMode::Search, &cfg)
                .unwrap();
        (serde_json::to_string(&t.log).unwrap(), serde_json::to_string(&r).unwrap())
    };
    assert_eq!(run(), run());
}

#[test]
fn unimodal_models_train() {
    let (data, cfg) = tiny_setup();
    let hp = HyperParams {
        cnn_layers: 2,
        ..HyperParams::default()
    };
    for m in [Modality::AudioOnly, Modality::TextOnly] {
        let (t, r) = train_and_evaluate(&data, &hp, FusionConfig::default(), m, &TrainMode::Fixed(tiny_genotype()), &cfg).unwrap();
        assert_eq!(t.model.audio.is_some(), m == Modality::AudioOnly);
        assert!(r.is_consistent());
    }
}

#[test]
fn diverging_training_aborts_with_location() {
    let (data, cfg) = tiny_setup();
    let hp = HyperParams {
        cnn_layers: 2,
        lr_cnn: 1e300,
        lr_text: 1e300,
        ..HyperParams::default()
    };
    let err = train_model(&data.train, &hp, FusionConfig::default(), Modality::Multimodal, &TrainMode::Search, &cfg).unwrap_err();
    match err {
        Error::NonFinite(msg) => assert!(msg.contains("epoch"), "{msg}"),
        other => panic!("expected a non-finite abort, got {other}"),
    }
}

#[test]
fn separable_audio_task_is_learned() {
    let corpus = synthesize(&SyntheticSpec::new(CrossmodalRule::AudioOnly, 2)).unwrap();
    let fx = extractor();
    let vocab = Vocabulary::default();
    let raw: Vec<RawSample> = corpus.train.iter().map(|i| i.raw.clone()).collect();
    let train = build_samples(&raw, &fx, &vocab, None).unwrap();
    let hp = HyperParams {
        cnn_layers: 4,
        ..HyperParams::default()
    };
    let cfg = TrainConfig {
        epochs: 20,
        ..TrainConfig::default()
    };
    let t = train_model(&train, &hp, FusionConfig::default(), Modality::AudioOnly, &TrainMode::Fixed(tiny_genotype()), &cfg).unwrap();
    let last = t.log.epochs.last().unwrap();
    assert!(last.train_accuracy >= 95.0, "{last:?}");
}
