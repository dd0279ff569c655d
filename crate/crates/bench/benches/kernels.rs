use criterion::{black_box, criterion_group, criterion_main, Criterion};

use adnas_core::audio::{AudioClip, FeatureConfig, FeatureExtractor};
use adnas_core::darts::{Cell, CellKind, NUM_EDGES, NUM_OPS};
use adnas_core::fusion::{Fusion, FusionConfig, FusionMethod};
use adnas_core::nn::{ParamGroup, ParamStore, Session};
use adnas_core::rng;
use adnas_core::tensor::{ConvGeometry, Tape, Tensor};

fn conv(c: &mut Criterion) {
    let mut r = rng::stream(0, "bench");
    let x = Tensor::randn(&[8, 12, 14, 14], 1.0, &mut r);
    let w = Tensor::randn(&[12, 12, 3, 3], 1.0, &mut r);
    c.bench_function("conv2d 8x12x14x14 k3 fwd+bwd", |b| {
        b.iter(|| {
            let mut t = Tape::new();
            let (xv, wv) = (t.leaf(x.clone()), t.leaf(w.clone()));
            let y = t.conv2d(xv, wv, ConvGeometry::new(1, 1, 1, 1)).unwrap();
            let s = t.sum(y);
            black_box(t.backward(s).unwrap());
        })
    });
}

fn mixed_cell(c: &mut Criterion) {
    let mut store = ParamStore::new();
    let mut r = rng::stream(1, "bench");
    let cell = Cell::mixed(&mut store, "cell", CellKind::Normal, 4, 4, 4, false, &mut r);
    let alpha = store.add("alpha", Tensor::randn(&[NUM_EDGES, NUM_OPS], 1e-3, &mut r), ParamGroup::Alpha);
    let x = Tensor::randn(&[8, 4, 14, 14], 1.0, &mut r);
    c.bench_function("mixed normal cell C=4 fwd+bwd", |b| {
        b.iter(|| {
            let mut s = Session::new(&store, true, &[ParamGroup::Conv, ParamGroup::Alpha]);
            let a = s.param(alpha);
            let w = s.tape.softmax(a, 1).unwrap();
            let x0 = s.tape.constant(x.clone());
            let out = cell.forward(&mut s, x0, x0, Some(w)).unwrap();
            let loss = s.tape.mean(out);
            black_box(s.backward(loss).unwrap());
        })
    });
}

fn fusion(c: &mut Criterion) {
    let mut r = rng::stream(2, "bench");
    let zt = Tensor::randn(&[8, 64], 1.0, &mut r);
    let zv = Tensor::randn(&[8, 64], 1.0, &mut r);
    let mut group = c.benchmark_group("fusion fwd");
    for m in FusionMethod::ALL {
        let mut store = ParamStore::new();
        let f = Fusion::new(&mut store, "fuse", FusionConfig::with_method(m), &mut r).unwrap();
        group.bench_function(m.to_string(), |b| {
            b.iter(|| {
                let mut s = Session::new(&store, false, &[]);
                let (a, v) = (s.tape.constant(zt.clone()), s.tape.constant(zv.clone()));
                black_box(f.forward(&mut s, a, v).unwrap());
            })
        });
    }
    group.finish();
}

fn features(c: &mut Criterion) {
    let fx = FeatureExtractor::new(FeatureConfig::default()).unwrap();
    let samples: Vec<f32> = (0..32_000).map(|i| (i as f32 * 0.2).sin() * 0.3).collect();
    let clip = AudioClip::new(samples, 16_000).unwrap();
    c.bench_function("feature image 2 s @ 16 kHz", |b| b.iter(|| black_box(fx.feature_image(&clip).unwrap())));
}

criterion_group! {
    name = benches;
    config = Criterion::default().sample_size(10);
    targets = conv, mixed_cell, fusion, features
}
criterion_main!(benches);
