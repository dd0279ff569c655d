//! Finite-difference and brute-force oracles for the tape primitives.

use adnas_core::rng;
use adnas_core::tensor::{grad_check, ConvGeometry, GradCheckConfig, PoolKind, Tape, Tensor, Var};
use adnas_core::Result;
use rand::Rng as _;

const SEEDS: u64 = 20;

fn cfg() -> GradCheckConfig {
    GradCheckConfig::default()
}

/// Fixed random weights so the scalar depends on every output element.
fn weighted_sum(t: &mut Tape, x: Var, seed: u64) -> Result<Var> {
    let mut r = rng::stream(seed, "probe");
    let w = Tensor::uniform(t.shape(x), -1.0, 1.0, &mut r);
    let w = t.constant(w);
    let p = t.mul(x, w)?;
    Ok(t.sum(p))
}

fn assert_passes(name: &str, f: impl Fn(&mut Tape, &[Var]) -> Result<Var>, leaves: &[Tensor]) {
    let report = grad_check(f, leaves, &cfg()).unwrap();
    assert!(report.passed(), "{name}: {:?}", report.failures().collect::<Vec<_>>());
}

fn conv_oracle(x: &Tensor, w: &Tensor, g: ConvGeometry) -> Tensor {
    let (xs, ws) = (x.shape(), w.shape());
    let (n, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (f, cg, kh, kw) = (ws[0], ws[1], ws[2], ws[3]);
    let ho = (h + 2 * g.padding - g.dilation * (kh - 1) - 1) / g.stride + 1;
    let wo = (wd + 2 * g.padding - g.dilation * (kw - 1) - 1) / g.stride + 1;
    let fpg = f / g.groups;
    let mut out = vec![0.0; n * f * ho * wo];
    for b in 0..n {
        for o in 0..f {
            let grp = o / fpg;
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for ci in 0..cg {
                        let ch = grp * cg + ci;
                        for ki in 0..kh {
                            for kj in 0..kw {
                                let iy = (oy * g.stride + ki * g.dilation) as isize - g.padding as isize;
                                let ix = (ox * g.stride + kj * g.dilation) as isize - g.padding as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                let xv = x.data()[((b * c + ch) * h + iy as usize) * wd + ix as usize];
                                acc += xv * w.data()[((o * cg + ci) * kh + ki) * kw + kj];
                            }
                        }
                    }
                    out[((b * f + o) * ho + oy) * wo + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, f, ho, wo], out).unwrap()
}

#[test]
fn conv_matches_nested_loop_oracle() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "conv");
        let c = r.gen_range(1..4);
        let f = r.gen_range(1..4);
        let k = [1, 3, 5][r.gen_range(0..3)];
        let geom = ConvGeometry::new(r.gen_range(1..3), r.gen_range(0..3), r.gen_range(1..3), 1);
        let side = geom.dilation * (k - 1) + 2 + r.gen_range(0..4);
        let x = Tensor::uniform(&[2, c, side, side + 1], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[f, c, k, k], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.constant(x.clone()), tape.constant(w.clone()));
        let y = tape.conv2d(xv, wv, geom).unwrap();
        let expect = conv_oracle(&x, &w, geom);
        assert_eq!(tape.shape(y), expect.shape());
        assert!(tape.value(y).max_abs_diff(&expect) < 1e-9, "seed {seed}");
    }
}

#[test]
fn separable_conv_matches_depthwise_then_pointwise_reference() {
    let mut r = rng::stream(11, "sep");
    let x = Tensor::uniform(&[2, 3, 8, 8], -1.0, 1.0, &mut r);
    let dw = Tensor::uniform(&[3, 1, 3, 3], -1.0, 1.0, &mut r);
    let pw = Tensor::uniform(&[4, 3, 1, 1], -1.0, 1.0, &mut r);
    let mut tape = Tape::new();
    let (xv, dv, pv) = (tape.constant(x.clone()), tape.constant(dw.clone()), tape.constant(pw.clone()));
    let mid = tape.conv2d(xv, dv, ConvGeometry::new(1, 1, 1, 3)).unwrap();
    let y = tape.conv2d(mid, pv, ConvGeometry::default()).unwrap();

    // nested loops, written out directly
    let mut depth = vec![0.0; 2 * 3 * 64];
    for n in 0..2 {
        for c in 0..3 {
            for oy in 0..8 {
                for ox in 0..8 {
                    let mut acc = 0.0;
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let (iy, ix) = (oy as isize + ki as isize - 1, ox as isize + kj as isize - 1);
                            if (0..8).contains(&iy) && (0..8).contains(&ix) {
                                acc += x.data()[((n * 3 + c) * 8 + iy as usize) * 8 + ix as usize]
                                    * dw.data()[c * 9 + ki * 3 + kj];
                            }
                        }
                    }
                    depth[((n * 3 + c) * 8 + oy) * 8 + ox] = acc;
                }
            }
        }
    }
    let mut expect = vec![0.0; 2 * 4 * 64];
    for n in 0..2 {
        for o in 0..4 {
            for p in 0..64 {
                expect[(n * 4 + o) * 64 + p] = (0..3).map(|c| pw.data()[o * 3 + c] * depth[(n * 3 + c) * 64 + p]).sum();
            }
        }
    }
    let expect = Tensor::new(vec![2, 4, 8, 8], expect).unwrap();
    assert!(tape.value(y).max_abs_diff(&expect) < 1e-9);
}

#[test]
fn pooling_matches_window_scan() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "pool");
        let x = Tensor::uniform(&[1, 1, 6, 6], -1.0, 1.0, &mut r);
        let stride = r.gen_range(1..3);
        let pad = r.gen_range(0..2);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            let mut tape = Tape::new();
            let xv = tape.constant(x.clone());
            let y = tape.pool2d(xv, kind, 3, stride, pad).unwrap();
            let out = tape.value(y);
            let (ho, wo) = (out.shape()[2], out.shape()[3]);
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut vals = Vec::new();
                    for ki in 0..3 {
                        for kj in 0..3 {
                            let iy = (oy * stride + ki) as isize - pad as isize;
                            let ix = (ox * stride + kj) as isize - pad as isize;
                            if (0..6).contains(&iy) && (0..6).contains(&ix) {
                                vals.push(x.data()[iy as usize * 6 + ix as usize]);
                            }
                        }
                    }
                    let expect = match kind {
                        PoolKind::Max => vals.iter().copied().fold(f64::NEG_INFINITY, f64::max),
                        PoolKind::Avg => vals.iter().sum::<f64>() / 9.0,
                    };
                    assert!((out.data()[oy * wo + ox] - expect).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "mm");
        let (m, k, n) = (r.gen_range(1..5), r.gen_range(1..5), r.gen_range(1..5));
        let leaves = [Tensor::randn(&[m, k], 1.0, &mut r), Tensor::randn(&[k, n], 1.0, &mut r)];
        assert_passes(
            "matmul",
            |t, v| {
                let y = t.matmul(v[0], v[1])?;
                Ok(t.sum(y))
            },
            &leaves,
        );
    }
}

#[test]
fn conv_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "convgrad");
        let groups = [1, 2][r.gen_range(0..2)];
        let c = 2 * r.gen_range(1..3);
        let f = groups * r.gen_range(1..3);
        let k = [1, 3][r.gen_range(0..2)];
        let geom = ConvGeometry::new(r.gen_range(1..3), r.gen_range(0..2), r.gen_range(1..3), groups);
        let side = geom.dilation * (k - 1) + 3;
        let leaves = [
            Tensor::uniform(&[2, c, side, side], -1.0, 1.0, &mut r),
            Tensor::uniform(&[f, c / groups, k, k], -1.0, 1.0, &mut r),
        ];
        assert_passes(
            "conv2d",
            move |t, v| {
                let y = t.conv2d(v[0], v[1], geom)?;
                weighted_sum(t, y, seed)
            },
            &leaves,
        );
    }
}

#[test]
fn pool_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "poolgrad");
        let stride = r.gen_range(1..3);
        let x = Tensor::uniform(&[2, 2, 5, 5], -1.0, 1.0, &mut r);
        for kind in [PoolKind::Max, PoolKind::Avg] {
            assert_passes(
                "pool2d",
                move |t, v| {
                    let y = t.pool2d(v[0], kind, 3, stride, 1)?;
                    weighted_sum(t, y, seed)
                },
                &[x.clone()],
            );
        }
    }
}

#[test]
fn softmax_jvp_matches_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "softmax");
        let x = Tensor::randn(&[3, 4, 2], 2.0, &mut r);
        let axis = r.gen_range(0..3);
        assert_passes(
            "softmax",
            move |t, v| {
                let y = t.softmax(v[0], axis)?;
                weighted_sum(t, y, seed)
            },
            &[x],
        );
    }
}

#[test]
fn softmax_outputs_are_a_distribution() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "softmax-dist");
        let x = Tensor::randn(&[5, 8], 10.0, &mut r);
        let mut tape = Tape::new();
        let xv = tape.constant(x);
        let y = tape.softmax(xv, 1).unwrap();
        let out = tape.value(y);
        for row in 0..5 {
            let p = out.row(row);
            assert!(p.iter().all(|&v| v > 0.0 && v < 1.0));
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn elementwise_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "elem");
        // keep entries away from the kinks of relu / signed sqrt
        let mut x = Tensor::uniform(&[3, 5], 0.1, 1.0, &mut r);
        for v in x.data_mut() {
            if r.gen_bool(0.5) {
                *v = -*v;
            }
        }
        let y = Tensor::randn(&[3, 5], 1.0, &mut r);
        let leaves = [x, y];
        assert_passes("relu", move |t, v| { let o = t.relu(v[0]); weighted_sum(t, o, seed) }, &leaves);
        assert_passes("tanh", move |t, v| { let o = t.tanh(v[0]); weighted_sum(t, o, seed) }, &leaves);
        assert_passes("signed_sqrt", move |t, v| { let o = t.signed_sqrt(v[0]); weighted_sum(t, o, seed) }, &leaves);
        assert_passes("l2_normalize", move |t, v| { let o = t.l2_normalize(v[0]); weighted_sum(t, o, seed) }, &leaves);
        assert_passes("scale", move |t, v| { let o = t.scale(v[0], -1.7); weighted_sum(t, o, seed) }, &leaves);
        assert_passes("add", move |t, v| { let o = t.add(v[0], v[1])?; weighted_sum(t, o, seed) }, &leaves);
        assert_passes("sub", move |t, v| { let o = t.sub(v[0], v[1])?; weighted_sum(t, o, seed) }, &leaves);
        assert_passes("mul", move |t, v| { let o = t.mul(v[0], v[1])?; weighted_sum(t, o, seed) }, &leaves);
    }
}

#[test]
fn structural_primitive_gradients_match_finite_differences() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "struct");
        let a = Tensor::randn(&[2, 6], 1.0, &mut r);
        let b = Tensor::randn(&[2, 4], 1.0, &mut r);
        let bias = Tensor::randn(&[6], 1.0, &mut r);
        let img = Tensor::randn(&[2, 3, 4, 4], 1.0, &mut r);
        let gamma = Tensor::uniform(&[3], 0.5, 1.5, &mut r);
        let beta = Tensor::randn(&[3], 1.0, &mut r);
        let ws = Tensor::randn(&[3], 1.0, &mut r);
        let leaves = [a, b, bias, img, gamma, beta, ws];
        assert_passes(
            "concat/slice/outer/sum_pool/add_bias",
            move |t, v| {
                let c = t.concat(&[v[0], v[1]], 1)?;
                let s = t.slice(c, 1, 3, 6)?;
                let biased = t.add_bias(s, v[2])?;
                let o = t.outer(biased, v[1])?;
                let p = t.sum_pool(o, 4)?;
                weighted_sum(t, p, seed)
            },
            &leaves,
        );
        assert_passes(
            "batch_norm/global_avg_pool",
            move |t, v| {
                let (y, _) = t.batch_norm(v[3], v[4], v[5], None, 1e-5)?;
                let g = t.global_avg_pool(y)?;
                let m = t.reshape(g, &[6])?;
                weighted_sum(t, m, seed)
            },
            &leaves,
        );
        assert_passes(
            "batch_norm eval",
            move |t, v| {
                let (y, _) = t.batch_norm(v[3], v[4], v[5], Some((&[0.1, -0.2, 0.3], &[1.5, 0.5, 2.0])), 1e-5)?;
                weighted_sum(t, y, seed)
            },
            &leaves,
        );
        assert_passes(
            "weighted_sum",
            move |t, v| {
                let w = t.softmax(v[6], 0)?;
                let x0 = t.slice(v[0], 1, 0, 4)?;
                let y = t.weighted_sum(&[(x0, 0), (v[1], 2)], w)?;
                weighted_sum(t, y, seed)
            },
            &leaves,
        );
    }
}

#[test]
fn embedding_and_cross_entropy_gradients() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "emb");
        let table = Tensor::randn(&[6, 3], 1.0, &mut r);
        let ids: Vec<usize> = (0..10).map(|_| r.gen_range(0..6)).collect();
        let mask: Vec<f64> = (0..10).map(|i| if i % 5 < 3 { 1.0 } else { 0.0 }).collect();
        let labels: Vec<usize> = (0..2).map(|_| r.gen_range(0..3)).collect();
        assert_passes(
            "embedding_mean + cross_entropy",
            move |t, v| {
                let e = t.embedding_mean(v[0], &ids, &mask, 5)?;
                t.cross_entropy(e, &labels)
            },
            &[table],
        );
    }
}

#[test]
fn composite_conv_pool_matmul_softmax_cross_entropy() {
    for seed in 0..SEEDS {
        let mut r = rng::stream(seed, "composite");
        let leaves = [
            Tensor::uniform(&[2, 2, 6, 6], -1.0, 1.0, &mut r),
            Tensor::uniform(&[3, 2, 3, 3], -1.0, 1.0, &mut r),
            Tensor::uniform(&[12, 4], -1.0, 1.0, &mut r),
        ];
        let labels = vec![r.gen_range(0..4), r.gen_range(0..4)];
        assert_passes(
            "composite",
            move |t, v| {
                let c = t.conv2d(v[0], v[1], ConvGeometry::default())?;
                let p = t.pool2d(c, PoolKind::Max, 3, 2, 1)?;
                let flat = t.reshape(p, &[2, 12])?;
                let logits = t.matmul(flat, v[2])?;
                let probs = t.softmax(logits, 1)?;
                // cross-entropy on the softmax output taken as logits keeps
                // both primitives on the path
                t.cross_entropy(probs, &labels)
            },
            &leaves,
        );
    }
}

#[test]
fn replay_is_bitwise_identical() {
    let run = || {
        let mut r = rng::stream(5, "replay");
        let x = Tensor::uniform(&[2, 3, 7, 7], -1.0, 1.0, &mut r);
        let w = Tensor::uniform(&[4, 3, 3, 3], -1.0, 1.0, &mut r);
        let mut tape = Tape::new();
        let (xv, wv) = (tape.leaf(x), tape.leaf(w));
        let y = tape.conv2d(xv, wv, ConvGeometry::new(1, 1, 1, 1)).unwrap();
        let s = tape.softmax(y, 1).unwrap();
        let l = tape.sum(s);
        let out = tape.value(s).clone();
        let g = tape.backward(l).unwrap();
        (out, g.get(wv).unwrap().clone())
    };
    let (a, ga) = run();
    let (b, gb) = run();
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.data().iter().zip(gb.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}
