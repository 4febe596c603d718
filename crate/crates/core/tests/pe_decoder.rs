use dipformer::decoder::{decode, upsample_logits, DecoderConfig, MlpDecoderParams};
use dipformer::params::{ParamLayout, ParamStore};
use dipformer::pe::*;
use dipformer::tensor::ops;
use dipformer::train::{adamw_step, AdamWState};
use dipformer::{Error, Tape, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

#[test]
fn sincos_dot_product_depends_only_on_offset() {
    let (h, w, c) = (8, 8, 16);
    let pe = sincos_pe::<f64>(h, w, c).unwrap();
    let dot = |y1: usize, x1: usize, y2: usize, x2: usize| -> f64 {
        (0..c).map(|ch| pe.at([0, ch, y1, x1]) * pe.at([0, ch, y2, x2])).sum()
    };
    let mut by_offset = vec![Vec::new(); w];
    for y in 0..h {
        for x1 in 0..w {
            for x2 in x1..w {
                by_offset[x2 - x1].push(dot(y, x1, y, x2));
            }
        }
    }
    for (d, values) in by_offset.iter().enumerate() {
        let spread = values.iter().cloned().fold(f64::MIN, f64::max) - values.iter().cloned().fold(f64::MAX, f64::min);
        assert!(spread < 1e-9, "offset {d}: spread {spread}");
    }
    // same along columns
    for x in 0..w {
        for d in 0..h {
            assert!((dot(0, x, d, x) - dot(h - 1 - d, x, h - 1, x)).abs() < 1e-9);
        }
    }
    assert_eq!(pe.at([0, 0, 0, 0]), 0.0);
    assert_eq!(pe, sincos_pe::<f64>(h, w, c).unwrap());
}

#[test]
fn learnable_table_init_and_update() {
    let (h, w, c) = (32, 32, 16);
    let mut layout = ParamLayout::default();
    let pe = LearnablePe::register(&mut layout, "pe", h, w, c);
    let mut store: ParamStore<f64> = layout.init(11);
    let table = store.get(pe.table).data().to_vec();
    assert!(table.len() >= 10_000);
    let mean = table.iter().sum::<f64>() / table.len() as f64;
    let std = (table.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / table.len() as f64).sqrt();
    assert!((std - 0.02).abs() <= 0.2 * 0.02, "std {std}");

    let forward = |store: &ParamStore<f64>| {
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let v = learnable_pe(&mut tape, &b, &pe, h, w, c).unwrap();
        tape.value(v).clone()
    };
    assert_eq!(forward(&store), forward(&store));

    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let v = learnable_pe(&mut tape, &b, &pe, h, w, c).unwrap();
    let loss = tape.sum(v).unwrap();
    tape.backward(loss).unwrap();
    store.zero_grads();
    store.collect_grads(&tape, &b);
    let mut state = AdamWState::new(&store);
    adamw_step(&mut store, &mut state, 1e-3, 0.01).unwrap();
    let after = store.get(pe.table).data();
    assert!(after.iter().zip(&table).all(|(a, b)| a < b));

    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    assert!(matches!(learnable_pe(&mut tape, &b, &pe, h, w, 8), Err(Error::Config(_))));
}

fn implicit_setup(c: usize, seed: u64) -> (ImplicitPe, ParamStore<f64>) {
    let mut layout = ParamLayout::default();
    let params = ImplicitPe::register(&mut layout, "pe", c);
    (params, layout.init(seed))
}

#[test]
fn implicit_zero_sum_kernel_leaves_constant_interior() {
    let (params, mut store) = implicit_setup(3, 0);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for ch in 0..3 {
        let w = &mut store.get_mut(params.weight).data_mut()[ch * 9..ch * 9 + 9];
        for v in w.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        let mean = w.iter().sum::<f64>() / 9.0;
        w.iter_mut().for_each(|v| *v -= mean);
    }
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(Tensor::full(&[2, 3, 6, 7], 0.75));
    let y = implicit_pe(&mut tape, &b, x, &params).unwrap();
    let out = tape.value(y);
    for n in 0..2 {
        for ch in 0..3 {
            for i in 1..5 {
                for j in 1..6 {
                    assert!((out.at([n, ch, i, j]) - 0.75).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn implicit_matches_depthwise_loop_oracle() {
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let c = rng.random_range(1..5);
        let (h, w) = (rng.random_range(1..7), rng.random_range(1..7));
        let (params, mut store) = implicit_setup(c, seed);
        *store.get_mut(params.bias) = rand_tensor(&mut rng, &[c]);
        let x = rand_tensor(&mut rng, &[2, c, h, w]);
        let wt = store.get(params.weight).clone();
        let bias = store.get(params.bias).clone();
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let y = implicit_pe(&mut tape, &b, xv, &params).unwrap();
        let out = tape.value(y);
        for n in 0..2 {
            for ch in 0..c {
                for i in 0..h {
                    for j in 0..w {
                        let mut acc = bias.data()[ch];
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (yi, xj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if yi >= 0 && xj >= 0 && (yi as usize) < h && (xj as usize) < w {
                                    acc += wt.at([ch, 0, ki, kj]) * x.at([n, ch, yi as usize, xj as usize]);
                                }
                            }
                        }
                        let expect = x.at([n, ch, i, j]) + acc;
                        assert!((out.at([n, ch, i, j]) - expect).abs() < 1e-5, "seed {seed}");
                    }
                }
            }
        }
    }
}

#[test]
fn implicit_rejects_channel_mismatch() {
    let (params, store) = implicit_setup(4, 0);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let x = tape.constant(Tensor::zeros(&[1, 3, 4, 4]));
    assert!(matches!(implicit_pe(&mut tape, &b, x, &params), Err(Error::Config(_))));
}

fn fuse_setup(kind: PeKind, dc: usize, c: usize) -> (DepthFuseParams, ParamStore<f64>) {
    let mut layout = ParamLayout::default();
    let params = DepthFuseParams::register(&mut layout, "fuse", dc, c, kind).unwrap();
    (params, layout.init(3))
}

fn fuse(store: &ParamStore<f64>, params: &DepthFuseParams, kind: PeKind, r: &Tensor<f64>, d: &Tensor<f64>) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let (rv, dv) = (tape.constant(r.clone()), tape.constant(d.clone()));
    let y = depth_fuse_baseline(&mut tape, &b, rv, dv, kind, params).unwrap();
    tape.value(y).clone()
}

#[test]
fn depth_add_with_zero_depth_returns_features() {
    let (params, store) = fuse_setup(PeKind::DepthAdd, 1, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let r = rand_tensor(&mut rng, &[2, 6, 5, 4]);
    let d = Tensor::zeros(&[2, 1, 5, 4]);
    assert_eq!(fuse(&store, &params, PeKind::DepthAdd, &r, &d), r);
}

#[test]
fn depth_concat_identity_weights_return_features() {
    let c = 5;
    let (params, mut store) = fuse_setup(PeKind::DepthConcat, 1, c);
    let concat = params.concat.unwrap();
    let w = store.get_mut(concat.weight).data_mut();
    w.fill(0.0);
    for i in 0..c {
        w[i * 2 * c + i] = 1.0;
    }
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let r = rand_tensor(&mut rng, &[1, c, 3, 6]);
    let d = rand_tensor(&mut rng, &[1, 1, 3, 6]);
    let out = fuse(&store, &params, PeKind::DepthConcat, &r, &d);
    assert!(out.max_abs_diff(&r) < 1e-15);
}

#[test]
fn depth_add_matches_elementwise_oracle() {
    let (dc, c) = (2, 4);
    let (params, mut store) = fuse_setup(PeKind::DepthAdd, dc, c);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    *store.get_mut(params.proj.weight) = rand_tensor(&mut rng, &[c, dc]);
    *store.get_mut(params.proj.bias) = rand_tensor(&mut rng, &[c]);
    let r = rand_tensor(&mut rng, &[2, c, 3, 3]);
    let d = rand_tensor(&mut rng, &[2, dc, 3, 3]);
    let out = fuse(&store, &params, PeKind::DepthAdd, &r, &d);
    let (w, b) = (store.get(params.proj.weight), store.get(params.proj.bias));
    for n in 0..2 {
        for o in 0..c {
            for i in 0..3 {
                for j in 0..3 {
                    let proj: f64 = b.data()[o] + (0..dc).map(|k| w.data()[o * dc + k] * d.at([n, k, i, j])).sum::<f64>();
                    assert!((out.at([n, o, i, j]) - (r.at([n, o, i, j]) + proj)).abs() < 1e-6);
                }
            }
        }
    }
}

#[test]
fn fusion_registration_rejects_non_pixel_kinds() {
    let mut layout = ParamLayout::default();
    for kind in [PeKind::SinCos, PeKind::Learnable, PeKind::Implicit, PeKind::DepthSao] {
        assert!(matches!(DepthFuseParams::register(&mut layout, "f", 1, 4, kind), Err(Error::Config(_))));
    }
}

fn dec_cfg() -> DecoderConfig {
    DecoderConfig {
        unify_channels: 8,
        n_cls: 3,
        stage_channels: vec![4, 8, 12, 16],
        hidden: 6,
    }
}

fn dec_setup(seed: u64) -> (MlpDecoderParams, ParamStore<f64>) {
    let mut layout = ParamLayout::default();
    let params = MlpDecoderParams::register(&mut layout, "dec", &dec_cfg()).unwrap();
    let mut store: ParamStore<f64> = layout.init(seed);
    // larger weights so that perturbations are well above rounding
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    store.map_values(|_, v| v.iter_mut().for_each(|x| *x = rng.random_range(-0.5..0.5)));
    (params, store)
}

fn feature_maps(rng: &mut ChaCha8Rng, n: usize, size: usize) -> Vec<Tensor<f64>> {
    dec_cfg()
        .stage_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| rand_tensor(rng, &[n, c, size >> (i + 1), size >> (i + 1)]))
        .collect()
}

fn run_decoder(store: &ParamStore<f64>, params: &MlpDecoderParams, feats: &[Tensor<f64>]) -> Tensor<f64> {
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    let y = decode(&mut tape, &b, &vars, params).unwrap();
    tape.value(y).clone()
}

#[test]
fn decoder_emits_quarter_resolution_logits() {
    let (params, store) = dec_setup(0);
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let out = run_decoder(&store, &params, &feature_maps(&mut rng, 1, 64));
    assert_eq!(out.shape(), &[1, 3, 16, 16]);
}

#[test]
fn zero_features_and_biases_give_zero_logits() {
    let (params, mut store) = dec_setup(1);
    store.map_values(|name, v| {
        if name.ends_with(".bias") {
            v.fill(0.0)
        }
    });
    let feats: Vec<Tensor<f64>> = dec_cfg()
        .stage_channels
        .iter()
        .enumerate()
        .map(|(i, &c)| Tensor::zeros(&[2, c, 32 >> i, 32 >> i]))
        .collect();
    let out = run_decoder(&store, &params, &feats);
    assert!(out.data().iter().all(|&v| v == 0.0));
}

#[test]
fn every_stage_reaches_the_logits() {
    let (params, store) = dec_setup(2);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let feats = feature_maps(&mut rng, 1, 64);
    let base = run_decoder(&store, &params, &feats);
    for s in 0..feats.len() {
        let mut bumped = feats.clone();
        bumped[s].data_mut().iter_mut().for_each(|v| *v += 0.5);
        let diff = run_decoder(&store, &params, &bumped).max_abs_diff(&base);
        assert!(diff > 1e-6, "stage {s} had no effect");

        // with that stage's projection silenced the perturbation vanishes
        let mut silent = store.clone();
        silent.get_mut(params.unify[s].weight).data_mut().fill(0.0);
        let a = run_decoder(&silent, &params, &feats);
        let b = run_decoder(&silent, &params, &bumped);
        assert_eq!(a, b, "stage {s}");
    }
}

#[test]
fn permuting_classifier_rows_permutes_logits() {
    let (params, store) = dec_setup(3);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let feats = feature_maps(&mut rng, 2, 32);
    let base = run_decoder(&store, &params, &feats);
    let perm = [2usize, 0, 1];
    let hidden = dec_cfg().hidden;
    let mut permuted = store.clone();
    let (w, b) = (store.get(params.classify.weight).clone(), store.get(params.classify.bias).clone());
    for (dst, &src) in perm.iter().enumerate() {
        permuted.get_mut(params.classify.weight).data_mut()[dst * hidden..(dst + 1) * hidden]
            .copy_from_slice(&w.data()[src * hidden..(src + 1) * hidden]);
        permuted.get_mut(params.classify.bias).data_mut()[dst] = b.data()[src];
    }
    let out = run_decoder(&permuted, &params, &feats);
    for n in 0..2 {
        for (dst, &src) in perm.iter().enumerate() {
            for i in 0..8 {
                for j in 0..8 {
                    assert_eq!(out.at([n, dst, i, j]), base.at([n, src, i, j]));
                }
            }
        }
    }
}

#[test]
fn decoder_cost_is_linear_in_pixels() {
    let (params, store) = dec_setup(4);
    let macs = |size: usize| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats = feature_maps(&mut rng, 1, size);
        let mut tape = Tape::new();
        let b = store.bind(&mut tape);
        let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
        decode(&mut tape, &b, &vars, &params).unwrap();
        tape.counter().total("decoder") as f64
    };
    for size in [32, 64, 128] {
        let ratio = macs(2 * size) / macs(size);
        assert!((ratio - 4.0).abs() <= 0.04, "size {size}: ratio {ratio}");
    }
}

#[test]
fn decoder_rejects_bad_inputs() {
    let (params, store) = dec_setup(5);
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let feats = feature_maps(&mut rng, 2, 32);
    let mut tape = Tape::new();
    let b = store.bind(&mut tape);
    let vars: Vec<Var> = feats.iter().map(|f| tape.constant(f.clone())).collect();
    assert!(matches!(decode(&mut tape, &b, &vars[..3], &params), Err(Error::Dimension(_))));
    let mut mixed = vars.clone();
    mixed[2] = tape.constant(rand_tensor(&mut rng, &[1, 12, 4, 4]));
    assert!(matches!(decode(&mut tape, &b, &mixed, &params), Err(Error::Dimension(_))));
}

fn upsample(x: &Tensor<f64>, h: usize, w: usize) -> Result<Tensor<f64>, Error> {
    let mut tape = Tape::new();
    let v = tape.constant(x.clone());
    let y = upsample_logits(&mut tape, v, h, w)?;
    Ok(tape.value(y).clone())
}

#[test]
fn upsampling_constant_logits_is_constant() {
    let x = Tensor::full(&[1, 3, 16, 16], -1.25);
    let y = upsample(&x, 64, 64).unwrap();
    assert_eq!(y.shape(), &[1, 3, 64, 64]);
    assert!(y.data().iter().all(|&v| (v + 1.25).abs() < 1e-12));
    assert!(matches!(upsample(&x, 48, 64), Err(Error::Geometry(_))));
    assert!(matches!(upsample(&x, 64, 65), Err(Error::Geometry(_))));
}

#[test]
fn upsampling_keeps_block_labels() {
    for seed in 0..10u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        // 8x8-pixel blocks at full resolution are 2x2 cells on the logit grid
        let blocks: Vec<usize> = (0..64).map(|_| rng.random_range(0..3)).collect();
        let label = |i: usize, j: usize| blocks[(i / 8) * 8 + j / 8];
        let logits = Tensor::from_fn(&[1, 3, 16, 16], |idx| {
            let (c, i, j) = (idx / 256, (idx / 16) % 16, idx % 16);
            if label(i * 4, j * 4) == c { 4.0 } else { 0.0 }
        });
        let up = upsample(&logits, 64, 64).unwrap();
        let pred = dipformer::model::argmax_labels(&up).unwrap();
        for i in 0..64 {
            for j in 0..64 {
                // only the outer corner pixels of a block can blend three neighbors
                let ring = |v: usize| v % 8 == 0 || v % 8 == 7;
                if ring(i) && ring(j) {
                    continue;
                }
                assert_eq!(pred[i * 64 + j] as usize, label(i, j), "seed {seed} at {i},{j}");
            }
        }
    }
}

#[test]
fn upsample_then_average_recovers_smooth_fields() {
    let x = Tensor::from_fn(&[1, 2, 16, 16], |idx| {
        let (c, i, j) = (idx / 256, (idx / 16) % 16, idx % 16);
        let f = std::f64::consts::PI / 15.0;
        // curvature stays below 4e-3 per cell^2
        (0.08 - 0.02 * c as f64) * (f * i as f64).cos() * (f * j as f64).cos()
    });
    let up = upsample(&x, 64, 64).unwrap();
    let down = ops::adaptive_avg_pool2d(&up, 16).unwrap();
    let err = down.max_abs_diff(&x);
    assert!(err < 1e-3, "round trip error {err}");
}
