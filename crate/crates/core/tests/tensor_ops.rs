use dipformer::tensor::ops;
use dipformer::{Error, Tape, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

fn assert_close(a: &[f64], b: &[f64], tol: f64, what: &str) {
    assert_eq!(a.len(), b.len(), "{what}: length");
    for (i, (x, y)) in a.iter().zip(b).enumerate() {
        assert!((x - y).abs() <= tol, "{what}[{i}]: {x} vs {y}");
    }
}

fn conv_oracle(x: &Tensor<f64>, w: &Tensor<f64>, b: &[f64], stride: usize, pad: usize) -> Vec<f64> {
    let [n, cin, h, wd] = x.dims4().unwrap();
    let [cout, _, k, _] = w.dims4().unwrap();
    let ho = (h + 2 * pad - k) / stride + 1;
    let wo = (wd + 2 * pad - k) / stride + 1;
    let mut out = vec![0.0; n * cout * ho * wo];
    for ni in 0..n {
        for co in 0..cout {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = b[co];
                    for ci in 0..cin {
                        for ky in 0..k {
                            for kx in 0..k {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    s += x.at([ni, ci, iy as usize, ix as usize]) * w.at([co, ci, ky, kx]);
                                }
                            }
                        }
                    }
                    out[((ni * cout + co) * ho + oy) * wo + ox] = s;
                }
            }
        }
    }
    out
}

#[test]
fn conv2d_identity_and_overlap_count() {
    let x = Tensor::new(&[1, 1, 3, 3], (0..9).map(f64::from).collect()).unwrap();
    let one = Tensor::new(&[1, 1, 1, 1], vec![1.0]).unwrap();
    let zero = Tensor::new(&[1], vec![0.0]).unwrap();
    assert_eq!(ops::conv2d(&x, &one, Some(&zero), 1, 0).unwrap().data(), x.data());

    let ones = Tensor::full(&[1, 1, 3, 3], 1.0);
    let y = ops::conv2d(&ones, &ones, None, 1, 1).unwrap();
    assert_eq!(y.at([0, 0, 1, 1]), 9.0);
    for corner in [[0, 0], [0, 2], [2, 0], [2, 2]] {
        assert_eq!(y.at([0, 0, corner[0], corner[1]]), 4.0);
    }
}

#[test]
fn conv2d_matches_loop_oracle() {
    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, cin, cout) = (rng.random_range(1..3), rng.random_range(1..4), rng.random_range(1..5));
        let k = [1, 3, 5][rng.random_range(0..3)];
        let stride = rng.random_range(1..3);
        let pad = rng.random_range(0..=k / 2);
        let h = k + stride * rng.random_range(0..4);
        let w = k + stride * rng.random_range(0..4);
        let x = rand_tensor(&mut rng, &[n, cin, h, w]);
        let wt = rand_tensor(&mut rng, &[cout, cin, k, k]);
        let b: Vec<f64> = (0..cout).map(|_| rng.random_range(-1.0..1.0)).collect();
        let bt = Tensor::new(&[cout], b.clone()).unwrap();
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        if (h + 2 * pad - k) % stride != 0 || (w + 2 * pad - k) % stride != 0 {
            assert!(matches!(ops::conv2d(&x, &wt, Some(&bt), stride, pad), Err(Error::Geometry(_))));
            continue;
        }
        let y = ops::conv2d(&x, &wt, Some(&bt), stride, pad).unwrap();
        assert_eq!(y.shape(), &[n, cout, ho, wo]);
        assert_close(y.data(), &conv_oracle(&x, &wt, &b, stride, pad), 1e-5, &format!("seed {seed}"));
    }
}

#[test]
fn conv2d_standard_and_verification_agree() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[2, 3, 8, 8]);
    let w = rand_tensor(&mut rng, &[4, 3, 3, 3]);
    let y64 = ops::conv2d(&x, &w, None, 1, 1).unwrap();
    let y32 = ops::conv2d(&x.cast::<f32>(), &w.cast::<f32>(), None, 1, 1).unwrap();
    for (a, b) in y64.data().iter().zip(y32.data()) {
        assert!((a - *b as f64).abs() <= 1e-4 * a.abs().max(1.0));
    }
}

#[test]
fn conv2d_channel_mismatch_is_a_dimension_error() {
    let x = Tensor::<f64>::zeros(&[1, 2, 4, 4]);
    let w = Tensor::<f64>::zeros(&[1, 3, 3, 3]);
    assert!(matches!(ops::conv2d(&x, &w, None, 1, 1), Err(Error::Dimension(_))));
}

#[test]
fn group_norm_statistics_oracle() {
    let (gamma, beta) = (Tensor::full(&[8], 1.0), Tensor::zeros(&[8]));
    for seed in 0..20u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let x = Tensor::from_fn(&[2, 8, 4, 4], |_| rng.random_range(-3.0..5.0));
        let y = ops::group_norm(&x, 4, &gamma, &beta, 1e-5).unwrap();
        for group in y.data().chunks(2 * 16) {
            let mean = group.iter().sum::<f64>() / group.len() as f64;
            let var = group.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / group.len() as f64;
            assert!(mean.abs() <= 1e-6, "mean {mean}");
            assert!((var - 1.0).abs() <= 1e-4, "var {var}");
        }
    }
}

#[test]
fn group_norm_constant_input_and_affine() {
    let x = Tensor::full(&[1, 4, 3, 3], 2.5);
    let zeros = ops::group_norm(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5).unwrap();
    assert!(zeros.data().iter().all(|&v| v == 0.0));
    let fives = ops::group_norm(&x, 2, &Tensor::full(&[4], 1.0), &Tensor::full(&[4], 5.0), 1e-5).unwrap();
    assert!(fives.data().iter().all(|&v| v == 5.0));
    let bad = ops::group_norm(&x, 3, &Tensor::full(&[4], 1.0), &Tensor::zeros(&[4]), 1e-5);
    assert!(matches!(bad, Err(Error::Config(_))));
}

#[test]
fn linear_matches_loop_oracle() {
    let eye = Tensor::from_fn(&[3, 3], |i| if i % 4 == 0 { 1.0 } else { 0.0 });
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let x = rand_tensor(&mut rng, &[5, 3]);
    assert_eq!(ops::linear(&x, &eye, None).unwrap().data(), x.data());
    let b = Tensor::new(&[4], vec![1.0, -2.0, 3.0, 0.5]).unwrap();
    let y = ops::linear(&x, &Tensor::zeros(&[4, 3]), Some(&b)).unwrap();
    for row in y.data().chunks(4) {
        assert_eq!(row, b.data());
    }

    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (rows, din, dout) = (rng.random_range(1..7), rng.random_range(1..6), rng.random_range(1..6));
        let x = rand_tensor(&mut rng, &[2, rows, din]);
        let w = rand_tensor(&mut rng, &[dout, din]);
        let b = rand_tensor(&mut rng, &[dout]);
        let y = ops::linear(&x, &w, Some(&b)).unwrap();
        assert_eq!(y.shape(), &[2, rows, dout]);
        let mut want = Vec::new();
        for r in 0..2 * rows {
            for o in 0..dout {
                let mut s = b.data()[o];
                for i in 0..din {
                    s += x.data()[r * din + i] * w.data()[o * din + i];
                }
                want.push(s);
            }
        }
        assert_close(y.data(), &want, 1e-5, &format!("seed {seed}"));
    }
    let bad = ops::linear(&Tensor::<f64>::zeros(&[2, 3]), &Tensor::zeros(&[4, 2]), None);
    assert!(matches!(bad, Err(Error::Dimension(_))));
}

#[test]
fn max_pool_matches_loop_oracle() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::max_pool2d(&x, 2, 2).unwrap().data(), &[4.0]);
    let c = Tensor::full(&[1, 2, 4, 4], 0.7);
    assert!(ops::max_pool2d(&c, 2, 2).unwrap().data().iter().all(|&v| v == 0.7));

    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let k = rng.random_range(1..4);
        let (h, w) = (k * rng.random_range(1..5), k * rng.random_range(1..5));
        let x = rand_tensor(&mut rng, &[1, 2, h, w]);
        let y = ops::max_pool2d(&x, k, k).unwrap();
        let (ho, wo) = (h / k, w / k);
        let mut want = Vec::new();
        for c in 0..2 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut m = f64::NEG_INFINITY;
                    for dy in 0..k {
                        for dx in 0..k {
                            m = m.max(x.at([0, c, oy * k + dy, ox * k + dx]));
                        }
                    }
                    want.push(m);
                }
            }
        }
        assert_eq!(y.data(), &want[..], "seed {seed}");
    }
    assert!(matches!(ops::max_pool2d(&Tensor::<f64>::zeros(&[1, 1, 5, 4]), 2, 2), Err(Error::Geometry(_))));
}

#[test]
fn max_pool_gradient_goes_to_first_tie() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::full(&[1, 1, 2, 2], 3.0).with_requires_grad(true));
    let y = tape.max_pool2d(x, 2, 2).unwrap();
    let s = tape.sum(y).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[1.0, 0.0, 0.0, 0.0]);
}

#[test]
fn adaptive_pool_matches_bin_oracle() {
    let ramp = Tensor::new(&[1, 1, 7, 7], (0..49).map(f64::from).collect()).unwrap();
    let y = ops::adaptive_avg_pool2d(&ramp, 2).unwrap();
    // bins rows/cols {0..4, 3..7}
    let bin = |r: std::ops::Range<usize>, c: std::ops::Range<usize>| {
        let v: Vec<f64> = r.flat_map(|i| c.clone().map(move |j| (i * 7 + j) as f64)).collect();
        v.iter().sum::<f64>() / v.len() as f64
    };
    assert_eq!(y.data(), &[bin(0..4, 0..4), bin(0..4, 3..7), bin(3..7, 0..4), bin(3..7, 3..7)]);

    for seed in 0..120u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..12), rng.random_range(1..12));
        let p = rng.random_range(1..=h.min(w));
        let x = rand_tensor(&mut rng, &[2, 2, h, w]);
        let y = ops::adaptive_avg_pool2d(&x, p).unwrap();
        let edges = |i: usize, len: usize| {
            let lo = (i as f64 * len as f64 / p as f64).floor() as usize;
            let hi = ((i + 1) as f64 * len as f64 / p as f64).ceil() as usize;
            lo..hi
        };
        let mut want = Vec::new();
        for plane in 0..4 {
            for i in 0..p {
                for j in 0..p {
                    let (rows, cols) = (edges(i, h), edges(j, w));
                    let count = (rows.len() * cols.len()) as f64;
                    let s: f64 = rows
                        .flat_map(|r| cols.clone().map(move |c| (r, c)))
                        .map(|(r, c)| x.data()[plane * h * w + r * w + c])
                        .sum();
                    want.push(s / count);
                }
            }
        }
        assert_close(y.data(), &want, 1e-12, &format!("seed {seed}"));
    }
    let x = Tensor::<f64>::zeros(&[1, 1, 3, 5]);
    assert!(matches!(ops::adaptive_avg_pool2d(&x, 4), Err(Error::Geometry(_))));
}

#[test]
fn adaptive_pool_edge_sizes() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = rand_tensor(&mut rng, &[1, 3, 5, 5]);
    assert_eq!(ops::adaptive_avg_pool2d(&x, 5).unwrap().data(), x.data());
    let g = ops::adaptive_avg_pool2d(&x, 1).unwrap();
    for (c, plane) in x.data().chunks(25).enumerate() {
        assert!((g.data()[c] - plane.iter().sum::<f64>() / 25.0).abs() < 1e-12);
    }
}

fn softmax_oracle(x: &[f64]) -> Vec<f64> {
    // summed in sorted order with compensation, on max-shifted values
    let m = x.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut e: Vec<f64> = x.iter().map(|v| (v - m).exp()).collect();
    let mut sorted = e.clone();
    sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let (mut sum, mut comp) = (0.0f64, 0.0f64);
    for v in sorted {
        let y = v - comp;
        let t = sum + y;
        comp = (t - sum) - y;
        sum = t;
    }
    e.iter_mut().for_each(|v| *v /= sum);
    e
}

#[test]
fn softmax_cases_and_oracle() {
    let s = |v: Vec<f64>| ops::softmax(&Tensor::new(&[v.len()], v).unwrap()).unwrap().into_data();
    assert_eq!(s(vec![0.0, 0.0]), vec![0.5, 0.5]);
    assert_eq!(s(vec![1000.0, 1000.0]), vec![0.5, 0.5]);
    assert_close(&s(vec![1.0, 2.0, 3.0]), &softmax_oracle(&[1.0, 2.0, 3.0]), 1e-7, "[1,2,3]");

    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = rng.random_range(1..20);
        let x = Tensor::from_fn(&[3, d], |_| rng.random_range(-30.0..30.0));
        let y = ops::softmax(&x).unwrap();
        let shift = rng.random_range(-100.0..100.0);
        let ys = ops::softmax(&Tensor::from_fn(&[3, d], |i| x.data()[i] + shift)).unwrap();
        for (r, row) in y.data().chunks(d).enumerate() {
            assert!(row.iter().all(|&p| p > 0.0));
            assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-6);
            assert_close(row, &softmax_oracle(&x.data()[r * d..(r + 1) * d]), 1e-12, "oracle");
        }
        assert_close(y.data(), ys.data(), 1e-6, "shift invariance");
    }
}

#[test]
fn cross_entropy_matches_log_sum_exp_oracle() {
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (n, k, h, w) = (2, rng.random_range(2..6), 3, 4);
        let logits = Tensor::from_fn(&[n, k, h, w], |_| rng.random_range(-8.0..8.0));
        let labels: Vec<u8> = (0..n * h * w)
            .map(|_| if rng.random_bool(0.2) { 255 } else { rng.random_range(0..k as u8) })
            .collect();
        let (mut total, mut count) = (0.0, 0);
        for ni in 0..n {
            for p in 0..h * w {
                let y = labels[ni * h * w + p];
                if y == 255 {
                    continue;
                }
                let z: Vec<f64> = (0..k).map(|c| logits.data()[(ni * k + c) * h * w + p]).collect();
                let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let lse = m + z.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
                total += lse - z[y as usize];
                count += 1;
            }
        }
        let mut tape = Tape::new();
        let x = tape.constant(logits.clone());
        match tape.cross_entropy(x, &labels, 255) {
            Ok(l) => assert!((tape.value(l).data()[0] - total / count as f64).abs() < 1e-12),
            Err(Error::DegenerateBatch) => assert_eq!(count, 0),
            Err(e) => panic!("{e}"),
        }
        let mut tape32 = Tape::new();
        let x = tape32.constant(logits.cast::<f32>());
        if let Ok(l) = tape32.cross_entropy(x, &labels, 255) {
            let v = tape32.value(l).data()[0] as f64;
            assert!((v - total / count as f64).abs() <= 1e-4 * (total / count as f64).abs().max(1.0));
        }
    }
}

#[test]
fn bilinear_matches_hat_function_oracle() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
    assert_eq!(ops::bilinear_resize(&x, 2, 2).unwrap().data(), x.data());
    let c = Tensor::full(&[1, 2, 3, 5], -1.25);
    assert!(ops::bilinear_resize(&c, 7, 2).unwrap().data().iter().all(|&v: &f64| (v + 1.25).abs() < 1e-12));

    let weights = |o: usize, input: usize, output: usize| -> Vec<f64> {
        let src = ((o as f64 + 0.5) * input as f64 / output as f64 - 0.5).clamp(0.0, (input - 1) as f64);
        (0..input).map(|i| (1.0 - (src - i as f64).abs()).max(0.0)).collect()
    };
    let check = |x: &Tensor<f64>, ho: usize, wo: usize, tol: f64| {
        let [_, c, h, w] = x.dims4().unwrap();
        let y = ops::bilinear_resize(x, ho, wo).unwrap();
        let mut want = Vec::new();
        for ch in 0..c {
            for oy in 0..ho {
                let wy = weights(oy, h, ho);
                for ox in 0..wo {
                    let wx = weights(ox, w, wo);
                    let mut s = 0.0;
                    for (iy, a) in wy.iter().enumerate() {
                        for (ix, b) in wx.iter().enumerate() {
                            s += a * b * x.at([0, ch, iy, ix]);
                        }
                    }
                    want.push(s);
                }
            }
        }
        assert_close(y.data(), &want, tol, &format!("{h}x{w} -> {ho}x{wo}"));
    };
    check(&x, 4, 4, 1e-6);
    for seed in 0..100u64 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (h, w) = (rng.random_range(1..9), rng.random_range(1..9));
        let x = rand_tensor(&mut rng, &[1, 2, h, w]);
        check(&x, rng.random_range(1..17), rng.random_range(1..17), 1e-12);
    }
}

#[test]
fn backward_examples() {
    let mut tape = Tape::<f64>::new();
    let x = tape.leaf(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap().with_requires_grad(true));
    let sq = tape.mul(x, x).unwrap();
    let s = tape.sum(sq).unwrap();
    tape.backward(s).unwrap();
    assert_eq!(tape.grad(x).unwrap(), &[2.0, 4.0, 6.0]);
}

#[test]
fn forward_is_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[1, 3, 16, 16], |_| rng.random_range(-1.0f32..1.0));
        let w = Tensor::from_fn(&[8, 3, 3, 3], |_| rng.random_range(-1.0f32..1.0));
        let y = ops::conv2d(&x, &w, None, 1, 1).unwrap();
        ops::group_norm(&y, 4, &Tensor::full(&[8], 1.0), &Tensor::zeros(&[8]), 1e-5).unwrap()
    };
    let (a, b) = (run(), run());
    assert!(a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn nan_survives_relu_and_max_pool() {
    let x = Tensor::new(&[1, 1, 2, 2], vec![1.0, f64::NAN, 3.0, -2.0]).unwrap();
    let pooled = ops::max_pool2d(&x, 2, 2).unwrap();
    assert!(pooled.data()[0].is_nan());
    let mut tape = Tape::new();
    let v = tape.constant(x);
    let r = tape.relu(v).unwrap();
    let out = tape.value(r).data();
    assert!(out[1].is_nan());
    assert_eq!((out[0], out[2], out[3]), (1.0, 3.0, 0.0));
}
