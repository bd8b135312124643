use std::time::Instant;

use crystvox_tensor::gradcheck::{check_inputs, DEFAULT_STEP};
use crystvox_tensor::selfcheck::layer_suite;
use crystvox_tensor::{Conv3d, Graph, NormMode, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Direct 7-loop cross-correlation in f64.
#[allow(clippy::too_many_arguments)]
fn naive_conv(x: &[f32], xs: [usize; 5], w: &[f32], ws: [usize; 5], b: Option<&[f32]>, stride: usize, pad: (usize, usize)) -> (Vec<f64>, [usize; 5]) {
    let [n, ci, d, h, wd] = xs;
    let [co, _, kd, kh, kw] = ws;
    let (lo, hi) = pad;
    let o = |i: usize, k: usize| (i + lo + hi - k) / stride + 1;
    let (od, oh, ow) = (o(d, kd), o(h, kh), o(wd, kw));
    let mut out = vec![0.0; n * co * od * oh * ow];
    for bn in 0..n {
        for c_out in 0..co {
            for z in 0..od {
                for y in 0..oh {
                    for xx in 0..ow {
                        let mut acc = b.map_or(0.0, |b| b[c_out] as f64);
                        for c_in in 0..ci {
                            for a in 0..kd {
                                for bb in 0..kh {
                                    for c in 0..kw {
                                        let iz = (z * stride + a) as isize - lo as isize;
                                        let iy = (y * stride + bb) as isize - lo as isize;
                                        let ix = (xx * stride + c) as isize - lo as isize;
                                        if iz < 0 || iy < 0 || ix < 0 || iz >= d as isize || iy >= h as isize || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((bn * ci + c_in) * d + iz as usize) * h + iy as usize) * wd + ix as usize;
                                        let wi = (((c_out * ci + c_in) * kd + a) * kh + bb) * kw + c;
                                        acc += x[xi] as f64 * w[wi] as f64;
                                    }
                                }
                            }
                        }
                        out[(((bn * co + c_out) * od + z) * oh + y) * ow + xx] = acc;
                    }
                }
            }
        }
    }
    (out, [n, co, od, oh, ow])
}

/// Random geometry covering both strides, asymmetric padding and narrow and wide output channels.
fn random_geometry(rng: &mut ChaCha8Rng, max_side: usize) -> ([usize; 5], [usize; 5], usize, (usize, usize)) {
    let k = rng.random_range(1..=5);
    let stride = rng.random_range(1..=2);
    let pad = (rng.random_range(0..=2), rng.random_range(0..=2));
    let xs = [
        rng.random_range(1..=3),
        rng.random_range(1..=4),
        rng.random_range(k..=k + max_side),
        rng.random_range(k..=k + max_side),
        rng.random_range(k..=k + max_side),
    ];
    let co = [1, 2, 3, 4, 9, 12, 33, 40][rng.random_range(0..8)];
    (xs, [co, xs[1], k, k, k], stride, pad)
}

fn conv_matches_reference(seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (xs, ws, stride, pad) = random_geometry(&mut rng, 6);
    let x: Vec<f32> = (0..xs.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let w: Vec<f32> = (0..ws.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect();
    let bias: Vec<f32> = (0..ws[0]).map(|_| rng.random_range(-1.0..1.0)).collect();
    let (want, shape) = naive_conv(&x, xs, &w, ws, Some(&bias), stride, pad);

    let mut g = Graph::<f32>::new();
    let xv = g.input(Tensor::new(&xs, x).unwrap());
    let wv = g.input(Tensor::new(&ws, w).unwrap());
    let bv = g.input(Tensor::new(&[ws[0]], bias).unwrap());
    let y = g.conv3d(xv, wv, Some(bv), Conv3d::with_padding(stride, pad.0, pad.1)).unwrap();
    assert_eq!(g.shape(y), &shape);
    let got = g.value(y).data();
    let err = got.iter().zip(&want).map(|(a, b)| (*a as f64 - b).abs()).fold(0.0, f64::max);
    let scale = want.iter().map(|v| v.abs()).fold(0.0, f64::max);
    err / scale.max(f64::MIN_POSITIVE)
}

#[test]
fn conv3d_matches_naive_reference() {
    for seed in 0..25 {
        let rel = conv_matches_reference(seed);
        assert!(rel < 1e-5, "seed {seed}: relative error {rel:e}");
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn conv3d_reference_property(seed in any::<u64>()) {
        prop_assert!(conv_matches_reference(seed) < 1e-5);
    }
}

#[test]
fn conv3d_gradients_match_finite_differences_on_random_geometries() {
    for seed in 0..12 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (xs, ws, stride, (lo, hi)) = random_geometry(&mut rng, 3);
        let x = Tensor::new(&xs, (0..xs.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let w = Tensor::new(&ws, (0..ws.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap();
        let report = check_inputs(&[x, w], DEFAULT_STEP, |g, v| {
            let y = g.conv3d(v[0], v[1], None, Conv3d::with_padding(stride, lo, hi))?;
            let y2 = g.mul(y, y)?;
            Ok(g.sum(y2))
        })
        .unwrap();
        assert!(report.max_rel_error < 1e-6, "seed {seed} {xs:?} {ws:?} s{stride} pad ({lo},{hi}): {report:?}");
    }
}

#[test]
fn every_layer_passes_finite_differences() {
    let start = Instant::now();
    let reports = layer_suite(20, 0x5eed).unwrap();
    for r in &reports {
        assert!(r.passed(), "{}: max relative error {:e} ≥ {:e}", r.layer, r.worst.max_rel_error, r.tolerance);
        assert_eq!(r.cases, 20);
    }
    assert!(start.elapsed().as_secs() < 120);
}

#[test]
fn kl_gradient_within_tight_tolerance() {
    let inputs = [
        Tensor::new(&[2, 3], vec![0.3, -1.2, 0.8, 0.0, 2.0, -0.4]).unwrap(),
        Tensor::new(&[2, 3], vec![-0.5, 0.2, 1.1, -2.0, 0.0, 0.7]).unwrap(),
    ];
    let r = check_inputs(&inputs, DEFAULT_STEP, |g, v| g.kl_diag_gaussian(v[0], v[1])).unwrap();
    assert!(r.max_rel_error < 1e-5, "{r:?}");
}

fn build_net(g: &mut Graph<f64>, x: &Tensor<f64>, w1: &Tensor<f64>, w2: &Tensor<f64>) -> crystvox_tensor::Var {
    let x = g.input(x.clone());
    let w1 = g.leaf(w1.clone(), true);
    let w2 = g.leaf(w2.clone(), true);
    let gamma = g.input(Tensor::full(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let mut running = Tensor::new(&[2, 3], vec![0.0, 0.0, 0.0, 1.0, 1.0, 1.0]).unwrap();
    let h = g.conv3d(x, w1, None, Conv3d::new(2, 1)).unwrap();
    let h = g.batch_norm(h, gamma, beta, &mut running, NormMode::Train).unwrap();
    let h = g.leaky_relu(h, 0.01);
    let h = g.upsample(h, 2).unwrap();
    let y = g.conv3d(h, w2, None, Conv3d::new(1, 1)).unwrap();
    let t = g.input(Tensor::zeros(g.shape(y)));
    g.mse(y, t).unwrap()
}

#[test]
fn backward_is_bitwise_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut rand_t = |shape: &[usize]| {
        Tensor::new(shape, (0..shape.iter().product()).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    };
    let x = rand_t(&[2, 2, 6, 6, 6]);
    let w1 = rand_t(&[3, 2, 3, 3, 3]);
    let w2 = rand_t(&[2, 3, 3, 3, 3]);
    let run = || {
        let mut g = Graph::new();
        let loss = build_net(&mut g, &x, &w1, &w2);
        let grads = g.backward(loss).unwrap();
        let mut out = Vec::new();
        for (_, t) in grads.leaves() {
            out.extend(t.data().iter().map(|v| v.to_bits()));
        }
        out
    };
    let a = run();
    assert!(!a.is_empty());
    assert_eq!(a, run());
}
