use approx::assert_abs_diff_eq;
use crystvox_tensor::{Adam, AdamConfig, Conv3d, Graph, NormMode, ParamStore, Tensor};

fn t64(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::new(shape, data.to_vec()).unwrap()
}

#[test]
fn conv_of_ones_sums_the_window() {
    let mut g = Graph::<f64>::new();
    let x = g.input(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let w = g.input(Tensor::full(&[1, 1, 3, 3, 3], 1.0));
    let y = g.conv3d(x, w, None, Conv3d::new(1, 0)).unwrap();
    assert_eq!(g.shape(y), &[1, 1, 1, 1, 1]);
    assert_eq!(g.value(y).item(), 27.0);
}

#[test]
fn centered_delta_kernel_is_identity() {
    let data: Vec<f64> = (0..2 * 4 * 5 * 3).map(|i| (i as f64 * 0.37).sin()).collect();
    let mut k = vec![0.0; 27];
    k[13] = 1.0;
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[1, 2, 4, 5, 3], &data));
    // Channel-diagonal kernel: output c reads only input c.
    let mut kernel = vec![0.0; 2 * 2 * 27];
    kernel[13] = 1.0;
    kernel[(2 + 1) * 27 + 13] = 1.0;
    let w = g.input(t64(&[2, 2, 3, 3, 3], &kernel));
    let y = g.conv3d(x, w, None, Conv3d::new(1, 1)).unwrap();
    assert_eq!(g.value(y).data(), data.as_slice());
}

#[test]
fn conv_output_extent_follows_floor_rule() {
    for (n, k, s, p, want) in [(30, 5, 2, 2, 15), (15, 3, 1, 1, 15), (15, 3, 2, 1, 8), (8, 4, 1, 0, 5)] {
        assert_eq!(Conv3d::new(s, p).output_extent(n, k), Some(want));
    }
    assert_eq!(Conv3d::new(1, 0).output_extent(2, 3), None);
}

#[test]
fn conv_rejects_mismatched_channels() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 3, 3, 3]));
    let w = g.input(Tensor::zeros(&[1, 3, 3, 3, 3]));
    assert!(g.conv3d(x, w, None, Conv3d::new(1, 1)).is_err());
}

#[test]
fn upsample_keeps_constants_and_interior_ramps() {
    let mut g = Graph::<f64>::new();
    let c = g.input(Tensor::full(&[1, 1, 3, 4, 2], 2.5));
    let up = g.upsample(c, 2).unwrap();
    assert_eq!(g.shape(up), &[1, 1, 6, 8, 4]);
    assert!(g.value(up).data().iter().all(|&v| v == 2.5));

    let n = 6;
    let ramp: Vec<f64> = (0..n * 2 * 2).map(|i| (i / 4) as f64).collect();
    let x = g.input(t64(&[1, 1, n, 2, 2], &ramp));
    let y = g.upsample(x, 2).unwrap();
    let v = g.value(y).data();
    // Away from the clamped borders, output o samples the input at (o + 0.5)/2 − 0.5.
    for o in 1..2 * n - 1 {
        let want = (o as f64 + 0.5) / 2.0 - 0.5;
        assert_abs_diff_eq!(v[o * 16], want, epsilon = 1e-6);
    }
}

#[test]
fn upsample_rejects_unit_factor() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 1, 2, 2, 2]));
    assert!(g.upsample(x, 1).is_err());
}

#[test]
fn batch_norm_train_normalizes_and_updates_running_stats() {
    let data: Vec<f64> = (0..2 * 3 * 8).map(|i| ((i * 7) % 11) as f64 * 0.3 + (i / 16) as f64).collect();
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[2, 3, 2, 2, 2], &data));
    let gamma = g.input(Tensor::full(&[3], 1.0));
    let beta = g.input(Tensor::zeros(&[3]));
    let mut running = t64(&[2, 3], &[0.0, 0.0, 0.0, 1.0, 1.0, 1.0]);
    let y = g.batch_norm(x, gamma, beta, &mut running, NormMode::Train).unwrap();
    let v = g.value(y).data();
    for c in 0..3 {
        let vals: Vec<f64> = (0..2).flat_map(|b| v[(b * 3 + c) * 8..(b * 3 + c + 1) * 8].to_vec()).collect();
        let mean = vals.iter().sum::<f64>() / 16.0;
        let var = vals.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 16.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-5);
        // ε in the denominator shrinks the variance by var/(var+ε).
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-4);

        let raw: Vec<f64> = (0..2).flat_map(|b| data[(b * 3 + c) * 8..(b * 3 + c + 1) * 8].to_vec()).collect();
        let m = raw.iter().sum::<f64>() / 16.0;
        let unbiased = raw.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 15.0;
        assert_abs_diff_eq!(running.data()[c], 0.1 * m, epsilon = 1e-12);
        assert_abs_diff_eq!(running.data()[3 + c], 0.9 + 0.1 * unbiased, epsilon = 1e-12);
    }
}

#[test]
fn batch_norm_eval_with_unit_stats_is_identity() {
    let data: Vec<f64> = (0..16).map(|i| i as f64 - 7.5).collect();
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[2, 1, 2, 2, 2], &data));
    let gamma = g.input(Tensor::full(&[1], 1.0));
    let beta = g.input(Tensor::zeros(&[1]));
    let mut running = t64(&[2, 1], &[0.0, 1.0]);
    let y = g.batch_norm(x, gamma, beta, &mut running, NormMode::Eval).unwrap();
    for (a, b) in g.value(y).data().iter().zip(&data) {
        assert_abs_diff_eq!(*a, *b, epsilon = 1e-5 * b.abs().max(1.0));
    }
    assert_eq!(running.data(), &[0.0, 1.0]);
}

#[test]
fn batch_norm_train_needs_two_values_per_channel() {
    let mut g = Graph::<f32>::new();
    let x = g.input(Tensor::zeros(&[1, 2, 1, 1, 1]));
    let gamma = g.input(Tensor::full(&[2], 1.0));
    let beta = g.input(Tensor::zeros(&[2]));
    let mut running = Tensor::zeros(&[2, 2]);
    let err = g.batch_norm(x, gamma, beta, &mut running, NormMode::Train).unwrap_err();
    assert!(matches!(err, crystvox_tensor::TensorError::BatchTooSmall));
    assert!(g.batch_norm(x, gamma, beta, &mut running, NormMode::Eval).is_ok());
}

#[test]
fn activations_match_definitions() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[3], &[-1.0, 2.0, -3.0]));
    let l = g.leaky_relu(x, 0.01);
    assert_eq!(g.value(l).data(), &[-0.01, 2.0, -0.03]);
    let r = g.relu(x);
    assert_eq!(g.value(r).data(), &[0.0, 2.0, 0.0]);
}

#[test]
fn relu_subgradient_at_zero_is_zero() {
    let mut g = Graph::<f64>::new();
    let x = g.leaf(t64(&[2], &[0.0, 1.0]), true);
    let r = g.relu(x);
    let s = g.sum(r);
    let grads = g.backward(s).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[0.0, 1.0]);
}

#[test]
fn linear_identity_and_zero_weight() {
    let mut g = Graph::<f64>::new();
    let x = g.input(t64(&[2, 3], &[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]));
    let eye = g.input(t64(&[3, 3], &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]));
    let zero_b = g.input(Tensor::zeros(&[3]));
    let y = g.linear(x, eye, Some(zero_b)).unwrap();
    assert_eq!(g.value(y).data(), g.value(x).data());

    let zw = g.input(Tensor::zeros(&[2, 3]));
    let b = g.input(t64(&[2], &[0.5, -1.5]));
    let y = g.linear(x, zw, Some(b)).unwrap();
    assert_eq!(g.value(y).data(), &[0.5, -1.5, 0.5, -1.5]);
}

#[test]
fn mse_closed_forms() {
    let mut g = Graph::<f64>::new();
    let p = g.leaf(t64(&[4], &[1.0, 2.0, 3.0, 4.0]), true);
    let same = g.input(t64(&[4], &[1.0, 2.0, 3.0, 4.0]));
    let shifted = g.input(t64(&[4], &[-1.0, 0.0, 1.0, 2.0]));
    let zero = g.mse(p, same).unwrap();
    assert_eq!(g.value(zero).item(), 0.0);
    let four = g.mse(p, shifted).unwrap();
    assert_eq!(g.value(four).item(), 4.0);
    let grads = g.backward(four).unwrap();
    // 2·(pred − target)/n = 2·2/4
    assert_eq!(grads.get(p).unwrap().data(), &[1.0, 1.0, 1.0, 1.0]);
}

#[test]
fn kl_closed_forms() {
    let mut g = Graph::<f64>::new();
    let mu = g.input(Tensor::zeros(&[3, 5]));
    let lv = g.input(Tensor::zeros(&[3, 5]));
    let kl = g.kl_diag_gaussian(mu, lv).unwrap();
    assert_eq!(g.value(kl).item(), 0.0);

    let mu = g.input(t64(&[1, 1], &[1.0]));
    let lv = g.input(t64(&[1, 1], &[0.0]));
    let kl = g.kl_diag_gaussian(mu, lv).unwrap();
    assert_abs_diff_eq!(g.value(kl).item(), 0.5, epsilon = 1e-12);

    // Batch mean: two rows with KL 0.5 and 2.0.
    let mu = g.input(t64(&[2, 1], &[1.0, 2.0]));
    let lv = g.input(Tensor::zeros(&[2, 1]));
    let kl = g.kl_diag_gaussian(mu, lv).unwrap();
    assert_abs_diff_eq!(g.value(kl).item(), 1.25, epsilon = 1e-12);
}

#[test]
fn bce_closed_forms() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros(&[2, 4, 3]));
    let target = g.input(Tensor::new(&[2, 4, 3], (0..24).map(|i| (i % 4 == 0) as u8 as f64).collect()).unwrap());
    let loss = g.bce_with_logits(logits, target).unwrap();
    assert_abs_diff_eq!(g.value(loss).item(), std::f64::consts::LN_2, epsilon = 1e-12);

    let confident = g.input(g.value(target).map(|t| if t > 0.5 { 60.0 } else { -60.0 }));
    let loss = g.bce_with_logits(confident, target).unwrap();
    assert!(g.value(loss).item() < 1e-20);
}

#[test]
fn softmax_ce_uniform_logits_give_ln_c() {
    let mut g = Graph::<f64>::new();
    let logits = g.input(Tensor::zeros(&[1, 5, 2]));
    let mut t = vec![0.0; 10];
    t[3 * 2] = 1.0;
    t[1] = 1.0;
    let target = g.input(t64(&[1, 5, 2], &t));
    let loss = g.softmax_cross_entropy(logits, target).unwrap();
    assert_abs_diff_eq!(g.value(loss).item(), 5f64.ln(), epsilon = 1e-12);
}

#[test]
fn weighted_sum_drops_zero_weights() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::scalar(2.0), true);
    let b = g.leaf(Tensor::scalar(3.0), true);
    let s = g.weighted_sum(&[(a, 1.0), (b, 0.0)]).unwrap();
    assert_eq!(g.value(s).item(), 2.0);
    let grads = g.backward(s).unwrap();
    assert!(grads.get(b).is_none());
    assert_eq!(grads.get(a).unwrap().item(), 1.0);
}

#[test]
fn adam_first_step_matches_closed_form() {
    let mut store = ParamStore::<f32>::new();
    let init = [0.5f32, -1.0, 2.0, 0.0];
    store.insert("w", Tensor::new(&[4], init.to_vec()).unwrap());
    let grad = [0.3f32, -2.0, 1e-3, 0.0];
    let mut grads = std::collections::BTreeMap::new();
    grads.insert("w".to_string(), Tensor::new(&[4], grad.to_vec()).unwrap());
    let cfg = AdamConfig::default();
    let mut adam = Adam::new(cfg);
    adam.step(&mut store, &grads).unwrap();
    for i in 0..4 {
        let g = grad[i] as f64;
        let want = init[i] as f64 - cfg.lr * g / (g.abs() + cfg.eps);
        assert_abs_diff_eq!(store.get("w").unwrap().data()[i] as f64, want, epsilon = 1e-7);
    }
    // The zero-gradient entry is unchanged.
    assert_eq!(store.get("w").unwrap().data()[3], 0.0);
}

#[test]
fn adam_zero_gradient_leaves_parameters() {
    let mut store = ParamStore::<f64>::new();
    store.insert("w", t64(&[3], &[1.0, -2.0, 3.0]));
    let mut grads = std::collections::BTreeMap::new();
    grads.insert("w".to_string(), Tensor::zeros(&[3]));
    let mut adam = Adam::new(AdamConfig::default());
    for _ in 0..5 {
        adam.step(&mut store, &grads).unwrap();
    }
    assert_eq!(store.get("w").unwrap().data(), &[1.0, -2.0, 3.0]);
}

#[test]
fn adam_descends_on_a_parabola() {
    let mut store = ParamStore::<f64>::new();
    store.insert("x", Tensor::scalar(1.0));
    let mut adam = Adam::new(AdamConfig { lr: 0.1, ..AdamConfig::default() });
    let f = |s: &ParamStore<f64>| s.get("x").unwrap().item().powi(2);
    let start = f(&store);
    for _ in 0..2 {
        let mut g = Graph::new();
        let x = g.param(&store, "x").unwrap();
        let y = g.mul(x, x).unwrap();
        let grads = g.backward(y).unwrap();
        adam.step(&mut store, grads.params()).unwrap();
    }
    assert!(f(&store) < start);
}

#[test]
fn stop_nodes_block_gradient_flow() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::scalar(2.0), true);
    let b = g.mul(a, a).unwrap();
    let c = g.scale(b, 3.0);
    let d = g.add(c, a).unwrap();
    let full = g.backward(d).unwrap();
    assert_eq!(full.get(a).unwrap().item(), 13.0);
    let opts = crystvox_tensor::BackwardOptions { stop: &[b], ..Default::default() };
    let cut = g.backward_with(d, &opts).unwrap();
    assert_eq!(cut.get(a).unwrap().item(), 1.0);
}

#[test]
fn frozen_params_and_filters_receive_no_gradient() {
    let mut store = ParamStore::<f64>::new();
    store.insert("enc.w", Tensor::scalar(2.0));
    store.insert("dec.w", Tensor::scalar(3.0));
    let mut g = Graph::new();
    let e = g.param(&store, "enc.w").unwrap();
    g.set_trainable(false);
    let d = g.param(&store, "dec.w").unwrap();
    let y = g.mul(e, d).unwrap();
    let grads = g.backward(y).unwrap();
    assert_eq!(grads.param("enc.w").unwrap().item(), 3.0);
    assert!(grads.param("dec.w").is_none());

    let mut g = Graph::new();
    let e = g.param(&store, "enc.w").unwrap();
    let d = g.param(&store, "dec.w").unwrap();
    let y = g.mul(e, d).unwrap();
    let filter = |name: &str| name.starts_with("dec.");
    let opts = crystvox_tensor::BackwardOptions { param_filter: Some(&filter), ..Default::default() };
    let grads = g.backward_with(y, &opts).unwrap();
    assert!(grads.param("enc.w").is_none());
    assert_eq!(grads.param("dec.w").unwrap().item(), 2.0);
}

#[test]
fn backward_requires_scalar_loss() {
    let mut g = Graph::<f64>::new();
    let a = g.leaf(Tensor::zeros(&[2]), true);
    assert!(g.backward(a).is_err());
}
