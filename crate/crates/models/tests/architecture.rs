mod common;

use crystvox_models::train::init_params;
use crystvox_models::unet::{init_unet, unet_segment};
use crystvox_models::vae::{decode_latents, encode};
use crystvox_models::ModelConfig;
use crystvox_tensor::{Graph, NormMode, ParamStore, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn conv_extent(n: usize, k: usize, s: usize, p: usize) -> usize {
    (n + 2 * p - k) / s + 1
}

#[test]
fn encoder_trace_follows_conv_arithmetic() {
    let mut n = 30;
    let mut want = Vec::new();
    for (k, s, p) in [(5, 2, 2), (3, 1, 1), (3, 1, 1), (3, 2, 1)] {
        n = conv_extent(n, k, s, p);
        want.push(n);
    }
    assert_eq!(want, [15, 15, 15, 8]);
    let cfg = ModelConfig::paper();
    assert_eq!(cfg.encoder_trace(), want);
    assert_eq!(cfg.encoder_features(), 8 * 8 * 8 * 128);
}

#[test]
fn decoder_upsamples_five_to_forty() {
    let cfg = ModelConfig::paper();
    let trace: Vec<usize> = (0..=3).map(|i| cfg.dec_base_side << i).collect();
    assert_eq!(trace, [5, 10, 20, 40]);
    assert_eq!(cfg.decoder_side(), 40);
}

#[test]
fn paper_scale_shapes() {
    let cfg = ModelConfig::paper();
    let mut store = init_params::<f32>(&cfg, 1);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 30, 30, 30]));
    let out = encode(&mut g, &mut store, &cfg, x, NormMode::Eval).unwrap();
    assert_eq!(g.shape(out.mu), &[1, 300]);
    assert_eq!(g.shape(out.logvar), &[1, 300]);
    assert!(g.value(out.mu).all_finite() && g.value(out.logvar).all_finite());

    let z = common::random_latents(1, 300, 2);
    let m_hat = decode_latents(&store, &cfg, &z).unwrap();
    assert_eq!(m_hat.shape(), &[1, 1, 30, 30, 30]);
    assert!(m_hat.data().iter().all(|&v| v >= 0.0));

    let mut g = Graph::new();
    let x = g.input(m_hat);
    let logits = unet_segment(&mut g, &mut store, &cfg, x, NormMode::Eval).unwrap();
    assert_eq!(g.shape(logits), &[1, 101, 30, 30, 30]);
}

#[test]
fn identical_grids_give_identical_means() {
    let cfg = ModelConfig::desk();
    let mut store = init_params::<f32>(&cfg, 3);
    let grid: Vec<f32> = (0..27_000).map(|i| ((i * 37) % 101) as f32 / 101.0).collect();
    let both: Vec<f32> = grid.iter().chain(&grid).copied().collect();
    for mode in [NormMode::Train, NormMode::Eval] {
        let mut g = Graph::new();
        let x = g.input(Tensor::new(&[2, 1, 30, 30, 30], both.clone()).unwrap());
        let out = encode(&mut g, &mut store, &cfg, x, mode).unwrap();
        let mu = g.value(out.mu).data();
        assert_eq!(mu[..cfg.latent_dim], mu[cfg.latent_dim..]);
    }
}

#[test]
fn decode_is_deterministic_and_non_negative() {
    let cfg = ModelConfig::desk();
    let store = init_params::<f32>(&cfg, 4);
    let mut z = common::random_latents(3, cfg.latent_dim, 5);
    // Large codes push many pre-activations negative.
    z[2].iter_mut().for_each(|v| *v *= 50.0);
    let a = decode_latents(&store, &cfg, &z).unwrap();
    let b = decode_latents(&store, &cfg, &z).unwrap();
    assert_eq!(a.shape(), &[3, 1, 30, 30, 30]);
    assert_eq!(a.data(), b.data());
    assert!(a.data().iter().all(|&v| v >= 0.0));
}

#[test]
fn attention_changes_parameters_not_shapes() {
    let mut shapes = Vec::new();
    let mut counts = Vec::new();
    for attention in [true, false] {
        let cfg = ModelConfig { attention, ..ModelConfig::desk() };
        let mut store = ParamStore::<f32>::new();
        init_unet(&mut store, &cfg, &mut ChaCha8Rng::seed_from_u64(0));
        counts.push(store.num_scalars());
        let mut g = Graph::new();
        let x = g.input(Tensor::full(&[2, 1, 30, 30, 30], 0.5));
        let y = unet_segment(&mut g, &mut store, &cfg, x, NormMode::Train).unwrap();
        shapes.push(g.shape(y).to_vec());
    }
    assert_eq!(shapes[0], shapes[1]);
    assert_eq!(shapes[0], [2, 101, 30, 30, 30]);
    assert!(counts[0] > counts[1]);
}

#[test]
fn wrong_input_shape_is_rejected() {
    let cfg = ModelConfig::desk();
    let mut store = init_params::<f32>(&cfg, 0);
    let mut g = Graph::new();
    let x = g.input(Tensor::zeros(&[1, 1, 20, 20, 20]));
    assert!(encode(&mut g, &mut store, &cfg, x, NormMode::Eval).is_err());
    let y = unet_segment(&mut g, &mut store, &cfg, x, NormMode::Eval).unwrap();
    assert_eq!(g.shape(y), &[1, 101, 20, 20, 20]);
    assert!(decode_latents(&store, &cfg, &[vec![0.0; 3]]).is_err());
}
