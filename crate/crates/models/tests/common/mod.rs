#![allow(dead_code)]

use crystvox_models::{ModelConfig, TrainSample};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Random grids sized for `ModelConfig::tiny()`: smooth-ish positive densities and labels below its class count.
pub fn tiny_samples(n: usize, seed: u64) -> Vec<TrainSample> {
    let cfg = ModelConfig::tiny();
    let s = cfg.grid_side;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|_| {
            let c: [f64; 3] = std::array::from_fn(|_| rng.random_range(1.0..(s - 1) as f64));
            let peak = rng.random_range(0.5..2.0);
            let mut density = Vec::with_capacity(s * s * s);
            let mut labels = Vec::with_capacity(s * s * s);
            for i in 0..s {
                for j in 0..s {
                    for k in 0..s {
                        let d2 = (i as f64 - c[0]).powi(2) + (j as f64 - c[1]).powi(2) + (k as f64 - c[2]).powi(2);
                        density.push((peak * (-d2 / 4.0).exp()) as f32);
                        labels.push(if d2 < 1.0 { rng.random_range(1..cfg.num_classes as u16) } else { 0 });
                    }
                }
            }
            TrainSample { side: s, density, labels }
        })
        .collect()
}

pub fn random_latents(n: usize, dim: usize, seed: u64) -> Vec<Vec<f64>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| crystvox_models::sample_prior(&mut rng, dim)).collect()
}
