mod common;

use crystvox_models::discriminator::{init_discriminator, score_grids, trained_steps, DiscriminatorTrainer};
use crystvox_models::train::init_params;
use crystvox_models::{ModelConfig, ModelError};
use crystvox_tensor::Tensor;

#[test]
fn scoring_before_training_is_an_error() {
    let cfg = ModelConfig::tiny();
    let mut store = init_discriminator::<f32>(&cfg, 0);
    assert_eq!(trained_steps(&store), 0);
    let grids = Tensor::zeros(&[1, 1, 6, 6, 6]);
    assert!(matches!(score_grids(&mut store, &cfg, grids), Err(ModelError::UntrainedModel)));
}

#[test]
fn training_steps_are_counted_and_scores_are_probabilities() {
    let cfg = ModelConfig::tiny();
    let vae = init_params::<f32>(&cfg, 1);
    let real = common::random_latents(4, cfg.latent_dim, 2);
    let mut trainer = DiscriminatorTrainer::<f32>::new(cfg.clone(), 1e-3, 4, 3);
    for _ in 0..3 {
        let loss = trainer.step(&vae, &real).unwrap();
        assert!(loss.is_finite() && loss >= 0.0);
    }
    assert_eq!(trained_steps(&trainer.store), 3);
    let grids = Tensor::full(&[2, 1, 6, 6, 6], 0.25);
    let scores = score_grids(&mut trainer.store, &cfg, grids).unwrap();
    assert_eq!(scores.len(), 2);
    assert!(scores.iter().all(|s| *s > 0.0 && *s < 1.0));
    assert!(trainer.step(&vae, &[]).is_err());
}
