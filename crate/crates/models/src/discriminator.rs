//! Realism score for decoded grids, trained on decodes of mixed latents
//! `ẑ = λ·z̃ + (1 − λ)·z_real` with target `1 − λ`.

use crystvox_tensor::{Adam, AdamConfig, BackwardOptions, Element, Graph, NormMode, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::layers::{init_linear, linear};
use crate::vae::{decode_latents, init_trunk, sample_prior, trunk, LatentVector};
use crate::{ModelError, DISCRIMINATOR};

/// Buffer counting completed training steps.
pub const STEPS_BUFFER: &str = "disc.steps";

pub fn init_discriminator<T: Element>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_trunk(&mut store, cfg, "disc", &mut rng);
    init_linear(&mut store, &mut rng, "disc.head", cfg.encoder_features(), 1, true);
    store.insert_buffer(STEPS_BUFFER, Tensor::zeros(&[1]));
    store
}

/// `λ·z̃ + (1 − λ)·z_real`, exact at `λ = 0` and `λ = 1`.
pub fn mix_latents(z_prior: &[f64], z_real: &[f64], lambda: f64) -> Result<LatentVector, ModelError> {
    crate::vae::latent_interpolate(z_real, z_prior, lambda)
}

/// Scores in `(0, 1)` for `[N, 1, S, S, S]` grids, shape `[N, 1]`.
pub fn score<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    mode: NormMode,
) -> Result<Var, ModelError> {
    let h = trunk(g, store, cfg, "disc", x, mode)?;
    let logit = linear(g, store, "disc.head", h)?;
    Ok(g.sigmoid(logit))
}

pub fn trained_steps<T: Element>(store: &ParamStore<T>) -> u64 {
    store.buffer(STEPS_BUFFER).map_or(0, |t| t.item().as_f64() as u64)
}

/// Scores a batch of grids with running batch-norm statistics.
pub fn score_grids<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, grids: Tensor<T>) -> Result<Vec<f64>, ModelError> {
    if trained_steps(store) == 0 {
        return Err(ModelError::UntrainedModel);
    }
    let mut g = Graph::new();
    let x = g.input(grids);
    let s = score(&mut g, store, cfg, x, NormMode::Eval)?;
    Ok(g.value(s).data().iter().map(|v| v.as_f64()).collect())
}

pub struct DiscriminatorTrainer<T: Element> {
    pub model: ModelConfig,
    pub store: ParamStore<T>,
    pub batch: usize,
    opt: Adam<T>,
    rng: ChaCha8Rng,
}

impl<T: Element> DiscriminatorTrainer<T> {
    pub fn new(model: ModelConfig, lr: f64, batch: usize, seed: u64) -> Self {
        let store = init_discriminator(&model, seed);
        Self {
            model,
            store,
            batch: batch.max(2),
            opt: Adam::new(AdamConfig { lr, ..AdamConfig::default() }),
            rng: ChaCha8Rng::seed_from_u64(seed ^ 0x6469_7363),
        }
    }

    /// One update on freshly mixed latents decoded by the (frozen) VAE in `vae`.
    /// Returns the MSE between scores and targets `1 − λ`.
    pub fn step(&mut self, vae: &ParamStore<T>, real: &[LatentVector]) -> Result<f64, ModelError> {
        if real.is_empty() {
            return Err(ModelError::InvalidInput("no real latent codes".into()));
        }
        let mut mixed = Vec::with_capacity(self.batch);
        let mut targets = Vec::with_capacity(self.batch);
        for _ in 0..self.batch {
            let z_real = &real[self.rng.random_range(0..real.len())];
            let z_prior = sample_prior(&mut self.rng, self.model.latent_dim);
            let lambda: f64 = self.rng.random();
            mixed.push(mix_latents(&z_prior, z_real, lambda)?);
            targets.push(T::of(1.0 - lambda));
        }
        let grids = decode_latents(vae, &self.model, &mixed)?;
        let mut g = Graph::new();
        let x = g.input(grids);
        let s = score(&mut g, &mut self.store, &self.model, x, NormMode::Train)?;
        let t = g.input(Tensor::new(&[self.batch, 1], targets)?);
        let loss = g.mse(s, t)?;
        let value = g.value(loss).item().as_f64();
        if !value.is_finite() {
            return Err(ModelError::NonFiniteLoss { step: self.opt.steps(), detail: format!("discriminator loss {value}") });
        }
        let filter = |name: &str| name.starts_with(DISCRIMINATOR);
        let grads = g.backward_with(loss, &BackwardOptions { stop: &[], param_filter: Some(&filter) })?;
        self.opt.step(&mut self.store, grads.params())?;
        let steps = trained_steps(&self.store) + 1;
        self.store.insert_buffer(STEPS_BUFFER, Tensor::scalar(T::of(steps as f64)));
        Ok(value)
    }
}
