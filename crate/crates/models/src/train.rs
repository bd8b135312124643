use std::collections::BTreeMap;

use crystvox_tensor::{Adam, AdamConfig, BackwardOptions, Element, Graph, NormMode, ParamStore, Tensor};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::config::{ModelConfig, TrainConfig};
use crate::data::{batch_tensors, TrainSample};
use crate::loss::{unet_loss, vae_loss};
use crate::unet::{init_unet, unet_segment};
use crate::vae::{decode, draw_noise, encode, init_decoder, init_encoder, reparameterize, EncoderOutput};
use crate::{ModelError, DECODER, ENCODER, UNET};

/// One line of the training log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    #[serde(rename = "L_RE")]
    pub l_re: f64,
    #[serde(rename = "KL")]
    pub kl: f64,
    #[serde(rename = "L_BCE")]
    pub l_bce: f64,
    pub total: f64,
}

/// Loss values of one joint forward pass.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepOutputs {
    pub l_re: f64,
    pub kl: f64,
    pub l_bce: f64,
    pub total: f64,
}

/// Gradients of one joint step, before any update is applied.
#[derive(Debug, Clone)]
pub struct JointStep<T> {
    pub outputs: StepOutputs,
    /// Encoder and decoder gradients of the VAE objective.
    pub vae_grads: BTreeMap<String, Tensor<T>>,
    /// U-Net gradients of the segmentation objective, with the decoded grid held constant.
    pub unet_grads: BTreeMap<String, Tensor<T>>,
}

/// Fresh encoder, decoder and U-Net parameters.
pub fn init_params<T: Element>(cfg: &ModelConfig, seed: u64) -> ParamStore<T> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    init_encoder(&mut store, cfg, &mut rng);
    init_decoder(&mut store, cfg, &mut rng);
    init_unet(&mut store, cfg, &mut rng);
    store
}

/// Conditioning factors `max(M) / scale` for each sample of a `[N, 1, S, S, S]` batch.
pub fn conditioning_factors<T: Element>(density: &Tensor<T>, scale: f64) -> Result<Vec<f64>, ModelError> {
    let row = density.row_len().max(1);
    density
        .data()
        .chunks(row)
        .map(|c| {
            let a = c.iter().fold(0.0f64, |m, v| m.max(v.as_f64())) / scale;
            if a > 0.0 && a.is_finite() {
                Ok(a)
            } else {
                Err(ModelError::NonPositiveAlpha(a))
            }
        })
        .collect()
}

/// Posterior used for the KL term and the code fed to the decoder. With
/// conditioning, the posterior is divided by `α` and the sampled code multiplied back.
fn latent_path<T: Element>(
    g: &mut Graph<T>,
    post: EncoderOutput,
    eps: Tensor<T>,
    alphas: Option<&[f64]>,
) -> Result<(EncoderOutput, crystvox_tensor::Var), ModelError> {
    match alphas {
        None => {
            let z = reparameterize(g, &post, eps)?;
            Ok((post, z))
        }
        Some(a) => {
            let inv: Vec<f64> = a.iter().map(|v| 1.0 / v).collect();
            let shift: Vec<f64> = a.iter().map(|v| -2.0 * v.ln()).collect();
            let scaled = EncoderOutput { mu: g.scale_rows(post.mu, &inv)?, logvar: g.add_rows(post.logvar, &shift)? };
            let z = reparameterize(g, &scaled, eps)?;
            let z_in = g.scale_rows(z, a)?;
            Ok((scaled, z_in))
        }
    }
}

fn prefix_filter(prefixes: &'static [&'static str]) -> impl Fn(&str) -> bool {
    move |name: &str| prefixes.iter().any(|p| name.starts_with(p))
}

/// Forward VAE and U-Net on one batch and backpropagate both objectives.
pub fn joint_gradients<T: Element>(
    store: &mut ParamStore<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    density: Tensor<T>,
    target: Tensor<T>,
    eps: Tensor<T>,
) -> Result<JointStep<T>, ModelError> {
    let alphas = if cfg.conditioned { Some(conditioning_factors(&density, cfg.density_scale)?) } else { None };
    let mut g = Graph::new();
    let m = g.input(density);
    let s = g.input(target);
    let post = encode(&mut g, store, model, m, NormMode::Train)?;
    let (post, z) = latent_path(&mut g, post, eps, alphas.as_deref())?;
    let m_hat = decode(&mut g, store, model, z)?;
    let logits = unet_segment(&mut g, store, model, m_hat, NormMode::Train)?;
    let terms = vae_loss(&mut g, m_hat, m, &post, logits, s, cfg)?;
    let (l_re, kl, l_bce, total) = terms.values(&g);

    let outputs = StepOutputs { l_re, kl, l_bce, total };
    if cfg.gamma > 0.0 {
        // U-Net weights reach the total only through γ·L_BCE, so one pass yields both gradients.
        let all = prefix_filter(&[ENCODER, DECODER, UNET]);
        let grads = g.backward_with(terms.total, &BackwardOptions { stop: &[], param_filter: Some(&all) })?;
        let inv = T::of(1.0 / cfg.gamma);
        let (mut vae_grads, mut unet_grads) = (BTreeMap::new(), BTreeMap::new());
        for (name, grad) in grads.into_params() {
            if name.starts_with(UNET) {
                unet_grads.insert(name, grad.map(|v| v * inv));
            } else {
                vae_grads.insert(name, grad);
            }
        }
        return Ok(JointStep { outputs, vae_grads, unet_grads });
    }
    let vae_filter = prefix_filter(&[ENCODER, DECODER]);
    let vae = g.backward_with(terms.total, &BackwardOptions { stop: &[], param_filter: Some(&vae_filter) })?;
    let unet_filter = prefix_filter(&[UNET]);
    let unet = g.backward_with(terms.bce, &BackwardOptions { stop: &[m_hat], param_filter: Some(&unet_filter) })?;
    Ok(JointStep { outputs, vae_grads: vae.into_params(), unet_grads: unet.into_params() })
}

/// Encoder/decoder gradients of `L_RE + β·KL` alone, without the U-Net.
pub fn vae_only_gradients<T: Element>(
    store: &mut ParamStore<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    density: Tensor<T>,
    eps: Tensor<T>,
) -> Result<BTreeMap<String, Tensor<T>>, ModelError> {
    let alphas = if cfg.conditioned { Some(conditioning_factors(&density, cfg.density_scale)?) } else { None };
    let mut g = Graph::new();
    let m = g.input(density);
    let post = encode(&mut g, store, model, m, NormMode::Train)?;
    let (post, z) = latent_path(&mut g, post, eps, alphas.as_deref())?;
    let m_hat = decode(&mut g, store, model, z)?;
    let re = g.mse(m_hat, m)?;
    let kl = g.kl_diag_gaussian(post.mu, post.logvar)?;
    let total = g.weighted_sum(&[(re, 1.0), (kl, cfg.beta)])?;
    let filter = prefix_filter(&[ENCODER, DECODER]);
    Ok(g.backward_with(total, &BackwardOptions { stop: &[], param_filter: Some(&filter) })?.into_params())
}

/// Joint VAE + U-Net training with one Adam optimizer per objective.
pub struct Trainer<T: Element> {
    pub model: ModelConfig,
    pub config: TrainConfig,
    pub store: ParamStore<T>,
    vae_opt: Adam<T>,
    unet_opt: Adam<T>,
    rng: ChaCha8Rng,
    order: Vec<usize>,
    cursor: usize,
    step: u64,
}

impl<T: Element> Trainer<T> {
    pub fn new(model: ModelConfig, config: TrainConfig) -> Result<Self, ModelError> {
        let store = init_params(&model, config.seed);
        Self::with_params(model, config, store)
    }

    pub fn with_params(model: ModelConfig, config: TrainConfig, store: ParamStore<T>) -> Result<Self, ModelError> {
        model.validate()?;
        config.validate()?;
        let adam = AdamConfig { lr: config.lr, ..AdamConfig::default() };
        let rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x7261_696e);
        Ok(Self { model, config, store, vae_opt: Adam::new(adam), unet_opt: Adam::new(adam), rng, order: Vec::new(), cursor: 0, step: 0 })
    }

    pub fn steps_done(&self) -> u64 {
        self.step
    }

    fn next_batch(&mut self, n: usize) -> Vec<usize> {
        let size = self.config.batch.min(n);
        if size == n {
            return (0..n).collect();
        }
        let mut picked = Vec::with_capacity(size);
        while picked.len() < size {
            if self.cursor >= self.order.len() || self.order.len() != n {
                self.order = (0..n).collect();
                self.order.shuffle(&mut self.rng);
                self.cursor = 0;
            }
            picked.push(self.order[self.cursor]);
            self.cursor += 1;
        }
        picked
    }

    /// One joint step: forward, both backward passes, both Adam updates.
    pub fn step(&mut self, samples: &[TrainSample]) -> Result<MetricsRecord, ModelError> {
        if samples.is_empty() {
            return Err(ModelError::InvalidInput("empty training set".into()));
        }
        let idx = self.next_batch(samples.len());
        let batch: Vec<&TrainSample> = idx.iter().map(|&i| &samples[i]).collect();
        let (density, target) = batch_tensors::<T>(&batch, self.model.num_classes)?;
        let eps = draw_noise(&mut self.rng, batch.len(), self.model.latent_dim);
        let out = joint_gradients(&mut self.store, &self.model, &self.config, density, target, eps)?;
        let o = out.outputs;
        if ![o.l_re, o.kl, o.l_bce, o.total].iter().all(|v| v.is_finite()) {
            return Err(ModelError::NonFiniteLoss {
                step: self.step,
                detail: format!("L_RE={} KL={} L_BCE={} total={}", o.l_re, o.kl, o.l_bce, o.total),
            });
        }
        self.vae_opt.step(&mut self.store, &out.vae_grads)?;
        self.unet_opt.step(&mut self.store, &out.unet_grads)?;
        let record = MetricsRecord { step: self.step, l_re: o.l_re, kl: o.kl, l_bce: o.l_bce, total: o.total };
        self.step += 1;
        Ok(record)
    }

    /// Runs `steps` joint steps, handing each record to `log`.
    pub fn train(
        &mut self,
        samples: &[TrainSample],
        steps: u64,
        mut log: impl FnMut(&MetricsRecord),
    ) -> Result<Vec<MetricsRecord>, ModelError> {
        let mut records = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let r = self.step(samples)?;
            log(&r);
            records.push(r);
        }
        Ok(records)
    }
}

/// One Adam step of the U-Net alone on ground-truth densities.
pub fn unet_step<T: Element>(
    store: &mut ParamStore<T>,
    opt: &mut Adam<T>,
    model: &ModelConfig,
    cfg: &TrainConfig,
    density: Tensor<T>,
    target: Tensor<T>,
) -> Result<f64, ModelError> {
    let mut g = Graph::new();
    let m = g.input(density);
    let s = g.input(target);
    let logits = unet_segment(&mut g, store, model, m, NormMode::Train)?;
    let loss = unet_loss(&mut g, logits, s, cfg.seg_loss)?;
    let value = g.value(loss).item().as_f64();
    if !value.is_finite() {
        return Err(ModelError::NonFiniteLoss { step: opt.steps(), detail: format!("U-Net loss {value}") });
    }
    let filter = prefix_filter(&[UNET]);
    let grads = g.backward_with(loss, &BackwardOptions { stop: &[], param_filter: Some(&filter) })?;
    opt.step(store, grads.params())?;
    Ok(value)
}
