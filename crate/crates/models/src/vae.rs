//! Encoder, reparameterization, decoder and latent-space utilities.

use crystvox_tensor::{Element, Graph, NormMode, ParamStore, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::config::ModelConfig;
use crate::layers::{conv, conv_bn_act, init_bn, init_conv, init_linear, linear, same};
use crate::ModelError;

pub type LatentVector = Vec<f64>;

/// Bounds applied to the encoder's log-variance head.
pub const LOGVAR_MIN: f64 = -10.0;
pub const LOGVAR_MAX: f64 = 10.0;

/// Decoder kernel sizes: the three upsampling stages, then the output convolution.
const DECODER_KERNELS: [usize; 4] = [5, 5, 4, 4];

#[derive(Debug, Clone, Copy)]
pub struct EncoderOutput {
    pub mu: Var,
    pub logvar: Var,
}

pub fn init_encoder<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    init_trunk(store, cfg, "enc", rng);
    let feat = cfg.encoder_features();
    init_linear(store, rng, "enc.mu", feat, cfg.latent_dim, true);
    init_linear(store, rng, "enc.logvar", feat, cfg.latent_dim, true);
}

/// The four conv/batch-norm/LeakyReLU layers shared by the encoder and the discriminator.
pub(crate) fn init_trunk<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, prefix: &str, rng: &mut ChaCha8Rng) {
    let mut cin = 1;
    for (i, ((k, _), &cout)) in ModelConfig::encoder_layers().iter().zip(&cfg.enc_channels).enumerate() {
        init_conv(store, rng, &format!("{prefix}.l{i}.conv"), cin, cout, *k, false);
        init_bn(store, &format!("{prefix}.l{i}.bn"), cout);
        cin = cout;
    }
}

pub(crate) fn trunk<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    prefix: &str,
    x: Var,
    mode: NormMode,
) -> Result<Var, ModelError> {
    let shape = g.shape(x).to_vec();
    let s = cfg.grid_side;
    if shape.len() != 5 || shape[1..] != [1, s, s, s] {
        return Err(ModelError::InvalidInput(format!("expected [N, 1, {s}, {s}, {s}] grids, got {shape:?}")));
    }
    let mut h = x;
    for (i, (_, spec)) in ModelConfig::encoder_layers().iter().enumerate() {
        h = conv_bn_act(g, store, &format!("{prefix}.l{i}"), h, *spec, mode, cfg.leaky_slope)?;
    }
    Ok(g.reshape(h, &[shape[0], cfg.encoder_features()])?)
}

/// `[N, 1, S, S, S]` densities to posterior parameters, log-variance clamped to `[−10, 10]`.
pub fn encode<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    mode: NormMode,
) -> Result<EncoderOutput, ModelError> {
    let h = trunk(g, store, cfg, "enc", x, mode)?;
    let mu = linear(g, store, "enc.mu", h)?;
    let lv = linear(g, store, "enc.logvar", h)?;
    let logvar = g.clamp(lv, LOGVAR_MIN, LOGVAR_MAX);
    Ok(EncoderOutput { mu, logvar })
}

/// Standard-normal noise of shape `[n, dim]`.
pub fn draw_noise<T: Element>(rng: &mut ChaCha8Rng, n: usize, dim: usize) -> Tensor<T> {
    Tensor::new(&[n, dim], (0..n * dim).map(|_| T::of(rng.sample::<f64, _>(StandardNormal))).collect()).expect("shape")
}

/// `z = μ + exp(½·logvar) ⊙ ε`; `ε` enters as a constant.
pub fn reparameterize<T: Element>(g: &mut Graph<T>, out: &EncoderOutput, eps: Tensor<T>) -> Result<Var, ModelError> {
    let eps = g.input(eps);
    let half = g.scale(out.logvar, 0.5);
    let sigma = g.exp(half);
    let noise = g.mul(sigma, eps)?;
    Ok(g.add(out.mu, noise)?)
}

pub fn init_decoder<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let [c0, c1, c2, c3] = cfg.dec_channels;
    let b = cfg.dec_base_side;
    init_linear(store, rng, "dec.fc", cfg.latent_dim, c0 * b * b * b, cfg.decoder_bias);
    let chans = [c0, c1, c2, c3, 1];
    for (i, &k) in DECODER_KERNELS.iter().enumerate() {
        init_conv(store, rng, &format!("dec.c{i}"), chans[i], chans[i + 1], k, cfg.decoder_bias);
    }
}

/// `[N, latent]` codes to `[N, 1, S, S, S]` non-negative densities.
pub fn decode<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, cfg: &ModelConfig, z: Var) -> Result<Var, ModelError> {
    let shape = g.shape(z).to_vec();
    if shape.len() != 2 || shape[1] != cfg.latent_dim {
        return Err(ModelError::InvalidInput(format!("expected [N, {}] codes, got {shape:?}", cfg.latent_dim)));
    }
    let b = cfg.dec_base_side;
    let h = linear(g, store, "dec.fc", z)?;
    let mut h = g.reshape(h, &[shape[0], cfg.dec_channels[0], b, b, b])?;
    for (i, &k) in DECODER_KERNELS[..3].iter().enumerate() {
        h = g.upsample(h, 2)?;
        h = conv(g, store, &format!("dec.c{i}"), h, same(k))?;
        h = g.leaky_relu(h, cfg.leaky_slope);
    }
    let h = conv(g, store, "dec.c3", h, same(DECODER_KERNELS[3]))?;
    let h = g.relu(h);
    let s = cfg.grid_side;
    if cfg.decoder_side() == s {
        Ok(h)
    } else {
        Ok(g.trilinear_resize(h, [s, s, s])?)
    }
}

/// Decodes a batch of latent vectors outside of training.
pub fn decode_latents<T: Element>(store: &ParamStore<T>, cfg: &ModelConfig, zs: &[LatentVector]) -> Result<Tensor<T>, ModelError> {
    if zs.is_empty() {
        return Err(ModelError::InvalidInput("no latent vectors".into()));
    }
    let mut data = Vec::with_capacity(zs.len() * cfg.latent_dim);
    for z in zs {
        if z.len() != cfg.latent_dim {
            return Err(ModelError::InvalidInput(format!("latent vector of length {}, expected {}", z.len(), cfg.latent_dim)));
        }
        data.extend(z.iter().map(|&v| T::of(v)));
    }
    let mut g = Graph::new();
    let z = g.input(Tensor::new(&[zs.len(), cfg.latent_dim], data)?);
    let out = decode(&mut g, store, cfg, z)?;
    Ok(g.value(out).clone())
}

/// Multiplies a code by the conditioning factor `alpha > 0`.
pub fn condition_scale(z: &[f64], alpha: f64) -> Result<LatentVector, ModelError> {
    if !(alpha > 0.0) || !alpha.is_finite() {
        return Err(ModelError::NonPositiveAlpha(alpha));
    }
    Ok(z.iter().map(|v| v * alpha).collect())
}

/// `(1 − t)·z1 + t·z2`, returning the endpoints exactly at `t = 0` and `t = 1`.
pub fn latent_interpolate(z1: &[f64], z2: &[f64], t: f64) -> Result<LatentVector, ModelError> {
    if z1.len() != z2.len() {
        return Err(ModelError::InvalidInput(format!("latent lengths differ: {} vs {}", z1.len(), z2.len())));
    }
    if !(0.0..=1.0).contains(&t) {
        return Err(ModelError::InvalidInput(format!("interpolation parameter {t} outside [0, 1]")));
    }
    if t == 0.0 {
        return Ok(z1.to_vec());
    }
    if t == 1.0 {
        return Ok(z2.to_vec());
    }
    Ok(z1.iter().zip(z2).map(|(a, b)| (1.0 - t) * a + t * b).collect())
}

/// I.i.d. standard-normal code.
pub fn sample_prior(rng: &mut ChaCha8Rng, dim: usize) -> LatentVector {
    (0..dim).map(|_| rng.sample(StandardNormal)).collect()
}

/// Posterior means for a `[N, 1, S, S, S]` batch using running batch-norm statistics.
pub fn encode_means<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, density: Tensor<T>) -> Result<Vec<LatentVector>, ModelError> {
    let mut g = Graph::new();
    let x = g.input(density);
    let out = encode(&mut g, store, cfg, x, NormMode::Eval)?;
    Ok(g.value(out.mu).data().chunks(cfg.latent_dim).map(|c| c.iter().map(|v| v.as_f64()).collect()).collect())
}

/// `D(μ(M))` for a batch, the deterministic reconstruction.
pub fn reconstruct<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, density: Tensor<T>) -> Result<Tensor<T>, ModelError> {
    let mu = encode_means(store, cfg, density)?;
    decode_latents(store, cfg, &mu)
}
