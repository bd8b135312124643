//! Two-level 3-D U-Net with optional additive attention gates on the skips.

use crystvox_tensor::{Conv3d, Element, Graph, NormMode, ParamStore, Var};
use rand_chacha::ChaCha8Rng;

use crate::config::ModelConfig;
use crate::layers::{conv, conv_bn_act, init_bn, init_conv, same};
use crate::ModelError;

fn init_block<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, cin: usize, cout: usize) {
    init_conv(store, rng, &format!("{name}.conv"), cin, cout, 3, false);
    init_bn(store, &format!("{name}.bn"), cout);
}

fn init_gate<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, skip: usize, gating: usize) {
    init_conv(store, rng, &format!("{name}.wx"), skip, skip, 1, false);
    init_conv(store, rng, &format!("{name}.wg"), gating, skip, 1, true);
    init_conv(store, rng, &format!("{name}.psi"), skip, 1, 1, true);
}

pub fn init_unet<T: Element>(store: &mut ParamStore<T>, cfg: &ModelConfig, rng: &mut ChaCha8Rng) {
    let b = cfg.unet_base;
    init_block(store, rng, "unet.e1", 1, b);
    init_block(store, rng, "unet.e2", b, 2 * b);
    init_block(store, rng, "unet.bt", 2 * b, 4 * b);
    if cfg.attention {
        init_gate(store, rng, "unet.g2", 2 * b, 4 * b);
        init_gate(store, rng, "unet.g1", b, 2 * b);
    }
    init_block(store, rng, "unet.d2", 6 * b, 2 * b);
    init_block(store, rng, "unet.d1", 3 * b, b);
    init_conv(store, rng, "unet.head", b, cfg.num_classes, 1, true);
}

/// `skip ⊙ σ(ψ(relu(Wx·skip + Wg·gating)))`.
fn gate<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, skip: Var, gating: Var) -> Result<Var, ModelError> {
    let pointwise = Conv3d::new(1, 0);
    let qx = conv(g, store, &format!("{name}.wx"), skip, pointwise)?;
    let qg = conv(g, store, &format!("{name}.wg"), gating, pointwise)?;
    let q = g.add(qx, qg)?;
    let q = g.relu(q);
    let psi = conv(g, store, &format!("{name}.psi"), q, pointwise)?;
    let psi = g.sigmoid(psi);
    Ok(g.mul_channel_broadcast(skip, psi)?)
}

fn resize_to<T: Element>(g: &mut Graph<T>, x: Var, like: Var) -> Result<Var, ModelError> {
    let target = [g.shape(like)[2], g.shape(like)[3], g.shape(like)[4]];
    if g.shape(x)[2..] == target {
        return Ok(x);
    }
    Ok(g.trilinear_resize(x, target)?)
}

/// `[N, 1, S, S, S]` densities to `[N, classes, S, S, S]` logits.
pub fn unet_segment<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    x: Var,
    mode: NormMode,
) -> Result<Var, ModelError> {
    let shape = g.shape(x).to_vec();
    if shape.len() != 5 || shape[1] != 1 {
        return Err(ModelError::InvalidInput(format!("expected [N, 1, D, H, W] densities, got {shape:?}")));
    }
    let slope = cfg.leaky_slope;
    let down = Conv3d::new(2, 1);
    let e1 = conv_bn_act(g, store, "unet.e1", x, same(3), mode, slope)?;
    let e2 = conv_bn_act(g, store, "unet.e2", e1, down, mode, slope)?;
    let bt = conv_bn_act(g, store, "unet.bt", e2, down, mode, slope)?;

    let u2 = resize_to(g, bt, e2)?;
    let s2 = if cfg.attention { gate(g, store, "unet.g2", e2, u2)? } else { e2 };
    let h2 = g.concat_channels(&[u2, s2])?;
    let h2 = conv_bn_act(g, store, "unet.d2", h2, same(3), mode, slope)?;

    let u1 = resize_to(g, h2, e1)?;
    let s1 = if cfg.attention { gate(g, store, "unet.g1", e1, u1)? } else { e1 };
    let h1 = g.concat_channels(&[u1, s1])?;
    let h1 = conv_bn_act(g, store, "unet.d1", h1, same(3), mode, slope)?;
    Ok(conv(g, store, "unet.head", h1, Conv3d::new(1, 0))?)
}

/// Logits for a batch of densities using running batch-norm statistics.
pub fn segment_logits<T: Element>(
    store: &mut ParamStore<T>,
    cfg: &ModelConfig,
    density: crystvox_tensor::Tensor<T>,
) -> Result<crystvox_tensor::Tensor<T>, ModelError> {
    let mut g = Graph::new();
    let x = g.input(density);
    let y = unet_segment(&mut g, store, cfg, x, NormMode::Eval)?;
    Ok(g.value(y).clone())
}
