use crystvox_tensor::{Conv3d, Element, Graph, NormMode, ParamStore, Tensor, TensorError, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// He-uniform weights, bound `√(6 / fan_in)`.
fn he_uniform<T: Element>(rng: &mut ChaCha8Rng, shape: &[usize], fan_in: usize) -> Tensor<T> {
    let bound = (6.0 / fan_in.max(1) as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| T::of(rng.random_range(-bound..bound))).collect()).expect("shape")
}

pub(crate) fn init_conv<T: Element>(
    store: &mut ParamStore<T>,
    rng: &mut ChaCha8Rng,
    name: &str,
    cin: usize,
    cout: usize,
    k: usize,
    bias: bool,
) {
    store.insert(format!("{name}.w"), he_uniform(rng, &[cout, cin, k, k, k], cin * k * k * k));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[cout]));
    }
}

pub(crate) fn init_linear<T: Element>(store: &mut ParamStore<T>, rng: &mut ChaCha8Rng, name: &str, fin: usize, fout: usize, bias: bool) {
    store.insert(format!("{name}.w"), he_uniform(rng, &[fout, fin], fin));
    if bias {
        store.insert(format!("{name}.b"), Tensor::zeros(&[fout]));
    }
}

pub(crate) fn init_bn<T: Element>(store: &mut ParamStore<T>, name: &str, c: usize) {
    store.insert(format!("{name}.gamma"), Tensor::full(&[c], T::one()));
    store.insert(format!("{name}.beta"), Tensor::zeros(&[c]));
    let mut running = Tensor::zeros(&[2, c]);
    running.data_mut()[c..].iter_mut().for_each(|v| *v = T::one());
    store.insert_buffer(format!("{name}.running"), running);
}

fn optional<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str) -> Result<Option<Var>, TensorError> {
    if store.contains(name) {
        g.param(store, name).map(Some)
    } else {
        Ok(None)
    }
}

pub(crate) fn conv<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var, spec: Conv3d) -> Result<Var, TensorError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = optional(g, store, &format!("{name}.b"))?;
    g.conv3d(x, w, b, spec)
}

pub(crate) fn linear<T: Element>(g: &mut Graph<T>, store: &ParamStore<T>, name: &str, x: Var) -> Result<Var, TensorError> {
    let w = g.param(store, &format!("{name}.w"))?;
    let b = optional(g, store, &format!("{name}.b"))?;
    g.linear(x, w, b)
}

pub(crate) fn batch_norm<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: Var,
    mode: NormMode,
) -> Result<Var, TensorError> {
    let gamma = g.param(store, &format!("{name}.gamma"))?;
    let beta = g.param(store, &format!("{name}.beta"))?;
    let key = format!("{name}.running");
    let running = store.buffer_mut(&key).ok_or(TensorError::MissingParameter(key))?;
    g.batch_norm(x, gamma, beta, running, mode)
}

/// Convolution (no bias), batch norm, LeakyReLU.
#[allow(clippy::too_many_arguments)]
pub(crate) fn conv_bn_act<T: Element>(
    g: &mut Graph<T>,
    store: &mut ParamStore<T>,
    name: &str,
    x: Var,
    spec: Conv3d,
    mode: NormMode,
    slope: f64,
) -> Result<Var, TensorError> {
    let h = conv(g, store, &format!("{name}.conv"), x, spec)?;
    let h = batch_norm(g, store, &format!("{name}.bn"), h, mode)?;
    Ok(g.leaky_relu(h, slope))
}

/// "Same" padding for an odd or even kernel at stride 1: `(⌊(k−1)/2⌋, ⌈(k−1)/2⌉)`.
pub(crate) fn same(k: usize) -> Conv3d {
    Conv3d::with_padding(1, (k - 1) / 2, k / 2)
}
