//! Randomized finite-difference suite covering every differentiable layer.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::gradcheck::{check_inputs, GradCheck, DEFAULT_STEP};
use crate::graph::{Graph, Var};
use crate::ops::{Conv3d, NormMode};
use crate::tensor::Tensor;
use crate::TensorError;

/// Tolerance for ops that are linear or smooth elementwise maps.
pub const SMOOTH_TOLERANCE: f64 = 1e-6;
/// Tolerance for convolution, resampling and normalization layers.
pub const LAYER_TOLERANCE: f64 = 1e-4;

#[derive(Debug, Clone)]
pub struct LayerReport {
    pub layer: &'static str,
    pub cases: usize,
    pub worst: GradCheck,
    pub tolerance: f64,
}

impl LayerReport {
    pub fn passed(&self) -> bool {
        self.cases > 0 && self.worst.max_rel_error < self.tolerance
    }
}

fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape, (0..n).map(|_| rng.random_range(lo..hi)).collect()).expect("shape")
}

/// Values with magnitude in `[0.1, 1)` and random sign, away from activation kinks.
fn off_kink(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor<f64> {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let m = rng.random_range(0.1..1.0);
            if rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape, data).expect("shape")
}

fn random_5d(rng: &mut ChaCha8Rng, max_extent: usize) -> Vec<usize> {
    vec![
        rng.random_range(1..=2),
        rng.random_range(1..=3),
        rng.random_range(1..=max_extent),
        rng.random_range(1..=max_extent),
        rng.random_range(1..=max_extent),
    ]
}

/// Projects a tensor output onto a fixed random direction so it becomes a scalar.
fn project(g: &mut Graph<f64>, out: Var, weights: &Tensor<f64>) -> Result<Var, TensorError> {
    g.sum_product(out, weights.clone())
}

type Case = (Vec<Tensor<f64>>, Box<dyn Fn(&mut Graph<f64>, &[Var]) -> Result<Var, TensorError>>);

fn conv_case(rng: &mut ChaCha8Rng) -> Case {
    let k = rng.random_range(1..=3);
    let conv = Conv3d::with_padding(rng.random_range(1..=2), rng.random_range(0..=1), rng.random_range(0..=1));
    let (n, ci, co) = (rng.random_range(1..=2), rng.random_range(1..=3), rng.random_range(1..=3));
    let dims: Vec<usize> = (0..3).map(|_| rng.random_range(k..=k + 3)).collect();
    let out: Vec<usize> = dims.iter().map(|&d| conv.output_extent(d, k).expect("kernel fits")).collect();
    let mut inputs = vec![uniform(rng, &[n, ci, dims[0], dims[1], dims[2]], -1.0, 1.0), uniform(rng, &[co, ci, k, k, k], -1.0, 1.0)];
    let with_bias = rng.random::<bool>();
    if with_bias {
        inputs.push(uniform(rng, &[co], -1.0, 1.0));
    }
    let r = uniform(rng, &[n, co, out[0], out[1], out[2]], -1.0, 1.0);
    (
        inputs,
        Box::new(move |g, v| {
            let y = g.conv3d(v[0], v[1], v.get(2).copied(), conv)?;
            project(g, y, &r)
        }),
    )
}

fn resize_case(rng: &mut ChaCha8Rng, upsample: bool) -> Case {
    let shape = random_5d(rng, 4);
    let size = if upsample {
        let f = rng.random_range(2..=3);
        [shape[2] * f, shape[3] * f, shape[4] * f]
    } else {
        [rng.random_range(1..=6), rng.random_range(1..=6), rng.random_range(1..=6)]
    };
    let r = uniform(rng, &[shape[0], shape[1], size[0], size[1], size[2]], -1.0, 1.0);
    let factor = size[0] / shape[2];
    (
        vec![uniform(rng, &shape, -1.0, 1.0)],
        Box::new(move |g, v| {
            let y = if upsample { g.upsample(v[0], factor)? } else { g.trilinear_resize(v[0], size)? };
            project(g, y, &r)
        }),
    )
}

fn batch_norm_case(rng: &mut ChaCha8Rng, mode: NormMode) -> Case {
    let mut shape = random_5d(rng, 3);
    if shape[0] * shape[2] * shape[3] * shape[4] < 2 {
        shape[0] = 2;
    }
    let c = shape[1];
    let mut running = uniform(rng, &[2, c], 0.5, 1.5);
    running.data_mut()[..c].iter_mut().for_each(|m| *m -= 1.0);
    let r = uniform(rng, &shape, -1.0, 1.0);
    (
        vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &[c], 0.5, 1.5), uniform(rng, &[c], -0.5, 0.5)],
        Box::new(move |g, v| {
            let mut stats = running.clone();
            let y = g.batch_norm(v[0], v[1], v[2], &mut stats, mode)?;
            project(g, y, &r)
        }),
    )
}

fn unary_case(rng: &mut ChaCha8Rng, op: fn(&mut Graph<f64>, Var) -> Var, kinked: bool) -> Case {
    let shape = random_5d(rng, 3);
    let x = if kinked { off_kink(rng, &shape) } else { uniform(rng, &shape, -2.0, 2.0) };
    let r = uniform(rng, &shape, -1.0, 1.0);
    (
        vec![x],
        Box::new(move |g, v| {
            let y = op(g, v[0]);
            project(g, y, &r)
        }),
    )
}

fn linear_case(rng: &mut ChaCha8Rng) -> Case {
    let (n, fin, fout) = (rng.random_range(1..=4), rng.random_range(1..=6), rng.random_range(1..=6));
    let r = uniform(rng, &[n, fout], -1.0, 1.0);
    (
        vec![uniform(rng, &[n, fin], -1.0, 1.0), uniform(rng, &[fout, fin], -1.0, 1.0), uniform(rng, &[fout], -1.0, 1.0)],
        Box::new(move |g, v| {
            let y = g.linear(v[0], v[1], Some(v[2]))?;
            project(g, y, &r)
        }),
    )
}

fn loss_case(rng: &mut ChaCha8Rng, which: &'static str) -> Case {
    let shape = random_5d(rng, 3);
    match which {
        "mse" => (
            vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &shape, -1.0, 1.0)],
            Box::new(|g, v| g.mse(v[0], v[1])),
        ),
        "kl_diag_gaussian" => {
            let s = [shape[0], shape[1] * shape[2]];
            (
                vec![uniform(rng, &s, -1.5, 1.5), uniform(rng, &s, -2.0, 2.0)],
                Box::new(|g, v| g.kl_diag_gaussian(v[0], v[1])),
            )
        }
        "bce_with_logits" => (
            vec![uniform(rng, &shape, -3.0, 3.0), uniform(rng, &shape, 0.0, 1.0)],
            Box::new(|g, v| g.bce_with_logits(v[0], v[1])),
        ),
        _ => (
            vec![uniform(rng, &shape, -3.0, 3.0), uniform(rng, &shape, 0.0, 1.0)],
            Box::new(|g, v| g.softmax_cross_entropy(v[0], v[1])),
        ),
    }
}

fn gate_case(rng: &mut ChaCha8Rng) -> Case {
    let shape = random_5d(rng, 3);
    let gate = [shape[0], 1, shape[2], shape[3], shape[4]];
    let extra = rng.random_range(1..=2);
    let other = [shape[0], extra, shape[2], shape[3], shape[4]];
    let out = [shape[0], shape[1] + extra, shape[2], shape[3], shape[4]];
    let r = uniform(rng, &out, -1.0, 1.0);
    (
        vec![uniform(rng, &shape, -1.0, 1.0), uniform(rng, &gate, 0.0, 1.0), uniform(rng, &other, -1.0, 1.0)],
        Box::new(move |g, v| {
            let gated = g.mul_channel_broadcast(v[0], v[1])?;
            let y = g.concat_channels(&[gated, v[2]])?;
            project(g, y, &r)
        }),
    )
}

/// Runs `cases` randomized checks per layer.
pub fn layer_suite(cases: usize, seed: u64) -> Result<Vec<LayerReport>, TensorError> {
    type Maker = Box<dyn Fn(&mut ChaCha8Rng) -> Case>;
    let layers: Vec<(&'static str, f64, Maker)> = vec![
        ("conv3d", LAYER_TOLERANCE, Box::new(conv_case)),
        ("trilinear_upsample", LAYER_TOLERANCE, Box::new(|r| resize_case(r, true))),
        ("trilinear_resize", LAYER_TOLERANCE, Box::new(|r| resize_case(r, false))),
        ("batch_norm_train", LAYER_TOLERANCE, Box::new(|r| batch_norm_case(r, NormMode::Train))),
        ("batch_norm_eval", LAYER_TOLERANCE, Box::new(|r| batch_norm_case(r, NormMode::Eval))),
        ("linear", LAYER_TOLERANCE, Box::new(linear_case)),
        ("bce_with_logits", LAYER_TOLERANCE, Box::new(|r| loss_case(r, "bce_with_logits"))),
        ("softmax_cross_entropy", LAYER_TOLERANCE, Box::new(|r| loss_case(r, "softmax_cross_entropy"))),
        ("gate_concat", LAYER_TOLERANCE, Box::new(gate_case)),
        ("leaky_relu", SMOOTH_TOLERANCE, Box::new(|r| unary_case(r, |g, x| g.leaky_relu(x, 0.01), true))),
        ("relu", SMOOTH_TOLERANCE, Box::new(|r| unary_case(r, |g, x| g.relu(x), true))),
        ("sigmoid", SMOOTH_TOLERANCE, Box::new(|r| unary_case(r, |g, x| g.sigmoid(x), false))),
        ("exp", SMOOTH_TOLERANCE, Box::new(|r| unary_case(r, |g, x| g.exp(x), false))),
        ("mse", SMOOTH_TOLERANCE, Box::new(|r| loss_case(r, "mse"))),
        ("kl_diag_gaussian", SMOOTH_TOLERANCE, Box::new(|r| loss_case(r, "kl_diag_gaussian"))),
    ];
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut reports = Vec::with_capacity(layers.len());
    for (layer, tolerance, make) in layers {
        let mut worst = GradCheck::default();
        for _ in 0..cases {
            let (inputs, f) = make(&mut rng);
            let r = check_inputs(&inputs, DEFAULT_STEP, |g, v| f(g, v))?;
            worst = GradCheck {
                max_abs_error: worst.max_abs_error.max(r.max_abs_error),
                max_rel_error: worst.max_rel_error.max(r.max_rel_error),
                checked: worst.checked + r.checked,
            };
        }
        reports.push(LayerReport { layer, cases, worst, tolerance });
    }
    Ok(reports)
}
