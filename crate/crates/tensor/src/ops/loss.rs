use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::ops::same_shape;
use crate::tensor::Tensor;
use crate::TensorError;

impl<T: Element> Graph<T> {
    /// Mean squared error over all elements.
    pub fn mse(&mut self, pred: Var, target: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(pred), self.shape(target), "mse")?;
        let (p, t) = (self.value(pred).data(), self.value(target).data());
        let n = p.len().max(1) as f64;
        let total: f64 = p.iter().zip(t).map(|(a, b)| (a.as_f64() - b.as_f64()).powi(2)).sum();
        Ok(self.push(
            "mse",
            Tensor::scalar(T::of(total / n)),
            &[pred, target],
            Box::new(move |args| {
                let k = T::of(2.0 / n) * args.grad.item();
                let diff = || args.parents[0].zip_map(args.parents[1], |a, b| (a - b) * k);
                vec![args.needs[0].then(diff), args.needs[1].then(|| diff().map(|v| -v))]
            }),
        ))
    }

    /// KL divergence of `N(mu, exp(logvar))` from `N(0, 1)` for `[N, D]` inputs:
    /// `½ Σ_d (μ² + exp(logvar) − 1 − logvar)`, averaged over the batch.
    pub fn kl_diag_gaussian(&mut self, mu: Var, logvar: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(mu), self.shape(logvar), "kl_diag_gaussian")?;
        let batch = self.shape(mu).first().copied().unwrap_or(1).max(1) as f64;
        let (m, lv) = (self.value(mu).data(), self.value(logvar).data());
        let total: f64 = m
            .iter()
            .zip(lv)
            .map(|(a, b)| {
                let (a, b) = (a.as_f64(), b.as_f64());
                a * a + b.exp() - 1.0 - b
            })
            .sum();
        Ok(self.push(
            "kl_diag_gaussian",
            Tensor::scalar(T::of(0.5 * total / batch)),
            &[mu, logvar],
            Box::new(move |args| {
                let g = args.grad.item();
                let inv = T::of(1.0 / batch);
                let half = T::of(0.5 / batch);
                vec![
                    args.needs[0].then(|| args.parents[0].map(|m| m * inv * g)),
                    args.needs[1].then(|| args.parents[1].map(|lv| (lv.exp() - T::one()) * half * g)),
                ]
            }),
        ))
    }

    /// Elementwise sigmoid binary cross-entropy against `target`, mean-reduced,
    /// in the stable form `max(x,0) − x·t + ln(1 + e^{−|x|})`.
    pub fn bce_with_logits(&mut self, logits: Var, target: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(logits), self.shape(target), "bce_with_logits")?;
        let (x, t) = (self.value(logits).data(), self.value(target).data());
        let n = x.len().max(1) as f64;
        // e = exp(-|x|) lies in (0, 1], so ln(1 + e) needs no ln_1p.
        let e: Vec<T> = x.iter().map(|&x| (-x.abs()).exp()).collect();
        let total: f64 = x
            .iter()
            .zip(t)
            .zip(&e)
            .map(|((&x, &t), &e)| (x.max(T::zero()) - x * t + (T::one() + e).ln()).as_f64())
            .sum();
        Ok(self.push(
            "bce_with_logits",
            Tensor::scalar(T::of(total / n)),
            &[logits, target],
            Box::new(move |args| {
                let k = T::of(1.0 / n) * args.grad.item();
                let (x, t) = (args.parents[0], args.parents[1]);
                vec![
                    args.needs[0].then(|| {
                        let data = x
                            .data()
                            .iter()
                            .zip(t.data())
                            .zip(&e)
                            .map(|((&x, &t), &e)| {
                                let p = if x >= T::zero() { T::one() / (T::one() + e) } else { e / (T::one() + e) };
                                (p - t) * k
                            })
                            .collect();
                        Tensor::new(x.shape(), data).expect("shape preserved")
                    }),
                    args.needs[1].then(|| x.map(|x| -x * k)),
                ]
            }),
        ))
    }

    /// Softmax cross-entropy over the channel axis of `[N, C, ...]`, averaged
    /// over every non-channel position. `target` holds class probabilities
    /// (one-hot in practice) in the same layout.
    pub fn softmax_cross_entropy(&mut self, logits: Var, target: Var) -> Result<Var, TensorError> {
        let shape = self.shape(logits).to_vec();
        same_shape(&shape, self.shape(target), "softmax_cross_entropy")?;
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!("softmax_cross_entropy needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        let positions = (n * inner).max(1) as f64;
        let (x, t) = (self.value(logits).data(), self.value(target).data());
        let mut probs = vec![T::zero(); x.len()];
        let mut total = 0.0;
        for b in 0..n {
            for i in 0..inner {
                let at = |ch: usize| (b * c + ch) * inner + i;
                let max = (0..c).map(|ch| x[at(ch)].as_f64()).fold(f64::NEG_INFINITY, f64::max);
                let z: f64 = (0..c).map(|ch| (x[at(ch)].as_f64() - max).exp()).sum();
                let log_z = max + z.ln();
                for ch in 0..c {
                    let lp = x[at(ch)].as_f64() - log_z;
                    probs[at(ch)] = T::of(lp.exp());
                    total -= t[at(ch)].as_f64() * lp;
                }
            }
        }
        let probs = Tensor::new(&shape, probs)?;
        Ok(self.push(
            "softmax_cross_entropy",
            Tensor::scalar(T::of(total / positions)),
            &[logits, target],
            Box::new(move |args| {
                let k = T::of(1.0 / positions) * args.grad.item();
                let t = args.parents[1];
                let dlogits = args.needs[0].then(|| {
                    // Gradient of the mass-weighted form: p·Σt − t.
                    let mut d = probs.clone();
                    let (dd, tv) = (d.data_mut(), t.data());
                    for b in 0..n {
                        for i in 0..inner {
                            let at = |ch: usize| (b * c + ch) * inner + i;
                            let mass: T = (0..c).map(|ch| tv[at(ch)]).sum();
                            for ch in 0..c {
                                dd[at(ch)] = (dd[at(ch)] * mass - tv[at(ch)]) * k;
                            }
                        }
                    }
                    d
                });
                let dtarget = args.needs[1].then(|| probs.map(|p| -p.ln() * k));
                vec![dlogits, dtarget]
            }),
        ))
    }
}
