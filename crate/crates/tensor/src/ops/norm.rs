use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::TensorError;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum NormMode {
    /// Normalize with batch statistics and update the running estimates.
    Train,
    /// Normalize with the running estimates.
    Eval,
}

impl<T: Element> Graph<T> {
    /// Batch normalization over every axis except the channel axis of `[N, C, ...]`.
    ///
    /// `running` is a `[2, C]` buffer holding the running mean (row 0) and
    /// running variance (row 1). In train mode it is updated with momentum
    /// [`BN_MOMENTUM`] using the unbiased batch variance.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running: &mut Tensor<T>,
        mode: NormMode,
    ) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!("batch_norm needs [N, C, ...], got {shape:?}")));
        }
        let (n, c) = (shape[0], shape[1]);
        let inner: usize = shape[2..].iter().product();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] || running.shape() != [2, c] {
            return Err(TensorError::ShapeMismatch(format!(
                "batch_norm: {c} channels but gamma {:?}, beta {:?}, running {:?}",
                self.shape(gamma),
                self.shape(beta),
                running.shape()
            )));
        }
        let count = n * inner;
        let xv = self.value(x).data();
        let (mean, var): (Vec<f64>, Vec<f64>) = match mode {
            NormMode::Train => {
                if count <= 1 {
                    return Err(TensorError::BatchTooSmall);
                }
                let mut mean = vec![0.0; c];
                let mut var = vec![0.0; c];
                for ch in 0..c {
                    let mut s = 0.0;
                    for b in 0..n {
                        s += xv[(b * c + ch) * inner..(b * c + ch + 1) * inner].iter().map(|v| v.as_f64()).sum::<f64>();
                    }
                    let m = s / count as f64;
                    let mut ss = 0.0;
                    for b in 0..n {
                        for v in &xv[(b * c + ch) * inner..(b * c + ch + 1) * inner] {
                            let dlt = v.as_f64() - m;
                            ss += dlt * dlt;
                        }
                    }
                    mean[ch] = m;
                    var[ch] = ss / count as f64;
                }
                let r = running.data_mut();
                let unbias = count as f64 / (count - 1) as f64;
                for ch in 0..c {
                    r[ch] = T::of((1.0 - BN_MOMENTUM) * r[ch].as_f64() + BN_MOMENTUM * mean[ch]);
                    r[c + ch] = T::of((1.0 - BN_MOMENTUM) * r[c + ch].as_f64() + BN_MOMENTUM * var[ch] * unbias);
                }
                (mean, var)
            }
            NormMode::Eval => {
                let r = running.data();
                (r[..c].iter().map(|v| v.as_f64()).collect(), r[c..].iter().map(|v| v.as_f64()).collect())
            }
        };
        let inv_std: Vec<T> = var.iter().map(|&v| T::of(1.0 / (v + BN_EPS).sqrt())).collect();
        let mean: Vec<T> = mean.into_iter().map(T::of).collect();
        let gv = self.value(gamma).data();
        let bv = self.value(beta).data();
        let mut xhat = vec![T::zero(); xv.len()];
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            for ch in 0..c {
                let range = (b * c + ch) * inner..(b * c + ch + 1) * inner;
                for i in range {
                    let h = (xv[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = h;
                    out[i] = gv[ch] * h + bv[ch];
                }
            }
        }
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            "batch_norm",
            v,
            &[x, gamma, beta],
            Box::new(move |args| {
                let g = args.grad.data();
                let gam = args.parents[1].data();
                let mut sum_g = vec![0.0f64; c];
                let mut sum_gx = vec![0.0f64; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                            sum_g[ch] += g[i].as_f64();
                            sum_gx[ch] += (g[i] * xhat[i]).as_f64();
                        }
                    }
                }
                let dx = args.needs[0].then(|| {
                    let mut dx = vec![T::zero(); g.len()];
                    for ch in 0..c {
                        let k = gam[ch] * inv_std[ch];
                        let (mg, mgx) = (T::of(sum_g[ch] / count as f64), T::of(sum_gx[ch] / count as f64));
                        for b in 0..n {
                            for i in (b * c + ch) * inner..(b * c + ch + 1) * inner {
                                dx[i] = match mode {
                                    NormMode::Train => k * (g[i] - mg - xhat[i] * mgx),
                                    NormMode::Eval => k * g[i],
                                };
                            }
                        }
                    }
                    Tensor::new(&shape, dx).expect("shape")
                });
                let dgamma = args.needs[1].then(|| Tensor::new(&[c], sum_gx.iter().map(|&v| T::of(v)).collect()).expect("shape"));
                let dbeta = args.needs[2].then(|| Tensor::new(&[c], sum_g.iter().map(|&v| T::of(v)).collect()).expect("shape"));
                vec![dx, dgamma, dbeta]
            }),
        ))
    }
}
