use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::ops::same_shape;
use crate::tensor::Tensor;
use crate::TensorError;

fn when<T>(need: bool, f: impl FnOnce() -> T) -> Option<T> {
    need.then(f)
}

impl<T: Element> Graph<T> {
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(a), self.shape(b), "add")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x + y);
        Ok(self.push(
            "add",
            v,
            &[a, b],
            Box::new(|args| {
                vec![when(args.needs[0], || args.grad.clone()), when(args.needs[1], || args.grad.clone())]
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(a), self.shape(b), "sub")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x - y);
        Ok(self.push(
            "sub",
            v,
            &[a, b],
            Box::new(|args| {
                vec![when(args.needs[0], || args.grad.clone()), when(args.needs[1], || args.grad.map(|g| -g))]
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, TensorError> {
        same_shape(self.shape(a), self.shape(b), "mul")?;
        let v = self.value(a).zip_map(self.value(b), |x, y| x * y);
        Ok(self.push(
            "mul",
            v,
            &[a, b],
            Box::new(|args| {
                vec![
                    when(args.needs[0], || args.grad.zip_map(args.parents[1], |g, y| g * y)),
                    when(args.needs[1], || args.grad.zip_map(args.parents[0], |g, x| g * x)),
                ]
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let s = T::of(s);
        let v = self.value(a).map(|x| x * s);
        self.push("scale", v, &[a], Box::new(move |args| vec![Some(args.grad.map(|g| g * s))]))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x.exp());
        self.push("exp", v, &[a], Box::new(|args| vec![Some(args.grad.zip_map(args.output, |g, y| g * y))]))
    }

    /// Clamps into `[lo, hi]`; gradient is zero where the clamp is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let (lo, hi) = (T::of(lo), T::of(hi));
        let v = self.value(a).map(|x| x.max(lo).min(hi));
        self.push(
            "clamp",
            v,
            &[a],
            Box::new(move |args| {
                vec![Some(args.grad.zip_map(args.parents[0], |g, x| {
                    if x >= lo && x <= hi {
                        g
                    } else {
                        T::zero()
                    }
                }))]
            }),
        )
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| if x > T::zero() { x } else { T::zero() });
        self.push(
            "relu",
            v,
            &[a],
            Box::new(|args| {
                vec![Some(args.grad.zip_map(args.parents[0], |g, x| if x > T::zero() { g } else { T::zero() }))]
            }),
        )
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let slope = T::of(slope);
        let v = self.value(a).map(|x| if x > T::zero() { x } else { x * slope });
        self.push(
            "leaky_relu",
            v,
            &[a],
            Box::new(move |args| {
                vec![Some(args.grad.zip_map(args.parents[0], |g, x| if x > T::zero() { g } else { g * slope }))]
            }),
        )
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(
            "sigmoid",
            v,
            &[a],
            Box::new(|args| vec![Some(args.grad.zip_map(args.output, |g, s| g * s * (T::one() - s)))]),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, TensorError> {
        let from = self.shape(a).to_vec();
        let v = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(
            "reshape",
            v,
            &[a],
            Box::new(move |args| vec![Some(args.grad.clone().reshaped(&from).expect("same element count"))]),
        ))
    }

    /// Sum of all elements, as a one-element tensor.
    pub fn sum(&mut self, a: Var) -> Var {
        let total = T::of(self.value(a).sum_f64());
        let shape = self.shape(a).to_vec();
        self.push(
            "sum",
            Tensor::scalar(total),
            &[a],
            Box::new(move |args| vec![Some(Tensor::full(&shape, args.grad.item()))]),
        )
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let n = self.value(a).len().max(1) as f64;
        let s = self.sum(a);
        self.scale(s, 1.0 / n)
    }

    /// `Σ a ⊙ w` for a constant weight tensor `w`.
    pub fn sum_product(&mut self, a: Var, w: Tensor<T>) -> Result<Var, TensorError> {
        same_shape(self.shape(a), w.shape(), "sum_product")?;
        let total: f64 = self.value(a).data().iter().zip(w.data()).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
        Ok(self.push(
            "sum_product",
            Tensor::scalar(T::of(total)),
            &[a],
            Box::new(move |args| {
                let g = args.grad.item();
                vec![Some(w.map(|y| y * g))]
            }),
        ))
    }

    /// `Σ wᵢ·termᵢ` over one-element tensors. Terms with zero weight are not
    /// recorded at all, so they contribute no gradient path.
    pub fn weighted_sum(&mut self, terms: &[(Var, f64)]) -> Result<Var, TensorError> {
        let kept: Vec<(Var, T)> = terms.iter().filter(|(_, w)| *w != 0.0).map(|&(v, w)| (v, T::of(w))).collect();
        for (v, _) in &kept {
            if self.value(*v).len() != 1 {
                return Err(TensorError::ShapeMismatch(format!(
                    "weighted_sum expects scalars, got {:?}",
                    self.shape(*v)
                )));
            }
        }
        let mut total = T::zero();
        for &(v, w) in &kept {
            total += w * self.value(v).item();
        }
        let weights: Vec<T> = kept.iter().map(|&(_, w)| w).collect();
        let parents: Vec<Var> = kept.iter().map(|&(v, _)| v).collect();
        Ok(self.push(
            "weighted_sum",
            Tensor::scalar(total),
            &parents,
            Box::new(move |args| {
                let g = args.grad.item();
                weights.iter().map(|&w| Some(Tensor::scalar(g * w))).collect()
            }),
        ))
    }

    /// Concatenates `[N, Cᵢ, ...]` tensors along the channel axis.
    pub fn concat_channels(&mut self, parts: &[Var]) -> Result<Var, TensorError> {
        let first = self
            .value(*parts.first().ok_or_else(|| TensorError::InvalidArgument("concat of nothing".into()))?)
            .shape()
            .to_vec();
        if first.len() < 2 {
            return Err(TensorError::ShapeMismatch(format!("concat_channels needs rank ≥ 2, got {first:?}")));
        }
        let n = first[0];
        let inner: usize = first[2..].iter().product();
        let mut channels = Vec::with_capacity(parts.len());
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len() || s[0] != n || s[2..] != first[2..] {
                return Err(TensorError::ShapeMismatch(format!("concat_channels: {first:?} vs {s:?}")));
            }
            channels.push(s[1]);
        }
        let total_c: usize = channels.iter().sum();
        let mut out = Vec::with_capacity(n * total_c * inner);
        for b in 0..n {
            for (&p, &c) in parts.iter().zip(&channels) {
                let d = self.value(p).data();
                out.extend_from_slice(&d[b * c * inner..(b + 1) * c * inner]);
            }
        }
        let mut shape = first.clone();
        shape[1] = total_c;
        let v = Tensor::new(&shape, out)?;
        Ok(self.push(
            "concat_channels",
            v,
            parts,
            Box::new(move |args| {
                let g = args.grad.data();
                let mut offset = 0;
                channels
                    .iter()
                    .enumerate()
                    .map(|(i, &c)| {
                        let start = offset;
                        offset += c;
                        if !args.needs[i] {
                            return None;
                        }
                        let mut d = Vec::with_capacity(n * c * inner);
                        for b in 0..n {
                            let base = (b * total_c + start) * inner;
                            d.extend_from_slice(&g[base..base + c * inner]);
                        }
                        Some(Tensor::new(args.parents[i].shape(), d).expect("slice shape"))
                    })
                    .collect()
            }),
        ))
    }

    /// `x[n,c,s] · gate[n,0,s]`: one gate value per sample and position, shared by all channels.
    pub fn mul_channel_broadcast(&mut self, x: Var, gate: Var) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(gate);
        if xs.len() < 2 || gs.len() != xs.len() || gs[0] != xs[0] || gs[1] != 1 || gs[2..] != xs[2..] {
            return Err(TensorError::ShapeMismatch(format!("mul_channel_broadcast: {xs:?} vs {gs:?}")));
        }
        let (n, c) = (xs[0], xs[1]);
        let inner: usize = xs[2..].iter().product();
        let xv = self.value(x).data();
        let gv = self.value(gate).data();
        let mut out = vec![T::zero(); xv.len()];
        for b in 0..n {
            let gr = &gv[b * inner..(b + 1) * inner];
            for ch in 0..c {
                let base = (b * c + ch) * inner;
                for ((o, &xi), &gi) in out[base..base + inner].iter_mut().zip(&xv[base..base + inner]).zip(gr) {
                    *o = xi * gi;
                }
            }
        }
        let v = Tensor::new(&xs, out)?;
        Ok(self.push(
            "mul_channel_broadcast",
            v,
            &[x, gate],
            Box::new(move |args| {
                let g = args.grad.data();
                let xv = args.parents[0].data();
                let gv = args.parents[1].data();
                let dx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); g.len()];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in 0..inner {
                                d[base + i] = g[base + i] * gv[b * inner + i];
                            }
                        }
                    }
                    Tensor::new(args.parents[0].shape(), d).expect("shape")
                });
                let dg = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); n * inner];
                    for b in 0..n {
                        for ch in 0..c {
                            let base = (b * c + ch) * inner;
                            for i in 0..inner {
                                d[b * inner + i] += g[base + i] * xv[base + i];
                            }
                        }
                    }
                    Tensor::new(args.parents[1].shape(), d).expect("shape")
                });
                vec![dx, dg]
            }),
        ))
    }

    /// Multiplies row `i` of a `[N, ...]` tensor by the constant `factors[i]`.
    pub fn scale_rows(&mut self, x: Var, factors: &[f64]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&factors.len()) {
            return Err(TensorError::ShapeMismatch(format!(
                "scale_rows: {} factors for shape {shape:?}",
                factors.len()
            )));
        }
        let f: Vec<T> = factors.iter().map(|&v| T::of(v)).collect();
        let row = self.value(x).row_len();
        let apply = move |t: &Tensor<T>, f: &[T]| {
            let mut d = t.data().to_vec();
            for (chunk, &s) in d.chunks_mut(row.max(1)).zip(f) {
                chunk.iter_mut().for_each(|v| *v *= s);
            }
            Tensor::new(t.shape(), d).expect("shape")
        };
        let v = apply(self.value(x), &f);
        Ok(self.push("scale_rows", v, &[x], Box::new(move |args| vec![Some(apply(args.grad, &f))])))
    }

    /// Adds the constant `offsets[i]` to every element of row `i`.
    pub fn add_rows(&mut self, x: Var, offsets: &[f64]) -> Result<Var, TensorError> {
        let shape = self.shape(x).to_vec();
        if shape.first() != Some(&offsets.len()) {
            return Err(TensorError::ShapeMismatch(format!(
                "add_rows: {} offsets for shape {shape:?}",
                offsets.len()
            )));
        }
        let row = self.value(x).row_len().max(1);
        let mut d = self.value(x).data().to_vec();
        for (chunk, &o) in d.chunks_mut(row).zip(offsets) {
            let o = T::of(o);
            chunk.iter_mut().for_each(|v| *v += o);
        }
        let v = Tensor::new(&shape, d)?;
        Ok(self.push("add_rows", v, &[x], Box::new(|args| vec![Some(args.grad.clone())])))
    }
}

pub(crate) fn sigmoid<T: Element>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}
