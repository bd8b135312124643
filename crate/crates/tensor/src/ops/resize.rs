use rayon::prelude::*;

use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::ops::dims5;
use crate::tensor::Tensor;
use crate::TensorError;

/// Per-output-index source taps `(i0, i1, w0, w1)` for align-corners-false resampling.
fn axis_taps(input: usize, output: usize) -> Vec<(usize, usize, f64, f64)> {
    let scale = input as f64 / output as f64;
    (0..output)
        .map(|o| {
            let src = ((o as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (src.floor() as usize).min(input - 1);
            let i1 = (i0 + 1).min(input - 1);
            let l1 = src - i0 as f64;
            (i0, i1, 1.0 - l1, l1)
        })
        .collect()
}

struct Taps<T> {
    d: Vec<(usize, usize, T, T)>,
    h: Vec<(usize, usize, T, T)>,
    w: Vec<(usize, usize, T, T)>,
    input: [usize; 3],
}

impl<T: Element> Taps<T> {
    fn new(input: [usize; 3], output: [usize; 3]) -> Self {
        let conv = |i, o| axis_taps(i, o).into_iter().map(|(a, b, w0, w1)| (a, b, T::of(w0), T::of(w1))).collect();
        Self { d: conv(input[0], output[0]), h: conv(input[1], output[1]), w: conv(input[2], output[2]), input }
    }

    /// Calls `f(output_index, input_index, weight)` for all eight corner taps of every output voxel.
    fn visit(&self, mut f: impl FnMut(usize, usize, T)) {
        let [_, ih, iw] = self.input;
        let (oh, ow) = (self.h.len(), self.w.len());
        for (od, &(d0, d1, wd0, wd1)) in self.d.iter().enumerate() {
            for (ohi, &(h0, h1, wh0, wh1)) in self.h.iter().enumerate() {
                for (owi, &(w0, w1, ww0, ww1)) in self.w.iter().enumerate() {
                    let o = (od * oh + ohi) * ow + owi;
                    for (dd, wd) in [(d0, wd0), (d1, wd1)] {
                        for (hh, wh) in [(h0, wh0), (h1, wh1)] {
                            let base = (dd * ih + hh) * iw;
                            let wdh = wd * wh;
                            f(o, base + w0, wdh * ww0);
                            f(o, base + w1, wdh * ww1);
                        }
                    }
                }
            }
        }
    }
}

impl<T: Element> Graph<T> {
    /// Trilinear resampling of `[N, C, D, H, W]` to spatial extent `size`
    /// (align-corners-false convention).
    pub fn trilinear_resize(&mut self, x: Var, size: [usize; 3]) -> Result<Var, TensorError> {
        let [n, c, d, h, w] = dims5(self.shape(x), "trilinear_resize")?;
        if size.contains(&0) || d == 0 || h == 0 || w == 0 {
            return Err(TensorError::ShapeMismatch(format!("trilinear_resize: empty extent {:?} -> {size:?}", [d, h, w])));
        }
        let taps = Taps::<T>::new([d, h, w], size);
        let (isp, osp) = (d * h * w, size.iter().product::<usize>());
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); n * c * osp];
        out.par_chunks_mut(osp).enumerate().for_each(|(s, o)| {
            let src = &xv[s * isp..(s + 1) * isp];
            taps.visit(|oi, ii, wt| o[oi] += src[ii] * wt);
        });
        let v = Tensor::new(&[n, c, size[0], size[1], size[2]], out)?;
        Ok(self.push(
            "trilinear_resize",
            v,
            &[x],
            Box::new(move |args| {
                let g = args.grad.data();
                let mut dx = vec![T::zero(); n * c * isp];
                dx.par_chunks_mut(isp).enumerate().for_each(|(s, dxs)| {
                    let gs = &g[s * osp..(s + 1) * osp];
                    taps.visit(|oi, ii, wt| dxs[ii] += gs[oi] * wt);
                });
                vec![Some(Tensor::new(args.parents[0].shape(), dx).expect("shape"))]
            }),
        ))
    }

    /// Trilinear upsampling by an integer factor on every spatial axis.
    pub fn upsample(&mut self, x: Var, factor: usize) -> Result<Var, TensorError> {
        if factor < 2 {
            return Err(TensorError::InvalidArgument(format!("upsample factor must be ≥ 2, got {factor}")));
        }
        let [_, _, d, h, w] = dims5(self.shape(x), "upsample")?;
        self.trilinear_resize(x, [d * factor, h * factor, w * factor])
    }
}
