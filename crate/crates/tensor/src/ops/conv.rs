use rayon::prelude::*;

use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::ops::dims5;
use crate::tensor::Tensor;
use crate::TensorError;

/// Upper bound on im2col buffer elements per chunk.
const COL_BUDGET: usize = 1 << 21;

/// Stride and padding of a 3-D cross-correlation. Padding may differ between
/// the low and high side of each axis (same on all three axes).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Conv3d {
    pub stride: usize,
    pub pad_lo: usize,
    pub pad_hi: usize,
}

impl Conv3d {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad_lo: pad, pad_hi: pad }
    }

    pub fn with_padding(stride: usize, pad_lo: usize, pad_hi: usize) -> Self {
        Self { stride, pad_lo, pad_hi }
    }

    /// `⌊(in + lo + hi − k) / stride⌋ + 1`, or `None` when the kernel does not fit.
    pub fn output_extent(&self, input: usize, kernel: usize) -> Option<usize> {
        let padded = input + self.pad_lo + self.pad_hi;
        (self.stride > 0 && kernel > 0 && padded >= kernel).then(|| (padded - kernel) / self.stride + 1)
    }
}

/// Output-channel count up to which the hand-written kernels beat packed GEMM.
const SKINNY: usize = 8;
/// Output-channel count up to which stride-1 convolutions skip im2col.
const DIRECT_MAX_CO: usize = 32;
/// Column tile of the skinny and direct kernels.
const TILE: usize = 512;

#[inline(always)]
fn axpy<T: Element>(alpha: T, x: &[T], y: &mut [T]) {
    for (y, &x) in y.iter_mut().zip(x) {
        *y += alpha * x;
    }
}

#[inline(always)]
fn dot<T: Element>(a: &[T], b: &[T]) -> T {
    let mut acc = [T::zero(); 8];
    let (ca, cb) = (a.chunks_exact(8), b.chunks_exact(8));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    for (x, y) in ca.zip(cb) {
        for l in 0..8 {
            acc[l] += x[l] * y[l];
        }
    }
    let mut s = T::zero();
    for (x, y) in ra.iter().zip(rb) {
        s += *x * *y;
    }
    acc.iter().fold(s, |a, &b| a + b)
}

/// `out[c, j] = Σ_r w[c, r] · col[r, j]` for `c < co`, `j < pc`; `out` rows are `ld` apart.
fn skinny_forward<T: Element>(w: &[T], co: usize, rows: usize, col: &[T], pc: usize, out: &mut [T], ld: usize) {
    for c in 0..co {
        out[c * ld..c * ld + pc].fill(T::zero());
    }
    for j0 in (0..pc).step_by(TILE) {
        let j1 = (j0 + TILE).min(pc);
        for r in 0..rows {
            let src = &col[r * pc + j0..r * pc + j1];
            for c in 0..co {
                axpy(w[c * rows + r], src, &mut out[c * ld + j0..c * ld + j1]);
            }
        }
    }
}

/// `dw[c, r] += Σ_j g[c, j] · col[r, j]`; `g` rows are `ld` apart.
fn skinny_weight_grad<T: Element>(g: &[T], co: usize, ld: usize, col: &[T], rows: usize, pc: usize, dw: &mut [T]) {
    for r in 0..rows {
        let src = &col[r * pc..(r + 1) * pc];
        for c in 0..co {
            dw[c * rows + r] += dot(&g[c * ld..c * ld + pc], src);
        }
    }
}

/// `col[r, j] = Σ_c w[c, r] · g[c, j]`.
fn skinny_input_grad<T: Element>(w: &[T], co: usize, rows: usize, g: &[T], ld: usize, col: &mut [T], pc: usize) {
    col[..rows * pc].fill(T::zero());
    for j0 in (0..pc).step_by(TILE) {
        let j1 = (j0 + TILE).min(pc);
        for r in 0..rows {
            let dst = &mut col[r * pc + j0..r * pc + j1];
            for c in 0..co {
                axpy(w[c * rows + r], &g[c * ld + j0..c * ld + j1], dst);
            }
        }
    }
}

/// Defines a kernel that runs an AVX2 build of its body when the CPU supports it.
macro_rules! multiversion {
    ($(#[$m:meta])* fn $name:ident<T: Element>($($arg:ident: $ty:ty),* $(,)?) $body:block) => {
        $(#[$m])*
        #[allow(clippy::too_many_arguments)]
        fn $name<T: Element>($($arg: $ty),*) {
            #[inline(always)]
            #[allow(clippy::too_many_arguments)]
            fn portable<T: Element>($($arg: $ty),*) $body
            #[cfg(target_arch = "x86_64")]
            {
                #[target_feature(enable = "avx2")]
                #[allow(clippy::too_many_arguments)]
                unsafe fn avx2<T: Element>($($arg: $ty),*) {
                    portable($($arg),*)
                }
                if std::arch::is_x86_feature_detected!("avx2") {
                    // SAFETY: the feature was detected at runtime.
                    return unsafe { avx2($($arg),*) };
                }
            }
            portable($($arg),*)
        }
    };
}

/// Padded-layout operands shared by the direct kernels.
#[derive(Clone, Copy)]
struct Taps<'a> {
    offs: &'a [usize],
    ci: usize,
    co: usize,
    rows: usize,
    pad_sp: usize,
    len: usize,
}

multiversion! {
    /// `wide[c, j] += Σ_{ci, t} w[c, ci, t] · xp[ci, j + off_t]`.
    fn tap_forward<T: Element>(k: Taps<'_>, w: &[T], xp: &[T], wide: &mut [T]) {
        let taps = k.offs.len();
        for j0 in (0..k.len).step_by(TILE) {
            let j1 = (j0 + TILE).min(k.len);
            for ci in 0..k.ci {
                for (t, &off) in k.offs.iter().enumerate() {
                    let base = ci * k.pad_sp + off;
                    let src = &xp[base + j0..base + j1];
                    for c in 0..k.co {
                        axpy(w[c * k.rows + ci * taps + t], src, &mut wide[c * k.len + j0..c * k.len + j1]);
                    }
                }
            }
        }
    }
}

multiversion! {
    /// `dw[c, ci, t] += Σ_j gw[c, j] · xp[ci, j + off_t]`.
    fn tap_weight_grad<T: Element>(k: Taps<'_>, gw: &[T], xp: &[T], dw: &mut [T]) {
        let taps = k.offs.len();
        for j0 in (0..k.len).step_by(TILE) {
            let j1 = (j0 + TILE).min(k.len);
            for ci in 0..k.ci {
                for (t, &off) in k.offs.iter().enumerate() {
                    let base = ci * k.pad_sp + off;
                    let src = &xp[base + j0..base + j1];
                    for c in 0..k.co {
                        dw[c * k.rows + ci * taps + t] += dot(&gw[c * k.len + j0..c * k.len + j1], src);
                    }
                }
            }
        }
    }
}

multiversion! {
    /// `dxp[ci, j + off_t] += Σ_c w[c, ci, t] · gw[c, j]`.
    fn tap_input_grad<T: Element>(k: Taps<'_>, w: &[T], gw: &[T], dxp: &mut [T]) {
        let taps = k.offs.len();
        for j0 in (0..k.len).step_by(TILE) {
            let j1 = (j0 + TILE).min(k.len);
            for ci in 0..k.ci {
                for (t, &off) in k.offs.iter().enumerate() {
                    let base = ci * k.pad_sp + off;
                    let dst = &mut dxp[base + j0..base + j1];
                    for c in 0..k.co {
                        axpy(w[c * k.rows + ci * taps + t], &gw[c * k.len + j0..c * k.len + j1], dst);
                    }
                }
            }
        }
    }
}

#[derive(Debug, Clone, Copy)]
struct Geometry {
    ci: usize,
    co: usize,
    input: [usize; 3],
    kernel: [usize; 3],
    output: [usize; 3],
    stride: usize,
    lo: usize,
}

impl Geometry {
    fn in_spatial(&self) -> usize {
        self.input.iter().product()
    }

    fn out_spatial(&self) -> usize {
        self.output.iter().product()
    }

    fn rows(&self) -> usize {
        self.ci * self.kernel.iter().product::<usize>()
    }

    fn pointwise(&self) -> bool {
        self.kernel == [1, 1, 1] && self.stride == 1 && self.lo == 0 && self.output == self.input
    }

    fn plane(&self) -> usize {
        self.output[1] * self.output[2]
    }

    fn slices_per_chunk(&self) -> usize {
        (COL_BUDGET / (self.rows() * self.plane()).max(1)).clamp(1, self.output[0].max(1))
    }

    /// Output-width range whose input column `ow·s + c − lo` lies inside `[0, w)`.
    fn valid_ow(&self, c: usize) -> (usize, usize) {
        let (s, lo, w, ow) = (self.stride, self.lo, self.input[2], self.output[2]);
        // ow·s + c ≥ lo  and  ow·s + c − lo < w
        let first = lo.saturating_sub(c).div_ceil(s);
        let last = if w + lo > c { (w + lo - c - 1) / s + 1 } else { 0 };
        (first.min(ow), last.min(ow))
    }

    /// Walks the (row, output slice) lines of the column buffer for slices `d0..d1`,
    /// passing `(line offset, input offset of column 0 or None, c)` where the input
    /// offset is that of `ow = 0` before bounds clipping.
    fn for_each_line(&self, d0: usize, d1: usize, mut f: impl FnMut(usize, Option<isize>, usize)) {
        let [d, h, w] = self.input;
        let [kd, kh, kw] = self.kernel;
        let [_, oh, ow] = self.output;
        let (s, lo) = (self.stride as isize, self.lo as isize);
        let pc = (d1 - d0) * oh * ow;
        let in_sp = self.in_spatial();
        for ci in 0..self.ci {
            for a in 0..kd {
                for b in 0..kh {
                    for c in 0..kw {
                        let row = (((ci * kd + a) * kh + b) * kw + c) * pc;
                        for (k, odi) in (d0..d1).enumerate() {
                            let id = odi as isize * s + a as isize - lo;
                            let id_ok = id >= 0 && id < d as isize;
                            for ohi in 0..oh {
                                let line = row + (k * oh + ohi) * ow;
                                let ih = ohi as isize * s + b as isize - lo;
                                if !id_ok || ih < 0 || ih >= h as isize {
                                    f(line, None, c);
                                    continue;
                                }
                                let base = (ci * in_sp) as isize + (id * h as isize + ih) * w as isize + c as isize - lo;
                                f(line, Some(base), c);
                            }
                        }
                    }
                }
            }
        }
    }

    fn direct(&self) -> bool {
        self.stride == 1 && (self.co <= DIRECT_MAX_CO || self.ci <= SKINNY)
    }

    /// Extents of the zero-padded input seen by a stride-1 convolution.
    fn padded(&self) -> [usize; 3] {
        std::array::from_fn(|i| self.output[i] + self.kernel[i] - 1)
    }

    /// Length of the flattened output run in padded-row layout.
    fn wide_len(&self) -> usize {
        let [_, hp, wp] = self.padded();
        let [od, oh, ow] = self.output;
        ((od - 1) * hp + oh - 1) * wp + ow
    }

    /// Flat offset of every kernel tap in padded layout, in weight-column order within a channel.
    fn tap_offsets(&self) -> Vec<usize> {
        let [_, hp, wp] = self.padded();
        let [kd, kh, kw] = self.kernel;
        let mut offs = Vec::with_capacity(kd * kh * kw);
        for a in 0..kd {
            for b in 0..kh {
                for c in 0..kw {
                    offs.push((a * hp + b) * wp + c);
                }
            }
        }
        offs
    }

    /// Visits matching `(dense, padded)` row starts and the shared row length, mapping
    /// `[d, h, w]` dense extents into a padded grid at offset `shift`.
    fn for_each_row(dense: [usize; 3], padded: [usize; 3], shift: usize, mut f: impl FnMut(usize, usize, usize)) {
        let [d, h, w] = dense;
        let [_, hp, wp] = padded;
        for i in 0..d {
            for j in 0..h {
                f((i * h + j) * w, ((i + shift) * hp + j + shift) * wp + shift, w);
            }
        }
    }

    fn pad_input<T: Element>(&self, x: &[T]) -> Vec<T> {
        let pd = self.padded();
        let (in_sp, pad_sp) = (self.in_spatial(), pd.iter().product::<usize>());
        let mut xp = vec![T::zero(); self.ci * pad_sp];
        for ci in 0..self.ci {
            let (src, dst) = (&x[ci * in_sp..], &mut xp[ci * pad_sp..]);
            Self::for_each_row(self.input, pd, self.lo, |s, d, n| dst[d..d + n].copy_from_slice(&src[s..s + n]));
        }
        xp
    }

    fn taps<'a>(&self, offs: &'a [usize]) -> Taps<'a> {
        Taps { offs, ci: self.ci, co: self.co, rows: self.rows(), pad_sp: self.padded().iter().product(), len: self.wide_len() }
    }

    fn direct_forward<T: Element>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (pd, osp) = (self.padded(), self.out_spatial());
        let offs = self.tap_offsets();
        let k = self.taps(&offs);
        let mut wide = vec![T::zero(); self.co * k.len];
        tap_forward(k, w, &self.pad_input(x), &mut wide);
        for c in 0..self.co {
            let (src, dst) = (&wide[c * k.len..], &mut out[c * osp..]);
            Self::for_each_row(self.output, pd, 0, |d, s, n| dst[d..d + n].copy_from_slice(&src[s..s + n]));
        }
    }

    fn direct_backward<T: Element>(&self, x: &[T], w: &[T], g: &[T], dx: Option<&mut [T]>, dw: Option<&mut [T]>) {
        let (pd, osp) = (self.padded(), self.out_spatial());
        let offs = self.tap_offsets();
        let k = self.taps(&offs);
        let mut gw = vec![T::zero(); self.co * k.len];
        for c in 0..self.co {
            let (src, dst) = (&g[c * osp..], &mut gw[c * k.len..(c + 1) * k.len]);
            Self::for_each_row(self.output, pd, 0, |s, d, n| dst[d..d + n].copy_from_slice(&src[s..s + n]));
        }
        if let Some(dw) = dw {
            tap_weight_grad(k, &gw, &self.pad_input(x), dw);
        }
        if let Some(dx) = dx {
            let mut dxp = vec![T::zero(); self.ci * k.pad_sp];
            tap_input_grad(k, w, &gw, &mut dxp);
            let in_sp = self.in_spatial();
            for ci in 0..self.ci {
                let (src, dst) = (&dxp[ci * k.pad_sp..], &mut dx[ci * in_sp..]);
                Self::for_each_row(self.input, pd, self.lo, |d, s, n| dst[d..d + n].copy_from_slice(&src[s..s + n]));
            }
        }
    }

    fn im2col<T: Element>(&self, x: &[T], d0: usize, d1: usize, col: &mut [T]) {
        let (ow, s) = (self.output[2], self.stride);
        let ranges: Vec<(usize, usize)> = (0..self.kernel[2]).map(|c| self.valid_ow(c)).collect();
        self.for_each_line(d0, d1, |line, base, c| {
            let dst = &mut col[line..line + ow];
            let Some(base) = base else {
                dst.fill(T::zero());
                return;
            };
            let (first, last) = ranges[c];
            dst[..first].fill(T::zero());
            if last > first {
                dst[last..].fill(T::zero());
                let start = (base + (first * s) as isize) as usize;
                if s == 1 {
                    dst[first..last].copy_from_slice(&x[start..start + last - first]);
                } else {
                    for (j, v) in dst[first..last].iter_mut().enumerate() {
                        *v = x[start + j * s];
                    }
                }
            } else {
                dst[first..].fill(T::zero());
            }
        });
    }

    fn col2im<T: Element>(&self, col: &[T], d0: usize, d1: usize, dx: &mut [T]) {
        let s = self.stride;
        let ranges: Vec<(usize, usize)> = (0..self.kernel[2]).map(|c| self.valid_ow(c)).collect();
        self.for_each_line(d0, d1, |line, base, c| {
            let Some(base) = base else { return };
            let (first, last) = ranges[c];
            if last <= first {
                return;
            }
            let src = &col[line + first..line + last];
            let start = (base + (first * s) as isize) as usize;
            if s == 1 {
                for (d, &v) in dx[start..start + src.len()].iter_mut().zip(src) {
                    *d += v;
                }
            } else {
                for (j, &v) in src.iter().enumerate() {
                    dx[start + j * s] += v;
                }
            }
        });
    }

    fn forward_sample<T: Element>(&self, x: &[T], w: &[T], out: &mut [T]) {
        let (rows, osp) = (self.rows(), self.out_spatial());
        if self.direct() {
            self.direct_forward(x, w, out);
            return;
        }
        if self.pointwise() {
            T::gemm(self.co, self.ci, osp, T::one(), w, self.ci as isize, 1, x, osp as isize, 1, T::zero(), out, osp as isize, 1);
            return;
        }
        let spc = self.slices_per_chunk();
        let plane = self.plane();
        let mut col = vec![T::zero(); rows * spc * plane];
        for d0 in (0..self.output[0]).step_by(spc) {
            let d1 = (d0 + spc).min(self.output[0]);
            let pc = (d1 - d0) * plane;
            let col = &mut col[..rows * pc];
            self.im2col(x, d0, d1, col);
            if self.co <= SKINNY {
                skinny_forward(w, self.co, rows, col, pc, &mut out[d0 * plane..], osp);
                continue;
            }
            T::gemm(
                self.co,
                rows,
                pc,
                T::one(),
                w,
                rows as isize,
                1,
                col,
                pc as isize,
                1,
                T::zero(),
                &mut out[d0 * plane..],
                osp as isize,
                1,
            );
        }
    }

    /// Returns `(dx, dw)` for one sample; `dw` is accumulated into the provided buffer.
    fn backward_sample<T: Element>(&self, x: &[T], w: &[T], g: &[T], need_dx: bool, dw: Option<&mut [T]>) -> Option<Vec<T>> {
        let (rows, osp) = (self.rows(), self.out_spatial());
        let mut dx = need_dx.then(|| vec![T::zero(); self.ci * self.in_spatial()]);
        if self.direct() {
            self.direct_backward(x, w, g, dx.as_deref_mut(), dw);
            return dx;
        }
        if self.pointwise() {
            if let Some(dw) = dw {
                T::gemm(self.ci, osp, self.co, T::one(), x, osp as isize, 1, g, 1, osp as isize, T::one(), dw, 1, self.ci as isize);
            }
            if let Some(dx) = dx.as_mut() {
                T::gemm(self.ci, self.co, osp, T::one(), w, 1, self.ci as isize, g, osp as isize, 1, T::zero(), dx, osp as isize, 1);
            }
            return dx;
        }
        let spc = self.slices_per_chunk();
        let plane = self.plane();
        let mut col = vec![T::zero(); rows * spc * plane];
        let mut dw = dw;
        for d0 in (0..self.output[0]).step_by(spc) {
            let d1 = (d0 + spc).min(self.output[0]);
            let pc = (d1 - d0) * plane;
            let col = &mut col[..rows * pc];
            let gc = &g[d0 * plane..];
            if let Some(dw) = dw.as_deref_mut() {
                self.im2col(x, d0, d1, col);
                if self.co <= SKINNY {
                    skinny_weight_grad(gc, self.co, osp, col, rows, pc, dw);
                } else {
                    // dWᵀ += col · gᵀ keeps the large operand row-contiguous.
                    T::gemm(rows, pc, self.co, T::one(), col, pc as isize, 1, gc, 1, osp as isize, T::one(), dw, 1, rows as isize);
                }
            }
            if let Some(dx) = dx.as_mut() {
                if self.co <= SKINNY {
                    skinny_input_grad(w, self.co, rows, gc, osp, col, pc);
                } else {
                    T::gemm(rows, self.co, pc, T::one(), w, 1, rows as isize, gc, osp as isize, 1, T::zero(), col, pc as isize, 1);
                }
                self.col2im(col, d0, d1, dx);
            }
        }
        dx
    }
}

impl<T: Element> Graph<T> {
    /// 3-D cross-correlation of `x: [N, Cin, D, H, W]` with `w: [Cout, Cin, kD, kH, kW]`
    /// plus an optional per-channel `bias: [Cout]`.
    pub fn conv3d(&mut self, x: Var, w: Var, bias: Option<Var>, conv: Conv3d) -> Result<Var, TensorError> {
        let [n, ci, d, h, wd] = dims5(self.shape(x), "conv3d input")?;
        let [co, wci, kd, kh, kw] = dims5(self.shape(w), "conv3d kernel")?;
        if wci != ci {
            return Err(TensorError::ShapeMismatch(format!("conv3d: input has {ci} channels, kernel expects {wci}")));
        }
        if let Some(b) = bias {
            if self.shape(b) != [co] {
                return Err(TensorError::ShapeMismatch(format!("conv3d: bias {:?} for {co} channels", self.shape(b))));
            }
        }
        let extent = |i: usize, k: usize| {
            conv.output_extent(i, k).ok_or_else(|| {
                TensorError::ShapeMismatch(format!("conv3d: kernel {k} does not fit extent {i} with {conv:?}"))
            })
        };
        let geo = Geometry {
            ci,
            co,
            input: [d, h, wd],
            kernel: [kd, kh, kw],
            output: [extent(d, kd)?, extent(h, kh)?, extent(wd, kw)?],
            stride: conv.stride,
            lo: conv.pad_lo,
        };
        let (isz, osz) = (ci * geo.in_spatial(), co * geo.out_spatial());
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * osz];
        out.par_chunks_mut(osz.max(1))
            .enumerate()
            .for_each(|(b, o)| geo.forward_sample(&xv[b * isz..(b + 1) * isz], wv, o));
        if let Some(b) = bias {
            let bv = self.value(b).data();
            let osp = geo.out_spatial();
            for (i, chunk) in out.chunks_mut(osp.max(1)).enumerate() {
                let bb = bv[i % co];
                chunk.iter_mut().for_each(|v| *v += bb);
            }
        }
        let [od, oh, ow] = geo.output;
        let v = Tensor::new(&[n, co, od, oh, ow], out)?;
        let mut parents = vec![x, w];
        parents.extend(bias);
        Ok(self.push(
            "conv3d",
            v,
            &parents,
            Box::new(move |args| {
                let xv = args.parents[0].data();
                let wv = args.parents[1].data();
                let g = args.grad.data();
                let (need_dx, need_dw) = (args.needs[0], args.needs[1]);
                let wlen = wv.len();
                let per_sample: Vec<(Option<Vec<T>>, Option<Vec<T>>)> = (0..n)
                    .into_par_iter()
                    .map(|b| {
                        let mut dw = need_dw.then(|| vec![T::zero(); wlen]);
                        let dx = geo.backward_sample(
                            &xv[b * isz..(b + 1) * isz],
                            wv,
                            &g[b * osz..(b + 1) * osz],
                            need_dx,
                            dw.as_deref_mut(),
                        );
                        (dx, dw)
                    })
                    .collect();
                let mut dx_all = need_dx.then(|| Vec::with_capacity(n * isz));
                let mut dw_all = need_dw.then(|| vec![T::zero(); wlen]);
                for (dx, dw) in per_sample {
                    if let (Some(all), Some(dx)) = (dx_all.as_mut(), dx) {
                        all.extend(dx);
                    }
                    if let (Some(all), Some(dw)) = (dw_all.as_mut(), dw) {
                        for (a, v) in all.iter_mut().zip(dw) {
                            *a += v;
                        }
                    }
                }
                let mut grads = vec![
                    dx_all.map(|d| Tensor::new(args.parents[0].shape(), d).expect("shape")),
                    dw_all.map(|d| Tensor::new(args.parents[1].shape(), d).expect("shape")),
                ];
                if args.parents.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let osp = osz / co.max(1);
                        let mut db = vec![T::zero(); co];
                        for (i, chunk) in g.chunks(osp.max(1)).enumerate() {
                            let mut s = T::zero();
                            for &v in chunk {
                                s += v;
                            }
                            db[i % co] += s;
                        }
                        Tensor::new(&[co], db).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }
}
