use crate::element::Element;
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;
use crate::TensorError;

impl<T: Element> Graph<T> {
    /// `x · wᵀ + b` for `x: [N, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var, TensorError> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(TensorError::ShapeMismatch(format!("linear: input {xs:?}, weight {ws:?}")));
        }
        let (n, fin, fout) = (xs[0], xs[1], ws[0]);
        if let Some(b) = b {
            if self.shape(b) != [fout] {
                return Err(TensorError::ShapeMismatch(format!("linear: bias {:?} for {fout} outputs", self.shape(b))));
            }
        }
        let mut out = vec![T::zero(); n * fout];
        let (xv, wv) = (self.value(x).data(), self.value(w).data());
        T::gemm(n, fin, fout, T::one(), xv, fin as isize, 1, wv, 1, fin as isize, T::zero(), &mut out, fout as isize, 1);
        if let Some(b) = b {
            let bv = self.value(b).data();
            for row in out.chunks_mut(fout.max(1)) {
                for (o, &bb) in row.iter_mut().zip(bv) {
                    *o += bb;
                }
            }
        }
        let v = Tensor::new(&[n, fout], out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        Ok(self.push(
            "linear",
            v,
            &parents,
            Box::new(move |args| {
                let g = args.grad.data();
                let (xv, wv) = (args.parents[0].data(), args.parents[1].data());
                let dx = args.needs[0].then(|| {
                    let mut d = vec![T::zero(); n * fin];
                    T::gemm(n, fout, fin, T::one(), g, fout as isize, 1, wv, fin as isize, 1, T::zero(), &mut d, fin as isize, 1);
                    Tensor::new(&[n, fin], d).expect("shape")
                });
                let dw = args.needs[1].then(|| {
                    let mut d = vec![T::zero(); fout * fin];
                    T::gemm(fout, n, fin, T::one(), g, 1, fout as isize, xv, fin as isize, 1, T::zero(), &mut d, fin as isize, 1);
                    Tensor::new(&[fout, fin], d).expect("shape")
                });
                let mut grads = vec![dx, dw];
                if args.parents.len() == 3 {
                    grads.push(args.needs[2].then(|| {
                        let mut d = vec![T::zero(); fout];
                        for row in g.chunks(fout.max(1)) {
                            for (acc, &v) in d.iter_mut().zip(row) {
                                *acc += v;
                            }
                        }
                        Tensor::new(&[fout], d).expect("shape")
                    }));
                }
                grads
            }),
        ))
    }
}
