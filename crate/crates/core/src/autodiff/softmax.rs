use super::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    /// Max-subtracted softmax over the last axis. `-∞` entries map to exactly
    /// zero and receive zero gradient; a row with no finite entry is an error.
    pub fn softmax_rows(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let cols = *x.shape().last().ok_or_else(|| dim_err!("softmax of a rank-0 tensor"))?;
        let mut out = vec![T::zero(); x.numel()];
        for (row, (src, dst)) in x.data().chunks(cols).zip(out.chunks_mut(cols)).enumerate() {
            let max = src.iter().copied().fold(T::neg_infinity(), T::max);
            if max == T::neg_infinity() {
                return Err(Error::DegenerateRow { row });
            }
            let mut sum = T::zero();
            for (d, &s) in dst.iter_mut().zip(src) {
                *d = (s - max).exp();
                sum = sum + *d;
            }
            let inv = T::one() / sum;
            for d in dst.iter_mut() {
                *d = *d * inv;
            }
        }
        let y = Tensor::from_parts(x.shape().to_vec(), out);
        let saved = y.clone();
        Ok(self.tape.push(y, &[self], move |g, _| {
            let mut gx = vec![T::zero(); g.numel()];
            let rows = g.data().chunks(cols).zip(saved.data().chunks(cols));
            for ((gr, yr), dst) in rows.zip(gx.chunks_mut(cols)) {
                let dot = gr.iter().zip(yr).fold(T::zero(), |s, (&a, &b)| s + a * b);
                for ((d, &gv), &yv) in dst.iter_mut().zip(gr).zip(yr) {
                    *d = yv * (gv - dot);
                }
            }
            vec![Some(Tensor::from_parts(g.shape().to_vec(), gx))]
        }))
    }
}
