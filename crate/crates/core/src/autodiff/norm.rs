use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    /// Layer normalization across the channel axis of an NCHW tensor, applied
    /// independently at every spatial position, followed by a per-channel
    /// affine transform.
    pub fn layer_norm_channels(self, gamma: Var<'t, T>, beta: Var<'t, T>, eps: f64) -> Result<Var<'t, T>> {
        self.same_tape(&gamma);
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let (gv, bv) = (gamma.value(), beta.value());
        if gv.shape() != [c] || bv.shape() != [c] {
            return Err(dim_err!("layer norm affine params must be [{c}], got {:?} and {:?}", gv.shape(), bv.shape()));
        }
        let hw = h * w;
        let eps = T::from_f64(eps);
        let inv_c = T::one() / T::from_usize(c);
        let xd = x.data();
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); n * hw];
        let mut out = vec![T::zero(); xd.len()];
        for b in 0..n {
            let base = b * c * hw;
            for p in 0..hw {
                let mean = (0..c).map(|ch| xd[base + ch * hw + p]).sum::<T>() * inv_c;
                let var = (0..c)
                    .map(|ch| {
                        let d = xd[base + ch * hw + p] - mean;
                        d * d
                    })
                    .sum::<T>()
                    * inv_c;
                let is = T::one() / (var + eps).sqrt();
                inv_std[b * hw + p] = is;
                for ch in 0..c {
                    let i = base + ch * hw + p;
                    let xh = (xd[i] - mean) * is;
                    xhat[i] = xh;
                    out[i] = gv.data()[ch] * xh + bv.data()[ch];
                }
            }
        }
        let out = Tensor::from_parts(x.shape().to_vec(), out);
        Ok(self.tape.push(out, &[self, gamma, beta], move |g, need| {
            let gd = g.data();
            let gx = need[0].then(|| {
                let mut gx = vec![T::zero(); gd.len()];
                for b in 0..n {
                    let base = b * c * hw;
                    for p in 0..hw {
                        let mut sum_g = T::zero();
                        let mut sum_gx = T::zero();
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let gh = gd[i] * gv.data()[ch];
                            sum_g = sum_g + gh;
                            sum_gx = sum_gx + gh * xhat[i];
                        }
                        let is = inv_std[b * hw + p];
                        for ch in 0..c {
                            let i = base + ch * hw + p;
                            let gh = gd[i] * gv.data()[ch];
                            gx[i] = is * (gh - inv_c * sum_g - xhat[i] * inv_c * sum_gx);
                        }
                    }
                }
                Tensor::from_parts(vec![n, c, h, w], gx)
            });
            let per_channel = |f: &dyn Fn(usize) -> T| {
                let mut acc = vec![T::zero(); c];
                for b in 0..n {
                    for (ch, a) in acc.iter_mut().enumerate() {
                        let base = (b * c + ch) * hw;
                        for i in base..base + hw {
                            *a = *a + f(i);
                        }
                    }
                }
                Tensor::from_parts(vec![c], acc)
            };
            let ggamma = need[1].then(|| per_channel(&|i| gd[i] * xhat[i]));
            let gbeta = need[2].then(|| per_channel(&|i| gd[i]));
            vec![gx, ggamma, gbeta]
        }))
    }
}
