use super::Var;
use crate::error::{dim_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    /// Mean softmax cross-entropy of `N×K` logits against integer labels.
    pub fn cross_entropy(self, labels: &[usize]) -> Result<Var<'t, T>> {
        let x = self.value();
        let &[n, k] = x.shape() else {
            return Err(dim_err!("cross_entropy expects N×K logits, got {:?}", x.shape()));
        };
        if labels.len() != n {
            return Err(dim_err!("{} labels for {n} rows", labels.len()));
        }
        if let Some(&bad) = labels.iter().find(|&&l| l >= k) {
            return Err(Error::Contract(format!("label {bad} out of range for {k} classes")));
        }
        let mut probs = vec![T::zero(); n * k];
        let mut total = T::zero();
        for (i, (row, p)) in x.data().chunks(k).zip(probs.chunks_mut(k)).enumerate() {
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let mut sum = T::zero();
            for (pv, &v) in p.iter_mut().zip(row) {
                *pv = (v - max).exp();
                sum = sum + *pv;
            }
            for pv in p.iter_mut() {
                *pv = *pv / sum;
            }
            total = total + (sum.ln() + max - row[labels[i]]);
        }
        let inv_n = T::one() / T::from_usize(n);
        let labels = labels.to_vec();
        Ok(self.tape.push(Tensor::scalar(total * inv_n), &[self], move |g, _| {
            let scale = g.data()[0] * inv_n;
            let mut gx = probs.clone();
            for (i, &l) in labels.iter().enumerate() {
                gx[i * k + l] = gx[i * k + l] - T::one();
            }
            for v in gx.iter_mut() {
                *v = *v * scale;
            }
            vec![Some(Tensor::from_parts(vec![n, k], gx))]
        }))
    }
}
