use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

impl<'t, T: Scalar> Var<'t, T> {
    pub fn sum_all(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(dim_err!("sum of an empty tensor"));
        }
        let shape = x.shape().to_vec();
        Ok(self
            .tape
            .push(Tensor::scalar(x.sum()), &[self], move |g, _| vec![Some(Tensor::full(shape.clone(), g.data()[0]))]))
    }

    pub fn mean_all(self) -> Result<Var<'t, T>> {
        let x = self.value();
        if x.numel() == 0 {
            return Err(dim_err!("mean of an empty tensor"));
        }
        let inv = T::one() / T::from_usize(x.numel());
        let shape = x.shape().to_vec();
        Ok(self.tape.push(Tensor::scalar(x.sum() * inv), &[self], move |g, _| {
            vec![Some(Tensor::full(shape.clone(), g.data()[0] * inv))]
        }))
    }

    /// Averages each channel over its spatial extent: `N×C×H×W → N×C`.
    pub fn global_avg_pool(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let (n, c, h, w) = x.dims4()?;
        let hw = h * w;
        let inv = T::one() / T::from_usize(hw);
        let out: Vec<T> = x.data().chunks(hw).map(|plane| plane.iter().copied().sum::<T>() * inv).collect();
        Ok(self.tape.push(Tensor::from_parts(vec![n, c], out), &[self], move |g, _| {
            let mut gx = Vec::with_capacity(n * c * hw);
            for &gv in g.data() {
                gx.extend(std::iter::repeat_n(gv * inv, hw));
            }
            vec![Some(Tensor::from_parts(vec![n, c, h, w], gx))]
        }))
    }
}
