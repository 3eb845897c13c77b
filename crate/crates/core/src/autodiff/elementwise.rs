use std::rc::Rc;

use super::Var;
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

fn zip_map<T: Scalar>(a: &Tensor<T>, b: &Tensor<T>, f: impl Fn(T, T) -> T) -> Tensor<T> {
    let data = a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect();
    Tensor::from_parts(a.shape().to_vec(), data)
}

/// `√(2/π)` for the tanh form of GELU.
const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
pub fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    half * x * (T::one() + (c * (x + a * x * x * x)).tanh())
}

fn gelu_grad_scalar<T: Scalar>(x: T) -> T {
    let c = T::from_f64(GELU_SQRT_2_OVER_PI);
    let a = T::from_f64(GELU_CUBIC);
    let half = T::from_f64(0.5);
    let three = T::from_f64(3.0);
    let t = (c * (x + a * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + three * a * x * x)
}

pub fn sigmoid_scalar<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

impl<'t, T: Scalar> Var<'t, T> {
    fn check_same_shape(&self, other: &Var<'t, T>, op: &str) -> Result<()> {
        self.same_tape(other);
        let (a, b) = (self.shape(), other.shape());
        if a != b {
            return Err(dim_err!("{op}: shape mismatch {a:?} vs {b:?}"));
        }
        Ok(())
    }

    #[allow(clippy::should_implement_trait)]
    pub fn add(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&other, "add")?;
        let out = zip_map(&self.value(), &other.value(), |a, b| a + b);
        Ok(self.tape.push(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.clone())]))
    }

    #[allow(clippy::should_implement_trait)]
    pub fn sub(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&other, "sub")?;
        let out = zip_map(&self.value(), &other.value(), |a, b| a - b);
        Ok(self.tape.push(out, &[self, other], |g, _| vec![Some(g.clone()), Some(g.map(|v| -v))]))
    }

    /// Element-wise (Hadamard) product.
    #[allow(clippy::should_implement_trait)]
    pub fn mul(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.check_same_shape(&other, "mul")?;
        let (a, b) = (self.value(), other.value());
        let out = zip_map(&a, &b, |x, y| x * y);
        Ok(self.tape.push(out, &[self, other], move |g, need| {
            vec![need[0].then(|| zip_map(g, &b, |gv, bv| gv * bv)), need[1].then(|| zip_map(g, &a, |gv, av| gv * av))]
        }))
    }

    pub fn scale(self, factor: T) -> Result<Var<'t, T>> {
        let out = self.value().map(|v| v * factor);
        Ok(self.tape.push(out, &[self], move |g, _| vec![Some(g.map(|v| v * factor))]))
    }

    /// Adds `other` to every trailing block of `self`. `other.shape()` must
    /// equal the trailing dimensions of `self.shape()` (e.g. a bias on the last
    /// axis, or a per-head matrix shared across the batch).
    pub fn add_broadcast(self, other: Var<'t, T>) -> Result<Var<'t, T>> {
        self.same_tape(&other);
        let (shape, bshape) = (self.shape(), other.shape());
        if bshape.len() > shape.len() || shape[shape.len() - bshape.len()..] != bshape[..] {
            return Err(dim_err!("add_broadcast: {bshape:?} is not a suffix of {shape:?}"));
        }
        let (a, b) = (self.value(), other.value());
        let block = b.numel();
        let mut data = a.data().to_vec();
        for chunk in data.chunks_mut(block) {
            for (v, &bv) in chunk.iter_mut().zip(b.data()) {
                *v = *v + bv;
            }
        }
        let out = Tensor::from_parts(shape, data);
        Ok(self.tape.push(out, &[self, other], move |g, need| {
            let gb = need[1].then(|| {
                let mut acc = vec![T::zero(); block];
                for chunk in g.data().chunks(block) {
                    for (a, &v) in acc.iter_mut().zip(chunk) {
                        *a = *a + v;
                    }
                }
                Tensor::from_parts(bshape.clone(), acc)
            });
            vec![Some(g.clone()), gb]
        }))
    }

    /// GELU with the tanh approximation.
    pub fn gelu(self) -> Result<Var<'t, T>> {
        let x = self.value();
        let out = x.map(gelu_scalar);
        Ok(self.tape.push(out, &[self], move |g, _| vec![Some(zip_map(g, &x, |gv, xv| gv * gelu_grad_scalar(xv)))]))
    }

    pub fn sigmoid(self) -> Result<Var<'t, T>> {
        let out = Rc::new(self.value().map(sigmoid_scalar));
        let y = Rc::clone(&out);
        Ok(self
            .tape
            .push((*out).clone(), &[self], move |g, _| vec![Some(zip_map(g, &y, |gv, yv| gv * yv * (T::one() - yv)))]))
    }

    /// Replaces entries where `keep` is false by `fill`. Filled positions
    /// receive exactly zero gradient; kept positions pass it through.
    pub fn masked_fill(self, keep: Rc<[bool]>, fill: T) -> Result<Var<'t, T>> {
        let x = self.value();
        if keep.len() != x.numel() {
            return Err(dim_err!("masked_fill: mask has {} entries, tensor has {}", keep.len(), x.numel()));
        }
        let data = x.data().iter().zip(keep.iter()).map(|(&v, &k)| if k { v } else { fill }).collect();
        let out = Tensor::from_parts(x.shape().to_vec(), data);
        let backward = move |g: &Tensor<T>, _: &[bool]| {
            let data = g.data().iter().zip(keep.iter()).map(|(&v, &k)| if k { v } else { T::zero() }).collect();
            vec![Some(Tensor::from_parts(g.shape().to_vec(), data))]
        };
        Ok(self.tape.push(out, &[self], backward))
    }
}
