use super::{Tape, Var};
use crate::error::{dim_err, Result};
use crate::tensor::{Scalar, Tensor};

/// Swaps two axes of a row-major buffer.
fn swap_axes<T: Scalar>(src: &Tensor<T>, d0: usize, d1: usize) -> Tensor<T> {
    let shape = src.shape();
    let mut out_shape = shape.to_vec();
    out_shape.swap(d0, d1);
    let ndim = shape.len();
    let mut in_strides = vec![1; ndim];
    for i in (0..ndim.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let mut strides = in_strides.clone();
    strides.swap(d0, d1);

    let mut data = Vec::with_capacity(src.numel());
    let mut idx = vec![0usize; ndim];
    let values = src.data();
    for _ in 0..src.numel() {
        let off: usize = idx.iter().zip(&strides).map(|(i, s)| i * s).sum();
        data.push(values[off]);
        for ax in (0..ndim).rev() {
            idx[ax] += 1;
            if idx[ax] < out_shape[ax] {
                break;
            }
            idx[ax] = 0;
        }
    }
    Tensor::from_parts(out_shape, data)
}

/// `(outer, axis_len, inner)` decomposition around `axis`.
fn split_dims(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn narrow_values<T: Scalar>(src: &Tensor<T>, axis: usize, start: usize, len: usize) -> Tensor<T> {
    let (outer, full, inner) = split_dims(src.shape(), axis);
    let mut data = Vec::with_capacity(outer * len * inner);
    for o in 0..outer {
        let base = o * full * inner;
        data.extend_from_slice(&src.data()[base + start * inner..base + (start + len) * inner]);
    }
    let mut shape = src.shape().to_vec();
    shape[axis] = len;
    Tensor::from_parts(shape, data)
}

fn concat_values<T: Scalar>(parts: &[&Tensor<T>], axis: usize) -> Tensor<T> {
    let mut shape = parts[0].shape().to_vec();
    shape[axis] = parts.iter().map(|p| p.shape()[axis]).sum();
    let (outer, _, inner) = split_dims(&shape, axis);
    let mut data = Vec::with_capacity(shape.iter().product());
    for o in 0..outer {
        for p in parts {
            let chunk = p.shape()[axis] * inner;
            data.extend_from_slice(&p.data()[o * chunk..(o + 1) * chunk]);
        }
    }
    Tensor::from_parts(shape, data)
}

impl<'t, T: Scalar> Var<'t, T> {
    pub fn reshape(self, shape: impl Into<Vec<usize>>) -> Result<Var<'t, T>> {
        let shape = shape.into();
        let x = self.value();
        let out = x.reshape(shape)?;
        let in_shape = x.shape().to_vec();
        Ok(self
            .tape
            .push(out, &[self], move |g, _| vec![Some(Tensor::from_parts(in_shape.clone(), g.data().to_vec()))]))
    }

    /// Swaps axes `d0` and `d1`.
    pub fn transpose(self, d0: usize, d1: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if d0 >= x.ndim() || d1 >= x.ndim() {
            return Err(dim_err!("transpose({d0}, {d1}) on rank-{} tensor", x.ndim()));
        }
        let out = swap_axes(&x, d0, d1);
        Ok(self.tape.push(out, &[self], move |g, _| vec![Some(swap_axes(g, d0, d1))]))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(self, axis: usize, start: usize, len: usize) -> Result<Var<'t, T>> {
        let x = self.value();
        if axis >= x.ndim() || len == 0 || start + len > x.shape()[axis] {
            return Err(dim_err!("narrow(axis {axis}, {start}..{}) out of range for {:?}", start + len, x.shape()));
        }
        let out = narrow_values(&x, axis, start, len);
        let in_shape = x.shape().to_vec();
        Ok(self.tape.push(out, &[self], move |g, _| {
            let (outer, full, inner) = split_dims(&in_shape, axis);
            let mut data = vec![T::zero(); outer * full * inner];
            for o in 0..outer {
                let dst = o * full * inner + start * inner;
                data[dst..dst + len * inner].copy_from_slice(&g.data()[o * len * inner..(o + 1) * len * inner]);
            }
            vec![Some(Tensor::from_parts(in_shape.clone(), data))]
        }))
    }

    /// Splits axis 1 into consecutive groups of the given sizes. Zero sizes are
    /// not allowed; sizes must sum to the channel count.
    pub fn split_channels(self, sizes: &[usize]) -> Result<Vec<Var<'t, T>>> {
        let shape = self.shape();
        if shape.len() < 2 {
            return Err(dim_err!("split_channels needs rank ≥ 2, got {shape:?}"));
        }
        if sizes.iter().sum::<usize>() != shape[1] {
            return Err(dim_err!("split sizes {sizes:?} do not sum to {} channels", shape[1]));
        }
        let mut start = 0;
        sizes
            .iter()
            .map(|&len| {
                let part = self.narrow(1, start, len);
                start += len;
                part
            })
            .collect()
    }

    /// Concatenates along axis 1; all other dimensions must agree.
    pub fn concat_channels(parts: &[Var<'t, T>]) -> Result<Var<'t, T>> {
        Self::concat(parts, 1)
    }

    pub fn concat(parts: &[Var<'t, T>], axis: usize) -> Result<Var<'t, T>> {
        let first = parts.first().ok_or_else(|| dim_err!("concat of zero tensors"))?;
        let tape: &'t Tape<T> = first.tape;
        let values: Vec<_> = parts.iter().map(|p| p.value()).collect();
        let ref_shape = values[0].shape();
        if axis >= ref_shape.len() {
            return Err(dim_err!("concat axis {axis} on rank-{} tensors", ref_shape.len()));
        }
        for v in &values[1..] {
            let s = v.shape();
            let compatible = s.len() == ref_shape.len()
                && s.iter().zip(ref_shape).enumerate().all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(dim_err!("concat: {s:?} incompatible with {ref_shape:?}"));
            }
        }
        let refs: Vec<&Tensor<T>> = values.iter().map(|v| v.as_ref()).collect();
        let out = concat_values(&refs, axis);
        let sizes: Vec<usize> = values.iter().map(|v| v.shape()[axis]).collect();
        let part_shapes: Vec<Vec<usize>> = values.iter().map(|v| v.shape().to_vec()).collect();
        Ok(tape.push(out, parts, move |g, need| {
            let mut start = 0;
            sizes
                .iter()
                .zip(&part_shapes)
                .zip(need)
                .map(|((&len, shape), &n)| {
                    let piece = n.then(|| {
                        let t = narrow_values(g, axis, start, len);
                        debug_assert_eq!(t.shape(), shape.as_slice());
                        t
                    });
                    start += len;
                    piece
                })
                .collect()
        }))
    }
}
