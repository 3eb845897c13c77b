use super::Var;
use crate::error::{config_err, dim_err, Result};
use crate::kernels::{conv2d_backward, conv2d_forward, ConvGeometry};
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvOptions {
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
}

impl ConvOptions {
    pub const fn new(stride: usize, padding: usize, groups: usize) -> Self {
        ConvOptions { stride, padding, groups }
    }

    /// Stride 1, no padding, dense channel mixing.
    pub const POINTWISE: ConvOptions = ConvOptions::new(1, 0, 1);
}

impl Default for ConvOptions {
    fn default() -> Self {
        ConvOptions::POINTWISE
    }
}

pub(crate) fn geometry(
    input: &[usize],
    weight: &[usize],
    bias: Option<&[usize]>,
    opts: ConvOptions,
) -> Result<ConvGeometry> {
    let &[batch, in_channels, height, width] = input else {
        return Err(dim_err!("conv2d input must be NCHW, got {input:?}"));
    };
    let &[out_channels, in_per_group, kernel_h, kernel_w] = weight else {
        return Err(dim_err!("conv2d weight must be 4-d, got {weight:?}"));
    };
    let ConvOptions { stride, padding, groups } = opts;
    if groups == 0 || stride == 0 {
        return Err(config_err!("conv2d stride and groups must be positive"));
    }
    if in_channels % groups != 0 || out_channels % groups != 0 {
        return Err(config_err!("groups {groups} must divide in ({in_channels}) and out ({out_channels}) channels"));
    }
    if in_per_group != in_channels / groups {
        return Err(dim_err!(
            "weight {weight:?} expects {in_per_group} input channels per group, input has {}",
            in_channels / groups
        ));
    }
    if let Some(b) = bias {
        if b != [out_channels] {
            return Err(dim_err!("conv2d bias must be [{out_channels}], got {b:?}"));
        }
    }
    if height + 2 * padding < kernel_h || width + 2 * padding < kernel_w {
        return Err(dim_err!(
            "{height}×{width} input with padding {padding} is smaller than the {kernel_h}×{kernel_w} kernel"
        ));
    }
    Ok(ConvGeometry {
        batch,
        in_channels,
        height,
        width,
        out_channels,
        kernel_h,
        kernel_w,
        stride,
        padding,
        groups,
        out_h: (height + 2 * padding - kernel_h) / stride + 1,
        out_w: (width + 2 * padding - kernel_w) / stride + 1,
    })
}

impl<'t, T: Scalar> Var<'t, T> {
    /// Zero-padded 2-d cross-correlation over an NCHW tensor.
    pub fn conv2d(self, weight: Var<'t, T>, bias: Option<Var<'t, T>>, opts: ConvOptions) -> Result<Var<'t, T>> {
        self.same_tape(&weight);
        let x = self.value();
        let w = weight.value();
        let b = bias.map(|b| b.value());
        let geo = geometry(x.shape(), w.shape(), b.as_ref().map(|b| b.shape()), opts)?;
        let out = conv2d_forward(&geo, x.data(), w.data(), b.as_ref().map(|b| b.data()));
        let out = Tensor::from_parts(vec![geo.batch, geo.out_channels, geo.out_h, geo.out_w], out);

        let mut parents = vec![self, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        Ok(self.tape.push(out, &parents, move |g, need| {
            let grads = conv2d_backward(&geo, x.data(), w.data(), g.data(), need[0], need[1], has_bias && need[2]);
            let mut res = vec![
                grads.input.map(|d| Tensor::from_parts(x.shape().to_vec(), d)),
                grads.weight.map(|d| Tensor::from_parts(w.shape().to_vec(), d)),
            ];
            if has_bias {
                res.push(grads.bias.map(|d| Tensor::from_parts(vec![geo.out_channels], d)));
            }
            res
        }))
    }
}
