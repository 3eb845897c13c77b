//! Plain-slice numeric kernels shared by the differentiable ops.
//!
//! All matrices are dense row-major. Loop orders keep the innermost loop
//! contiguous so the compiler can vectorize it.

use crate::tensor::Scalar;

/// `c[m×n] += a[m×k] · b[k×n]`
pub fn gemm_nn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= k * n && c.len() >= m * n);
    for i in 0..m {
        let c_row = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let b_row = &b[p * n..(p + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Dot product with eight independent partial sums so the loop vectorizes.
pub fn dot<T: Scalar>(a: &[T], b: &[T]) -> T {
    const LANES: usize = 8;
    let n = a.len().min(b.len());
    let (a, b) = (&a[..n], &b[..n]);
    let mut acc = [T::zero(); LANES];
    let (ac, bc) = (a.chunks_exact(LANES), b.chunks_exact(LANES));
    let (ar, br) = (ac.remainder(), bc.remainder());
    for (x, y) in ac.zip(bc) {
        for l in 0..LANES {
            acc[l] = acc[l] + x[l] * y[l];
        }
    }
    let tail = ar.iter().zip(br).fold(T::zero(), |s, (&x, &y)| s + x * y);
    acc.iter().fold(tail, |s, &v| s + v)
}

/// `c[m×n] += a[m×k] · b[n×k]ᵀ`
pub fn gemm_nt<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= m * k && b.len() >= n * k && c.len() >= m * n);
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let b_row = &b[j * k..(j + 1) * k];
            c[i * n + j] = c[i * n + j] + dot(a_row, b_row);
        }
    }
}

/// `c[m×n] += a[k×m]ᵀ · b[k×n]`
pub fn gemm_tn<T: Scalar>(m: usize, n: usize, k: usize, a: &[T], b: &[T], c: &mut [T]) {
    debug_assert!(a.len() >= k * m && b.len() >= k * n && c.len() >= m * n);
    for p in 0..k {
        let b_row = &b[p * n..(p + 1) * n];
        for i in 0..m {
            let av = a[p * m + i];
            let c_row = &mut c[i * n..(i + 1) * n];
            for (cv, &bv) in c_row.iter_mut().zip(b_row) {
                *cv = *cv + av * bv;
            }
        }
    }
}

/// Geometry of a 2-d cross-correlation over an NCHW batch.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ConvGeometry {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub groups: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeometry {
    pub fn in_per_group(&self) -> usize {
        self.in_channels / self.groups
    }

    pub fn out_per_group(&self) -> usize {
        self.out_channels / self.groups
    }

    /// Rows of the unfolded patch matrix for one group.
    pub fn patch_len(&self) -> usize {
        self.in_per_group() * self.kernel_h * self.kernel_w
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    fn is_pointwise(&self) -> bool {
        self.kernel_h == 1 && self.kernel_w == 1 && self.stride == 1 && self.padding == 0
    }

    fn is_depthwise(&self) -> bool {
        self.groups == self.in_channels && self.groups == self.out_channels && self.stride == 1
    }
}

/// Output positions `o` whose input index `o·stride + offset − padding` lies
/// in `[0, len)`.
fn valid_range(out_len: usize, len: usize, stride: usize, offset: usize, padding: usize) -> (usize, usize) {
    let lo = padding.saturating_sub(offset).div_ceil(stride);
    let hi = if len + padding > offset { (len + padding - offset - 1) / stride + 1 } else { 0 };
    let hi = hi.min(out_len);
    (lo.min(hi), hi)
}

/// Unfolds channels `[c0, c0 + in_per_group)` of one sample into a
/// `patch_len × out_pixels` matrix.
fn im2col<T: Scalar>(g: &ConvGeometry, sample: &[T], c0: usize, col: &mut [T]) {
    let p = g.out_pixels();
    let plane_len = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &sample[(c0 + c) * plane_len..(c0 + c + 1) * plane_len];
        for ki in 0..g.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.height, g.stride, ki, g.padding);
            for kj in 0..g.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.width, g.stride, kj, g.padding);
                let dst = &mut col[row * p..(row + 1) * p];
                dst.fill(T::zero());
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.padding;
                    let src = &plane[iy * g.width..(iy + 1) * g.width];
                    let dst_row = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let ix0 = xlo * g.stride + kj - g.padding;
                    for (d, ox) in dst_row[xlo..xhi].iter_mut().zip(0..) {
                        *d = src[ix0 + ox * g.stride];
                    }
                }
                row += 1;
            }
        }
    }
}

/// Adjoint of [`im2col`]: scatters a patch matrix back onto the input planes.
fn col2im_add<T: Scalar>(g: &ConvGeometry, col: &[T], c0: usize, sample: &mut [T]) {
    let p = g.out_pixels();
    let plane_len = g.height * g.width;
    let mut row = 0;
    for c in 0..g.in_per_group() {
        let plane = &mut sample[(c0 + c) * plane_len..(c0 + c + 1) * plane_len];
        for ki in 0..g.kernel_h {
            let (ylo, yhi) = valid_range(g.out_h, g.height, g.stride, ki, g.padding);
            for kj in 0..g.kernel_w {
                let (xlo, xhi) = valid_range(g.out_w, g.width, g.stride, kj, g.padding);
                let src = &col[row * p..(row + 1) * p];
                for oy in ylo..yhi {
                    let iy = oy * g.stride + ki - g.padding;
                    let dst = &mut plane[iy * g.width..(iy + 1) * g.width];
                    let src_row = &src[oy * g.out_w..(oy + 1) * g.out_w];
                    let ix0 = xlo * g.stride + kj - g.padding;
                    for (&v, ox) in src_row[xlo..xhi].iter().zip(0..) {
                        let ix = ix0 + ox * g.stride;
                        dst[ix] = dst[ix] + v;
                    }
                }
                row += 1;
            }
        }
    }
}

/// Calls `f(out_row_range, in_row_slice_start, weight_index, oy, iy)` for every
/// kernel tap and output row of a single-channel stride-1 correlation, with
/// the column range already clipped to valid input positions.
fn depthwise_taps(g: &ConvGeometry, mut f: impl FnMut(usize, usize, usize, usize, usize)) {
    for ki in 0..g.kernel_h {
        let (ylo, yhi) = valid_range(g.out_h, g.height, 1, ki, g.padding);
        for kj in 0..g.kernel_w {
            let (xlo, xhi) = valid_range(g.out_w, g.width, 1, kj, g.padding);
            if xlo >= xhi {
                continue;
            }
            for oy in ylo..yhi {
                let iy = oy + ki - g.padding;
                f(xlo, xhi, ki * g.kernel_w + kj, oy, iy * g.width + xlo + kj - g.padding);
            }
        }
    }
}

fn depthwise_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], out: &mut [T]) {
    let (plane_in, plane_out, taps) = (g.height * g.width, g.out_pixels(), g.kernel_h * g.kernel_w);
    for nc in 0..g.batch * g.in_channels {
        let c = nc % g.in_channels;
        let src = &input[nc * plane_in..(nc + 1) * plane_in];
        let dst = &mut out[nc * plane_out..(nc + 1) * plane_out];
        let w = &weight[c * taps..(c + 1) * taps];
        depthwise_taps(g, |xlo, xhi, t, oy, i0| {
            let wv = w[t];
            let row = &mut dst[oy * g.out_w + xlo..oy * g.out_w + xhi];
            for (d, &x) in row.iter_mut().zip(&src[i0..i0 + (xhi - xlo)]) {
                *d = *d + wv * x;
            }
        });
    }
}

fn depthwise_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    mut gx: Option<&mut [T]>,
    mut gw: Option<&mut [T]>,
) {
    let (plane_in, plane_out, taps) = (g.height * g.width, g.out_pixels(), g.kernel_h * g.kernel_w);
    for nc in 0..g.batch * g.in_channels {
        let c = nc % g.in_channels;
        let src = &input[nc * plane_in..(nc + 1) * plane_in];
        let gout = &grad_out[nc * plane_out..(nc + 1) * plane_out];
        let w = &weight[c * taps..(c + 1) * taps];
        let mut gx_plane = gx.as_deref_mut().map(|gx| &mut gx[nc * plane_in..(nc + 1) * plane_in]);
        let mut gw_c = gw.as_deref_mut().map(|gw| &mut gw[c * taps..(c + 1) * taps]);
        depthwise_taps(g, |xlo, xhi, t, oy, i0| {
            let go = &gout[oy * g.out_w + xlo..oy * g.out_w + xhi];
            let len = xhi - xlo;
            if let Some(gw) = gw_c.as_deref_mut() {
                gw[t] = gw[t] + dot(go, &src[i0..i0 + len]);
            }
            if let Some(gx) = gx_plane.as_deref_mut() {
                let wv = w[t];
                for (d, &v) in gx[i0..i0 + len].iter_mut().zip(go) {
                    *d = *d + wv * v;
                }
            }
        });
    }
}

fn add_bias<T: Scalar>(g: &ConvGeometry, out: &mut [T], bias: &[T]) {
    let p = g.out_pixels();
    for (i, plane) in out.chunks_exact_mut(p).enumerate() {
        let bv = bias[i % g.out_channels];
        plane.iter_mut().for_each(|v| *v = *v + bv);
    }
}

pub fn conv2d_forward<T: Scalar>(g: &ConvGeometry, input: &[T], weight: &[T], bias: Option<&[T]>) -> Vec<T> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * p;
    let mut out = vec![T::zero(); g.batch * out_size];
    if g.is_depthwise() {
        depthwise_forward(g, input, weight, &mut out);
        if let Some(b) = bias {
            add_bias(g, &mut out, b);
        }
        return out;
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    for n in 0..g.batch {
        let sample = &input[n * in_size..(n + 1) * in_size];
        let out_sample = &mut out[n * out_size..(n + 1) * out_size];
        for grp in 0..g.groups {
            let c0 = grp * g.in_per_group();
            let o0 = grp * g.out_per_group();
            let patches: &[T] = if g.is_pointwise() {
                &sample[c0 * p..(c0 + g.in_per_group()) * p]
            } else {
                im2col(g, sample, c0, &mut col);
                &col
            };
            let w = &weight[o0 * k..(o0 + g.out_per_group()) * k];
            let dst = &mut out_sample[o0 * p..(o0 + g.out_per_group()) * p];
            gemm_nn(g.out_per_group(), p, k, w, patches, dst);
        }
    }
    if let Some(b) = bias {
        add_bias(g, &mut out, b);
    }
    out
}

/// Gradients of a convolution. Each entry of the result is `None` when the
/// corresponding `need_*` flag is false.
pub struct ConvGrads<T> {
    pub input: Option<Vec<T>>,
    pub weight: Option<Vec<T>>,
    pub bias: Option<Vec<T>>,
}

pub fn conv2d_backward<T: Scalar>(
    g: &ConvGeometry,
    input: &[T],
    weight: &[T],
    grad_out: &[T],
    need_input: bool,
    need_weight: bool,
    need_bias: bool,
) -> ConvGrads<T> {
    let p = g.out_pixels();
    let k = g.patch_len();
    let in_size = g.in_channels * g.height * g.width;
    let out_size = g.out_channels * p;
    let mut gx = need_input.then(|| vec![T::zero(); input.len()]);
    let mut gw = need_weight.then(|| vec![T::zero(); weight.len()]);
    let mut gb = need_bias.then(|| vec![T::zero(); g.out_channels]);
    if let Some(gb) = gb.as_mut() {
        for (i, plane) in grad_out.chunks_exact(p).enumerate() {
            let o = i % g.out_channels;
            gb[o] = gb[o] + plane.iter().copied().sum::<T>();
        }
    }
    if g.is_depthwise() {
        depthwise_backward(g, input, weight, grad_out, gx.as_deref_mut(), gw.as_deref_mut());
        return ConvGrads { input: gx, weight: gw, bias: gb };
    }
    let mut col = if g.is_pointwise() { Vec::new() } else { vec![T::zero(); k * p] };
    let mut gcol = vec![T::zero(); k * p];

    for n in 0..g.batch {
        let sample = &input[n * in_size..(n + 1) * in_size];
        let gout = &grad_out[n * out_size..(n + 1) * out_size];
        for grp in 0..g.groups {
            let c0 = grp * g.in_per_group();
            let o0 = grp * g.out_per_group();
            let opg = g.out_per_group();
            let gout_g = &gout[o0 * p..(o0 + opg) * p];
            if let Some(gw) = gw.as_mut() {
                let patches: &[T] = if g.is_pointwise() {
                    &sample[c0 * p..(c0 + g.in_per_group()) * p]
                } else {
                    im2col(g, sample, c0, &mut col);
                    &col
                };
                gemm_nt(opg, k, p, gout_g, patches, &mut gw[o0 * k..(o0 + opg) * k]);
            }
            if let Some(gx) = gx.as_mut() {
                let w = &weight[o0 * k..(o0 + opg) * k];
                let gx_sample = &mut gx[n * in_size..(n + 1) * in_size];
                if g.is_pointwise() {
                    let dst = &mut gx_sample[c0 * p..(c0 + g.in_per_group()) * p];
                    gemm_tn(k, p, opg, w, gout_g, dst);
                } else {
                    gcol.fill(T::zero());
                    gemm_tn(k, p, opg, w, gout_g, &mut gcol);
                    col2im_add(g, &gcol, c0, gx_sample);
                }
            }
        }
    }
    ConvGrads { input: gx, weight: gw, bias: gb }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gemm_variants_agree() {
        let a: Vec<f64> = (0..6).map(|v| v as f64 * 0.5 - 1.0).collect(); // 2×3
        let b: Vec<f64> = (0..12).map(|v| (v as f64).sin()).collect(); // 3×4
        let mut c = vec![0.0; 8];
        gemm_nn(2, 4, 3, &a, &b, &mut c);

        let mut bt = vec![0.0; 12];
        for i in 0..3 {
            for j in 0..4 {
                bt[j * 3 + i] = b[i * 4 + j];
            }
        }
        let mut c2 = vec![0.0; 8];
        gemm_nt(2, 4, 3, &a, &bt, &mut c2);

        let mut at = vec![0.0; 6];
        for i in 0..2 {
            for j in 0..3 {
                at[j * 2 + i] = a[i * 3 + j];
            }
        }
        let mut c3 = vec![0.0; 8];
        gemm_tn(2, 4, 3, &at, &b, &mut c3);

        for i in 0..8 {
            assert!((c[i] - c2[i]).abs() < 1e-12);
            assert!((c[i] - c3[i]).abs() < 1e-12);
        }
    }
}
