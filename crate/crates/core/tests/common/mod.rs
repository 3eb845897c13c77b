//! Straight-line reference implementations used as test oracles. Everything
//! is plain nested loops over `f64`, independent of the tape and kernels.
#![allow(dead_code)]

use fraesormer_core::attention::TopKMode;
use fraesormer_core::nn::ModuleBuilder;
use fraesormer_core::{AttentionConfig, HssfgnConfig, MaskMode, ParamStore, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const LN_EPS: f64 = 1e-6;

pub fn random(shape: &[usize], scale: f64, rng: &mut ChaCha8Rng) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect()).unwrap()
}

/// Overwrites every parameter with uniform values in `[-scale, scale)`.
pub fn randomize(store: &mut ParamStore<f64>, scale: f64, seed: u64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in store.iter_mut() {
        p.value.data_mut().iter_mut().for_each(|v| *v = rng.random_range(-scale..scale));
    }
}

pub fn build<M>(seed: u64, f: impl FnOnce(&mut ModuleBuilder<'_, f64>) -> M) -> (ParamStore<f64>, M) {
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let m = f(&mut ModuleBuilder::new(&mut store, &mut layers, &mut rng));
    (store, m)
}

pub fn param<'a>(store: &'a ParamStore<f64>, name: &str) -> &'a Tensor<f64> {
    store.by_name(name).unwrap_or_else(|| panic!("missing parameter {name}"))
}

pub fn max_rel_diff(a: &Tensor<f64>, b: &Tensor<f64>) -> f64 {
    assert_eq!(a.shape(), b.shape());
    let scale = a.data().iter().fold(1e-12f64, |m, v| m.max(v.abs()));
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max) / scale
}

pub fn conv(
    x: &Tensor<f64>,
    w: &Tensor<f64>,
    b: Option<&Tensor<f64>>,
    stride: usize,
    pad: usize,
    groups: usize,
) -> Tensor<f64> {
    let [n, c, h, wd] = x.shape().try_into().unwrap();
    let [co, cig, kh, kw] = w.shape().try_into().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let cog = co / groups;
    assert_eq!(cig * groups, c);
    let mut out = vec![0.0; n * co * oh * ow];
    for ni in 0..n {
        for o in 0..co {
            let g = o / cog;
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b.map_or(0.0, |b| b.data()[o]);
                    for ci in 0..cig {
                        let cin = g * cig + ci;
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= wd as isize {
                                    continue;
                                }
                                acc += x.at(&[ni, cin, iy as usize, ix as usize]) * w.at(&[o, ci, ky, kx]);
                            }
                        }
                    }
                    out[((ni * co + o) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, co, oh, ow], out).unwrap()
}

/// Conv whose weight and bias are `{prefix}.weight` / `{prefix}.bias`.
pub fn conv_named(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>, stride: usize, groups: usize) -> Tensor<f64> {
    let w = param(store, &format!("{prefix}.weight"));
    let pad = w.shape()[2] / 2;
    conv(x, w, store.by_name(&format!("{prefix}.bias")), stride, pad, groups)
}

pub fn layer_norm(x: &Tensor<f64>, gamma: &Tensor<f64>, beta: &Tensor<f64>) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let mut out = x.clone();
    for ni in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let vals: Vec<f64> = (0..c).map(|ci| x.at(&[ni, ci, y, xx])).collect();
                let mean = vals.iter().sum::<f64>() / c as f64;
                let var = vals.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / c as f64;
                for (ci, v) in vals.iter().enumerate() {
                    let o = out.offset(&[ni, ci, y, xx]);
                    out.data_mut()[o] = (v - mean) / (var + LN_EPS).sqrt() * gamma.data()[ci] + beta.data()[ci];
                }
            }
        }
    }
    out
}

pub fn layer_norm_named(store: &ParamStore<f64>, prefix: &str, x: &Tensor<f64>) -> Tensor<f64> {
    layer_norm(x, param(store, &format!("{prefix}.gamma")), param(store, &format!("{prefix}.beta")))
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn zip(a: &Tensor<f64>, b: &Tensor<f64>, f: impl Fn(f64, f64) -> f64) -> Tensor<f64> {
    assert_eq!(a.shape(), b.shape());
    Tensor::new(a.shape().to_vec(), a.data().iter().zip(b.data()).map(|(&x, &y)| f(x, y)).collect()).unwrap()
}

pub fn channels(x: &Tensor<f64>, start: usize, len: usize) -> Tensor<f64> {
    let [n, c, h, w] = x.shape().try_into().unwrap();
    let hw = h * w;
    let mut out = Vec::with_capacity(n * len * hw);
    for ni in 0..n {
        out.extend_from_slice(&x.data()[(ni * c + start) * hw..(ni * c + start + len) * hw]);
    }
    Tensor::new(vec![n, len, h, w], out).unwrap()
}

pub fn concat(parts: &[Tensor<f64>]) -> Tensor<f64> {
    let [n, _, h, w] = parts[0].shape().try_into().unwrap();
    let hw = h * w;
    let c: usize = parts.iter().map(|p| p.shape()[1]).sum();
    let mut out = Vec::with_capacity(n * c * hw);
    for ni in 0..n {
        for p in parts {
            let pc = p.shape()[1];
            out.extend_from_slice(&p.data()[ni * pc * hw..(ni + 1) * pc * hw]);
        }
    }
    Tensor::new(vec![n, c, h, w], out).unwrap()
}

/// Full-sort selection: order by value descending, then index ascending.
pub fn topk_oracle(row: &[f64], k: usize) -> Vec<bool> {
    let mut pairs: Vec<(f64, usize)> = row.iter().copied().zip(0..).collect();
    pairs.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap().then(a.1.cmp(&b.1)));
    let mut keep = vec![false; row.len()];
    for &(_, i) in &pairs[..k] {
        keep[i] = true;
    }
    keep
}

pub fn k_oracle(rho: f64, d: usize) -> usize {
    ((rho * d as f64).round() as usize).clamp(1, d)
}

/// Reference intermediates of one attention layer.
pub struct AttentionRef {
    pub out: Tensor<f64>,
    /// Per sample: `heads × d × d` scores before selection.
    pub scores: Vec<Vec<f64>>,
    pub ks: Vec<usize>,
}

pub fn attention(store: &ParamStore<f64>, prefix: &str, cfg: &AttentionConfig, x: &Tensor<f64>) -> AttentionRef {
    let [n, _, h, w] = x.shape().try_into().unwrap();
    let (c_att, heads, d) = (cfg.attn_channels(), cfg.heads, cfg.head_dim());
    let hw = h * w;
    let x_att = channels(x, 0, c_att);
    let project = |name: &str| {
        let pw = conv_named(store, &format!("{prefix}.{name}.pw"), &x_att, 1, 1);
        conv_named(store, &format!("{prefix}.{name}.dw"), &pw, 1, c_att)
    };
    let (q, k, v) = (project("q"), project("k"), project("v"));
    let bias = param(store, &format!("{prefix}.rel_bias.table"));
    let mut attended = vec![0.0; n * c_att * hw];
    let mut all_scores = Vec::new();
    let mut ks = Vec::new();
    for ni in 0..n {
        let kk = match cfg.topk_mode {
            TopKMode::Dense => d,
            TopKMode::Fixed => k_oracle(cfg.fixed_k_fraction, d),
            TopKMode::Gdtko => {
                let g = conv_named(store, &format!("{prefix}.gate"), &x_att, 1, 1);
                let rho = g.data()[ni * hw..(ni + 1) * hw].iter().map(|&v| sigmoid(v)).sum::<f64>() / hw as f64;
                k_oracle(rho, d)
            }
        };
        ks.push(kk);
        let mut sample_scores = Vec::new();
        for hd in 0..heads {
            for i in 0..d {
                let ci = hd * d + i;
                let mut row = vec![0.0; d];
                for (j, r) in row.iter_mut().enumerate() {
                    let cj = hd * d + j;
                    let dot: f64 = (0..hw)
                        .map(|p| q.data()[(ni * c_att + ci) * hw + p] * k.data()[(ni * c_att + cj) * hw + p])
                        .sum();
                    *r = dot / (d as f64).sqrt() + bias.at(&[hd, i, j]);
                }
                sample_scores.extend_from_slice(&row);
                let keep = if cfg.topk_mode == TopKMode::Dense { vec![true; d] } else { topk_oracle(&row, kk) };
                let filled: Vec<f64> = row
                    .iter()
                    .zip(&keep)
                    .map(|(&s, &kp)| match (kp, cfg.mask_mode) {
                        (true, _) => s,
                        (false, MaskMode::NegInf) => f64::NEG_INFINITY,
                        (false, MaskMode::ZeroPreSoftmax) => 0.0,
                    })
                    .collect();
                let max = filled.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = filled.iter().map(|s| (s - max).exp()).collect();
                let z: f64 = e.iter().sum();
                for p in 0..hw {
                    attended[(ni * c_att + ci) * hw + p] =
                        (0..d).map(|j| e[j] / z * v.data()[(ni * c_att + hd * d + j) * hw + p]).sum();
                }
            }
        }
        all_scores.push(sample_scores);
    }
    let attended = Tensor::new(vec![n, c_att, h, w], attended).unwrap();
    let merged = if cfg.bypass_channels() > 0 {
        concat(&[attended, channels(x, c_att, cfg.bypass_channels())])
    } else {
        attended
    };
    AttentionRef { out: conv_named(store, &format!("{prefix}.proj"), &merged, 1, 1), scores: all_scores, ks }
}

pub fn hssfgn(store: &ParamStore<f64>, prefix: &str, cfg: &HssfgnConfig, x: &Tensor<f64>) -> Tensor<f64> {
    let hidden = cfg.hidden();
    let g = hidden / 4;
    let shared = conv_named(store, &format!("{prefix}.project_in"), x, 1, 1);
    let parts: Vec<Tensor<f64>> = [1, 3, 5, 7]
        .iter()
        .enumerate()
        .map(|(i, k)| conv_named(store, &format!("{prefix}.gate.dw{k}"), &channels(&shared, i * g, g), 1, g))
        .collect();
    let gate = concat(&parts).map(gelu);
    conv_named(store, &format!("{prefix}.project_out"), &zip(&shared, &gate, |a, b| a * b), 1, 1)
}

pub fn block(
    store: &ParamStore<f64>,
    prefix: &str,
    attn: &AttentionConfig,
    ffn: &HssfgnConfig,
    x: &Tensor<f64>,
) -> Tensor<f64> {
    let c = attn.channels;
    let x1 = zip(x, &conv_named(store, &format!("{prefix}.cpe"), x, 1, c), |a, b| a + b);
    let a =
        attention(store, &format!("{prefix}.attn"), attn, &layer_norm_named(store, &format!("{prefix}.norm1"), &x1));
    let x2 = zip(&x1, &a.out, |a, b| a + b);
    let f = hssfgn(store, &format!("{prefix}.ffn"), ffn, &layer_norm_named(store, &format!("{prefix}.norm2"), &x2));
    zip(&x2, &f, |a, b| a + b)
}
