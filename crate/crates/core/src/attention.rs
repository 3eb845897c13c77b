//! Adaptive top-k sparse partial channel attention.
//!
//! The input channels are split into an attention subset (`C′`) and a bypass
//! subset (`C″`). The attention subset goes through per-head channel
//! ("transposed") attention whose `d_head × d_head` score matrix keeps only
//! the `k` largest entries of every row; `k` comes from a one-channel sigmoid
//! gate whose spatial mean sets the retained fraction. The attended channels
//! are concatenated with the untouched bypass channels and mixed by a final
//! pointwise projection.
//!
//! Score memory is `heads × d_head × d_head` per sample and does not depend on
//! the spatial resolution.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{config_err, dim_err, Error, Result};
use crate::nn::{Bound, Conv, ModuleBuilder, ParamId};
use crate::tensor::{Scalar, Tensor};

/// How unselected scores are filled before the softmax.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MaskMode {
    /// `-∞`: unselected weights are exactly zero after the softmax.
    #[default]
    NegInf,
    /// Literal zero: unselected entries still get `exp(0)` weight.
    ZeroPreSoftmax,
}

/// How `k` is chosen for each sample.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TopKMode {
    /// Gated dynamic top-k: `k` from the gate map's spatial mean.
    #[default]
    Gdtko,
    /// `k = round(fixed_k_fraction · d_head)` for every sample.
    Fixed,
    /// No selection at all (standard dense attention baseline).
    Dense,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AttentionConfig {
    pub channels: usize,
    pub partial_ratio: f64,
    pub heads: usize,
    pub mask_mode: MaskMode,
    pub topk_mode: TopKMode,
    pub fixed_k_fraction: f64,
}

impl AttentionConfig {
    pub fn new(channels: usize, heads: usize) -> Self {
        AttentionConfig {
            channels,
            partial_ratio: 0.25,
            heads,
            mask_mode: MaskMode::NegInf,
            topk_mode: TopKMode::Gdtko,
            fixed_k_fraction: 1.0,
        }
    }

    /// `C′ = round(C · partial_ratio)`.
    pub fn attn_channels(&self) -> usize {
        (self.channels as f64 * self.partial_ratio).round() as usize
    }

    /// `C″ = C − C′`.
    pub fn bypass_channels(&self) -> usize {
        self.channels - self.attn_channels()
    }

    pub fn head_dim(&self) -> usize {
        self.attn_channels() / self.heads
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.partial_ratio > 0.0 && self.partial_ratio <= 1.0) {
            return Err(config_err!("partial ratio {} outside (0, 1]", self.partial_ratio));
        }
        let c_att = self.attn_channels();
        if self.heads == 0 || c_att < self.heads || !c_att.is_multiple_of(self.heads) {
            return Err(config_err!(
                "{c_att} attention channels (C = {}, ratio {}) cannot be split into {} heads",
                self.channels,
                self.partial_ratio,
                self.heads
            ));
        }
        if self.topk_mode == TopKMode::Fixed && !(self.fixed_k_fraction > 0.0 && self.fixed_k_fraction <= 1.0) {
            return Err(config_err!("fixed k fraction {} outside (0, 1]", self.fixed_k_fraction));
        }
        Ok(())
    }

    /// Temperature `√d_head`.
    pub fn temperature(&self) -> f64 {
        (self.head_dim() as f64).sqrt()
    }
}

/// Row-wise binary selection over a `heads × d × d` score tensor.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TopKMask {
    pub k: usize,
    pub heads: usize,
    pub dim: usize,
    selected: Vec<bool>,
}

impl TopKMask {
    pub fn selected(&self) -> &[bool] {
        &self.selected
    }

    pub fn row(&self, head: usize, row: usize) -> &[bool] {
        let start = (head * self.dim + row) * self.dim;
        &self.selected[start..start + self.dim]
    }

    /// The mask as a `heads × d × d` tensor of zeros and ones.
    pub fn to_tensor<T: Scalar>(&self) -> Tensor<T> {
        let data = self.selected.iter().map(|&s| if s { T::one() } else { T::zero() }).collect();
        Tensor::from_parts(vec![self.heads, self.dim, self.dim], data)
    }
}

/// Keeps the `k` largest entries of every row of a `heads × d × d` tensor.
/// Ties go to the lowest column index.
pub fn topk_mask_rowwise<T: Scalar>(scores: &Tensor<T>, k: usize) -> Result<TopKMask> {
    let &[heads, rows, dim] = scores.shape() else {
        return Err(dim_err!("top-k mask expects heads×d×d scores, got {:?}", scores.shape()));
    };
    if rows != dim {
        return Err(dim_err!("top-k mask expects square score matrices, got {rows}×{dim}"));
    }
    if k == 0 || k > dim {
        return Err(Error::Contract(format!("k = {k} outside [1, {dim}]")));
    }
    let mut selected = vec![false; heads * dim * dim];
    let mut order: Vec<usize> = Vec::with_capacity(dim);
    for (row, flags) in scores.data().chunks(dim).zip(selected.chunks_mut(dim)) {
        order.clear();
        order.extend(0..dim);
        // Stable sort: equal scores keep ascending column order.
        order.sort_by(|&a, &b| row[b].as_f64().total_cmp(&row[a].as_f64()));
        for &col in &order[..k] {
            flags[col] = true;
        }
    }
    Ok(TopKMask { k, heads, dim, selected })
}

/// `k = clamp(round(ρ · d_head), 1, d_head)`.
pub fn k_from_density(rho: f64, head_dim: usize) -> usize {
    ((rho * head_dim as f64).round() as usize).clamp(1, head_dim)
}

/// One-channel gate map: pointwise conv `C′ → 1` followed by a sigmoid.
#[derive(Debug, Clone, Copy)]
pub struct GateUnit {
    pub conv: Conv,
}

impl GateUnit {
    pub fn new<T: Scalar>(b: &mut ModuleBuilder<'_, T>, name: &str, attn_channels: usize) -> Result<Self> {
        Ok(GateUnit { conv: b.pointwise(name, attn_channels, 1)? })
    }

    /// `N×1×H×W` map with values in (0, 1).
    pub fn gate_map<'t, T: Scalar>(&self, p: &Bound<'t, T>, x_att: Var<'t, T>) -> Result<Var<'t, T>> {
        self.conv.forward(p, x_att)?.sigmoid()
    }

    /// Spatial mean `ρ` of the gate map, one value per batch element.
    pub fn densities<'t, T: Scalar>(&self, p: &Bound<'t, T>, x_att: Var<'t, T>) -> Result<Vec<f64>> {
        let g = self.gate_map(p, x_att)?.value();
        let (_, _, h, w) = g.dims4()?;
        let hw = h * w;
        Ok(g.data().chunks(hw).map(|m| m.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64).collect())
    }
}

/// Per-sample `k` from the gated dynamic top-k operator.
pub fn gdtko_compute_k<'t, T: Scalar>(
    x_att: Var<'t, T>,
    gate: &GateUnit,
    p: &Bound<'t, T>,
    head_dim: usize,
) -> Result<Vec<usize>> {
    Ok(gate.densities(p, x_att)?.into_iter().map(|rho| k_from_density(rho, head_dim)).collect())
}

/// Splits `x` into the attention channels and the bypass channels
/// (`None` when the ratio is 1).
pub fn split_partial<'t, T: Scalar>(x: Var<'t, T>, cfg: &AttentionConfig) -> Result<(Var<'t, T>, Option<Var<'t, T>>)> {
    cfg.validate()?;
    let shape = x.shape();
    if shape.len() != 4 || shape[1] != cfg.channels {
        return Err(dim_err!("expected N×{}×H×W input, got {shape:?}", cfg.channels));
    }
    let (c_att, c_sup) = (cfg.attn_channels(), cfg.bypass_channels());
    if c_sup == 0 {
        return Ok((x, None));
    }
    let parts = x.split_channels(&[c_att, c_sup])?;
    Ok((parts[0], Some(parts[1])))
}

/// Depthwise-separable projection producing Q, K or V: pointwise then 3×3 depthwise.
#[derive(Debug, Clone, Copy)]
struct Projection {
    pointwise: Conv,
    depthwise: Conv,
}

impl Projection {
    fn new<T: Scalar>(b: &mut ModuleBuilder<'_, T>, name: &str, channels: usize) -> Result<Self> {
        let mut b = b.child(name);
        Ok(Projection { pointwise: b.pointwise("pw", channels, channels)?, depthwise: b.depthwise("dw", channels, 3)? })
    }

    fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.depthwise.forward(p, self.pointwise.forward(p, x)?)
    }
}

/// Intermediate values of one attention forward pass.
pub struct AttentionTrace<'t, T: Scalar> {
    pub x_att: Var<'t, T>,
    pub x_sup: Option<Var<'t, T>>,
    /// `N × heads × d × d` scores `Q·Kᵀ/√d + B` before selection.
    pub scores: Var<'t, T>,
    /// `N × heads × d × d` softmax weights.
    pub weights: Var<'t, T>,
    /// Attended channels `N × C′ × H × W`, before the concat.
    pub attended: Var<'t, T>,
    /// Input of the output projection: `concat(attended, x_sup)`.
    pub merged: Var<'t, T>,
    /// Per-sample masks; empty in dense mode.
    pub masks: Vec<TopKMask>,
    pub ks: Vec<usize>,
}

#[derive(Debug, Clone)]
pub struct AtkSpa {
    pub cfg: AttentionConfig,
    query: Projection,
    key: Projection,
    value: Projection,
    pub rel_bias: ParamId,
    pub gate: Option<GateUnit>,
    pub proj: Conv,
}

impl AtkSpa {
    pub fn new<T: Scalar>(b: &mut ModuleBuilder<'_, T>, cfg: AttentionConfig) -> Result<Self> {
        cfg.validate()?;
        let (c, c_att) = (cfg.channels, cfg.attn_channels());
        let query = Projection::new(b, "q", c_att)?;
        let key = Projection::new(b, "k", c_att)?;
        let value = Projection::new(b, "v", c_att)?;
        let rel_bias = b.rel_pos_bias("rel_bias", cfg.heads, cfg.head_dim())?;
        b.channel_attention("scores", cfg.heads, cfg.head_dim());
        let gate = match cfg.topk_mode {
            TopKMode::Gdtko => Some(b.side_stream("gate", |b| GateUnit::new(b, "gate", c_att))?),
            TopKMode::Fixed | TopKMode::Dense => None,
        };
        let proj = b.pointwise("proj", c, c)?;
        Ok(AtkSpa { cfg, query, key, value, rel_bias, gate, proj })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.forward_traced(p, x)?.0)
    }

    /// Per-sample `k` for the configured mode; `None` in dense mode.
    pub fn select_k<'t, T: Scalar>(&self, p: &Bound<'t, T>, x_att: Var<'t, T>) -> Result<Option<Vec<usize>>> {
        let d = self.cfg.head_dim();
        let n = x_att.shape()[0];
        match self.cfg.topk_mode {
            TopKMode::Dense => Ok(None),
            TopKMode::Fixed => Ok(Some(vec![k_from_density(self.cfg.fixed_k_fraction, d); n])),
            TopKMode::Gdtko => {
                let gate = self.gate.as_ref().ok_or_else(|| config_err!("gdtko mode without a gate"))?;
                gdtko_compute_k(x_att, gate, p, d).map(Some)
            }
        }
    }

    pub fn forward_traced<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
    ) -> Result<(Var<'t, T>, AttentionTrace<'t, T>)> {
        let (x_att, x_sup) = split_partial(x, &self.cfg)?;
        let ks = self.select_k(p, x_att)?;
        let branch = self.attend(p, x_att, ks.as_deref())?;
        let merged = match x_sup {
            Some(sup) => Var::concat_channels(&[branch.attended, sup])?,
            None => branch.attended,
        };
        let out = self.proj.forward(p, merged)?;
        let trace = AttentionTrace {
            x_att,
            x_sup,
            scores: branch.scores,
            weights: branch.weights,
            attended: branch.attended,
            merged,
            masks: branch.masks,
            ks: ks.unwrap_or_default(),
        };
        Ok((out, trace))
    }

    /// Dense attention on the attention channels (no top-k selection).
    pub fn sdsa_forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x_att: Var<'t, T>) -> Result<Var<'t, T>> {
        Ok(self.attend(p, x_att, None)?.attended)
    }

    fn attend<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x_att: Var<'t, T>,
        ks: Option<&[usize]>,
    ) -> Result<Branch<'t, T>> {
        let shape = x_att.shape();
        let &[n, c_att, h, w] = shape.as_slice() else {
            return Err(dim_err!("attention input must be NCHW, got {shape:?}"));
        };
        if c_att != self.cfg.attn_channels() {
            return Err(dim_err!("expected {} attention channels, got {c_att}", self.cfg.attn_channels()));
        }
        let heads = self.cfg.heads;
        let d = self.cfg.head_dim();
        let hw = h * w;
        let per_head = |v: Var<'t, T>| v.reshape(vec![n * heads, d, hw]);
        let q = per_head(self.query.forward(p, x_att)?)?;
        let k = per_head(self.key.forward(p, x_att)?)?;
        let v = per_head(self.value.forward(p, x_att)?)?;

        let scores = q
            .matmul(k.transpose(1, 2)?)?
            .scale(T::from_f64(1.0 / self.cfg.temperature()))?
            .reshape(vec![n, heads, d, d])?
            .add_broadcast(p[self.rel_bias])?;

        let mut masks = Vec::new();
        let selected = match ks {
            None => scores,
            Some(ks) => {
                if ks.len() != n {
                    return Err(dim_err!("{} k values for a batch of {n}", ks.len()));
                }
                let values = scores.value();
                let block = heads * d * d;
                let mut keep = Vec::with_capacity(n * block);
                for (i, &k) in ks.iter().enumerate() {
                    let sample =
                        Tensor::from_parts(vec![heads, d, d], values.data()[i * block..(i + 1) * block].to_vec());
                    let mask = topk_mask_rowwise(&sample, k)?;
                    keep.extend_from_slice(mask.selected());
                    masks.push(mask);
                }
                let fill = match self.cfg.mask_mode {
                    MaskMode::NegInf => T::neg_infinity(),
                    MaskMode::ZeroPreSoftmax => T::zero(),
                };
                scores.masked_fill(Rc::from(keep), fill)?
            }
        };
        let weights = selected.softmax_rows()?;
        let attended = weights.reshape(vec![n * heads, d, d])?.matmul(v)?.reshape(vec![n, c_att, h, w])?;
        Ok(Branch { scores, weights, attended, masks })
    }
}

struct Branch<'t, T: Scalar> {
    scores: Var<'t, T>,
    weights: Var<'t, T>,
    attended: Var<'t, T>,
    masks: Vec<TopKMask>,
}
