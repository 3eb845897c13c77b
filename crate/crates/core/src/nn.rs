//! Parameter registry and the basic layers the architecture is assembled from.
//!
//! Modules do not own tensors. They register named parameters in a
//! [`ParamStore`] through a [`ModuleBuilder`] and keep the returned
//! [`ParamId`]s; a forward pass binds the whole store onto a tape once and
//! looks the variables up by id. Every registered layer also leaves a
//! [`LayerSpec`] describing its shape, which the accounting module reads.

use std::collections::HashMap;
use std::ops::Index;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::autodiff::{ConvOptions, Tape, Var};
use crate::error::{config_err, Error, Result};
use crate::tensor::{Scalar, Tensor};

/// Standard deviation of the truncated-normal weight initializer.
pub const INIT_STD: f64 = 0.02;

/// Layer-norm epsilon used throughout the network.
pub const LN_EPS: f64 = 1e-6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T: Scalar> {
    pub name: String,
    pub value: Tensor<T>,
}

/// Ordered, name-unique parameter registry.
#[derive(Debug, Clone, Default)]
pub struct ParamStore<T: Scalar> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn register(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(config_err!("parameter `{name}` registered twice"));
        }
        self.by_name.insert(name.clone(), self.params.len());
        self.params.push(Param { name, value });
        Ok(ParamId(self.params.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn by_name(&self, name: &str) -> Option<&Tensor<T>> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn by_name_mut(&mut self, name: &str) -> Option<&mut Tensor<T>> {
        self.id(name).map(|id| self.get_mut(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param<T>> {
        self.params.iter_mut()
    }

    /// Total number of scalar parameters.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.value.numel()).sum()
    }

    /// Replaces a value, keeping the registered shape.
    pub fn set(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = self.by_name_mut(name).ok_or_else(|| Error::Compatibility(format!("unknown parameter `{name}`")))?;
        if slot.shape() != value.shape() {
            return Err(Error::Compatibility(format!(
                "`{name}` has shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = value;
        Ok(())
    }

    /// Records every parameter as a tape leaf.
    pub fn bind<'t>(&self, tape: &'t Tape<T>, requires_grad: bool) -> Bound<'t, T> {
        Bound { vars: self.params.iter().map(|p| tape.leaf(p.value.clone(), requires_grad)).collect() }
    }

    pub fn cast<U: Scalar>(&self) -> ParamStore<U> {
        ParamStore {
            params: self.params.iter().map(|p| Param { name: p.name.clone(), value: p.value.cast() }).collect(),
            by_name: self.by_name.clone(),
        }
    }
}

/// Parameters of a [`ParamStore`] recorded on one tape.
pub struct Bound<'t, T: Scalar> {
    vars: Vec<Var<'t, T>>,
}

impl<'t, T: Scalar> Bound<'t, T> {
    /// Wraps externally created variables, one per registered parameter in
    /// registration order.
    pub fn from_vars(vars: Vec<Var<'t, T>>) -> Self {
        Bound { vars }
    }

    pub fn vars(&self) -> &[Var<'t, T>] {
        &self.vars
    }
}

impl<'t, T: Scalar> Index<ParamId> for Bound<'t, T> {
    type Output = Var<'t, T>;

    fn index(&self, id: ParamId) -> &Var<'t, T> {
        &self.vars[id.0]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum LayerKind {
    Conv {
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        groups: usize,
        bias: bool,
    },
    LayerNorm {
        channels: usize,
    },
    Linear {
        in_features: usize,
        out_features: usize,
    },
    RelPosBias {
        heads: usize,
        head_dim: usize,
    },
    /// Parameter-free channel attention: `Q·Kᵀ` and `attn·V` per head.
    ChannelAttention {
        heads: usize,
        head_dim: usize,
    },
}

impl LayerKind {
    pub fn name(&self) -> &'static str {
        match self {
            LayerKind::Conv { kernel: 1, groups: 1, .. } => "pointwise_conv",
            LayerKind::Conv { in_channels, out_channels, groups, .. }
                if groups == in_channels && groups == out_channels =>
            {
                "depthwise_conv"
            }
            LayerKind::Conv { .. } => "conv",
            LayerKind::LayerNorm { .. } => "layer_norm",
            LayerKind::Linear { .. } => "linear",
            LayerKind::RelPosBias { .. } => "rel_pos_bias",
            LayerKind::ChannelAttention { .. } => "channel_attention",
        }
    }
}

/// Shape record of one layer. `scale` is the downsampling factor of the
/// layer's input relative to the network input.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerSpec {
    pub path: String,
    pub kind: LayerKind,
    pub scale: usize,
    /// Names of the parameters the layer registered.
    pub params: Vec<String>,
}

/// Registration context: parameter store, layer log, RNG and the current
/// name prefix and spatial scale.
pub struct ModuleBuilder<'a, T: Scalar> {
    store: &'a mut ParamStore<T>,
    layers: &'a mut Vec<LayerSpec>,
    rng: &'a mut ChaCha8Rng,
    prefix: String,
    scale: usize,
}

impl<'a, T: Scalar> ModuleBuilder<'a, T> {
    pub fn new(store: &'a mut ParamStore<T>, layers: &'a mut Vec<LayerSpec>, rng: &'a mut ChaCha8Rng) -> Self {
        ModuleBuilder { store, layers, rng, prefix: String::new(), scale: 1 }
    }

    /// Builder for a named sub-module at the same scale.
    pub fn child(&mut self, name: &str) -> ModuleBuilder<'_, T> {
        let prefix = self.path(name);
        ModuleBuilder { store: self.store, layers: self.layers, rng: self.rng, prefix, scale: self.scale }
    }

    /// Runs `f` with a builder whose initializer draws from an independent
    /// stream keyed by `name`, so optional modules do not shift the values of
    /// parameters registered after them.
    pub fn side_stream<R>(&mut self, name: &str, f: impl FnOnce(&mut ModuleBuilder<'_, T>) -> R) -> R {
        let mut rng = ChaCha8Rng::from_seed(self.rng.get_seed());
        rng.set_stream(1 + u64::from(crc32fast::hash(self.path(name).as_bytes())));
        let mut b = ModuleBuilder {
            store: self.store,
            layers: self.layers,
            rng: &mut rng,
            prefix: self.prefix.clone(),
            scale: self.scale,
        };
        f(&mut b)
    }

    pub fn scale(&self) -> usize {
        self.scale
    }

    pub fn set_scale(&mut self, scale: usize) {
        self.scale = scale;
    }

    pub fn path(&self, name: &str) -> String {
        if self.prefix.is_empty() {
            name.to_string()
        } else {
            format!("{}.{name}", self.prefix)
        }
    }

    fn trunc_normal(&mut self, shape: Vec<usize>) -> Tensor<T> {
        let normal = Normal::new(0.0, INIT_STD).expect("valid std");
        let n = shape.iter().product();
        let data = (0..n)
            .map(|_| loop {
                let v: f64 = normal.sample(self.rng);
                if v.abs() <= 2.0 * INIT_STD {
                    break T::from_f64(v);
                }
            })
            .collect();
        Tensor::from_parts(shape, data)
    }

    fn param(&mut self, path: &str, name: &str, value: Tensor<T>, names: &mut Vec<String>) -> Result<ParamId> {
        let full = format!("{path}.{name}");
        let id = self.store.register(full.clone(), value)?;
        names.push(full);
        Ok(id)
    }

    fn log(&mut self, path: String, kind: LayerKind, params: Vec<String>) {
        self.layers.push(LayerSpec { path, kind, scale: self.scale, params });
    }

    #[allow(clippy::too_many_arguments)]
    pub fn conv(
        &mut self,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        opts: ConvOptions,
        bias: bool,
    ) -> Result<Conv> {
        if opts.groups == 0 || !in_channels.is_multiple_of(opts.groups) || !out_channels.is_multiple_of(opts.groups) {
            return Err(config_err!(
                "{}: groups {} must divide {in_channels} → {out_channels}",
                self.path(name),
                opts.groups
            ));
        }
        let path = self.path(name);
        let mut names = Vec::new();
        let w = self.trunc_normal(vec![out_channels, in_channels / opts.groups, kernel, kernel]);
        let weight = self.param(&path, "weight", w, &mut names)?;
        let bias =
            if bias { Some(self.param(&path, "bias", Tensor::zeros(vec![out_channels]), &mut names)?) } else { None };
        self.log(
            path,
            LayerKind::Conv {
                in_channels,
                out_channels,
                kernel,
                stride: opts.stride,
                padding: opts.padding,
                groups: opts.groups,
                bias: bias.is_some(),
            },
            names,
        );
        Ok(Conv { weight, bias, opts })
    }

    /// 1×1 convolution with bias.
    pub fn pointwise(&mut self, name: &str, in_channels: usize, out_channels: usize) -> Result<Conv> {
        self.conv(name, in_channels, out_channels, 1, ConvOptions::POINTWISE, true)
    }

    /// Same-padded stride-1 depthwise convolution with bias.
    pub fn depthwise(&mut self, name: &str, channels: usize, kernel: usize) -> Result<Conv> {
        self.conv(name, channels, channels, kernel, ConvOptions::new(1, kernel / 2, channels), true)
    }

    pub fn layer_norm(&mut self, name: &str, channels: usize) -> Result<LayerNorm> {
        let path = self.path(name);
        let mut names = Vec::new();
        let gamma = self.param(&path, "gamma", Tensor::ones(vec![channels]), &mut names)?;
        let beta = self.param(&path, "beta", Tensor::zeros(vec![channels]), &mut names)?;
        self.log(path, LayerKind::LayerNorm { channels }, names);
        Ok(LayerNorm { gamma, beta })
    }

    pub fn linear(&mut self, name: &str, in_features: usize, out_features: usize) -> Result<Linear> {
        let path = self.path(name);
        let mut names = Vec::new();
        let w = self.trunc_normal(vec![in_features, out_features]);
        let weight = self.param(&path, "weight", w, &mut names)?;
        let bias = self.param(&path, "bias", Tensor::zeros(vec![out_features]), &mut names)?;
        self.log(path, LayerKind::Linear { in_features, out_features }, names);
        Ok(Linear { weight, bias })
    }

    /// Zero-initialized per-head `head_dim × head_dim` bias.
    pub fn rel_pos_bias(&mut self, name: &str, heads: usize, head_dim: usize) -> Result<ParamId> {
        let path = self.path(name);
        let mut names = Vec::new();
        let id = self.param(&path, "table", Tensor::zeros(vec![heads, head_dim, head_dim]), &mut names)?;
        self.log(path, LayerKind::RelPosBias { heads, head_dim }, names);
        Ok(id)
    }

    /// Logs a parameter-free channel-attention product for MAC accounting.
    pub fn channel_attention(&mut self, name: &str, heads: usize, head_dim: usize) {
        let path = self.path(name);
        self.log(path, LayerKind::ChannelAttention { heads, head_dim }, Vec::new());
    }
}

#[derive(Debug, Clone, Copy)]
pub struct Conv {
    pub weight: ParamId,
    pub bias: Option<ParamId>,
    pub opts: ConvOptions,
}

impl Conv {
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.conv2d(p[self.weight], self.bias.map(|b| p[b]), self.opts)
    }
}

#[derive(Debug, Clone, Copy)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.layer_norm_channels(p[self.gamma], p[self.beta], LN_EPS)
    }
}

/// `x · W + b` with `W` stored as `in × out`.
#[derive(Debug, Clone, Copy)]
pub struct Linear {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Linear {
    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        x.linear(p[self.weight], Some(p[self.bias]))
    }
}
