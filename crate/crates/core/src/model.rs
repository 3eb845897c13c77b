//! Four-stage hierarchical backbone.
//!
//! A stride-4 stem, then four stages of blocks separated by stride-2 merging
//! convolutions, then global average pooling and a linear classifier. Each
//! block applies a residual depthwise positional convolution, residual
//! sparse channel attention and a residual gated feed-forward network.

use std::fmt;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Deserializer, Serialize};

use crate::attention::{AtkSpa, AttentionConfig, MaskMode, TopKMode};
use crate::autodiff::{ConvOptions, Tape, Var};
use crate::error::{config_err, dim_err, Error, Result};
use crate::ffn::{Hssfgn, HssfgnConfig};
use crate::nn::{Bound, Conv, LayerNorm, LayerSpec, Linear, ModuleBuilder, ParamStore};
use crate::tensor::{Scalar, Tensor};

/// Network input must be a multiple of the total stride.
pub const TOTAL_STRIDE: usize = 32;

/// Accepts either a JSON number or a `"num/den"` string.
fn ratio<'de, D: Deserializer<'de>>(de: D) -> std::result::Result<f64, D::Error> {
    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }
    match Repr::deserialize(de)? {
        Repr::Number(v) => Ok(v),
        Repr::Text(s) => {
            let parse = |t: &str| t.trim().parse::<f64>().map_err(serde::de::Error::custom);
            match s.split_once('/') {
                Some((num, den)) => Ok(parse(num)? / parse(den)?),
                None => parse(&s),
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub name: String,
    pub num_classes: usize,
    pub in_channels: usize,
    pub dims: [usize; 4],
    pub depths: [usize; 4],
    pub heads: [usize; 4],
    #[serde(deserialize_with = "ratio")]
    pub partial_ratio: f64,
    #[serde(deserialize_with = "ratio")]
    pub ffn_expansion: f64,
    pub mask_mode: MaskMode,
    pub topk_mode: TopKMode,
    #[serde(deserialize_with = "ratio")]
    pub fixed_k_fraction: f64,
}

impl ModelConfig {
    fn preset(name: &str, dims: [usize; 4], depths: [usize; 4], heads: [usize; 4], classes: usize) -> Self {
        ModelConfig {
            name: name.to_string(),
            num_classes: classes,
            in_channels: 3,
            dims,
            depths,
            heads,
            partial_ratio: 0.25,
            ffn_expansion: 2.0,
            mask_mode: MaskMode::NegInf,
            topk_mode: TopKMode::Gdtko,
            fixed_k_fraction: 1.0,
        }
    }

    pub fn tiny() -> Self {
        Self::preset("tiny", [40, 80, 160, 320], [2, 2, 6, 2], [1, 2, 4, 8], 101)
    }

    pub fn base() -> Self {
        Self::preset("base", [64, 128, 256, 512], [2, 2, 6, 2], [2, 4, 8, 16], 101)
    }

    pub fn large() -> Self {
        Self::preset("large", [64, 128, 256, 512], [3, 3, 9, 3], [2, 4, 8, 16], 101)
    }

    /// Desk-scale model for the synthetic four-class task.
    pub fn micro() -> Self {
        Self::preset("micro", [8, 16, 24, 32], [1, 1, 1, 1], [1, 1, 1, 1], 4)
    }

    pub fn named(name: &str) -> Option<Self> {
        match name {
            "tiny" => Some(Self::tiny()),
            "base" => Some(Self::base()),
            "large" => Some(Self::large()),
            "micro" => Some(Self::micro()),
            _ => None,
        }
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: ModelConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes")
    }

    pub fn attention_config(&self, stage: usize) -> AttentionConfig {
        AttentionConfig {
            channels: self.dims[stage],
            partial_ratio: self.partial_ratio,
            heads: self.heads[stage],
            mask_mode: self.mask_mode,
            topk_mode: self.topk_mode,
            fixed_k_fraction: self.fixed_k_fraction,
        }
    }

    pub fn ffn_config(&self, stage: usize) -> HssfgnConfig {
        HssfgnConfig { channels: self.dims[stage], expansion: self.ffn_expansion }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_classes == 0 || self.in_channels == 0 {
            return Err(config_err!("num_classes and in_channels must be positive"));
        }
        if self.dims[0] < 2 || !self.dims[0].is_multiple_of(2) {
            return Err(config_err!("dims[0] = {} must be even (the stem halves it)", self.dims[0]));
        }
        for stage in 0..4 {
            if self.depths[stage] == 0 {
                return Err(config_err!("stage {stage} has depth 0"));
            }
            self.attention_config(stage).validate().map_err(|e| config_err!("stage {stage}: {e}"))?;
            self.ffn_config(stage).validate().map_err(|e| config_err!("stage {stage}: {e}"))?;
        }
        Ok(())
    }
}

impl fmt::Display for ModelConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{}: dims {:?} depths {:?} heads {:?} ratio {} ffn x{} {:?}/{:?}",
            self.name,
            self.dims,
            self.depths,
            self.heads,
            self.partial_ratio,
            self.ffn_expansion,
            self.topk_mode,
            self.mask_mode
        )
    }
}

#[derive(Debug, Clone)]
pub struct FraesormerBlock {
    pub cpe: Conv,
    pub norm1: LayerNorm,
    pub attn: AtkSpa,
    pub norm2: LayerNorm,
    pub ffn: Hssfgn,
}

impl FraesormerBlock {
    pub fn new<T: Scalar>(b: &mut ModuleBuilder<'_, T>, attn: AttentionConfig, ffn: HssfgnConfig) -> Result<Self> {
        let c = attn.channels;
        Ok(FraesormerBlock {
            cpe: b.depthwise("cpe", c, 3)?,
            norm1: b.layer_norm("norm1", c)?,
            attn: AtkSpa::new(&mut b.child("attn"), attn)?,
            norm2: b.layer_norm("norm2", c)?,
            ffn: Hssfgn::new(&mut b.child("ffn"), ffn)?,
        })
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_observed(p, x, "block", &mut |_, _| {})
    }

    pub(crate) fn forward_observed<'t, T: Scalar>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        path: &str,
        observe: &mut dyn FnMut(&str, Var<'t, T>),
    ) -> Result<Var<'t, T>> {
        let channels = self.attn.cfg.channels;
        if x.shape().get(1) != Some(&channels) {
            return Err(dim_err!("{path}: expected {channels} channels, got {:?}", x.shape()));
        }
        let cpe = self.cpe.forward(p, x)?;
        observe(&format!("{path}.cpe"), cpe);
        let x1 = x.add(cpe)?;
        let attn = self.attn.forward(p, self.norm1.forward(p, x1)?)?;
        observe(&format!("{path}.attn"), attn);
        let x2 = x1.add(attn)?;
        let ffn = self.ffn.forward(p, self.norm2.forward(p, x2)?)?;
        observe(&format!("{path}.ffn"), ffn);
        x2.add(ffn)
    }
}

#[derive(Debug, Clone)]
struct Stem {
    conv1: Conv,
    norm1: LayerNorm,
    conv2: Conv,
    norm2: LayerNorm,
}

#[derive(Debug, Clone)]
struct Merge {
    conv: Conv,
    norm: LayerNorm,
}

fn downsample() -> ConvOptions {
    ConvOptions::new(2, 1, 1)
}

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub params: ParamStore<T>,
    /// Shape log of every layer in registration order.
    pub layers: Vec<LayerSpec>,
    stem: Stem,
    merges: Vec<Merge>,
    stages: Vec<Vec<FraesormerBlock>>,
    head: Linear,
}

impl<T: Scalar> Model<T> {
    /// Deterministic construction: truncated-normal (σ = 0.02) conv and
    /// linear weights, zero biases, unit/zero layer-norm affine parameters and
    /// zero relative-position bias.
    pub fn build(cfg: &ModelConfig, seed: u64) -> Result<Self> {
        cfg.validate()?;
        let mut params = ParamStore::new();
        let mut layers = Vec::new();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut b = ModuleBuilder::new(&mut params, &mut layers, &mut rng);

        let half = cfg.dims[0] / 2;
        let stem = {
            let mut s = b.child("stem");
            let conv1 = s.conv("conv1", cfg.in_channels, half, 3, downsample(), true)?;
            s.set_scale(2);
            let norm1 = s.layer_norm("norm1", half)?;
            let conv2 = s.conv("conv2", half, cfg.dims[0], 3, downsample(), true)?;
            s.set_scale(4);
            let norm2 = s.layer_norm("norm2", cfg.dims[0])?;
            Stem { conv1, norm1, conv2, norm2 }
        };

        let mut merges = Vec::new();
        let mut stages = Vec::new();
        for stage in 0..4 {
            let scale = 4 << stage;
            if stage > 0 {
                let mut m = b.child(&format!("merge{stage}"));
                m.set_scale(scale / 2);
                let conv = m.conv("conv", cfg.dims[stage - 1], cfg.dims[stage], 3, downsample(), true)?;
                m.set_scale(scale);
                let norm = m.layer_norm("norm", cfg.dims[stage])?;
                merges.push(Merge { conv, norm });
            }
            let mut s = b.child(&format!("stage{stage}"));
            s.set_scale(scale);
            let blocks = (0..cfg.depths[stage])
                .map(|i| {
                    FraesormerBlock::new(
                        &mut s.child(&format!("block{i}")),
                        cfg.attention_config(stage),
                        cfg.ffn_config(stage),
                    )
                })
                .collect::<Result<Vec<_>>>()?;
            stages.push(blocks);
        }
        b.set_scale(4 << 3);
        let head = b.linear("head", cfg.dims[3], cfg.num_classes)?;

        Ok(Model { cfg: cfg.clone(), params, layers, stem, merges, stages, head })
    }

    pub fn blocks(&self, stage: usize) -> &[FraesormerBlock] {
        &self.stages[stage]
    }

    pub fn check_input(&self, shape: &[usize]) -> Result<()> {
        let &[_, c, h, w] = shape else {
            return Err(dim_err!("model input must be N×C×H×W, got {shape:?}"));
        };
        if c != self.cfg.in_channels {
            return Err(dim_err!("model expects {} input channels, got {c}", self.cfg.in_channels));
        }
        if h < TOTAL_STRIDE || w < TOTAL_STRIDE || h % TOTAL_STRIDE != 0 || w % TOTAL_STRIDE != 0 {
            return Err(dim_err!("input resolution {h}×{w} must be a positive multiple of {TOTAL_STRIDE}"));
        }
        Ok(())
    }

    pub fn forward<'t>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_observed(p, x, &mut |_, _| {})
    }

    /// Forward pass that reports every named intermediate output to
    /// `observe`: `stem`, `stage{i}.block{j}.{cpe,attn,ffn}`, `stage{i}`,
    /// `merge{i}`, `pool`, `head`.
    pub fn forward_observed<'t>(
        &self,
        p: &Bound<'t, T>,
        x: Var<'t, T>,
        observe: &mut dyn FnMut(&str, Var<'t, T>),
    ) -> Result<Var<'t, T>> {
        self.check_input(&x.shape())?;
        let s = &self.stem;
        let mut h = s.norm1.forward(p, s.conv1.forward(p, x)?)?.gelu()?;
        h = s.norm2.forward(p, s.conv2.forward(p, h)?)?.gelu()?;
        observe("stem", h);
        for (stage, blocks) in self.stages.iter().enumerate() {
            if stage > 0 {
                let m = &self.merges[stage - 1];
                h = m.norm.forward(p, m.conv.forward(p, h)?)?;
                observe(&format!("merge{stage}"), h);
            }
            for (i, block) in blocks.iter().enumerate() {
                h = block.forward_observed(p, h, &format!("stage{stage}.block{i}"), observe)?;
            }
            observe(&format!("stage{stage}"), h);
        }
        let pooled = h.global_avg_pool()?;
        observe("pool", pooled);
        let logits = self.head.forward(p, pooled)?;
        observe("head", logits);
        Ok(logits)
    }

    /// Inference on a batch of images without recording gradients.
    pub fn logits(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let tape = Tape::new();
        let p = self.params.bind(&tape, false);
        let x = tape.constant(images.clone());
        let out = self.forward(&p, x)?;
        Ok((*out.value()).clone())
    }

    /// Copies parameter values from another precision.
    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            params: self.params.cast(),
            layers: self.layers.clone(),
            stem: self.stem.clone(),
            merges: self.merges.clone(),
            stages: self.stages.clone(),
            head: self.head,
        }
    }

    /// Zeroes the CPE kernel, attention output projection and FFN output
    /// projection of every block, turning each block into the identity.
    pub fn zero_residual_branches(&mut self) {
        let convs: Vec<Conv> =
            self.stages.iter().flatten().flat_map(|b| [b.cpe, b.attn.proj, b.ffn.project_out]).collect();
        for conv in convs {
            self.params.get_mut(conv.weight).data_mut().fill(T::zero());
            if let Some(bias) = conv.bias {
                self.params.get_mut(bias).data_mut().fill(T::zero());
            }
        }
    }
}

/// Index of the largest value; ties resolve to the lowest index.
pub fn argmax<T: Scalar>(row: &[T]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::tiny(), ModelConfig::base(), ModelConfig::large(), ModelConfig::micro()] {
            cfg.validate().unwrap();
        }
        let tiny = ModelConfig::tiny();
        for stage in 0..4 {
            assert_eq!(tiny.attention_config(stage).head_dim(), 10);
        }
    }

    #[test]
    fn json_round_trip_and_rational_strings() {
        let cfg = ModelConfig::micro();
        assert_eq!(ModelConfig::from_json(&cfg.to_json()).unwrap(), cfg);
        let text = cfg.to_json().replace("\"partial_ratio\": 0.25", "\"partial_ratio\": \"1/4\"");
        assert!(text.contains("1/4"));
        assert_eq!(ModelConfig::from_json(&text).unwrap().partial_ratio, 0.25);
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = ModelConfig::micro().to_json().replacen('{', "{\"dropout\": 0.1,", 1);
        assert!(ModelConfig::from_json(&text).is_err());
    }

    #[test]
    fn head_split_violation_is_config_error() {
        let mut cfg = ModelConfig::micro();
        cfg.heads = [1, 3, 1, 1];
        assert!(matches!(cfg.validate(), Err(Error::Config(_))));
        assert!(Model::<f32>::build(&cfg, 0).is_err());
    }

    #[test]
    fn argmax_ties_prefer_lowest() {
        assert_eq!(argmax(&[0.1f32, 0.7, 0.7, 0.2]), 1);
        assert_eq!(argmax(&[0.0f32; 4]), 0);
    }

    #[test]
    fn rejects_indivisible_resolution() {
        let model = Model::<f32>::build(&ModelConfig::micro(), 0).unwrap();
        let err = model.logits(&Tensor::zeros(vec![1, 3, 48, 48])).unwrap_err();
        assert!(matches!(err, Error::Dimension(_)));
        assert!(model.logits(&Tensor::zeros(vec![1, 3, 16, 16])).is_err());
    }
}
