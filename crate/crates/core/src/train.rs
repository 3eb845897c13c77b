//! Training, evaluation, prediction and the fixed-k sweep.

use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::TopKMode;
use crate::autodiff::Tape;
use crate::data::Dataset;
use crate::error::{dim_err, Error, Result};
use crate::model::{argmax, Model, ModelConfig};
use crate::optim::{clip_global_norm, AdamW, AdamWConfig, LrSchedule};
use crate::tensor::Tensor;

/// Batch size used by evaluation and prediction. Results do not depend on it.
pub const EVAL_BATCH: usize = 64;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub peak_lr: f64,
    /// Nominal warmup length; capped at a tenth of the run for short runs.
    pub warmup_epochs: f64,
    pub weight_decay: f64,
    pub seed: u64,
    /// Global gradient-norm cap; `None` disables clipping.
    pub clip_norm: Option<f64>,
    /// Evaluate training-set accuracy after every epoch (otherwise only
    /// after the last one).
    pub eval_every_epoch: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 25,
            batch_size: 32,
            peak_lr: 1e-3,
            warmup_epochs: 5.0,
            weight_decay: 0.05,
            seed: 0,
            clip_norm: Some(5.0),
            eval_every_epoch: true,
        }
    }
}

impl TrainConfig {
    // Negated comparisons also reject NaN.
    #[allow(clippy::neg_cmp_op_on_partial_ord)]
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::Config("epochs and batch size must be positive".into()));
        }
        if !(self.peak_lr.is_finite() && self.peak_lr > 0.0) {
            return Err(Error::Config(format!("learning rate {} must be positive", self.peak_lr)));
        }
        if !(self.warmup_epochs >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("warmup and weight decay must be non-negative".into()));
        }
        if self.clip_norm.is_some_and(|c| !(c > 0.0)) {
            return Err(Error::Config("clip norm must be positive".into()));
        }
        Ok(())
    }

    pub fn steps_per_epoch(&self, samples: usize) -> usize {
        samples.div_ceil(self.batch_size)
    }

    pub fn schedule(&self, samples: usize) -> LrSchedule {
        let per_epoch = self.steps_per_epoch(samples);
        let total = per_epoch * self.epochs;
        let nominal = (self.warmup_epochs * per_epoch as f64).round() as usize;
        LrSchedule { peak: self.peak_lr, warmup: nominal.min(total.div_ceil(10)), total }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    /// Optimizer steps taken so far.
    pub step: usize,
    /// Learning rate of the epoch's last step.
    pub lr: f64,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    /// Training-set top-1 accuracy after the epoch; `None` when the epoch
    /// was not evaluated.
    pub acc: Option<f64>,
}

impl EpochLog {
    pub const HEADER: &'static str = "epoch,step,lr,loss,acc";
}

impl fmt::Display for EpochLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{},{},{:.6e},{:.6},", self.epoch, self.step, self.lr, self.loss)?;
        match self.acc {
            Some(acc) => write!(f, "{acc:.4}"),
            None => Ok(()),
        }
    }
}

/// Observer for per-step progress: `(step, lr, loss)`.
pub type StepHook<'a> = &'a mut dyn FnMut(usize, f64, f64);

/// Trains `model` in place. Sample order is a fresh seeded permutation each
/// epoch; the whole run is deterministic given `cfg.seed`.
pub fn train(
    model: &mut Model<f32>,
    cfg: &TrainConfig,
    data: &Dataset,
    on_epoch: &mut dyn FnMut(&EpochLog),
    on_step: Option<StepHook<'_>>,
) -> Result<Vec<EpochLog>> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    if let Some(&bad) = data.labels.iter().find(|&&l| l >= model.cfg.num_classes) {
        return Err(Error::Contract(format!("label {bad} out of range for {} classes", model.cfg.num_classes)));
    }
    let mut probe = vec![1];
    probe.extend_from_slice(&data.image_shape);
    model.check_input(&probe)?;

    let schedule = cfg.schedule(data.len());
    let mut opt = AdamW::new(AdamWConfig { weight_decay: cfg.weight_decay, ..AdamWConfig::default() }, &model.params);
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    order_rng.set_stream(1);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut on_step = on_step;
    let mut logs = Vec::with_capacity(cfg.epochs);
    let mut step = 0;
    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut order_rng);
        let mut loss_sum = 0.0;
        let mut batches = 0;
        let mut lr = 0.0;
        for chunk in order.chunks(cfg.batch_size) {
            step += 1;
            lr = schedule.lr(step);
            let (images, labels) = data.batch::<f32>(chunk);
            let loss = train_step(model, &mut opt, &images, &labels, lr, cfg.clip_norm, step)?;
            if let Some(hook) = on_step.as_mut() {
                hook(step, lr, loss);
            }
            loss_sum += loss;
            batches += 1;
        }
        let acc = if cfg.eval_every_epoch || epoch == cfg.epochs { Some(evaluate(model, data)?.top1) } else { None };
        let log = EpochLog { epoch, step, lr, loss: loss_sum / batches as f64, acc };
        on_epoch(&log);
        logs.push(log);
    }
    Ok(logs)
}

fn train_step(
    model: &mut Model<f32>,
    opt: &mut AdamW,
    images: &Tensor<f32>,
    labels: &[usize],
    lr: f64,
    clip: Option<f64>,
    step: usize,
) -> Result<f64> {
    let mut grads = {
        let tape = Tape::new();
        let p = model.params.bind(&tape, true);
        let logits = model.forward(&p, tape.constant(images.clone()))?;
        let loss = logits.cross_entropy(labels)?;
        let value = loss.value().data()[0] as f64;
        if !value.is_finite() {
            return Err(Error::NonFinite { step, layer: first_non_finite(model, images) });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Tensor<f32>> = p.vars().iter().map(|&v| g.get_or_zeros(v)).collect();
        (grads, value)
    };
    if let Some(bad) = grads.0.iter().position(|g| !g.is_finite()) {
        let name = model.params.iter().nth(bad).map(|p| p.name.clone()).unwrap_or_default();
        return Err(Error::NonFinite { step, layer: format!("gradient of {name}") });
    }
    if let Some(max) = clip {
        clip_global_norm(&mut grads.0, max);
    }
    opt.step(&mut model.params, &grads.0, lr);
    Ok(grads.1)
}

/// Name of the first observed layer whose output is not finite, or
/// `cross_entropy` when every layer output is finite.
pub fn first_non_finite(model: &Model<f32>, images: &Tensor<f32>) -> String {
    if model.params.iter().any(|p| !p.value.is_finite()) {
        let bad = model.params.iter().find(|p| !p.value.is_finite()).expect("exists");
        return format!("parameter {}", bad.name);
    }
    let tape = Tape::new();
    let p = model.params.bind(&tape, false);
    let mut first: Option<String> = None;
    let result = model.forward_observed(&p, tape.constant(images.clone()), &mut |name, v| {
        if first.is_none() && !v.value().is_finite() {
            first = Some(name.to_string());
        }
    });
    match (first, result) {
        (Some(name), _) => name,
        (None, Err(e)) => format!("forward error: {e}"),
        (None, Ok(_)) => "cross_entropy".to_string(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Metrics {
    pub correct: usize,
    pub total: usize,
    pub top1: f64,
}

/// Top-1 accuracy; argmax ties resolve to the lowest class index.
pub fn evaluate(model: &Model<f32>, data: &Dataset) -> Result<Metrics> {
    if data.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let indices: Vec<usize> = (0..data.len()).collect();
    let mut correct = 0;
    for chunk in indices.chunks(EVAL_BATCH) {
        let (images, labels) = data.batch::<f32>(chunk);
        let logits = model.logits(&images)?;
        let classes = logits.shape()[1];
        correct += logits.data().chunks(classes).zip(&labels).filter(|(row, &l)| argmax(row) == l).count();
    }
    Ok(Metrics { correct, total: data.len(), top1: correct as f64 / data.len() as f64 })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub class: usize,
    pub logits: Vec<f32>,
}

/// Classifies a `C×H×W` image or an `N×C×H×W` batch.
pub fn predict(model: &Model<f32>, images: &Tensor<f32>) -> Result<Vec<Prediction>> {
    let batch = match images.ndim() {
        3 => {
            let mut shape = vec![1];
            shape.extend_from_slice(images.shape());
            images.reshape(shape)?
        }
        4 => images.clone(),
        _ => return Err(dim_err!("predict expects C×H×W or N×C×H×W, got {:?}", images.shape())),
    };
    let logits = model.logits(&batch)?;
    let classes = logits.shape()[1];
    Ok(logits.data().chunks(classes).map(|row| Prediction { class: argmax(row), logits: row.to_vec() }).collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRow {
    pub mode: TopKMode,
    pub fraction: Option<f64>,
    pub top1: f64,
}

impl SweepRow {
    pub const HEADER: &'static str = "mode,fraction,top1";
}

impl fmt::Display for SweepRow {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let mode = match self.mode {
            TopKMode::Gdtko => "gdtko",
            TopKMode::Fixed => "fixed",
            TopKMode::Dense => "dense",
        };
        match self.fraction {
            Some(fr) => write!(f, "{mode},{fr},{:.4}", self.top1),
            None => write!(f, "{mode},,{:.4}", self.top1),
        }
    }
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = format!("{}\n", SweepRow::HEADER);
    for r in rows {
        out.push_str(&format!("{r}\n"));
    }
    out
}

/// Trains and scores a fresh model for one attention mode.
pub fn train_and_score(
    cfg: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
) -> Result<f64> {
    let mut model = Model::<f32>::build(cfg, train_cfg.seed)?;
    let quiet = TrainConfig { eval_every_epoch: false, ..train_cfg.clone() };
    train(&mut model, &quiet, train_data, &mut |_| {}, None)?;
    Ok(evaluate(&model, eval_data)?.top1)
}

/// One row per fixed fraction, then one adaptive row. Every point trains a
/// fresh model from the same seed.
pub fn sweep_k(
    base: &ModelConfig,
    train_cfg: &TrainConfig,
    train_data: &Dataset,
    eval_data: &Dataset,
    fractions: &[f64],
    on_row: &mut dyn FnMut(&SweepRow),
) -> Result<Vec<SweepRow>> {
    if let Some(bad) = fractions.iter().find(|f| !(**f > 0.0 && **f <= 1.0)) {
        return Err(Error::Config(format!("fraction {bad} outside (0, 1]")));
    }
    let mut points: Vec<(TopKMode, Option<f64>)> = fractions.iter().map(|&f| (TopKMode::Fixed, Some(f))).collect();
    points.push((TopKMode::Gdtko, None));
    let mut rows = Vec::with_capacity(points.len());
    for (mode, fraction) in points {
        let mut cfg = base.clone();
        cfg.topk_mode = mode;
        if let Some(f) = fraction {
            cfg.fixed_k_fraction = f;
        }
        let top1 = train_and_score(&cfg, train_cfg, train_data, eval_data)?;
        let row = SweepRow { mode, fraction, top1 };
        on_row(&row);
        rows.push(row);
    }
    Ok(rows)
}
