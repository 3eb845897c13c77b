//! Central finite-difference verification of tape gradients.

use std::rc::Rc;

use rand::seq::index;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{AtkSpa, AttentionConfig, TopKMode};
use crate::autodiff::{ConvOptions, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{FraesormerBlock, Model, ModelConfig};
use crate::nn::{Bound, ModuleBuilder, ParamStore};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy)]
pub struct GradCheckOptions {
    /// Finite-difference step `h`.
    pub step: f64,
    /// Lower bound on the denominator of the relative error.
    pub abs_floor: f64,
    /// Checks at most this many randomly chosen elements per input.
    pub max_elements: Option<usize>,
    pub seed: u64,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        GradCheckOptions { step: 1e-5, abs_floor: 1e-8, max_elements: None, seed: 0 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub input: usize,
    pub element: usize,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub checked: usize,
    /// Element with the largest relative error.
    pub worst: Option<Mismatch>,
}

fn scalar_of(v: Var<'_, f64>) -> Result<f64> {
    let value = v.value();
    if value.numel() != 1 {
        return Err(Error::Contract(format!(
            "gradcheck needs a scalar-valued function, got shape {:?}",
            value.shape()
        )));
    }
    Ok(value.data()[0])
}

fn evaluate<F>(f: &F, inputs: &[Tensor<f64>]) -> Result<f64>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)
}

/// Compares tape gradients of the scalar function `f` against central
/// differences `(f(x+h) − f(x−h)) / 2h` for every input element (or a seeded
/// sample of them) and returns the maximum relative error
/// `|a − n| / max(|a|, |n|, abs_floor)`.
pub fn gradcheck<F>(f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let tape = Tape::new();
    let vars: Vec<_> = inputs.iter().map(|t| tape.leaf(t.clone(), true)).collect();
    let out = f(&tape, &vars)?;
    scalar_of(out)?;
    let grads = tape.backward(out)?;
    let analytic: Vec<Tensor<f64>> = vars.iter().map(|&v| grads.get_or_zeros(v)).collect();
    drop(grads);

    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut report = GradCheckReport { max_rel_error: 0.0, checked: 0, worst: None };
    let mut probe = inputs.to_vec();
    for (input, grad) in analytic.iter().enumerate() {
        let numel = inputs[input].numel();
        let elements: Vec<usize> = match opts.max_elements {
            Some(m) if m < numel => {
                let mut picked = index::sample(&mut rng, numel, m).into_vec();
                picked.sort_unstable();
                picked
            }
            _ => (0..numel).collect(),
        };
        for element in elements {
            let orig = inputs[input].data()[element];
            probe[input].data_mut()[element] = orig + opts.step;
            let plus = evaluate(&f, &probe)?;
            probe[input].data_mut()[element] = orig - opts.step;
            let minus = evaluate(&f, &probe)?;
            probe[input].data_mut()[element] = orig;

            let numeric = (plus - minus) / (2.0 * opts.step);
            let a = grad.data()[element];
            let denom = a.abs().max(numeric.abs()).max(opts.abs_floor);
            let rel = (a - numeric).abs() / denom;
            report.checked += 1;
            if rel > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(rel);
                report.worst = Some(Mismatch { input, element, analytic: a, numeric });
            }
        }
    }
    Ok(report)
}

/// Outcome of one named check in [`suite`].
#[derive(Debug, Clone)]
pub struct SuiteEntry {
    pub name: String,
    pub tolerance: f64,
    pub report: GradCheckReport,
}

impl SuiteEntry {
    pub fn passed(&self) -> bool {
        self.report.max_rel_error < self.tolerance
    }
}

/// Per-op tolerance.
pub const OP_TOLERANCE: f64 = 1e-5;
pub const BLOCK_TOLERANCE: f64 = 1e-4;
pub const END_TO_END_TOLERANCE: f64 = 1e-3;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor<f64> {
    let n = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|_| rng.random_range(-scale..scale)).collect())
}

/// Fixed, input-independent projection weights so that `Σ w·y` has
/// distinct gradients at every output position.
fn probe_weights(shape: &[usize]) -> Tensor<f64> {
    let n: usize = shape.iter().product();
    Tensor::from_parts(shape.to_vec(), (0..n).map(|i| (0.37 * i as f64 + 0.1).sin()).collect())
}

fn project<'t>(tape: &'t Tape<f64>, y: Var<'t, f64>) -> Result<Var<'t, f64>> {
    let w = tape.constant(probe_weights(&y.shape()));
    y.mul(w)?.sum_all()
}

fn check<F>(name: &str, tolerance: f64, f: F, inputs: &[Tensor<f64>], opts: GradCheckOptions) -> Result<SuiteEntry>
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    Ok(SuiteEntry { name: name.to_string(), tolerance, report: gradcheck(f, inputs, opts)? })
}

/// Moves every parameter away from its initializer so gradients are not
/// vanishingly small.
fn perturbed(store: &ParamStore<f64>, rng: &mut ChaCha8Rng) -> Vec<Tensor<f64>> {
    store
        .iter()
        .map(|p| {
            let noise = random(rng, p.value.shape(), 0.3);
            let data = p.value.data().iter().zip(noise.data()).map(|(a, b)| a + b).collect();
            Tensor::from_parts(p.value.shape().to_vec(), data)
        })
        .collect()
}

/// Finite-difference checks for every differentiable op, one attention
/// layer, one backbone block and the micro model end to end.
pub fn suite(seed: u64) -> Result<Vec<SuiteEntry>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let opts = GradCheckOptions { seed, ..GradCheckOptions::default() };
    let mut out = Vec::new();
    let x4 = random(&mut rng, &[2, 4, 5, 5], 1.0);
    let y4 = random(&mut rng, &[2, 4, 5, 5], 1.0);

    out.push(check("add", OP_TOLERANCE, |t, v| project(t, v[0].add(v[1])?), &[x4.clone(), y4.clone()], opts)?);
    out.push(check("sub", OP_TOLERANCE, |t, v| project(t, v[0].sub(v[1])?), &[x4.clone(), y4.clone()], opts)?);
    out.push(check("mul", OP_TOLERANCE, |t, v| project(t, v[0].mul(v[1])?), &[x4.clone(), y4.clone()], opts)?);
    out.push(check("scale", OP_TOLERANCE, |t, v| project(t, v[0].scale(-1.7)?), std::slice::from_ref(&x4), opts)?);
    let b = random(&mut rng, &[5, 5], 1.0);
    out.push(check(
        "add_broadcast",
        OP_TOLERANCE,
        |t, v| project(t, v[0].add_broadcast(v[1])?),
        &[x4.clone(), b],
        opts,
    )?);
    out.push(check(
        "gelu",
        OP_TOLERANCE,
        |t, v| project(t, v[0].scale(2.0)?.gelu()?),
        std::slice::from_ref(&x4),
        opts,
    )?);
    out.push(check(
        "sigmoid",
        OP_TOLERANCE,
        |t, v| project(t, v[0].scale(2.0)?.sigmoid()?),
        std::slice::from_ref(&x4),
        opts,
    )?);
    let keep: Rc<[bool]> = (0..x4.numel()).map(|i| i % 3 != 0).collect();
    out.push(check(
        "masked_fill",
        OP_TOLERANCE,
        |t, v| project(t, v[0].masked_fill(keep.clone(), 0.25)?),
        std::slice::from_ref(&x4),
        opts,
    )?);

    let a = random(&mut rng, &[2, 3, 4], 1.0);
    let m = random(&mut rng, &[2, 4, 5], 1.0);
    out.push(check("matmul", OP_TOLERANCE, |t, v| project(t, v[0].matmul(v[1])?), &[a, m], opts)?);
    let xl = random(&mut rng, &[3, 4], 1.0);
    let wl = random(&mut rng, &[4, 5], 1.0);
    let bl = random(&mut rng, &[5], 1.0);
    out.push(check("linear", OP_TOLERANCE, |t, v| project(t, v[0].linear(v[1], Some(v[2]))?), &[xl, wl, bl], opts)?);

    let convs: [(&str, usize, usize, ConvOptions); 5] = [
        ("conv2d 3x3", 4, 3, ConvOptions::new(1, 1, 1)),
        ("conv2d 3x3 stride 2", 4, 3, ConvOptions::new(2, 1, 1)),
        ("conv2d 1x1 grouped", 4, 1, ConvOptions::new(1, 0, 2)),
        ("conv2d 3x3 depthwise", 4, 3, ConvOptions::new(1, 1, 4)),
        ("conv2d 5x5 depthwise", 4, 5, ConvOptions::new(1, 2, 4)),
    ];
    for (name, c_out, k, o) in convs {
        let w = random(&mut rng, &[c_out, 4 / o.groups, k, k], 1.0);
        let bias = random(&mut rng, &[c_out], 1.0);
        out.push(check(
            name,
            OP_TOLERANCE,
            move |t, v| project(t, v[0].conv2d(v[1], Some(v[2]), o)?),
            &[x4.clone(), w, bias],
            opts,
        )?);
    }

    let gamma = random(&mut rng, &[4], 1.0);
    let beta = random(&mut rng, &[4], 1.0);
    out.push(check(
        "layer_norm_channels",
        OP_TOLERANCE,
        |t, v| project(t, v[0].layer_norm_channels(v[1], v[2], 1e-6)?),
        &[x4.clone(), gamma, beta],
        opts,
    )?);
    let s = random(&mut rng, &[2, 3, 6], 2.0);
    out.push(check(
        "softmax_rows",
        OP_TOLERANCE,
        |t, v| project(t, v[0].softmax_rows()?),
        std::slice::from_ref(&s),
        opts,
    )?);
    let sel: Rc<[bool]> = (0..s.numel()).map(|i| i % 6 == 0 || i % 4 == 1).collect();
    out.push(check(
        "masked softmax (-inf)",
        OP_TOLERANCE,
        |t, v| project(t, v[0].masked_fill(sel.clone(), f64::NEG_INFINITY)?.softmax_rows()?),
        &[s],
        opts,
    )?);
    let logits = random(&mut rng, &[3, 4], 2.0);
    out.push(check("cross_entropy", OP_TOLERANCE, |_, v| v[0].cross_entropy(&[0, 3, 1]), &[logits], opts)?);
    out.push(check("sum_all", OP_TOLERANCE, |_, v| v[0].mul(v[0])?.sum_all(), std::slice::from_ref(&x4), opts)?);
    out.push(check("mean_all", OP_TOLERANCE, |_, v| v[0].mul(v[0])?.mean_all(), std::slice::from_ref(&x4), opts)?);
    out.push(check(
        "global_avg_pool",
        OP_TOLERANCE,
        |t, v| project(t, v[0].global_avg_pool()?),
        std::slice::from_ref(&x4),
        opts,
    )?);
    out.push(check(
        "reshape",
        OP_TOLERANCE,
        |t, v| project(t, v[0].reshape(vec![8, 25])?),
        std::slice::from_ref(&x4),
        opts,
    )?);
    out.push(check(
        "transpose",
        OP_TOLERANCE,
        |t, v| project(t, v[0].transpose(1, 3)?),
        std::slice::from_ref(&x4),
        opts,
    )?);
    out.push(check("narrow", OP_TOLERANCE, |t, v| project(t, v[0].narrow(2, 1, 3)?), std::slice::from_ref(&x4), opts)?);
    out.push(check(
        "split/concat channels",
        OP_TOLERANCE,
        |t, v| {
            let parts = v[0].split_channels(&[1, 3])?;
            let swapped = Var::concat_channels(&[parts[1].scale(2.0)?, parts[0]])?;
            project(t, swapped)
        },
        std::slice::from_ref(&x4),
        opts,
    )?);

    let few = GradCheckOptions { max_elements: Some(8), ..opts };
    for (name, mode) in [("atk-spa (fixed k)", TopKMode::Fixed), ("atk-spa (gdtko)", TopKMode::Gdtko)] {
        let cfg = AttentionConfig { topk_mode: mode, fixed_k_fraction: 0.5, ..AttentionConfig::new(16, 1) };
        let mut store = ParamStore::new();
        let mut layers = Vec::new();
        let mut init = ChaCha8Rng::seed_from_u64(seed);
        let attn = AtkSpa::new(&mut ModuleBuilder::new(&mut store, &mut layers, &mut init), cfg)?;
        let mut inputs = vec![random(&mut rng, &[2, 16, 4, 4], 1.0)];
        inputs.extend(perturbed(&store, &mut rng));
        out.push(check(
            name,
            BLOCK_TOLERANCE,
            |t, v| {
                let p = Bound::from_vars(v[1..].to_vec());
                project(t, attn.forward(&p, v[0])?)
            },
            &inputs,
            few,
        )?);
    }

    let micro = ModelConfig { topk_mode: TopKMode::Fixed, fixed_k_fraction: 0.5, ..ModelConfig::micro() };
    let mut store = ParamStore::new();
    let mut layers = Vec::new();
    let mut init = ChaCha8Rng::seed_from_u64(seed);
    let block = FraesormerBlock::new(
        &mut ModuleBuilder::new(&mut store, &mut layers, &mut init),
        AttentionConfig { heads: 2, ..micro.attention_config(3) },
        micro.ffn_config(3),
    )?;
    let mut inputs = vec![random(&mut rng, &[2, 32, 4, 4], 1.0)];
    inputs.extend(perturbed(&store, &mut rng));
    out.push(check(
        "fraesormer block",
        BLOCK_TOLERANCE,
        |t, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            project(t, block.forward(&p, v[0])?)
        },
        &inputs,
        few,
    )?);

    let model = Model::<f64>::build(&ModelConfig::micro(), seed)?;
    let mut inputs = vec![random(&mut rng, &[2, 3, 32, 32], 1.0)];
    inputs.extend(perturbed(&model.params, &mut rng));
    out.push(check(
        "micro model end to end",
        END_TO_END_TOLERANCE,
        |_, v| {
            let p = Bound::from_vars(v[1..].to_vec());
            model.forward(&p, v[0])?.cross_entropy(&[1, 3])
        },
        &inputs,
        few,
    )?);
    Ok(out)
}
