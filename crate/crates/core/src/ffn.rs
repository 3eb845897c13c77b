//! Hierarchical scale-sensitive gated feed-forward network.
//!
//! One pointwise projection `C → e·C` feeds both the value path and the gate
//! path. The gate path splits its channels into four equal groups, runs a
//! depthwise convolution of kernel size 1, 3, 5 and 7 on each group, and
//! applies GELU. The value path is multiplied by the gate and projected back
//! to `C`. The residual connection is left to the caller.

use crate::autodiff::Var;
use crate::error::{config_err, Result};
use crate::nn::{Bound, Conv, ModuleBuilder};
use crate::tensor::Scalar;

pub const GATE_KERNELS: [usize; 4] = [1, 3, 5, 7];

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct HssfgnConfig {
    pub channels: usize,
    pub expansion: f64,
}

impl HssfgnConfig {
    pub fn new(channels: usize) -> Self {
        HssfgnConfig { channels, expansion: 2.0 }
    }

    pub fn hidden(&self) -> usize {
        (self.channels as f64 * self.expansion).round() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let h = self.hidden();
        if h == 0 || !h.is_multiple_of(GATE_KERNELS.len()) {
            return Err(config_err!(
                "hidden width {h} (C = {}, expansion {}) must be a positive multiple of 4",
                self.channels,
                self.expansion
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Hssfgn {
    pub cfg: HssfgnConfig,
    pub project_in: Conv,
    pub gate_convs: [Conv; 4],
    pub project_out: Conv,
}

impl Hssfgn {
    pub fn new<T: Scalar>(b: &mut ModuleBuilder<'_, T>, cfg: HssfgnConfig) -> Result<Self> {
        cfg.validate()?;
        let hidden = cfg.hidden();
        let group = hidden / GATE_KERNELS.len();
        let project_in = b.pointwise("project_in", cfg.channels, hidden)?;
        let mut gate = b.child("gate");
        let mut convs = Vec::with_capacity(4);
        for k in GATE_KERNELS {
            convs.push(gate.depthwise(&format!("dw{k}"), group, k)?);
        }
        let gate_convs = [convs[0], convs[1], convs[2], convs[3]];
        let project_out = b.pointwise("project_out", hidden, cfg.channels)?;
        Ok(Hssfgn { cfg, project_in, gate_convs, project_out })
    }

    /// Four-scale depthwise gate: split, depthwise conv per group, concat, GELU.
    pub fn gate_branch<'t, T: Scalar>(&self, p: &Bound<'t, T>, x_g: Var<'t, T>) -> Result<Var<'t, T>> {
        let hidden = x_g.shape()[1];
        if !hidden.is_multiple_of(4) {
            return Err(config_err!("gate width {hidden} is not divisible by 4"));
        }
        let groups = x_g.split_channels(&[hidden / 4; 4])?;
        let scaled =
            groups.into_iter().zip(&self.gate_convs).map(|(g, conv)| conv.forward(p, g)).collect::<Result<Vec<_>>>()?;
        Var::concat_channels(&scaled)?.gelu()
    }

    pub fn forward<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>) -> Result<Var<'t, T>> {
        self.forward_with(p, x, GatePath::MultiScale)
    }

    pub fn forward_with<'t, T: Scalar>(&self, p: &Bound<'t, T>, x: Var<'t, T>, gate: GatePath) -> Result<Var<'t, T>> {
        let shared = self.project_in.forward(p, x)?;
        let gated = match gate {
            GatePath::MultiScale => shared.mul(self.gate_branch(p, shared)?)?,
            GatePath::Ones => shared,
        };
        self.project_out.forward(p, gated)
    }
}

/// `Ones` replaces the multi-scale gate by a constant one (plain FFN).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum GatePath {
    MultiScale,
    Ones,
}
