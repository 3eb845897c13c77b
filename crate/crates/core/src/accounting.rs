//! Parameter and multiply-accumulate accounting from the layer shape log.
//!
//! Conventions: a convolution costs `k²·(Cin/groups)·Cout·Hout·Wout`; channel
//! attention costs `d²·HW` for `Q·Kᵀ` plus `d²·HW` for `attn·V`, per head; a
//! linear layer costs `Cin·Cout` per position. Activations, normalization,
//! softmax, pooling and masking are free.

use std::fmt::Write as _;

use crate::error::{dim_err, Result};
use crate::model::{Model, TOTAL_STRIDE};
use crate::nn::{LayerKind, LayerSpec, ParamStore};
use crate::tensor::Scalar;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingRow {
    pub path: String,
    pub kind: &'static str,
    pub params: u64,
    pub macs: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AccountingReport {
    pub model: String,
    pub rows: Vec<AccountingRow>,
    pub total_params: u64,
    pub total_macs: u64,
    /// Square input side the MACs were computed for, if any.
    pub resolution: Option<usize>,
}

/// Closed-form parameter count of one layer.
pub fn layer_params(kind: &LayerKind) -> u64 {
    let n = match *kind {
        LayerKind::Conv { in_channels, out_channels, kernel, groups, bias, .. } => {
            kernel * kernel * in_channels / groups * out_channels + if bias { out_channels } else { 0 }
        }
        LayerKind::LayerNorm { channels } => 2 * channels,
        LayerKind::Linear { in_features, out_features } => in_features * out_features + out_features,
        LayerKind::RelPosBias { heads, head_dim } => heads * head_dim * head_dim,
        LayerKind::ChannelAttention { .. } => 0,
    };
    n as u64
}

/// MACs of one layer whose input is `side × side`. Linear layers are applied
/// to a pooled vector (one position).
pub fn layer_macs(kind: &LayerKind, side: usize) -> u64 {
    let n = match *kind {
        LayerKind::Conv { in_channels, out_channels, kernel, stride, padding, groups, .. } => {
            let out = (side + 2 * padding - kernel) / stride + 1;
            kernel * kernel * (in_channels / groups) * out_channels * out * out
        }
        LayerKind::Linear { in_features, out_features } => in_features * out_features,
        LayerKind::ChannelAttention { heads, head_dim } => 2 * head_dim * head_dim * side * side * heads,
        LayerKind::LayerNorm { .. } | LayerKind::RelPosBias { .. } => 0,
    };
    n as u64
}

/// Brute-force element count over the registry.
pub fn registry_params<T: Scalar>(store: &ParamStore<T>) -> u64 {
    store.iter().map(|p| p.value.numel() as u64).sum()
}

fn report(model: &str, layers: &[LayerSpec], resolution: Option<usize>) -> AccountingReport {
    let rows: Vec<AccountingRow> = layers
        .iter()
        .map(|l| AccountingRow {
            path: l.path.clone(),
            kind: l.kind.name(),
            params: layer_params(&l.kind),
            macs: resolution.map_or(0, |r| layer_macs(&l.kind, r / l.scale)),
        })
        .collect();
    AccountingReport {
        model: model.to_string(),
        total_params: rows.iter().map(|r| r.params).sum(),
        total_macs: rows.iter().map(|r| r.macs).sum(),
        rows,
        resolution,
    }
}

pub fn count_params<T: Scalar>(model: &Model<T>) -> AccountingReport {
    report(&model.cfg.name, &model.layers, None)
}

/// Parameter and MAC tallies for a square `resolution × resolution` input.
pub fn count_macs<T: Scalar>(model: &Model<T>, resolution: usize) -> Result<AccountingReport> {
    if resolution < TOTAL_STRIDE || !resolution.is_multiple_of(TOTAL_STRIDE) {
        return Err(dim_err!("resolution {resolution} must be a positive multiple of {TOTAL_STRIDE}"));
    }
    Ok(report(&model.cfg.name, &model.layers, Some(resolution)))
}

impl AccountingReport {
    pub fn params_millions(&self) -> f64 {
        self.total_params as f64 / 1e6
    }

    pub fn macs_giga(&self) -> f64 {
        self.total_macs as f64 / 1e9
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("path,kind,params,macs\n");
        for r in &self.rows {
            let _ = writeln!(out, "{},{},{},{}", r.path, r.kind, r.params, r.macs);
        }
        let _ = writeln!(out, "total,,{},{}", self.total_params, self.total_macs);
        out
    }

    pub fn to_table(&self) -> String {
        let width = self.rows.iter().map(|r| r.path.len()).max().unwrap_or(0).max(5);
        let mut out = String::new();
        match self.resolution {
            Some(r) => {
                let _ = writeln!(out, "# {} at {r}x{r}", self.model);
            }
            None => {
                let _ = writeln!(out, "# {}", self.model);
            }
        }
        let _ = writeln!(out, "# softmax, normalization, activation, pooling and masking count 0 MACs");
        let _ = writeln!(out, "{:<width$}  {:<17}  {:>10}  {:>14}", "path", "kind", "params", "macs");
        for r in &self.rows {
            let _ = writeln!(out, "{:<width$}  {:<17}  {:>10}  {:>14}", r.path, r.kind, r.params, r.macs);
        }
        let _ = writeln!(out, "{:<width$}  {:<17}  {:>10}  {:>14}", "total", "", self.total_params, self.total_macs);
        let _ = write!(out, "params {:.2} M", self.params_millions());
        if self.resolution.is_some() {
            let _ = write!(out, ", MACs {:.3} G", self.macs_giga());
        }
        out.push('\n');
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn conv(cin: usize, cout: usize, k: usize, stride: usize, padding: usize, groups: usize) -> LayerKind {
        LayerKind::Conv { in_channels: cin, out_channels: cout, kernel: k, stride, padding, groups, bias: true }
    }

    #[test]
    fn closed_forms() {
        assert_eq!(layer_params(&conv(16, 32, 1, 1, 0, 1)), 544);
        assert_eq!(layer_params(&conv(16, 16, 3, 1, 1, 16)), 160);
        assert_eq!(layer_macs(&conv(3, 8, 3, 1, 1, 1), 32), 221_184);
        let attn = LayerKind::ChannelAttention { heads: 1, head_dim: 10 };
        assert_eq!(layer_macs(&attn, 56), 627_200);
    }

    #[test]
    fn micro_rows_match_registry() {
        let model = Model::<f32>::build(&ModelConfig::micro(), 0).unwrap();
        let report = count_params(&model);
        assert_eq!(report.total_params, registry_params(&model.params));
        for (row, layer) in report.rows.iter().zip(&model.layers) {
            let direct: u64 = layer.params.iter().map(|n| model.params.by_name(n).unwrap().numel() as u64).sum();
            assert_eq!(row.params, direct, "{}", row.path);
        }
    }

    #[test]
    fn csv_has_header_and_total() {
        let model = Model::<f32>::build(&ModelConfig::micro(), 0).unwrap();
        let csv = count_macs(&model, 64).unwrap().to_csv();
        assert!(csv.starts_with("path,kind,params,macs\n"));
        assert!(csv.lines().last().unwrap().starts_with("total,,"));
        assert!(count_macs(&model, 100).is_err());
    }
}
