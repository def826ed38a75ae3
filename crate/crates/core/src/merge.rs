//! Per-layer merging: orthogonalize factors, form full-rank task matrices,
//! decouple, and merge magnitudes and directions separately.
//!
//! `ΔW = λ · recompose(Σ_i α_i, Σ_j W̄_j)`, with `λ = 1/n²` unless set.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::checkpoint::{AdapterSet, BaseCheckpoint, Checkpoint, Dtype, LoraLayer, TensorRecord};
use crate::error::{Error, Result};
use crate::linalg::{
    decouple, recompose, sum_matrices, svd_truncate, DecoupledLayer, DirectionMatrix, MagnitudeMode,
    MagnitudeVector, TaskMatrix,
};
use crate::ortho::{orthogonalize_group, OrthoConfig, OrthoStats};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    DoMerging,
    /// `λ Σ W_i`, no orthogonalization, no decoupling.
    TaskArithmetic,
    /// `(1/n) Σ W_i`; ignores λ.
    Average,
}

impl Method {
    pub fn as_str(self) -> &'static str {
        match self {
            Method::DoMerging => "do_merging",
            Method::TaskArithmetic => "task_arithmetic",
            Method::Average => "average",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace('-', "_").as_str() {
            "do_merging" | "do" => Ok(Method::DoMerging),
            "task_arithmetic" | "ta" => Ok(Method::TaskArithmetic),
            "average" | "avg" => Ok(Method::Average),
            _ => Err(Error::Parameter(format!(
                "unknown method {s:?} (expected do_merging, task_arithmetic or average)"
            ))),
        }
    }
}

/// What each merged layer is written as.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// Full-rank `ΔW` per layer.
    #[default]
    Delta,
    /// `W_pre + ΔW`; needs a base checkpoint.
    Fused,
    /// `ΔW` refactored into rank-`r` LoRA factors.
    LowRank(usize),
}

impl fmt::Display for OutputMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            OutputMode::Delta => f.write_str("delta"),
            OutputMode::Fused => f.write_str("fused"),
            OutputMode::LowRank(r) => write!(f, "lowrank:{r}"),
        }
    }
}

impl FromStr for OutputMode {
    type Err = Error;

    /// Accepts `delta`, `fused`, `lowrank:R` and `lowrank(R)`.
    fn from_str(s: &str) -> Result<Self> {
        let lower = s.trim().to_ascii_lowercase();
        match lower.as_str() {
            "delta" => return Ok(OutputMode::Delta),
            "fused" => return Ok(OutputMode::Fused),
            _ => {}
        }
        let rank = lower
            .strip_prefix("lowrank:")
            .or_else(|| lower.strip_prefix("lowrank(").and_then(|r| r.strip_suffix(')')))
            .ok_or_else(|| {
                Error::Parameter(format!("unknown output mode {s:?} (expected delta, fused or lowrank:R)"))
            })?;
        let r: usize = rank
            .parse()
            .map_err(|_| Error::Parameter(format!("bad rank in output mode {s:?}")))?;
        if r == 0 {
            return Err(Error::Parameter("low-rank output needs rank ≥ 1".into()));
        }
        Ok(OutputMode::LowRank(r))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergeConfig {
    /// Merging coefficient; `None` means `1/n²`.
    pub lambda: Option<f64>,
    pub magnitude_mode: MagnitudeMode,
    pub method: Method,
    /// `None` disables factor orthogonalization.
    pub ortho: Option<OrthoConfig>,
    pub decouple: bool,
    pub output_mode: OutputMode,
}

impl Default for MergeConfig {
    fn default() -> Self {
        Self {
            lambda: None,
            magnitude_mode: MagnitudeMode::Column,
            method: Method::DoMerging,
            ortho: Some(OrthoConfig::default()),
            decouple: true,
            output_mode: OutputMode::Delta,
        }
    }
}

impl MergeConfig {
    pub fn validate(&self) -> Result<()> {
        if let Some(l) = self.lambda {
            if !(l.is_finite() && l > 0.0) {
                return Err(Error::Parameter(format!("lambda must be positive, got {l}")));
            }
        }
        if let OutputMode::LowRank(0) = self.output_mode {
            return Err(Error::Parameter("low-rank output needs rank ≥ 1".into()));
        }
        if let Some(o) = &self.ortho {
            o.validate()?;
        }
        Ok(())
    }

    /// λ actually used for `n` adapters.
    pub fn effective_lambda(&self, n: usize) -> f64 {
        match self.method {
            Method::Average => 1.0 / n as f64,
            _ => self.lambda.unwrap_or(1.0 / (n * n) as f64),
        }
    }
}

/// Orthogonalization statistics for the two factor groups of one layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FactorOrthoStats {
    pub b: OrthoStats,
    pub a: OrthoStats,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedLayer {
    pub layer_key: String,
    pub delta: TaskMatrix,
    pub fused: Option<TaskMatrix>,
    pub lowrank: Option<(TaskMatrix, TaskMatrix)>,
    pub lambda: f64,
    pub ortho: Option<FactorOrthoStats>,
}

/// `scaling · (B · A)`.
pub fn assemble_full_rank(layer: &LoraLayer) -> Result<TaskMatrix> {
    let w = layer.b.matmul(&layer.a)?;
    Ok(if layer.scaling == 1.0 { w } else { w.scale(layer.scaling) })
}

/// Orthogonalizes the B group (as `m × r_i`) and the A group (as its
/// transposes, `n × r_i`) independently, then forms the products.
pub(crate) fn orthogonalized_products(layers: &[&LoraLayer], cfg: &OrthoConfig) -> Result<(Vec<TaskMatrix>, FactorOrthoStats)> {
    let bs: Vec<TaskMatrix> = layers.iter().map(|l| l.scaled_b()).collect();
    let ats: Vec<TaskMatrix> = layers.iter().map(|l| l.a.transpose()).collect();
    let (bs, b_stats) = orthogonalize_group(&bs, cfg)?;
    let (ats, a_stats) = orthogonalize_group(&ats, cfg)?;
    let ws = bs
        .iter()
        .zip(&ats)
        .map(|(b, at)| b.matmul(&at.transpose()))
        .collect::<Result<Vec<_>>>()?;
    Ok((ws, FactorOrthoStats { b: b_stats, a: a_stats }))
}

/// `λ · recompose(Σ α_i, Σ W̄_j)`.
pub fn merge_decoupled(ws: &[TaskMatrix], mode: MagnitudeMode, lambda: f64) -> Result<TaskMatrix> {
    let parts = ws.iter().map(|w| decouple(w, mode)).collect::<Result<Vec<_>>>()?;
    let first = parts.first().ok_or_else(|| Error::dim("nothing to merge"))?;
    let mut alpha = vec![0.0; first.magnitude.len()];
    for p in &parts {
        for (acc, a) in alpha.iter_mut().zip(&p.magnitude.values) {
            *acc += a;
        }
    }
    let direction = sum_matrices(parts.iter().map(|p| p.direction.matrix()))?;
    let merged = recompose(&DecoupledLayer {
        magnitude: MagnitudeVector { values: alpha, mode },
        direction: DirectionMatrix(direction),
    })?;
    Ok(merged.scale(lambda))
}

/// `λ Σ W_i`. Shared by task arithmetic and the no-decouple ablation so the
/// two agree bit for bit.
pub fn merge_linear(ws: &[TaskMatrix], lambda: f64) -> Result<TaskMatrix> {
    Ok(sum_matrices(ws)?.scale(lambda))
}

/// Merges one layer across all adapters. `base` is the pre-trained weight,
/// required for fused output.
pub fn merge_layer(layers: &[&LoraLayer], config: &MergeConfig, base: Option<&TaskMatrix>) -> Result<MergedLayer> {
    config.validate()?;
    let first = layers.first().ok_or_else(|| Error::Config("no adapters to merge".into()))?;
    let shape = first.full_shape();
    for l in layers {
        if l.full_shape() != shape {
            return Err(Error::dim(format!(
                "layer {:?}: full-rank shapes {:?} and {:?} differ",
                first.layer_key,
                shape,
                l.full_shape()
            )));
        }
    }
    let n = layers.len();
    let lambda = config.effective_lambda(n);

    let (delta, ortho) = match config.method {
        Method::TaskArithmetic | Method::Average => {
            let ws = layers.iter().map(|l| assemble_full_rank(l)).collect::<Result<Vec<_>>>()?;
            (merge_linear(&ws, lambda)?, None)
        }
        Method::DoMerging => {
            let (ws, stats) = match &config.ortho {
                Some(cfg) => {
                    let (ws, stats) = orthogonalized_products(layers, cfg)?;
                    (ws, Some(stats))
                }
                None => (layers.iter().map(|l| assemble_full_rank(l)).collect::<Result<Vec<_>>>()?, None),
            };
            let delta = if config.decouple {
                merge_decoupled(&ws, config.magnitude_mode, lambda)?
            } else {
                merge_linear(&ws, lambda)?
            };
            (delta, stats)
        }
    };

    let fused = match config.output_mode {
        OutputMode::Fused => {
            let base = base.ok_or_else(|| Error::Config("fused output requires a base checkpoint".into()))?;
            if base.shape() != delta.shape() {
                return Err(Error::dim(format!(
                    "layer {:?}: base weight is {:?}, merged delta is {:?}",
                    first.layer_key,
                    base.shape(),
                    delta.shape()
                )));
            }
            Some(base.add(&delta)?)
        }
        _ => None,
    };
    let lowrank = match config.output_mode {
        OutputMode::LowRank(r) => Some(svd_truncate(&delta, r)?),
        _ => None,
    };
    Ok(MergedLayer { layer_key: first.layer_key.clone(), delta, fused, lowrank, lambda, ortho })
}

/// Merges every aligned layer, in parallel across layers when enabled.
pub fn merge_adapter_set(
    adapters: &AdapterSet,
    base: Option<&BaseCheckpoint>,
    config: &MergeConfig,
) -> Result<BTreeMap<String, MergedLayer>> {
    config.validate()?;
    if adapters.is_empty() {
        return Err(Error::Config("no adapters to merge".into()));
    }
    if config.output_mode == OutputMode::Fused && base.is_none() {
        return Err(Error::Config("fused output requires a base checkpoint".into()));
    }
    let keys = adapters.layer_keys();
    let merged = crate::par::map(&keys, |key| -> Result<MergedLayer> {
        let group = adapters.layer_group(key)?;
        let base_w = match (config.output_mode, base) {
            (OutputMode::Fused, Some(b)) => Some(b.layer(key)?.1),
            _ => None,
        };
        merge_layer(&group, config, base_w.as_ref())
    });
    keys.into_iter()
        .zip(merged)
        .map(|(k, m)| m.map(|m| (k, m)))
        .collect()
}

/// Packs merged layers into an output checkpoint.
///
/// * delta: `<layer>.weight` holds `ΔW`;
/// * lowrank: `<layer>.lora_A.weight` / `<layer>.lora_B.weight`;
/// * fused: a copy of the base with each matched tensor replaced by
///   `W_pre + ΔW`, kept in the base tensor's dtype unless `dtype` is given.
///
/// `dtype` defaults to f32 for delta and lowrank output.
pub fn merged_checkpoint(
    merged: &BTreeMap<String, MergedLayer>,
    base: Option<&BaseCheckpoint>,
    config: &MergeConfig,
    dtype: Option<Dtype>,
) -> Result<Checkpoint> {
    let mut out = match config.output_mode {
        OutputMode::Fused => base
            .ok_or_else(|| Error::Config("fused output requires a base checkpoint".into()))?
            .source
            .clone(),
        _ => Checkpoint::new(),
    };
    let dt = dtype.unwrap_or(Dtype::F32);
    for (key, layer) in merged {
        match config.output_mode {
            OutputMode::Delta => {
                out.insert(format!("{key}.weight"), TensorRecord::from_matrix(&layer.delta, dt)?);
            }
            OutputMode::LowRank(_) => {
                let (b, a) = layer.lowrank.as_ref().expect("low-rank factors computed in low-rank mode");
                out.insert(format!("{key}.lora_A.weight"), TensorRecord::from_matrix(a, dt)?);
                out.insert(format!("{key}.lora_B.weight"), TensorRecord::from_matrix(b, dt)?);
            }
            OutputMode::Fused => {
                let base = base.expect("checked above");
                let name = base
                    .resolve_key(key)
                    .ok_or_else(|| Error::Alignment(format!("base checkpoint has no weights for layer {key:?}")))?;
                let fused = layer.fused.as_ref().expect("fused weights computed in fused mode");
                let keep = dtype.unwrap_or(base.source.tensors[&name].dtype);
                out.insert(name, TensorRecord::from_matrix(fused, keep)?);
            }
        }
    }
    out.metadata.insert("merge_method".into(), config.method.to_string());
    out.metadata.insert("output_mode".into(), config.output_mode.to_string());
    if let Some(l) = merged.values().next() {
        out.metadata.insert("lambda".into(), format!("{:.17e}", l.lambda));
    }
    Ok(out)
}
