//! Measurements over adapter sets: magnitude distribution variance,
//! normalized average accuracy and pairwise cross-Gram norms.

use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::checkpoint::{write_atomic, AdapterSet, LoraLayer};
use crate::error::{Error, Result};
use crate::linalg::{decouple, MagnitudeMode, TaskMatrix};
use crate::merge::{assemble_full_rank, orthogonalized_products};
use crate::ortho::{orthogonalize_group, OrthoConfig};
use crate::report::{format_float, Json};

/// Population variance (divides by `n`).
pub fn population_variance(values: &[f64]) -> f64 {
    if values.is_empty() {
        return 0.0;
    }
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    values.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n
}

fn full_rank_group(adapters: &AdapterSet, key: &str) -> Result<Vec<TaskMatrix>> {
    adapters
        .layer_group(key)?
        .into_iter()
        .map(assemble_full_rank)
        .collect()
}

/// `v = Σ_k var_i(‖W_i^k‖_F)`: for each layer, the population variance of
/// the per-adapter Frobenius norms of the full-rank products, summed over
/// layers.
pub fn magnitude_distribution_variance(adapters: &AdapterSet) -> Result<f64> {
    let keys = adapters.layer_keys();
    let per_layer = crate::par::map(&keys, |key| -> Result<f64> {
        let norms: Vec<f64> = full_rank_group(adapters, key)?
            .iter()
            .map(TaskMatrix::frobenius_norm)
            .collect();
        Ok(population_variance(&norms))
    });
    let mut total = 0.0;
    for v in per_layer {
        total += v?;
    }
    Ok(total)
}

/// `acc_n = Σ merged_i / Σ finetuned_i`.
pub fn norm_average_accuracy(finetuned: &[f64], merged: &[f64]) -> Result<f64> {
    if finetuned.len() != merged.len() {
        return Err(Error::dim(format!(
            "{} fine-tuned accuracies but {} merged",
            finetuned.len(),
            merged.len()
        )));
    }
    let denom: f64 = finetuned.iter().sum();
    if !(denom > 0.0) {
        return Err(Error::Parameter("fine-tuned accuracies must have a positive sum".into()));
    }
    Ok(merged.iter().sum::<f64>() / denom)
}

/// `n × n` matrix of `‖W_iᵀW_j‖_F` (not squared); the diagonal holds the
/// self-Gram norms.
pub fn cross_gram_matrix(mats: &[TaskMatrix]) -> Result<Vec<Vec<f64>>> {
    let n = mats.len();
    let mut out = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i..n {
            let v = mats[i].t_matmul(&mats[j])?.frobenius_norm();
            out[i][j] = v;
            out[j][i] = v;
        }
    }
    Ok(out)
}

/// Sum of the strictly upper-triangular entries.
pub fn off_diagonal_sum(m: &[Vec<f64>]) -> f64 {
    m.iter()
        .enumerate()
        .flat_map(|(i, row)| row.iter().skip(i + 1))
        .sum()
}

/// Cross-Gram norms of one layer, on full-rank products and on the two
/// factor groups (`B_i` as `m × r_i`, `A_iᵀ` as `n × r_i`).
#[derive(Debug, Clone, PartialEq)]
pub struct LayerOrthogonality {
    pub full: Vec<Vec<f64>>,
    pub b: Option<Vec<Vec<f64>>>,
    pub a: Option<Vec<Vec<f64>>>,
}

/// Per-layer cross-Gram matrices, optionally after running the
/// orthogonalizer on the factor groups.
pub fn orthogonality_report(
    adapters: &AdapterSet,
    after_ortho: Option<&OrthoConfig>,
    include_factors: bool,
) -> Result<BTreeMap<String, LayerOrthogonality>> {
    let keys = adapters.layer_keys();
    let rows = crate::par::map(&keys, |key| -> Result<LayerOrthogonality> {
        let group: Vec<&LoraLayer> = adapters.layer_group(key)?;
        let (full, bs, ats) = match after_ortho {
            Some(cfg) => {
                let (ws, _) = orthogonalized_products(&group, cfg)?;
                let (bs, ats) = if include_factors {
                    let bs: Vec<_> = group.iter().map(|l| l.scaled_b()).collect();
                    let ats: Vec<_> = group.iter().map(|l| l.a.transpose()).collect();
                    (orthogonalize_group(&bs, cfg)?.0, orthogonalize_group(&ats, cfg)?.0)
                } else {
                    (Vec::new(), Vec::new())
                };
                (ws, bs, ats)
            }
            None => {
                let ws = group.iter().map(|l| assemble_full_rank(l)).collect::<Result<Vec<_>>>()?;
                let bs = group.iter().map(|l| l.scaled_b()).collect();
                let ats = group.iter().map(|l| l.a.transpose()).collect();
                (ws, bs, ats)
            }
        };
        Ok(LayerOrthogonality {
            full: cross_gram_matrix(&full)?,
            b: if include_factors { Some(cross_gram_matrix(&bs)?) } else { None },
            a: if include_factors { Some(cross_gram_matrix(&ats)?) } else { None },
        })
    });
    keys.into_iter()
        .zip(rows)
        .map(|(k, r)| r.map(|r| (k, r)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub adapter_names: Vec<String>,
    pub magnitude_mode: MagnitudeMode,
    pub magnitude_variance: f64,
    pub per_layer_cross_gram: BTreeMap<String, LayerOrthogonality>,
    /// Per-adapter `‖α_i‖` for every layer.
    pub per_layer_magnitude_stats: BTreeMap<String, Vec<f64>>,
    pub norm_average_accuracy: Option<f64>,
    pub after_ortho: bool,
}

#[derive(Debug, Clone, Default)]
pub struct DiagnosticsOptions {
    pub magnitude_mode: MagnitudeMode,
    pub after_ortho: Option<OrthoConfig>,
    pub include_factors: bool,
    /// `(fine-tuned, merged)` accuracies, when supplied.
    pub accuracies: Option<(Vec<f64>, Vec<f64>)>,
}

pub fn diagnose(adapters: &AdapterSet, opts: &DiagnosticsOptions) -> Result<DiagnosticsReport> {
    let keys = adapters.layer_keys();
    let stats = crate::par::map(&keys, |key| -> Result<Vec<f64>> {
        full_rank_group(adapters, key)?
            .iter()
            .map(|w| Ok(decouple(w, opts.magnitude_mode)?.magnitude.norm()))
            .collect()
    });
    let per_layer_magnitude_stats = keys
        .iter()
        .cloned()
        .zip(stats)
        .map(|(k, s)| s.map(|s| (k, s)))
        .collect::<Result<_>>()?;
    let norm_average_accuracy = match &opts.accuracies {
        Some((ft, merged)) => Some(norm_average_accuracy(ft, merged)?),
        None => None,
    };
    Ok(DiagnosticsReport {
        adapter_names: adapters.names.clone(),
        magnitude_mode: opts.magnitude_mode,
        magnitude_variance: magnitude_distribution_variance(adapters)?,
        per_layer_cross_gram: orthogonality_report(adapters, opts.after_ortho.as_ref(), opts.include_factors)?,
        per_layer_magnitude_stats,
        norm_average_accuracy,
        after_ortho: opts.after_ortho.is_some(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum ReportFormat {
    #[default]
    Json,
    Csv,
}

impl fmt::Display for ReportFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ReportFormat::Json => "json",
            ReportFormat::Csv => "csv",
        })
    }
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "json" => Ok(ReportFormat::Json),
            "csv" => Ok(ReportFormat::Csv),
            _ => Err(Error::Parameter(format!("unknown report format {s:?} (expected json or csv)"))),
        }
    }
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> Json {
        let layers = self.per_layer_cross_gram.iter().map(|(k, l)| {
            let mut entry = BTreeMap::new();
            entry.insert("full".to_string(), Json::matrix(&l.full));
            if let Some(b) = &l.b {
                entry.insert("b_factors".to_string(), Json::matrix(b));
            }
            if let Some(a) = &l.a {
                entry.insert("a_factors".to_string(), Json::matrix(a));
            }
            entry.insert("off_diagonal_sum".to_string(), Json::Float(off_diagonal_sum(&l.full)));
            (k.clone(), Json::Object(entry))
        });
        Json::object([
            ("adapters", Json::Array(self.adapter_names.iter().map(|n| Json::from(n.as_str())).collect())),
            ("after_ortho", Json::from(self.after_ortho)),
            ("magnitude_mode", Json::from(self.magnitude_mode.as_str())),
            ("magnitude_variance", Json::from(self.magnitude_variance)),
            ("norm_average_accuracy", Json::from(self.norm_average_accuracy)),
            ("per_layer_cross_gram", Json::object(layers)),
            (
                "per_layer_magnitude_stats",
                Json::object(self.per_layer_magnitude_stats.iter().map(|(k, v)| (k.clone(), Json::floats(v)))),
            ),
        ])
    }

    /// One row per `(layer, i < j)` pair of full-rank products.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| Error::Config(format!("csv encoding: {e}"));
        w.write_record(["layer", "i", "j", "adapter_i", "adapter_j", "cross_gram_frobenius"])
            .map_err(csv_err)?;
        for (key, layer) in &self.per_layer_cross_gram {
            let n = layer.full.len();
            for i in 0..n {
                for j in i + 1..n {
                    let name = |k: usize| self.adapter_names.get(k).cloned().unwrap_or_default();
                    w.write_record([
                        key.clone(),
                        i.to_string(),
                        j.to_string(),
                        name(i),
                        name(j),
                        format_float(layer.full[i][j]),
                    ])
                    .map_err(csv_err)?;
                }
            }
        }
        w.into_inner().map_err(|e| Error::Config(format!("csv encoding: {e}")))
    }

    pub fn render(&self, format: ReportFormat) -> Result<Vec<u8>> {
        match format {
            ReportFormat::Json => Ok(self.to_json().to_pretty().into_bytes()),
            ReportFormat::Csv => self.to_csv(),
        }
    }
}

/// Writes the report atomically.
pub fn emit_report(report: &DiagnosticsReport, path: impl AsRef<Path>, format: ReportFormat, overwrite: bool) -> Result<()> {
    write_atomic(path.as_ref(), &report.render(format)?, overwrite)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{gaussian_matrix, trial_rng};
    use proptest::prelude::*;

    fn set_from(layers: Vec<Vec<(&str, LoraLayer)>>) -> AdapterSet {
        let names = (0..layers.len()).map(|i| format!("a{i}")).collect();
        let adapters = layers
            .into_iter()
            .map(|ls| ls.into_iter().map(|(k, l)| (k.to_string(), l)).collect())
            .collect();
        AdapterSet::align(names, adapters, true).unwrap()
    }

    fn random_layer(seed: u64, key: &str, scale: f64) -> LoraLayer {
        let mut rng = trial_rng(seed, 0);
        LoraLayer::new(key, gaussian_matrix(&mut rng, 10, 3), gaussian_matrix(&mut rng, 3, 8), scale).unwrap()
    }

    /// Rank-one layer `e₁ · (c e₁ᵀ)` with Frobenius norm `c`.
    fn norm_layer(c: f64) -> LoraLayer {
        let b = TaskMatrix::from_fn(3, 1, |i, _| if i == 0 { 1.0 } else { 0.0 });
        let a = TaskMatrix::from_fn(1, 3, |_, j| if j == 0 { c } else { 0.0 });
        LoraLayer::new("l", b, a, 1.0).unwrap()
    }

    #[test]
    fn variance_examples() {
        let l = random_layer(1, "l", 1.0);
        let same = set_from(vec![vec![("l", l.clone())], vec![("l", l.clone())], vec![("l", l)]]);
        assert_eq!(magnitude_distribution_variance(&same).unwrap(), 0.0);

        let two = set_from(vec![vec![("l", norm_layer(1.0))], vec![("l", norm_layer(3.0))]]);
        assert_eq!(magnitude_distribution_variance(&two).unwrap(), 1.0);

        let single = set_from(vec![vec![("l", random_layer(2, "l", 1.0))]]);
        assert_eq!(magnitude_distribution_variance(&single).unwrap(), 0.0);
    }

    #[test]
    fn accuracy_ratio() {
        assert!((norm_average_accuracy(&[80.0, 90.0], &[72.0, 81.0]).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(norm_average_accuracy(&[50.0, 60.0], &[50.0, 60.0]).unwrap(), 1.0);
        assert_eq!(norm_average_accuracy(&[50.0, 60.0], &[0.0, 0.0]).unwrap(), 0.0);
        assert!(norm_average_accuracy(&[0.0], &[1.0]).is_err());
        assert!(norm_average_accuracy(&[1.0, 2.0], &[1.0]).is_err());
    }

    #[test]
    fn cross_gram_examples() {
        let e = |k: usize| TaskMatrix::from_fn(4, 1, |i, _| if i == k { 1.0 } else { 0.0 });
        let orth = LoraLayer::new("l", e(0), TaskMatrix::from_rows(&[[1.0, 2.0, 0.0, 0.0]]), 1.0).unwrap();
        let orth2 = LoraLayer::new("l", e(1), TaskMatrix::from_rows(&[[0.0, 0.0, 3.0, 1.0]]), 1.0).unwrap();
        let set = set_from(vec![vec![("l", orth)], vec![("l", orth2)]]);
        let rep = orthogonality_report(&set, None, true).unwrap();
        assert!(rep["l"].full[0][1] <= 1e-10);

        let l = random_layer(3, "l", 1.0);
        let w = assemble_full_rank(&l).unwrap();
        let set = set_from(vec![vec![("l", l.clone())], vec![("l", l)]]);
        let rep = orthogonality_report(&set, None, false).unwrap();
        let self_gram = w.t_matmul(&w).unwrap().frobenius_norm();
        assert!((rep["l"].full[0][1] - self_gram).abs() <= 1e-12 * self_gram);
        assert!(rep["l"].b.is_none());
    }

    #[test]
    fn ortho_lowers_off_diagonal_mass() {
        let set = set_from((0..3).map(|s| vec![("l", random_layer(20 + s, "l", 1.0))]).collect());
        let before = orthogonality_report(&set, None, true).unwrap();
        let after = orthogonality_report(&set, Some(&OrthoConfig::default()), true).unwrap();
        assert!(off_diagonal_sum(&after["l"].full) < off_diagonal_sum(&before["l"].full));
        assert!(off_diagonal_sum(after["l"].b.as_ref().unwrap()) < off_diagonal_sum(before["l"].b.as_ref().unwrap()));
    }

    fn sample_report() -> DiagnosticsReport {
        let set = set_from(
            (0..3)
                .map(|s| vec![("k.q", random_layer(s, "k.q", 1.0)), ("k.v", random_layer(9 + s, "k.v", 2.0))])
                .collect(),
        );
        diagnose(&set, &DiagnosticsOptions { include_factors: true, ..Default::default() }).unwrap()
    }

    #[test]
    fn emitted_reports_are_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let report = sample_report();
        for format in [ReportFormat::Json, ReportFormat::Csv] {
            let p1 = dir.path().join(format!("r1.{format}"));
            let p2 = dir.path().join(format!("r2.{format}"));
            emit_report(&report, &p1, format, false).unwrap();
            emit_report(&sample_report(), &p2, format, false).unwrap();
            assert_eq!(std::fs::read(&p1).unwrap(), std::fs::read(&p2).unwrap());
        }
        let json: serde_json::Value = serde_json::from_slice(&report.render(ReportFormat::Json).unwrap()).unwrap();
        let m = &json["per_layer_cross_gram"]["k.q"]["full"];
        assert_eq!(m[0][2], m[2][0]);
    }

    #[test]
    fn csv_has_one_row_per_pair() {
        let text = String::from_utf8(sample_report().to_csv().unwrap()).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[0], "layer,i,j,adapter_i,adapter_j,cross_gram_frobenius");
        assert_eq!(lines.len(), 1 + 2 * 3);
        assert!(lines[1].starts_with("k.q,0,1,a0,a1,"));
    }

    #[test]
    fn empty_set_report() {
        let empty = AdapterSet::align(vec![], vec![], true).unwrap();
        let report = diagnose(&empty, &DiagnosticsOptions::default()).unwrap();
        assert_eq!(report.magnitude_variance, 0.0);
        let csv = String::from_utf8(report.to_csv().unwrap()).unwrap();
        assert_eq!(csv.lines().count(), 1);
        let json: serde_json::Value = serde_json::from_slice(&report.render(ReportFormat::Json).unwrap()).unwrap();
        assert!(json["per_layer_cross_gram"].as_object().unwrap().is_empty());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(32))]

        #[test]
        fn variance_is_nonnegative_and_quadratic(seed in any::<u64>(), c in 0.1f64..10.0) {
            let base = set_from((0..3).map(|s| vec![("l", random_layer(seed.wrapping_add(s), "l", 1.0))]).collect());
            let scaled = set_from((0..3).map(|s| vec![("l", random_layer(seed.wrapping_add(s), "l", c))]).collect());
            let v = magnitude_distribution_variance(&base).unwrap();
            let vc = magnitude_distribution_variance(&scaled).unwrap();
            prop_assert!(v >= 0.0);
            prop_assert!((vc - c * c * v).abs() <= 1e-10 * vc.max(1.0));
        }

        #[test]
        fn accuracy_is_scale_invariant(a in prop::collection::vec(1.0f64..100.0, 1..8), c in 0.01f64..100.0) {
            let m: Vec<f64> = a.iter().map(|x| x * 0.8).collect();
            let r = norm_average_accuracy(&a, &m).unwrap();
            let ac: Vec<f64> = a.iter().map(|x| x * c).collect();
            let mc: Vec<f64> = m.iter().map(|x| x * c).collect();
            prop_assert!((norm_average_accuracy(&ac, &mc).unwrap() - r).abs() <= 1e-12);
        }
    }
}
