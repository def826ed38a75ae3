use std::collections::BTreeMap;
use std::path::Path;

use domerge::checkpoint::{
    adapter_layers, extract_adapters, load_checkpoint, load_manifest, write_atomic, AdapterSet, AdapterSource,
    BaseCheckpoint, Dtype, ExtractOptions, KeyPattern,
};
use domerge::diagnostics::{diagnose as run_diagnostics, emit_report, off_diagonal_sum, DiagnosticsOptions, ReportFormat};
use domerge::lab::{run_suite, Suite};
use domerge::linalg::MagnitudeMode;
use domerge::merge::{merge_adapter_set, merged_checkpoint, MergeConfig, Method, OutputMode};
use domerge::ortho::{OrthoConfig, OrthoStats};
use domerge::report::Json;

use crate::{AdapterInputs, DiagnoseArgs, Failure, InspectArgs, MergeArgs, PatternArgs, VerifyArgs};

fn parse<T: std::str::FromStr<Err = domerge::Error>>(flag: &str, value: &str) -> Result<T, Failure> {
    value.parse().map_err(|e: domerge::Error| Failure::usage(format!("--{flag}: {e}")))
}

fn extract_options(p: &PatternArgs) -> Result<ExtractOptions, Failure> {
    Ok(ExtractOptions {
        a_pattern: KeyPattern::new(&p.a_pattern).map_err(|e| Failure::usage(format!("--a-pattern: {e}")))?,
        b_pattern: KeyPattern::new(&p.b_pattern).map_err(|e| Failure::usage(format!("--b-pattern: {e}")))?,
        strict: !p.lenient,
    })
}

/// Resolves adapter sources without touching the adapter files themselves.
fn sources(inputs: &AdapterInputs, p: &PatternArgs) -> Result<Vec<AdapterSource>, Failure> {
    let mut srcs = match &inputs.manifest {
        Some(m) => load_manifest(m)?,
        None => inputs.adapters.iter().map(AdapterSource::new).collect(),
    };
    if srcs.is_empty() {
        return Err(Failure::usage("no adapters given"));
    }
    match p.scaling.len() {
        0 => {}
        1 => srcs.iter_mut().for_each(|s| s.scaling = p.scaling[0]),
        k if k == srcs.len() => srcs.iter_mut().zip(&p.scaling).for_each(|(s, &c)| s.scaling = c),
        k => {
            return Err(Failure::usage(format!(
                "--scaling has {k} values for {} adapters",
                srcs.len()
            )))
        }
    }
    if let Some(s) = srcs.iter().find(|s| !(s.scaling.is_finite() && s.scaling > 0.0)) {
        return Err(Failure::usage(format!("scaling for {} must be positive, got {}", s.display_name(), s.scaling)));
    }
    Ok(srcs)
}

fn merge_config(a: &MergeArgs) -> Result<MergeConfig, Failure> {
    let cfg = MergeConfig {
        lambda: a.lambda,
        magnitude_mode: parse::<MagnitudeMode>("magnitude-mode", &a.magnitude_mode)?,
        method: parse::<Method>("method", &a.method)?,
        ortho: (!a.no_ortho).then(|| OrthoConfig {
            mu: a.ortho_mu,
            max_steps: a.ortho_steps,
            step_size: a.ortho_step_size,
            max_rel_perturbation: a.ortho_budget,
            seed: a.seed,
            ..OrthoConfig::default()
        }),
        decouple: !a.no_decouple,
        output_mode: parse::<OutputMode>("output-mode", &a.output_mode)?,
    };
    cfg.validate().map_err(|e| Failure::usage(e.to_string()))?;
    Ok(cfg)
}

fn ortho_json(s: &OrthoStats) -> Json {
    Json::object([
        ("initial_lo", Json::from(s.initial_lo)),
        ("final_lo", Json::from(s.final_lo)),
        ("steps", Json::from(s.steps_taken)),
        ("mu", Json::from(s.mu)),
        ("per_member_rel_perturbation", Json::floats(&s.per_member_rel_perturbation)),
        ("stop", Json::from(format!("{:?}", s.stop))),
    ])
}

fn config_json(cfg: &MergeConfig, n: usize, seed: u64) -> Json {
    let ortho = match &cfg.ortho {
        Some(o) if cfg.method == Method::DoMerging => Json::object([
            ("max_steps", Json::from(o.max_steps)),
            ("step_size", Json::from(o.step_size)),
            ("max_rel_perturbation", Json::from(o.max_rel_perturbation)),
            ("mu", Json::from(o.mu)),
            ("rel_loss_tol", Json::from(o.rel_loss_tol)),
        ]),
        _ => Json::Null,
    };
    Json::object([
        ("method", Json::from(cfg.method.as_str())),
        ("lambda", Json::from(cfg.effective_lambda(n))),
        ("magnitude_mode", Json::from(cfg.magnitude_mode.as_str())),
        ("decouple", Json::from(cfg.decouple && cfg.method == Method::DoMerging)),
        ("ortho", ortho),
        ("output_mode", Json::from(cfg.output_mode.to_string())),
        ("seed", Json::from(seed)),
    ])
}

pub fn merge(a: MergeArgs) -> Result<(), Failure> {
    // everything that can be rejected without I/O is rejected here
    let cfg = merge_config(&a)?;
    if cfg.output_mode == OutputMode::Fused && a.base.is_none() {
        return Err(Failure::usage("--output-mode fused requires --base"));
    }
    let dtype = a.dtype.as_deref().map(|d| parse::<Dtype>("dtype", d)).transpose()?;
    let opts = extract_options(&a.patterns)?;
    if !a.force && a.output.exists() {
        return Err(domerge::Error::Io {
            path: a.output.clone(),
            source: std::io::Error::new(
                std::io::ErrorKind::AlreadyExists,
                "output exists (pass --force to overwrite)",
            ),
        }
        .into());
    }

    let srcs = sources(&a.inputs, &a.patterns)?;
    let set = extract_adapters(&srcs, &opts)?;
    if set.layer_keys().is_empty() {
        return Err(domerge::Error::Alignment("no LoRA layer pairs matched the key patterns".into()).into());
    }
    let base = a.base.as_ref().map(BaseCheckpoint::load).transpose()?;
    let merged = merge_adapter_set(&set, base.as_ref(), &cfg)?;
    let ckpt = merged_checkpoint(&merged, base.as_ref(), &cfg, dtype)?;
    domerge::checkpoint::save_checkpoint(&ckpt, &a.output, a.force)?;

    let layers = merged.iter().map(|(k, m)| {
        let mut entry = BTreeMap::new();
        entry.insert("shape".to_string(), Json::Array(vec![m.delta.rows().into(), m.delta.cols().into()]));
        entry.insert("delta_frobenius".to_string(), Json::from(m.delta.frobenius_norm()));
        if let Some(o) = &m.ortho {
            entry.insert(
                "ortho".to_string(),
                Json::object([("b", ortho_json(&o.b)), ("a", ortho_json(&o.a))]),
            );
        }
        (k.clone(), Json::Object(entry))
    });
    let summary = Json::object([
        ("output", Json::from(a.output.display().to_string())),
        ("adapters", Json::Array(set.names.iter().map(|n| Json::from(n.as_str())).collect())),
        ("config", config_json(&cfg, set.len(), a.seed)),
        ("layers", Json::object(layers)),
        ("warnings", Json::Array(set.warnings.iter().map(|w| Json::from(w.as_str())).collect())),
    ]);
    print!("{}", summary.to_pretty());
    Ok(())
}

pub fn inspect(a: InspectArgs, json: bool) -> Result<(), Failure> {
    let opts = ExtractOptions {
        a_pattern: KeyPattern::new(&a.a_pattern).map_err(|e| Failure::usage(format!("--a-pattern: {e}")))?,
        b_pattern: KeyPattern::new(&a.b_pattern).map_err(|e| Failure::usage(format!("--b-pattern: {e}")))?,
        strict: true,
    };
    let ckpt = load_checkpoint(&a.path)?;
    // a checkpoint without (or with broken) LoRA pairs is still inspectable
    let (pairs, pairing_error) = match adapter_layers(&ckpt, 1.0, &opts) {
        Ok(p) => (p, None),
        Err(e) => (BTreeMap::new(), Some(e.to_string())),
    };
    if json {
        let tensors = ckpt.tensors.iter().map(|(k, t)| {
            (
                k.clone(),
                Json::object([
                    ("dtype", Json::from(t.dtype.as_str())),
                    ("shape", Json::Array(t.shape.iter().map(|&d| d.into()).collect())),
                ]),
            )
        });
        let lora = pairs.iter().map(|(k, l)| {
            let (m, n) = l.full_shape();
            (
                k.clone(),
                Json::object([("rank", Json::from(l.rank)), ("rows", Json::from(m)), ("cols", Json::from(n))]),
            )
        });
        let out = Json::object([
            ("path", Json::from(a.path.display().to_string())),
            ("tensors", Json::object(tensors)),
            ("lora_pairs", Json::object(lora)),
            ("pairing_error", Json::from(pairing_error)),
            (
                "metadata",
                Json::object(ckpt.metadata.iter().map(|(k, v)| (k.clone(), Json::from(v.as_str())))),
            ),
        ]);
        print!("{}", out.to_pretty());
    } else {
        println!("{}: {} tensors", a.path.display(), ckpt.len());
        let width = ckpt.tensors.keys().map(String::len).max().unwrap_or(0);
        for (k, t) in &ckpt.tensors {
            println!("  {k:<width$}  {:<5} {:?}", t.dtype.as_str(), t.shape);
        }
        println!("{} LoRA pairs", pairs.len());
        for (k, l) in &pairs {
            let (m, n) = l.full_shape();
            println!("  {k}: rank {} ({m}x{n})", l.rank);
        }
        if let Some(e) = pairing_error {
            println!("pairing failed: {e}");
        }
        for (k, v) in &ckpt.metadata {
            println!("  meta {k} = {v}");
        }
    }
    Ok(())
}

fn load_set(inputs: &AdapterInputs, p: &PatternArgs) -> Result<AdapterSet, Failure> {
    let opts = extract_options(p)?;
    let srcs = sources(inputs, p)?;
    Ok(extract_adapters(&srcs, &opts)?)
}

pub fn diagnose(a: DiagnoseArgs, json: bool) -> Result<(), Failure> {
    let format = parse::<ReportFormat>("format", &a.format)?;
    let mode = parse::<MagnitudeMode>("magnitude-mode", &a.magnitude_mode)?;
    if a.finetuned_acc.len() != a.merged_acc.len() {
        return Err(Failure::usage("--finetuned-acc and --merged-acc need the same number of values"));
    }
    if !a.force && a.report.exists() {
        return Err(domerge::Error::Io {
            path: a.report.clone(),
            source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "report exists (pass --force to overwrite)"),
        }
        .into());
    }
    let set = load_set(&a.inputs, &a.patterns)?;
    let opts = DiagnosticsOptions {
        magnitude_mode: mode,
        after_ortho: a.after_ortho.then(OrthoConfig::default),
        include_factors: a.factors,
        accuracies: (!a.finetuned_acc.is_empty()).then(|| (a.finetuned_acc.clone(), a.merged_acc.clone())),
    };
    let report = run_diagnostics(&set, &opts)?;
    emit_report(&report, &a.report, format, a.force)?;
    if json {
        let layers = report
            .per_layer_cross_gram
            .iter()
            .map(|(k, l)| (k.clone(), Json::from(off_diagonal_sum(&l.full))));
        let out = Json::object([
            ("report", Json::from(a.report.display().to_string())),
            ("magnitude_variance", Json::from(report.magnitude_variance)),
            ("norm_average_accuracy", Json::from(report.norm_average_accuracy)),
            ("cross_gram_off_diagonal_sum", Json::object(layers)),
        ]);
        print!("{}", out.to_pretty());
    } else {
        println!("magnitude distribution variance v = {:.6e}", report.magnitude_variance);
        if let Some(acc) = report.norm_average_accuracy {
            println!("normalized average accuracy = {acc:.6}");
        }
        println!("cross-Gram Σ_(i<j) ‖W_iᵀW_j‖_F per layer{}:", if a.after_ortho { " (after ortho)" } else { "" });
        for (k, l) in &report.per_layer_cross_gram {
            println!("  {k}: {:.6e}", off_diagonal_sum(&l.full));
        }
        println!("report written to {}", a.report.display());
    }
    Ok(())
}

pub fn verify(a: VerifyArgs, json: bool) -> Result<(), Failure> {
    let suites: Vec<Suite> = if a.suite.eq_ignore_ascii_case("all") {
        Suite::ALL.to_vec()
    } else {
        vec![parse::<Suite>("suite", &a.suite)?]
    };
    if a.samples == Some(0) {
        return Err(Failure::usage("--samples must be positive"));
    }
    if let Some(r) = &a.report {
        if !a.force && r.exists() {
            return Err(domerge::Error::Io {
                path: r.clone(),
                source: std::io::Error::new(std::io::ErrorKind::AlreadyExists, "report exists (pass --force to overwrite)"),
            }
            .into());
        }
    }
    let mut outcomes = Vec::new();
    for s in suites {
        let o = run_suite(s, a.samples, a.seed)?;
        if !json {
            println!("{} {}: {}", if o.passed { "PASS" } else { "FAIL" }, o.suite, o.summary);
        }
        outcomes.push(o);
    }
    let all_passed = outcomes.iter().all(|o| o.passed);
    let doc = Json::object([
        ("seed", Json::from(a.seed)),
        ("samples", Json::from(a.samples)),
        ("passed", Json::from(all_passed)),
        ("suites", Json::Array(outcomes.iter().map(|o| o.to_json()).collect())),
    ]);
    if let Some(path) = &a.report {
        write_report(path, &doc, a.force)?;
    }
    if json {
        print!("{}", doc.to_pretty());
    }
    if all_passed {
        Ok(())
    } else {
        let failed: Vec<String> = outcomes
            .iter()
            .filter(|o| !o.passed)
            .map(|o| format!("{}: {}", o.suite, o.summary))
            .collect();
        Err(Failure::property(format!("property violated — {}", failed.join("; "))))
    }
}

fn write_report(path: &Path, doc: &Json, force: bool) -> Result<(), Failure> {
    Ok(write_atomic(path, doc.to_pretty().as_bytes(), force)?)
}
