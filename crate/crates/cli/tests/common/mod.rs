#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use domerge::checkpoint::{adapter_checkpoint, save_checkpoint, Dtype, LoraLayer};
use domerge::rng::{gaussian_matrix, stream_id, trial_rng};

pub const LAYERS: usize = 4;

pub fn layer_key(i: usize) -> String {
    format!("base_model.model.model.layers.{i}.self_attn.q_proj")
}

/// Random LoRA layers with `LAYERS` entries of shape (m×r)·(r×n).
pub fn random_layers(seed: u64, m: usize, n: usize, r: usize) -> BTreeMap<String, LoraLayer> {
    (0..LAYERS)
        .map(|i| {
            let mut rng = trial_rng(seed, stream_id(i as u64, 0));
            let b = gaussian_matrix(&mut rng, m, r).scale(0.1);
            let a = gaussian_matrix(&mut rng, r, n).scale(0.1);
            let key = layer_key(i);
            (key.clone(), LoraLayer::new(key, b, a, 1.0).unwrap())
        })
        .collect()
}

pub fn write_layers(dir: &Path, name: &str, layers: &BTreeMap<String, LoraLayer>) -> PathBuf {
    let path = dir.join(format!("{name}.safetensors"));
    save_checkpoint(&adapter_checkpoint(layers, Dtype::F32).unwrap(), &path, true).unwrap();
    path
}

pub fn write_adapter(dir: &Path, name: &str, seed: u64) -> PathBuf {
    write_layers(dir, name, &random_layers(seed, 16, 12, 4))
}

pub fn domerge(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_domerge"))
        .args(args)
        .env_remove("DO_MERGE_THREADS")
        .output()
        .expect("failed to spawn domerge")
}

pub fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

pub fn stdout_json(out: &Output) -> serde_json::Value {
    serde_json::from_slice(&out.stdout).unwrap_or_else(|e| {
        panic!("stdout is not JSON ({e}):\n{}", String::from_utf8_lossy(&out.stdout))
    })
}
