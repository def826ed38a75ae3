//! One worker vs the full pool on the data-parallel paths. Build with
//! `--no-default-features` for the purely sequential fallback.

use std::collections::BTreeMap;
use std::hint::black_box;

use criterion::{criterion_group, criterion_main, BenchmarkId, Criterion};

use domerge::checkpoint::{AdapterSet, LoraLayer};
use domerge::lab::{run_suite, Suite};
use domerge::merge::{merge_adapter_set, MergeConfig};
use domerge::par;
use domerge::rng::{gaussian_matrix, stream_id, trial_rng};

fn synthetic_set(adapters: usize, layers: usize, dim: usize, rank: usize) -> AdapterSet {
    let sets = (0..adapters)
        .map(|i| {
            (0..layers)
                .map(|l| {
                    let mut rng = trial_rng(1, stream_id(i as u64, l as u64));
                    let key = format!("layers.{l}.q_proj");
                    let b = gaussian_matrix(&mut rng, dim, rank);
                    let a = gaussian_matrix(&mut rng, rank, dim);
                    (key.clone(), LoraLayer::new(key, b, a, 1.0).unwrap())
                })
                .collect::<BTreeMap<_, _>>()
        })
        .collect();
    AdapterSet::align((0..adapters).map(|i| format!("a{i}")).collect(), sets, true).unwrap()
}

fn thread_counts() -> Vec<usize> {
    let all = par::current_threads();
    if all > 1 { vec![1, all] } else { vec![1] }
}

fn bench_merge(c: &mut Criterion) {
    let set = synthetic_set(3, 8, 128, 16);
    let cfg = MergeConfig::default();
    let mut g = c.benchmark_group("merge_adapter_set");
    g.sample_size(10);
    for t in thread_counts() {
        g.bench_with_input(BenchmarkId::new("threads", t), &t, |b, &t| {
            b.iter(|| par::with_threads(t, || black_box(merge_adapter_set(&set, None, &cfg).unwrap())))
        });
    }
    g.finish();
}

fn bench_suites(c: &mut Criterion) {
    let mut g = c.benchmark_group("monte_carlo");
    g.sample_size(10);
    for (suite, samples) in [(Suite::Theorem31, 50), (Suite::Theorem33, 20), (Suite::Crossterm, 50)] {
        for t in thread_counts() {
            g.bench_with_input(BenchmarkId::new(suite.as_str(), t), &t, |b, &t| {
                b.iter(|| par::with_threads(t, || black_box(run_suite(suite, Some(samples), 0).unwrap())))
            });
        }
    }
    g.finish();
}

criterion_group!(benches, bench_merge, bench_suites);
criterion_main!(benches);
