//! Seeded random sources.
//!
//! Every trial gets its own ChaCha stream derived from `(seed, stream)`, so
//! Monte Carlo results do not depend on scheduling.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::linalg::TaskMatrix;

/// Deterministic generator for trial `stream` under `seed`.
pub fn trial_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

/// Combines two indices into one stream id.
pub fn stream_id(major: u64, minor: u64) -> u64 {
    (major << 32) ^ minor
}

/// Matrix with i.i.d. standard normal entries.
pub fn gaussian_matrix<R: Rng + ?Sized>(rng: &mut R, rows: usize, cols: usize) -> TaskMatrix {
    let data = (0..rows * cols)
        .map(|_| rng.sample::<f64, _>(StandardNormal))
        .collect();
    TaskMatrix::from_vec_unchecked(rows, cols, data)
}

/// Vector with i.i.d. uniform entries on `[lo, hi)`.
pub fn uniform_vec<R: Rng + ?Sized>(rng: &mut R, len: usize, lo: f64, hi: f64) -> Vec<f64> {
    (0..len).map(|_| rng.random_range(lo..hi)).collect()
}
