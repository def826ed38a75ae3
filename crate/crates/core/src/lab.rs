//! Monte Carlo checks of the loss model behind the merging method, on
//! synthetic Gaussian instances.
//!
//! Every trial draws from its own ChaCha stream keyed by `(seed, index)` and
//! results are reduced in trial order, so output is bit-identical for a
//! given seed no matter how many threads run the trials.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::linalg::TaskMatrix;
use crate::ortho::{orthogonalize_group, OrthoConfig, OrthoStats};
use crate::par;
use crate::report::Json;
use crate::rng::{gaussian_matrix, stream_id, trial_rng, uniform_vec};

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSpec {
    pub m: usize,
    pub n: usize,
    /// Ratio between the two magnitude norms; not the merging coefficient.
    pub lambda_ratio: f64,
    pub samples: usize,
    pub seed: u64,
}

impl SyntheticSpec {
    pub fn new(m: usize, n: usize, lambda_ratio: f64, samples: usize, seed: u64) -> Self {
        Self { m, n, lambda_ratio, samples, seed }
    }

    fn validate(&self) -> Result<()> {
        if self.m == 0 || self.n == 0 {
            return Err(Error::Parameter("synthetic matrices need positive dimensions".into()));
        }
        if self.samples == 0 {
            return Err(Error::Parameter("at least one sample is required".into()));
        }
        if !(self.lambda_ratio.is_finite() && self.lambda_ratio > 0.0) {
            return Err(Error::Parameter(format!("lambda_ratio must be positive, got {}", self.lambda_ratio)));
        }
        Ok(())
    }
}

/// Sample mean with its standard error `s / √N` (`s` with `N − 1`
/// degrees of freedom; zero for a single sample).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrialResult {
    pub mean: f64,
    pub std_error: f64,
    pub samples: usize,
}

impl TrialResult {
    pub fn from_samples(xs: &[f64]) -> Self {
        let n = xs.len();
        if n == 0 {
            return Self { mean: f64::NAN, std_error: f64::NAN, samples: 0 };
        }
        let mean = xs.iter().sum::<f64>() / n as f64;
        let std_error = if n > 1 {
            let var = xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / (n - 1) as f64;
            (var / n as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std_error, samples: n }
    }

    /// `√(se₁² + se₂²)` for two independent estimates.
    pub fn combined_se(&self, other: &Self) -> f64 {
        self.std_error.hypot(other.std_error)
    }

    pub fn to_json(&self) -> Json {
        Json::object([
            ("mean", Json::from(self.mean)),
            ("std_error", Json::from(self.std_error)),
            ("samples", Json::from(self.samples)),
        ])
    }
}

/// `((a₁+a₂)/a₁)‖W − W₁‖_F² + ((a₁+a₂)/a₂)‖W − W₂‖_F²`.
///
/// Residuals are squared Frobenius norms, matching how the loss is expanded
/// entrywise when taking expectations.
pub fn eq1_loss(w: &TaskMatrix, w1: &TaskMatrix, w2: &TaskMatrix, alpha1_norm: f64, alpha2_norm: f64) -> Result<f64> {
    if !(alpha1_norm > 0.0 && alpha2_norm > 0.0) {
        return Err(Error::Parameter(format!(
            "magnitude norms must be positive, got {alpha1_norm} and {alpha2_norm}"
        )));
    }
    let sum = alpha1_norm + alpha2_norm;
    Ok(sum / alpha1_norm * w.sub(w1)?.squared_norm() + sum / alpha2_norm * w.sub(w2)?.squared_norm())
}

/// Generalization to `n` task matrices: `Σ_i (Σ_k a_k / a_i) ‖W − W_i‖_F²`.
pub fn multi_task_loss(w: &TaskMatrix, tasks: &[TaskMatrix], norms: &[f64]) -> Result<f64> {
    if tasks.len() != norms.len() {
        return Err(Error::dim("one magnitude norm per task matrix is required"));
    }
    let total: f64 = norms.iter().sum();
    let mut loss = 0.0;
    for (t, &a) in tasks.iter().zip(norms) {
        if !(a > 0.0) {
            return Err(Error::Parameter(format!("magnitude norms must be positive, got {a}")));
        }
        loss += total / a * w.sub(t)?.squared_norm();
    }
    Ok(loss)
}

/// Scales column `j` of `w` by `alpha[j]`.
fn scale_columns(w: &TaskMatrix, alpha: &[f64]) -> TaskMatrix {
    TaskMatrix::from_fn(w.rows(), w.cols(), |i, j| w.get(i, j) * alpha[j])
}

/// Unit-norm magnitude vector with uniform(0.5, 1.5) entries before
/// normalization: strictly positive, as the proofs require.
fn unit_magnitude<R: Rng>(rng: &mut R, len: usize) -> Vec<f64> {
    let v = uniform_vec(rng, len, 0.5, 1.5);
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.into_iter().map(|x| x / norm).collect()
}

/// One draw of a two-task instance with `‖α₁‖ = a1`, `‖α₂‖ = a2` and
/// `α₂ ∝ α₁`.
struct PairDraw {
    alpha1: Vec<f64>,
    alpha2: Vec<f64>,
    dir1: TaskMatrix,
    dir2: TaskMatrix,
    w1: TaskMatrix,
    w2: TaskMatrix,
}

fn draw_pair<R: Rng>(rng: &mut R, m: usize, n: usize, a1: f64, a2: f64) -> PairDraw {
    let u = unit_magnitude(rng, n);
    let alpha1: Vec<f64> = u.iter().map(|x| x * a1).collect();
    let alpha2: Vec<f64> = u.iter().map(|x| x * a2).collect();
    let dir1 = gaussian_matrix(rng, m, n);
    let dir2 = gaussian_matrix(rng, m, n);
    let w1 = scale_columns(&dir1, &alpha1);
    let w2 = scale_columns(&dir2, &alpha2);
    PairDraw { alpha1, alpha2, dir1, dir2, w1, w2 }
}

/// Expected loss of plain averaging when `‖α₁‖ = √λ`, `‖α₂‖ = 1/√λ`:
/// `(m/4)(λ + 2 + 1/λ)(λ + 1/λ)`.
pub fn theorem31_expected_loss(m: usize, lambda: f64) -> f64 {
    m as f64 / 4.0 * (lambda + 2.0 + 1.0 / lambda) * (lambda + 1.0 / lambda)
}

/// Loss of `W = ½(W₁ + W₂)` as the magnitude ratio `‖α₁‖/‖α₂‖ = λ` varies
/// with `‖α₁‖‖α₂‖ = 1` held fixed. `spec.lambda_ratio` is unused.
pub fn theorem31_sweep(spec: &SyntheticSpec, lambda_grid: &[f64]) -> Result<Vec<(f64, TrialResult)>> {
    spec.validate()?;
    if let Some(bad) = lambda_grid.iter().find(|l| !(l.is_finite() && **l > 0.0)) {
        return Err(Error::Parameter(format!("grid values must be positive, got {bad}")));
    }
    let out = lambda_grid
        .iter()
        .enumerate()
        .map(|(g, &lambda)| {
            let (a1, a2) = (lambda.sqrt(), 1.0 / lambda.sqrt());
            let losses = par::map_range(spec.samples, |t| {
                let mut rng = trial_rng(spec.seed, stream_id(g as u64, t as u64));
                let d = draw_pair(&mut rng, spec.m, spec.n, a1, a2);
                let avg = d.w1.add(&d.w2).expect("same shape").scale(0.5);
                eq1_loss(&avg, &d.w1, &d.w2, a1, a2).expect("positive norms")
            });
            (lambda, TrialResult::from_samples(&losses))
        })
        .collect();
    Ok(out)
}

/// Paired estimates for the coupled and decoupled merges.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Theorem32Result {
    pub coupled: TrialResult,
    pub decoupled: TrialResult,
    /// Per-draw `coupled − decoupled`.
    pub difference: TrialResult,
}

impl Theorem32Result {
    pub fn to_json(&self) -> Json {
        Json::object([
            ("coupled", self.coupled.to_json()),
            ("decoupled", self.decoupled.to_json()),
            ("difference", self.difference.to_json()),
        ])
    }
}

/// Compares `W¹ = ½(W₁+W₂)` with `W² = ¼(α₁+α₂)∘(W̄₁+W̄₂)` on shared draws,
/// with `‖α₁‖ = 1` and `‖α₂‖ = ratio²`.
///
/// The decoupled merge uses the generating `(α_i, W̄_i)`; re-deriving them
/// by column normalization would swap in finite-sample column norms.
pub fn theorem32_compare(spec: &SyntheticSpec) -> Result<Theorem32Result> {
    spec.validate()?;
    let a2 = spec.lambda_ratio * spec.lambda_ratio;
    let pairs = par::map_range(spec.samples, |t| {
        let mut rng = trial_rng(spec.seed, t as u64);
        let d = draw_pair(&mut rng, spec.m, spec.n, 1.0, a2);
        let coupled = d.w1.add(&d.w2).expect("same shape").scale(0.5);
        let alpha: Vec<f64> = d.alpha1.iter().zip(&d.alpha2).map(|(x, y)| x + y).collect();
        let dir = d.dir1.add(&d.dir2).expect("same shape");
        let decoupled = scale_columns(&dir, &alpha).scale(0.25);
        let lc = eq1_loss(&coupled, &d.w1, &d.w2, 1.0, a2).expect("positive norms");
        let ld = eq1_loss(&decoupled, &d.w1, &d.w2, 1.0, a2).expect("positive norms");
        (lc, ld)
    });
    let lc: Vec<f64> = pairs.iter().map(|p| p.0).collect();
    let ld: Vec<f64> = pairs.iter().map(|p| p.1).collect();
    let diff: Vec<f64> = pairs.iter().map(|p| p.0 - p.1).collect();
    Ok(Theorem32Result {
        coupled: TrialResult::from_samples(&lc),
        decoupled: TrialResult::from_samples(&ld),
        difference: TrialResult::from_samples(&diff),
    })
}

/// Fraction of positions where both entries are nonzero and have opposite
/// signs, among positions where both are nonzero.
pub fn sign_conflict_rate(w1: &TaskMatrix, w2: &TaskMatrix) -> Result<f64> {
    if w1.shape() != w2.shape() {
        return Err(Error::dim(format!("shapes {:?} and {:?} differ", w1.shape(), w2.shape())));
    }
    let mut counted = 0usize;
    let mut conflicts = 0usize;
    for (&a, &b) in w1.data().iter().zip(w2.data()) {
        if a != 0.0 && b != 0.0 {
            counted += 1;
            if (a > 0.0) != (b > 0.0) {
                conflicts += 1;
            }
        }
    }
    Ok(if counted == 0 { 0.0 } else { conflicts as f64 / counted as f64 })
}

/// Independent Gaussian pair where, at each position with probability ½,
/// the second entry's sign is forced opposite to the first's.
pub fn conflicting_pair<R: Rng>(rng: &mut R, m: usize, n: usize) -> (TaskMatrix, TaskMatrix) {
    let w1 = gaussian_matrix(rng, m, n);
    let raw = gaussian_matrix(rng, m, n);
    let data = w1
        .data()
        .iter()
        .zip(raw.data())
        .map(|(&a, &b)| if rng.random_bool(0.5) { -a.signum() * b.abs() } else { b })
        .collect();
    let w2 = TaskMatrix::new(m, n, data).expect("finite draws");
    (w1, w2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem33Trial {
    pub initial_rate: f64,
    pub final_rate: f64,
    pub lo_trajectory: Vec<f64>,
    pub stats: OrthoStats,
}

impl Theorem33Trial {
    pub fn decreased(&self) -> bool {
        self.final_rate < self.initial_rate
    }

    pub fn monotone(&self) -> bool {
        self.lo_trajectory.windows(2).all(|w| w[1] <= w[0])
    }
}

/// Orthogonalizes one pair and measures sign conflicts before and after.
pub fn theorem33_trial(w1: &TaskMatrix, w2: &TaskMatrix, cfg: &OrthoConfig) -> Result<Theorem33Trial> {
    let initial_rate = sign_conflict_rate(w1, w2)?;
    let (out, stats) = orthogonalize_group(&[w1.clone(), w2.clone()], cfg)?;
    Ok(Theorem33Trial {
        initial_rate,
        final_rate: sign_conflict_rate(&out[0], &out[1])?,
        lo_trajectory: stats.lo_trajectory.clone(),
        stats,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct Theorem33Summary {
    pub trials: Vec<Theorem33Trial>,
    pub decreased: usize,
    pub monotone: usize,
}

/// `spec.samples` seeded conflicting pairs of size `m × n`.
pub fn theorem33_experiment(spec: &SyntheticSpec, cfg: &OrthoConfig) -> Result<Theorem33Summary> {
    spec.validate()?;
    let trials = par::map_range(spec.samples, |t| {
        let mut rng = trial_rng(spec.seed, t as u64);
        let (w1, w2) = conflicting_pair(&mut rng, spec.m, spec.n);
        theorem33_trial(&w1, &w2, cfg)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(Theorem33Summary {
        decreased: trials.iter().filter(|t| t.decreased()).count(),
        monotone: trials.iter().filter(|t| t.monotone()).count(),
        trials,
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CrosstermTrial {
    pub concat_loss: f64,
    pub separate_loss: f64,
    pub cross_term_norm: f64,
}

/// Merges the products (`(1/n) Σ B_iA_i`) and the factors separately
/// (`(1/n²)(Σ B_i)(Σ A_i)`); both reproduce identical adapters exactly.
/// Losses are [`multi_task_loss`] against the individual products with
/// `a_i = ‖B_iA_i‖_F`.
pub fn crossterm_trial(bs: &[TaskMatrix], as_: &[TaskMatrix]) -> Result<CrosstermTrial> {
    if bs.len() != as_.len() || bs.is_empty() {
        return Err(Error::dim("need equally many, and at least one, B and A factors"));
    }
    let k = bs.len() as f64;
    let ws = bs.iter().zip(as_).map(|(b, a)| b.matmul(a)).collect::<Result<Vec<_>>>()?;
    let sum_w = crate::linalg::sum_matrices(&ws)?;
    let concat = sum_w.scale(1.0 / k);
    let beta = 1.0 / (k * k);
    let separate = crate::linalg::sum_matrices(bs)?
        .matmul(&crate::linalg::sum_matrices(as_)?)?
        .scale(beta);
    let cross = separate.sub(&sum_w.scale(beta))?;
    let norms: Vec<f64> = ws.iter().map(TaskMatrix::frobenius_norm).collect();
    Ok(CrosstermTrial {
        concat_loss: multi_task_loss(&concat, &ws, &norms)?,
        separate_loss: multi_task_loss(&separate, &ws, &norms)?,
        cross_term_norm: cross.frobenius_norm(),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct CrosstermSummary {
    pub trials: Vec<CrosstermTrial>,
    /// Trials where merging products beat merging factors.
    pub concat_wins: usize,
}

/// Random Gaussian factors: `adapters` pairs of `m × rank` and `rank × n`.
pub fn crossterm_experiment(m: usize, n: usize, rank: usize, adapters: usize, trials: usize, seed: u64) -> Result<CrosstermSummary> {
    if rank == 0 || rank > m.min(n) {
        return Err(Error::Parameter(format!("rank {rank} outside 1..={}", m.min(n))));
    }
    if adapters == 0 || trials == 0 {
        return Err(Error::Parameter("need at least one adapter and one trial".into()));
    }
    let trials = par::map_range(trials, |t| {
        let mut rng = trial_rng(seed, t as u64);
        let bs: Vec<_> = (0..adapters).map(|_| gaussian_matrix(&mut rng, m, rank)).collect();
        let as_: Vec<_> = (0..adapters).map(|_| gaussian_matrix(&mut rng, rank, n)).collect();
        crossterm_trial(&bs, &as_)
    })
    .into_iter()
    .collect::<Result<Vec<_>>>()?;
    Ok(CrosstermSummary {
        concat_wins: trials.iter().filter(|t| t.concat_loss < t.separate_loss).count(),
        trials,
    })
}

/// Named experiment groups driven by `verify`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Suite {
    Theorem31,
    Theorem32,
    Theorem33,
    Crossterm,
}

impl Suite {
    pub const ALL: [Suite; 4] = [Suite::Theorem31, Suite::Theorem32, Suite::Theorem33, Suite::Crossterm];

    pub fn as_str(self) -> &'static str {
        match self {
            Suite::Theorem31 => "theorem31",
            Suite::Theorem32 => "theorem32",
            Suite::Theorem33 => "theorem33",
            Suite::Crossterm => "crossterm",
        }
    }

    /// Sample count used when none is given.
    pub fn default_samples(self) -> usize {
        match self {
            Suite::Theorem31 => 200,
            Suite::Theorem32 => 500,
            Suite::Theorem33 => 100,
            Suite::Crossterm => 200,
        }
    }
}

impl fmt::Display for Suite {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Suite {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Suite::ALL
            .into_iter()
            .find(|x| x.as_str() == s.to_ascii_lowercase())
            .ok_or_else(|| Error::Parameter(format!("unknown suite {s:?}")))
    }
}

/// Result of running one suite against its acceptance property.
#[derive(Debug, Clone, PartialEq)]
pub struct SuiteOutcome {
    pub suite: Suite,
    pub passed: bool,
    /// One line naming the deciding statistic.
    pub summary: String,
    pub details: Json,
}

impl SuiteOutcome {
    pub fn to_json(&self) -> Json {
        Json::object([
            ("suite", Json::from(self.suite.as_str())),
            ("passed", Json::from(self.passed)),
            ("summary", Json::from(self.summary.as_str())),
            ("details", self.details.clone()),
        ])
    }
}

pub const THEOREM31_GRID: [f64; 5] = [0.25, 0.5, 1.0, 2.0, 4.0];
pub const THEOREM32_RATIOS: [f64; 4] = [1.0, 1.5, 2.0, 3.0];

/// Required count out of `n` for a "≥ 95%" property.
pub fn ninety_five_percent(n: usize) -> usize {
    (n * 95).div_ceil(100)
}

/// Theorem 3.1 acceptance: the mean at λ = 1 sits below every other grid
/// point by more than three combined standard errors.
pub fn theorem31_accept(sweep: &[(f64, TrialResult)]) -> (bool, String) {
    let Some(&(_, at_one)) = sweep.iter().find(|(l, _)| *l == 1.0) else {
        return (false, "grid does not contain 1".into());
    };
    let mut worst = f64::INFINITY;
    let mut worst_lambda = 1.0;
    for &(l, r) in sweep.iter().filter(|(l, _)| *l != 1.0) {
        let z = (r.mean - at_one.mean) / at_one.combined_se(&r);
        if z < worst {
            worst = z;
            worst_lambda = l;
        }
    }
    (worst > 3.0, format!("smallest gap above λ=1 is {worst:.2} SE (at λ={worst_lambda})"))
}

/// Theorem 3.2 acceptance for one ratio. Above 1: decoupled lower by more
/// than three paired SE. At 1: the paired difference within three SE.
pub fn theorem32_accept(ratio: f64, r: &Theorem32Result) -> (bool, f64) {
    let d = r.difference;
    let z = if d.std_error > 0.0 {
        d.mean / d.std_error
    } else if d.mean == 0.0 {
        0.0
    } else {
        d.mean.signum() * f64::INFINITY
    };
    let ok = if ratio == 1.0 { z.abs() < 3.0 } else { z > 3.0 };
    (ok, z)
}

/// Runs one suite at `samples` draws (default per suite when `None`).
pub fn run_suite(suite: Suite, samples: Option<usize>, seed: u64) -> Result<SuiteOutcome> {
    let samples = samples.unwrap_or(suite.default_samples());
    match suite {
        Suite::Theorem31 => {
            let spec = SyntheticSpec::new(64, 64, 1.0, samples, seed);
            let sweep = theorem31_sweep(&spec, &THEOREM31_GRID)?;
            let (passed, summary) = theorem31_accept(&sweep);
            let details = Json::object([
                (
                    "grid",
                    Json::Array(
                        sweep
                            .iter()
                            .map(|(l, r)| {
                                Json::object([
                                    ("lambda", Json::from(*l)),
                                    ("result", r.to_json()),
                                    ("closed_form", Json::from(theorem31_expected_loss(spec.m, *l))),
                                ])
                            })
                            .collect(),
                    ),
                ),
                ("m", Json::from(spec.m)),
                ("n", Json::from(spec.n)),
            ]);
            Ok(SuiteOutcome { suite, passed, summary, details })
        }
        Suite::Theorem32 => {
            let mut passed = true;
            let mut parts = Vec::new();
            let mut rows = Vec::new();
            for (k, &ratio) in THEOREM32_RATIOS.iter().enumerate() {
                let spec = SyntheticSpec::new(64, 64, ratio, samples, seed.wrapping_add(k as u64));
                let r = theorem32_compare(&spec)?;
                let (ok, z) = theorem32_accept(ratio, &r);
                passed &= ok;
                parts.push(format!("ratio {ratio}: {z:.2} SE{}", if ok { "" } else { " (FAIL)" }));
                rows.push(Json::object([
                    ("ratio", Json::from(ratio)),
                    ("passed", Json::from(ok)),
                    ("z", Json::from(z)),
                    ("result", r.to_json()),
                ]));
            }
            Ok(SuiteOutcome { suite, passed, summary: parts.join("; "), details: Json::Array(rows) })
        }
        Suite::Theorem33 => {
            let spec = SyntheticSpec::new(32, 8, 1.0, samples, seed);
            let cfg = OrthoConfig { seed, ..Default::default() };
            let s = theorem33_experiment(&spec, &cfg)?;
            let need = ninety_five_percent(samples);
            let passed = s.decreased >= need && s.monotone == samples;
            let summary = format!(
                "conflict rate decreased in {}/{samples} (need {need}); L_o monotone in {}/{samples}",
                s.decreased, s.monotone
            );
            let initial: Vec<f64> = s.trials.iter().map(|t| t.initial_rate).collect();
            let fin: Vec<f64> = s.trials.iter().map(|t| t.final_rate).collect();
            let details = Json::object([
                ("decreased", Json::from(s.decreased)),
                ("monotone", Json::from(s.monotone)),
                ("trials", Json::from(samples)),
                ("initial_rate", TrialResult::from_samples(&initial).to_json()),
                ("final_rate", TrialResult::from_samples(&fin).to_json()),
            ]);
            Ok(SuiteOutcome { suite, passed, summary, details })
        }
        Suite::Crossterm => {
            let s = crossterm_experiment(64, 64, 8, 2, samples, seed)?;
            let need = ninety_five_percent(samples);
            let passed = s.concat_wins >= need;
            let summary = format!("product merging won {}/{samples} trials (need {need})", s.concat_wins);
            let col = |f: fn(&CrosstermTrial) -> f64| TrialResult::from_samples(&s.trials.iter().map(f).collect::<Vec<_>>()).to_json();
            let details = Json::object([
                ("concat_wins", Json::from(s.concat_wins)),
                ("trials", Json::from(samples)),
                ("concat_loss", col(|t| t.concat_loss)),
                ("separate_loss", col(|t| t.separate_loss)),
                ("cross_term_norm", col(|t| t.cross_term_norm)),
            ]);
            Ok(SuiteOutcome { suite, passed, summary, details })
        }
    }
}
