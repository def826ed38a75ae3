//! Dense matrices and the magnitude/direction decoupling built on them.
//!
//! [`TaskMatrix`] is a plain row-major `f64` matrix. Every weight, factor and
//! delta in the crate is carried as one, whatever its on-disk precision.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A dense row-major matrix of finite `f64` values.
#[derive(Clone, PartialEq)]
pub struct TaskMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for TaskMatrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "TaskMatrix {}x{} ", self.rows, self.cols)?;
        f.debug_list()
            .entries(self.data.chunks(self.cols.max(1)))
            .finish()
    }
}

impl TaskMatrix {
    /// Builds a matrix from row-major data, rejecting length mismatches and
    /// non-finite entries.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::dim(format!(
                "{} values supplied for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        if let Some(index) = data.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite { index });
        }
        Ok(Self { rows, cols, data })
    }

    pub(crate) fn from_vec_unchecked(rows: usize, cols: usize, data: Vec<f64>) -> Self {
        debug_assert_eq!(data.len(), rows * cols);
        Self { rows, cols, data }
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::from_vec_unchecked(rows, cols, vec![0.0; rows * cols])
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |i, j| if i == j { 1.0 } else { 0.0 })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self::from_vec_unchecked(rows, cols, data)
    }

    /// Builds from nested rows; panics on ragged input. Intended for literals.
    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Self {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.as_ref().len(), cols, "ragged rows");
            data.extend_from_slice(r.as_ref());
        }
        Self::from_vec_unchecked(rows.len(), cols, data)
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        Self::from_fn(n, n, |i, j| if i == j { values[i] } else { 0.0 })
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    #[inline]
    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn is_empty(&self) -> bool {
        self.rows == 0 || self.cols == 0
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[cfg(test)]
    pub(crate) fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::dim(format!(
                "cannot multiply {}x{} by {}x{}",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        let (m, k, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let out_row = &mut out[i * n..(i + 1) * n];
            for p in 0..k {
                let a = self.data[i * k + p];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[p * n..(p + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    /// `selfᵀ · other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::dim(format!(
                "row counts differ: {} vs {}",
                self.rows, other.rows
            )));
        }
        let (k, m, n) = (self.rows, self.cols, other.cols);
        let mut out = vec![0.0; m * n];
        for p in 0..k {
            let a_row = &self.data[p * m..(p + 1) * m];
            let b_row = &other.data[p * n..(p + 1) * n];
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out[i * n..(i + 1) * n];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(Self::from_vec_unchecked(m, n, out))
    }

    fn check_same_shape(&self, other: &Self, what: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{what}: shapes {}x{} and {}x{} differ",
                self.rows, self.cols, other.rows, other.cols
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "add")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.check_same_shape(other, "sub")?;
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a - b).collect();
        Ok(Self::from_vec_unchecked(self.rows, self.cols, data))
    }

    /// `self += alpha * other`.
    pub fn axpy(&mut self, alpha: f64, other: &Self) -> Result<()> {
        self.check_same_shape(other, "axpy")?;
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += alpha * b;
        }
        Ok(())
    }

    pub fn scale(&self, c: f64) -> Self {
        Self::from_vec_unchecked(self.rows, self.cols, self.data.iter().map(|x| c * x).collect())
    }

    pub fn scale_in_place(&mut self, c: f64) {
        self.data.iter_mut().for_each(|x| *x *= c);
    }

    pub fn squared_norm(&self) -> f64 {
        self.data.iter().map(|x| x * x).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        frobenius_norm(self)
    }

    /// Frobenius inner product `tr(selfᵀ other)`.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    /// Largest absolute entry.
    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0_f64, |m, x| m.max(x.abs()))
    }

    /// `‖self − other‖_F / ‖other‖_F`, or the absolute error when `other` is zero.
    pub fn relative_error(&self, reference: &Self) -> Result<f64> {
        let diff = self.sub(reference)?.frobenius_norm();
        let scale = reference.frobenius_norm();
        Ok(if scale > 0.0 { diff / scale } else { diff })
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// Sums same-shaped matrices in slice order.
pub fn sum_matrices<'a, I>(mats: I) -> Result<TaskMatrix>
where
    I: IntoIterator<Item = &'a TaskMatrix>,
{
    let mut iter = mats.into_iter();
    let first = iter
        .next()
        .ok_or_else(|| Error::dim("cannot sum an empty list of matrices"))?;
    let mut acc = first.clone();
    for m in iter {
        acc.axpy(1.0, m)?;
    }
    Ok(acc)
}

/// Which axis a magnitude vector is taken along.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MagnitudeMode {
    /// One norm per column (default).
    #[default]
    Column,
    /// One norm per row.
    Row,
    /// A single norm for the whole matrix.
    Matrix,
}

impl MagnitudeMode {
    pub const ALL: [MagnitudeMode; 3] = [MagnitudeMode::Column, MagnitudeMode::Row, MagnitudeMode::Matrix];

    pub fn as_str(self) -> &'static str {
        match self {
            MagnitudeMode::Column => "column",
            MagnitudeMode::Row => "row",
            MagnitudeMode::Matrix => "matrix",
        }
    }

    /// Length of a magnitude vector for a `rows × cols` source.
    pub fn magnitude_len(self, rows: usize, cols: usize) -> usize {
        match self {
            MagnitudeMode::Column => cols,
            MagnitudeMode::Row => rows,
            MagnitudeMode::Matrix => 1,
        }
    }
}

impl fmt::Display for MagnitudeMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MagnitudeMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "column" | "col" => Ok(MagnitudeMode::Column),
            "row" => Ok(MagnitudeMode::Row),
            "matrix" => Ok(MagnitudeMode::Matrix),
            other => Err(Error::Parameter(format!("unknown magnitude mode {other:?}"))),
        }
    }
}

/// Non-negative norm coefficients extracted along the axis given by `mode`.
#[derive(Debug, Clone, PartialEq)]
pub struct MagnitudeVector {
    pub values: Vec<f64>,
    pub mode: MagnitudeMode,
}

impl MagnitudeVector {
    /// Euclidean norm of the coefficients. In column mode this equals the
    /// Frobenius norm of the source matrix.
    pub fn norm(&self) -> f64 {
        self.values.iter().map(|x| x * x).sum::<f64>().sqrt()
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Source matrix with its magnitude divided out.
#[derive(Debug, Clone, PartialEq)]
pub struct DirectionMatrix(pub TaskMatrix);

impl DirectionMatrix {
    pub fn matrix(&self) -> &TaskMatrix {
        &self.0
    }
}

/// A `(magnitude, direction)` pair with `W = α ∘ W̄` along the mode's axis.
#[derive(Debug, Clone, PartialEq)]
pub struct DecoupledLayer {
    pub magnitude: MagnitudeVector,
    pub direction: DirectionMatrix,
}

/// Euclidean norm of every column.
pub fn column_norms(w: &TaskMatrix) -> Result<MagnitudeVector> {
    if w.is_empty() {
        return Err(Error::dim("column norms of an empty matrix"));
    }
    let mut sq = vec![0.0; w.cols()];
    for i in 0..w.rows() {
        for (s, x) in sq.iter_mut().zip(w.row(i)) {
            *s += x * x;
        }
    }
    Ok(MagnitudeVector {
        values: sq.into_iter().map(f64::sqrt).collect(),
        mode: MagnitudeMode::Column,
    })
}

fn row_norms(w: &TaskMatrix) -> Vec<f64> {
    (0..w.rows())
        .map(|i| w.row(i).iter().map(|x| x * x).sum::<f64>().sqrt())
        .collect()
}

/// Splits `w` into magnitude and direction along `mode`.
///
/// Slices whose norm falls below `1e-12 · ‖W‖_F / √count` get a zero
/// magnitude and a zero direction, so the split stays exactly invertible.
pub fn decouple(w: &TaskMatrix, mode: MagnitudeMode) -> Result<DecoupledLayer> {
    if w.is_empty() {
        return Err(Error::dim("cannot decouple an empty matrix"));
    }
    let total = frobenius_norm(w);
    let (rows, cols) = w.shape();
    let (mut norms, count) = match mode {
        MagnitudeMode::Column => (column_norms(w)?.values, cols),
        MagnitudeMode::Row => (row_norms(w), rows),
        MagnitudeMode::Matrix => (vec![total], 1),
    };
    let tau = 1e-12 * total / (count as f64).sqrt();
    for n in norms.iter_mut() {
        if *n < tau || *n == 0.0 {
            *n = 0.0;
        }
    }
    let inv: Vec<f64> = norms
        .iter()
        .map(|&n| if n > 0.0 { 1.0 / n } else { 0.0 })
        .collect();
    let direction = match mode {
        MagnitudeMode::Column => TaskMatrix::from_fn(rows, cols, |i, j| w.get(i, j) * inv[j]),
        MagnitudeMode::Row => TaskMatrix::from_fn(rows, cols, |i, j| w.get(i, j) * inv[i]),
        MagnitudeMode::Matrix => w.scale(inv[0]),
    };
    Ok(DecoupledLayer {
        magnitude: MagnitudeVector { values: norms, mode },
        direction: DirectionMatrix(direction),
    })
}

/// Inverse of [`decouple`]: scales each slice of the direction by its
/// magnitude.
pub fn recompose(d: &DecoupledLayer) -> Result<TaskMatrix> {
    let dir = d.direction.matrix();
    let (rows, cols) = dir.shape();
    let alpha = &d.magnitude.values;
    let expected = d.magnitude.mode.magnitude_len(rows, cols);
    if alpha.len() != expected {
        return Err(Error::dim(format!(
            "{} magnitude of length {} does not fit a {rows}x{cols} direction",
            d.magnitude.mode,
            alpha.len()
        )));
    }
    Ok(match d.magnitude.mode {
        MagnitudeMode::Column => TaskMatrix::from_fn(rows, cols, |i, j| alpha[j] * dir.get(i, j)),
        MagnitudeMode::Row => TaskMatrix::from_fn(rows, cols, |i, j| alpha[i] * dir.get(i, j)),
        MagnitudeMode::Matrix => dir.scale(alpha[0]),
    })
}

/// `‖W1ᵀ W2‖_F²`: zero exactly when every column of `w1` is orthogonal to
/// every column of `w2`.
pub fn cross_gram_norm(w1: &TaskMatrix, w2: &TaskMatrix) -> Result<f64> {
    Ok(w1.t_matmul(w2)?.squared_norm())
}

pub fn frobenius_norm(w: &TaskMatrix) -> f64 {
    // Scaled accumulation keeps very large or tiny entries from overflowing.
    let scale = w.max_abs();
    if scale == 0.0 {
        return 0.0;
    }
    let s: f64 = w.data().iter().map(|x| (x / scale) * (x / scale)).sum();
    scale * s.sqrt()
}

/// Best rank-`r` factorization `W ≈ B·A` (B is `m×r`, A is `r×n`), with the
/// singular values split evenly between the factors.
pub fn svd_truncate(w: &TaskMatrix, r: usize) -> Result<(TaskMatrix, TaskMatrix)> {
    let (m, n) = w.shape();
    if r == 0 || r > m.min(n) {
        return Err(Error::Parameter(format!(
            "rank {r} outside 1..={} for a {m}x{n} matrix",
            m.min(n)
        )));
    }
    let mat = nalgebra::DMatrix::from_row_slice(m, n, w.data());
    let svd = mat.svd(true, true);
    let u = svd.u.as_ref().expect("u requested");
    let v_t = svd.v_t.as_ref().expect("v_t requested");
    let mut order: Vec<usize> = (0..svd.singular_values.len()).collect();
    order.sort_by(|&a, &b| svd.singular_values[b].total_cmp(&svd.singular_values[a]));
    let order = &order[..r];

    let b = TaskMatrix::from_fn(m, r, |i, k| u[(i, order[k])] * svd.singular_values[order[k]].sqrt());
    let a = TaskMatrix::from_fn(r, n, |k, j| svd.singular_values[order[k]].sqrt() * v_t[(order[k], j)]);
    Ok((b, a))
}
