//! Dense kernels, stable softmax and the seeded random stream shared by the
//! rest of the crate.
//!
//! Everything is stored and accumulated in `f64`. Matrices are row-major.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Norm at or below which a vector is treated as degenerate (not normalizable).
pub const EPS_NORM: f64 = 1e-12;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self::filled(rows, cols, 0.0)
    }

    pub fn filled(rows: usize, cols: usize, value: f64) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![value; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.set(i, i, 1.0);
        }
        m
    }

    /// Builds a matrix from row-major values, rejecting bad lengths and non-finite entries.
    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if rows * cols != data.len() {
            return Err(Error::Shape(format!(
                "{rows}x{cols} matrix needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(format!(
                "matrix entry ({}, {})",
                pos / cols.max(1),
                pos % cols.max(1)
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f64]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::Shape(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Self::from_vec(rows.len(), cols, data)
    }

    #[inline]
    pub fn rows(&self) -> usize {
        self.rows
    }

    #[inline]
    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, i: usize) -> &mut [f64] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_iter(&self) -> impl Iterator<Item = &[f64]> {
        (0..self.rows).map(move |i| self.row(i))
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        let mut t = Matrix::zeros(self.cols, self.rows);
        for i in 0..self.rows {
            for j in 0..self.cols {
                t.set(j, i, self.get(i, j));
            }
        }
        t
    }

    /// `self · otherᵀ`, i.e. all row-by-row dot products.
    pub fn matmul_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "A·Bᵀ needs equal column counts, got {} and {}",
                self.cols, other.cols
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        if other.rows == 0 {
            return Ok(out);
        }
        out.data
            .par_chunks_mut(other.rows)
            .enumerate()
            .for_each(|(i, out_row)| {
                let a = self.row(i);
                for (j, o) in out_row.iter_mut().enumerate() {
                    *o = dot(a, other.row(j));
                }
            });
        Ok(out)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape(format!(
                "A·B needs A.cols == B.rows, got {} and {}",
                self.cols, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.get(i, k);
                if a == 0.0 {
                    continue;
                }
                for (o, b) in out_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn matmul_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape(format!(
                "Aᵀ·B needs A.rows == B.rows, got {} and {}",
                self.rows, other.rows
            )));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for n in 0..self.rows {
            let a_row = self.row(n);
            let b_row = other.row(n);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    pub fn select_rows(&self, indices: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(indices.len() * self.cols);
        for &i in indices {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: indices.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks `other` below `self`.
    pub fn vstack(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(Error::Shape(format!(
                "vstack needs equal column counts, got {} and {}",
                self.cols, other.cols
            )));
        }
        let mut data = self.data.clone();
        data.extend_from_slice(&other.data);
        Ok(Matrix {
            rows: self.rows + other.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape(format!(
                "cannot add {:?} to {:?}",
                other.shape(),
                self.shape()
            )));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

#[inline]
pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Result of [`l2_normalize`].
#[derive(Debug, Clone, PartialEq)]
pub struct Normalized {
    pub values: Vec<f64>,
    pub norm: f64,
    /// Set when the input norm was at or below [`EPS_NORM`]; `values` is then the input unchanged.
    pub degenerate: bool,
}

pub fn l2_normalize(v: &[f64]) -> Normalized {
    let n = norm(v);
    if n <= EPS_NORM {
        Normalized {
            values: v.to_vec(),
            norm: n,
            degenerate: true,
        }
    } else {
        Normalized {
            values: v.iter().map(|x| x / n).collect(),
            norm: n,
            degenerate: false,
        }
    }
}

/// Cosine similarity. A degenerate (near-zero) operand has similarity 0 to everything.
pub fn cosine_sim(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!(
            "cosine of vectors with lengths {} and {}",
            a.len(),
            b.len()
        )));
    }
    let (na, nb) = (norm(a), norm(b));
    if na <= EPS_NORM || nb <= EPS_NORM {
        return Ok(0.0);
    }
    Ok((dot(a, b) / (na * nb)).clamp(-1.0, 1.0))
}

/// Row-normalizes `m`. Degenerate rows are zeroed and flagged so that they
/// have zero similarity to everything downstream.
pub fn normalize_rows(m: &Matrix) -> (Matrix, Vec<f64>, Vec<bool>) {
    let mut out = m.clone();
    let mut norms = Vec::with_capacity(m.rows());
    let mut degenerate = Vec::with_capacity(m.rows());
    for i in 0..m.rows() {
        let n = l2_normalize(m.row(i));
        norms.push(n.norm);
        degenerate.push(n.degenerate);
        if n.degenerate {
            out.row_mut(i).fill(0.0);
        } else {
            out.row_mut(i).copy_from_slice(&n.values);
        }
    }
    (out, norms, degenerate)
}

/// Pulls a gradient w.r.t. row-normalized outputs back to the raw rows:
/// `dz = (du − u (u·du)) / ‖z‖`. Degenerate rows get zero gradient.
pub fn normalize_rows_backward(
    unit: &Matrix,
    norms: &[f64],
    degenerate: &[bool],
    d_unit: &Matrix,
) -> Result<Matrix> {
    if unit.shape() != d_unit.shape() || norms.len() != unit.rows() {
        return Err(Error::Shape(format!(
            "normalization backward: unit {:?}, grad {:?}, {} norms",
            unit.shape(),
            d_unit.shape(),
            norms.len()
        )));
    }
    let mut out = Matrix::zeros(unit.rows(), unit.cols());
    for i in 0..unit.rows() {
        if degenerate[i] {
            continue;
        }
        let u = unit.row(i);
        let du = d_unit.row(i);
        let proj = dot(u, du);
        for ((o, &ui), &dui) in out.row_mut(i).iter_mut().zip(u).zip(du) {
            *o = (dui - ui * proj) / norms[i];
        }
    }
    Ok(out)
}

/// `result[i][j] = cosine_sim(A_i, B_j)`.
pub fn pairwise_cosine(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.cols() != b.cols() {
        return Err(Error::Shape(format!(
            "pairwise cosine of {}-dim and {}-dim rows",
            a.cols(),
            b.cols()
        )));
    }
    let (ua, _, _) = normalize_rows(a);
    let (ub, _, _) = normalize_rows(b);
    let mut s = ua.matmul_nt(&ub)?;
    for v in s.data_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    Ok(s)
}

/// Per-entry exclusion flags for an `rows × cols` score matrix.
///
/// The standard contrastive batch excludes the diagonal: the positive of
/// anchor `i` is never one of its negatives.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ExclusionMask {
    rows: usize,
    cols: usize,
    excluded: Vec<bool>,
}

impl ExclusionMask {
    pub fn none(rows: usize, cols: usize) -> Self {
        ExclusionMask {
            rows,
            cols,
            excluded: vec![false; rows * cols],
        }
    }

    pub fn diagonal(n: usize) -> Self {
        let mut m = Self::none(n, n);
        for i in 0..n {
            m.exclude(i, i);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    #[inline]
    pub fn is_excluded(&self, i: usize, j: usize) -> bool {
        self.excluded[i * self.cols + j]
    }

    pub fn exclude(&mut self, i: usize, j: usize) {
        self.excluded[i * self.cols + j] = true;
    }

    /// Column indices of row `i` that are not excluded.
    pub fn included(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        (0..self.cols).filter(move |&j| !self.is_excluded(i, j))
    }

    pub fn included_count(&self, i: usize) -> usize {
        self.included(i).count()
    }
}

/// Numerically stable softmax over a slice.
pub fn softmax(values: &[f64]) -> Vec<f64> {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = values.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

pub fn log_sum_exp(values: &[f64]) -> f64 {
    let max = values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return max;
    }
    max + values.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Row-wise softmax; excluded entries are exactly 0 and do not enter the normalizer.
pub fn row_softmax(m: &Matrix, mask: Option<&ExclusionMask>) -> Result<Matrix> {
    if let Some(mask) = mask {
        if mask.shape() != m.shape() {
            return Err(Error::Shape(format!(
                "mask {:?} does not match matrix {:?}",
                mask.shape(),
                m.shape()
            )));
        }
    }
    let mut out = Matrix::zeros(m.rows(), m.cols());
    for i in 0..m.rows() {
        let keep: Vec<usize> = match mask {
            Some(mask) => mask.included(i).collect(),
            None => (0..m.cols()).collect(),
        };
        if keep.is_empty() {
            return Err(Error::Usage(format!("row {i} is fully masked")));
        }
        let vals: Vec<f64> = keep.iter().map(|&j| m.get(i, j)).collect();
        for (&j, p) in keep.iter().zip(softmax(&vals)) {
            out.set(i, j, p);
        }
    }
    Ok(out)
}

/// Deterministic random stream backed by ChaCha8.
///
/// ChaCha is a counter-mode generator: a `(seed, stream)` pair fixes the
/// keystream on every platform, and distinct stream ids give independent
/// sequences from the same seed. All integer draws go through `u64` so the
/// stream does not depend on `usize` width.
#[derive(Debug, Clone)]
pub struct SeededRng {
    seed: u64,
    inner: ChaCha8Rng,
}

impl SeededRng {
    pub fn new(seed: u64) -> Self {
        Self::stream(seed, 0)
    }

    pub fn stream(seed: u64, stream: u64) -> Self {
        let mut inner = ChaCha8Rng::seed_from_u64(seed);
        inner.set_stream(stream);
        SeededRng { seed, inner }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Uniform on `[0, 1)`.
    pub fn uniform(&mut self) -> f64 {
        self.inner.random::<f64>()
    }

    pub fn uniform_range(&mut self, lo: f64, hi: f64) -> f64 {
        lo + (hi - lo) * self.uniform()
    }

    pub fn normal(&mut self) -> f64 {
        StandardNormal.sample(&mut self.inner)
    }

    pub fn bernoulli(&mut self, p: f64) -> bool {
        self.uniform() < p
    }

    /// Uniform index in `0..n`; `n` must be positive.
    pub fn index(&mut self, n: usize) -> usize {
        self.inner.random_range(0..n as u64) as usize
    }

    /// Fisher–Yates shuffle.
    pub fn shuffle<T>(&mut self, items: &mut [T]) {
        for i in (1..items.len()).rev() {
            let j = self.index(i + 1);
            items.swap(i, j);
        }
    }

    pub fn permutation(&mut self, n: usize) -> Vec<usize> {
        let mut p: Vec<usize> = (0..n).collect();
        self.shuffle(&mut p);
        p
    }
}
