//! Dense row-major matrices and the small amount of numerical linear algebra
//! the optimizers need: products, norms, a one-sided Jacobi SVD, random
//! semi-orthogonal bases and principal angles between subspaces.

use std::fmt;
use std::ops::{Index, IndexMut};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{param_err, Error, Result};

/// Orthonormality tolerance for [`OrthoBasis`].
pub const ORTHO_TOL: f64 = 1e-10;

const JACOBI_MAX_SWEEPS: usize = 80;

/// Dense matrix of `f64` stored row-major.
///
/// Zero-sized dimensions are allowed; an `n x 0` matrix is how an empty
/// projected gradient is represented.
#[derive(Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl fmt::Debug for Matrix {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "Matrix {}x{} [", self.rows, self.cols)?;
        for r in 0..self.rows {
            writeln!(f, "  {:?}", self.row(r))?;
        }
        write!(f, "]")
    }
}

impl Matrix {
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(param_err!(
                "data length {} does not match shape {}x{}",
                data.len(),
                rows,
                cols
            ));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m[(i, i)] = 1.0;
        }
        m
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    /// Builds a matrix from row slices. All rows must have the same length.
    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != cols {
                return Err(param_err!("row {i} has length {}, expected {cols}", row.len()));
            }
            data.extend_from_slice(row);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn column_vector(values: Vec<f64>) -> Self {
        Self {
            rows: values.len(),
            cols: 1,
            data: values,
        }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, &v) in values.iter().enumerate() {
            m[(i, i)] = v;
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.data
    }

    pub fn as_mut_slice(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.data[r * self.cols + c]).collect()
    }

    pub fn set_column(&mut self, c: usize, values: &[f64]) {
        debug_assert_eq!(values.len(), self.rows);
        for (r, &v) in values.iter().enumerate() {
            self.data[r * self.cols + c] = v;
        }
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self[(c, r)])
    }

    fn check_same_shape(&self, other: &Self, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(param_err!(
                "{op}: shape mismatch {}x{} vs {}x{}",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(())
    }

    /// `self * other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(param_err!(
                "matmul: inner dimensions differ ({}x{} * {}x{})",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Self::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ * other` without materializing the transpose.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(param_err!(
                "t_matmul: row counts differ ({}x{}ᵀ * {}x{})",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        let mut out = Self::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self * otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(param_err!(
                "matmul_t: column counts differ ({}x{} * {}x{}ᵀ)",
                self.rows,
                self.cols,
                other.rows,
                other.cols
            ));
        }
        Ok(Self::from_fn(self.rows, other.rows, |i, j| {
            dot_slices(self.row(i), other.row(j))
        }))
    }

    pub fn zip_map(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Result<Self> {
        self.check_same_shape(other, "zip_map")?;
        Ok(Self {
            rows: self.rows,
            cols: self.cols,
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        })
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&a| f(a)).collect(),
        }
    }

    pub fn add(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a + b)
    }

    pub fn sub(&self, other: &Self) -> Result<Self> {
        self.zip_map(other, |a, b| a - b)
    }

    pub fn scale(&self, s: f64) -> Self {
        self.map(|a| a * s)
    }

    /// Frobenius inner product.
    pub fn dot(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "dot")?;
        Ok(dot_slices(&self.data, &other.data))
    }

    pub fn norm_sq(&self) -> f64 {
        self.data.iter().map(|a| a * a).sum()
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.norm_sq().sqrt()
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, a| m.max(a.abs()))
    }

    pub fn max_abs_diff(&self, other: &Self) -> Result<f64> {
        self.check_same_shape(other, "max_abs_diff")?;
        Ok(self
            .data
            .iter()
            .zip(&other.data)
            .fold(0.0, |m, (a, b)| m.max((a - b).abs())))
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|a| a.is_finite())
    }

    pub fn ensure_finite(&self, what: &str) -> Result<()> {
        if self.is_finite() {
            Ok(())
        } else {
            Err(Error::Data(format!("{what} contains non-finite entries")))
        }
    }
}

impl Index<(usize, usize)> for Matrix {
    type Output = f64;

    fn index(&self, (r, c): (usize, usize)) -> &f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &self.data[r * self.cols + c]
    }
}

impl IndexMut<(usize, usize)> for Matrix {
    fn index_mut(&mut self, (r, c): (usize, usize)) -> &mut f64 {
        debug_assert!(r < self.rows && c < self.cols);
        &mut self.data[r * self.cols + c]
    }
}

pub(crate) fn dot_slices(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// A tall matrix with orthonormal columns (`QᵀQ = I`).
#[derive(Debug, Clone, PartialEq)]
pub struct OrthoBasis(Matrix);

impl OrthoBasis {
    /// Wraps `m`, checking that its columns are orthonormal to [`ORTHO_TOL`].
    pub fn new(m: Matrix) -> Result<Self> {
        if m.cols() > m.rows() {
            return Err(param_err!(
                "basis has more columns ({}) than ambient dimension ({})",
                m.cols(),
                m.rows()
            ));
        }
        m.ensure_finite("basis")?;
        let gram = m.t_matmul(&m)?;
        let err = gram.max_abs_diff(&Matrix::identity(m.cols()))?;
        if err > ORTHO_TOL {
            return Err(param_err!("columns are not orthonormal (max deviation {err:e})"));
        }
        Ok(Self(m))
    }

    pub(crate) fn new_unchecked(m: Matrix) -> Self {
        Self(m)
    }

    /// A rank-0 basis of `R^n`.
    pub fn empty(n: usize) -> Self {
        Self(Matrix::zeros(n, 0))
    }

    pub fn matrix(&self) -> &Matrix {
        &self.0
    }

    pub fn into_matrix(self) -> Matrix {
        self.0
    }

    pub fn ambient_dim(&self) -> usize {
        self.0.rows()
    }

    pub fn rank(&self) -> usize {
        self.0.cols()
    }

    /// Largest entry of `|QᵀQ - I|`.
    pub fn orthonormality_error(&self) -> f64 {
        let gram = self.0.t_matmul(&self.0).expect("square gram");
        gram.max_abs_diff(&Matrix::identity(self.rank()))
            .expect("same shape")
    }
}

/// Leading singular triples of a matrix.
#[derive(Debug, Clone)]
pub struct SvdTruncation {
    pub u: OrthoBasis,
    pub s: Vec<f64>,
    pub v: OrthoBasis,
}

impl SvdTruncation {
    /// `U diag(S) Vᵀ`.
    pub fn reconstruct(&self) -> Matrix {
        let mut us = self.u.matrix().clone();
        for r in 0..us.rows() {
            for (c, s) in self.s.iter().enumerate() {
                us[(r, c)] *= s;
            }
        }
        us.matmul_t(self.v.matrix()).expect("conformant factors")
    }
}

/// Rank-`r` truncated SVD by one-sided Jacobi rotations on the smaller side.
///
/// Singular values come back non-increasing. Each column of `U` has its
/// largest-magnitude entry made non-negative (the matching `V` column is
/// flipped with it). Directions with zero singular value get standard basis
/// vectors orthogonal to the rest of `U`.
pub fn truncated_svd(a: &Matrix, r: usize) -> Result<SvdTruncation> {
    let k = a.rows().min(a.cols());
    if r == 0 || r > k {
        return Err(param_err!(
            "truncation rank {r} outside 1..={k} for a {}x{} matrix",
            a.rows(),
            a.cols()
        ));
    }
    a.ensure_finite("matrix")?;

    if a.rows() >= a.cols() {
        let (u, s, v) = jacobi_tall(a, r);
        Ok(SvdTruncation {
            u: OrthoBasis::new_unchecked(u),
            s,
            v: OrthoBasis::new_unchecked(v),
        })
    } else {
        // Aᵀ = U' S V'ᵀ, so A = V' S U'ᵀ; the sign convention is reapplied to the
        // new left factor.
        let (ut, s, vt) = jacobi_tall(&a.transpose(), r);
        let (mut u, mut v) = (vt, ut);
        // Left vectors of A come from rotations and may belong to zero singular
        // values; pad those the same way as the tall case.
        fix_null_columns(&mut u, &s);
        apply_sign_convention(&mut u, &mut v);
        Ok(SvdTruncation {
            u: OrthoBasis::new_unchecked(u),
            s,
            v: OrthoBasis::new_unchecked(v),
        })
    }
}

/// One-sided Jacobi on a matrix with `rows >= cols`. Returns the leading `r`
/// triples with `U` already padded and sign-normalized.
fn jacobi_tall(a: &Matrix, r: usize) -> (Matrix, Vec<f64>, Matrix) {
    let (n, m) = a.shape();
    // Work on columns stored contiguously.
    let mut w: Vec<Vec<f64>> = (0..m).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..m)
        .map(|j| {
            let mut e = vec![0.0; m];
            e[j] = 1.0;
            e
        })
        .collect();

    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..m {
            for q in (p + 1)..m {
                let alpha = dot_slices(&w[p], &w[p]);
                let beta = dot_slices(&w[q], &w[q]);
                let gamma = dot_slices(&w[p], &w[q]);
                if gamma == 0.0 || gamma.abs() <= f64::EPSILON * (alpha * beta).sqrt() {
                    continue;
                }
                rotated = true;
                let zeta = (beta - alpha) / (2.0 * gamma);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                rotate(&mut w, p, q, c, s);
                rotate(&mut v, p, q, c, s);
            }
        }
        if !rotated {
            break;
        }
    }

    let norms: Vec<f64> = w.iter().map(|col| dot_slices(col, col).sqrt()).collect();
    let mut order: Vec<usize> = (0..m).collect();
    // Stable sort keeps index order among ties.
    order.sort_by(|&i, &j| norms[j].total_cmp(&norms[i]));

    let s: Vec<f64> = order[..r].iter().map(|&j| norms[j]).collect();
    let null_cut = null_threshold(&s);
    let mut u = Matrix::zeros(n, r);
    let mut vm = Matrix::zeros(m, r);
    for (c, &j) in order[..r].iter().enumerate() {
        vm.set_column(c, &v[j]);
        if s[c] > null_cut {
            let col: Vec<f64> = w[j].iter().map(|x| x / s[c]).collect();
            u.set_column(c, &col);
        }
    }
    fix_null_columns(&mut u, &s);
    apply_sign_convention(&mut u, &mut vm);
    (u, s, vm)
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (left, right) = cols.split_at_mut(q);
    let (cp, cq) = (&mut left[p], &mut right[0]);
    for (x, y) in cp.iter_mut().zip(cq.iter_mut()) {
        let xp = *x;
        let yq = *y;
        *x = c * xp - s * yq;
        *y = s * xp + c * yq;
    }
}

fn null_threshold(s: &[f64]) -> f64 {
    let smax = s.first().copied().unwrap_or(0.0);
    smax * 1e-13
}

/// Replaces columns whose singular value is (numerically) zero with standard
/// basis vectors orthogonal to every other column of `u`.
fn fix_null_columns(u: &mut Matrix, s: &[f64]) {
    let cut = null_threshold(s);
    let null: Vec<usize> = (0..s.len()).filter(|&c| s[c] <= cut).collect();
    if null.is_empty() {
        return;
    }
    let n = u.rows();
    let mut kept: Vec<Vec<f64>> = (0..s.len())
        .filter(|c| !null.contains(c))
        .map(|c| u.column(c))
        .collect();
    let mut candidate = 0;
    for &c in &null {
        loop {
            assert!(candidate < n, "ran out of standard basis vectors");
            let mut e = vec![0.0; n];
            e[candidate] = 1.0;
            candidate += 1;
            if let Some(col) = orthonormalize_against(&e, &kept, 0.5) {
                u.set_column(c, &col);
                kept.push(col);
                break;
            }
        }
    }
}

/// Two passes of Gram-Schmidt of `x` against `basis`. Returns `None` when the
/// residual norm falls below `min_norm` times the input norm.
fn orthonormalize_against(x: &[f64], basis: &[Vec<f64>], min_norm: f64) -> Option<Vec<f64>> {
    let input = dot_slices(x, x).sqrt();
    let mut y = x.to_vec();
    for _ in 0..2 {
        for b in basis {
            let proj = dot_slices(&y, b);
            for (yi, bi) in y.iter_mut().zip(b) {
                *yi -= proj * bi;
            }
        }
    }
    let norm = dot_slices(&y, &y).sqrt();
    if norm <= min_norm * input || norm == 0.0 {
        return None;
    }
    Some(y.into_iter().map(|yi| yi / norm).collect())
}

fn apply_sign_convention(u: &mut Matrix, v: &mut Matrix) {
    for c in 0..u.cols() {
        let col = u.column(c);
        let mut best = 0;
        for (i, x) in col.iter().enumerate() {
            if x.abs() > col[best].abs() {
                best = i;
            }
        }
        if col[best] < 0.0 {
            for r in 0..u.rows() {
                u[(r, c)] = -u[(r, c)];
            }
            for r in 0..v.rows() {
                v[(r, c)] = -v[(r, c)];
            }
        }
    }
}

/// A random `n x r` matrix with orthonormal columns, drawn by filling with
/// standard normals from a ChaCha stream seeded with `seed` and then
/// orthonormalizing column by column.
pub fn random_semi_orthogonal(seed: u64, n: usize, r: usize) -> Result<OrthoBasis> {
    if r > n {
        return Err(param_err!("rank {r} exceeds ambient dimension {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut cols: Vec<Vec<f64>> = Vec::with_capacity(r);
    while cols.len() < r {
        let x: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        // A draw nearly inside the current span is resampled; this has
        // probability zero in exact arithmetic.
        if let Some(q) = orthonormalize_against(&x, &cols, 1e-6) {
            cols.push(q);
        }
    }
    let mut m = Matrix::zeros(n, r);
    for (c, col) in cols.iter().enumerate() {
        m.set_column(c, col);
    }
    Ok(OrthoBasis(m))
}

/// Cosines of the principal angles between `span(P)` and `span(Q)`: the
/// singular values of `PᵀQ`, non-increasing, clamped to `[0, 1]`.
pub fn principal_angle_cosines(p: &OrthoBasis, q: &OrthoBasis) -> Result<Vec<f64>> {
    if p.ambient_dim() != q.ambient_dim() {
        return Err(param_err!(
            "ambient dimensions differ: {} vs {}",
            p.ambient_dim(),
            q.ambient_dim()
        ));
    }
    let k = p.rank().min(q.rank());
    if k == 0 {
        return Ok(Vec::new());
    }
    let cross = p.matrix().t_matmul(q.matrix())?;
    let svd = truncated_svd(&cross, k)?;
    Ok(svd.s.into_iter().map(|c| c.clamp(0.0, 1.0)).collect())
}
