//! Dense linear algebra and low-rank Kronecker utilities.
//!
//! Everything here works on a small row-major [`Matrix`] of `f64`. The
//! decompositions (Householder QR, one-sided Jacobi SVD, Cholesky with a
//! jitter ladder) are sized for desk-scale problems: tens to a few hundred
//! rows. The streaming randomized SVD in [`FactorSketch`] keeps a rank-`r`
//! factor `B` with `B Bᵀ ≈ Σ b_t b_tᵀ` without ever forming the `d × d`
//! Gram matrix.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Largest element count [`kron`] will allocate.
pub const KRON_ELEMENT_LIMIT: usize = 1 << 26;

/// Dense row-major matrix: `data[i * cols + j] = A[i, j]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
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
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape {
                op: "Matrix::from_vec",
                expected: (rows, cols),
                got: (data.len(), 1),
            });
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from row slices. Panics on ragged input.
    pub fn from_rows(rows: &[&[f64]]) -> Self {
        let cols = rows.first().map_or(0, |r| r.len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for r in rows {
            assert_eq!(r.len(), cols, "ragged rows");
            data.extend_from_slice(r);
        }
        Self {
            rows: rows.len(),
            cols,
            data,
        }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for i in 0..rows {
            for j in 0..cols {
                data.push(f(i, j));
            }
        }
        Self { rows, cols, data }
    }

    pub fn diag(values: &[f64]) -> Self {
        let n = values.len();
        let mut m = Self::zeros(n, n);
        for (i, v) in values.iter().enumerate() {
            m.data[i * n + i] = *v;
        }
        m
    }

    /// Matrix whose columns are the given vectors.
    pub fn from_columns(dim: usize, columns: &[Vec<f64>]) -> Result<Self> {
        let mut m = Self::zeros(dim, columns.len());
        for (j, c) in columns.iter().enumerate() {
            if c.len() != dim {
                return Err(Error::Shape {
                    op: "Matrix::from_columns",
                    expected: (dim, 1),
                    got: (c.len(), 1),
                });
            }
            for (i, v) in c.iter().enumerate() {
                m.data[i * columns.len() + j] = *v;
            }
        }
        Ok(m)
    }

    /// Seeded matrix with i.i.d. standard normal entries.
    pub fn random_normal(rows: usize, cols: usize, rng: &mut impl rand::Rng) -> Self {
        let data = (0..rows * cols).map(|_| StandardNormal.sample(rng)).collect();
        Self { rows, cols, data }
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

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.cols + j]
    }

    #[inline]
    pub fn set(&mut self, i: usize, j: usize, v: f64) {
        self.data[i * self.cols + j] = v;
    }

    #[inline]
    pub fn data(&self) -> &[f64] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn column(&self, j: usize) -> Vec<f64> {
        (0..self.rows).map(|i| self.get(i, j)).collect()
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn transpose(&self) -> Matrix {
        Matrix::from_fn(self.cols, self.rows, |i, j| self.get(j, i))
    }

    pub fn matmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                expected: (self.cols, other.cols),
                got: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let out_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for k in 0..self.cols {
                let a = self.data[i * self.cols + k];
                if a == 0.0 {
                    continue;
                }
                let b_row = &other.data[k * other.cols..(k + 1) * other.cols];
                for (o, b) in out_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other` without forming the transpose.
    pub fn tmatmul(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "tmatmul",
                expected: (self.rows, other.cols),
                got: other.shape(),
            });
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let a_row = self.row(k);
            let b_row = other.row(k);
            for (i, a) in a_row.iter().enumerate() {
                if *a == 0.0 {
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

    pub fn matvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.cols);
        (0..self.rows).map(|i| dot(self.row(i), x)).collect()
    }

    /// `selfᵀ · x`.
    pub fn tmatvec(&self, x: &[f64]) -> Vec<f64> {
        debug_assert_eq!(x.len(), self.rows);
        let mut out = vec![0.0; self.cols];
        for (i, xi) in x.iter().enumerate() {
            if *xi == 0.0 {
                continue;
            }
            for (o, a) in out.iter_mut().zip(self.row(i)) {
                *o += xi * a;
            }
        }
        out
    }

    /// `self += alpha · u vᵀ`.
    pub fn add_outer(&mut self, alpha: f64, u: &[f64], v: &[f64]) {
        debug_assert_eq!(u.len(), self.rows);
        debug_assert_eq!(v.len(), self.cols);
        for (i, ui) in u.iter().enumerate() {
            let s = alpha * ui;
            if s == 0.0 {
                continue;
            }
            let row = &mut self.data[i * self.cols..(i + 1) * self.cols];
            for (r, vj) in row.iter_mut().zip(v) {
                *r += s * vj;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        self.data.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn scaled(&self, alpha: f64) -> Matrix {
        let mut m = self.clone();
        m.scale(alpha);
        m
    }

    pub fn add(&self, other: &Matrix) -> Result<Matrix> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                expected: self.shape(),
                got: other.shape(),
            });
        }
        let data = self.data.iter().zip(&other.data).map(|(a, b)| a + b).collect();
        Ok(Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &Matrix) -> Result<Matrix> {
        self.add(&other.scaled(-1.0))
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// `⟨A, B⟩_F = Σ A_ij B_ij`.
    pub fn frobenius_inner(&self, other: &Matrix) -> f64 {
        dot(&self.data, &other.data)
    }

    pub fn trace(&self) -> f64 {
        (0..self.rows.min(self.cols)).map(|i| self.get(i, i)).sum()
    }

    /// Horizontal concatenation `[self | other]`.
    pub fn hcat(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "hcat",
                expected: (self.rows, other.cols),
                got: other.shape(),
            });
        }
        let cols = self.cols + other.cols;
        let mut out = Matrix::zeros(self.rows, cols);
        for i in 0..self.rows {
            out.data[i * cols..i * cols + self.cols].copy_from_slice(self.row(i));
            out.data[i * cols + self.cols..(i + 1) * cols].copy_from_slice(other.row(i));
        }
        Ok(out)
    }

    /// First `k` columns.
    pub fn leading_columns(&self, k: usize) -> Matrix {
        let k = k.min(self.cols);
        Matrix::from_fn(self.rows, k, |i, j| self.get(i, j))
    }

    /// `(A + Aᵀ) / 2`.
    pub fn symmetrized(&self) -> Matrix {
        Matrix::from_fn(self.rows, self.cols, |i, j| 0.5 * (self.get(i, j) + self.get(j, i)))
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(a: &[f64]) -> f64 {
    dot(a, a).sqrt()
}

/// Kronecker product: block `(i, j)` of the result is `a[i, j] · b`.
pub fn kron(a: &Matrix, b: &Matrix) -> Result<Matrix> {
    if a.data.is_empty() || b.data.is_empty() {
        return Err(Error::Domain("kron of an empty matrix".into()));
    }
    let rows = a.rows.checked_mul(b.rows);
    let cols = a.cols.checked_mul(b.cols);
    let elements = rows.zip(cols).and_then(|(r, c)| r.checked_mul(c));
    let (rows, cols) = match elements {
        Some(n) if n <= KRON_ELEMENT_LIMIT => (rows.unwrap_or(0), cols.unwrap_or(0)),
        other => {
            return Err(Error::SizeLimit {
                op: "kron",
                elements: other.unwrap_or(usize::MAX),
                limit: KRON_ELEMENT_LIMIT,
            })
        }
    };
    let mut out = Matrix::zeros(rows, cols);
    for ai in 0..a.rows {
        for aj in 0..a.cols {
            let s = a.get(ai, aj);
            for bi in 0..b.rows {
                let dst = (ai * b.rows + bi) * cols + aj * b.cols;
                for (o, v) in out.data[dst..dst + b.cols].iter_mut().zip(b.row(bi)) {
                    *o = s * v;
                }
            }
        }
    }
    Ok(out)
}

/// Lower-triangular Cholesky factor together with the diagonal jitter that
/// was needed to obtain it.
#[derive(Debug, Clone)]
pub struct Cholesky {
    pub l: Matrix,
    pub jitter: f64,
}

impl Cholesky {
    /// `log det(A + jitter·I) = 2 Σ log L_ii`.
    pub fn logdet(&self) -> f64 {
        (0..self.l.rows).map(|i| 2.0 * self.l.get(i, i).ln()).sum()
    }

    /// Solves `(L Lᵀ) x = b`.
    pub fn solve(&self, b: &[f64]) -> Vec<f64> {
        let n = self.l.rows;
        let mut y = b.to_vec();
        for i in 0..n {
            let mut s = y[i];
            for k in 0..i {
                s -= self.l.get(i, k) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        for i in (0..n).rev() {
            let mut s = y[i];
            for k in i + 1..n {
                s -= self.l.get(k, i) * y[k];
            }
            y[i] = s / self.l.get(i, i);
        }
        y
    }
}

fn check_square(op: &'static str, a: &Matrix) -> Result<()> {
    if a.rows != a.cols {
        return Err(Error::Shape {
            op,
            expected: (a.rows, a.rows),
            got: a.shape(),
        });
    }
    Ok(())
}

fn cholesky_attempt(a: &Matrix, jitter: f64) -> Option<Matrix> {
    let n = a.rows;
    let mut l = Matrix::zeros(n, n);
    for j in 0..n {
        let diag = a.get(j, j) + jitter;
        let mut d = diag;
        for k in 0..j {
            d -= l.get(j, k) * l.get(j, k);
        }
        // Pivots lost to cancellation count as zero.
        if !(d > n as f64 * f64::EPSILON * diag.abs()) || !d.is_finite() {
            return None;
        }
        let ljj = d.sqrt();
        l.set(j, j, ljj);
        for i in j + 1..n {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l.get(i, k) * l.get(j, k);
            }
            l.set(i, j, s / ljj);
        }
    }
    Some(l)
}

/// Cholesky factorization without any jitter.
pub fn cholesky_strict(a: &Matrix) -> Result<Cholesky> {
    check_square("cholesky", a)?;
    cholesky_attempt(a, 0.0)
        .map(|l| Cholesky { l, jitter: 0.0 })
        .ok_or(Error::NotPositiveDefinite { jitter: 0.0 })
}

/// Cholesky factorization with the jitter ladder: on failure retry with
/// `1e-10 · tr(a)/n` added to the diagonal, escalating by ×10 up to
/// `1e-4 · tr(a)/n`.
pub fn cholesky(a: &Matrix) -> Result<Cholesky> {
    check_square("cholesky", a)?;
    if let Some(l) = cholesky_attempt(a, 0.0) {
        return Ok(Cholesky { l, jitter: 0.0 });
    }
    let n = a.rows.max(1) as f64;
    let base = a.trace().abs() / n;
    let mut jitter = 0.0;
    for exp in -10..=-4 {
        jitter = base * 10f64.powi(exp);
        if jitter == 0.0 {
            continue;
        }
        if let Some(l) = cholesky_attempt(a, jitter) {
            return Ok(Cholesky { l, jitter });
        }
    }
    Err(Error::NotPositiveDefinite { jitter })
}

/// `log det(a)` for symmetric positive definite `a`.
pub fn logdet_dense(a: &Matrix) -> Result<f64> {
    Ok(cholesky_strict(a)?.logdet())
}

/// Thin Householder QR: `a = q · r` with `q` of shape `m × min(m, n)`
/// having orthonormal columns.
pub fn qr(a: &Matrix) -> (Matrix, Matrix) {
    let (m, n) = a.shape();
    let k = m.min(n);
    let mut r = a.clone();
    let mut reflectors: Vec<Option<Vec<f64>>> = Vec::with_capacity(k);
    for j in 0..k {
        let x: Vec<f64> = (j..m).map(|i| r.get(i, j)).collect();
        let xnorm = norm(&x);
        if xnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        let alpha = if x[0] >= 0.0 { -xnorm } else { xnorm };
        let mut v = x;
        v[0] -= alpha;
        let vnorm = norm(&v);
        if vnorm == 0.0 {
            reflectors.push(None);
            continue;
        }
        v.iter_mut().for_each(|e| *e /= vnorm);
        for c in j..n {
            let s: f64 = (j..m).map(|i| v[i - j] * r.get(i, c)).sum();
            for i in j..m {
                let val = r.get(i, c) - 2.0 * v[i - j] * s;
                r.set(i, c, val);
            }
        }
        reflectors.push(Some(v));
    }
    let mut q = Matrix::from_fn(m, k, |i, j| if i == j { 1.0 } else { 0.0 });
    for (j, v) in reflectors.iter().enumerate().rev() {
        let Some(v) = v else { continue };
        for c in 0..k {
            let s: f64 = (j..m).map(|i| v[i - j] * q.get(i, c)).sum();
            for i in j..m {
                let val = q.get(i, c) - 2.0 * v[i - j] * s;
                q.set(i, c, val);
            }
        }
    }
    let r = Matrix::from_fn(k, n, |i, j| if j >= i { r.get(i, j) } else { 0.0 });
    (q, r)
}

/// Thin singular value decomposition `a = u · diag(s) · vᵀ`.
#[derive(Debug, Clone)]
pub struct Svd {
    /// `m × k` with orthonormal columns (zero columns for zero singular values).
    pub u: Matrix,
    /// Non-increasing, non-negative, length `k = min(m, n)`.
    pub s: Vec<f64>,
    /// `n × k` with orthonormal columns.
    pub v: Matrix,
}

const JACOBI_MAX_SWEEPS: usize = 80;

/// One-sided (Hestenes) Jacobi SVD.
pub fn svd(a: &Matrix) -> Result<Svd> {
    if a.data.is_empty() {
        return Err(Error::Domain("svd of an empty matrix".into()));
    }
    if a.rows < a.cols {
        let t = svd(&a.transpose())?;
        return Ok(Svd { u: t.v, s: t.s, v: t.u });
    }
    let (m, n) = a.shape();
    // Work on columns stored contiguously: w[j] is column j of a.
    let mut w: Vec<Vec<f64>> = (0..n).map(|j| a.column(j)).collect();
    let mut v: Vec<Vec<f64>> = (0..n)
        .map(|j| (0..n).map(|i| if i == j { 1.0 } else { 0.0 }).collect())
        .collect();
    let eps = f64::EPSILON;
    // Columns below this squared norm are rounding noise and left alone.
    let floor = (eps * a.frobenius_norm()).powi(2);
    let mut converged = false;
    for _ in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in p + 1..n {
                let alpha = dot(&w[p], &w[p]);
                let beta = dot(&w[q], &w[q]);
                let gamma = dot(&w[p], &w[q]);
                if alpha <= floor || beta <= floor || gamma == 0.0 || gamma.abs() <= eps * (alpha * beta).sqrt() {
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
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            op: "svd",
            iterations: JACOBI_MAX_SWEEPS,
        });
    }
    let mut order: Vec<(usize, f64)> = w.iter().map(|c| norm(c)).enumerate().collect();
    order.sort_by(|x, y| y.1.total_cmp(&x.1).then(x.0.cmp(&y.0)));
    let mut u = Matrix::zeros(m, n);
    let mut vm = Matrix::zeros(n, n);
    let mut s = Vec::with_capacity(n);
    for (dst, (src, sigma)) in order.into_iter().enumerate() {
        let sigma = if sigma * sigma <= floor { 0.0 } else { sigma };
        s.push(sigma);
        if sigma > 0.0 {
            for i in 0..m {
                u.set(i, dst, w[src][i] / sigma);
            }
        }
        for i in 0..n {
            vm.set(i, dst, v[src][i]);
        }
    }
    Ok(Svd { u, s, v: vm })
}

fn rotate(cols: &mut [Vec<f64>], p: usize, q: usize, c: f64, s: f64) {
    let (lo, hi) = cols.split_at_mut(q);
    for (x, y) in lo[p].iter_mut().zip(hi[0].iter_mut()) {
        let (xp, xq) = (*x, *y);
        *x = c * xp - s * xq;
        *y = s * xp + c * xq;
    }
}

/// A `dim × rank` factor `B` standing for the PSD matrix `B Bᵀ`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LowRankFactor {
    pub factor: Matrix,
}

impl LowRankFactor {
    pub fn zeros(dim: usize) -> Self {
        Self {
            factor: Matrix::zeros(dim, 0),
        }
    }

    pub fn new(factor: Matrix) -> Self {
        Self { factor }
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn rank(&self) -> usize {
        self.factor.cols()
    }

    /// `Bᵀ B` (`rank × rank`).
    pub fn gram(&self) -> Matrix {
        self.factor
            .tmatmul(&self.factor)
            .expect("factor is conformable with itself")
    }

    /// Dense `B Bᵀ`. Materializes `dim × dim`; meant for tests and small dims.
    pub fn outer(&self) -> Matrix {
        self.factor
            .matmul(&self.factor.transpose())
            .expect("factor is conformable with its transpose")
    }

    pub fn is_zero(&self) -> bool {
        self.factor.data().iter().all(|v| *v == 0.0)
    }

    pub fn scaled(&self, alpha: f64) -> Self {
        Self {
            factor: self.factor.scaled(alpha),
        }
    }
}

/// Randomized sketch parameters for low-rank factor estimation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SketchConfig {
    pub target_rank: usize,
    pub oversampling: usize,
    pub seed: u64,
    /// Columns buffered between re-sketches in [`FactorSketch`].
    pub block_columns: usize,
}

impl Default for SketchConfig {
    fn default() -> Self {
        Self {
            target_rank: 10,
            oversampling: 5,
            seed: 0,
            block_columns: 64,
        }
    }
}

impl SketchConfig {
    pub fn validate(&self) -> Result<()> {
        if self.target_rank == 0 {
            return Err(Error::config("sketch.target_rank", "must be >= 1"));
        }
        if self.block_columns == 0 {
            return Err(Error::config("sketch.block_columns", "must be >= 1"));
        }
        Ok(())
    }
}

/// Randomized range-finder compression of `a` (`d × c`) to a factor of at
/// most `rank` columns whose outer product approximates `a aᵀ`.
fn compress(a: &Matrix, rank: usize, oversampling: usize, rng: &mut ChaCha8Rng) -> Result<Matrix> {
    let (d, c) = a.shape();
    if c == 0 || d == 0 {
        return Ok(Matrix::zeros(d, 0));
    }
    let width = (rank + oversampling).min(c).min(d).max(1);
    let omega = Matrix::random_normal(c, width, rng);
    let mut y = a.matmul(&omega)?;
    if width < c {
        // One power iteration sharpens the captured range when the sketch is
        // narrower than the block.
        let (q0, _) = qr(&y);
        y = a.matmul(&a.tmatmul(&q0)?)?;
    }
    let (q, _) = qr(&y);
    let small = q.tmatmul(a)?;
    let dec = svd(&small)?;
    let keep = rank.min(dec.s.len());
    let mut us = q.matmul(&dec.u.leading_columns(keep))?;
    for i in 0..us.rows() {
        for j in 0..keep {
            let v = us.get(i, j) * dec.s[j];
            us.set(i, j, v);
        }
    }
    Ok(us)
}

/// One step of the streaming low-rank estimator: append `column` to the
/// current factor and re-truncate `[B | b]` to `cfg.target_rank` columns.
/// The Gaussian test matrix is drawn from `cfg.seed`, so the result depends
/// only on the inputs.
pub fn rsvd_update(current: &LowRankFactor, column: &[f64], cfg: &SketchConfig) -> Result<LowRankFactor> {
    if column.len() != current.dim() {
        return Err(Error::Shape {
            op: "rsvd_update",
            expected: (current.dim(), 1),
            got: (column.len(), 1),
        });
    }
    let b = Matrix::from_vec(column.len(), 1, column.to_vec())?;
    let stacked = current.factor.hcat(&b)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factor = compress(&stacked, cfg.target_rank, cfg.oversampling, &mut rng)?;
    Ok(LowRankFactor { factor })
}

/// Merges two factors: `[A | B]` re-truncated, so the result approximates
/// `A Aᵀ + B Bᵀ`.
pub fn merge_factors(a: &LowRankFactor, b: &LowRankFactor, cfg: &SketchConfig) -> Result<LowRankFactor> {
    let stacked = a.factor.hcat(&b.factor)?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let factor = compress(&stacked, cfg.target_rank, cfg.oversampling, &mut rng)?;
    Ok(LowRankFactor { factor })
}

/// Streaming accumulator for `Σ b_t b_tᵀ`.
///
/// Columns are buffered and folded into the running factor every
/// `cfg.block_columns` pushes with a freshly drawn sketch, so memory stays
/// `O(dim · (rank + block))`.
#[derive(Debug, Clone)]
pub struct FactorSketch {
    cfg: SketchConfig,
    factor: Matrix,
    buffer: Vec<Vec<f64>>,
    rng: ChaCha8Rng,
    pushed: u64,
}

impl FactorSketch {
    pub fn new(dim: usize, cfg: SketchConfig) -> Self {
        Self {
            cfg,
            factor: Matrix::zeros(dim, 0),
            buffer: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            pushed: 0,
        }
    }

    pub fn dim(&self) -> usize {
        self.factor.rows()
    }

    pub fn pushed(&self) -> u64 {
        self.pushed
    }

    pub fn push(&mut self, column: &[f64]) -> Result<()> {
        if column.len() != self.dim() {
            return Err(Error::Shape {
                op: "FactorSketch::push",
                expected: (self.dim(), 1),
                got: (column.len(), 1),
            });
        }
        self.buffer.push(column.to_vec());
        self.pushed += 1;
        if self.buffer.len() >= self.cfg.block_columns {
            self.flush()?;
        }
        Ok(())
    }

    fn flush(&mut self) -> Result<()> {
        if self.buffer.is_empty() {
            return Ok(());
        }
        let block = Matrix::from_columns(self.dim(), &self.buffer)?;
        self.buffer.clear();
        let stacked = self.factor.hcat(&block)?;
        self.factor = compress(&stacked, self.cfg.target_rank, self.cfg.oversampling, &mut self.rng)?;
        Ok(())
    }

    pub fn finish(mut self) -> Result<LowRankFactor> {
        self.flush()?;
        Ok(LowRankFactor { factor: self.factor })
    }
}
