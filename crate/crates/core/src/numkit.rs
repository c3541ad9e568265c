//! Dense numerical kernel: row-major matrices, softmax, RMS normalization,
//! cosine similarity and a power-iteration PCA.
//!
//! Storage is generic over [`Real`] (`f32` canonical, `f64` for gradient
//! checks and oracles). Every reduction accumulates in `f64` with a fixed loop
//! order, so results are bit-reproducible for identical inputs.

use std::fmt::Debug;

use num_traits::Float;

use crate::error::{Error, Result};

/// Floating-point element type of a [`Matrix`].
pub trait Real: Float + Default + Debug + Send + Sync + 'static {
    fn cast(v: f64) -> Self;
    fn wide(self) -> f64;
}

impl Real for f32 {
    #[inline]
    fn cast(v: f64) -> Self {
        v as f32
    }
    #[inline]
    fn wide(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    #[inline]
    fn cast(v: f64) -> Self {
        v
    }
    #[inline]
    fn wide(self) -> f64 {
        self
    }
}

/// Row-major dense matrix.
#[derive(Clone, Debug, PartialEq)]
pub struct Matrix<T = f32> {
    rows: usize,
    cols: usize,
    data: Vec<T>,
}

impl<T: Real> Matrix<T> {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![T::zero(); rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<T>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::invalid(format!(
                "matrix data length {} does not match {rows}x{cols}",
                data.len()
            )));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<T>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            if r.len() != cols {
                return Err(Error::invalid(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> T) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    pub fn identity(n: usize) -> Self {
        Self::from_fn(n, n, |r, c| if r == c { T::one() } else { T::zero() })
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
    pub fn data(&self) -> &[T] {
        &self.data
    }

    #[inline]
    pub fn data_mut(&mut self) -> &mut [T] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<T> {
        self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> T {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: T) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    #[inline]
    pub fn row_mut(&mut self, r: usize) -> &mut [T] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn column(&self, c: usize) -> Vec<T> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> Self {
        Self::from_fn(self.cols, self.rows, |r, c| self.get(c, r))
    }

    pub fn cast<U: Real>(&self) -> Matrix<U> {
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| U::cast(v.wide())).collect(),
        }
    }

    pub fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&v| f(v)).collect(),
        }
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Largest absolute element-wise difference; infinite on shape mismatch.
    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        if self.shape() != other.shape() {
            return f64::INFINITY;
        }
        self.data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| (a.wide() - b.wide()).abs())
            .fold(0.0, f64::max)
    }

    /// `self · other`.
    pub fn matmul(&self, other: &Self) -> Result<Self> {
        if self.cols != other.rows {
            return Err(Error::Shape {
                op: "matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let n = other.cols;
        let mut out = Self::zeros(self.rows, n);
        let mut acc = vec![0.0f64; n];
        for i in 0..self.rows {
            acc.iter_mut().for_each(|a| *a = 0.0);
            for (k, &a_ik) in self.row(i).iter().enumerate() {
                let a_ik = a_ik.wide();
                for (slot, &b) in acc.iter_mut().zip(other.row(k)) {
                    *slot += a_ik * b.wide();
                }
            }
            for (o, &a) in out.row_mut(i).iter_mut().zip(&acc) {
                *o = T::cast(a);
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn matmul_t(&self, other: &Self) -> Result<Self> {
        if self.cols != other.cols {
            return Err(Error::Shape {
                op: "matmul_t",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let mut out = Self::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = T::cast(dot(a, other.row(j)));
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn t_matmul(&self, other: &Self) -> Result<Self> {
        if self.rows != other.rows {
            return Err(Error::Shape {
                op: "t_matmul",
                left: self.shape(),
                right: other.shape(),
            });
        }
        let (m, n) = (self.cols, other.cols);
        let mut acc = vec![0.0f64; m * n];
        for k in 0..self.rows {
            let b = other.row(k);
            for (i, &a_ki) in self.row(k).iter().enumerate() {
                let a_ki = a_ki.wide();
                if a_ki == 0.0 {
                    continue;
                }
                for (slot, &b_kj) in acc[i * n..(i + 1) * n].iter_mut().zip(b) {
                    *slot += a_ki * b_kj.wide();
                }
            }
        }
        Ok(Self {
            rows: m,
            cols: n,
            data: acc.into_iter().map(T::cast).collect(),
        })
    }

    /// Element-wise `self += other`.
    pub fn add_assign(&mut self, other: &Self) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::Shape {
                op: "add",
                left: self.shape(),
                right: other.shape(),
            });
        }
        for (a, &b) in self.data.iter_mut().zip(&other.data) {
            *a = *a + b;
        }
        Ok(())
    }
}

/// Free-function form of [`Matrix::matmul`].
pub fn matmul<T: Real>(a: &Matrix<T>, b: &Matrix<T>) -> Result<Matrix<T>> {
    a.matmul(b)
}

/// Dot product with an `f64` accumulator.
#[inline]
pub fn dot<T: Real>(a: &[T], b: &[T]) -> f64 {
    let mut acc = 0.0f64;
    for (&x, &y) in a.iter().zip(b) {
        acc += x.wide() * y.wide();
    }
    acc
}

#[inline]
pub fn norm<T: Real>(a: &[T]) -> f64 {
    dot(a, a).sqrt()
}

/// Cosine similarity; zero when either norm is below `1e-12`.
pub fn cosine<T: Real>(a: &[T], b: &[T]) -> f64 {
    let (na, nb) = (norm(a), norm(b));
    if na < 1e-12 || nb < 1e-12 {
        return 0.0;
    }
    (dot(a, b) / (na * nb)).clamp(-1.0, 1.0)
}

/// In-place numerically stable softmax of one row.
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let max = row.iter().fold(f64::NEG_INFINITY, |m, v| m.max(v.wide()));
    let mut sum = 0.0f64;
    let mut exps = Vec::with_capacity(row.len());
    for v in row.iter() {
        let e = (v.wide() - max).exp();
        sum += e;
        exps.push(e);
    }
    for (v, e) in row.iter_mut().zip(exps) {
        *v = T::cast(e / sum);
    }
}

pub fn softmax_rows<T: Real>(m: &Matrix<T>) -> Matrix<T> {
    let mut out = m.clone();
    for r in 0..out.rows {
        softmax_in_place(out.row_mut(r));
    }
    out
}

/// Epsilon added to the mean square inside [`rms_norm_rows`].
pub const RMS_EPS: f64 = 1e-5;

/// Inverse RMS of one row.
#[inline]
pub fn inv_rms<T: Real>(row: &[T]) -> f64 {
    let ms = dot(row, row) / row.len() as f64;
    1.0 / (ms + RMS_EPS).sqrt()
}

/// Row-wise RMS normalization with a per-column gain.
pub fn rms_norm_rows<T: Real>(x: &Matrix<T>, gain: &[T]) -> Matrix<T> {
    let mut out = Matrix::zeros(x.rows, x.cols);
    for r in 0..x.rows {
        let src = x.row(r);
        let inv = inv_rms(src);
        for ((o, &v), &g) in out.row_mut(r).iter_mut().zip(src).zip(gain) {
            *o = T::cast(v.wide() * inv * g.wide());
        }
    }
    out
}

/// Convergence tolerance of the PCA power iteration.
pub const PCA_TOLERANCE: f64 = 1e-9;
/// Iteration cap per principal component.
pub const PCA_MAX_ITERATIONS: usize = 10_000;

/// Top-k principal components of a sample matrix.
#[derive(Clone, Debug)]
pub struct PcaResult {
    pub mean: Vec<f64>,
    /// `d × k'` with orthonormal columns, `k' ≤ k`.
    pub basis: Matrix<f64>,
    /// Descending, nonnegative.
    pub eigenvalues: Vec<f64>,
    pub requested: usize,
    /// Set when the covariance had rank below the requested `k`.
    pub rank_deficient: bool,
}

impl PcaResult {
    pub fn k(&self) -> usize {
        self.basis.cols()
    }

    /// Coordinates of `x − mean` in the basis.
    pub fn project<T: Real>(&self, x: &[T]) -> Vec<f64> {
        let centered: Vec<f64> = x
            .iter()
            .zip(&self.mean)
            .map(|(v, m)| v.wide() - m)
            .collect();
        (0..self.k())
            .map(|c| {
                (0..self.basis.rows())
                    .map(|r| self.basis.get(r, c) * centered[r])
                    .sum()
            })
            .collect()
    }
}

/// Principal components by power iteration with deflation on the sample
/// covariance (normalized by `n − 1`). Each eigenvector's largest-magnitude
/// coordinate is made positive.
pub fn pca_fit<T: Real>(samples: &Matrix<T>, k: usize) -> Result<PcaResult> {
    let (n, d) = samples.shape();
    if n < 2 {
        return Err(Error::invalid(format!("pca needs at least 2 samples, got {n}")));
    }
    if k == 0 || k > n.min(d) {
        return Err(Error::invalid(format!(
            "pca component count {k} outside 1..={}",
            n.min(d)
        )));
    }

    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, v) in mean.iter_mut().zip(samples.row(r)) {
            *m += v.wide();
        }
    }
    mean.iter_mut().for_each(|m| *m /= n as f64);

    let mut cov = vec![0.0f64; d * d];
    for r in 0..n {
        let centered: Vec<f64> = samples
            .row(r)
            .iter()
            .zip(&mean)
            .map(|(v, m)| v.wide() - m)
            .collect();
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] += centered[i] * centered[j];
            }
        }
    }
    cov.iter_mut().for_each(|c| *c /= (n - 1) as f64);

    let trace: f64 = (0..d).map(|i| cov[i * d + i]).sum();
    let rank_floor = 1e-12 * trace.max(f64::MIN_POSITIVE);

    let mut vectors: Vec<Vec<f64>> = Vec::with_capacity(k);
    let mut eigenvalues = Vec::with_capacity(k);
    for component in 0..k {
        if trace <= 0.0 {
            break;
        }
        let Some((vec, value)) = dominant_eigenpair(&cov, d, trace, rank_floor, component)? else {
            break;
        };
        for i in 0..d {
            for j in 0..d {
                cov[i * d + j] -= value * vec[i] * vec[j];
            }
        }
        vectors.push(vec);
        eigenvalues.push(value);
    }

    let kk = vectors.len();
    let basis = Matrix::from_fn(d, kk, |r, c| vectors[c][r]);
    Ok(PcaResult {
        mean,
        basis,
        eigenvalues,
        requested: k,
        rank_deficient: kk < k,
    })
}

fn dominant_eigenpair(
    cov: &[f64],
    d: usize,
    trace: f64,
    rank_floor: f64,
    component: usize,
) -> Result<Option<(Vec<f64>, f64)>> {
    let apply = |v: &[f64]| -> Vec<f64> {
        (0..d)
            .map(|i| (0..d).map(|j| cov[i * d + j] * v[j]).sum())
            .collect()
    };
    let vnorm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();

    // Start from the column with the largest norm.
    let (best_col, best_norm) = (0..d)
        .map(|c| (c, (0..d).map(|r| cov[r * d + c].powi(2)).sum::<f64>().sqrt()))
        .fold((0, -1.0), |acc, x| if x.1 > acc.1 { x } else { acc });
    if best_norm <= rank_floor {
        return Ok(None);
    }
    let mut v: Vec<f64> = (0..d).map(|r| cov[r * d + best_col] / best_norm).collect();

    let mut residual = f64::INFINITY;
    let mut converged = false;
    for _ in 0..PCA_MAX_ITERATIONS {
        let w = apply(&v);
        let wn = vnorm(&w);
        if wn <= rank_floor {
            return Ok(None);
        }
        let lambda: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        residual = w
            .iter()
            .zip(&v)
            .map(|(wi, vi)| (wi - lambda * vi).powi(2))
            .sum::<f64>()
            .sqrt();
        let next: Vec<f64> = w.iter().map(|x| x / wn).collect();
        let delta = vnorm(
            &next
                .iter()
                .zip(&v)
                .map(|(a, b)| a - b)
                .collect::<Vec<_>>(),
        );
        v = next;
        if delta < PCA_TOLERANCE || residual <= PCA_TOLERANCE * trace {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::NoConvergence {
            component,
            residual,
        });
    }

    let cv = apply(&v);
    let value: f64 = v.iter().zip(&cv).map(|(a, b)| a * b).sum();
    if value <= rank_floor {
        return Ok(None);
    }
    let pivot = v
        .iter()
        .enumerate()
        .fold((0, -1.0f64), |acc, (i, x)| if x.abs() > acc.1 { (i, x.abs()) } else { acc })
        .0;
    if v[pivot] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
    Ok(Some((v, value)))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Matrix<f64> {
        Matrix::from_rows(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn identity_times_matrix() {
        let a = m(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.5]]);
        assert_eq!(Matrix::identity(3).matmul(&a).unwrap(), a);
    }

    #[test]
    fn scalar_product() {
        let c = m(&[&[2.0]]).matmul(&m(&[&[3.0]])).unwrap();
        assert_eq!(c.get(0, 0), 6.0);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let err = Matrix::<f32>::zeros(2, 3).matmul(&Matrix::zeros(2, 3)).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("(2, 3)"), "{msg}");
    }

    #[test]
    fn transposed_products_agree() {
        let a = m(&[&[1.0, -2.0], &[0.5, 3.0], &[2.0, 1.0]]);
        let b = m(&[&[0.25, 1.0], &[-1.0, 2.0], &[4.0, 0.0]]);
        let direct = a.matmul(&b.transpose()).unwrap();
        assert!(direct.max_abs_diff(&a.matmul_t(&b).unwrap()) < 1e-15);
        let tdirect = a.transpose().matmul(&b).unwrap();
        assert!(tdirect.max_abs_diff(&a.t_matmul(&b).unwrap()) < 1e-15);
    }

    #[test]
    fn softmax_of_constant_row_is_uniform() {
        let s = softmax_rows(&m(&[&[0.0, 0.0, 0.0]]));
        for v in s.row(0) {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
    }

    #[test]
    fn softmax_shift_invariance() {
        let a = softmax_rows(&m(&[&[10.0, 12.5, 9.0]]));
        let b = softmax_rows(&m(&[&[0.0, 2.5, -1.0]]));
        assert!(a.max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn cosine_conventions() {
        let v = [0.3f64, -1.0, 2.0];
        let neg: Vec<f64> = v.iter().map(|x| -x).collect();
        assert!((cosine(&v, &v) - 1.0).abs() < 1e-12);
        assert!((cosine(&v, &neg) + 1.0).abs() < 1e-12);
        assert!((cosine(&[1.0f64, 0.0], &[1.0, 1.0]) - 0.7071).abs() < 1e-4);
        assert_eq!(cosine(&[0.0f64, 0.0], &[1.0, 1.0]), 0.0);
    }

    #[test]
    fn pca_rank_one_line() {
        let dir = [1.0, 2.0, -2.0];
        let rows: Vec<Vec<f64>> = [-2.0, -0.5, 1.0, 3.0]
            .iter()
            .map(|t| dir.iter().map(|d| d * t).collect())
            .collect();
        let pca = pca_fit(&Matrix::from_rows(&rows).unwrap(), 1).unwrap();
        let c = cosine(&pca.basis.column(0), &dir);
        assert!(c.abs() >= 1.0 - 1e-6);
        // sign convention: largest-magnitude coordinate positive
        let col = pca.basis.column(0);
        let pivot = col.iter().cloned().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
        assert!(pivot > 0.0);
    }

    #[test]
    fn pca_two_symmetric_points() {
        let pca = pca_fit(&m(&[&[-1.5, 0.0], &[1.5, 0.0]]), 1).unwrap();
        // sample variance along x with n-1 normalization: (2.25 + 2.25) / 1
        assert!((pca.eigenvalues[0] - 4.5).abs() < 1e-12);
    }

    #[test]
    fn pca_flags_rank_deficiency() {
        let pca = pca_fit(&m(&[&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0], &[3.0, 6.0, 9.0]]), 2).unwrap();
        assert_eq!(pca.k(), 1);
        assert!(pca.rank_deficient);

        let flat = pca_fit(&m(&[&[1.0, 1.0], &[1.0, 1.0], &[1.0, 1.0]]), 1).unwrap();
        assert_eq!(flat.k(), 0);
        assert!(flat.rank_deficient);
    }

    #[test]
    fn pca_rejects_bad_k() {
        assert!(pca_fit(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), 3).is_err());
        assert!(pca_fit(&m(&[&[1.0, 2.0], &[3.0, 4.0]]), 0).is_err());
        assert!(pca_fit(&m(&[&[1.0, 2.0]]), 1).is_err());
    }
}
