//! Dense linear algebra primitives.
//!
//! Row-major `f64` matrices, a one-sided Jacobi SVD, seeded orthogonal
//! matrix construction, and normalized Walsh-Hadamard matrices. Everything
//! here is a pure function over immutable inputs.

use crate::error::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;
use rand_distr::{Distribution, StandardNormal};

/// Row-major dense matrix of 64-bit reals.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseMatrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl DenseMatrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        DenseMatrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(dim: usize) -> Self {
        let mut m = Self::zeros(dim, dim);
        for i in 0..dim {
            m.set(i, i, 1.0);
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::InvalidArgument(format!(
                "matrix data length {} does not match {}x{}",
                data.len(),
                rows,
                cols
            )));
        }
        Ok(DenseMatrix { rows, cols, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(Error::InvalidArgument("ragged rows".into()));
        }
        let data = rows.iter().flatten().copied().collect();
        Self::from_vec(nrows, ncols, data)
    }

    /// Diagonal matrix from a slice.
    pub fn diag(values: &[f64]) -> Self {
        let mut m = Self::zeros(values.len(), values.len());
        for (i, &v) in values.iter().enumerate() {
            m.set(i, i, v);
        }
        m
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn col(&self, c: usize) -> Vec<f64> {
        (0..self.rows).map(|r| self.get(r, c)).collect()
    }

    pub fn transpose(&self) -> DenseMatrix {
        let mut t = DenseMatrix::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.set(c, r, self.get(r, c));
            }
        }
        t
    }

    pub fn scale(&self, s: f64) -> DenseMatrix {
        DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|v| v * s).collect(),
        }
    }

    pub fn add(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a + b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn sub(&self, other: &DenseMatrix) -> Result<DenseMatrix> {
        self.check_same_shape(other, "sub")?;
        let data = self
            .data
            .iter()
            .zip(&other.data)
            .map(|(a, b)| a - b)
            .collect();
        Ok(DenseMatrix {
            rows: self.rows,
            cols: self.cols,
            data,
        })
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Frobenius inner product <A, B>_F.
    pub fn frobenius_dot(&self, other: &DenseMatrix) -> Result<f64> {
        self.check_same_shape(other, "frobenius_dot")?;
        Ok(self.data.iter().zip(&other.data).map(|(a, b)| a * b).sum())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    /// Horizontal concatenation [self | others...].
    pub fn hcat(parts: &[&DenseMatrix]) -> Result<DenseMatrix> {
        let rows = parts
            .first()
            .ok_or_else(|| Error::InvalidArgument("hcat of nothing".into()))?
            .rows;
        if parts.iter().any(|p| p.rows != rows) {
            return Err(Error::InvalidArgument("hcat row mismatch".into()));
        }
        let cols: usize = parts.iter().map(|p| p.cols).sum();
        let mut out = DenseMatrix::zeros(rows, cols);
        for r in 0..rows {
            let mut c0 = 0;
            for p in parts {
                out.row_mut(r)[c0..c0 + p.cols].copy_from_slice(p.row(r));
                c0 += p.cols;
            }
        }
        Ok(out)
    }

    /// Columns [c0, c1) as a new matrix.
    pub fn col_slice(&self, c0: usize, c1: usize) -> DenseMatrix {
        assert!(c0 <= c1 && c1 <= self.cols);
        let mut out = DenseMatrix::zeros(self.rows, c1 - c0);
        for r in 0..self.rows {
            out.row_mut(r).copy_from_slice(&self.row(r)[c0..c1]);
        }
        out
    }

    /// Rows [r0, r1) as a new matrix.
    pub fn row_slice(&self, r0: usize, r1: usize) -> DenseMatrix {
        assert!(r0 <= r1 && r1 <= self.rows);
        let mut out = DenseMatrix::zeros(r1 - r0, self.cols);
        for r in r0..r1 {
            out.row_mut(r - r0).copy_from_slice(self.row(r));
        }
        out
    }

    /// Scales column `c` in place.
    pub fn scale_col(&mut self, c: usize, s: f64) {
        for r in 0..self.rows {
            let v = self.get(r, c);
            self.set(r, c, v * s);
        }
    }

    /// Scales row `r` in place.
    pub fn scale_row(&mut self, r: usize, s: f64) {
        for v in self.row_mut(r) {
            *v *= s;
        }
    }

    pub fn max_abs(&self) -> f64 {
        self.data.iter().fold(0.0, |m, v| m.max(v.abs()))
    }

    fn check_same_shape(&self, other: &DenseMatrix, context: &str) -> Result<()> {
        if self.rows != other.rows || self.cols != other.cols {
            return Err(Error::ShapeMismatch {
                context: context.into(),
                left_rows: self.rows,
                left_cols: self.cols,
                right_rows: other.rows,
                right_cols: other.cols,
            });
        }
        Ok(())
    }
}

/// Matrix product `a * b`.
pub fn matmul(a: &DenseMatrix, b: &DenseMatrix) -> Result<DenseMatrix> {
    if a.cols != b.rows {
        return Err(Error::ShapeMismatch {
            context: "matmul".into(),
            left_rows: a.rows,
            left_cols: a.cols,
            right_rows: b.rows,
            right_cols: b.cols,
        });
    }
    let mut out = DenseMatrix::zeros(a.rows, b.cols);
    for i in 0..a.rows {
        for k in 0..a.cols {
            let aik = a.get(i, k);
            if aik == 0.0 {
                continue;
            }
            let brow = b.row(k);
            let orow = out.row_mut(i);
            for j in 0..b.cols {
                orow[j] += aik * brow[j];
            }
        }
    }
    Ok(out)
}

/// Full SVD: `a = u * diag(sigma) * vt`, with `p = min(rows, cols)`.
#[derive(Debug, Clone)]
pub struct SvdResult {
    pub u: DenseMatrix,
    pub sigma: Vec<f64>,
    pub vt: DenseMatrix,
}

const JACOBI_MAX_SWEEPS: usize = 100;
const JACOBI_REL_TOL: f64 = 1e-12;

/// One-sided Jacobi SVD.
///
/// Deterministic for identical input bytes; sign convention: the first
/// nonzero entry of each left singular vector is non-negative.
pub fn svd(a: &DenseMatrix) -> Result<SvdResult> {
    if a.rows == 0 || a.cols == 0 {
        return Err(Error::InvalidArgument("svd of an empty matrix".into()));
    }
    if !a.is_finite() {
        return Err(Error::NonFinite(format!(
            "svd input ({}x{}) contains NaN/Inf",
            a.rows, a.cols
        )));
    }
    let mut result = if a.rows >= a.cols {
        svd_tall(a)?
    } else {
        // A = U S Vt  <=>  At = V S Ut
        let t = svd_tall(&a.transpose())?;
        SvdResult {
            u: t.vt.transpose(),
            sigma: t.sigma,
            vt: t.u.transpose(),
        }
    };
    apply_sign_convention(&mut result);
    Ok(result)
}

fn svd_tall(a: &DenseMatrix) -> Result<SvdResult> {
    let (m, n) = (a.rows, a.cols);
    debug_assert!(m >= n);
    let mut b = a.clone();
    let mut v = DenseMatrix::identity(n);

    let mut converged = false;
    for _sweep in 0..JACOBI_MAX_SWEEPS {
        let mut rotated = false;
        for p in 0..n {
            for q in (p + 1)..n {
                let mut app = 0.0;
                let mut aqq = 0.0;
                let mut apq = 0.0;
                for r in 0..m {
                    let bp = b.get(r, p);
                    let bq = b.get(r, q);
                    app += bp * bp;
                    aqq += bq * bq;
                    apq += bp * bq;
                }
                if apq.abs() <= JACOBI_REL_TOL * (app * aqq).sqrt() || apq == 0.0 {
                    continue;
                }
                rotated = true;
                let zeta = (aqq - app) / (2.0 * apq);
                let t = zeta.signum() / (zeta.abs() + (1.0 + zeta * zeta).sqrt());
                let c = 1.0 / (1.0 + t * t).sqrt();
                let s = c * t;
                for r in 0..m {
                    let bp = b.get(r, p);
                    let bq = b.get(r, q);
                    b.set(r, p, c * bp - s * bq);
                    b.set(r, q, s * bp + c * bq);
                }
                for r in 0..n {
                    let vp = v.get(r, p);
                    let vq = v.get(r, q);
                    v.set(r, p, c * vp - s * vq);
                    v.set(r, q, s * vp + c * vq);
                }
            }
        }
        if !rotated {
            converged = true;
            break;
        }
    }
    if !converged {
        return Err(Error::SvdNonConvergence {
            rows: m,
            cols: n,
            sweeps: JACOBI_MAX_SWEEPS,
        });
    }

    // Column norms are the singular values.
    let mut order: Vec<usize> = (0..n).collect();
    let norms: Vec<f64> = (0..n)
        .map(|j| (0..m).map(|r| b.get(r, j).powi(2)).sum::<f64>().sqrt())
        .collect();
    order.sort_by(|&i, &j| norms[j].partial_cmp(&norms[i]).unwrap().then(i.cmp(&j)));

    let mut u = DenseMatrix::zeros(m, n);
    let mut sigma = vec![0.0; n];
    let mut vt = DenseMatrix::zeros(n, n);
    let zero_tol = norms.iter().cloned().fold(0.0_f64, f64::max) * 1e-300;
    for (k, &j) in order.iter().enumerate() {
        sigma[k] = norms[j];
        if norms[j] > zero_tol && norms[j] > 0.0 {
            for r in 0..m {
                u.set(r, k, b.get(r, j) / norms[j]);
            }
        }
        for r in 0..n {
            vt.set(k, r, v.get(r, j));
        }
    }
    complete_zero_columns(&mut u, &sigma);
    Ok(SvdResult { u, sigma, vt })
}

/// Fills zero-sigma columns of `u` with vectors orthonormal to the rest.
fn complete_zero_columns(u: &mut DenseMatrix, sigma: &[f64]) {
    let (m, n) = (u.rows, u.cols);
    for k in 0..n {
        if sigma[k] > 0.0 {
            continue;
        }
        // Orthogonalize standard basis vectors until one survives.
        'candidates: for e in 0..m {
            let mut cand = vec![0.0; m];
            cand[e] = 1.0;
            for j in 0..n {
                // Skip the slot being filled and zero columns not yet filled.
                if j == k || (sigma[j] == 0.0 && j > k) {
                    continue;
                }
                let dot: f64 = (0..m).map(|r| cand[r] * u.get(r, j)).sum();
                for r in 0..m {
                    cand[r] -= dot * u.get(r, j);
                }
            }
            let norm: f64 = cand.iter().map(|x| x * x).sum::<f64>().sqrt();
            if norm > 1e-6 {
                for r in 0..m {
                    u.set(r, k, cand[r] / norm);
                }
                break 'candidates;
            }
        }
    }
}

fn apply_sign_convention(res: &mut SvdResult) {
    let (m, p) = (res.u.rows, res.u.cols);
    for k in 0..p {
        let mut sign = 0.0;
        for r in 0..m {
            let v = res.u.get(r, k);
            if v != 0.0 {
                sign = v.signum();
                break;
            }
        }
        if sign < 0.0 {
            for r in 0..m {
                let v = res.u.get(r, k);
                res.u.set(r, k, -v);
            }
            res.vt.scale_row(k, -1.0);
        }
    }
}

/// Seeded random orthogonal matrix (orthonormalized Gaussian).
pub fn random_orthogonal(dim: usize, seed: u64) -> Result<DenseMatrix> {
    if dim == 0 {
        return Err(Error::InvalidArgument(
            "random_orthogonal requires dim >= 1".into(),
        ));
    }
    let mut rng = ChaCha20Rng::seed_from_u64(seed);
    let mut g = DenseMatrix::zeros(dim, dim);
    for v in g.data_mut() {
        *v = StandardNormal.sample(&mut rng);
    }
    // Modified Gram-Schmidt, two passes for orthogonality near 1e-15.
    for pass in 0..2 {
        for j in 0..dim {
            for k in 0..j {
                let dot: f64 = (0..dim).map(|r| g.get(r, j) * g.get(r, k)).sum();
                for r in 0..dim {
                    let v = g.get(r, j) - dot * g.get(r, k);
                    g.set(r, j, v);
                }
            }
            let norm: f64 = (0..dim).map(|r| g.get(r, j).powi(2)).sum::<f64>().sqrt();
            if norm < 1e-12 {
                // Degenerate draw; re-seed the column deterministically.
                if pass == 0 {
                    for r in 0..dim {
                        g.set(r, j, StandardNormal.sample(&mut rng));
                    }
                }
                continue;
            }
            for r in 0..dim {
                let v = g.get(r, j) / norm;
                g.set(r, j, v);
            }
        }
    }
    Ok(g)
}

/// Normalized Walsh-Hadamard matrix (Sylvester construction), entries
/// +/- 1/sqrt(dim).
pub fn hadamard(dim: usize) -> Result<DenseMatrix> {
    if dim == 0 || !dim.is_power_of_two() {
        return Err(Error::InvalidArgument(format!(
            "hadamard requires a power-of-two dimension, got {dim}; use random_orthogonal instead"
        )));
    }
    let mut h = DenseMatrix::from_vec(1, 1, vec![1.0])?;
    let mut size = 1;
    while size < dim {
        let mut next = DenseMatrix::zeros(size * 2, size * 2);
        for r in 0..size {
            for c in 0..size {
                let v = h.get(r, c);
                next.set(r, c, v);
                next.set(r, c + size, v);
                next.set(r + size, c, v);
                next.set(r + size, c + size, -v);
            }
        }
        h = next;
        size *= 2;
    }
    Ok(h.scale(1.0 / (dim as f64).sqrt()))
}

/// ||A^T A - I||_F, a cheap orthogonality measure.
pub fn orthogonality_defect(a: &DenseMatrix) -> f64 {
    let gram = matmul(&a.transpose(), a).expect("square gram");
    let mut sum = 0.0;
    for r in 0..gram.rows() {
        for c in 0..gram.cols() {
            let target = if r == c { 1.0 } else { 0.0 };
            sum += (gram.get(r, c) - target).powi(2);
        }
    }
    sum.sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn seeded_matrix(rows: usize, cols: usize, seed: u64) -> DenseMatrix {
        let mut rng = ChaCha20Rng::seed_from_u64(seed);
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        DenseMatrix::from_vec(rows, cols, data).unwrap()
    }

    fn reconstruct(res: &SvdResult) -> DenseMatrix {
        let mut us = res.u.clone();
        for (k, &s) in res.sigma.iter().enumerate() {
            us.scale_col(k, s);
        }
        matmul(&us, &res.vt).unwrap()
    }

    #[test]
    fn svd_diagonal() {
        let a = DenseMatrix::diag(&[3.0, 1.0]);
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![3.0, 1.0]);
        assert_eq!(r.u, DenseMatrix::identity(2));
        assert_eq!(r.vt, DenseMatrix::identity(2));
    }

    #[test]
    fn svd_antidiagonal() {
        // Eigenvalues of A^T A for [[0,2],[1,0]] are 4 and 1.
        let a = DenseMatrix::from_rows(&[vec![0.0, 2.0], vec![1.0, 0.0]]).unwrap();
        let r = svd(&a).unwrap();
        assert!((r.sigma[0] - 2.0).abs() < 1e-12);
        assert!((r.sigma[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn svd_zero_matrix() {
        let a = DenseMatrix::zeros(2, 2);
        let r = svd(&a).unwrap();
        assert_eq!(r.sigma, vec![0.0, 0.0]);
        assert!(orthogonality_defect(&r.u) < 1e-12);
    }

    #[test]
    fn svd_reconstructs_random_matrices() {
        for seed in 0..6u64 {
            for &(m, n) in &[(4usize, 4usize), (8, 3), (3, 8), (16, 32), (32, 16)] {
                let a = seeded_matrix(m, n, seed * 100 + (m * n) as u64);
                let r = svd(&a).unwrap();
                let rec = reconstruct(&r);
                let err = rec.sub(&a).unwrap().frobenius_norm() / a.frobenius_norm();
                assert!(err <= 1e-9, "seed {seed} {m}x{n}: err {err}");
                assert!(orthogonality_defect(&r.u) < 1e-10);
                assert!(orthogonality_defect(&r.vt.transpose()) < 1e-10);
                for w in r.sigma.windows(2) {
                    assert!(w[0] >= w[1]);
                }
            }
        }
    }

    #[test]
    fn svd_eckart_young_tail() {
        let a = seeded_matrix(6, 6, 42);
        let r = svd(&a).unwrap();
        for rank in 0..=6usize {
            let mut us = r.u.col_slice(0, rank);
            for k in 0..rank {
                us.scale_col(k, r.sigma[k]);
            }
            let approx = if rank == 0 {
                DenseMatrix::zeros(6, 6)
            } else {
                matmul(&us, &r.vt.row_slice(0, rank)).unwrap()
            };
            let err2 = approx.sub(&a).unwrap().frobenius_norm().powi(2);
            let tail: f64 = r.sigma[rank..].iter().map(|s| s * s).sum();
            assert!((err2 - tail).abs() <= 1e-9, "rank {rank}: {err2} vs {tail}");
        }
    }

    #[test]
    fn svd_deterministic() {
        let a = seeded_matrix(7, 5, 9);
        let r1 = svd(&a).unwrap();
        let r2 = svd(&a).unwrap();
        assert_eq!(r1.u.data(), r2.u.data());
        assert_eq!(r1.sigma, r2.sigma);
        assert_eq!(r1.vt.data(), r2.vt.data());
    }

    #[test]
    fn svd_sign_convention() {
        let a = seeded_matrix(5, 5, 3);
        let r = svd(&a).unwrap();
        for k in 0..5 {
            let first = (0..5).map(|i| r.u.get(i, k)).find(|v| *v != 0.0).unwrap();
            assert!(first > 0.0);
        }
    }

    #[test]
    fn svd_empty_rejected() {
        assert!(svd(&DenseMatrix::zeros(0, 3)).is_err());
    }

    #[test]
    fn matmul_identity_and_hand_value() {
        let b = seeded_matrix(3, 4, 1);
        let prod = matmul(&DenseMatrix::identity(3), &b).unwrap();
        assert_eq!(prod.data(), b.data());

        let a = DenseMatrix::from_rows(&[vec![1.0, 2.0]]).unwrap();
        let c = DenseMatrix::from_rows(&[vec![3.0], vec![4.0]]).unwrap();
        assert_eq!(matmul(&a, &c).unwrap().data(), &[11.0]);
    }

    #[test]
    fn matmul_associative() {
        let a = seeded_matrix(4, 4, 11);
        let b = seeded_matrix(4, 4, 12);
        let c = seeded_matrix(4, 4, 13);
        let left = matmul(&matmul(&a, &b).unwrap(), &c).unwrap();
        let right = matmul(&a, &matmul(&b, &c).unwrap()).unwrap();
        let diff = left.sub(&right).unwrap().max_abs();
        assert!(diff <= 1e-12);
    }

    #[test]
    fn matmul_shape_error_reports_both_shapes() {
        let a = DenseMatrix::zeros(2, 3);
        let b = DenseMatrix::zeros(2, 3);
        let err = matmul(&a, &b).unwrap_err().to_string();
        assert!(err.contains("2x3"));
    }

    #[test]
    fn random_orthogonal_properties() {
        let h = random_orthogonal(4, 7).unwrap();
        assert!(orthogonality_defect(&h) <= 1e-10);
        let h2 = random_orthogonal(4, 7).unwrap();
        assert_eq!(h.data(), h2.data());
        let one = random_orthogonal(1, 0).unwrap();
        assert!((one.get(0, 0).abs() - 1.0).abs() < 1e-12);
        assert!(random_orthogonal(0, 1).is_err());
    }

    #[test]
    fn hadamard_construction() {
        assert_eq!(hadamard(1).unwrap().data(), &[1.0]);
        let h2 = hadamard(2).unwrap();
        let s = 1.0 / 2.0_f64.sqrt();
        assert_eq!(h2.data(), &[s, s, s, -s]);
        let h4 = hadamard(4).unwrap();
        assert!(h4.data().iter().all(|v| (v.abs() - 0.5).abs() < 1e-15));
        assert!(orthogonality_defect(&h4) <= 1e-12);
        assert!(hadamard(3).is_err());
    }
}
