//! Running Gram-matrix engine.
//!
//! Maintains the cumulative vector `S_t = Σ y_i x_i`, the Gram matrix
//! `V_t = Σ x_i x_iᵀ`, a cached Moore–Penrose pseudoinverse of `V_t`, and the
//! elliptical-potential accumulator `Σ x_iᵀ V_i† x_i` for one sequence.
//!
//! The pseudoinverse cache is advanced by closed-form rank-one updates when
//! the new covariate is clearly outside or clearly inside the current range;
//! near the rank boundary it falls back to a full eigendecomposition. The
//! self-normalized ratio `SᵀV†S` and every leverage are exactly invariant
//! under a global rescaling of the covariates, which `rescale` exploits.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

pub type Vector = DVector<f64>;
pub type Matrix = DMatrix<f64>;

/// Relative eigenvalue cutoff used by the pseudoinverse.
pub const DEFAULT_TOL: f64 = 1e-10;

/// Hard cap on the ambient dimension; storage is dense throughout.
pub const MAX_DIM: usize = 64;

/// Closed-form updates between full eigendecomposition refreshes.
const REFRESH_INTERVAL: usize = 128;

#[derive(Debug, Error)]
pub enum GramError {
    #[error("dimension {0} outside supported range 1..={MAX_DIM}")]
    BadDim(usize),
    #[error("dimension mismatch: state is {expected}, input is {got}")]
    DimMismatch { expected: usize, got: usize },
    #[error("matrix is not symmetric within tolerance (max asymmetry {0:.3e})")]
    NotSymmetric(f64),
    #[error("matrix has eigenvalue {0:.3e} below the PSD tolerance")]
    NotPsd(f64),
    #[error("matrix is not positive definite")]
    NotPositiveDefinite,
    #[error("non-finite value encountered")]
    NonFinite,
    #[error("accumulator overflow; rescale the history before pushing")]
    Overflow,
    #[error("rescale factor must be positive and finite, got {0}")]
    BadScale(f64),
}

/// Quadratic form `vᵀ M v`.
pub fn quad(m: &Matrix, v: &Vector) -> f64 {
    v.dot(&(m * v))
}

fn all_finite_mat(m: &Matrix) -> bool {
    m.iter().all(|e| e.is_finite())
}

fn all_finite_vec(v: &Vector) -> bool {
    v.iter().all(|e| e.is_finite())
}

/// Eigendecomposition pseudoinverse of a symmetric PSD matrix with relative
/// cutoff `tol`: eigenpairs with `λ > tol·λ_max` are inverted, the rest
/// dropped. Returns the pseudoinverse together with the retained rank.
pub fn pinv_with_rank(m: &Matrix, tol: f64) -> Result<(Matrix, usize), GramError> {
    let d = m.nrows();
    if d == 0 || d > MAX_DIM || m.ncols() != d {
        return Err(GramError::BadDim(d.max(m.ncols())));
    }
    if !all_finite_mat(m) {
        return Err(GramError::NonFinite);
    }
    let scale = m.amax();
    let mut asym = 0.0f64;
    for i in 0..d {
        for j in (i + 1)..d {
            asym = asym.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    if asym > tol * scale {
        return Err(GramError::NotSymmetric(asym));
    }
    let sym = (m + m.transpose()) * 0.5;
    let eig = sym.symmetric_eigen();
    let lmax = eig.eigenvalues.iter().cloned().fold(0.0f64, f64::max);
    let lmin = eig.eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    if lmin < -tol * scale {
        return Err(GramError::NotPsd(lmin));
    }
    let cutoff = tol * lmax;
    let mut p = Matrix::zeros(d, d);
    let mut rank = 0usize;
    for (i, &lam) in eig.eigenvalues.iter().enumerate() {
        if lam > cutoff {
            let v = eig.eigenvectors.column(i);
            p += (v * v.transpose()) / lam;
            rank += 1;
        }
    }
    Ok((p, rank))
}

/// See [`pinv_with_rank`].
pub fn pinv(m: &Matrix, tol: f64) -> Result<Matrix, GramError> {
    pinv_with_rank(m, tol).map(|(p, _)| p)
}

/// Sherman–Morrison step for a positive definite matrix given its inverse:
/// returns `(M + xxᵀ)⁻¹ = M⁻¹ − M⁻¹xxᵀM⁻¹ / (1 + xᵀM⁻¹x)`.
pub fn sm_inverse_update(minv: &Matrix, x: &Vector) -> Result<Matrix, GramError> {
    let d = minv.nrows();
    if minv.ncols() != d || x.len() != d {
        return Err(GramError::DimMismatch {
            expected: d,
            got: x.len(),
        });
    }
    if !all_finite_mat(minv) || !all_finite_vec(x) {
        return Err(GramError::NonFinite);
    }
    // The input must be the inverse of a PD matrix, hence PD itself.
    if minv.clone().cholesky().is_none() {
        return Err(GramError::NotPositiveDefinite);
    }
    let a = minv * x;
    let denom = 1.0 + x.dot(&a);
    Ok(minv - (&a * a.transpose()) / denom)
}

/// How the cached pseudoinverse was advanced by the last push.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateKind {
    /// Zero covariate; nothing changed.
    Noop,
    /// New direction: rank grows by one, closed-form update.
    RankGrow,
    /// In-range covariate: Sherman–Morrison on the retained subspace.
    InRange,
    /// Boundary case: full eigendecomposition recompute.
    Recompute,
}

/// Running sums for one sequence, with the pseudoinverse cache.
#[derive(Debug, Clone)]
pub struct GramState {
    dim: usize,
    t: usize,
    s: Vector,
    v: Matrix,
    p: Matrix,
    rank: usize,
    ell_sum: f64,
    tol: f64,
    updates_since_refresh: usize,
}

impl GramState {
    pub fn new(dim: usize) -> Result<Self, GramError> {
        Self::with_tol(dim, DEFAULT_TOL)
    }

    pub fn with_tol(dim: usize, tol: f64) -> Result<Self, GramError> {
        if dim == 0 || dim > MAX_DIM {
            return Err(GramError::BadDim(dim));
        }
        if !(tol > 0.0) || !tol.is_finite() {
            return Err(GramError::BadScale(tol));
        }
        Ok(Self {
            dim,
            t: 0,
            s: Vector::zeros(dim),
            v: Matrix::zeros(dim, dim),
            p: Matrix::zeros(dim, dim),
            rank: 0,
            ell_sum: 0.0,
            tol,
            updates_since_refresh: 0,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }
    pub fn t(&self) -> usize {
        self.t
    }
    pub fn s(&self) -> &Vector {
        &self.s
    }
    pub fn v(&self) -> &Matrix {
        &self.v
    }
    /// Cached pseudoinverse of `V_t`.
    pub fn p(&self) -> &Matrix {
        &self.p
    }
    pub fn rank(&self) -> usize {
        self.rank
    }
    /// Running `Σ_{i≤t} x_iᵀ V_i† x_i`.
    pub fn ell_sum(&self) -> f64 {
        self.ell_sum
    }
    pub fn tol(&self) -> f64 {
        self.tol
    }

    /// Pseudoinverse of `V_t + xxᵀ` without committing the push, plus the
    /// resulting rank, the leverage `xᵀ(V_t+xxᵀ)†x`, and the path taken.
    pub fn updated_pinv(&self, x: &Vector) -> Result<(Matrix, usize, f64, UpdateKind), GramError> {
        if x.len() != self.dim {
            return Err(GramError::DimMismatch {
                expected: self.dim,
                got: x.len(),
            });
        }
        if !all_finite_vec(x) {
            return Err(GramError::NonFinite);
        }
        let xn2 = x.norm_squared();
        if xn2 == 0.0 {
            return Ok((self.p.clone(), self.rank, 0.0, UpdateKind::Noop));
        }
        let px = &self.p * x;
        let q = x.dot(&px); // xᵀ V† x
        let w = x - &self.v * &px; // component outside range(V)
        let wn2 = w.norm_squared();
        if wn2 > self.tol * self.v.trace() {
            // Rank grows. With k = V†x, w the out-of-range part, β = 1 + xᵀV†x:
            //   (V+xxᵀ)† = V† − (kwᵀ + wkᵀ)/‖w‖² + β wwᵀ/‖w‖⁴.
            let beta = 1.0 + q;
            let mut p = self.p.clone();
            p -= (&px * w.transpose() + &w * px.transpose()) / wn2;
            p += (&w * w.transpose()) * (beta / (wn2 * wn2));
            if !all_finite_mat(&p) {
                return Err(GramError::Overflow);
            }
            return Ok((p, self.rank + 1, 1.0, UpdateKind::RankGrow));
        }
        if wn2 <= self.tol * xn2 {
            // x is in range(V); Sherman–Morrison on the retained subspace.
            let denom = 1.0 + q;
            let p = &self.p - (&px * px.transpose()) / denom;
            let lev = (q / denom).clamp(0.0, 1.0);
            if !all_finite_mat(&p) {
                return Err(GramError::Overflow);
            }
            return Ok((p, self.rank, lev, UpdateKind::InRange));
        }
        // Boundary: recompute from scratch.
        let vnew = &self.v + x * x.transpose();
        let (p, rank) = pinv_with_rank(&vnew, self.tol)?;
        let lev = quad(&p, x).clamp(0.0, 1.0);
        Ok((p, rank, lev, UpdateKind::Recompute))
    }

    /// Absorb the observation `(x, y)`: `S += y·x`, `V += xxᵀ`, refresh the
    /// pseudoinverse cache, and accumulate the leverage of `x`.
    pub fn push(&mut self, x: &Vector, y: f64) -> Result<(), GramError> {
        if !y.is_finite() {
            return Err(GramError::NonFinite);
        }
        let (p, rank, lev, kind) = self.updated_pinv(x)?;
        let vnew = &self.v + x * x.transpose();
        let snew = &self.s + x * y;
        if !all_finite_mat(&vnew) || !all_finite_vec(&snew) {
            return Err(GramError::Overflow);
        }
        self.v = vnew;
        self.s = snew;
        self.p = p;
        self.rank = rank;
        self.ell_sum += lev;
        self.t += 1;
        match kind {
            UpdateKind::RankGrow | UpdateKind::InRange => {
                self.updates_since_refresh += 1;
                if self.updates_since_refresh >= REFRESH_INTERVAL {
                    let (p, rank) = pinv_with_rank(&self.v, self.tol)?;
                    self.p = p;
                    self.rank = rank;
                    self.updates_since_refresh = 0;
                }
            }
            UpdateKind::Recompute => self.updates_since_refresh = 0,
            UpdateKind::Noop => {}
        }
        Ok(())
    }

    /// Self-normalized ratio `R_t = Sᵀ V† S`, read from the cache.
    pub fn selfnorm(&self) -> f64 {
        quad(&self.p, &self.s).max(0.0)
    }

    /// Self-normalized ratio recomputed from a fresh eigendecomposition.
    pub fn selfnorm_recomputed(&self) -> Result<f64, GramError> {
        let p = pinv(&self.v, self.tol)?;
        Ok(quad(&p, &self.s).max(0.0))
    }

    /// Leverage of `x` with `x` already counted: `xᵀ(V_t+xxᵀ)†x ∈ [0,1]`.
    pub fn leverage(&self, x: &Vector) -> Result<f64, GramError> {
        Ok(self.updated_pinv(x)?.2)
    }

    /// Rescale the whole history: `S ← αS`, `V ← α²V`, `P ← α⁻²P`. Leaves the
    /// self-normalized ratio and all leverages unchanged.
    pub fn rescale(&mut self, alpha: f64) -> Result<(), GramError> {
        if !(alpha > 0.0) || !alpha.is_finite() {
            return Err(GramError::BadScale(alpha));
        }
        let a2 = alpha * alpha;
        let s = &self.s * alpha;
        let v = &self.v * a2;
        let p = &self.p / a2;
        if !all_finite_vec(&s) || !all_finite_mat(&v) || !all_finite_mat(&p) {
            return Err(GramError::Overflow);
        }
        self.s = s;
        self.v = v;
        self.p = p;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vecf(xs: &[f64]) -> Vector {
        Vector::from_row_slice(xs)
    }

    #[test]
    fn pinv_zero_matrix_is_zero() {
        let m = Matrix::zeros(2, 2);
        let p = pinv(&m, DEFAULT_TOL).unwrap();
        assert_eq!(p, Matrix::zeros(2, 2));
    }

    #[test]
    fn pinv_identity_is_identity() {
        let m = Matrix::identity(3, 3);
        let p = pinv(&m, DEFAULT_TOL).unwrap();
        assert!((p - Matrix::identity(3, 3)).amax() < 1e-12);
    }

    #[test]
    fn pinv_rank_one_closed_form() {
        // (xxᵀ)† = xxᵀ/‖x‖⁴ with x = (3,4), ‖x‖⁴ = 625.
        let x = vecf(&[3.0, 4.0]);
        let m = &x * x.transpose();
        let p = pinv(&m, DEFAULT_TOL).unwrap();
        let expect = (&x * x.transpose()) / 625.0;
        assert!((p - expect).amax() < 1e-12);
    }

    #[test]
    fn pinv_rejects_asymmetric_and_nonfinite() {
        let m = Matrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(matches!(
            pinv(&m, DEFAULT_TOL),
            Err(GramError::NotSymmetric(_))
        ));
        let m = Matrix::from_row_slice(2, 2, &[1.0, f64::NAN, f64::NAN, 1.0]);
        assert!(matches!(pinv(&m, DEFAULT_TOL), Err(GramError::NonFinite)));
    }

    #[test]
    fn pinv_double_application_restores_on_retained_subspace() {
        let x = vecf(&[3.0, 4.0]);
        let m = &x * x.transpose();
        let p = pinv(&m, DEFAULT_TOL).unwrap();
        let pp = pinv(&p, DEFAULT_TOL).unwrap();
        assert!((pp - m).amax() < 1e-9);
    }

    #[test]
    fn push_single_vector_has_leverage_one() {
        let mut g = GramState::new(2).unwrap();
        g.push(&vecf(&[3.0, 4.0]), 1.0).unwrap();
        assert_eq!(g.s(), &vecf(&[3.0, 4.0]));
        assert_eq!(g.rank(), 1);
        assert!((g.ell_sum() - 1.0).abs() < 1e-12);
        assert!((g.selfnorm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn push_zero_covariate_is_noop_except_round_count() {
        let mut g = GramState::new(2).unwrap();
        g.push(&vecf(&[0.0, 0.0]), 1.0).unwrap();
        assert_eq!(g.t(), 1);
        assert_eq!(g.s(), &Vector::zeros(2));
        assert_eq!(g.v(), &Matrix::zeros(2, 2));
        assert_eq!(g.ell_sum(), 0.0);
    }

    #[test]
    fn push_cross_direction_hand_values() {
        // V=I, S=e1 then push (e2, -1): S=(1,-1), V=diag(1,2), R = 1 + 1/2.
        let mut g = GramState::new(2).unwrap();
        g.push(&vecf(&[1.0, 0.0]), 1.0).unwrap();
        g.push(&vecf(&[0.0, 1.0]), 0.0).unwrap();
        g.push(&vecf(&[0.0, 1.0]), -1.0).unwrap();
        assert_eq!(g.s(), &vecf(&[1.0, -1.0]));
        let vexp = Matrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 2.0]);
        assert!((g.v() - vexp).amax() < 1e-12);
        assert!((g.selfnorm() - 1.5).abs() < 1e-10);
        let p = pinv(g.v(), g.tol()).unwrap();
        assert!((quad(&p, g.s()) - 1.5).abs() < 1e-10);
    }

    #[test]
    fn selfnorm_empty_and_single_step() {
        let g = GramState::new(3).unwrap();
        assert_eq!(g.selfnorm(), 0.0);
        let mut g = GramState::new(3).unwrap();
        g.push(&vecf(&[0.2, -0.7, 1.3]), -1.0).unwrap();
        assert!((g.selfnorm() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn selfnorm_identity_gram() {
        let mut g = GramState::new(2).unwrap();
        g.push(&vecf(&[1.0, 0.0]), 1.0).unwrap();
        g.push(&vecf(&[0.0, 1.0]), 1.0).unwrap();
        assert!((g.selfnorm() - 2.0).abs() < 1e-12);
    }

    #[test]
    fn leverage_examples() {
        let g = GramState::new(2).unwrap();
        assert!((g.leverage(&vecf(&[0.5, -0.5])).unwrap() - 1.0).abs() < 1e-12);
        assert_eq!(g.leverage(&vecf(&[0.0, 0.0])).unwrap(), 0.0);
        let mut g = GramState::new(1).unwrap();
        g.push(&vecf(&[1.0]), 0.0).unwrap();
        assert!((g.leverage(&vecf(&[1.0])).unwrap() - 0.5).abs() < 1e-12);
    }

    #[test]
    fn sm_update_examples() {
        let i2 = Matrix::identity(2, 2);
        let r = sm_inverse_update(&i2, &vecf(&[0.0, 0.0])).unwrap();
        assert!((r - &i2).amax() < 1e-15);
        let i1 = Matrix::identity(1, 1);
        let r = sm_inverse_update(&i1, &vecf(&[1.0])).unwrap();
        assert!((r[(0, 0)] - 0.5).abs() < 1e-15);
        let neg = Matrix::from_row_slice(1, 1, &[-1.0]);
        assert!(matches!(
            sm_inverse_update(&neg, &vecf(&[1.0])),
            Err(GramError::NotPositiveDefinite)
        ));
    }

    #[test]
    fn rescale_preserves_ratio_and_leverage() {
        let mut g = GramState::new(2).unwrap();
        g.push(&vecf(&[1.0, 0.0]), 1.0).unwrap();
        g.push(&vecf(&[0.0, 1.0]), 0.0).unwrap();
        let r0 = g.selfnorm();
        let lev0 = g.leverage(&vecf(&[1.0, 1.0])).unwrap();
        let mut h = g.clone();
        h.rescale(2.0).unwrap();
        assert!((h.selfnorm() - r0).abs() < 1e-10);
        assert_eq!(h.s(), &vecf(&[2.0, 0.0]));
        assert!((h.v() - g.v() * 4.0).amax() < 1e-12);
        let lev1 = h.leverage(&vecf(&[2.0, 2.0])).unwrap();
        assert!((lev0 - lev1).abs() < 1e-10);
        let mut id = g.clone();
        id.rescale(1.0).unwrap();
        assert!((id.selfnorm() - r0).abs() < 1e-15);
        assert!(matches!(g.rescale(0.0), Err(GramError::BadScale(_))));
        assert!(matches!(g.rescale(f64::NAN), Err(GramError::BadScale(_))));
    }

    #[test]
    fn push_rejects_nan() {
        let mut g = GramState::new(1).unwrap();
        assert!(matches!(
            g.push(&vecf(&[f64::NAN]), 1.0),
            Err(GramError::NonFinite)
        ));
        assert!(matches!(
            g.push(&vecf(&[1.0]), f64::NAN),
            Err(GramError::NonFinite)
        ));
    }
}
