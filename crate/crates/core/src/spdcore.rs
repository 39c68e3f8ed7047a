//! Symmetric positive definite matrix algebra.
//!
//! Matrix functions go through a cyclic Jacobi eigendecomposition. Geometry is
//! the affine-invariant one: `δ(A, B) = ‖log(A^{-1/2} B A^{-1/2})‖_F`, and the
//! geometric (Karcher) mean is its Fréchet mean.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Mat;
use crate::scalar::Real;

/// Jacobi sweeps before giving up.
const MAX_SWEEPS: usize = 100;

/// Relative eigenvalue floor under which a matrix counts as singular.
fn singular_floor<T: Real>() -> T {
    T::lit(1e-12).max(T::epsilon() * T::lit(10.0))
}

/// Relative symmetry tolerance accepted on construction.
fn symmetry_tol<T: Real>() -> T {
    T::lit(1e-10).max(T::epsilon() * T::lit(100.0))
}

/// A validated symmetric positive definite matrix.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct SpdMatrix<T: Real> {
    inner: Mat<T>,
}

impl<T: Real> SpdMatrix<T> {
    /// Validates symmetry and strict positivity of the spectrum.
    pub fn new(mut m: Mat<T>) -> Result<Self> {
        if !m.is_square() {
            return Err(Error::NotSpd(format!("{}x{} is not square", m.rows(), m.cols())));
        }
        if m.rows() == 0 {
            return Err(Error::NotSpd("empty matrix".into()));
        }
        if !m.is_finite() {
            return Err(Error::NotSpd("non-finite entries".into()));
        }
        let scale = m.max_abs().max(T::one());
        let asym = m.asymmetry();
        if asym > symmetry_tol::<T>() * scale {
            return Err(Error::NotSpd(format!("asymmetry {asym:e}")));
        }
        m.symmetrize();
        let eig = eig_symmetric(&m)?;
        let min = eig.min_value();
        if min <= T::zero() {
            return Err(Error::NotSpd(format!("eigenvalue {min:e} is not positive")));
        }
        Ok(SpdMatrix { inner: m })
    }

    /// Wraps a matrix known to be SPD by construction (e.g. a convex
    /// combination of SPD matrices). Only symmetrizes.
    pub(crate) fn from_trusted(mut m: Mat<T>) -> Self {
        m.symmetrize();
        SpdMatrix { inner: m }
    }

    /// Like [`SpdMatrix::new`], additionally rejecting matrices whose smallest
    /// eigenvalue is below `1e-12` of the largest.
    pub fn new_well_conditioned(mut m: Mat<T>) -> Result<Self> {
        if !m.is_square() || m.rows() == 0 || !m.is_finite() {
            return Self::new(m);
        }
        let scale = m.max_abs().max(T::one());
        if m.asymmetry() > symmetry_tol::<T>() * scale {
            return Self::new(m);
        }
        m.symmetrize();
        eig_symmetric(&m)?.check_conditioning()?;
        Ok(SpdMatrix { inner: m })
    }

    pub fn identity(n: usize) -> Self {
        SpdMatrix { inner: Mat::identity(n) }
    }

    pub fn from_diag(diag: &[T]) -> Result<Self> {
        Self::new(Mat::from_diag(diag))
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.inner.rows()
    }

    #[inline]
    pub fn as_mat(&self) -> &Mat<T> {
        &self.inner
    }

    pub fn into_mat(self) -> Mat<T> {
        self.inner
    }

    /// `W · self · Wᵀ` for an invertible `W`.
    pub fn congruence(&self, w: &Mat<T>) -> Result<Self> {
        let out = w.matmul(&self.inner)?.matmul(&w.transpose())?;
        Self::new(out)
    }

    pub fn cast<U: Real>(&self) -> SpdMatrix<U> {
        SpdMatrix::from_trusted(self.inner.cast())
    }
}

/// Eigendecomposition of a symmetric matrix: `A = V · diag(values) · Vᵀ`,
/// eigenvalues in descending order, eigenvectors as columns of `vectors`.
#[derive(Clone, Debug)]
pub struct SymEig<T: Real> {
    pub values: Vec<T>,
    pub vectors: Mat<T>,
}

impl<T: Real> SymEig<T> {
    pub fn max_value(&self) -> T {
        self.values.first().copied().unwrap_or_else(T::zero)
    }

    pub fn min_value(&self) -> T {
        self.values.last().copied().unwrap_or_else(T::zero)
    }

    /// `V · diag(f(λ)) · Vᵀ`.
    pub fn map(&self, f: impl Fn(T) -> T) -> Mat<T> {
        let n = self.values.len();
        let fl: Vec<T> = self.values.iter().map(|&l| f(l)).collect();
        let v = &self.vectors;
        let mut out = Mat::zeros(n, n);
        for i in 0..n {
            for j in i..n {
                let mut s = T::zero();
                for k in 0..n {
                    s += v[(i, k)] * fl[k] * v[(j, k)];
                }
                out[(i, j)] = s;
                out[(j, i)] = s;
            }
        }
        out
    }

    fn check_conditioning(&self) -> Result<()> {
        let max = self.max_value();
        let min = self.min_value();
        if !(min > singular_floor::<T>() * max) {
            return Err(Error::NearSingular {
                min_eig: min.as_f64(),
                max_eig: max.as_f64(),
            });
        }
        Ok(())
    }
}

/// Cyclic Jacobi eigendecomposition of a symmetric matrix.
pub fn eig_symmetric<T: Real>(m: &Mat<T>) -> Result<SymEig<T>> {
    if !m.is_square() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", m.rows(), m.cols()),
        });
    }
    let n = m.rows();
    let mut a = m.clone();
    a.symmetrize();
    let mut v = Mat::identity(n);
    let norm = a.frobenius_norm();
    let target = T::epsilon() * norm;

    let off_norm = |a: &Mat<T>| -> T {
        let mut s = T::zero();
        for i in 0..n {
            for j in 0..n {
                if i != j {
                    s += a[(i, j)] * a[(i, j)];
                }
            }
        }
        s.sqrt()
    };

    let mut sweeps = 0;
    let mut off = off_norm(&a);
    while off > target {
        if sweeps == MAX_SWEEPS {
            return Err(Error::NoConvergence {
                what: "jacobi eigensolver",
                iterations: sweeps,
                residual: off.as_f64(),
            });
        }
        sweeps += 1;
        for p in 0..n {
            for q in (p + 1)..n {
                let apq = a[(p, q)];
                if apq == T::zero() {
                    continue;
                }
                let app = a[(p, p)];
                let aqq = a[(q, q)];
                // Skip rotations that cannot change the diagonal at working precision.
                if apq.abs() <= T::epsilon() * T::lit(0.01) * (app.abs() + aqq.abs()) {
                    a[(p, q)] = T::zero();
                    a[(q, p)] = T::zero();
                    continue;
                }
                let theta = (aqq - app) / (T::lit(2.0) * apq);
                let t = theta.signum() / (theta.abs() + (theta * theta + T::one()).sqrt());
                let c = T::one() / (t * t + T::one()).sqrt();
                let s = t * c;
                for k in 0..n {
                    let akp = a[(k, p)];
                    let akq = a[(k, q)];
                    a[(k, p)] = c * akp - s * akq;
                    a[(k, q)] = s * akp + c * akq;
                }
                for k in 0..n {
                    let apk = a[(p, k)];
                    let aqk = a[(q, k)];
                    a[(p, k)] = c * apk - s * aqk;
                    a[(q, k)] = s * apk + c * aqk;
                }
                a[(p, q)] = T::zero();
                a[(q, p)] = T::zero();
                for k in 0..n {
                    let vkp = v[(k, p)];
                    let vkq = v[(k, q)];
                    v[(k, p)] = c * vkp - s * vkq;
                    v[(k, q)] = s * vkp + c * vkq;
                }
            }
        }
        off = off_norm(&a);
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| a[(j, j)].partial_cmp(&a[(i, i)]).unwrap_or(std::cmp::Ordering::Equal));
    let values = order.iter().map(|&i| a[(i, i)]).collect();
    let vectors = Mat::from_fn(n, n, |r, c| v[(r, order[c])]);
    Ok(SymEig { values, vectors })
}

/// Eigendecomposition of an SPD matrix.
pub fn sym_eig<T: Real>(a: &SpdMatrix<T>) -> Result<SymEig<T>> {
    eig_symmetric(a.as_mat())
}

/// `A^p` for real `p`.
pub fn powm<T: Real>(a: &SpdMatrix<T>, p: T) -> Result<SpdMatrix<T>> {
    let eig = sym_eig(a)?;
    eig.check_conditioning()?;
    Ok(SpdMatrix::from_trusted(eig.map(|l| l.powf(p))))
}

pub fn sqrtm<T: Real>(a: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    let eig = sym_eig(a)?;
    eig.check_conditioning()?;
    Ok(SpdMatrix::from_trusted(eig.map(|l| l.sqrt())))
}

/// `A^{-1/2}`, the whitening transform of `A`.
pub fn invsqrtm<T: Real>(a: &SpdMatrix<T>) -> Result<SpdMatrix<T>> {
    let eig = sym_eig(a)?;
    eig.check_conditioning()?;
    Ok(SpdMatrix::from_trusted(eig.map(|l| T::one() / l.sqrt())))
}

/// Principal matrix logarithm; maps SPD to symmetric.
pub fn logm<T: Real>(a: &SpdMatrix<T>) -> Result<Mat<T>> {
    let eig = sym_eig(a)?;
    eig.check_conditioning()?;
    Ok(eig.map(|l| l.ln()))
}

/// Matrix exponential of a symmetric matrix; the result is SPD.
pub fn expm<T: Real>(s: &Mat<T>) -> Result<SpdMatrix<T>> {
    if !s.is_square() {
        return Err(Error::DimensionMismatch {
            expected: "square matrix".into(),
            got: format!("{}x{}", s.rows(), s.cols()),
        });
    }
    let scale = s.max_abs().max(T::one());
    if s.asymmetry() > symmetry_tol::<T>() * scale {
        return Err(Error::invalid("expm requires a symmetric matrix"));
    }
    let eig = eig_symmetric(s)?;
    Ok(SpdMatrix::from_trusted(eig.map(|l| l.exp())))
}

/// Affine-invariant Riemannian distance.
pub fn affine_distance<T: Real>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<T> {
    check_same_dim(a, b)?;
    let w = invsqrtm(a)?;
    let inner = w.as_mat().mul(b.as_mat()).mul(w.as_mat());
    let eig = eig_symmetric(&inner)?;
    eig.check_conditioning()?;
    Ok(eig.values.iter().map(|&l| l.ln() * l.ln()).sum::<T>().sqrt())
}

fn check_same_dim<T: Real>(a: &SpdMatrix<T>, b: &SpdMatrix<T>) -> Result<()> {
    if a.dim() != b.dim() {
        return Err(Error::DimensionMismatch {
            expected: format!("{}x{}", a.dim(), a.dim()),
            got: format!("{}x{}", b.dim(), b.dim()),
        });
    }
    Ok(())
}

fn check_nonempty_same_dim<T: Real>(covs: &[SpdMatrix<T>]) -> Result<usize> {
    let first = covs
        .first()
        .ok_or_else(|| Error::invalid("mean of an empty set of matrices"))?;
    for c in &covs[1..] {
        check_same_dim(first, c)?;
    }
    Ok(first.dim())
}

/// Elementwise mean. SPD by convexity of the cone.
pub fn arithmetic_mean<T: Real>(covs: &[SpdMatrix<T>]) -> Result<SpdMatrix<T>> {
    let n = check_nonempty_same_dim(covs)?;
    let mut acc = Mat::zeros(n, n);
    for c in covs {
        for (a, &x) in acc.as_mut_slice().iter_mut().zip(c.as_mat().as_slice()) {
            *a += x;
        }
    }
    Ok(SpdMatrix::from_trusted(acc.scale(T::one() / T::from_usize_lossy(covs.len()))))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct KarcherOptions {
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for KarcherOptions {
    fn default() -> Self {
        KarcherOptions {
            tol: 1e-9,
            max_iter: 50,
        }
    }
}

/// Mean of `log(M^{-1/2} Σᵢ M^{-1/2})`: the Riemannian gradient direction of
/// the Karcher cost at `M` (up to sign and scale). Zero at the geometric mean.
pub fn karcher_gradient<T: Real>(m: &SpdMatrix<T>, covs: &[SpdMatrix<T>]) -> Result<Mat<T>> {
    let n = check_nonempty_same_dim(covs)?;
    check_same_dim(m, &covs[0])?;
    let w = invsqrtm(m)?;
    let mut acc = Mat::zeros(n, n);
    for c in covs {
        let centered = SpdMatrix::from_trusted(w.as_mat().mul(c.as_mat()).mul(w.as_mat()));
        let l = logm(&centered)?;
        for (a, &x) in acc.as_mut_slice().iter_mut().zip(l.as_slice()) {
            *a += x;
        }
    }
    Ok(acc.scale(T::one() / T::from_usize_lossy(covs.len())))
}

/// Geometric mean under the affine-invariant metric.
///
/// Fixed point `M ← M^{1/2} exp(G) M^{1/2}` with `G` the mean log of the
/// recentered inputs, started at the arithmetic mean. Returns once `‖G‖_F < tol`.
pub fn karcher_mean<T: Real>(covs: &[SpdMatrix<T>], opts: KarcherOptions) -> Result<SpdMatrix<T>> {
    check_nonempty_same_dim(covs)?;
    if !(opts.tol > 0.0) {
        return Err(Error::invalid("karcher tolerance must be positive"));
    }
    let tol = T::lit(opts.tol);
    let mut m = arithmetic_mean(covs)?;
    let mut residual = T::infinity();
    for _ in 0..=opts.max_iter {
        let g = karcher_gradient(&m, covs)?;
        residual = g.frobenius_norm();
        if residual < tol {
            return Ok(m);
        }
        let half = sqrtm(&m)?;
        let step = expm(&g)?;
        m = SpdMatrix::from_trusted(half.as_mat().mul(step.as_mat()).mul(half.as_mat()));
    }
    Err(Error::NoConvergence {
        what: "karcher mean",
        iterations: opts.max_iter,
        residual: residual.as_f64(),
    })
}
