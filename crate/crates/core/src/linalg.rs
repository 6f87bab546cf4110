//! Small dense helpers shared by the estimators.
//!
//! Every solve goes through a Cholesky factor of the Jacobi-rescaled matrix.
//! The squared ratio of the smallest to the largest pivot serves as the
//! reciprocal condition estimate; anything below [`RCOND_TOL`] is treated as
//! singular instead of being pseudo-inverted.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};

use crate::error::{Error, Result};

/// Relative tolerance on the reciprocal condition estimate.
pub const RCOND_TOL: f64 = 1e-10;

#[derive(Clone)]
pub(crate) struct Spd {
    chol: Cholesky<f64, Dyn>,
    scale: DVector<f64>,
}

impl Spd {
    /// Factor `a`, returning the reciprocal condition estimate on failure.
    pub fn new(a: &DMatrix<f64>) -> std::result::Result<Self, f64> {
        let n = a.nrows();
        debug_assert_eq!(n, a.ncols());
        let mut scale = DVector::zeros(n);
        for i in 0..n {
            let d = a[(i, i)];
            if !(d > 0.0 && d.is_finite()) {
                return Err(0.0);
            }
            scale[i] = 1.0 / d.sqrt();
        }
        let mut s = a.clone();
        for j in 0..n {
            for i in 0..n {
                s[(i, j)] *= scale[i] * scale[j];
            }
        }
        let chol = Cholesky::new(s).ok_or(0.0)?;
        let l = chol.l_dirty();
        let (mut lo, mut hi) = (f64::INFINITY, 0.0f64);
        for i in 0..n {
            lo = lo.min(l[(i, i)]);
            hi = hi.max(l[(i, i)]);
        }
        let rcond = if n == 0 { 1.0 } else { (lo / hi).powi(2) };
        if !(rcond >= RCOND_TOL) {
            return Err(if rcond.is_finite() { rcond } else { 0.0 });
        }
        Ok(Spd { chol, scale })
    }

    pub fn dim(&self) -> usize {
        self.scale.len()
    }

    pub fn solve(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        let mut x = b.clone();
        for (i, mut r) in x.row_iter_mut().enumerate() {
            r *= self.scale[i];
        }
        self.chol.solve_mut(&mut x);
        for (i, mut r) in x.row_iter_mut().enumerate() {
            r *= self.scale[i];
        }
        x
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        let mut x = b.component_mul(&self.scale);
        self.chol.solve_mut(&mut x);
        x.component_mul_assign(&self.scale);
        x
    }

    pub fn inverse(&self) -> DMatrix<f64> {
        self.solve(&DMatrix::identity(self.dim(), self.dim()))
    }

    /// `b' A⁻¹ b`.
    pub fn quad(&self, b: &DVector<f64>) -> f64 {
        b.dot(&self.solve_vec(b))
    }
}

pub(crate) fn factor_design(a: &DMatrix<f64>, context: &str) -> Result<Spd> {
    Spd::new(a).map_err(|rcond| Error::SingularDesign { context: context.to_string(), rcond })
}

pub(crate) fn factor_weight(a: &DMatrix<f64>, context: &str) -> Result<Spd> {
    Spd::new(a).map_err(|rcond| Error::SingularWeight { context: context.to_string(), rcond })
}

/// Factor a variance matrix, adding the ridge `1e-10 · trace / p` once if the
/// plain factorization fails. The flag reports whether the ridge was used.
pub(crate) fn factor_variance(v: &DMatrix<f64>, context: &str) -> Result<(Spd, bool)> {
    if let Ok(f) = Spd::new(v) {
        return Ok((f, false));
    }
    let p = v.nrows().max(1) as f64;
    let ridge = 1e-10 * v.trace() / p;
    let mut r = v.clone();
    for i in 0..v.nrows() {
        r[(i, i)] += ridge;
    }
    Spd::new(&r).map(|f| (f, true)).map_err(|rcond| Error::SingularDesign { context: context.to_string(), rcond })
}

pub(crate) fn symmetrize(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for j in 0..n {
        for i in (j + 1)..n {
            let a = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = a;
            m[(j, i)] = a;
        }
    }
}

/// Add `w · a aᵀ` into the symmetric accumulator stored column-major in `acc`.
#[inline]
pub(crate) fn add_outer(acc: &mut [f64], a: &[f64], w: f64) {
    let n = a.len();
    for j in 0..n {
        let wj = w * a[j];
        let col = &mut acc[j * n..(j + 1) * n];
        for i in 0..n {
            col[i] += wj * a[i];
        }
    }
}
