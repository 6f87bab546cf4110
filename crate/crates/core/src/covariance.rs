//! Weight and variance matrices for the GMM and 2SLS Wald statistics.
//!
//! The 2SLS variance blocks are sandwiches of operators of the form
//! `θ̃'⊗P − θ̌'⊗Q` around `Ĥ = T⁻¹ Σ v̂v̂' ⊗ zz'`, with `θ̃ = (1, θ̂_x')'` and
//! `θ̌ = (0, θ̂_x')'`. By the mixed-product rule
//! `(α'⊗P) Ĥ (β⊗Q') = P [T⁻¹ Σ (α'v̂)(β'v̂) zz'] Q'`, so only three `qz × qz`
//! sums per region are needed: weights `ẽ²`, `ẽũ` and `ũ²` with
//! `ẽ = ε̂ + û'θ̂_x` and `ũ = û'θ̂_x`.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{Dataset, RegimePartition};
use crate::error::{Error, Result};
use crate::estimators::{FirstStage, FirstStageSpec};
use crate::linalg::{add_outer, factor_design, factor_weight, symmetrize, Spd};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum VarianceMode {
    /// Heteroskedasticity-robust sums of squared residuals.
    Robust,
    /// `σ̂² M̂` in place of `Ĥ_ε` and `Σ̂_v ⊗ M̂` in place of `Ĥ`, with `σ̂²`
    /// and `Σ̂_v` the sample second moments of the supplied residuals.
    Homoskedastic,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ResidualSource {
    /// First-step residuals recomputed at every γ.
    PerGamma,
    /// Full-sample first-step residuals under the null.
    FullSampleNull,
}

/// Regime moment matrices, all scaled by `T⁻¹`.
///
/// `h_full_*` are the explicit `qz(p1+1)`-square Kronecker sums and are empty
/// when no first-stage residuals are supplied.
#[derive(Debug, Clone, PartialEq)]
pub struct MomentBlocks {
    pub m_low: DMatrix<f64>,
    pub m_high: DMatrix<f64>,
    pub n_low: DMatrix<f64>,
    pub n_high: DMatrix<f64>,
    pub h_eps_low: DMatrix<f64>,
    pub h_eps_high: DMatrix<f64>,
    pub h_full_low: DMatrix<f64>,
    pub h_full_high: DMatrix<f64>,
}

impl MomentBlocks {
    /// `eps` weights `Ĥ_ε`; with `uhat` the blocks of `v̂ = (ε̂, û')'` are built too.
    pub fn new(
        ds: &Dataset,
        part: &RegimePartition,
        eps: &DVector<f64>,
        uhat: Option<&DMatrix<f64>>,
        mode: VarianceMode,
    ) -> Result<Self> {
        let (t, qz, p) = (ds.t(), ds.qz(), ds.p());
        if eps.len() != t || part.mask_low.len() != t {
            return Err(Error::InvalidInput("residual or partition length differs from the sample".into()));
        }
        let tf = t as f64;
        let nv = uhat.map_or(0, |u| u.ncols() + 1);
        let nk = nv * qz;
        let mut acc = [
            (vec![0.0; qz * qz], vec![0.0; p * qz], vec![0.0; qz * qz], vec![0.0; nk * nk]),
            (vec![0.0; qz * qz], vec![0.0; p * qz], vec![0.0; qz * qz], vec![0.0; nk * nk]),
        ];
        let mut zr = vec![0.0; qz];
        let mut kr = vec![0.0; nk];
        for s in 0..t {
            for k in 0..qz {
                zr[k] = ds.z()[(s, k)];
            }
            let a = &mut acc[usize::from(!part.mask_low[s])];
            add_outer(&mut a.0, &zr, 1.0);
            for k in 0..qz {
                for j in 0..p {
                    a.1[k * p + j] += ds.w()[(s, j)] * zr[k];
                }
            }
            add_outer(&mut a.2, &zr, eps[s] * eps[s]);
            if let Some(u) = uhat {
                for (i, vi) in std::iter::once(eps[s]).chain(u.row(s).iter().copied()).enumerate() {
                    for k in 0..qz {
                        kr[i * qz + k] = vi * zr[k];
                    }
                }
                add_outer(&mut a.3, &kr, 1.0);
            }
        }
        let m = |v: &[f64], r: usize, c: usize| DMatrix::from_column_slice(r, c, v) / tf;
        let [lo, hi] = &acc;
        let mut blocks = MomentBlocks {
            m_low: m(&lo.0, qz, qz),
            m_high: m(&hi.0, qz, qz),
            n_low: m(&lo.1, p, qz),
            n_high: m(&hi.1, p, qz),
            h_eps_low: m(&lo.2, qz, qz),
            h_eps_high: m(&hi.2, qz, qz),
            h_full_low: m(&lo.3, nk, nk),
            h_full_high: m(&hi.3, nk, nk),
        };
        if mode == VarianceMode::Homoskedastic {
            let sigma2 = eps.norm_squared() / tf;
            blocks.h_eps_low = &blocks.m_low * sigma2;
            blocks.h_eps_high = &blocks.m_high * sigma2;
            if let Some(u) = uhat {
                let sv = v_moment(eps, u);
                blocks.h_full_low = sv.kronecker(&blocks.m_low);
                blocks.h_full_high = sv.kronecker(&blocks.m_high);
            }
        }
        Ok(blocks)
    }
}

/// `T⁻¹ Σ v̂v̂'` for `v̂ = (ε̂, û')'`.
pub(crate) fn v_moment(eps: &DVector<f64>, uhat: &DMatrix<f64>) -> DMatrix<f64> {
    let t = eps.len();
    let mut v = DMatrix::zeros(t, uhat.ncols() + 1);
    v.column_mut(0).copy_from(eps);
    v.columns_mut(1, uhat.ncols()).copy_from(uhat);
    v.tr_mul(&v) / t as f64
}

/// Per-regime `T⁻¹ Σ ε̂² zz'`.
pub fn robust_h_eps(
    ds: &Dataset,
    part: &RegimePartition,
    residuals: &DVector<f64>,
) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let b = MomentBlocks::new(ds, part, residuals, None, VarianceMode::Robust)?;
    Ok((b.h_eps_low, b.h_eps_high))
}

/// `Σᵢ (N̂ᵢ Ĥ_{ε,i}⁻¹ N̂ᵢ')⁻¹`.
pub fn gmm_wald_variance(blocks: &MomentBlocks) -> Result<DMatrix<f64>> {
    let part = |n: &DMatrix<f64>, h: &DMatrix<f64>| -> Result<DMatrix<f64>> {
        let hf = factor_weight(h, "H_eps")?;
        let a = n * hf.solve(&n.transpose());
        Ok(factor_design(&a, "N H⁻¹ N'")?.inverse())
    };
    let mut v = part(&blocks.n_low, &blocks.h_eps_low)? + part(&blocks.n_high, &blocks.h_eps_high)?;
    symmetrize(&mut v);
    Ok(v)
}

/// The three contracted sums `T⁻¹ Σ w zz'` with weights `ẽ²`, `ẽũ`, `ũ²`.
#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Contracted {
    pub e: DMatrix<f64>,
    pub k: DMatrix<f64>,
    pub u: DMatrix<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub(crate) enum Coef {
    Tilde,
    Check,
}

impl Contracted {
    /// Homoskedastic analog: each sum is a second moment of `(ẽ, ũ)` times `M̂`.
    pub fn homoskedastic(m: &DMatrix<f64>, s_ee: f64, s_eu: f64, s_uu: f64) -> Self {
        Contracted { e: m * s_ee, k: m * s_eu, u: m * s_uu }
    }

    pub fn from_flat(qz: usize, flat: &[f64], scale: f64) -> Self {
        let n = qz * qz;
        Contracted {
            e: DMatrix::from_column_slice(qz, qz, &flat[..n]) * scale,
            k: DMatrix::from_column_slice(qz, qz, &flat[n..2 * n]) * scale,
            u: DMatrix::from_column_slice(qz, qz, &flat[2 * n..3 * n]) * scale,
        }
    }

    pub fn sub(&self, o: &Contracted) -> Contracted {
        Contracted { e: &self.e - &o.e, k: &self.k - &o.k, u: &self.u - &o.u }
    }

    fn get(&self, a: Coef, b: Coef) -> &DMatrix<f64> {
        match (a, b) {
            (Coef::Tilde, Coef::Tilde) => &self.e,
            (Coef::Check, Coef::Check) => &self.u,
            _ => &self.k,
        }
    }
}

/// Accumulate the raw contracted sums for one observation into a flat buffer
/// of length `3·qz²`.
#[inline]
pub(crate) fn add_contracted(acc: &mut [f64], z: &[f64], et: f64, ut: f64) {
    let n = z.len() * z.len();
    add_outer(&mut acc[..n], z, et * et);
    add_outer(&mut acc[n..2 * n], z, et * ut);
    add_outer(&mut acc[2 * n..], z, ut * ut);
}

/// One term `sign · (coef' ⊗ P)`; `m = None` stands for the identity.
#[derive(Clone, Copy)]
pub(crate) struct Term<'a> {
    coef: Coef,
    m: Option<&'a DMatrix<f64>>,
    sign: f64,
}

fn term(coef: Coef, m: Option<&DMatrix<f64>>, sign: f64) -> Term<'_> {
    Term { coef, m, sign }
}

/// `L Ĥ R'` for operators given as sums of terms.
fn quad(l: &[Term], h: &Contracted, r: &[Term]) -> DMatrix<f64> {
    let n = h.e.nrows();
    let mut out = DMatrix::zeros(n, n);
    for a in l {
        for b in r {
            let s = h.get(a.coef, b.coef);
            let left = match a.m {
                Some(p) => p * s,
                None => s.clone(),
            };
            let full = match b.m {
                Some(q) => left * q.transpose(),
                None => left,
            };
            out += full * (a.sign * b.sign);
        }
    }
    out
}

/// The blocks of `V̂_ℬ`: `(V₁, V₁₂, V₂)`.
pub(crate) struct VbBlocks {
    pub v1: DMatrix<f64>,
    pub v12: DMatrix<f64>,
    pub v2: DMatrix<f64>,
}

fn sandwich(a: &DMatrix<f64>, inner: &DMatrix<f64>) -> DMatrix<f64> {
    a * inner * a.transpose()
}

/// Linear first stage. `r1 = M̂₁ M̂⁻¹`; `h1`, `h2` are the regime sums.
///
/// Each score `ℬᵢ = Â[Σᵢ zẽ − R̂ᵢ Σ zũ]` draws on both regimes through the
/// `R̂ᵢ` term, hence the cross-regime `F̄` pieces in every block.
pub(crate) fn lfs_blocks(a: &DMatrix<f64>, r1: &DMatrix<f64>, h1: &Contracted, h2: &Contracted) -> VbBlocks {
    let qz = r1.nrows();
    let r2 = DMatrix::identity(qz, qz) - r1;
    let d1 = [term(Coef::Tilde, None, 1.0), term(Coef::Check, Some(r1), -1.0)];
    let f1 = [term(Coef::Check, Some(r1), 1.0)];
    let d2 = [term(Coef::Tilde, None, 1.0), term(Coef::Check, Some(&r2), -1.0)];
    let f2 = [term(Coef::Check, Some(&r2), 1.0)];
    let i11 = quad(&d1, h1, &d1) + quad(&f1, h2, &f1);
    let i22 = quad(&d2, h2, &d2) + quad(&f2, h1, &f2);
    let i12 = -(quad(&d1, h1, &f2) + quad(&f1, h2, &d2));
    VbBlocks { v1: sandwich(a, &i11), v12: sandwich(a, &i12), v2: sandwich(a, &i22) }
}

/// Threshold first stage with break `ρ̂`.
///
/// `a1`, `a2` belong to the two ρ-regimes; `r` is `M̂_{1γ} M̂_{1ρ}⁻¹` when
/// `low_branch` (γ ≤ ρ̂) and `M̂_{2γ} M̂_{2ρ}⁻¹` otherwise. `h1g` sums over
/// `q ≤ γ`, `h1r` over `q ≤ ρ̂`, `htot` over the sample.
pub(crate) fn tfs_blocks(
    a1: &DMatrix<f64>,
    a2: &DMatrix<f64>,
    r: &DMatrix<f64>,
    low_branch: bool,
    h1g: &Contracted,
    h1r: &Contracted,
    htot: &Contracted,
) -> VbBlocks {
    let dd = [term(Coef::Tilde, None, 1.0), term(Coef::Check, None, -1.0)];
    let h2r = htot.sub(h1r);
    let vb = sandwich(a1, &quad(&dd, h1r, &dd)) + sandwich(a2, &quad(&dd, &h2r, &dd));
    let di = [term(Coef::Tilde, None, 1.0), term(Coef::Check, Some(r), -1.0)];
    let fi = [term(Coef::Check, Some(r), 1.0)];
    let (v1, v12) = if low_branch {
        let mid = h1r.sub(h1g);
        let v1 = sandwich(a1, &(quad(&di, h1g, &di) + quad(&fi, &mid, &fi)));
        let v12 = sandwich(a1, &(quad(&di, h1g, &dd) - quad(&fi, &mid, &dd))) - &v1;
        (v1, v12)
    } else {
        let delta = h1g.sub(h1r);
        let h2g = htot.sub(h1g);
        let dpf = [term(Coef::Tilde, None, 1.0), term(Coef::Check, None, -1.0), term(Coef::Check, Some(r), 1.0)];
        let dmd = [term(Coef::Check, None, -1.0), term(Coef::Check, Some(r), 1.0)];
        let v1 =
            sandwich(a1, &quad(&dd, h1r, &dd)) + sandwich(a2, &(quad(&dpf, &delta, &dpf) + quad(&dmd, &h2g, &dmd)));
        let v12 = sandwich(a2, &(quad(&dmd, &h2g, &di) - quad(&dpf, &delta, &fi)));
        (v1, v12)
    };
    let v2 = &vb - &v1 - &v12 - v12.transpose();
    VbBlocks { v1, v12, v2 }
}

/// `Ĉ_γ V̂_ℬ Ĉ_γ'` with `Ĉ_γ = [Ĉ₁⁻¹, −Ĉ₂⁻¹]`.
pub(crate) fn assemble(c1: &Spd, c2: &Spd, b: &VbBlocks) -> DMatrix<f64> {
    let c1i = c1.inverse();
    let c2i = c2.inverse();
    let x = &c1i * &b.v12 * &c2i;
    let mut v = &c1i * &b.v1 * &c1i - &x - x.transpose() + &c2i * &b.v2 * &c2i;
    symmetrize(&mut v);
    v
}

/// Per-observation inputs for the 2SLS variance at fixed data and first stage.
pub(crate) struct TslsResiduals {
    pub et: DVector<f64>,
    pub ut: DVector<f64>,
}

impl TslsResiduals {
    pub fn new(ds: &Dataset, xhat: &DMatrix<f64>, theta: &DVector<f64>) -> Self {
        let p1 = ds.p1();
        let eps = ds.y() - ds.w() * theta;
        let theta_x = theta.rows(0, p1);
        let uhat = ds.x() - xhat;
        let ut = &uhat * theta_x;
        let et = &eps + &ut;
        TslsResiduals { et, ut }
    }

    pub fn moments(&self) -> (f64, f64, f64) {
        let tf = self.et.len() as f64;
        (self.et.norm_squared() / tf, self.et.dot(&self.ut) / tf, self.ut.norm_squared() / tf)
    }
}

/// Contracted sums and `M̂` over the observations selected by `keep`.
fn region(
    ds: &Dataset,
    res: &TslsResiduals,
    mode: VarianceMode,
    keep: impl Fn(usize) -> bool,
) -> (Contracted, DMatrix<f64>) {
    let qz = ds.qz();
    let tf = ds.t() as f64;
    let mut acc = vec![0.0; 3 * qz * qz];
    let mut m = vec![0.0; qz * qz];
    let mut zr = vec![0.0; qz];
    for s in (0..ds.t()).filter(|&s| keep(s)) {
        for k in 0..qz {
            zr[k] = ds.z()[(s, k)];
        }
        add_contracted(&mut acc, &zr, res.et[s], res.ut[s]);
        add_outer(&mut m, &zr, 1.0);
    }
    let m = DMatrix::from_column_slice(qz, qz, &m) / tf;
    let h = match mode {
        VarianceMode::Robust => Contracted::from_flat(qz, &acc, 1.0 / tf),
        VarianceMode::Homoskedastic => {
            let (a, b, c) = res.moments();
            Contracted::homoskedastic(&m, a, b, c)
        }
    };
    (h, m)
}

fn regime_c(ds: &Dataset, fs: &FirstStageSpec, part: &RegimePartition) -> Result<(Spd, Spd)> {
    let what = fs.what(ds);
    let tf = ds.t() as f64;
    let rows = |low: bool| -> Vec<usize> { (0..ds.t()).filter(|&s| part.mask_low[s] == low).collect() };
    let c = |low: bool, ctx: &str| {
        let w = what.select_rows(rows(low).iter());
        factor_design(&(w.tr_mul(&w) / tf), ctx)
    };
    Ok((c(true, "low-regime Ĉ")?, c(false, "high-regime Ĉ")?))
}

fn check_part(ds: &Dataset, part: &RegimePartition, theta: &DVector<f64>) -> Result<()> {
    if part.mask_low.len() != ds.t() || theta.len() != ds.p() {
        return Err(Error::InvalidInput("partition or coefficient length mismatch".into()));
    }
    Ok(())
}

/// Variance of `√T(θ̂₁γ − θ̂₂γ)` under a linear first stage.
pub fn tsls_variance_lfs(
    ds: &Dataset,
    fs: &FirstStageSpec,
    part: &RegimePartition,
    theta_full: &DVector<f64>,
    mode: VarianceMode,
) -> Result<DMatrix<f64>> {
    check_part(ds, part, theta_full)?;
    if !matches!(fs.model, FirstStage::Linear { .. }) {
        return Err(Error::InvalidInput("linear first stage required".into()));
    }
    let res = TslsResiduals::new(ds, &fs.xhat, theta_full);
    let (h1, m1) = region(ds, &res, mode, |s| part.mask_low[s]);
    let (h2, _) = region(ds, &res, mode, |s| !part.mask_low[s]);
    let (_, m) = region(ds, &res, mode, |_| true);
    let mf = factor_design(&m, "Z'Z")?;
    let r1 = mf.solve(&m1).transpose();
    let a = fs.a_matrix(ds, false);
    let (c1, c2) = regime_c(ds, fs, part)?;
    Ok(assemble(&c1, &c2, &lfs_blocks(&a, &r1, &h1, &h2)))
}

/// Variance of `√T(θ̂₁γ − θ̂₂γ)` under a threshold first stage.
pub fn tsls_variance_tfs(
    ds: &Dataset,
    fs: &FirstStageSpec,
    part: &RegimePartition,
    theta_full: &DVector<f64>,
    mode: VarianceMode,
) -> Result<DMatrix<f64>> {
    check_part(ds, part, theta_full)?;
    let rho = fs.rho().ok_or_else(|| Error::InvalidInput("threshold first stage required".into()))?;
    let q = ds.q();
    let low_branch = part.gamma <= rho;
    let consistent = (0..ds.t()).all(|s| {
        let in_rho = q[s] <= rho;
        if low_branch {
            !part.mask_low[s] || in_rho
        } else {
            part.mask_low[s] || !in_rho
        }
    });
    if !consistent {
        return Err(Error::BranchMismatch { gamma: part.gamma, rho });
    }
    let res = TslsResiduals::new(ds, &fs.xhat, theta_full);
    let (h1g, m1g) = region(ds, &res, mode, |s| part.mask_low[s]);
    let (h1r, m1r) = region(ds, &res, mode, |s| q[s] <= rho);
    let (htot, mtot) = region(ds, &res, mode, |_| true);
    let r = if low_branch {
        factor_design(&m1r, "low ρ-regime Z'Z")?.solve(&m1g).transpose()
    } else {
        let m2r = &mtot - &m1r;
        let m2g = &mtot - &m1g;
        factor_design(&m2r, "high ρ-regime Z'Z")?.solve(&m2g).transpose()
    };
    let a1 = fs.a_matrix(ds, false);
    let a2 = fs.a_matrix(ds, true);
    let (c1, c2) = regime_c(ds, fs, part)?;
    let b = tfs_blocks(&a1, &a2, &r, low_branch, &h1g, &h1r, &htot);
    Ok(assemble(&c1, &c2, &b))
}
