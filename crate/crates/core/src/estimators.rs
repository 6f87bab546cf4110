//! OLS, 2SLS and GMM fits, full-sample and split at a threshold, plus the
//! threshold first stage.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::data::{mat, Dataset, RegimePartition, SkippedCandidate, SortedCuts, ThresholdGrid};
use crate::error::{Error, Result};
use crate::linalg::{factor_design, factor_weight, Spd};

/// Which first-stage model produces `x̂`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum FirstStageMode {
    Linear,
    Threshold,
}

impl FirstStageMode {
    pub fn label(self) -> &'static str {
        match self {
            FirstStageMode::Linear => "lfs",
            FirstStageMode::Threshold => "tfs",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum FirstStage {
    Linear {
        pi: DMatrix<f64>,
    },
    Threshold {
        pi1: DMatrix<f64>,
        pi2: DMatrix<f64>,
        rho: f64,
        trace_ssr: f64,
        grid: ThresholdGrid,
        skipped: Vec<SkippedCandidate>,
    },
}

/// Fitted first stage. `pi*` are `qz × p1`; `xhat` is `T × p1`.
#[derive(Debug, Clone, PartialEq)]
pub struct FirstStageSpec {
    pub model: FirstStage,
    pub xhat: DMatrix<f64>,
}

impl FirstStageSpec {
    pub fn mode(&self) -> FirstStageMode {
        match self.model {
            FirstStage::Linear { .. } => FirstStageMode::Linear,
            FirstStage::Threshold { .. } => FirstStageMode::Threshold,
        }
    }

    pub fn rho(&self) -> Option<f64> {
        match self.model {
            FirstStage::Threshold { rho, .. } => Some(rho),
            FirstStage::Linear { .. } => None,
        }
    }

    pub fn uhat(&self, ds: &Dataset) -> DMatrix<f64> {
        ds.x() - &self.xhat
    }

    /// Predicted regressors `ŵ_t = (x̂_t', z1_t')'`.
    pub fn what(&self, ds: &Dataset) -> DMatrix<f64> {
        let mut w = ds.w().clone();
        w.columns_mut(0, ds.p1()).copy_from(&self.xhat);
        w
    }

    /// `A = [Π'; S]` (`p × qz`) for the ρ-regime on the given side.
    /// A linear first stage returns the same matrix for both sides.
    pub fn a_matrix(&self, ds: &Dataset, high: bool) -> DMatrix<f64> {
        let pi = match &self.model {
            FirstStage::Linear { pi } => pi,
            FirstStage::Threshold { pi1, pi2, .. } => {
                if high {
                    pi2
                } else {
                    pi1
                }
            }
        };
        a_from_pi(pi, ds.p2())
    }
}

pub(crate) fn a_from_pi(pi: &DMatrix<f64>, p2: usize) -> DMatrix<f64> {
    let (qz, p1) = pi.shape();
    let mut a = DMatrix::zeros(p1 + p2, qz);
    a.rows_mut(0, p1).copy_from(&pi.transpose());
    for k in 0..p2 {
        a[(p1 + k, k)] = 1.0;
    }
    a
}

/// Split-sample coefficients and the residuals implied at this `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitFit {
    pub theta_low: DVector<f64>,
    pub theta_high: DVector<f64>,
    pub gamma: f64,
    pub residuals: DVector<f64>,
}

/// Full-sample coefficients.
///
/// For 2SLS, `residuals` uses the predicted regressors `ŵ` while
/// `structural_residuals` uses the observed `w`. GMM fills both with `y − wθ`.
#[derive(Debug, Clone, PartialEq)]
pub struct FullFit {
    pub theta: DVector<f64>,
    pub residuals: DVector<f64>,
    pub structural_residuals: DVector<f64>,
}

/// `(Z'Z)⁻¹ Z'X`.
pub fn ols_multi(z: &DMatrix<f64>, x: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if z.nrows() != x.nrows() {
        return Err(Error::InvalidInput("Z and X differ in length".into()));
    }
    let f = factor_design(&z.tr_mul(z), "Z'Z")?;
    Ok(f.solve(&z.tr_mul(x)))
}

pub fn fit_first_stage_linear(ds: &Dataset) -> Result<FirstStageSpec> {
    let pi = ols_multi(ds.z(), ds.x())?;
    let xhat = ds.z() * &pi;
    Ok(FirstStageSpec { model: FirstStage::Linear { pi }, xhat })
}

/// Threshold first stage. `ρ̂` minimizes the trace SSR over `grid`; the
/// smallest candidate wins ties.
pub fn fit_first_stage_threshold(ds: &Dataset, grid: &ThresholdGrid) -> Result<FirstStageSpec> {
    FirstStageSweep::new(ds.z(), ds.q(), grid, ds.default_n_min()).fit(ds.x())
}

/// Fit the first stage of the given kind; `fs_grid` is only used for a
/// threshold first stage.
pub fn fit_first_stage(ds: &Dataset, mode: FirstStageMode, fs_grid: &ThresholdGrid) -> Result<FirstStageSpec> {
    match mode {
        FirstStageMode::Linear => fit_first_stage_linear(ds),
        FirstStageMode::Threshold => fit_first_stage_threshold(ds, fs_grid),
    }
}

/// Per-candidate machinery for threshold first stages at fixed `(z, q)`.
///
/// The instrument moments are computed once, so bootstrap replicates that
/// only change `x` reuse them.
#[derive(Clone)]
pub(crate) struct FirstStageSweep<'a> {
    z: &'a DMatrix<f64>,
    q: &'a DVector<f64>,
    pub grid: ThresholdGrid,
    pub cuts: SortedCuts,
    /// Raw `Σ_{q ≤ ρ} z z'` at each candidate.
    pub m_low: Vec<DMatrix<f64>>,
    pub m_tot: DMatrix<f64>,
    pub m_tot_f: Option<Spd>,
    /// Factorizations of both regime moments, or the reason the candidate is skipped.
    pub factors: Vec<std::result::Result<(Spd, Spd), String>>,
}

/// Sweep output for one `x`.
pub(crate) struct FirstStageScan {
    pub pi: DMatrix<f64>,
    pub ssr0: f64,
    /// Reduction of the trace SSR relative to the linear fit, per candidate.
    pub reduction: Vec<Option<f64>>,
    /// `(Π̂₁, Π̂₂)` per candidate.
    pub slopes: Vec<Option<(DMatrix<f64>, DMatrix<f64>)>>,
}

impl<'a> FirstStageSweep<'a> {
    pub fn new(z: &'a DMatrix<f64>, q: &'a DVector<f64>, grid: &ThresholdGrid, n_min: usize) -> Self {
        let qz = z.ncols();
        let cuts = SortedCuts::new(q.as_slice(), grid.values());
        let mut row = vec![0.0; qz];
        let (snaps, tot) = cuts.prefix(qz * qz, |t, acc| {
            for k in 0..qz {
                row[k] = z[(t, k)];
            }
            crate::linalg::add_outer(acc, &row, 1.0);
        });
        let m_tot = mat(qz, qz, &tot);
        let m_low: Vec<DMatrix<f64>> = snaps.iter().map(|s| mat(qz, qz, s)).collect();
        let t = q.len();
        let factors = grid
            .values()
            .iter()
            .enumerate()
            .map(|(g, &gamma)| {
                let n_low = cuts.counts[g];
                let n_high = t - n_low;
                if n_low < n_min || n_high < n_min {
                    return Err(Error::RegimeTooSmall { gamma, n_low, n_high, n_min }.to_string());
                }
                let lo = factor_design(&m_low[g], "low-regime Z'Z").map_err(|e| e.to_string())?;
                let hi = factor_design(&(&m_tot - &m_low[g]), "high-regime Z'Z").map_err(|e| e.to_string())?;
                Ok((lo, hi))
            })
            .collect();
        let m_tot_f = Spd::new(&m_tot).ok();
        FirstStageSweep { z, q, grid: grid.clone(), cuts, m_low, m_tot, m_tot_f, factors }
    }

    pub fn scan(&self, x: &DMatrix<f64>) -> Result<FirstStageScan> {
        let (qz, p1) = (self.z.ncols(), x.ncols());
        let z = self.z;
        let (snaps, tot) = self.cuts.prefix(qz * p1, |t, acc| {
            for j in 0..p1 {
                let xj = x[(t, j)];
                for k in 0..qz {
                    acc[j * qz + k] += z[(t, k)] * xj;
                }
            }
        });
        let zx_tot = mat(qz, p1, &tot);
        let mf = self.m_tot_f.as_ref().ok_or_else(|| Error::SingularDesign { context: "Z'Z".into(), rcond: 0.0 })?;
        let pi = mf.solve(&zx_tot);
        let resid = x - z * &pi;
        let ssr0 = resid.norm_squared();
        let mut reduction = Vec::with_capacity(snaps.len());
        let mut slopes = Vec::with_capacity(snaps.len());
        for (g, s) in snaps.iter().enumerate() {
            match &self.factors[g] {
                Err(_) => {
                    reduction.push(None);
                    slopes.push(None);
                }
                Ok((lo, hi)) => {
                    let zx1 = mat(qz, p1, s);
                    let zx2 = &zx_tot - &zx1;
                    let pi1 = lo.solve(&zx1);
                    let pi2 = hi.solve(&zx2);
                    let d1 = &pi1 - &pi;
                    let d2 = &pi2 - &pi;
                    let m2 = &self.m_tot - &self.m_low[g];
                    let r = (d1.transpose() * &self.m_low[g] * &d1).trace() + (d2.transpose() * &m2 * &d2).trace();
                    reduction.push(Some(r.max(0.0)));
                    slopes.push(Some((pi1, pi2)));
                }
            }
        }
        Ok(FirstStageScan { pi, ssr0, reduction, slopes })
    }

    pub fn skipped(&self) -> Vec<SkippedCandidate> {
        self.factors
            .iter()
            .zip(self.grid.values())
            .filter_map(|(f, &gamma)| f.as_ref().err().map(|r| SkippedCandidate { gamma, reason: r.clone() }))
            .collect()
    }

    /// Estimate `ρ̂`, then refit both regimes at `ρ̂` directly.
    pub fn fit(&self, x: &DMatrix<f64>) -> Result<FirstStageSpec> {
        let scan = self.scan(x)?;
        let best = argmax_first(&scan.reduction).ok_or_else(|| Error::AllCandidatesFailed {
            candidates: self.grid.len(),
            first: self.skipped().first().map(|s| s.reason.clone()).unwrap_or_default(),
        })?;
        let rho = self.grid.values()[best];
        let low: Vec<usize> = (0..self.q.len()).filter(|&t| self.q[t] <= rho).collect();
        let high: Vec<usize> = (0..self.q.len()).filter(|&t| self.q[t] > rho).collect();
        let fit_rows = |rows: &[usize]| ols_multi(&self.z.select_rows(rows.iter()), &x.select_rows(rows.iter()));
        let pi1 = fit_rows(&low)?;
        let pi2 = fit_rows(&high)?;
        let mut xhat = DMatrix::zeros(x.nrows(), x.ncols());
        for t in 0..x.nrows() {
            let pi = if self.q[t] <= rho { &pi1 } else { &pi2 };
            let row = self.z.row(t) * pi;
            xhat.row_mut(t).copy_from(&row);
        }
        let trace_ssr = (x - &xhat).norm_squared();
        Ok(FirstStageSpec {
            model: FirstStage::Threshold { pi1, pi2, rho, trace_ssr, grid: self.grid.clone(), skipped: self.skipped() },
            xhat,
        })
    }
}

/// Index of the largest value; the first one wins ties.
pub(crate) fn argmax_first(values: &[Option<f64>]) -> Option<usize> {
    let mut best: Option<(usize, f64)> = None;
    for (i, v) in values.iter().enumerate() {
        if let Some(v) = *v {
            if best.is_none_or(|(_, b)| v > b) {
                best = Some((i, v));
            }
        }
    }
    best.map(|(i, _)| i)
}

fn regime_rows(part: &RegimePartition, low: bool) -> Vec<usize> {
    part.mask_low.iter().enumerate().filter(|(_, &m)| m == low).map(|(t, _)| t).collect()
}

fn check_partition(ds: &Dataset, part: &RegimePartition) -> Result<()> {
    if part.mask_low.len() != ds.t() {
        return Err(Error::InvalidInput("partition length differs from the sample".into()));
    }
    Ok(())
}

fn least_squares(w: &DMatrix<f64>, y: &DVector<f64>, context: &str) -> Result<DVector<f64>> {
    let f = factor_design(&w.tr_mul(w), context)?;
    Ok(f.solve_vec(&w.tr_mul(y)))
}

/// Full-sample 2SLS with the predicted regressors of `fs`.
pub fn tsls_full(ds: &Dataset, fs: &FirstStageSpec) -> Result<FullFit> {
    let what = fs.what(ds);
    let theta = least_squares(&what, ds.y(), "full-sample W'W")?;
    let residuals = ds.y() - &what * &theta;
    let structural_residuals = ds.y() - ds.w() * &theta;
    Ok(FullFit { theta, residuals, structural_residuals })
}

/// Split-sample 2SLS; residuals use `ŵ`.
pub fn tsls_split(ds: &Dataset, fs: &FirstStageSpec, part: &RegimePartition) -> Result<SplitFit> {
    check_partition(ds, part)?;
    let what = fs.what(ds);
    let fit = |low: bool, context: &str| {
        let rows = regime_rows(part, low);
        least_squares(&what.select_rows(rows.iter()), &ds.y().select_rows(rows.iter()), context)
    };
    let theta_low = fit(true, "low-regime W'W")?;
    let theta_high = fit(false, "high-regime W'W")?;
    let residuals = split_residuals(&what, ds.y(), part, &theta_low, &theta_high);
    Ok(SplitFit { theta_low, theta_high, gamma: part.gamma, residuals })
}

fn split_residuals(
    w: &DMatrix<f64>,
    y: &DVector<f64>,
    part: &RegimePartition,
    lo: &DVector<f64>,
    hi: &DVector<f64>,
) -> DVector<f64> {
    DVector::from_iterator(
        y.len(),
        (0..y.len()).map(|t| {
            let th = if part.mask_low[t] { lo } else { hi };
            y[t] - w.row(t).dot(&th.transpose())
        }),
    )
}

/// `(N H⁻¹ N')⁻¹ N H⁻¹ zy` together with the factor of `N H⁻¹ N'`.
pub(crate) fn gmm_solve(n: &DMatrix<f64>, h: &DMatrix<f64>, zy: &DVector<f64>) -> Result<(DVector<f64>, Spd)> {
    let hf = factor_weight(h, "GMM weight")?;
    let g = hf.solve(&n.transpose());
    let a = n * &g;
    let af = factor_design(&a, "N H⁻¹ N'")?;
    let theta = af.solve_vec(&(g.tr_mul(zy)));
    Ok((theta, af))
}

/// `T⁻¹ Σ_{regime} w z'`, `T⁻¹ Σ_{regime} z z'` and `T⁻¹ Σ_{regime} z y`.
pub(crate) fn regime_moments(
    ds: &Dataset,
    y: &DVector<f64>,
    rows: &[usize],
) -> (DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let tf = ds.t() as f64;
    let w = ds.w().select_rows(rows.iter());
    let z = ds.z().select_rows(rows.iter());
    let yy = y.select_rows(rows.iter());
    (w.tr_mul(&z) / tf, z.tr_mul(&z) / tf, z.tr_mul(&yy) / tf)
}

/// One GMM step per regime with the given weight matrices `[low, high]`.
/// Residuals use the observed regressors.
pub fn gmm_step(ds: &Dataset, part: &RegimePartition, weights: [&DMatrix<f64>; 2]) -> Result<SplitFit> {
    check_partition(ds, part)?;
    let lo_rows = regime_rows(part, true);
    let hi_rows = regime_rows(part, false);
    let (n1, _, zy1) = regime_moments(ds, ds.y(), &lo_rows);
    let (n2, _, zy2) = regime_moments(ds, ds.y(), &hi_rows);
    let (theta_low, _) = gmm_solve(&n1, weights[0], &zy1)?;
    let (theta_high, _) = gmm_solve(&n2, weights[1], &zy2)?;
    let residuals = split_residuals(ds.w(), ds.y(), part, &theta_low, &theta_high);
    Ok(SplitFit { theta_low, theta_high, gamma: part.gamma, residuals })
}

/// First GMM step per regime, weighting by `M̂_{iγ}`.
pub fn gmm_first_step(ds: &Dataset, part: &RegimePartition) -> Result<SplitFit> {
    let (m1, m2) = regime_m(ds, part);
    gmm_step(ds, part, [&m1, &m2])
}

pub(crate) fn regime_m(ds: &Dataset, part: &RegimePartition) -> (DMatrix<f64>, DMatrix<f64>) {
    let tf = ds.t() as f64;
    let z1 = ds.z().select_rows(regime_rows(part, true).iter());
    let z2 = ds.z().select_rows(regime_rows(part, false).iter());
    (z1.tr_mul(&z1) / tf, z2.tr_mul(&z2) / tf)
}

/// Full-sample GMM with weight matrix `weight`.
pub fn gmm_full(ds: &Dataset, weight: &DMatrix<f64>) -> Result<FullFit> {
    let rows: Vec<usize> = (0..ds.t()).collect();
    let (n, _, zy) = regime_moments(ds, ds.y(), &rows);
    let (theta, _) = gmm_solve(&n, weight, &zy)?;
    let residuals = ds.y() - ds.w() * &theta;
    Ok(FullFit { theta, structural_residuals: residuals.clone(), residuals })
}

/// Full-sample first GMM step (weight `M̂`), which equals 2SLS with a linear
/// first stage.
pub fn gmm_full_first_step(ds: &Dataset) -> Result<FullFit> {
    let m = ds.z().tr_mul(ds.z()) / ds.t() as f64;
    gmm_full(ds, &m)
}
