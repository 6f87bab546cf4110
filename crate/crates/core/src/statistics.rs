//! Sup-statistic sequences over the threshold grid.
//!
//! Regime sums come from prefix sums over the observations sorted by `q`, so
//! a full sequence costs one pass over the data plus small dense work per
//! candidate.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::covariance::{
    add_contracted, assemble, lfs_blocks, tfs_blocks, Contracted, ResidualSource, TslsResiduals, VarianceMode,
};
use crate::data::{mat, Dataset, SkippedCandidate, SortedCuts, ThresholdGrid};
use crate::error::{Error, Result};
use crate::estimators::{gmm_solve, FirstStage, FirstStageMode, FirstStageScan, FirstStageSpec, FirstStageSweep};
use crate::linalg::{add_outer, factor_design, factor_variance};

/// The sup tests. GMM variants share the statistic form and differ in the
/// residuals behind the weight matrix and in the bootstrap used.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum TestKind {
    /// Per-γ residuals, per-γ bootstrap.
    GmmWaldCH,
    /// Per-γ residuals with the null bootstrap.
    GmmWaldMix,
    /// Full-sample null residuals with the null bootstrap.
    GmmWaldBR,
    TslsLR(FirstStageMode),
    TslsWald(FirstStageMode),
}

impl TestKind {
    pub fn label(self) -> String {
        match self {
            TestKind::GmmWaldCH => "gmm-ch".into(),
            TestKind::GmmWaldMix => "gmm-mix".into(),
            TestKind::GmmWaldBR => "gmm-br".into(),
            TestKind::TslsLR(m) => format!("lr-{}", m.label()),
            TestKind::TslsWald(m) => format!("wald-{}", m.label()),
        }
    }

    pub fn first_stage(self) -> Option<FirstStageMode> {
        match self {
            TestKind::TslsLR(m) | TestKind::TslsWald(m) => Some(m),
            _ => None,
        }
    }

    pub fn residual_source(self) -> Option<ResidualSource> {
        match self {
            TestKind::GmmWaldCH | TestKind::GmmWaldMix => Some(ResidualSource::PerGamma),
            TestKind::GmmWaldBR => Some(ResidualSource::FullSampleNull),
            _ => None,
        }
    }
}

/// A statistic evaluated over the grid.
///
/// `gammas[i]` carries `values[i]`; candidates that could not be evaluated are
/// listed in `skipped`. `ridge_repaired` lists candidates whose variance needed
/// the one-time ridge.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SequenceResult {
    pub grid: ThresholdGrid,
    pub gammas: Vec<f64>,
    pub values: Vec<f64>,
    pub sup: f64,
    pub argmax_gamma: f64,
    pub skipped: Vec<SkippedCandidate>,
    pub ridge_repaired: Vec<f64>,
}

/// Per-candidate outcome: the value and whether the ridge was applied.
pub(crate) type Candidate = std::result::Result<(f64, bool), String>;

impl SequenceResult {
    pub(crate) fn collect(grid: &ThresholdGrid, results: Vec<Candidate>) -> Result<Self> {
        let mut out = SequenceResult {
            grid: grid.clone(),
            gammas: Vec::new(),
            values: Vec::new(),
            sup: f64::NEG_INFINITY,
            argmax_gamma: f64::NAN,
            skipped: Vec::new(),
            ridge_repaired: Vec::new(),
        };
        for (r, &gamma) in results.into_iter().zip(grid.values()) {
            match r {
                Ok((v, _)) if v.is_nan() || v < 0.0 => {
                    out.skipped.push(SkippedCandidate { gamma, reason: format!("invalid statistic {v}") })
                }
                Ok((v, repaired)) => {
                    if v > out.sup {
                        out.sup = v;
                        out.argmax_gamma = gamma;
                    }
                    if repaired {
                        out.ridge_repaired.push(gamma);
                    }
                    out.gammas.push(gamma);
                    out.values.push(v);
                }
                Err(reason) => out.skipped.push(SkippedCandidate { gamma, reason }),
            }
        }
        if out.values.is_empty() {
            return Err(Error::AllCandidatesFailed {
                candidates: grid.len(),
                first: out.skipped.first().map(|s| s.reason.clone()).unwrap_or_default(),
            });
        }
        Ok(out)
    }
}

/// Relative size below which a sum of squares counts as round-off.
const EXACT_FIT_TOL: f64 = 1e-12;

/// `r / (ssr1 / dof)` with `ssr1 = ssr0 − r`, where `scale` is the raw sum of
/// squares of the dependent variable. A reduction at round-off level gives 0;
/// an exact split fit with a genuine reduction gives `+∞`.
fn lr_value(r: f64, ssr0: f64, dof: f64, scale: f64) -> Candidate {
    let tol = EXACT_FIT_TOL * scale;
    if r <= tol {
        return Ok((0.0, false));
    }
    let ssr1 = ssr0 - r;
    if ssr1 <= tol {
        return Ok((f64::INFINITY, false));
    }
    Ok((r / (ssr1 / dof), false))
}

fn size_check(cuts: &SortedCuts, grid: &ThresholdGrid, t: usize, n_min: usize) -> Vec<Option<String>> {
    grid.values()
        .iter()
        .zip(&cuts.counts)
        .map(|(&gamma, &n_low)| {
            let n_high = t - n_low;
            (n_low < n_min || n_high < n_min).then(|| Error::RegimeTooSmall { gamma, n_low, n_high, n_min }.to_string())
        })
        .collect()
}

fn row(m: &DMatrix<f64>, t: usize, buf: &mut [f64]) {
    for (k, b) in buf.iter_mut().enumerate() {
        *b = m[(t, k)];
    }
}

// ---------------------------------------------------------------------------
// GMM

/// First-step maps at one candidate: `θ̂ᵢ = Kᵢ · T⁻¹Σᵢ z y`, and
/// `Q = (Σᵢ (N̂ᵢM̂ᵢ⁻¹N̂ᵢ')⁻¹)⁻¹` for the homoskedastic statistic.
#[derive(Clone)]
pub(crate) struct GmmCandidate {
    pub k: [DMatrix<f64>; 2],
    pub q: DMatrix<f64>,
}

/// `T⁻¹`-scaled sufficient statistics of `y` over one regime for the
/// homoskedastic GMM statistic.
#[derive(Debug, Clone)]
pub(crate) struct HomSuff {
    pub zy: DVector<f64>,
    pub wy: DVector<f64>,
    pub yy: f64,
}

/// Fixed-regressor GMM machinery: everything that depends only on `(w, z, q)`.
pub(crate) struct GmmEngine<'a> {
    pub ds: &'a Dataset,
    pub grid: ThresholdGrid,
    pub cuts: SortedCuts,
    /// Low-regime membership by observation, per candidate, via sorted rank.
    pub rank: Vec<usize>,
    pub n_low: Vec<DMatrix<f64>>,
    pub n_tot: DMatrix<f64>,
    pub ww_low: Vec<DMatrix<f64>>,
    pub ww_tot: DMatrix<f64>,
    pub cand: Vec<std::result::Result<GmmCandidate, String>>,
    /// Full-sample first step `θ̂₍₁₎ = K · T⁻¹Σ z y`.
    pub k_full: DMatrix<f64>,
}

fn first_step_map(n: &DMatrix<f64>, m: &DMatrix<f64>) -> Result<(DMatrix<f64>, DMatrix<f64>)> {
    let mf = factor_design(m, "M̂")?;
    let g = mf.solve(&n.transpose());
    let af = factor_design(&(n * &g), "N M⁻¹ N'")?;
    Ok((af.solve(&g.transpose()), af.inverse()))
}

impl<'a> GmmEngine<'a> {
    pub fn new(ds: &'a Dataset, grid: &ThresholdGrid) -> Result<Self> {
        let (t, p, qz) = (ds.t(), ds.p(), ds.qz());
        let tf = t as f64;
        let cuts = SortedCuts::new(ds.q().as_slice(), grid.values());
        let mut rank = vec![0; t];
        for (k, &s) in cuts.order.iter().enumerate() {
            rank[s] = k;
        }
        let (mut zr, mut wr) = (vec![0.0; qz], vec![0.0; p]);
        let (snaps, tot) = cuts.prefix(qz * qz + p * qz + p * p, |s, acc| {
            row(ds.z(), s, &mut zr);
            row(ds.w(), s, &mut wr);
            add_outer(&mut acc[..qz * qz], &zr, 1.0);
            for k in 0..qz {
                for j in 0..p {
                    acc[qz * qz + k * p + j] += wr[j] * zr[k];
                }
            }
            add_outer(&mut acc[qz * qz + p * qz..], &wr, 1.0);
        });
        let split = |v: &[f64]| {
            (
                mat(qz, qz, &v[..qz * qz]) / tf,
                mat(p, qz, &v[qz * qz..qz * qz + p * qz]) / tf,
                mat(p, p, &v[qz * qz + p * qz..]) / tf,
            )
        };
        let (m_tot, n_tot, ww_tot) = split(&tot);
        let sizes = size_check(&cuts, grid, t, ds.default_n_min());
        let mut n_low = Vec::with_capacity(snaps.len());
        let mut ww_low = Vec::with_capacity(snaps.len());
        let mut cand = Vec::with_capacity(snaps.len());
        for (g, s) in snaps.iter().enumerate() {
            let (m1, n1, ww1) = split(s);
            let c = match &sizes[g] {
                Some(r) => Err(r.clone()),
                None => (|| -> Result<GmmCandidate> {
                    let (k1, a1) = first_step_map(&n1, &m1)?;
                    let (k2, a2) = first_step_map(&(&n_tot - &n1), &(&m_tot - &m1))?;
                    let q = factor_design(&(a1 + a2), "first-step variance")?.inverse();
                    Ok(GmmCandidate { k: [k1, k2], q })
                })()
                .map_err(|e| e.to_string()),
            };
            n_low.push(n1);
            ww_low.push(ww1);
            cand.push(c);
        }
        let (k_full, _) = first_step_map(&n_tot, &m_tot)?;
        Ok(GmmEngine { ds, grid: grid.clone(), cuts, rank, n_low, n_tot, ww_low, ww_tot, cand, k_full })
    }

    fn tf(&self) -> f64 {
        self.ds.t() as f64
    }

    /// `T⁻¹ Σ z y` at every cut plus the total.
    fn zy_prefix(&self, y: &DVector<f64>) -> (Vec<DVector<f64>>, DVector<f64>) {
        let qz = self.ds.qz();
        let z = self.ds.z();
        let (snaps, tot) = self.cuts.prefix(qz, |s, acc| {
            for k in 0..qz {
                acc[k] += z[(s, k)] * y[s];
            }
        });
        let tf = self.tf();
        (snaps.iter().map(|v| DVector::from_column_slice(v) / tf).collect(), DVector::from_column_slice(&tot) / tf)
    }

    /// Full-sample first-step (2SLS) residuals `y − wθ̂₍₁₎`.
    pub fn null_residuals(&self, y: &DVector<f64>) -> DVector<f64> {
        let zy = self.ds.z().tr_mul(y) / self.tf();
        y - self.ds.w() * (&self.k_full * zy)
    }

    fn hom_stat(&self, c: &GmmCandidate, zy1: &DVector<f64>, zy2: &DVector<f64>, sigma2: f64) -> f64 {
        let d = &c.k[0] * zy1 - &c.k[1] * zy2;
        self.tf() * d.dot(&(&c.q * &d)) / sigma2
    }

    /// Homoskedastic per-γ statistic from regime sufficient statistics.
    pub fn hom_ch_stat(&self, g: usize, lo: &HomSuff, hi: &HomSuff) -> std::result::Result<f64, String> {
        let c = self.cand[g].as_ref().map_err(|e| e.clone())?;
        let th1 = &c.k[0] * &lo.zy;
        let th2 = &c.k[1] * &hi.zy;
        let ww2 = &self.ww_tot - &self.ww_low[g];
        let ssr = lo.yy - 2.0 * th1.dot(&lo.wy) + th1.dot(&(&self.ww_low[g] * &th1)) + hi.yy - 2.0 * th2.dot(&hi.wy)
            + th2.dot(&(&ww2 * &th2));
        if !(ssr > 0.0) {
            return Err("zero residual variance".into());
        }
        let d = th1 - th2;
        Ok(self.tf() * d.dot(&(&c.q * &d)) / ssr)
    }

    /// Second step with weights `[H₁, H₂]` and the Wald statistic.
    fn robust_stat(
        &self,
        g: usize,
        zy1: &DVector<f64>,
        zy2: &DVector<f64>,
        h1: &DMatrix<f64>,
        h2: &DMatrix<f64>,
    ) -> Result<(f64, bool, DVector<f64>, DVector<f64>)> {
        let n1 = &self.n_low[g];
        let n2 = &self.n_tot - n1;
        let (th1, a1) = gmm_solve(n1, h1, zy1)?;
        let (th2, a2) = gmm_solve(&n2, h2, zy2)?;
        let v = a1.inverse() + a2.inverse();
        let (vf, repaired) = factor_variance(&v, "GMM Wald variance")?;
        let d = &th1 - &th2;
        Ok((self.tf() * vf.quad(&d), repaired, th1, th2))
    }

    /// `T⁻¹Σ e² zz'` per regime, with `e = y − wθᵢ` in regime `i`.
    fn split_h(
        &self,
        g: usize,
        y: &DVector<f64>,
        th1: &DVector<f64>,
        th2: &DVector<f64>,
    ) -> (DMatrix<f64>, DMatrix<f64>) {
        let (qz, p) = (self.ds.qz(), self.ds.p());
        let cut = self.cuts.counts[g];
        let (mut a1, mut a2) = (vec![0.0; qz * qz], vec![0.0; qz * qz]);
        let mut zr = vec![0.0; qz];
        let (w, z) = (self.ds.w(), self.ds.z());
        for s in 0..self.ds.t() {
            let low = self.rank[s] < cut;
            let th = if low { th1 } else { th2 };
            let mut e = y[s];
            for j in 0..p {
                e -= w[(s, j)] * th[j];
            }
            row(z, s, &mut zr);
            add_outer(if low { &mut a1 } else { &mut a2 }, &zr, e * e);
        }
        let tf = self.tf();
        (mat(qz, qz, &a1) / tf, mat(qz, qz, &a2) / tf)
    }

    /// Regime sums of `z y` at candidate `g` by a direct pass.
    fn zy_at(&self, g: usize, y: &DVector<f64>) -> (DVector<f64>, DVector<f64>) {
        let qz = self.ds.qz();
        let cut = self.cuts.counts[g];
        let (mut a1, mut a2) = (DVector::zeros(qz), DVector::zeros(qz));
        let z = self.ds.z();
        for s in 0..self.ds.t() {
            let a = if self.rank[s] < cut { &mut a1 } else { &mut a2 };
            for k in 0..qz {
                a[k] += z[(s, k)] * y[s];
            }
        }
        let tf = self.tf();
        (a1 / tf, a2 / tf)
    }

    /// Sufficient statistics of `y` over both regimes at candidate `g`.
    pub fn hom_suff_at(&self, g: usize, y: &DVector<f64>) -> (HomSuff, HomSuff) {
        let (qz, p) = (self.ds.qz(), self.ds.p());
        let cut = self.cuts.counts[g];
        let mk = || HomSuff { zy: DVector::zeros(qz), wy: DVector::zeros(p), yy: 0.0 };
        let (mut lo, mut hi) = (mk(), mk());
        let (w, z) = (self.ds.w(), self.ds.z());
        for s in 0..self.ds.t() {
            let h = if self.rank[s] < cut { &mut lo } else { &mut hi };
            for k in 0..qz {
                h.zy[k] += z[(s, k)] * y[s];
            }
            for j in 0..p {
                h.wy[j] += w[(s, j)] * y[s];
            }
            h.yy += y[s] * y[s];
        }
        let tf = self.tf();
        for h in [&mut lo, &mut hi] {
            h.zy /= tf;
            h.wy /= tf;
            h.yy /= tf;
        }
        (lo, hi)
    }

    /// The per-γ (CH) statistic at one candidate, with the second-step
    /// coefficients.
    pub fn ch_at(
        &self,
        g: usize,
        y: &DVector<f64>,
        mode: VarianceMode,
    ) -> Result<(f64, bool, DVector<f64>, DVector<f64>)> {
        let c = self.cand[g].as_ref().map_err(|e| Error::InvalidInput(e.clone()))?;
        match mode {
            VarianceMode::Homoskedastic => {
                let (lo, hi) = self.hom_suff_at(g, y);
                let v = self.hom_ch_stat(g, &lo, &hi).map_err(Error::InvalidInput)?;
                Ok((v, false, &c.k[0] * &lo.zy, &c.k[1] * &hi.zy))
            }
            VarianceMode::Robust => {
                let (zy1, zy2) = self.zy_at(g, y);
                let th1 = &c.k[0] * &zy1;
                let th2 = &c.k[1] * &zy2;
                let (h1, h2) = self.split_h(g, y, &th1, &th2);
                self.robust_stat(g, &zy1, &zy2, &h1, &h2)
            }
        }
    }

    /// Robust statistic at candidate `g` with the weight built from `e`.
    pub fn with_residuals(&self, g: usize, y: &DVector<f64>, e: &DVector<f64>) -> Candidate {
        self.cand[g].as_ref().map_err(|e| e.clone())?;
        let (qz, tf) = (self.ds.qz(), self.tf());
        let cut = self.cuts.counts[g];
        let (mut a1, mut a2) = (vec![0.0; qz * qz], vec![0.0; qz * qz]);
        let mut zr = vec![0.0; qz];
        for s in 0..self.ds.t() {
            row(self.ds.z(), s, &mut zr);
            add_outer(if self.rank[s] < cut { &mut a1 } else { &mut a2 }, &zr, e[s] * e[s]);
        }
        let (zy1, zy2) = self.zy_at(g, y);
        self.robust_stat(g, &zy1, &zy2, &(mat(qz, qz, &a1) / tf), &(mat(qz, qz, &a2) / tf))
            .map(|(v, r, _, _)| (v, r))
            .map_err(|e| e.to_string())
    }

    /// The whole sequence for dependent variable `y`.
    pub fn sequence(&self, y: &DVector<f64>, source: ResidualSource, mode: VarianceMode) -> Result<SequenceResult> {
        let results = self.candidates(y, source, mode);
        SequenceResult::collect(&self.grid, results)
    }

    pub fn candidates(&self, y: &DVector<f64>, source: ResidualSource, mode: VarianceMode) -> Vec<Candidate> {
        let g_all = 0..self.grid.len();
        let (zy_low, zy_tot) = self.zy_prefix(y);
        let tf = self.tf();
        match (source, mode) {
            (ResidualSource::FullSampleNull, VarianceMode::Homoskedastic) => {
                let e = self.null_residuals(y);
                let sigma2 = e.norm_squared() / tf;
                g_all
                    .map(|g| {
                        let c = self.cand[g].as_ref().map_err(|e| e.clone())?;
                        if !(sigma2 > 0.0) {
                            return Err("zero residual variance".into());
                        }
                        Ok((self.hom_stat(c, &zy_low[g], &(&zy_tot - &zy_low[g]), sigma2), false))
                    })
                    .collect()
            }
            (ResidualSource::FullSampleNull, VarianceMode::Robust) => {
                let e = self.null_residuals(y);
                let qz = self.ds.qz();
                let z = self.ds.z();
                let mut zr = vec![0.0; qz];
                let (snaps, tot) = self.cuts.prefix(qz * qz, |s, acc| {
                    row(z, s, &mut zr);
                    add_outer(acc, &zr, e[s] * e[s]);
                });
                let h_tot = mat(qz, qz, &tot) / tf;
                g_all
                    .map(|g| {
                        self.cand[g].as_ref().map_err(|e| e.clone())?;
                        let h1 = mat(qz, qz, &snaps[g]) / tf;
                        let h2 = &h_tot - &h1;
                        self.robust_stat(g, &zy_low[g], &(&zy_tot - &zy_low[g]), &h1, &h2)
                            .map(|(v, r, _, _)| (v, r))
                            .map_err(|e| e.to_string())
                    })
                    .collect()
            }
            (ResidualSource::PerGamma, VarianceMode::Homoskedastic) => {
                let p = self.ds.p();
                let w = self.ds.w();
                let (snaps, tot) = self.cuts.prefix(p + 1, |s, acc| {
                    for j in 0..p {
                        acc[j] += w[(s, j)] * y[s];
                    }
                    acc[p] += y[s] * y[s];
                });
                g_all
                    .map(|g| {
                        let lo = HomSuff {
                            zy: zy_low[g].clone(),
                            wy: DVector::from_column_slice(&snaps[g][..p]) / tf,
                            yy: snaps[g][p] / tf,
                        };
                        let hi = HomSuff {
                            zy: &zy_tot - &zy_low[g],
                            wy: DVector::from_iterator(p, (0..p).map(|j| (tot[j] - snaps[g][j]) / tf)),
                            yy: (tot[p] - snaps[g][p]) / tf,
                        };
                        self.hom_ch_stat(g, &lo, &hi).map(|v| (v, false))
                    })
                    .collect()
            }
            (ResidualSource::PerGamma, VarianceMode::Robust) => g_all
                .map(|g| {
                    let c = self.cand[g].as_ref().map_err(|e| e.clone())?;
                    let zy2 = &zy_tot - &zy_low[g];
                    let th1 = &c.k[0] * &zy_low[g];
                    let th2 = &c.k[1] * &zy2;
                    let (h1, h2) = self.split_h(g, y, &th1, &th2);
                    self.robust_stat(g, &zy_low[g], &zy2, &h1, &h2)
                        .map(|(v, r, _, _)| (v, r))
                        .map_err(|e| e.to_string())
                })
                .collect(),
        }
    }
}

/// Sup-Wald GMM sequence with weights from per-γ (CH) or null (BR) residuals.
pub fn wg_sequence(
    ds: &Dataset,
    grid: &ThresholdGrid,
    variant: ResidualSource,
    mode: VarianceMode,
) -> Result<SequenceResult> {
    GmmEngine::new(ds, grid)?.sequence(ds.y(), variant, mode)
}

/// Robust GMM sup-Wald sequence with the second-step weight at each candidate
/// built from caller-supplied residuals `residuals(i, γ_i)`. The CH and BR
/// variants are the special cases of per-γ first-step and null residuals.
pub fn wg_sequence_with_residuals(
    ds: &Dataset,
    grid: &ThresholdGrid,
    residuals: impl Fn(usize, f64) -> DVector<f64>,
) -> Result<SequenceResult> {
    let engine = GmmEngine::new(ds, grid)?;
    let values = (0..engine.grid.len())
        .map(|g| engine.with_residuals(g, ds.y(), &residuals(g, engine.grid.values()[g])))
        .collect();
    SequenceResult::collect(&engine.grid, values)
}

// ---------------------------------------------------------------------------
// 2SLS

/// Fixed-instrument 2SLS machinery: everything that depends only on `(z, q)`.
pub(crate) struct TslsEngine {
    pub grid: ThresholdGrid,
    pub cuts: SortedCuts,
    pub sizes: Vec<Option<String>>,
    /// `T⁻¹Σ_{q ≤ γ} zz'` per candidate and in total.
    pub m_low: Vec<DMatrix<f64>>,
    pub m_tot: DMatrix<f64>,
    /// `M̂_{1γ} M̂⁻¹` per candidate.
    pub r_lin: Vec<DMatrix<f64>>,
}

/// LR and (optionally) Wald sequences from one evaluation.
pub(crate) struct TslsSequences {
    pub lr: Result<SequenceResult>,
    pub wald: Option<Result<SequenceResult>>,
}

impl TslsEngine {
    pub fn new(ds: &Dataset, grid: &ThresholdGrid) -> Result<Self> {
        let (t, qz) = (ds.t(), ds.qz());
        let tf = t as f64;
        let cuts = SortedCuts::new(ds.q().as_slice(), grid.values());
        let mut zr = vec![0.0; qz];
        let (snaps, tot) = cuts.prefix(qz * qz, |s, acc| {
            row(ds.z(), s, &mut zr);
            add_outer(acc, &zr, 1.0);
        });
        let m_tot = mat(qz, qz, &tot) / tf;
        let mf = factor_design(&m_tot, "Z'Z")?;
        let m_low: Vec<DMatrix<f64>> = snaps.iter().map(|s| mat(qz, qz, s) / tf).collect();
        let r_lin = m_low.iter().map(|m1| mf.solve(m1).transpose()).collect();
        Ok(TslsEngine {
            grid: grid.clone(),
            sizes: size_check(&cuts, grid, t, ds.default_n_min()),
            cuts,
            m_low,
            m_tot,
            r_lin,
        })
    }

    /// Evaluate on `ds` (same `z`, `q` as at construction) with first stage `fs`.
    pub fn evaluate(
        &self,
        ds: &Dataset,
        fs: &FirstStageSpec,
        mode: VarianceMode,
        want_wald: bool,
    ) -> Result<TslsSequences> {
        let (t, p, qz) = (ds.t(), ds.p(), ds.qz());
        let tf = t as f64;
        let what = fs.what(ds);
        let y = ds.y();
        let cf = factor_design(&what.tr_mul(&what), "full-sample Ŵ'Ŵ")?;
        let theta = cf.solve_vec(&what.tr_mul(y));
        let ssr0 = (y - &what * &theta).norm_squared();
        let yy = y.norm_squared();
        let res = TslsResiduals::new(ds, &fs.xhat, &theta);
        let robust = mode == VarianceMode::Robust && want_wald;
        let n_c = if robust { 3 * qz * qz } else { 0 };
        let (mut wr, mut zr) = (vec![0.0; p], vec![0.0; qz]);
        let z = ds.z();
        let (snaps, tot) = self.cuts.prefix(p * p + p + n_c, |s, acc| {
            row(&what, s, &mut wr);
            add_outer(&mut acc[..p * p], &wr, 1.0);
            for j in 0..p {
                acc[p * p + j] += wr[j] * y[s];
            }
            if robust {
                row(z, s, &mut zr);
                add_contracted(&mut acc[p * p + p..], &zr, res.et[s], res.ut[s]);
            }
        });
        let c_tot = mat(p, p, &tot[..p * p]);
        let wy_tot = DVector::from_column_slice(&tot[p * p..p * p + p]);
        let dof = t as f64 - 2.0 * p as f64;

        // Contracted sums over the sample and, for a threshold first stage,
        // over the low ρ-regime.
        let moments = res.moments();
        let contracted = |flat: Option<&[f64]>, m: &DMatrix<f64>| -> Contracted {
            match flat {
                Some(f) => Contracted::from_flat(qz, f, 1.0 / tf),
                None => Contracted::homoskedastic(m, moments.0, moments.1, moments.2),
            }
        };
        let h_tot = contracted(robust.then(|| &tot[p * p + p..]), &self.m_tot);
        let tfs = match &fs.model {
            FirstStage::Linear { .. } => None,
            FirstStage::Threshold { rho, .. } => {
                let rho = *rho;
                let mut m1r = vec![0.0; qz * qz];
                let mut acc = vec![0.0; 3 * qz * qz];
                for s in (0..t).filter(|&s| ds.q()[s] <= rho) {
                    row(z, s, &mut zr);
                    add_outer(&mut m1r, &zr, 1.0);
                    if robust {
                        add_contracted(&mut acc, &zr, res.et[s], res.ut[s]);
                    }
                }
                let m1r = mat(qz, qz, &m1r) / tf;
                let m2r = &self.m_tot - &m1r;
                let h1r = contracted(robust.then_some(&acc[..]), &m1r);
                let f1 = factor_design(&m1r, "low ρ-regime Z'Z");
                let f2 = factor_design(&m2r, "high ρ-regime Z'Z");
                Some((rho, h1r, f1, f2))
            }
        };
        let a1 = fs.a_matrix(ds, false);
        let a2 = fs.a_matrix(ds, true);

        let mut lr = Vec::with_capacity(self.grid.len());
        let mut wald = Vec::with_capacity(self.grid.len());
        for (g, s) in snaps.iter().enumerate() {
            if let Some(r) = &self.sizes[g] {
                lr.push(Err(r.clone()));
                wald.push(Err(r.clone()));
                continue;
            }
            let c1 = mat(p, p, &s[..p * p]);
            let c2 = &c_tot - &c1;
            let wy1 = DVector::from_column_slice(&s[p * p..p * p + p]);
            let wy2 = &wy_tot - &wy1;
            let f =
                factor_design(&c1, "low-regime Ŵ'Ŵ").and_then(|f1| Ok((f1, factor_design(&c2, "high-regime Ŵ'Ŵ")?)));
            let (f1, f2) = match f {
                Ok(f) => f,
                Err(e) => {
                    lr.push(Err(e.to_string()));
                    wald.push(Err(e.to_string()));
                    continue;
                }
            };
            let th1 = f1.solve_vec(&wy1);
            let th2 = f2.solve_vec(&wy2);
            let (d1, d2) = (&th1 - &theta, &th2 - &theta);
            let num = d1.dot(&(&c1 * &d1)) + d2.dot(&(&c2 * &d2));
            lr.push(lr_value(num, ssr0, dof, yy));
            if !want_wald {
                continue;
            }
            let h1 = contracted(robust.then(|| &s[p * p + p..]), &self.m_low[g]);
            let c1s = factor_design(&(&c1 / tf), "low-regime Ĉ");
            let c2s = factor_design(&(&c2 / tf), "high-regime Ĉ");
            let v = match &tfs {
                None => Ok(lfs_blocks(&a1, &self.r_lin[g], &h1, &h_tot.sub(&h1))),
                Some((rho, h1r, fa, fb)) => {
                    let low_branch = self.grid.values()[g] <= *rho;
                    let r = if low_branch {
                        fa.as_ref().map(|f| f.solve(&self.m_low[g]).transpose())
                    } else {
                        let m2g = &self.m_tot - &self.m_low[g];
                        fb.as_ref().map(|f| f.solve(&m2g).transpose())
                    };
                    r.map(|r| tfs_blocks(&a1, &a2, &r, low_branch, &h1, h1r, &h_tot)).map_err(|e| e.clone())
                }
            }
            .and_then(|b| match (c1s, c2s) {
                (Ok(c1s), Ok(c2s)) => Ok(assemble(&c1s, &c2s, &b)),
                (Err(e), _) | (_, Err(e)) => Err(e),
            });
            wald.push(
                v.and_then(|v| {
                    let (vf, repaired) = factor_variance(&v, "2SLS Wald variance")?;
                    Ok((tf * vf.quad(&(&th1 - &th2)), repaired))
                })
                .map_err(|e| e.to_string()),
            );
        }
        Ok(TslsSequences {
            lr: SequenceResult::collect(&self.grid, lr),
            wald: want_wald.then(|| SequenceResult::collect(&self.grid, wald)),
        })
    }
}

/// LR and Wald sequences for a fitted first stage.
pub fn tsls_sequences(
    ds: &Dataset,
    grid: &ThresholdGrid,
    fs: &FirstStageSpec,
    mode: VarianceMode,
) -> Result<(SequenceResult, SequenceResult)> {
    let s = TslsEngine::new(ds, grid)?.evaluate(ds, fs, mode, true)?;
    Ok((s.lr?, s.wald.expect("requested")?))
}

/// `sup (SSR₀ − SSR₁(γ)) / (SSR₁(γ)/(T − 2p))` with predicted regressors.
pub fn lr_sequence(ds: &Dataset, grid: &ThresholdGrid, fs: &FirstStageSpec) -> Result<SequenceResult> {
    TslsEngine::new(ds, grid)?.evaluate(ds, fs, VarianceMode::Robust, false)?.lr
}

/// `sup T(θ̂₁γ − θ̂₂γ)' V̂_γ⁻¹ (θ̂₁γ − θ̂₂γ)`.
pub fn w_sequence(
    ds: &Dataset,
    grid: &ThresholdGrid,
    fs: &FirstStageSpec,
    mode: VarianceMode,
) -> Result<SequenceResult> {
    TslsEngine::new(ds, grid)?.evaluate(ds, fs, mode, true)?.wald.expect("requested")
}

// ---------------------------------------------------------------------------
// First-stage linearity

/// OLS sup-LR and sup-W sequences against a linear first stage, from a sweep
/// over `x` (`T × p1`).
pub(crate) fn first_stage_tests_with(
    sweep: &FirstStageSweep,
    z: &DMatrix<f64>,
    x: &DMatrix<f64>,
) -> Result<(SequenceResult, SequenceResult)> {
    let (t, qz, p1) = (x.nrows(), z.ncols(), x.ncols());
    let tf = t as f64;
    let FirstStageScan { pi, ssr0, reduction, slopes } = sweep.scan(x)?;
    let dof = t as f64 - 2.0 * qz as f64;
    let scale = x.norm_squared();
    let lr: Vec<Candidate> = reduction
        .iter()
        .zip(&sweep.factors)
        .map(|(r, f)| match (r, f) {
            (Some(r), _) => lr_value(*r, ssr0, dof, scale),
            (None, Err(e)) => Err(e.clone()),
            (None, Ok(_)) => Err("candidate not evaluated".into()),
        })
        .collect();

    // Robust variance of vec(Π̂₁ − Π̂₂) from null residuals û = x − zΠ̂.
    let u = x - z * &pi;
    let nk = qz * p1;
    let mut kr = vec![0.0; nk];
    let (snaps, tot) = sweep.cuts.prefix(nk * nk, |s, acc| {
        for j in 0..p1 {
            for k in 0..qz {
                kr[j * qz + k] = u[(s, j)] * z[(s, k)];
            }
        }
        add_outer(acc, &kr, 1.0);
    });
    let om_tot = mat(nk, nk, &tot) / tf;
    let eye = DMatrix::<f64>::identity(p1, p1);
    let w: Vec<Candidate> = (0..sweep.grid.len())
        .map(|g| {
            let (pi1, pi2) = slopes[g].as_ref().ok_or_else(|| match &sweep.factors[g] {
                Err(e) => e.clone(),
                Ok(_) => "candidate not evaluated".to_string(),
            })?;
            let (lo, hi) = sweep.factors[g].as_ref().map_err(|e| e.clone())?;
            let om1 = mat(nk, nk, &snaps[g]) / tf;
            let om2 = &om_tot - &om1;
            // M̂ᵢ = T⁻¹ raw, so M̂ᵢ⁻¹ = T · raw⁻¹.
            let g1 = eye.kronecker(&(lo.inverse() * tf));
            let g2 = eye.kronecker(&(hi.inverse() * tf));
            let v = &g1 * om1 * &g1 + &g2 * om2 * &g2;
            let d = DVector::from_column_slice((pi1 - pi2).as_slice());
            let (vf, repaired) = factor_variance(&v, "first-stage Wald variance").map_err(|e| e.to_string())?;
            Ok((tf * vf.quad(&d), repaired))
        })
        .collect();
    Ok((SequenceResult::collect(&sweep.grid, lr)?, SequenceResult::collect(&sweep.grid, w)?))
}

/// OLS linearity tests for the first stage: `(LR, W)`.
///
/// LR uses the trace of the SSR matrix; W stacks `vec(Π̂₁ − Π̂₂)` with a
/// robust variance built from the linear-fit residuals.
pub fn first_stage_linearity_tests(ds: &Dataset, grid: &ThresholdGrid) -> Result<(SequenceResult, SequenceResult)> {
    let sweep = FirstStageSweep::new(ds.z(), ds.q(), grid, ds.default_n_min());
    first_stage_tests_with(&sweep, ds.z(), ds.x())
}
