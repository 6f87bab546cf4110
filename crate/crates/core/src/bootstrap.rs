//! Wild fixed-regressor bootstraps for the sup tests.
//!
//! Replicate `b` draws its multipliers from a generator seeded by
//! `derive_seed(seed, b, stream)`, so draws do not depend on scheduling and
//! every run is reproducible across thread counts.

use std::str::FromStr;

use nalgebra::{Cholesky, DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::covariance::{ResidualSource, VarianceMode};
use crate::data::{Dataset, ThresholdGrid};
use crate::error::{Error, Result};
use crate::estimators::{fit_first_stage_linear, gmm_solve, FirstStage, FirstStageSpec, FirstStageSweep};
use crate::linalg::add_outer;
use crate::statistics::{first_stage_tests_with, GmmEngine, HomSuff, TslsEngine};

/// Multiplier distribution.
///
/// `IidGaussian` replaces the wild scheme by Gaussian residuals with the
/// sample residual (co)variance; its source yields standard normals that the
/// algorithms rescale.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Multiplier {
    StdNormal,
    Rademacher,
    Mammen,
    IidGaussian,
}

impl Multiplier {
    pub fn label(self) -> &'static str {
        match self {
            Multiplier::StdNormal => "normal",
            Multiplier::Rademacher => "rademacher",
            Multiplier::Mammen => "mammen",
            Multiplier::IidGaussian => "iid",
        }
    }
}

impl FromStr for Multiplier {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normal" => Ok(Multiplier::StdNormal),
            "rademacher" => Ok(Multiplier::Rademacher),
            "mammen" => Ok(Multiplier::Mammen),
            "iid" => Ok(Multiplier::IidGaussian),
            _ => Err(Error::InvalidInput(format!("unknown multiplier {s:?}"))),
        }
    }
}

/// The two support points of the Mammen distribution and the probability of
/// the negative one.
pub fn mammen_support() -> (f64, f64, f64) {
    let r5 = 5f64.sqrt();
    (-(r5 - 1.0) / 2.0, (r5 + 1.0) / 2.0, (r5 + 1.0) / (2.0 * r5))
}

/// `t` i.i.d. multipliers of the given kind.
pub fn draw_multipliers<R: Rng + ?Sized>(mult: Multiplier, t: usize, rng: &mut R) -> Vec<f64> {
    match mult {
        Multiplier::StdNormal | Multiplier::IidGaussian => (0..t).map(|_| StandardNormal.sample(rng)).collect(),
        Multiplier::Rademacher => (0..t).map(|_| if rng.random::<bool>() { 1.0 } else { -1.0 }).collect(),
        Multiplier::Mammen => {
            let (lo, hi, p_lo) = mammen_support();
            (0..t).map(|_| if rng.random::<f64>() < p_lo { lo } else { hi }).collect()
        }
    }
}

fn mix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Child seed for `(a, b)` under `root`, by chained splitmix64 mixing.
pub fn derive_seed(root: u64, a: u64, b: u64) -> u64 {
    mix64(mix64(root ^ mix64(a)) ^ mix64(b.wrapping_add(0x5851_f42d_4c95_7f2d)))
}

/// Supplier of multiplier vectors, keyed by replicate and stream.
///
/// Stream `g` is used for candidate `g` when multipliers are drawn afresh per
/// candidate; stream 0 otherwise.
pub trait MultiplierSource: Sync {
    fn multipliers(&self, replicate: usize, stream: usize, len: usize) -> Vec<f64>;

    /// True for the default seeded source, which allows exact shortcuts that
    /// bypass per-observation multipliers.
    fn is_seeded(&self) -> bool {
        false
    }
}

/// The default source: counter-derived ChaCha streams.
#[derive(Debug, Clone, Copy)]
pub struct SeededSource {
    pub seed: u64,
    pub multiplier: Multiplier,
}

impl SeededSource {
    pub fn rng(&self, replicate: usize, stream: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(derive_seed(self.seed, replicate as u64, stream as u64))
    }
}

impl MultiplierSource for SeededSource {
    fn multipliers(&self, replicate: usize, stream: usize, len: usize) -> Vec<f64> {
        draw_multipliers(self.multiplier, len, &mut self.rng(replicate, stream))
    }
    fn is_seeded(&self) -> bool {
        true
    }
}

/// How the per-candidate bootstrap generates its homoskedastic Gaussian draws.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ChSampler {
    /// Draw the regime sufficient statistics directly when possible.
    Auto,
    /// Always build the `T`-vector of pseudo-data.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapConfig {
    pub b: usize,
    pub alpha: f64,
    pub multiplier: Multiplier,
    pub mode: VarianceMode,
    pub seed: u64,
    /// Fresh multipliers for every candidate in the per-γ bootstrap.
    pub fresh_per_gamma: bool,
    pub ch_sampler: ChSampler,
}

impl BootstrapConfig {
    pub fn new(b: usize, alpha: f64, multiplier: Multiplier, seed: u64) -> Self {
        BootstrapConfig {
            b,
            alpha,
            multiplier,
            mode: VarianceMode::Robust,
            seed,
            fresh_per_gamma: true,
            ch_sampler: ChSampler::Auto,
        }
    }

    pub fn with_mode(mut self, mode: VarianceMode) -> Self {
        self.mode = mode;
        self
    }

    fn source(&self) -> SeededSource {
        SeededSource { seed: self.seed, multiplier: self.multiplier }
    }

    fn check(&self) -> Result<()> {
        if self.b == 0 {
            return Err(Error::InvalidInput("at least one bootstrap replicate is required".into()));
        }
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(Error::InvalidInput(format!("alpha must lie in (0, 1], got {}", self.alpha)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BootstrapResult {
    /// Sup statistics of the successful replicates, in replicate order.
    pub draws: Vec<f64>,
    pub observed: f64,
    pub critical_value: f64,
    pub p_value: f64,
    pub reject: bool,
    pub seed: u64,
    pub b: usize,
    pub alpha: f64,
    pub failures: usize,
}

/// Order statistic `⌈(1−α)B⌉` of the ascending draws (`−∞` when that index is 0)
/// and `p = #{draws ≥ observed}/B`.
pub fn summarize(draws: &[f64], observed: f64, alpha: f64) -> BootstrapResult {
    let b = draws.len();
    let mut sorted = draws.to_vec();
    sorted.sort_by(f64::total_cmp);
    let k = (((1.0 - alpha) * b as f64) - 1e-9).ceil().max(0.0) as usize;
    let critical_value = if k == 0 { f64::NEG_INFINITY } else { sorted[k.min(b) - 1] };
    let exceed = draws.iter().filter(|&&d| d >= observed).count();
    BootstrapResult {
        draws: draws.to_vec(),
        observed,
        critical_value,
        p_value: if b == 0 { f64::NAN } else { exceed as f64 / b as f64 },
        reject: observed > critical_value,
        seed: 0,
        b,
        alpha,
        failures: 0,
    }
}

/// Run `b` replicates in parallel and merge them by index.
fn run_replicates<F>(b: usize, f: F) -> Result<(Vec<f64>, usize)>
where
    F: Fn(usize) -> Result<f64> + Sync,
{
    let out: Vec<Result<f64>> = (0..b).into_par_iter().map(&f).collect();
    let failed = out.iter().filter(|r| r.is_err()).count();
    if failed * 100 > b {
        let first = out.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::TooManyFailures { failed, total: b, first });
    }
    Ok((out.into_iter().filter_map(|r| r.ok()).collect(), failed))
}

fn finish(cfg: &BootstrapConfig, draws: Vec<f64>, failures: usize, observed: f64) -> BootstrapResult {
    let mut r = summarize(&draws, observed, cfg.alpha);
    r.seed = cfg.seed;
    r.b = cfg.b;
    r.failures = failures;
    r
}

fn hadamard(a: &DVector<f64>, eta: &[f64]) -> DVector<f64> {
    DVector::from_iterator(a.len(), a.iter().zip(eta).map(|(x, e)| x * e))
}

/// Pseudo-residuals for one replicate: `ε̂ ∘ η`, or `σ̂ η` in the i.i.d. case.
fn pseudo(resid: &DVector<f64>, sigma: f64, eta: &[f64], iid: bool) -> DVector<f64> {
    if iid {
        DVector::from_iterator(eta.len(), eta.iter().map(|e| sigma * e))
    } else {
        hadamard(resid, eta)
    }
}

// ---------------------------------------------------------------------------
// GMM

/// Full-sample null fit: first-step (2SLS) residuals and second-step residuals.
fn gmm_null_residuals(engine: &GmmEngine, mode: VarianceMode) -> Result<(DVector<f64>, DVector<f64>)> {
    let ds = engine.ds;
    let e1 = engine.null_residuals(ds.y());
    if mode == VarianceMode::Homoskedastic {
        return Ok((e1.clone(), e1));
    }
    let (t, qz) = (ds.t(), ds.qz());
    let tf = t as f64;
    let mut h = vec![0.0; qz * qz];
    let mut zr = vec![0.0; qz];
    for s in 0..t {
        for k in 0..qz {
            zr[k] = ds.z()[(s, k)];
        }
        add_outer(&mut h, &zr, e1[s] * e1[s]);
    }
    let h = DMatrix::from_column_slice(qz, qz, &h) / tf;
    let zy = ds.z().tr_mul(ds.y()) / tf;
    let (theta, _) = gmm_solve(&engine.n_tot, &h, &zy)?;
    let e2 = ds.y() - ds.w() * theta;
    Ok((e1, e2))
}

fn sigma_of(e: &DVector<f64>) -> f64 {
    (e.norm_squared() / e.len() as f64).sqrt()
}

/// Per-γ bootstrap of the CH statistic with the default seeded source.
pub fn bootstrap_ch(ds: &Dataset, grid: &ThresholdGrid, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    bootstrap_ch_with(ds, grid, cfg, &cfg.source())
}

/// Cholesky factors of the raw `[z, x]` cross-moment matrix per regime,
/// for the sufficient-statistic sampler.
struct ChFactors {
    low: Option<DMatrix<f64>>,
    high: Option<DMatrix<f64>>,
}

fn ch_factors(engine: &GmmEngine, g: usize) -> ChFactors {
    let ds = engine.ds;
    let (qz, p1) = (ds.qz(), ds.p1());
    let tf = ds.t() as f64;
    let n_low = engine.cuts.counts[g];
    let n_high = ds.t() - n_low;
    let k = qz + p1;
    let build = |m: DMatrix<f64>, n: &DMatrix<f64>, ww: &DMatrix<f64>, count: usize| -> Option<DMatrix<f64>> {
        if count < k {
            return None;
        }
        let mut gm = DMatrix::zeros(k, k);
        gm.view_mut((0, 0), (qz, qz)).copy_from(&m);
        let nx = n.rows(0, p1);
        gm.view_mut((qz, 0), (p1, qz)).copy_from(&nx);
        gm.view_mut((0, qz), (qz, p1)).copy_from(&nx.transpose());
        gm.view_mut((qz, qz), (p1, p1)).copy_from(&ww.view((0, 0), (p1, p1)));
        Cholesky::new(gm * tf).map(|c| c.l())
    };
    let z = ds.z();
    // Regime zz' sums are recovered from the engine's N and WW blocks only for
    // w; M is rebuilt here.
    let cut = engine.cuts.counts[g];
    let mut m1 = vec![0.0; qz * qz];
    let mut zr = vec![0.0; qz];
    let mut mt = vec![0.0; qz * qz];
    for s in 0..ds.t() {
        for kk in 0..qz {
            zr[kk] = z[(s, kk)];
        }
        add_outer(&mut mt, &zr, 1.0);
        if engine.rank[s] < cut {
            add_outer(&mut m1, &zr, 1.0);
        }
    }
    let m1 = DMatrix::from_column_slice(qz, qz, &m1) / tf;
    let m2 = DMatrix::from_column_slice(qz, qz, &mt) / tf - &m1;
    let n2 = &engine.n_tot - &engine.n_low[g];
    let ww2 = &engine.ww_tot - &engine.ww_low[g];
    ChFactors { low: build(m1, &engine.n_low[g], &engine.ww_low[g], n_low), high: build(m2, &n2, &ww2, n_high) }
}

/// Exact draw of the `T⁻¹`-scaled sufficient statistics of i.i.d. `N(0, 1)`
/// pseudo-data over one regime of size `n` with cross-moment factor `l`.
fn draw_suff<R: Rng>(l: &DMatrix<f64>, n: usize, qz: usize, p1: usize, p2: usize, tf: f64, rng: &mut R) -> HomSuff {
    let k = qz + p1;
    let xi = DVector::from_iterator(k, (0..k).map(|_| StandardNormal.sample(rng)));
    let b = l * &xi;
    let rest = if n > k { ChiSquared::new((n - k) as f64).expect("positive dof").sample(rng) } else { 0.0 };
    let zy = DVector::from_iterator(qz, (0..qz).map(|i| b[i] / tf));
    let wy =
        DVector::from_iterator(p1 + p2, (0..p1 + p2).map(|j| if j < p1 { b[qz + j] / tf } else { b[j - p1] / tf }));
    HomSuff { zy, wy, yy: (xi.norm_squared() + rest) / tf }
}

/// Per-γ bootstrap with an explicit multiplier source.
///
/// Candidate `g` uses pseudo-data `ε̂_{γ,(2)} ∘ η`, with `η` drawn on stream
/// `g` when `fresh_per_gamma` and on stream 0 otherwise. With homoskedastic
/// variances, i.i.d. Gaussian draws and the seeded source, the statistic only
/// depends on the regime sufficient statistics of the pseudo-data, which are
/// sampled exactly instead.
pub fn bootstrap_ch_with(
    ds: &Dataset,
    grid: &ThresholdGrid,
    cfg: &BootstrapConfig,
    source: &dyn MultiplierSource,
) -> Result<BootstrapResult> {
    cfg.check()?;
    let engine = GmmEngine::new(ds, grid)?;
    let observed = engine.sequence(ds.y(), ResidualSource::PerGamma, cfg.mode)?.sup;
    let iid = cfg.multiplier == Multiplier::IidGaussian;
    let sigma = sigma_of(&engine.null_residuals(ds.y()));
    let t = ds.t();
    let n_g = grid.len();

    let fast = iid
        && cfg.mode == VarianceMode::Homoskedastic
        && cfg.fresh_per_gamma
        && cfg.ch_sampler == ChSampler::Auto
        && source.is_seeded();
    let factors: Vec<Option<ChFactors>> = if fast {
        (0..n_g).into_par_iter().map(|g| engine.cand[g].is_ok().then(|| ch_factors(&engine, g))).collect()
    } else {
        Vec::new()
    };
    // Second-step residuals per candidate for the literal path.
    let resid: Vec<Option<DVector<f64>>> = (0..n_g)
        .into_par_iter()
        .map(|g| {
            if fast && factors[g].as_ref().is_some_and(|f| f.low.is_some() && f.high.is_some()) {
                return None;
            }
            let (_, _, th1, th2) = engine.ch_at(g, ds.y(), cfg.mode).ok()?;
            let cut = engine.cuts.counts[g];
            Some(DVector::from_iterator(
                t,
                (0..t).map(|s| {
                    let th = if engine.rank[s] < cut { &th1 } else { &th2 };
                    ds.y()[s] - ds.w().row(s).dot(&th.transpose())
                }),
            ))
        })
        .collect();
    let seeded = cfg.source();
    let (qz, p1, p2) = (ds.qz(), ds.p1(), ds.p2());
    let tf = t as f64;

    let (draws, failures) = run_replicates(cfg.b, |b| {
        let mut sup = f64::NEG_INFINITY;
        let mut first_err = None;
        let mut common: Option<Vec<f64>> = None;
        for g in 0..n_g {
            if engine.cand[g].is_err() {
                continue;
            }
            let stat = match (fast, factors.get(g).and_then(|f| f.as_ref())) {
                (true, Some(ChFactors { low: Some(l1), high: Some(l2) })) => {
                    let mut rng = seeded.rng(b, g);
                    let n1 = engine.cuts.counts[g];
                    let lo = draw_suff(l1, n1, qz, p1, p2, tf, &mut rng);
                    let hi = draw_suff(l2, t - n1, qz, p1, p2, tf, &mut rng);
                    engine.hom_ch_stat(g, &lo, &hi).map_err(Error::InvalidInput)
                }
                _ => {
                    let Some(e) = &resid[g] else { continue };
                    let eta = if cfg.fresh_per_gamma {
                        source.multipliers(b, g, t)
                    } else {
                        common.get_or_insert_with(|| source.multipliers(b, 0, t)).clone()
                    };
                    let yb = pseudo(e, sigma, &eta, iid);
                    engine.ch_at(g, &yb, cfg.mode).map(|r| r.0)
                }
            };
            match stat {
                Ok(v) if v >= 0.0 => sup = sup.max(v),
                Ok(_) => {}
                Err(e) => {
                    first_err.get_or_insert(e);
                }
            }
        }
        if sup == f64::NEG_INFINITY {
            return Err(first_err.unwrap_or(Error::AllCandidatesFailed { candidates: n_g, first: String::new() }));
        }
        Ok(sup)
    })?;
    Ok(finish(cfg, draws, failures, observed))
}

/// Null bootstrap for the GMM statistic: one pseudo-dependent variable
/// `ε̂_(2) ∘ η` per replicate, shared by every candidate. `source` selects the
/// residuals behind the weight matrix, so `FullSampleNull` gives the BR test
/// and `PerGamma` evaluates the CH statistic under the null bootstrap.
pub fn bootstrap_gmm_null(
    ds: &Dataset,
    grid: &ThresholdGrid,
    cfg: &BootstrapConfig,
    variant: ResidualSource,
) -> Result<BootstrapResult> {
    bootstrap_gmm_null_with(ds, grid, cfg, variant, &cfg.source())
}

pub fn bootstrap_gmm_null_with(
    ds: &Dataset,
    grid: &ThresholdGrid,
    cfg: &BootstrapConfig,
    variant: ResidualSource,
    source: &dyn MultiplierSource,
) -> Result<BootstrapResult> {
    cfg.check()?;
    let engine = GmmEngine::new(ds, grid)?;
    let observed = engine.sequence(ds.y(), variant, cfg.mode)?.sup;
    let (e1, e2) = gmm_null_residuals(&engine, cfg.mode)?;
    let iid = cfg.multiplier == Multiplier::IidGaussian;
    let sigma = sigma_of(&e1);
    let (draws, failures) = run_replicates(cfg.b, |b| {
        let eta = source.multipliers(b, 0, ds.t());
        let yb = pseudo(&e2, sigma, &eta, iid);
        Ok(engine.sequence(&yb, variant, cfg.mode)?.sup)
    })?;
    Ok(finish(cfg, draws, failures, observed))
}

pub fn bootstrap_gmm_br(ds: &Dataset, grid: &ThresholdGrid, cfg: &BootstrapConfig) -> Result<BootstrapResult> {
    bootstrap_gmm_null(ds, grid, cfg, ResidualSource::FullSampleNull)
}

// ---------------------------------------------------------------------------
// 2SLS

/// LR and Wald bootstraps from the same replicates.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TslsBootstrap {
    pub lr: BootstrapResult,
    pub wald: BootstrapResult,
}

/// Re-fit the first stage of the same kind as `fs` on a replicate.
enum Refit<'a> {
    Linear,
    Threshold(FirstStageSweep<'a>),
}

impl Refit<'_> {
    fn fit(&self, ds: &Dataset) -> Result<FirstStageSpec> {
        match self {
            Refit::Linear => fit_first_stage_linear(ds),
            Refit::Threshold(sweep) => sweep.fit(ds.x()),
        }
    }
}

/// Factor for drawing `T` i.i.d. rows from `N(0, Σ̂)` with `Σ̂ = T⁻¹ V'V`.
fn row_cov_factor(v: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let s = v.tr_mul(v) / v.nrows() as f64;
    Cholesky::new(s)
        .map(|c| c.l())
        .ok_or_else(|| Error::SingularDesign { context: "residual covariance".into(), rcond: 0.0 })
}

/// `T × k` matrix of rows `L ξ_t`, with `ξ` read row-major from `draws`.
fn correlated_rows(l: &DMatrix<f64>, draws: &[f64], t: usize) -> DMatrix<f64> {
    let k = l.nrows();
    let mut out = DMatrix::zeros(t, k);
    for s in 0..t {
        let xi = &draws[s * k..(s + 1) * k];
        for i in 0..k {
            let mut acc = 0.0;
            for j in 0..=i {
                acc += l[(i, j)] * xi[j];
            }
            out[(s, i)] = acc;
        }
    }
    out
}

/// 2SLS bootstrap returning both the LR and Wald results.
pub fn bootstrap_2sls(
    ds: &Dataset,
    grid: &ThresholdGrid,
    fs: &FirstStageSpec,
    cfg: &BootstrapConfig,
) -> Result<TslsBootstrap> {
    bootstrap_2sls_with(ds, grid, fs, cfg, &cfg.source())
}

/// One multiplier vector per replicate drives both `û` and `ε̂`:
/// `x^b = x̂ + û η`, `y^b = w^b'θ̂ + ε̂ η`. The first stage is re-estimated on
/// each replicate, including `ρ̂` for a threshold first stage. In the i.i.d.
/// case `(ε^b, u^b)` are Gaussian rows with the sample covariance of `(ε̂, û)`
/// and the source supplies `(p1 + 1)·T` standard normals.
pub fn bootstrap_2sls_with(
    ds: &Dataset,
    grid: &ThresholdGrid,
    fs: &FirstStageSpec,
    cfg: &BootstrapConfig,
    source: &dyn MultiplierSource,
) -> Result<TslsBootstrap> {
    cfg.check()?;
    let (t, p1) = (ds.t(), ds.p1());
    let engine = TslsEngine::new(ds, grid)?;
    let obs = engine.evaluate(ds, fs, cfg.mode, true)?;
    let obs_lr = obs.lr?.sup;
    let obs_w = obs.wald.expect("requested")?.sup;

    let what = fs.what(ds);
    let cf = crate::linalg::factor_design(&what.tr_mul(&what), "full-sample Ŵ'Ŵ")?;
    let theta = cf.solve_vec(&what.tr_mul(ds.y()));
    let eps = ds.y() - ds.w() * &theta;
    let uhat = fs.uhat(ds);
    let iid = cfg.multiplier == Multiplier::IidGaussian;
    let lv = if iid {
        let mut v = DMatrix::zeros(t, p1 + 1);
        v.column_mut(0).copy_from(&eps);
        v.columns_mut(1, p1).copy_from(&uhat);
        Some(row_cov_factor(&v)?)
    } else {
        None
    };
    let refit = match &fs.model {
        FirstStage::Linear { .. } => Refit::Linear,
        FirstStage::Threshold { grid: fs_grid, .. } => {
            Refit::Threshold(FirstStageSweep::new(ds.z(), ds.q(), fs_grid, ds.default_n_min()))
        }
    };
    let tx = theta.rows(0, p1).clone_owned();
    let tz = theta.rows(p1, ds.p2()).clone_owned();

    let out: Vec<Result<(f64, f64)>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let (eb, ub) = match &lv {
                Some(l) => {
                    let rows = correlated_rows(l, &source.multipliers(b, 0, (p1 + 1) * t), t);
                    (rows.column(0).clone_owned(), rows.columns(1, p1).clone_owned())
                }
                None => {
                    let eta = source.multipliers(b, 0, t);
                    let mut ub = uhat.clone();
                    for (s, e) in eta.iter().enumerate() {
                        ub.row_mut(s).scale_mut(*e);
                    }
                    (hadamard(&eps, &eta), ub)
                }
            };
            let xb = &fs.xhat + ub;
            let yb = &xb * &tx + ds.z1() * &tz + eb;
            let dsb = ds.with_xy(xb, yb)?;
            let fsb = refit.fit(&dsb)?;
            let s = engine.evaluate(&dsb, &fsb, cfg.mode, true)?;
            Ok((s.lr?.sup, s.wald.expect("requested")?.sup))
        })
        .collect();
    let failed = out.iter().filter(|r| r.is_err()).count();
    if failed * 100 > cfg.b {
        let first = out.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::TooManyFailures { failed, total: cfg.b, first });
    }
    let (lr, w): (Vec<f64>, Vec<f64>) = out.into_iter().filter_map(|r| r.ok()).unzip();
    Ok(TslsBootstrap { lr: finish(cfg, lr, failed, obs_lr), wald: finish(cfg, w, failed, obs_w) })
}

// ---------------------------------------------------------------------------
// First-stage linearity

/// First-stage linearity bootstrap: `x^b = x̂ + û η` from the linear fit.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FirstStageBootstrap {
    pub rho: f64,
    pub lr: BootstrapResult,
    pub wald: BootstrapResult,
}

pub fn bootstrap_first_stage(
    ds: &Dataset,
    fs_grid: &ThresholdGrid,
    cfg: &BootstrapConfig,
) -> Result<FirstStageBootstrap> {
    bootstrap_first_stage_with(ds, fs_grid, cfg, &cfg.source())
}

pub fn bootstrap_first_stage_with(
    ds: &Dataset,
    fs_grid: &ThresholdGrid,
    cfg: &BootstrapConfig,
    source: &dyn MultiplierSource,
) -> Result<FirstStageBootstrap> {
    cfg.check()?;
    let (t, p1) = (ds.t(), ds.p1());
    let sweep = FirstStageSweep::new(ds.z(), ds.q(), fs_grid, ds.default_n_min());
    let (lr0, w0) = first_stage_tests_with(&sweep, ds.z(), ds.x())?;
    let rho = sweep.fit(ds.x())?.rho().expect("threshold fit");
    let lin = fit_first_stage_linear(ds)?;
    let uhat = lin.uhat(ds);
    let iid = cfg.multiplier == Multiplier::IidGaussian;
    let lu = if iid { Some(row_cov_factor(&uhat)?) } else { None };
    let out: Vec<Result<(f64, f64)>> = (0..cfg.b)
        .into_par_iter()
        .map(|b| {
            let ub = match &lu {
                Some(l) => correlated_rows(l, &source.multipliers(b, 0, p1 * t), t),
                None => {
                    let eta = source.multipliers(b, 0, t);
                    let mut ub = uhat.clone();
                    for (s, e) in eta.iter().enumerate() {
                        ub.row_mut(s).scale_mut(*e);
                    }
                    ub
                }
            };
            let xb = &lin.xhat + ub;
            let (lr, w) = first_stage_tests_with(&sweep, ds.z(), &xb)?;
            Ok((lr.sup, w.sup))
        })
        .collect();
    let failed = out.iter().filter(|r| r.is_err()).count();
    if failed * 100 > cfg.b {
        let first = out.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::TooManyFailures { failed, total: cfg.b, first });
    }
    let (lr, w): (Vec<f64>, Vec<f64>) = out.into_iter().filter_map(|r| r.ok()).unzip();
    Ok(FirstStageBootstrap { rho, lr: finish(cfg, lr, failed, lr0.sup), wald: finish(cfg, w, failed, w0.sup) })
}
