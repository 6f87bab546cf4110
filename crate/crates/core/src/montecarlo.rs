//! Simulation designs and rejection-frequency experiments.
//!
//! The design is
//! `y = 1 + x + δx·x·1[q > γ⁰] + ε`, `x = 1 + z + δΠ·z·1[q > ρ⁰] + u`,
//! `z ~ N(1, 1)`, `q = z + 1`, with `(e, u)` standard bivariate normal with
//! correlation `cov_ue`. `ε = e` in cases A and B and `ε = e·z/√2` in case C.

use std::fmt::Write as _;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bootstrap::{
    bootstrap_2sls, bootstrap_ch, bootstrap_gmm_null, derive_seed, BootstrapConfig, BootstrapResult, Multiplier,
};
use crate::covariance::{ResidualSource, VarianceMode};
use crate::data::{build_grid, Dataset};
use crate::error::{Error, Result};
use crate::estimators::{fit_first_stage, FirstStageMode};
use crate::statistics::{tsls_sequences, wg_sequence, TestKind};

const DATA_STREAM: u64 = 1;
const BOOT_STREAM: u64 = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum ErrorCase {
    /// Homoskedastic, known to the econometrician.
    A,
    /// Homoskedastic, treated as unknown.
    B,
    /// Conditionally heteroskedastic.
    C,
}

impl ErrorCase {
    pub fn label(self) -> &'static str {
        match self {
            ErrorCase::A => "a",
            ErrorCase::B => "b",
            ErrorCase::C => "c",
        }
    }

    /// Case A uses homoskedastic variance estimators.
    pub fn variance_mode(self) -> VarianceMode {
        match self {
            ErrorCase::A => VarianceMode::Homoskedastic,
            _ => VarianceMode::Robust,
        }
    }
}

impl FromStr for ErrorCase {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "a" => Ok(ErrorCase::A),
            "b" => Ok(ErrorCase::B),
            "c" => Ok(ErrorCase::C),
            _ => Err(Error::InvalidInput(format!("unknown error case {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DgpConfig {
    pub t: usize,
    pub delta_x: f64,
    pub delta_pi: f64,
    pub rho0: f64,
    pub gamma0: f64,
    pub error_case: ErrorCase,
    pub cov_ue: f64,
}

impl DgpConfig {
    pub fn new(t: usize, error_case: ErrorCase) -> Self {
        DgpConfig { t, delta_x: 0.0, delta_pi: 0.0, rho0: 1.75, gamma0: 2.25, error_case, cov_ue: 0.5 }
    }

    pub fn with_delta_x(mut self, d: f64) -> Self {
        self.delta_x = d;
        self
    }

    pub fn with_delta_pi(mut self, d: f64) -> Self {
        self.delta_pi = d;
        self
    }

    /// The first-stage model matching the design.
    pub fn matched_first_stage(&self) -> FirstStageMode {
        if self.delta_pi == 0.0 {
            FirstStageMode::Linear
        } else {
            FirstStageMode::Threshold
        }
    }
}

/// Draw one sample. `z1` is the intercept and `z = [1, z_t]`.
pub fn generate(dgp: &DgpConfig, seed: u64) -> Result<Dataset> {
    let t = dgp.t;
    if t < 2 {
        return Err(Error::InvalidInput("at least two observations are required".into()));
    }
    if !(dgp.cov_ue.abs() < 1.0) {
        return Err(Error::InvalidInput("cov_ue must lie in (-1, 1)".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let c = (1.0 - dgp.cov_ue * dgp.cov_ue).sqrt();
    let (mut y, mut x, mut z, mut q) =
        (Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t), Vec::with_capacity(t));
    for _ in 0..t {
        let zt = 1.0 + <StandardNormal as Distribution<f64>>::sample(&StandardNormal, &mut rng);
        let a: f64 = StandardNormal.sample(&mut rng);
        let b: f64 = StandardNormal.sample(&mut rng);
        let e = a;
        let u = dgp.cov_ue * a + c * b;
        let qt = zt + 1.0;
        let eps = match dgp.error_case {
            ErrorCase::A | ErrorCase::B => e,
            ErrorCase::C => e * zt / std::f64::consts::SQRT_2,
        };
        let xt = 1.0 + zt + if qt > dgp.rho0 { dgp.delta_pi * zt } else { 0.0 } + u;
        let yt = 1.0 + xt + if qt > dgp.gamma0 { dgp.delta_x * xt } else { 0.0 } + eps;
        y.push(yt);
        x.push(xt);
        z.push(zt);
        q.push(qt);
    }
    Dataset::from_excluded(
        DVector::from_vec(y),
        DMatrix::from_vec(t, 1, x),
        DMatrix::from_element(t, 1, 1.0),
        DMatrix::from_vec(t, 1, z),
        DVector::from_vec(q),
    )
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dgp: DgpConfig,
    pub test: TestKind,
    pub b: usize,
    pub n_sim: usize,
    pub alpha: f64,
    pub multiplier: Multiplier,
    pub seed_bank: u64,
    pub trim: f64,
    pub fs_trim: f64,
}

impl ExperimentConfig {
    pub fn new(dgp: DgpConfig, test: TestKind, multiplier: Multiplier, seed_bank: u64) -> Self {
        ExperimentConfig {
            dgp,
            test,
            b: 500,
            n_sim: 1000,
            alpha: 0.05,
            multiplier,
            seed_bank,
            trim: 0.15,
            fs_trim: 0.15,
        }
    }

    pub fn with_sizes(mut self, n_sim: usize, b: usize) -> Self {
        self.n_sim = n_sim;
        self.b = b;
        self
    }

    fn same_design(&self, o: &ExperimentConfig) -> bool {
        ExperimentConfig { test: o.test, ..*self } == *o
    }

    pub fn data_seed(&self, sim: usize) -> u64 {
        derive_seed(self.seed_bank, DATA_STREAM, sim as u64)
    }

    pub fn boot_seed(&self, sim: usize) -> u64 {
        derive_seed(self.seed_bank, BOOT_STREAM, sim as u64)
    }

    fn boot_config(&self, sim: usize) -> BootstrapConfig {
        BootstrapConfig::new(self.b, self.alpha, self.multiplier, self.boot_seed(sim))
            .with_mode(self.dgp.error_case.variance_mode())
    }
}

/// Rejection frequency of one test in one design.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RejectionCell {
    pub case: ErrorCase,
    pub t: usize,
    pub delta_pi: f64,
    pub delta_x: f64,
    pub test: TestKind,
    pub rejection: f64,
    pub mc_se: f64,
    pub n_sim: usize,
    pub failures: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Default)]
pub struct RejectionTable {
    pub rows: Vec<RejectionCell>,
}

impl RejectionTable {
    pub fn to_csv(&self) -> String {
        let mut s = String::from("case,T,delta_pi,test,rejection,mc_se\n");
        for r in &self.rows {
            let _ =
                writeln!(s, "{},{},{},{},{},{}", r.case.label(), r.t, r.delta_pi, r.test.label(), r.rejection, r.mc_se);
        }
        s
    }

    /// Plain-text layout: one line per design, tests as columns.
    pub fn render(&self) -> String {
        let mut s = String::new();
        let mut i = 0;
        while i < self.rows.len() {
            let r = &self.rows[i];
            let _ = write!(s, "case {} T={:<5} delta_pi={:<5}", r.case.label(), r.t, r.delta_pi);
            while i < self.rows.len()
                && (self.rows[i].case, self.rows[i].t, self.rows[i].delta_pi) == (r.case, r.t, r.delta_pi)
            {
                let c = &self.rows[i];
                let _ = write!(s, "  {}={:5.1}%", c.test.label(), 100.0 * c.rejection);
                i += 1;
            }
            s.push('\n');
        }
        s
    }
}

/// Outcome of one test on one simulated sample.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimOutcome {
    pub observed: f64,
    pub reject: bool,
}

/// Bootstrap every requested test on `ds`; LR and Wald tests with the same
/// first stage share one set of replicates.
pub fn bootstrap_tests(
    ds: &Dataset,
    cfg: &ExperimentConfig,
    boot: &BootstrapConfig,
    tests: &[TestKind],
) -> Result<Vec<BootstrapResult>> {
    let grid = build_grid(ds.q().as_slice(), cfg.trim)?;
    let mut tsls: Vec<(FirstStageMode, crate::bootstrap::TslsBootstrap)> = Vec::new();
    let mut out = Vec::with_capacity(tests.len());
    for &kind in tests {
        let r = match kind {
            TestKind::GmmWaldCH => bootstrap_ch(ds, &grid, boot)?,
            TestKind::GmmWaldMix => bootstrap_gmm_null(ds, &grid, boot, ResidualSource::PerGamma)?,
            TestKind::GmmWaldBR => bootstrap_gmm_null(ds, &grid, boot, ResidualSource::FullSampleNull)?,
            TestKind::TslsLR(m) | TestKind::TslsWald(m) => {
                let pos = match tsls.iter().position(|(k, _)| *k == m) {
                    Some(p) => p,
                    None => {
                        let fs_grid = build_grid(ds.q().as_slice(), cfg.fs_trim)?;
                        let fs = fit_first_stage(ds, m, &fs_grid)?;
                        tsls.push((m, bootstrap_2sls(ds, &grid, &fs, boot)?));
                        tsls.len() - 1
                    }
                };
                let b = &tsls[pos].1;
                if matches!(kind, TestKind::TslsLR(_)) {
                    b.lr.clone()
                } else {
                    b.wald.clone()
                }
            }
        };
        out.push(r);
    }
    Ok(out)
}

/// Sample statistic of `kind` on `ds`, without bootstrap.
pub fn observed_statistic(ds: &Dataset, cfg: &ExperimentConfig, kind: TestKind) -> Result<f64> {
    let grid = build_grid(ds.q().as_slice(), cfg.trim)?;
    let mode = cfg.dgp.error_case.variance_mode();
    match kind {
        TestKind::GmmWaldCH | TestKind::GmmWaldMix => Ok(wg_sequence(ds, &grid, ResidualSource::PerGamma, mode)?.sup),
        TestKind::GmmWaldBR => Ok(wg_sequence(ds, &grid, ResidualSource::FullSampleNull, mode)?.sup),
        TestKind::TslsLR(m) | TestKind::TslsWald(m) => {
            let fs_grid = build_grid(ds.q().as_slice(), cfg.fs_trim)?;
            let fs = fit_first_stage(ds, m, &fs_grid)?;
            let (lr, w) = tsls_sequences(ds, &grid, &fs, mode)?;
            Ok(if matches!(kind, TestKind::TslsLR(_)) { lr.sup } else { w.sup })
        }
    }
}

fn check_failures(results: &[Result<Vec<SimOutcome>>], n_sim: usize) -> Result<usize> {
    let failed = results.iter().filter(|r| r.is_err()).count();
    if failed * 100 > n_sim {
        let first = results.iter().find_map(|r| r.as_ref().err()).map(|e| e.to_string()).unwrap_or_default();
        return Err(Error::TooManyFailures { failed, total: n_sim, first });
    }
    Ok(failed)
}

/// Per-simulation outcomes for every test, sharing one dataset per simulation.
pub fn simulate_outcomes(cfg: &ExperimentConfig, tests: &[TestKind]) -> Result<(Vec<Vec<SimOutcome>>, usize)> {
    let results: Vec<Result<Vec<SimOutcome>>> = (0..cfg.n_sim)
        .into_par_iter()
        .map(|s| {
            let ds = generate(&cfg.dgp, cfg.data_seed(s))?;
            let rs = bootstrap_tests(&ds, cfg, &cfg.boot_config(s), tests)?;
            Ok(rs.iter().map(|r| SimOutcome { observed: r.observed, reject: r.reject }).collect())
        })
        .collect();
    let failed = check_failures(&results, cfg.n_sim)?;
    Ok((results.into_iter().filter_map(|r| r.ok()).collect(), failed))
}

/// Rejection frequencies of several tests on the design of `cfg`.
pub fn rejection_frequencies(cfg: &ExperimentConfig, tests: &[TestKind]) -> Result<Vec<RejectionCell>> {
    if cfg.n_sim == 0 {
        return Err(Error::InvalidInput("at least one simulation is required".into()));
    }
    let (outcomes, failures) = simulate_outcomes(cfg, tests)?;
    let n = outcomes.len() as f64;
    Ok(tests
        .iter()
        .enumerate()
        .map(|(k, &test)| {
            let p = outcomes.iter().filter(|o| o[k].reject).count() as f64 / n;
            RejectionCell {
                case: cfg.dgp.error_case,
                t: cfg.dgp.t,
                delta_pi: cfg.dgp.delta_pi,
                delta_x: cfg.dgp.delta_x,
                test,
                rejection: p,
                mc_se: (p * (1.0 - p) / n).sqrt(),
                n_sim: outcomes.len(),
                failures,
            }
        })
        .collect())
}

pub fn rejection_frequency(cfg: &ExperimentConfig) -> Result<RejectionCell> {
    Ok(rejection_frequencies(cfg, &[cfg.test])?.remove(0))
}

/// Run every cell, sharing simulated datasets between cells that differ only
/// in the test. Rows are sorted by `(case, T, δΠ, test)`.
pub fn run_table(spec: &[ExperimentConfig]) -> Result<RejectionTable> {
    let mut groups: Vec<(ExperimentConfig, Vec<TestKind>)> = Vec::new();
    for c in spec {
        match groups.iter_mut().find(|(g, _)| g.same_design(c)) {
            Some((_, tests)) => {
                if !tests.contains(&c.test) {
                    tests.push(c.test);
                }
            }
            None => groups.push((*c, vec![c.test])),
        }
    }
    let mut rows = Vec::new();
    for (cfg, tests) in &groups {
        rows.extend(rejection_frequencies(cfg, tests)?);
    }
    rows.sort_by(|a, b| {
        a.case.cmp(&b.case).then(a.t.cmp(&b.t)).then(a.delta_pi.total_cmp(&b.delta_pi)).then(a.test.cmp(&b.test))
    });
    Ok(RejectionTable { rows })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PowerPoint {
    pub delta_x: f64,
    pub t: usize,
    pub test: TestKind,
    pub critical_value: f64,
    pub power: f64,
}

pub fn power_csv(points: &[PowerPoint]) -> String {
    let mut s = String::from("delta_x,T,test,power\n");
    for p in points {
        let _ = writeln!(s, "{},{},{},{}", p.delta_x, p.t, p.test.label(), p.power);
    }
    s
}

fn observed_matrix(cfg: &ExperimentConfig, tests: &[TestKind]) -> Result<Vec<Vec<f64>>> {
    let results: Vec<Result<Vec<SimOutcome>>> = (0..cfg.n_sim)
        .into_par_iter()
        .map(|s| {
            let ds = generate(&cfg.dgp, cfg.data_seed(s))?;
            tests
                .iter()
                .map(|&k| observed_statistic(&ds, cfg, k).map(|v| SimOutcome { observed: v, reject: false }))
                .collect()
        })
        .collect();
    check_failures(&results, cfg.n_sim)?;
    Ok(results.into_iter().filter_map(|r| r.ok()).map(|o| o.iter().map(|x| x.observed).collect()).collect())
}

/// Size-adjusted power: the critical value is the empirical `1−α` quantile
/// of the statistic across null simulations (same order-statistic convention
/// as the bootstrap), and power is the share of alternative simulations
/// strictly above it.
pub fn size_adjusted_power(
    alt: &ExperimentConfig,
    null: &ExperimentConfig,
    tests: &[TestKind],
) -> Result<Vec<PowerPoint>> {
    let null_design = DgpConfig { delta_x: alt.dgp.delta_x, ..null.dgp };
    if null.dgp.delta_x != 0.0 || null_design != alt.dgp {
        return Err(Error::InvalidInput("null design must match the alternative except for delta_x = 0".into()));
    }
    let n0 = observed_matrix(null, tests)?;
    let n1 = observed_matrix(alt, tests)?;
    Ok(tests
        .iter()
        .enumerate()
        .map(|(k, &test)| {
            let draws: Vec<f64> = n0.iter().map(|o| o[k]).collect();
            let cv = crate::bootstrap::summarize(&draws, 0.0, null.alpha).critical_value;
            let power = n1.iter().filter(|o| o[k] > cv).count() as f64 / n1.len() as f64;
            PowerPoint { delta_x: alt.dgp.delta_x, t: alt.dgp.t, test, critical_value: cv, power }
        })
        .collect())
}

pub const SAMPLE_SIZES: [usize; 4] = [100, 250, 500, 1000];
pub const DELTA_PI: [f64; 4] = [0.0, -0.5, 0.5, 1.0];

/// Cells of rejection-frequency table layouts 1 to 4.
///
/// Tables 1 and 3 cover cases A to C with normal multipliers (i.i.d. Gaussian
/// residuals in case A); tables 2 and 4 cover cases B and C with Mammen
/// multipliers. Tables 1 and 2 hold the GMM variants, 3 and 4 the 2SLS tests
/// with the first stage matching the design.
pub fn table_spec(table: usize, n_sim: usize, b: usize, seed_bank: u64) -> Result<Vec<ExperimentConfig>> {
    let (cases, wild, gmm): (&[ErrorCase], Multiplier, bool) = match table {
        1 => (&[ErrorCase::A, ErrorCase::B, ErrorCase::C], Multiplier::StdNormal, true),
        2 => (&[ErrorCase::B, ErrorCase::C], Multiplier::Mammen, true),
        3 => (&[ErrorCase::A, ErrorCase::B, ErrorCase::C], Multiplier::StdNormal, false),
        4 => (&[ErrorCase::B, ErrorCase::C], Multiplier::Mammen, false),
        _ => return Err(Error::InvalidInput(format!("no table {table}; expected 1 to 4"))),
    };
    let mut out = Vec::new();
    for &case in cases {
        let mult = if case == ErrorCase::A { Multiplier::IidGaussian } else { wild };
        for &t in &SAMPLE_SIZES {
            for &dp in &DELTA_PI {
                let dgp = DgpConfig::new(t, case).with_delta_pi(dp);
                let fsm = dgp.matched_first_stage();
                let tests: Vec<TestKind> = if gmm {
                    vec![TestKind::GmmWaldCH, TestKind::GmmWaldMix, TestKind::GmmWaldBR]
                } else {
                    vec![TestKind::TslsLR(fsm), TestKind::TslsWald(fsm)]
                };
                for test in tests {
                    out.push(ExperimentConfig::new(dgp, test, mult, seed_bank).with_sizes(n_sim, b));
                }
            }
        }
    }
    Ok(out)
}
