//! Sup-statistic sequences: examples, invariances and cross-path identities.

mod common;

use common::*;
use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use threshold_iv::estimators::{
    fit_first_stage, fit_first_stage_linear, fit_first_stage_threshold, gmm_first_step, gmm_full_first_step, tsls_split,
};
use threshold_iv::montecarlo::{generate, DgpConfig, ErrorCase};
use threshold_iv::statistics::{
    first_stage_linearity_tests, lr_sequence, tsls_sequences, w_sequence, wg_sequence, wg_sequence_with_residuals,
};
use threshold_iv::{
    build_grid, partition, Dataset, FirstStageMode, FirstStageSpec, ResidualSource, SequenceResult, ThresholdGrid,
    VarianceMode,
};

const MODES: [VarianceMode; 2] = [VarianceMode::Robust, VarianceMode::Homoskedastic];

fn grid(ds: &Dataset, trim: f64) -> ThresholdGrid {
    build_grid(ds.q().as_slice(), trim).unwrap()
}

fn rebuild(ds: &Dataset, y: DVector<f64>, x: DMatrix<f64>, z: DMatrix<f64>, q: DVector<f64>) -> Dataset {
    let z1 = z.columns(0, ds.p2()).clone_owned();
    Dataset::new(y, x, z1, z, q).unwrap()
}

/// Stacks `ds` on a copy of itself with the copy's `q` shifted above every
/// original value, so the cut at the original maximum splits two identical
/// samples.
fn duplicated(ds: &Dataset) -> (Dataset, f64) {
    let t = ds.t();
    let shift = ds.q().max() - ds.q().min() + 1.0;
    let stack_m = |m: &DMatrix<f64>| DMatrix::from_fn(2 * t, m.ncols(), |i, j| m[(i % t, j)]);
    let y = DVector::from_fn(2 * t, |i, _| ds.y()[i % t]);
    let q = DVector::from_fn(2 * t, |i, _| ds.q()[i % t] + if i >= t { shift } else { 0.0 });
    (rebuild(ds, y, stack_m(ds.x()), stack_m(ds.z()), q), ds.q().max())
}

fn value_at(seq: &SequenceResult, gamma: f64) -> f64 {
    let i = seq.gammas.iter().position(|&g| g == gamma).expect("candidate evaluated");
    seq.values[i]
}

/// Every sequence the library computes for one dataset, labelled.
fn all_sequences(ds: &Dataset) -> Vec<(String, SequenceResult)> {
    let g = grid(ds, 0.2);
    let mut out = Vec::new();
    for mode in MODES {
        for src in [ResidualSource::PerGamma, ResidualSource::FullSampleNull] {
            out.push((format!("wg {src:?} {mode:?}"), wg_sequence(ds, &g, src, mode).unwrap()));
        }
    }
    for fsm in [FirstStageMode::Linear, FirstStageMode::Threshold] {
        let fs = fit_first_stage(ds, fsm, &g).unwrap();
        out.push((format!("lr {fsm:?}"), lr_sequence(ds, &g, &fs).unwrap()));
        for mode in MODES {
            out.push((format!("wald {fsm:?} {mode:?}"), w_sequence(ds, &g, &fs, mode).unwrap()));
        }
    }
    let (lr, w) = first_stage_linearity_tests(ds, &g).unwrap();
    out.push(("first-stage lr".into(), lr));
    out.push(("first-stage w".into(), w));
    out
}

fn assert_same_sequences(
    a: &[(String, SequenceResult)],
    b: &[(String, SequenceResult)],
    tol: f64,
) -> Result<(), TestCaseError> {
    for ((name, sa), (_, sb)) in a.iter().zip(b) {
        prop_assert_eq!(&sa.gammas, &sb.gammas, "{}", name);
        for (&va, &vb) in sa.values.iter().zip(&sb.values) {
            prop_assert!(rel_err(va, vb) <= tol, "{}: {} vs {}", name, va, vb);
        }
        prop_assert_eq!(sa.argmax_gamma, sb.argmax_gamma, "{}", name);
    }
    Ok(())
}

#[test]
fn duplicated_regimes_give_zero() {
    let (ds, cut) = duplicated(&random_instance(5, 20, 1, 1, 1, true));
    let g = grid(&ds, 0.15);
    assert!(g.values().contains(&cut));
    for mode in MODES {
        for src in [ResidualSource::PerGamma, ResidualSource::FullSampleNull] {
            let v = value_at(&wg_sequence(&ds, &g, src, mode).unwrap(), cut);
            assert!(v.abs() < 1e-12, "wg {src:?} {mode:?}: {v}");
        }
    }
    let fs = fit_first_stage_linear(&ds).unwrap();
    assert_eq!(value_at(&lr_sequence(&ds, &g, &fs).unwrap(), cut), 0.0);
    let (lr, w) = tsls_sequences(&ds, &g, &fs, VarianceMode::Robust).unwrap();
    assert_eq!(value_at(&lr, cut), 0.0);
    assert!(value_at(&w, cut) < 1e-12, "{}", value_at(&w, cut));
    let part = partition(ds.q().as_slice(), cut, 1).unwrap();
    let split = tsls_split(&ds, &fs, &part).unwrap();
    assert!((&split.theta_low - &split.theta_high).norm() < 1e-10 * split.theta_low.norm());
}

#[test]
fn sup_and_argmax_conventions() {
    for seed in 0..10 {
        let ds = random_instance(300 + seed, 40, 1 + seed as usize % 2, 1, 1, seed % 2 == 0);
        for (name, s) in all_sequences(&ds) {
            let max = s.values.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(s.sup, max, "{name}");
            let first = s.values.iter().position(|&v| v == max).unwrap();
            assert_eq!(s.argmax_gamma, s.gammas[first], "{name}");
            assert_eq!(s.gammas.len() + s.skipped.len(), s.grid.len(), "{name}");
            assert!(s.values.iter().all(|&v| v >= 0.0), "{name}");
        }
    }
}

/// Noiseless linear first stage: every candidate ties at 0, so the argmax is
/// the smallest grid value.
#[test]
fn noiseless_linear_first_stage_has_zero_lr() {
    let base = random_instance(11, 40, 2, 1, 1, false);
    let pi = DMatrix::from_fn(base.qz(), 2, |k, j| 0.3 * (k as f64 + 1.0) - 0.7 * j as f64);
    let x = base.z() * &pi;
    let ds = rebuild(&base, base.y().clone(), x, base.z().clone(), base.q().clone());
    let g = grid(&ds, 0.15);
    let (lr, _) = first_stage_linearity_tests(&ds, &g).unwrap();
    assert!(lr.skipped.is_empty());
    assert!(lr.values.iter().all(|&v| v == 0.0), "{:?}", lr.values);
    assert_eq!(lr.argmax_gamma, g.values()[0]);
}

/// Noiseless threshold first stage with the break on the grid: SSR₁ vanishes
/// there only, so the sup sits at the break and is infinite.
#[test]
fn noiseless_threshold_first_stage_peaks_at_break() {
    let base = random_instance(12, 40, 1, 1, 1, false);
    let g = grid(&base, 0.15);
    let rho = g.values()[g.len() / 2];
    let x = DMatrix::from_fn(base.t(), 1, |s, _| {
        let z = base.z();
        if base.q()[s] <= rho {
            1.0 + 2.0 * z[(s, 1)] - z[(s, 2)]
        } else {
            -0.5 - z[(s, 1)] + 0.4 * z[(s, 2)]
        }
    });
    let ds = rebuild(&base, base.y().clone(), x, base.z().clone(), base.q().clone());
    let (lr, _) = first_stage_linearity_tests(&ds, &g).unwrap();
    assert_eq!(lr.argmax_gamma, rho);
    assert_eq!(lr.sup, f64::INFINITY);
    assert_eq!(lr.values.iter().filter(|v| v.is_infinite()).count(), 1);
    let fs = fit_first_stage_threshold(&ds, &g).unwrap();
    assert_eq!(fs.rho(), Some(rho));
}

/// First-stage OLS tests recomputed row by row: per-regime least squares of
/// every column of `x` on `z`, the trace SSR, and `vec(Π̂₁ − Π̂₂)` with the
/// Kronecker robust variance from the linear-fit residuals.
fn oracle_first_stage(ds: &Dataset, gamma: f64) -> (f64, f64) {
    let (t, qz, p1) = (ds.t(), ds.qz(), ds.p1());
    let tf = t as f64;
    let (z, x) = (ds.z(), ds.x());
    let ols = |idx: &[usize]| {
        let zi = rows_of(z, idx);
        inv(&(zi.transpose() * &zi)) * zi.transpose() * rows_of(x, idx)
    };
    let all: Vec<usize> = (0..t).collect();
    let pi = ols(&all);
    let u = x - z * &pi;
    let ssr0 = u.norm_squared();
    let (lo, hi) = split_idx(ds.q(), gamma);
    let mut ssr1 = 0.0;
    let mut d = DVector::zeros(qz * p1);
    let mut v = DMatrix::zeros(qz * p1, qz * p1);
    for (sign, idx) in [(1.0, &lo), (-1.0, &hi)] {
        let pii = ols(idx);
        for &s in idx.iter() {
            for j in 0..p1 {
                let r = x[(s, j)] - (z.row(s) * pii.column(j))[(0, 0)];
                ssr1 += r * r;
            }
        }
        for j in 0..p1 {
            for k in 0..qz {
                d[j * qz + k] += sign * pii[(k, j)];
            }
        }
        let mi = inv(&(gram(z, idx, |_| 1.0) / tf));
        let mut om = DMatrix::zeros(qz * p1, qz * p1);
        for &s in idx.iter() {
            let kr = DVector::from_fn(qz * p1, |r, _| u[(s, r / qz)] * z[(s, r % qz)]);
            om += &kr * kr.transpose() / tf;
        }
        let gi = DMatrix::<f64>::identity(p1, p1).kronecker(&mi);
        v += &gi * om * &gi;
    }
    let dof = tf - 2.0 * qz as f64;
    ((ssr0 - ssr1) / (ssr1 / dof), tf * d.dot(&v.lu().solve(&d).unwrap()))
}

#[test]
fn first_stage_tests_match_row_oracle() {
    for seed in 0..20 {
        let p1 = 1 + seed as usize % 2;
        let ds = random_instance(400 + seed, 35, p1, 1, seed as usize % 2, seed % 3 != 0);
        let g = grid(&ds, 0.25);
        let (lr, w) = first_stage_linearity_tests(&ds, &g).unwrap();
        assert_eq!(lr.gammas, w.gammas);
        for (i, &gm) in lr.gammas.iter().enumerate() {
            let (olr, ow) = oracle_first_stage(&ds, gm);
            assert!(rel_err(lr.values[i], olr) < 1e-8, "seed {seed} γ {gm}: {} vs {olr}", lr.values[i]);
            assert!(rel_err(w.values[i], ow) < 1e-8, "seed {seed} γ {gm}: {} vs {ow}", w.values[i]);
        }
    }
}

/// With one endogenous column, the first-stage LR is the 2SLS LR of a model
/// whose dependent variable is `x` and whose regressors are the instruments
/// themselves, so that `x̂ = x` exactly.
#[test]
fn first_stage_lr_is_tsls_lr_with_exact_projection() {
    for seed in 0..10 {
        let ds = random_instance(500 + seed, 36, 1, 1, 1, seed % 2 == 0);
        let g = grid(&ds, 0.2);
        let (fs_lr, _) = first_stage_linearity_tests(&ds, &g).unwrap();
        let excl = ds.z().columns(ds.p2(), ds.qz() - ds.p2()).clone_owned();
        let alt = Dataset::new(ds.x().column(0).clone_owned(), excl, ds.z1().clone(), ds.z().clone(), ds.q().clone())
            .unwrap();
        let fs = fit_first_stage_linear(&alt).unwrap();
        let lr = lr_sequence(&alt, &g, &fs).unwrap();
        assert_eq!(lr.gammas, fs_lr.gammas);
        for (a, b) in lr.values.iter().zip(&fs_lr.values) {
            assert!(rel_err(*a, *b) < 1e-8, "seed {seed}: {a} vs {b}");
        }
    }
}

#[test]
fn equal_slope_threshold_first_stage_matches_linear() {
    for seed in 0..8 {
        let ds = random_instance(600 + seed, 40, 1 + seed as usize % 2, 1, 1, false);
        let g = grid(&ds, 0.2);
        let lin = fit_first_stage_linear(&ds).unwrap();
        let tfs = forced_equal_slopes(&ds, ds.q().max());
        assert_eq!(tfs.mode(), FirstStageMode::Threshold);
        assert_eq!(lr_sequence(&ds, &g, &lin).unwrap(), lr_sequence(&ds, &g, &tfs).unwrap());
        for mode in MODES {
            let a = w_sequence(&ds, &g, &lin, mode).unwrap();
            let b = w_sequence(&ds, &g, &tfs, mode).unwrap();
            assert_eq!(a.gammas, b.gammas);
            for (x, y) in a.values.iter().zip(&b.values) {
                assert!(rel_err(*x, *y) < 1e-10, "seed {seed} {mode:?}: {x} vs {y}");
            }
        }
    }
}

#[test]
fn just_identified_two_step_equals_one_step() {
    for seed in 0..5 {
        let ds = generate(&DgpConfig::new(120, ErrorCase::C), 77 + seed).unwrap();
        assert_eq!(ds.qz(), ds.p());
        let g = grid(&ds, 0.15);
        let ch = wg_sequence(&ds, &g, ResidualSource::PerGamma, VarianceMode::Robust).unwrap();
        let br = wg_sequence(&ds, &g, ResidualSource::FullSampleNull, VarianceMode::Robust).unwrap();
        let null = gmm_full_first_step(&ds).unwrap().residuals;
        for (i, &gm) in ch.gammas.iter().enumerate() {
            let part = partition(ds.q().as_slice(), gm, ds.default_n_min()).unwrap();
            let f = gmm_first_step(&ds, &part).unwrap();
            let th = [&f.theta_low, &f.theta_high];
            let o_ch = one_step_wald(&ds, gm, &f.residuals, th);
            let o_br = one_step_wald(&ds, gm, &null, th);
            assert!(rel_err(ch.values[i], o_ch) < 1e-8, "seed {seed} γ {gm}: {} vs {o_ch}", ch.values[i]);
            assert!(rel_err(br.values[i], o_br) < 1e-8, "seed {seed} γ {gm}: {} vs {o_br}", br.values[i]);
        }
    }
}

/// The CH and BR sequences differ only through the residuals behind the
/// weight: injecting each variant's residuals reproduces it, and injecting
/// the null residuals into the per-γ path gives BR.
#[test]
fn ch_and_br_coincide_under_identical_residuals() {
    for seed in 0..6 {
        let ds = random_instance(700 + seed, 40, 1, 1 + seed as usize % 2, 1, false);
        let g = grid(&ds, 0.2);
        let ch = wg_sequence(&ds, &g, ResidualSource::PerGamma, VarianceMode::Robust).unwrap();
        let br = wg_sequence(&ds, &g, ResidualSource::FullSampleNull, VarianceMode::Robust).unwrap();
        let n_min = ds.default_n_min();
        let per_gamma = |_: usize, gm: f64| {
            let part = partition(ds.q().as_slice(), gm, n_min).unwrap();
            gmm_first_step(&ds, &part).unwrap().residuals
        };
        let null = gmm_full_first_step(&ds).unwrap().residuals;
        let inj_ch = wg_sequence_with_residuals(&ds, &g, per_gamma).unwrap();
        let inj_br = wg_sequence_with_residuals(&ds, &g, |_, _| null.clone()).unwrap();
        for (i, _) in ch.gammas.iter().enumerate() {
            assert!(rel_err(inj_ch.values[i], ch.values[i]) < 1e-10, "seed {seed}");
            assert!(rel_err(inj_br.values[i], br.values[i]) < 1e-10, "seed {seed}");
        }
        assert!(ch.values.iter().zip(&br.values).any(|(a, b)| rel_err(*a, *b) > 1e-6));
    }
}

#[test]
fn lr_argmax_minimizes_split_ssr() {
    for seed in 0..10 {
        let ds = random_instance(800 + seed, 40, 1 + seed as usize % 2, 1, 1, seed % 2 == 1);
        let g = grid(&ds, 0.2);
        for fsm in [FirstStageMode::Linear, FirstStageMode::Threshold] {
            let fs: FirstStageSpec = fit_first_stage(&ds, fsm, &g).unwrap();
            let lr = lr_sequence(&ds, &g, &fs).unwrap();
            let mut best = (f64::INFINITY, f64::NAN);
            for &gm in &lr.gammas {
                let part = partition(ds.q().as_slice(), gm, ds.default_n_min()).unwrap();
                let ssr1 = tsls_split(&ds, &fs, &part).unwrap().residuals.norm_squared();
                if ssr1 < best.0 {
                    best = (ssr1, gm);
                }
            }
            assert_eq!(lr.argmax_gamma, best.1, "seed {seed} {fsm:?}");
        }
    }
}

fn permuted(ds: &Dataset, perm: &[usize]) -> Dataset {
    let pm = |m: &DMatrix<f64>| DMatrix::from_fn(m.nrows(), m.ncols(), |i, j| m[(perm[i], j)]);
    let pv = |v: &DVector<f64>| DVector::from_fn(v.len(), |i, _| v[perm[i]]);
    rebuild(ds, pv(ds.y()), pm(ds.x()), pm(ds.z()), pv(ds.q()))
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn sequences_are_scale_invariant(seed in 0u64..10_000, cy in 0.1f64..10.0, cz in 0.1f64..10.0, p1 in 1usize..3, brk in any::<bool>()) {
        let ds = random_instance(seed, 40, p1, 1, 1, brk);
        let base = all_sequences(&ds);
        for (y, z) in [(2.0, 1.0), (1.0, 3.0), (cy, cz)] {
            let sc = rebuild(&ds, ds.y() * y, ds.x().clone(), ds.z() * z, ds.q().clone());
            assert_same_sequences(&base, &all_sequences(&sc), 1e-8)?;
        }
    }

    #[test]
    fn lr_is_nonnegative(seed in 0u64..10_000, t in 20usize..60, p1 in 1usize..3, extra in 0usize..2, brk in any::<bool>()) {
        let ds = random_instance(seed, t, p1, 1, extra, brk);
        let g = grid(&ds, 0.2);
        for fsm in [FirstStageMode::Linear, FirstStageMode::Threshold] {
            let fs = fit_first_stage(&ds, fsm, &g).unwrap();
            let lr = lr_sequence(&ds, &g, &fs).unwrap();
            prop_assert!(lr.values.iter().all(|&v| v >= 0.0), "{:?}", lr.values);
        }
        let (lr, _) = first_stage_linearity_tests(&ds, &g).unwrap();
        prop_assert!(lr.values.iter().all(|&v| v >= 0.0));
    }

    #[test]
    fn row_order_does_not_matter(seed in 0u64..10_000, shuffle in any::<u64>()) {
        let ds = random_instance(seed, 36, 1, 1, 1, seed % 2 == 0);
        let mut perm: Vec<usize> = (0..ds.t()).collect();
        let mut s = shuffle;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        assert_same_sequences(&all_sequences(&ds), &all_sequences(&permuted(&ds, &perm)), 1e-8)?;
    }
}
