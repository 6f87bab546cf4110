//! Grids, partitions and dataset validation.

use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use threshold_iv::data::band_order_statistics;
use threshold_iv::{build_grid, partition, Dataset, Error};

#[test]
fn constant_q_is_degenerate() {
    assert_eq!(build_grid(&[1.0; 4], 0.15), Err(Error::DegenerateThresholdVariable));
}

#[test]
fn zero_trim_keeps_every_value() {
    let g = build_grid(&[3.0, 1.0, 2.0, 5.0, 4.0], 0.0).unwrap();
    assert_eq!(g.values(), &[1.0, 2.0, 3.0, 4.0, 5.0]);
}

/// Band filter recomputed from the order-statistic definition with exact
/// integer arithmetic: lower index ⌈εT⌉, upper index ⌊(1−ε)T⌋.
fn brute_force_grid(q: &[f64], trim_pct: usize) -> Vec<f64> {
    let t = q.len();
    let mut s = q.to_vec();
    s.sort_by(f64::total_cmp);
    let lo = (trim_pct * t).div_ceil(100).max(1);
    let hi = ((100 - trim_pct) * t) / 100;
    let mut out: Vec<f64> = q.iter().copied().filter(|&v| v >= s[lo - 1] && v <= s[hi - 1]).collect();
    out.sort_by(f64::total_cmp);
    out.dedup();
    out
}

#[test]
fn integer_grid_matches_brute_force() {
    let q: Vec<f64> = (1..=20).map(f64::from).collect();
    let g = build_grid(&q, 0.15).unwrap();
    assert_eq!(g.values(), brute_force_grid(&q, 15).as_slice());
    // ⌈3⌉ = 3 and ⌊17⌋ = 17.
    assert_eq!(g.values().first(), Some(&3.0));
    assert_eq!(g.values().last(), Some(&17.0));
}

#[test]
fn trim_outside_range_is_rejected() {
    for trim in [-0.1, 0.5, 0.7, f64::NAN] {
        assert!(matches!(build_grid(&[1.0, 2.0, 3.0], trim), Err(Error::InvalidInput(_))));
    }
}

#[test]
fn partition_examples() {
    let q = [1.0, 2.0, 3.0, 4.0];
    let p = partition(&q, 2.5, 1).unwrap();
    assert_eq!((p.n_low, p.n_high), (2, 2));
    assert!(matches!(partition(&q, 0.0, 1), Err(Error::RegimeTooSmall { n_low: 0, .. })));
    let p = partition(&[1.0, 2.0, 2.0, 3.0], 2.0, 1).unwrap();
    assert_eq!(p.n_low, 3);
    assert_eq!(p.mask_low, vec![true, true, true, false]);
    assert!(partition(&q, f64::INFINITY, 0).is_err());
}

fn tiny(t: usize) -> (DVector<f64>, DMatrix<f64>, DMatrix<f64>, DMatrix<f64>, DVector<f64>) {
    let y = DVector::from_fn(t, |i, _| i as f64);
    let x = DMatrix::from_fn(t, 1, |i, _| (i * i) as f64);
    let z1 = DMatrix::from_element(t, 1, 1.0);
    let z = DMatrix::from_fn(t, 2, |i, j| if j == 0 { 1.0 } else { (i as f64).sin() });
    let q = DVector::from_fn(t, |i, _| i as f64);
    (y, x, z1, z, q)
}

#[test]
fn dataset_validation() {
    let (y, x, z1, z, q) = tiny(6);
    assert!(Dataset::new(y.clone(), x.clone(), z1.clone(), z.clone(), q.clone()).is_ok());
    // Order condition: no excluded instrument.
    assert!(Dataset::new(y.clone(), x.clone(), z1.clone(), z1.clone(), q.clone()).is_err());
    // z must start with z1.
    let mut bad = z.clone();
    bad[(2, 0)] = 2.0;
    assert!(Dataset::new(y.clone(), x.clone(), z1.clone(), bad, q.clone()).is_err());
    let mut yn = y.clone();
    yn[0] = f64::NAN;
    assert!(Dataset::new(yn, x.clone(), z1.clone(), z.clone(), q.clone()).is_err());
    assert!(Dataset::new(y.clone(), DMatrix::zeros(6, 0), z1.clone(), z.clone(), q.clone()).is_err());
    assert!(Dataset::new(y.rows(0, 5).clone_owned(), x, z1, z, q).is_err());
}

#[test]
fn from_excluded_prepends_z1() {
    let (y, x, z1, z, q) = tiny(6);
    let ds = Dataset::from_excluded(y, x, z1, z.columns(1, 1).clone_owned(), q).unwrap();
    assert_eq!(ds.z(), &z);
    assert_eq!(ds.qz(), 2);
    assert_eq!(ds.default_n_min(), 3);
}

proptest! {
    #[test]
    fn grid_properties(q in prop::collection::vec(-200i32..200, 10..80), e1 in 0usize..45, de in 0usize..5) {
        let q: Vec<f64> = q.into_iter().map(|v| v as f64 / 4.0).collect();
        let e2 = (e1 + de).min(49);
        let (t1, t2) = (e1 as f64 / 100.0, e2 as f64 / 100.0);
        if q.iter().all(|&v| v == q[0]) {
            prop_assert_eq!(build_grid(&q, t1), Err(Error::DegenerateThresholdVariable));
            return Ok(());
        }
        let check = |e: usize, r: Result<threshold_iv::ThresholdGrid, Error>| -> Result<Option<Vec<f64>>, TestCaseError> {
            let (lo, hi) = band_order_statistics(q.len(), e as f64 / 100.0);
            match r {
                Err(Error::EmptyGrid) => {
                    prop_assert!(hi < lo);
                    Ok(None)
                }
                Ok(g) => {
                    prop_assert!(g.values().windows(2).all(|w| w[0] < w[1]));
                    prop_assert!(g.values().iter().all(|v| q.contains(v)));
                    let expect = brute_force_grid(&q, e);
                    prop_assert_eq!(g.values(), expect.as_slice());
                    // Both regimes hold at least ⌊εT⌋ − 1 observations. Ties at
                    // a band edge can empty a regime, so only distinct samples
                    // are checked.
                    let t = q.len();
                    let floor = (e * t / 100).saturating_sub(1);
                    let distinct = brute_force_grid(&q, 0).len() == t;
                    for &v in g.values().iter().filter(|_| distinct) {
                        let n_lo = q.iter().filter(|&&u| u <= v).count();
                        prop_assert!(n_lo >= floor && t - n_lo >= floor);
                    }
                    Ok(Some(g.values().to_vec()))
                }
                Err(other) => Err(TestCaseError::fail(format!("{other}"))),
            }
        };
        let g1 = check(e1, build_grid(&q, t1))?;
        let g2 = check(e2, build_grid(&q, t2))?;
        if let (Some(g1), Some(g2)) = (g1, g2) {
            prop_assert!(g2.iter().all(|v| g1.contains(v)));
        }
    }

    #[test]
    fn band_order_statistics_are_ordered(t in 1usize..500, e in 0usize..50) {
        let (lo, hi) = band_order_statistics(t, e as f64 / 100.0);
        prop_assert!(1 <= lo && hi <= t);
        prop_assert_eq!(lo, (e * t).div_ceil(100).max(1));
        prop_assert_eq!(hi, (((100 - e) * t) / 100).max(1));
    }

    #[test]
    fn partition_is_row_order_free(q in prop::collection::vec(0i32..20, 4..40), g in 0i32..20, seed in any::<u64>()) {
        let q: Vec<f64> = q.into_iter().map(f64::from).collect();
        let g = g as f64 + 0.5;
        let mut perm: Vec<usize> = (0..q.len()).collect();
        let mut s = seed;
        for i in (1..perm.len()).rev() {
            s = s.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
            perm.swap(i, (s >> 33) as usize % (i + 1));
        }
        let qp: Vec<f64> = perm.iter().map(|&i| q[i]).collect();
        match (partition(&q, g, 0), partition(&qp, g, 0)) {
            (Ok(a), Ok(b)) => {
                prop_assert_eq!((a.n_low, a.n_high), (b.n_low, b.n_high));
                prop_assert_eq!(a.n_low + a.n_high, q.len());
                for (i, &pi) in perm.iter().enumerate() {
                    prop_assert_eq!(b.mask_low[i], a.mask_low[pi]);
                    prop_assert_eq!(a.mask_low[pi], q[pi] <= g);
                }
                prop_assert_eq!(partition(&q, g, 0).unwrap(), a);
            }
            (a, b) => prop_assert!(false, "{:?} {:?}", a, b),
        }
    }
}
