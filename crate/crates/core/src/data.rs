//! Observed series, candidate threshold grids and regime partitions.

use nalgebra::{DMatrix, DVector};
use serde::Serialize;

use crate::error::{Error, Result};

/// Observed data for `y = w'θ₁ 1[q ≤ γ] + w'θ₂ 1[q > γ] + ε`, `w = (x', z₁')'`.
///
/// `z` holds every instrument and its first `p2` columns are `z1`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    y: DVector<f64>,
    x: DMatrix<f64>,
    z1: DMatrix<f64>,
    z: DMatrix<f64>,
    q: DVector<f64>,
    w: DMatrix<f64>,
}

impl Dataset {
    pub fn new(y: DVector<f64>, x: DMatrix<f64>, z1: DMatrix<f64>, z: DMatrix<f64>, q: DVector<f64>) -> Result<Self> {
        let t = y.len();
        let bad = |m: String| Err(Error::InvalidInput(m));
        if t == 0 {
            return bad("empty sample".into());
        }
        if x.nrows() != t || z1.nrows() != t || z.nrows() != t || q.len() != t {
            return bad(format!(
                "row counts differ: y {t}, x {}, z1 {}, z {}, q {}",
                x.nrows(),
                z1.nrows(),
                z.nrows(),
                q.len()
            ));
        }
        let (p1, p2, qz) = (x.ncols(), z1.ncols(), z.ncols());
        if p1 == 0 {
            return bad("at least one endogenous regressor is required".into());
        }
        if p2 == 0 {
            return bad("at least one exogenous regressor is required".into());
        }
        if qz < p2 || qz - p2 < p1 {
            return bad(format!(
                "order condition fails: {} excluded instruments for {p1} endogenous regressors",
                qz.saturating_sub(p2)
            ));
        }
        if z.columns(0, p2).iter().zip(z1.iter()).any(|(a, b)| a != b) {
            return bad("the leading columns of z must equal z1".into());
        }
        let finite = |s: &[f64]| s.iter().all(|v| v.is_finite());
        if !(finite(y.as_slice()) && finite(x.as_slice()) && finite(z.as_slice()) && finite(q.as_slice())) {
            return bad("non-finite entries".into());
        }
        let mut w = DMatrix::zeros(t, p1 + p2);
        w.columns_mut(0, p1).copy_from(&x);
        w.columns_mut(p1, p2).copy_from(&z1);
        Ok(Dataset { y, x, z1, z, q, w })
    }

    /// Build `z = [z1, excluded]` and validate.
    pub fn from_excluded(
        y: DVector<f64>,
        x: DMatrix<f64>,
        z1: DMatrix<f64>,
        excluded: DMatrix<f64>,
        q: DVector<f64>,
    ) -> Result<Self> {
        if excluded.nrows() != z1.nrows() {
            return Err(Error::InvalidInput("z1 and excluded instruments differ in length".into()));
        }
        let mut z = DMatrix::zeros(z1.nrows(), z1.ncols() + excluded.ncols());
        z.columns_mut(0, z1.ncols()).copy_from(&z1);
        z.columns_mut(z1.ncols(), excluded.ncols()).copy_from(&excluded);
        Dataset::new(y, x, z1, z, q)
    }

    pub fn t(&self) -> usize {
        self.y.len()
    }
    pub fn p1(&self) -> usize {
        self.x.ncols()
    }
    pub fn p2(&self) -> usize {
        self.z1.ncols()
    }
    pub fn p(&self) -> usize {
        self.p1() + self.p2()
    }
    pub fn qz(&self) -> usize {
        self.z.ncols()
    }
    pub fn y(&self) -> &DVector<f64> {
        &self.y
    }
    pub fn x(&self) -> &DMatrix<f64> {
        &self.x
    }
    pub fn z1(&self) -> &DMatrix<f64> {
        &self.z1
    }
    pub fn z(&self) -> &DMatrix<f64> {
        &self.z
    }
    pub fn q(&self) -> &DVector<f64> {
        &self.q
    }
    /// Regressors `w_t = (x_t', z1_t')'` stacked as rows.
    pub fn w(&self) -> &DMatrix<f64> {
        &self.w
    }

    /// Default minimum regime size, `p + 1`.
    pub fn default_n_min(&self) -> usize {
        self.p() + 1
    }

    /// Same regressors and instruments with a new dependent variable.
    pub fn with_y(&self, y: DVector<f64>) -> Result<Self> {
        Dataset::new(y, self.x.clone(), self.z1.clone(), self.z.clone(), self.q.clone())
    }

    /// Same instruments with new `x` and `y`.
    pub fn with_xy(&self, x: DMatrix<f64>, y: DVector<f64>) -> Result<Self> {
        Dataset::new(y, x, self.z1.clone(), self.z.clone(), self.q.clone())
    }

    /// Rows permuted so that row `i` of the result is row `perm[i]` of `self`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        let rows = |m: &DMatrix<f64>| m.select_rows(perm.iter());
        let y = DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.y[i]));
        let q = DVector::from_iterator(perm.len(), perm.iter().map(|&i| self.q[i]));
        Dataset::new(y, rows(&self.x), rows(&self.z1), rows(&self.z), q)
    }
}

/// Sorted candidate thresholds.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ThresholdGrid {
    values: Vec<f64>,
    trim: f64,
}

impl ThresholdGrid {
    pub fn values(&self) -> &[f64] {
        &self.values
    }
    pub fn trim(&self) -> f64 {
        self.trim
    }
    pub fn len(&self) -> usize {
        self.values.len()
    }
    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// Positions of the trimmed band as 1-based order statistics.
///
/// Lower end `⌈εT⌉`, upper end `⌊(1−ε)T⌋`, both clamped to at least 1. A slack
/// of 1e-9 keeps products such as `0.15 · 20` from rounding across an integer.
pub fn band_order_statistics(t: usize, trim: f64) -> (usize, usize) {
    let tf = t as f64;
    let lo = ((trim * tf) - 1e-9).ceil().max(1.0) as usize;
    let hi = (((1.0 - trim) * tf) + 1e-9).floor().max(1.0) as usize;
    (lo, hi.min(t))
}

/// Unique realizations of `q` between the trimmed order statistics.
///
/// `trim = 0` keeps every distinct value.
pub fn build_grid(q: &[f64], trim: f64) -> Result<ThresholdGrid> {
    if !(0.0..0.5).contains(&trim) {
        return Err(Error::InvalidInput(format!("trim must lie in [0, 0.5), got {trim}")));
    }
    if q.is_empty() || q.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput("threshold variable must be non-empty and finite".into()));
    }
    let mut sorted = q.to_vec();
    sorted.sort_by(f64::total_cmp);
    if sorted[0] == sorted[sorted.len() - 1] {
        return Err(Error::DegenerateThresholdVariable);
    }
    let (lo, hi) = band_order_statistics(q.len(), trim);
    if hi < lo {
        return Err(Error::EmptyGrid);
    }
    let (lower, upper) = (sorted[lo - 1], sorted[hi - 1]);
    let mut values: Vec<f64> = sorted.into_iter().filter(|v| *v >= lower && *v <= upper).collect();
    values.dedup();
    if values.is_empty() {
        return Err(Error::EmptyGrid);
    }
    Ok(ThresholdGrid { values, trim })
}

/// A grid candidate excluded from a sequence, with the reason.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SkippedCandidate {
    pub gamma: f64,
    pub reason: String,
}

/// Split of the sample at `gamma`.
#[derive(Debug, Clone, PartialEq)]
pub struct RegimePartition {
    pub gamma: f64,
    pub mask_low: Vec<bool>,
    pub n_low: usize,
    pub n_high: usize,
}

/// Observations with `q ≤ gamma` go to the low regime.
pub fn partition(q: &[f64], gamma: f64, n_min: usize) -> Result<RegimePartition> {
    if !gamma.is_finite() {
        return Err(Error::InvalidInput("gamma must be finite".into()));
    }
    let mask_low: Vec<bool> = q.iter().map(|&v| v <= gamma).collect();
    let n_low = mask_low.iter().filter(|&&b| b).count();
    let n_high = q.len() - n_low;
    if n_low < n_min || n_high < n_min {
        return Err(Error::RegimeTooSmall { gamma, n_low, n_high, n_min });
    }
    Ok(RegimePartition { gamma, mask_low, n_low, n_high })
}

/// Sort order of `q` together with the low-regime size at each candidate.
///
/// Candidate `g` splits the sorted sample after `counts[g]` observations, so
/// regime sums are prefix sums over `order`.
#[derive(Debug, Clone)]
pub(crate) struct SortedCuts {
    pub order: Vec<usize>,
    pub counts: Vec<usize>,
}

impl SortedCuts {
    pub fn new(q: &[f64], gammas: &[f64]) -> Self {
        let mut order: Vec<usize> = (0..q.len()).collect();
        order.sort_by(|&a, &b| q[a].total_cmp(&q[b]));
        let mut counts = Vec::with_capacity(gammas.len());
        let mut k = 0;
        for &g in gammas {
            while k < order.len() && q[order[k]] <= g {
                k += 1;
            }
            counts.push(k);
        }
        SortedCuts { order, counts }
    }

    /// Running sums of per-observation contributions of length `len`,
    /// captured at every cut. Also returns the full-sample total.
    pub fn prefix<F>(&self, len: usize, mut add: F) -> (Vec<Vec<f64>>, Vec<f64>)
    where
        F: FnMut(usize, &mut [f64]),
    {
        let mut acc = vec![0.0; len];
        let mut snaps = Vec::with_capacity(self.counts.len());
        let mut next = 0;
        while next < self.counts.len() && self.counts[next] == 0 {
            snaps.push(acc.clone());
            next += 1;
        }
        for (k, &t) in self.order.iter().enumerate() {
            add(t, &mut acc);
            while next < self.counts.len() && self.counts[next] == k + 1 {
                snaps.push(acc.clone());
                next += 1;
            }
        }
        while snaps.len() < self.counts.len() {
            snaps.push(acc.clone());
        }
        (snaps, acc)
    }
}

pub(crate) fn mat(rows: usize, cols: usize, flat: &[f64]) -> DMatrix<f64> {
    DMatrix::from_column_slice(rows, cols, flat)
}
