//! Random instances and brute-force oracles shared by the integration tests.
//!
//! Every oracle works observation by observation on explicitly selected rows,
//! with general-purpose LU inverses, so it shares no code path with the prefix
//! sums and contracted moments used by the library.

#![allow(dead_code)]

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use threshold_iv::{Dataset, FirstStage, FirstStageSpec};

pub fn normal(rng: &mut ChaCha8Rng) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// Heteroskedastic instance with endogenous `x`, optionally with a first-stage
/// break at the median of `q`. `z1` starts with an intercept.
pub fn random_instance(seed: u64, t: usize, p1: usize, p2: usize, extra: usize, fs_break: bool) -> Dataset {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let qz = p2 + p1 + extra;
    let mut z = DMatrix::zeros(t, qz);
    for s in 0..t {
        z[(s, 0)] = 1.0;
        for k in 1..qz {
            z[(s, k)] = normal(&mut rng);
        }
    }
    let q = DVector::from_iterator(t, (0..t).map(|_| rng.random::<f64>() * 4.0));
    let mut pi1 = DMatrix::zeros(qz, p1);
    let mut pi2 = DMatrix::zeros(qz, p1);
    for j in 0..p1 {
        for k in 0..qz {
            // Excluded instruments stay strong in both regimes so the oracles
            // compare well-conditioned problems; the break flips their sign.
            let own = k == p2 + j;
            pi1[(k, j)] = if own { 1.5 + 0.5 * normal(&mut rng).abs() } else { 0.2 * normal(&mut rng) };
            pi2[(k, j)] = match (fs_break, own) {
                (false, _) => pi1[(k, j)],
                (true, true) => -pi1[(k, j)],
                (true, false) => pi1[(k, j)] + 0.2 * normal(&mut rng),
            };
        }
    }
    let theta = DVector::from_iterator(p1 + p2, (0..p1 + p2).map(|_| normal(&mut rng)));
    let mut x = DMatrix::zeros(t, p1);
    let mut y = DVector::zeros(t);
    for s in 0..t {
        let e = normal(&mut rng);
        let pi = if q[s] <= 2.0 { &pi1 } else { &pi2 };
        for j in 0..p1 {
            let u = 0.5 * e + normal(&mut rng);
            x[(s, j)] = (z.row(s) * pi.column(j))[(0, 0)] + u;
        }
        let scale = 1.0 + 0.5 * z[(s, qz - 1)].abs();
        let mut v = e * scale;
        for j in 0..p1 {
            v += theta[j] * x[(s, j)];
        }
        for k in 0..p2 {
            v += theta[p1 + k] * z[(s, k)];
        }
        y[s] = v;
    }
    let z1 = z.columns(0, p2).clone_owned();
    Dataset::new(y, x, z1, z, q).unwrap()
}

pub fn inv(m: &DMatrix<f64>) -> DMatrix<f64> {
    m.clone().try_inverse().expect("invertible")
}

pub fn rows_of(m: &DMatrix<f64>, idx: &[usize]) -> DMatrix<f64> {
    DMatrix::from_fn(idx.len(), m.ncols(), |i, j| m[(idx[i], j)])
}

pub fn vrows(v: &DVector<f64>, idx: &[usize]) -> DVector<f64> {
    DVector::from_iterator(idx.len(), idx.iter().map(|&i| v[i]))
}

pub fn split_idx(q: &DVector<f64>, gamma: f64) -> (Vec<usize>, Vec<usize>) {
    let lo = (0..q.len()).filter(|&s| q[s] <= gamma).collect();
    let hi = (0..q.len()).filter(|&s| q[s] > gamma).collect();
    (lo, hi)
}

/// `Σ_{s ∈ idx} a_s a_s'` for the rows of `a`, by an explicit loop.
pub fn gram(a: &DMatrix<f64>, idx: &[usize], w: impl Fn(usize) -> f64) -> DMatrix<f64> {
    let n = a.ncols();
    let mut out = DMatrix::zeros(n, n);
    for &s in idx {
        let r = a.row(s).transpose();
        out += &r * r.transpose() * w(s);
    }
    out
}

pub fn rel_err(a: f64, b: f64) -> f64 {
    let m = a.abs().max(b.abs());
    if m < 1e-10 {
        0.0
    } else {
        (a - b).abs() / m
    }
}

pub fn mat_rel_err(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    let m = a.norm().max(b.norm());
    if m < 1e-12 {
        0.0
    } else {
        (a - b).norm() / m
    }
}

/// Predicted regressors `[x̂, z1]`.
pub fn what(ds: &Dataset, xhat: &DMatrix<f64>) -> DMatrix<f64> {
    let mut w = ds.w().clone();
    w.columns_mut(0, ds.p1()).copy_from(xhat);
    w
}

fn ls(w: &DMatrix<f64>, y: &DVector<f64>) -> DVector<f64> {
    inv(&(w.transpose() * w)) * w.transpose() * y
}

/// `(N W⁻¹ N')⁻¹ N W⁻¹ zy` from raw rows, by LU solves, with `(N W⁻¹ N')⁻¹`.
fn gmm_rows(
    w: &DMatrix<f64>,
    z: &DMatrix<f64>,
    y: &DVector<f64>,
    weight: &DMatrix<f64>,
    tf: f64,
) -> (DVector<f64>, DMatrix<f64>) {
    let n = w.transpose() * z / tf;
    let zy = z.transpose() * y / tf;
    let g = weight.clone().lu().solve(&n.transpose()).expect("invertible weight");
    let a = (&n * &g).lu();
    (a.solve(&(g.transpose() * zy)).expect("invertible"), a.try_inverse().expect("invertible"))
}

/// GMM Wald statistic at `gamma`: two-step fit per regime with weights from
/// per-regime first-step residuals (`per_gamma`) or the full-sample first
/// step; `hom` swaps in `σ̂² M̂` with `σ̂²` the mean squared residual.
pub fn oracle_gmm_wald(ds: &Dataset, gamma: f64, per_gamma: bool, hom: bool) -> f64 {
    let t = ds.t();
    let tf = t as f64;
    let (lo, hi) = split_idx(ds.q(), gamma);
    let all: Vec<usize> = (0..t).collect();
    let z = ds.z();
    let w = ds.w();
    let y = ds.y();
    let m_full = gram(z, &all, |_| 1.0) / tf;
    let (th_full, _) = gmm_rows(w, z, y, &m_full, tf);
    let e_full: DVector<f64> = y - w * &th_full;
    let mut first = Vec::new();
    for idx in [&lo, &hi] {
        let m = gram(z, idx, |_| 1.0) / tf;
        let (th1, _) = gmm_rows(&rows_of(w, idx), &rows_of(z, idx), &vrows(y, idx), &m, tf);
        first.push((m, th1));
    }
    let e_split = DVector::from_iterator(
        t,
        (0..t).map(|s| {
            let th = if ds.q()[s] <= gamma { &first[0].1 } else { &first[1].1 };
            y[s] - (w.row(s) * th)[(0, 0)]
        }),
    );
    let e = if per_gamma { &e_split } else { &e_full };
    let sigma2 = e.norm_squared() / tf;
    let mut thetas = Vec::new();
    let mut v = DMatrix::zeros(ds.p(), ds.p());
    for (k, idx) in [&lo, &hi].into_iter().enumerate() {
        let h = if hom { &first[k].0 * sigma2 } else { gram(z, idx, |s| e[s] * e[s]) / tf };
        let (th2, vi) = gmm_rows(&rows_of(w, idx), &rows_of(z, idx), &vrows(y, idx), &h, tf);
        thetas.push(th2);
        v += vi;
    }
    let d = &thetas[0] - &thetas[1];
    tf * d.dot(&v.lu().solve(&d).expect("invertible"))
}

/// Split-sample 2SLS coefficients on `ŵ`.
pub fn oracle_split(ds: &Dataset, xhat: &DMatrix<f64>, gamma: f64) -> (DVector<f64>, DVector<f64>) {
    let wh = what(ds, xhat);
    let (lo, hi) = split_idx(ds.q(), gamma);
    (ls(&rows_of(&wh, &lo), &vrows(ds.y(), &lo)), ls(&rows_of(&wh, &hi), &vrows(ds.y(), &hi)))
}

pub fn oracle_lr(ds: &Dataset, xhat: &DMatrix<f64>, gamma: f64) -> f64 {
    let wh = what(ds, xhat);
    let y = ds.y();
    let theta = ls(&wh, y);
    let ssr0 = (y - &wh * theta).norm_squared();
    let (lo, hi) = split_idx(ds.q(), gamma);
    let mut ssr1 = 0.0;
    for idx in [&lo, &hi] {
        let wi = rows_of(&wh, idx);
        let yi = vrows(y, idx);
        let th = ls(&wi, &yi);
        for s in 0..idx.len() {
            let r = yi[s] - (wi.row(s) * &th)[(0, 0)];
            ssr1 += r * r;
        }
    }
    let dof = ds.t() as f64 - 2.0 * ds.p() as f64;
    (ssr0 - ssr1) / (ssr1 / dof)
}

fn a_of(pi: &DMatrix<f64>, p2: usize) -> DMatrix<f64> {
    let (qz, p1) = pi.shape();
    DMatrix::from_fn(p1 + p2, qz, |r, c| {
        if r < p1 {
            pi[(c, r)]
        } else if c == r - p1 {
            1.0
        } else {
            0.0
        }
    })
}

/// Per-observation inputs shared by the 2SLS variance oracles.
struct TslsParts {
    et: DVector<f64>,
    ut: DVector<f64>,
    eps: DVector<f64>,
    uhat: DMatrix<f64>,
    theta_x: DVector<f64>,
    c: [DMatrix<f64>; 2],
}

fn tsls_parts(ds: &Dataset, fs: &FirstStageSpec, gamma: f64) -> TslsParts {
    let tf = ds.t() as f64;
    let wh = what(ds, &fs.xhat);
    let theta = ls(&wh, ds.y());
    let eps = ds.y() - ds.w() * &theta;
    let uhat = ds.x() - &fs.xhat;
    let theta_x = theta.rows(0, ds.p1()).clone_owned();
    let ut = &uhat * &theta_x;
    let et = &eps + &ut;
    let (lo, hi) = split_idx(ds.q(), gamma);
    TslsParts { et, ut, eps, uhat, theta_x, c: [gram(&wh, &lo, |_| 1.0) / tf, gram(&wh, &hi, |_| 1.0) / tf] }
}

fn sandwich_c(c: &[DMatrix<f64>; 2], v: &[[DMatrix<f64>; 2]; 2]) -> DMatrix<f64> {
    let c1 = inv(&c[0]);
    let c2 = inv(&c[1]);
    &c1 * &v[0][0] * &c1 - &c1 * &v[0][1] * &c2 - &c2 * &v[1][0] * &c1 + &c2 * &v[1][1] * &c2
}

/// 2SLS variance of `√T(θ̂₁γ − θ̂₂γ)` from per-observation influence terms.
///
/// The score of regime `k` at observation `t` is
/// `Â_j [1{t ∈ k} z ẽ − R_kj z ũ]` with `j` the first-stage regime of `t` and
/// `R_kj = M̂_{k∩j} M̂_j⁻¹`. `hom` replaces `ẽ²`, `ẽũ`, `ũ²` by their means.
pub fn oracle_tsls_variance_influence(ds: &Dataset, fs: &FirstStageSpec, gamma: f64, hom: bool) -> DMatrix<f64> {
    let t = ds.t();
    let tf = t as f64;
    let (qz, p2) = (ds.qz(), ds.p2());
    let z = ds.z();
    let q = ds.q();
    let parts = tsls_parts(ds, fs, gamma);
    // First-stage regimes: membership and slope matrices.
    let (regime_of, a): (Vec<usize>, Vec<DMatrix<f64>>) = match &fs.model {
        FirstStage::Linear { pi } => (vec![0; t], vec![a_of(pi, p2)]),
        FirstStage::Threshold { pi1, pi2, rho, .. } => {
            ((0..t).map(|s| usize::from(q[s] > *rho)).collect(), vec![a_of(pi1, p2), a_of(pi2, p2)])
        }
    };
    let nj = a.len();
    let in_k = |s: usize, k: usize| (q[s] > gamma) == (k == 1);
    let mut r = vec![vec![DMatrix::zeros(qz, qz); nj]; 2];
    for j in 0..nj {
        let idx_j: Vec<usize> = (0..t).filter(|&s| regime_of[s] == j).collect();
        let mj = gram(z, &idx_j, |_| 1.0) / tf;
        let mji = inv(&mj);
        for k in 0..2 {
            let idx: Vec<usize> = idx_j.iter().copied().filter(|&s| in_k(s, k)).collect();
            r[k][j] = gram(z, &idx, |_| 1.0) / tf * &mji;
        }
    }
    let (mee, meu, muu) = (parts.et.norm_squared() / tf, parts.et.dot(&parts.ut) / tf, parts.ut.norm_squared() / tf);
    let p = ds.p();
    let mut v = [[DMatrix::zeros(p, p), DMatrix::zeros(p, p)], [DMatrix::zeros(p, p), DMatrix::zeros(p, p)]];
    for s in 0..t {
        let j = regime_of[s];
        let zs = z.row(s).transpose();
        let (wee, weu, wuu) = if hom {
            (mee, meu, muu)
        } else {
            (parts.et[s] * parts.et[s], parts.et[s] * parts.ut[s], parts.ut[s] * parts.ut[s])
        };
        let pk: Vec<DVector<f64>> = (0..2).map(|k| if in_k(s, k) { &a[j] * &zs } else { DVector::zeros(p) }).collect();
        let qk: Vec<DVector<f64>> = (0..2).map(|k| -(&a[j] * &r[k][j] * &zs)).collect();
        for k in 0..2 {
            for l in 0..2 {
                v[k][l] += (&pk[k] * pk[l].transpose()) * wee
                    + (&pk[k] * qk[l].transpose() + &qk[k] * pk[l].transpose()) * weu
                    + (&qk[k] * qk[l].transpose()) * wuu;
            }
        }
    }
    for row in v.iter_mut() {
        for b in row.iter_mut() {
            *b /= tf;
        }
    }
    sandwich_c(&parts.c, &v)
}

/// Linear first-stage variance assembled from explicit Kronecker blocks:
/// `Ĥᵢ = T⁻¹Σᵢ v̂v̂' ⊗ zz'`, `D̄ᵢ = θ̃'⊗I − θ̌'⊗R̂ᵢ`, `F̄ᵢ = θ̌'⊗R̂ᵢ`.
pub fn oracle_tsls_variance_kron(ds: &Dataset, fs: &FirstStageSpec, gamma: f64, hom: bool) -> DMatrix<f64> {
    let pi = match &fs.model {
        FirstStage::Linear { pi } => pi,
        _ => panic!("linear first stage expected"),
    };
    let t = ds.t();
    let tf = t as f64;
    let (qz, p1, p2) = (ds.qz(), ds.p1(), ds.p2());
    let z = ds.z();
    let parts = tsls_parts(ds, fs, gamma);
    let (lo, hi) = split_idx(ds.q(), gamma);
    let all: Vec<usize> = (0..t).collect();
    let nv = p1 + 1;
    let vhat = DMatrix::from_fn(t, nv, |s, i| if i == 0 { parts.eps[s] } else { parts.uhat[(s, i - 1)] });
    let m = gram(z, &all, |_| 1.0) / tf;
    let sigma_v = gram(&vhat, &all, |_| 1.0) / tf;
    let h = |idx: &[usize]| -> DMatrix<f64> {
        if hom {
            sigma_v.kronecker(&(gram(z, idx, |_| 1.0) / tf))
        } else {
            let mut out = DMatrix::zeros(nv * qz, nv * qz);
            for &s in idx {
                let vz = vhat.row(s).transpose().kronecker(&z.row(s).transpose());
                out += &vz * vz.transpose();
            }
            out / tf
        }
    };
    let (h1, h2) = (h(&lo), h(&hi));
    let r1 = gram(z, &lo, |_| 1.0) / tf * inv(&m);
    let r2 = DMatrix::identity(qz, qz) - &r1;
    let tilde = DMatrix::from_fn(1, nv, |_, i| if i == 0 { 1.0 } else { parts.theta_x[i - 1] });
    let check = DMatrix::from_fn(1, nv, |_, i| if i == 0 { 0.0 } else { parts.theta_x[i - 1] });
    let eye = DMatrix::<f64>::identity(qz, qz);
    let dbar = |r: &DMatrix<f64>| tilde.kronecker(&eye) - check.kronecker(r);
    let fbar = |r: &DMatrix<f64>| check.kronecker(r);
    let (d1, d2, f1, f2) = (dbar(&r1), dbar(&r2), fbar(&r1), fbar(&r2));
    let a = a_of(pi, p2);
    let sw = |x: DMatrix<f64>| &a * x * a.transpose();
    let v11 = sw(&d1 * &h1 * d1.transpose() + &f1 * &h2 * f1.transpose());
    let v22 = sw(&d2 * &h2 * d2.transpose() + &f2 * &h1 * f2.transpose());
    let v12 = -sw(&d1 * &h1 * f2.transpose() + &f1 * &h2 * d2.transpose());
    let v21 = v12.transpose();
    sandwich_c(&parts.c, &[[v11, v12], [v21, v22]])
}

pub fn oracle_wald(ds: &Dataset, fs: &FirstStageSpec, gamma: f64, v: &DMatrix<f64>) -> f64 {
    let (a, b) = oracle_split(ds, &fs.xhat, gamma);
    let d = a - b;
    ds.t() as f64 * (d.transpose() * inv(v) * &d)[(0, 0)]
}

/// Exhaustive `ρ̂`: refit both regimes at every candidate and keep the
/// smallest trace SSR (first candidate on ties).
pub fn oracle_rho(ds: &Dataset, grid: &[f64]) -> Option<(f64, f64)> {
    let n_min = ds.p() + 1;
    let mut best: Option<(f64, f64)> = None;
    for &rho in grid {
        let (lo, hi) = split_idx(ds.q(), rho);
        if lo.len() < n_min || hi.len() < n_min {
            continue;
        }
        let mut ssr = 0.0;
        let mut ok = true;
        for idx in [&lo, &hi] {
            let zi = rows_of(ds.z(), idx);
            let xi = rows_of(ds.x(), idx);
            let Some(g) = (zi.transpose() * &zi).try_inverse() else {
                ok = false;
                break;
            };
            let pi = g * zi.transpose() * &xi;
            ssr += (&xi - &zi * pi).norm_squared();
        }
        if ok && best.is_none_or(|(_, b)| ssr < b) {
            best = Some((rho, ssr));
        }
    }
    best
}

/// A threshold first stage whose two slope matrices equal the linear fit.
///
/// The variance also reflects first-stage estimation on the ρ-regimes, so it
/// reduces to the linear-first-stage variance only when the low ρ-regime is
/// the whole sample.
pub fn forced_equal_slopes(ds: &Dataset, rho: f64) -> FirstStageSpec {
    let lin = threshold_iv::estimators::fit_first_stage_linear(ds).unwrap();
    let FirstStage::Linear { pi } = &lin.model else { unreachable!() };
    FirstStageSpec {
        model: FirstStage::Threshold {
            pi1: pi.clone(),
            pi2: pi.clone(),
            rho,
            trace_ssr: lin.uhat(ds).norm_squared(),
            grid: threshold_iv::build_grid(ds.q().as_slice(), 0.15).unwrap(),
            skipped: Vec::new(),
        },
        xhat: lin.xhat,
    }
}

/// Wald statistic for given per-regime coefficients with the variance
/// `Σᵢ (Nᵢ Hᵢ⁻¹ Nᵢ')⁻¹`, `Hᵢ` built from the residuals `e`.
pub fn one_step_wald(ds: &Dataset, gamma: f64, e: &DVector<f64>, theta: [&DVector<f64>; 2]) -> f64 {
    let tf = ds.t() as f64;
    let (lo, hi) = split_idx(ds.q(), gamma);
    let mut v = DMatrix::zeros(ds.p(), ds.p());
    for idx in [&lo, &hi] {
        let n = rows_of(ds.w(), idx).transpose() * rows_of(ds.z(), idx) / tf;
        let h = gram(ds.z(), idx, |s| e[s] * e[s]) / tf;
        let a = &n * h.lu().solve(&n.transpose()).unwrap();
        v += a.lu().try_inverse().unwrap();
    }
    let d = theta[0] - theta[1];
    tf * d.dot(&v.lu().solve(&d).unwrap())
}
