//! Independent reference implementations and shared experiment plumbing for
//! the integration and acceptance tests. Nothing here calls the code it is
//! used to check.
#![allow(dead_code)]

use std::sync::Mutex;

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2};
use stratlearn::propensity::{fit_propensity, predict_propensity, PropensityConfig};
use stratlearn::rng::derive_seed;
use stratlearn::strata::{merge_small_strata, stratify, StrataAssignment};
use stratlearn::tabular::{simulate_shift, standardize, Dataset, ShiftSpec};

/// AUC by counting every positive/negative pair.
pub fn auc_pairs(scores: &[f64], labels: &[f64]) -> f64 {
    let (mut twice_wins, mut p, mut n) = (0u64, 0u64, 0u64);
    for (i, &yi) in labels.iter().enumerate() {
        if yi == 1.0 {
            p += 1;
        } else {
            n += 1;
            continue;
        }
        for (j, &yj) in labels.iter().enumerate() {
            if yj == 0.0 {
                twice_wins += match scores[i].partial_cmp(&scores[j]).unwrap() {
                    std::cmp::Ordering::Greater => 2,
                    std::cmp::Ordering::Equal => 1,
                    std::cmp::Ordering::Less => 0,
                };
            }
        }
    }
    twice_wins as f64 / (2 * p * n) as f64
}

/// sup |F_S - F_T| evaluated at every pooled point, ECDFs by direct counting.
pub fn ks_brute(a: &[f64], b: &[f64]) -> f64 {
    let ecdf = |v: &[f64], x: f64| v.iter().filter(|&&t| t <= x).count() as f64 / v.len() as f64;
    a.iter()
        .chain(b)
        .map(|&x| (ecdf(a, x) - ecdf(b, x)).abs())
        .fold(0.0, f64::max)
}

fn binom(n: u64, k: u64) -> u128 {
    if k > n {
        return 0;
    }
    let k = k.min(n - k);
    let mut r: u128 = 1;
    for i in 0..k {
        r = r * (n - i) as u128 / (i + 1) as u128;
    }
    r
}

/// Two-sided Fisher p-value by exact integer enumeration of the
/// hypergeometric tables; ties are decided on exact numerators.
pub fn fisher_rational(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let (r1, r2, c1) = (a + b, c + d, a + c);
    let n = r1 + r2;
    let num = |x: u64| binom(r1, x) * binom(r2, c1 - x);
    let obs = num(a);
    let lo = c1.saturating_sub(r2);
    let hi = r1.min(c1);
    let total: u128 = (lo..=hi).map(num).filter(|&v| v <= obs).sum();
    total as f64 / binom(n, c1) as f64
}

/// Sort ascending, cut into k chunks at positions `ceil(c n / k)`, and label
/// the highest-score chunk stratum 1.
pub fn sort_chunk_strata(scores: &[f64], k: usize) -> Vec<usize> {
    let n = scores.len();
    let mut idx: Vec<usize> = (0..n).collect();
    idx.sort_by(|&a, &b| scores[a].partial_cmp(&scores[b]).unwrap());
    let mut out = vec![0; n];
    for c in 0..k {
        let start = (c * n + k - 1) / k;
        let end = ((c + 1) * n + k - 1) / k;
        for &i in &idx[start..end] {
            out[i] = k - c;
        }
    }
    out
}

fn gauss(x: &[f64], c: &[f64], sigma: f64) -> f64 {
    let d2: f64 = x.iter().zip(c).map(|(a, b)| (a - b) * (a - b)).sum();
    (-d2 / (2.0 * sigma * sigma)).exp()
}

fn design(x: ArrayView2<f64>, centers: ArrayView2<f64>, sigma: f64) -> DMatrix<f64> {
    DMatrix::from_fn(x.nrows(), centers.nrows(), |i, l| {
        gauss(&x.row(i).to_vec(), &centers.row(l).to_vec(), sigma)
    })
}

/// Unclipped uLSIF coefficients `(H + lambda I)^{-1} h` by dense LU.
pub fn ulsif_dense(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    centers: ArrayView2<f64>,
    sigma: f64,
    lambda: f64,
) -> Vec<f64> {
    let ps = design(x_s, centers, sigma);
    let pt = design(x_t, centers, sigma);
    let b = centers.nrows();
    let h = ps.transpose() * &ps / x_s.nrows() as f64 + DMatrix::identity(b, b) * lambda;
    let hv = pt.row_sum().transpose() / x_t.nrows() as f64;
    h.lu().solve(&hv).expect("nonsingular").iter().copied().collect()
}

/// Leave-one-out uLSIF criterion refitting from scratch for every held-out
/// pair (source row i, target row i), i < min(n_S, n_T, max_pairs).
pub fn ulsif_loo_brute(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    centers: ArrayView2<f64>,
    sigma: f64,
    lambda: f64,
    max_pairs: usize,
) -> f64 {
    let n_min = x_s.nrows().min(x_t.nrows()).min(max_pairs);
    let b = centers.nrows();
    let ps = design(x_s, centers, sigma);
    let pt = design(x_t, centers, sigma);
    let mut total = 0.0;
    for i in 0..n_min {
        let keep_s: Vec<usize> = (0..x_s.nrows()).filter(|&r| r != i).collect();
        let keep_t: Vec<usize> = (0..x_t.nrows()).filter(|&r| r != i).collect();
        let s = ps.select_rows(&keep_s);
        let t = pt.select_rows(&keep_t);
        let h = s.transpose() * &s / keep_s.len() as f64 + DMatrix::identity(b, b) * lambda;
        let hv: DVector<f64> = t.row_sum().transpose() / keep_t.len() as f64;
        let alpha = h.lu().solve(&hv).unwrap().map(|a| a.max(0.0));
        let ws = (ps.row(i) * &alpha)[0];
        let wt = (pt.row(i) * &alpha)[0];
        total += 0.5 * ws * ws - wt;
    }
    total / n_min as f64
}

/// Copies the given rows.
pub fn rows_of(x: ArrayView2<f64>, rows: &[usize]) -> Array2<f64> {
    Array2::from_shape_fn((rows.len(), x.ncols()), |(i, j)| x[[rows[i], j]])
}

/// The standard experiment front half: Beta(13, 4) shift on column 0,
/// standardization, propensity fit, k quantile strata, merging.
pub struct Prepared {
    pub data: Dataset,
    pub scores: Vec<f64>,
    pub raw_strata: StrataAssignment,
    pub strata: StrataAssignment,
}

pub fn shift_and_prepare(raw: &Dataset, seed: u64, k: usize, min_source: usize) -> Prepared {
    let shifted = simulate_shift(raw, &ShiftSpec::medium(0, derive_seed(seed, 99))).unwrap();
    prepare(&shifted, k, min_source)
}

pub fn prepare(shifted: &Dataset, k: usize, min_source: usize) -> Prepared {
    let (data, _) = standardize(shifted).unwrap();
    let m = fit_propensity(&data, &PropensityConfig::default()).unwrap();
    let scores = predict_propensity(&m, data.x()).unwrap();
    let raw_strata = stratify(&scores, k).unwrap();
    let strata = merge_small_strata(&raw_strata, data.is_source(), min_source).unwrap();
    Prepared { data, scores, raw_strata, strata }
}

static FAILED: Mutex<Vec<String>> = Mutex::new(Vec::new());

/// Prints one check line and returns whether it passed. Failed checks are
/// remembered by their leading tag (`"2c"` for `"2c no-shift ..."`).
pub fn report(id: &str, pass: bool, detail: &str) -> bool {
    println!("[{}] {id}: {detail}", if pass { "PASS" } else { "FAIL" });
    if !pass {
        let tag = id.split_whitespace().next().unwrap_or(id).to_string();
        FAILED.lock().unwrap().push(tag);
    }
    pass
}

/// Tags of every failed check so far.
pub fn failed_checks() -> Vec<String> {
    FAILED.lock().unwrap().clone()
}
