//! Importance weights `w(x) = p_T(x) / p_S(x)` on the source rows.
//!
//! Four estimators are provided: the propensity-based Bayes identity (IPS),
//! KLIEP and uLSIF (Gaussian-kernel density-ratio models centred on a random
//! subset of target points) and the nearest-neighbour count estimator.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use ndarray::{Array2, ArrayView2};
use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{solve_spd, sq_dist};
use crate::neighbors::{k_nearest, take_rows};
use crate::rng;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WeightMethod {
    Ips,
    Kliep,
    Ulsif,
    Nn,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightHyperparams {
    pub sigma: Option<f64>,
    pub lambda: Option<f64>,
    pub n_neighbors: Option<usize>,
    pub n_centers: Option<usize>,
    pub seed: Option<u64>,
    /// Cross-validation score of every grid point: `(sigma, lambda, score)`.
    /// KLIEP scores are held-out mean log-weights (higher is better), uLSIF
    /// scores are leave-one-out squared-loss criteria (lower is better).
    pub grid_scores: Vec<(f64, Option<f64>, f64)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightVector {
    pub w: Vec<f64>,
    pub method: WeightMethod,
    pub hyperparams: WeightHyperparams,
}

impl WeightVector {
    pub fn mean(&self) -> f64 {
        self.w.iter().sum::<f64>() / self.w.len() as f64
    }

    /// CSV with one line per source row: `row,weight`.
    pub fn to_csv(&self, source_rows: &[usize]) -> Result<Vec<u8>> {
        if source_rows.len() != self.w.len() {
            return Err(Error::Data("row keys and weights differ in length".into()));
        }
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "weight"])?;
        for (r, v) in source_rows.iter().zip(&self.w) {
            w.write_record([r.to_string(), v.to_string()])?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }
}

/// `w_i = (n_S / n_T) (1 / e_i - 1)` from propensity scores on source rows.
pub fn ips_weights(scores: &[f64], n_source: usize, n_target: usize) -> Result<WeightVector> {
    if n_source == 0 || n_target == 0 {
        return Err(Error::InvalidArgument("ips weights need n_S, n_T > 0".into()));
    }
    if let Some(bad) = scores.iter().find(|e| !(**e > 0.0 && **e < 1.0)) {
        return Err(Error::Data(format!("propensity score {bad} outside (0, 1)")));
    }
    let ratio = n_source as f64 / n_target as f64;
    Ok(WeightVector {
        w: scores.iter().map(|e| ratio * (1.0 / e - 1.0)).collect(),
        method: WeightMethod::Ips,
        hyperparams: WeightHyperparams::default(),
    })
}

/// Settings shared by the kernel density-ratio estimators.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct KernelRatioConfig {
    /// Kernel widths; `None` uses [`default_sigma_grid`].
    pub sigma_grid: Option<Vec<f64>>,
    /// uLSIF ridge values (strictly positive).
    pub lambda_grid: Vec<f64>,
    pub n_centers: usize,
    /// Folds of the KLIEP likelihood cross-validation over target points.
    pub cv_folds: usize,
}

impl Default for KernelRatioConfig {
    fn default() -> Self {
        Self {
            sigma_grid: None,
            lambda_grid: vec![1e-3, 1e-2, 1e-1, 1.0, 10.0],
            n_centers: 100,
            cv_folds: 5,
        }
    }
}

/// A fitted `w(x) = sum_l alpha_l exp(-|x - c_l|^2 / (2 sigma^2))`.
#[derive(Debug, Clone, PartialEq)]
pub struct KernelRatio {
    pub centers: Array2<f64>,
    pub sigma: f64,
    pub alpha: Vec<f64>,
}

impl KernelRatio {
    pub fn evaluate(&self, x: ArrayView2<f64>) -> Vec<f64> {
        let phi = design(&sq_dists(x, self.centers.view()), self.sigma);
        phi.chunks(self.alpha.len())
            .map(|r| r.iter().zip(&self.alpha).map(|(a, b)| a * b).sum())
            .collect()
    }
}

/// Row-major `n x b` squared distances.
fn sq_dists(x: ArrayView2<f64>, centers: ArrayView2<f64>) -> Vec<f64> {
    let c: Vec<Vec<f64>> = centers.rows().into_iter().map(|r| r.to_vec()).collect();
    x.rows()
        .into_iter()
        .flat_map(|r| {
            let r = r.to_vec();
            c.iter().map(move |cl| sq_dist(&r, cl)).collect::<Vec<_>>()
        })
        .collect()
}

fn design(d2: &[f64], sigma: f64) -> Vec<f64> {
    let g = 1.0 / (2.0 * sigma * sigma);
    d2.iter().map(|&d| (-d * g).exp()).collect()
}

/// Median pairwise distance of (up to 500 seeded) pooled rows.
pub fn median_distance(x_s: ArrayView2<f64>, x_t: ArrayView2<f64>, seed: u64) -> f64 {
    let pooled = ndarray::concatenate(ndarray::Axis(0), &[x_s, x_t]).expect("same width");
    let n = pooled.nrows();
    let m = n.min(500);
    let mut r = rng::seeded(seed);
    let mut idx = sample(&mut r, n, m).into_vec();
    idx.sort_unstable();
    let rows: Vec<Vec<f64>> = idx.iter().map(|&i| pooled.row(i).to_vec()).collect();
    let mut d: Vec<f64> = Vec::with_capacity(m * (m - 1) / 2);
    for i in 0..m {
        for j in i + 1..m {
            d.push(sq_dist(&rows[i], &rows[j]).sqrt());
        }
    }
    if d.is_empty() {
        return 1.0;
    }
    let mid = d.len() / 2;
    d.select_nth_unstable_by(mid, f64::total_cmp);
    let med = d[mid];
    if med > 0.0 { med } else { 1.0 }
}

/// Ten log-spaced widths from `median / 8` to `2 * median`.
pub fn default_sigma_grid(median: f64) -> Vec<f64> {
    let (lo, hi) = ((median / 8.0).ln(), (median * 2.0).ln());
    (0..10)
        .map(|i| (lo + (hi - lo) * i as f64 / 9.0).exp())
        .collect()
}

fn choose_centers(x_t: ArrayView2<f64>, n_centers: usize, seed: u64) -> Result<Array2<f64>> {
    Ok(take_rows(x_t, &center_rows(x_t.nrows(), n_centers, seed)?))
}

/// Sorted indices of the target rows used as kernel centers.
fn center_rows(n_t: usize, n_centers: usize, seed: u64) -> Result<Vec<usize>> {
    if n_centers == 0 || n_centers > n_t {
        return Err(Error::InvalidArgument(format!(
            "need 1 <= n_centers <= n_T, got {n_centers} centers for {n_t} target rows"
        )));
    }
    let mut r = rng::seeded(seed);
    let mut idx = sample(&mut r, n_t, n_centers).into_vec();
    idx.sort_unstable();
    Ok(idx)
}

fn check_inputs(x_s: ArrayView2<f64>, x_t: ArrayView2<f64>) -> Result<()> {
    if x_s.nrows() == 0 || x_t.nrows() == 0 {
        return Err(Error::InvalidArgument("empty source or target sample".into()));
    }
    if x_s.ncols() != x_t.ncols() {
        return Err(Error::Data("source and target differ in column count".into()));
    }
    Ok(())
}

fn sigma_grid(cfg: &KernelRatioConfig, x_s: ArrayView2<f64>, x_t: ArrayView2<f64>, seed: u64) -> Result<Vec<f64>> {
    let grid = match &cfg.sigma_grid {
        Some(g) => g.clone(),
        None => default_sigma_grid(median_distance(x_s, x_t, seed)),
    };
    if grid.is_empty() || grid.iter().any(|s| !(*s > 0.0)) {
        return Err(Error::InvalidArgument("sigma grid must be nonempty and positive".into()));
    }
    Ok(grid)
}

// ---------------------------------------------------------------- KLIEP

const KLIEP_MAX_ITER: usize = 500;
const KLIEP_TOL: f64 = 1e-7;

fn mean_log(phi_t: &[f64], rows: &[usize], b: usize, alpha: &[f64]) -> f64 {
    let s: f64 = rows
        .iter()
        .map(|&i| {
            let v: f64 = phi_t[i * b..(i + 1) * b].iter().zip(alpha).map(|(a, c)| a * c).sum();
            v.ln()
        })
        .sum();
    s / rows.len() as f64
}

/// Projection onto `{alpha >= 0, mean_s . alpha = 1}` as in the reference
/// KLIEP procedure: feasibility correction, clipping, rescaling.
fn kliep_project(alpha: &mut [f64], mean_s: &[f64]) -> bool {
    let bb: f64 = mean_s.iter().map(|v| v * v).sum();
    let ba: f64 = mean_s.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    for (a, m) in alpha.iter_mut().zip(mean_s) {
        *a += (1.0 - ba) * m / bb;
        *a = a.max(0.0);
    }
    let ba: f64 = mean_s.iter().zip(alpha.iter()).map(|(a, b)| a * b).sum();
    if !(ba > 0.0) {
        return false;
    }
    alpha.iter_mut().for_each(|a| *a /= ba);
    true
}

/// Projected gradient ascent on the mean target log-weight.
fn kliep_solve(phi_t: &[f64], rows: &[usize], b: usize, mean_s: &[f64]) -> Option<Vec<f64>> {
    let total: f64 = mean_s.iter().sum();
    if !(total > 0.0) {
        return None;
    }
    let mut alpha = vec![1.0 / total; b];
    let mut obj = mean_log(phi_t, rows, b, &alpha);
    if !obj.is_finite() {
        return None;
    }
    let mut step = 1.0;
    let mut grad = vec![0.0; b];
    for _ in 0..KLIEP_MAX_ITER {
        grad.iter_mut().for_each(|g| *g = 0.0);
        for &i in rows {
            let row = &phi_t[i * b..(i + 1) * b];
            let v: f64 = row.iter().zip(&alpha).map(|(a, c)| a * c).sum();
            for (g, p) in grad.iter_mut().zip(row) {
                *g += p / v;
            }
        }
        let scale = 1.0 / rows.len() as f64;
        grad.iter_mut().for_each(|g| *g *= scale);

        let mut improved = None;
        for _ in 0..40 {
            let mut cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a + step * g).collect();
            if kliep_project(&mut cand, mean_s) {
                let o = mean_log(phi_t, rows, b, &cand);
                if o.is_finite() && o > obj {
                    improved = Some((cand, o));
                    break;
                }
            }
            step *= 0.5;
        }
        let Some((cand, o)) = improved else { break };
        let gain = o - obj;
        alpha = cand;
        obj = o;
        step *= 2.0;
        if gain < KLIEP_TOL {
            break;
        }
    }
    Some(alpha)
}

/// KLIEP with explicit centers and width.
pub fn kliep_fixed(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    centers: ArrayView2<f64>,
    sigma: f64,
) -> Result<KernelRatio> {
    check_inputs(x_s, x_t)?;
    let b = centers.nrows();
    let phi_s = design(&sq_dists(x_s, centers), sigma);
    let phi_t = design(&sq_dists(x_t, centers), sigma);
    let mean_s = column_means(&phi_s, b);
    let rows: Vec<usize> = (0..x_t.nrows()).collect();
    let alpha = kliep_solve(&phi_t, &rows, b, &mean_s)
        .ok_or_else(|| Error::Numerical(format!("KLIEP objective not finite at sigma = {sigma}")))?;
    Ok(KernelRatio { centers: centers.to_owned(), sigma, alpha })
}

fn column_means(phi: &[f64], b: usize) -> Vec<f64> {
    let n = phi.len() / b;
    let mut m = vec![0.0; b];
    for row in phi.chunks(b) {
        for (a, v) in m.iter_mut().zip(row) {
            *a += v;
        }
    }
    m.iter_mut().for_each(|v| *v /= n as f64);
    m
}

/// KLIEP weights on the source rows, width chosen by likelihood
/// cross-validation over the target points.
pub fn kliep_weights(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    cfg: &KernelRatioConfig,
    seed: u64,
) -> Result<WeightVector> {
    check_inputs(x_s, x_t)?;
    let n_centers = cfg.n_centers.min(x_t.nrows());
    let centers = choose_centers(x_t, n_centers, rng::derive_seed(seed, 1))?;
    let grid = sigma_grid(cfg, x_s, x_t, rng::derive_seed(seed, 2))?;
    let n_t = x_t.nrows();
    let folds = cfg.cv_folds.clamp(2, n_t.max(2));
    let fold_of = crate::learn::fold_assignment(n_t, folds, rng::derive_seed(seed, 3));
    let b = centers.nrows();
    let d2_s = sq_dists(x_s, centers.view());
    let d2_t = sq_dists(x_t, centers.view());

    let mut scores = Vec::with_capacity(grid.len());
    for &sigma in &grid {
        let phi_s = design(&d2_s, sigma);
        let phi_t = design(&d2_t, sigma);
        let mean_s = column_means(&phi_s, b);
        let mut total = 0.0;
        for f in 0..folds {
            let (held, train): (Vec<usize>, Vec<usize>) = (0..n_t).partition(|&i| fold_of[i] == f);
            if held.is_empty() || train.is_empty() {
                continue;
            }
            total += match kliep_solve(&phi_t, &train, b, &mean_s) {
                Some(alpha) => mean_log(&phi_t, &held, b, &alpha),
                None => f64::NEG_INFINITY,
            };
        }
        let score = if total.is_nan() { f64::NEG_INFINITY } else { total / folds as f64 };
        scores.push((sigma, None, score));
    }
    let best = scores
        .iter()
        .enumerate()
        .filter(|(_, s)| s.2.is_finite())
        .fold(None::<(usize, f64)>, |acc, (i, s)| match acc {
            Some((_, v)) if v >= s.2 => acc,
            _ => Some((i, s.2)),
        })
        .ok_or_else(|| Error::Numerical("KLIEP failed to fit at every kernel width".into()))?;
    let sigma = grid[best.0];
    let fit = kliep_fixed(x_s, x_t, centers.view(), sigma)?;
    let w = fit.evaluate(x_s);
    if w.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numerical("KLIEP produced non-finite weights".into()));
    }
    Ok(WeightVector {
        w,
        method: WeightMethod::Kliep,
        hyperparams: WeightHyperparams {
            sigma: Some(sigma),
            n_centers: Some(b),
            seed: Some(seed),
            grid_scores: scores,
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------------- uLSIF

/// `alpha = (H + lambda I)^{-1} h`, negative entries clipped to zero.
/// Also returns the unclipped solution.
fn ulsif_alpha(phi_s: &[f64], phi_t: &[f64], b: usize, lambda: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    let n_s = phi_s.len() / b;
    let mut h_mat = vec![0.0; b * b];
    for row in phi_s.chunks(b) {
        for a in 0..b {
            for c in a..b {
                h_mat[a * b + c] += row[a] * row[c];
            }
        }
    }
    for a in 0..b {
        for c in a..b {
            h_mat[a * b + c] /= n_s as f64;
            h_mat[c * b + a] = h_mat[a * b + c];
        }
        h_mat[a * b + a] += lambda;
    }
    let h_vec = column_means(phi_t, b);
    let raw = solve_spd(&h_mat, &h_vec)?;
    let clipped = raw.iter().map(|&a| a.max(0.0)).collect();
    Ok((clipped, raw))
}

/// uLSIF with explicit centers, width and ridge. Returns the fitted ratio and
/// the unclipped coefficients.
pub fn ulsif_fixed(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    centers: ArrayView2<f64>,
    sigma: f64,
    lambda: f64,
) -> Result<(KernelRatio, Vec<f64>)> {
    check_inputs(x_s, x_t)?;
    if !(lambda > 0.0) {
        return Err(Error::InvalidArgument("uLSIF lambda must be positive".into()));
    }
    let b = centers.nrows();
    let phi_s = design(&sq_dists(x_s, centers), sigma);
    let phi_t = design(&sq_dists(x_t, centers), sigma);
    let (alpha, raw) = ulsif_alpha(&phi_s, &phi_t, b, lambda)?;
    Ok((KernelRatio { centers: centers.to_owned(), sigma, alpha }, raw))
}

/// Leave-one-out uLSIF criterion `mean_i [ w_{-i}(x_S,i)^2 / 2 - w_{-i}(x_T,i) ]`
/// for every lambda, where pair `i` (the i-th source and i-th target row,
/// `i < min(n_S, n_T, max_pairs)`) is left out. Computed in closed form from
/// one eigendecomposition of `H` via the Sherman-Morrison identity.
pub fn ulsif_loo_scores(phi_s: &[f64], phi_t: &[f64], b: usize, lambdas: &[f64], max_pairs: usize) -> Vec<f64> {
    let n_s = phi_s.len() / b;
    let n_t = phi_t.len() / b;
    let n_min = n_s.min(n_t).min(max_pairs).max(1);
    let (nsf, ntf) = (n_s as f64, n_t as f64);

    let ps = DMatrix::from_row_slice(n_s, b, phi_s);
    let h = ps.transpose() * &ps / nsf;
    let hv = DVector::from_column_slice(&column_means(phi_t, b));
    let eig = SymmetricEigen::new(h);
    let q = &eig.eigenvectors;
    // Rotate everything into the eigenbasis once.
    let qt_h = q.transpose() * &hv;
    let s_min = DMatrix::from_row_slice(n_min, b, &phi_s[..n_min * b]);
    let t_min = DMatrix::from_row_slice(n_min, b, &phi_t[..n_min * b]);
    let qs = q.transpose() * s_min.transpose(); // b x n_min
    let qtt = q.transpose() * t_min.transpose();

    lambdas
        .iter()
        .map(|&lambda| {
            let shift = lambda * (nsf - 1.0) / nsf;
            let inv: Vec<f64> = eig.eigenvalues.iter().map(|&d| 1.0 / (d + shift)).collect();
            let mut score = 0.0;
            for i in 0..n_min {
                // coordinates in the eigenbasis
                let mut phi_b_phi = 0.0; // phi' B^-1 phi
                let mut phi_b_hi = 0.0; // phi' B^-1 h_{-i}
                let mut u = vec![0.0; b]; // B^-1 phi
                let mut v = vec![0.0; b]; // B^-1 h_{-i}
                for a in 0..b {
                    let p = qs[(a, i)];
                    let hi = (ntf * qt_h[a] - qtt[(a, i)]) / (ntf - 1.0);
                    u[a] = inv[a] * p;
                    v[a] = inv[a] * hi;
                    phi_b_phi += p * u[a];
                    phi_b_hi += p * v[a];
                }
                let denom = nsf - phi_b_phi;
                let c = (nsf - 1.0) / nsf;
                // Clipping needs alpha in the original basis.
                let rot = DVector::from_fn(b, |a, _| c * (v[a] + u[a] * phi_b_hi / denom));
                let alpha = q * rot;
                let row_s = &phi_s[i * b..(i + 1) * b];
                let row_t = &phi_t[i * b..(i + 1) * b];
                let (mut w_s, mut w_t) = (0.0, 0.0);
                for a in 0..b {
                    let al = alpha[a].max(0.0);
                    w_s += al * row_s[a];
                    w_t += al * row_t[a];
                }
                score += 0.5 * w_s * w_s - w_t;
            }
            score / n_min as f64
        })
        .collect()
}

/// uLSIF weights on the source rows; width and ridge chosen by leave-one-out
/// cross-validation over the grids.
pub fn ulsif_weights(
    x_s: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    cfg: &KernelRatioConfig,
    seed: u64,
) -> Result<WeightVector> {
    check_inputs(x_s, x_t)?;
    if cfg.lambda_grid.is_empty() || cfg.lambda_grid.iter().any(|l| !(*l > 0.0)) {
        return Err(Error::InvalidArgument("uLSIF lambda grid must be strictly positive".into()));
    }
    let n_t = x_t.nrows();
    let n_centers = cfg.n_centers.min(n_t);
    let idx = center_rows(n_t, n_centers, rng::derive_seed(seed, 1))?;
    let centers = take_rows(x_t, &idx);
    let grid = sigma_grid(cfg, x_s, x_t, rng::derive_seed(seed, 2))?;
    let b = centers.nrows();
    let d2_s = sq_dists(x_s, centers.view());
    // Held-out target rows must not be centers: a narrow kernel sitting on the
    // held-out point inflates its weight and drags the choice towards tiny
    // widths. Non-center rows go first and only they are held out.
    let mut is_center = vec![false; n_t];
    idx.iter().for_each(|&i| is_center[i] = true);
    let order: Vec<usize> = (0..n_t).filter(|&i| !is_center[i]).chain(idx.iter().copied()).collect();
    let free = n_t - b;
    if free == 0 {
        log::warn!("every target row is a uLSIF center; leave-one-out holds out centers");
    }
    let max_pairs = if free == 0 { n_t } else { free };
    let d2_t = sq_dists(take_rows(x_t, &order).view(), centers.view());

    let mut scores = Vec::new();
    for &sigma in &grid {
        let phi_s = design(&d2_s, sigma);
        let phi_t = design(&d2_t, sigma);
        for (l, s) in cfg.lambda_grid.iter().zip(ulsif_loo_scores(&phi_s, &phi_t, b, &cfg.lambda_grid, max_pairs)) {
            scores.push((sigma, Some(*l), s));
        }
    }
    let (sigma, lambda) = scores
        .iter()
        .filter(|s| s.2.is_finite())
        .fold(None::<&(f64, Option<f64>, f64)>, |acc, s| match acc {
            Some(a) if a.2 <= s.2 => acc,
            _ => Some(s),
        })
        .map(|s| (s.0, s.1.expect("lambda recorded")))
        .ok_or_else(|| Error::Numerical("uLSIF criterion not finite on the grid".into()))?;
    let (fit, _) = ulsif_fixed(x_s, x_t, centers.view(), sigma, lambda)?;
    Ok(WeightVector {
        w: fit.evaluate(x_s),
        method: WeightMethod::Ulsif,
        hyperparams: WeightHyperparams {
            sigma: Some(sigma),
            lambda: Some(lambda),
            n_centers: Some(b),
            seed: Some(seed),
            grid_scores: scores,
            ..Default::default()
        },
    })
}

// ---------------------------------------------------------------- NN

/// `w_i = (n_S / n_T) * #{targets with x_i among their k nearest sources} / k`.
pub fn nn_weights(x_s: ArrayView2<f64>, x_t: ArrayView2<f64>, k_neighbors: usize) -> Result<WeightVector> {
    check_inputs(x_s, x_t)?;
    if k_neighbors == 0 {
        return Err(Error::InvalidArgument("k_neighbors must be at least 1".into()));
    }
    let k = k_neighbors.min(x_s.nrows());
    let mut counts = vec![0usize; x_s.nrows()];
    for t in x_t.rows() {
        for i in k_nearest(x_s, t, k) {
            counts[i] += 1;
        }
    }
    let scale = x_s.nrows() as f64 / x_t.nrows() as f64 / k as f64;
    Ok(WeightVector {
        w: counts.iter().map(|&c| c as f64 * scale).collect(),
        method: WeightMethod::Nn,
        hyperparams: WeightHyperparams { n_neighbors: Some(k), ..Default::default() },
    })
}

// ---------------------------------------------------------------- sampling

/// Resampling probabilities `p_i ∝ w_i n_T/(n_S+n_T) + n_S/(n_S+n_T)`.
pub fn sampling_probabilities(w: &[f64], n_source: usize, n_target: usize) -> Result<Vec<f64>> {
    if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
        return Err(Error::Data("weights must be finite and nonnegative".into()));
    }
    let n = (n_source + n_target) as f64;
    let (p_t, p_s) = (n_target as f64 / n, n_source as f64 / n);
    let raw: Vec<f64> = w.iter().map(|&v| v * p_t + p_s).collect();
    let total: f64 = raw.iter().sum();
    assert!(total > 0.0, "affine map of nonnegative weights has a positive floor");
    Ok(raw.into_iter().map(|v| v / total).collect())
}
