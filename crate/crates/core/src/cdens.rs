//! Nearest-neighbour conditional density estimators of a response rescaled
//! to [0, 1], their generalized risk, and convex combinations.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::neighbors::{k_nearest, take_rows};
use crate::rng;
use crate::strata::StrataAssignment;
use crate::tabular::Dataset;

/// Number of grid points on [0, 1].
pub const GRID_POINTS: usize = 201;

/// Grid node `b` of `0..GRID_POINTS`.
pub fn grid_point(b: usize) -> f64 {
    b as f64 / (GRID_POINTS - 1) as f64
}

fn spacing() -> f64 {
    1.0 / (GRID_POINTS - 1) as f64
}

/// Trapezoid rule over the grid.
pub fn trapezoid(values: &[f64]) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().sum();
    spacing() * (inner + 0.5 * (values[0] + values[n - 1]))
}

/// Trapezoid rule for `f^2`.
pub fn trapezoid_sq(values: &[f64]) -> f64 {
    let n = values.len();
    let inner: f64 = values[1..n - 1].iter().map(|v| v * v).sum();
    spacing() * (inner + 0.5 * (values[0] * values[0] + values[n - 1] * values[n - 1]))
}

/// Linear interpolation of grid values at `z` in [0, 1].
pub fn interpolate(values: &[f64], z: f64) -> f64 {
    let pos = z.clamp(0.0, 1.0) * (values.len() - 1) as f64;
    let i = (pos.floor() as usize).min(values.len() - 2);
    let t = pos - i as f64;
    values[i] * (1.0 - t) + values[i + 1] * t
}

fn renormalize(values: &mut [f64]) -> Result<()> {
    let total = trapezoid(values);
    if !(total > 0.0 && total.is_finite()) {
        return Err(Error::Numerical("density has no mass on the grid".into()));
    }
    values.iter_mut().for_each(|v| *v /= total);
    Ok(())
}

/// Min-max rescaling of the response onto [0, 1].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ResponseScale {
    pub min: f64,
    pub max: f64,
}

impl ResponseScale {
    pub fn fit(z: &[f64]) -> Result<Self> {
        let min = z.iter().copied().fold(f64::INFINITY, f64::min);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        if !(max > min && min.is_finite() && max.is_finite()) {
            return Err(Error::Data("response needs at least two distinct finite values".into()));
        }
        Ok(Self { min, max })
    }

    /// Values outside the fitted range are clamped to [0, 1].
    pub fn apply(&self, z: &[f64]) -> Vec<f64> {
        z.iter().map(|v| ((v - self.min) / (self.max - self.min)).clamp(0.0, 1.0)).collect()
    }

    /// Density on the original scale is the rescaled density times this.
    pub fn jacobian(&self) -> f64 {
        1.0 / (self.max - self.min)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CdeKind {
    HistNn,
    KerNn,
    Series,
}

/// One estimator configuration. `smoothing` is the bin count (hist-NN), the
/// kernel bandwidth (ker-NN) or the number of cosine terms (series).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CdeSpec {
    pub kind: CdeKind,
    pub neighbors: usize,
    pub smoothing: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CdeGrid {
    pub kind: CdeKind,
    pub neighbors: Vec<usize>,
    pub smoothing: Vec<f64>,
}

impl CdeGrid {
    pub fn default_for(kind: CdeKind) -> Self {
        let smoothing = match kind {
            CdeKind::HistNn => vec![5.0, 10.0, 20.0, 40.0],
            CdeKind::KerNn => vec![0.01, 0.02, 0.04, 0.08, 0.16],
            CdeKind::Series => vec![3.0, 5.0, 10.0, 20.0, 30.0],
        };
        Self { kind, neighbors: vec![10, 20, 40, 80, 160], smoothing }
    }

    pub fn single(spec: CdeSpec) -> Self {
        Self { kind: spec.kind, neighbors: vec![spec.neighbors], smoothing: vec![spec.smoothing] }
    }

    /// Neighbour-major order: index `a * smoothing.len() + b`.
    pub fn specs(&self) -> Vec<CdeSpec> {
        self.neighbors
            .iter()
            .flat_map(|&n| {
                self.smoothing
                    .iter()
                    .map(move |&s| CdeSpec { kind: self.kind, neighbors: n, smoothing: s })
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        if self.neighbors.is_empty() || self.smoothing.is_empty() {
            return Err(Error::InvalidArgument("empty density grid".into()));
        }
        if self.neighbors.contains(&0) {
            return Err(Error::InvalidArgument("neighbour counts must be positive".into()));
        }
        let ok = self.smoothing.iter().all(|&s| match self.kind {
            CdeKind::KerNn => s > 0.0 && s.is_finite(),
            CdeKind::HistNn => s >= 1.0 && s.fract() == 0.0,
            CdeKind::Series => s >= 0.0 && s.fract() == 0.0 && s <= MAX_TERMS as f64,
        });
        if !ok {
            return Err(Error::InvalidArgument(format!("invalid smoothing values for {:?}", self.kind)));
        }
        Ok(())
    }

    fn max_neighbors(&self) -> usize {
        self.neighbors.iter().copied().max().unwrap_or(1)
    }
}

/// Calls `emit(spec_index, density)` for every spec of `grid`, given the
/// responses of the query's neighbours sorted nearest first. Neighbour counts
/// beyond `zs.len()` use every neighbour.
fn for_each_density(grid: &CdeGrid, zs: &[f64], mut emit: impl FnMut(usize, &[f64]) -> Result<()>) -> Result<()> {
    let ns = grid.smoothing.len();
    let mut order: Vec<(usize, usize)> = grid
        .neighbors
        .iter()
        .enumerate()
        .map(|(a, &n)| (n.min(zs.len()), a))
        .collect();
    order.sort_unstable();
    let b = GRID_POINTS;
    let mut out = vec![0.0; b];
    for (si, &s) in grid.smoothing.iter().enumerate() {
        match grid.kind {
            CdeKind::KerNn => {
                let mut acc = vec![0.0; b];
                let mut used = 0;
                for &(n, a) in &order {
                    while used < n {
                        let z = zs[used];
                        add_kernel(&mut acc, z, s);
                        used += 1;
                    }
                    out.copy_from_slice(&acc);
                    renormalize(&mut out)?;
                    emit(a * ns + si, &out)?;
                }
            }
            CdeKind::HistNn => {
                let bins = s as usize;
                let mut counts = vec![0.0; bins];
                let mut used = 0;
                for &(n, a) in &order {
                    while used < n {
                        let k = ((zs[used] * bins as f64).floor() as usize).min(bins - 1);
                        counts[k] += 1.0;
                        used += 1;
                    }
                    for (t, slot) in out.iter_mut().enumerate() {
                        let k = ((grid_point(t) * bins as f64).floor() as usize).min(bins - 1);
                        *slot = counts[k];
                    }
                    renormalize(&mut out)?;
                    emit(a * ns + si, &out)?;
                }
            }
            CdeKind::Series => {
                let terms = s as usize;
                let mut coef = vec![0.0; terms + 1];
                let mut used = 0;
                for &(n, a) in &order {
                    while used < n {
                        for (j, c) in coef.iter_mut().enumerate().skip(1) {
                            *c += cosine(j, zs[used]);
                        }
                        used += 1;
                    }
                    let inv = 1.0 / n.max(1) as f64;
                    out.fill(1.0);
                    for j in 1..=terms {
                        let c = coef[j] * inv;
                        for (slot, phi) in out.iter_mut().zip(cosine_row(j)) {
                            *slot += c * phi;
                        }
                    }
                    out.iter_mut().for_each(|v| *v = v.max(0.0));
                    renormalize(&mut out)?;
                    emit(a * ns + si, &out)?;
                }
            }
        }
    }
    Ok(())
}

fn cosine(j: usize, t: f64) -> f64 {
    std::f64::consts::SQRT_2 * (std::f64::consts::PI * j as f64 * t).cos()
}

const MAX_TERMS: usize = 64;

/// Basis function `j` tabulated on the grid.
fn cosine_row(j: usize) -> &'static [f64] {
    static TABLE: std::sync::OnceLock<Vec<Vec<f64>>> = std::sync::OnceLock::new();
    let t = TABLE.get_or_init(|| {
        (0..=MAX_TERMS)
            .map(|j| (0..GRID_POINTS).map(|b| cosine(j, grid_point(b))).collect())
            .collect()
    });
    &t[j]
}

/// Adds `exp(-(t - z)^2 / (2 h^2))` at the grid nodes within `8h` of `z`.
/// Successive values follow the recurrence `k_{t+1} = k_t r_t`,
/// `r_{t+1} = r_t q` with `q = exp(-delta^2 / h^2)`.
fn add_kernel(acc: &mut [f64], z: f64, h: f64) {
    let b = acc.len();
    let delta = spacing();
    let lo = ((z - 8.0 * h) / delta).floor().max(0.0) as usize;
    let hi = (((z + 8.0 * h) / delta).ceil().max(0.0) as usize).min(b - 1);
    if lo > hi {
        return;
    }
    let u0 = (grid_point(lo) - z) / h;
    let mut k = (-0.5 * u0 * u0).exp();
    let mut r = (-(u0 * delta / h) - 0.5 * (delta / h).powi(2)).exp();
    let q = (-(delta / h).powi(2)).exp();
    for slot in &mut acc[lo..=hi] {
        *slot += k;
        k *= r;
        r *= q;
    }
}

/// Anything that maps covariate rows to densities on the grid.
pub trait DensityModel {
    /// One row of `GRID_POINTS` values per query row.
    fn densities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>>;
}

/// The uniform density on [0, 1], whatever the covariates.
#[derive(Debug, Clone, Copy)]
pub struct UniformDensity;

impl DensityModel for UniformDensity {
    fn densities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(Array2::from_elem((x.nrows(), GRID_POINTS), 1.0))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FittedCde {
    pub spec: CdeSpec,
    n_features: usize,
    x: Vec<f64>,
    z: Vec<f64>,
}

impl FittedCde {
    pub fn new(spec: CdeSpec, x: ArrayView2<f64>, z: &[f64]) -> Result<Self> {
        CdeGrid::single(spec).validate()?;
        check_response(x, z)?;
        if z.is_empty() {
            return Err(Error::Data("density estimator needs training rows".into()));
        }
        if spec.neighbors > z.len() {
            log::warn!("{} neighbours requested from {} training rows; using all", spec.neighbors, z.len());
        }
        Ok(Self {
            spec,
            n_features: x.ncols(),
            x: x.as_standard_layout().iter().copied().collect(),
            z: z.to_vec(),
        })
    }

    pub fn n_train(&self) -> usize {
        self.z.len()
    }
}

impl DensityModel for FittedCde {
    fn densities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.n_features {
            return Err(Error::Data(format!("estimator expects {} columns, got {}", self.n_features, x.ncols())));
        }
        let reference = ArrayView2::from_shape((self.z.len(), self.n_features), &self.x)
            .map_err(|e| Error::Data(e.to_string()))?;
        let grid = CdeGrid::single(self.spec);
        let x = x.as_standard_layout();
        let mut out = Array2::zeros((x.nrows(), GRID_POINTS));
        for (q, row) in x.rows().into_iter().enumerate() {
            let zs: Vec<f64> = k_nearest(reference, row, self.spec.neighbors).iter().map(|&i| self.z[i]).collect();
            for_each_density(&grid, &zs, |_, d| {
                out.row_mut(q).assign(&ndarray::ArrayView1::from(d));
                Ok(())
            })?;
        }
        Ok(out)
    }
}

fn check_response(x: ArrayView2<f64>, z: &[f64]) -> Result<()> {
    if x.nrows() != z.len() {
        return Err(Error::Data(format!("{} rows but {} responses", x.nrows(), z.len())));
    }
    if z.iter().any(|v| !(0.0..=1.0).contains(v)) {
        return Err(Error::Data("responses must be rescaled into [0, 1]".into()));
    }
    Ok(())
}

/// Per-row loss `int f^2 - 2 f(z_i)`; its mean is the unweighted generalized risk.
pub fn pointwise_losses(dens: &Array2<f64>, z: &[f64]) -> Vec<f64> {
    dens.rows()
        .into_iter()
        .zip(z)
        .map(|(r, &zi)| {
            let r = r.as_slice().expect("standard layout");
            trapezoid_sq(r) - 2.0 * interpolate(r, zi)
        })
        .collect()
}

fn risk_from_densities(
    quad: &Array2<f64>,
    labeled: &Array2<f64>,
    z: &[f64],
    weights: Option<&[f64]>,
) -> f64 {
    let nq = quad.nrows() as f64;
    let quadratic: f64 = quad
        .rows()
        .into_iter()
        .map(|r| trapezoid_sq(r.as_slice().expect("standard layout")))
        .sum::<f64>()
        / nq;
    let linear: f64 = labeled
        .rows()
        .into_iter()
        .enumerate()
        .map(|(i, r)| {
            let f = interpolate(r.as_slice().expect("standard layout"), z[i]);
            weights.map_or(f, |w| f * w[i])
        })
        .sum::<f64>()
        / z.len() as f64;
    quadratic - 2.0 * linear
}

/// `mean_{quad rows} int f^2 - 2 mean_i f(z_i | x_i) w_i`.
///
/// Unweighted use passes the labeled rows as `quad_x`; the importance weighted
/// form integrates over target rows and weights the labeled source rows.
pub fn generalized_risk(
    est: &dyn DensityModel,
    quad_x: ArrayView2<f64>,
    x: ArrayView2<f64>,
    z: &[f64],
    weights: Option<&[f64]>,
) -> Result<f64> {
    check_response(x, z)?;
    if weights.is_some_and(|w| w.len() != z.len()) {
        return Err(Error::Data("weights and labeled rows differ in length".into()));
    }
    if quad_x.nrows() == 0 || z.is_empty() {
        return Err(Error::Data("generalized risk needs rows".into()));
    }
    let quad = est.densities(quad_x)?;
    let labeled = est.densities(x)?;
    Ok(risk_from_densities(&quad, &labeled, z, weights))
}

/// Risk on labeled target rows; used for evaluation only.
pub fn target_risk_cde(est: &dyn DensityModel, x_t: ArrayView2<f64>, z_t: &[f64]) -> Result<f64> {
    generalized_risk(est, x_t, x_t, z_t, None)
}

/// Importance weighted risk inputs: target covariates for the quadratic term
/// and one weight per training row for the linear term.
#[derive(Debug, Clone, Copy)]
pub struct ImportanceRisk<'a> {
    pub target_x: ArrayView2<'a, f64>,
    pub weights: &'a [f64],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeCvRow {
    pub spec: CdeSpec,
    pub risk: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CdeFit {
    pub model: FittedCde,
    pub best: usize,
    pub table: Vec<CdeCvRow>,
}

/// Chooses hyperparameters over `grid` by `folds`-fold cross-validation of the
/// generalized risk (importance weighted when `risk` is given), then fits on
/// all rows. Ties go to the earliest grid entry.
pub fn fit_cde(
    grid: &CdeGrid,
    x: ArrayView2<f64>,
    z: &[f64],
    folds: usize,
    risk: Option<ImportanceRisk>,
    seed: u64,
) -> Result<CdeFit> {
    grid.validate()?;
    check_response(x, z)?;
    let n = z.len();
    if let Some(r) = &risk {
        if r.weights.len() != n {
            return Err(Error::Data("risk weights and training rows differ in length".into()));
        }
        if r.target_x.ncols() != x.ncols() || r.target_x.nrows() == 0 {
            return Err(Error::Data("target covariates do not match the training columns".into()));
        }
    }
    if folds < 2 || n < folds {
        return Err(Error::InvalidArgument(format!("need 2 <= folds <= n, got folds = {folds}, n = {n}")));
    }
    let specs = grid.specs();
    let x = x.as_standard_layout();
    let fold_of = crate::learn::fold_assignment(n, folds, seed);
    let mut sums = vec![0.0; specs.len()];
    for f in 0..folds {
        let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
        let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
        let xtr = take_rows(x.view(), &train);
        let ztr: Vec<f64> = train.iter().map(|&i| z[i]).collect();
        let kmax = grid.max_neighbors().min(train.len());
        let neighbours = |q: ndarray::ArrayView1<f64>| -> Vec<f64> {
            k_nearest(xtr.view(), q, kmax).iter().map(|&i| ztr[i]).collect()
        };
        let mut quad = vec![0.0; specs.len()];
        let mut lin = vec![0.0; specs.len()];
        for &i in &test {
            let w = risk.as_ref().map_or(1.0, |r| r.weights[i]);
            let with_quad = risk.is_none();
            for_each_density(grid, &neighbours(x.row(i)), |s, d| {
                lin[s] += w * interpolate(d, z[i]);
                if with_quad {
                    quad[s] += trapezoid_sq(d);
                }
                Ok(())
            })?;
        }
        let nq = match &risk {
            None => test.len(),
            Some(r) => {
                let tx = r.target_x.as_standard_layout();
                for q in tx.rows() {
                    for_each_density(grid, &neighbours(q), |s, d| {
                        quad[s] += trapezoid_sq(d);
                        Ok(())
                    })?;
                }
                tx.nrows()
            }
        };
        for s in 0..specs.len() {
            sums[s] += quad[s] / nq as f64 - 2.0 * lin[s] / test.len() as f64;
        }
    }
    let table: Vec<CdeCvRow> = specs
        .iter()
        .zip(&sums)
        .map(|(&spec, &s)| CdeCvRow { spec, risk: s / folds as f64 })
        .collect();
    let mut best = 0;
    for (i, r) in table.iter().enumerate() {
        if r.risk < table[best].risk {
            best = i;
        }
    }
    let model = FittedCde::new(specs[best], x.view(), z)?;
    Ok(CdeFit { model, best, table })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombWeights {
    pub alpha: Vec<f64>,
    /// Generalized risk of the combination on the fitting rows.
    pub risk: f64,
    /// Risk of each component alone on the same rows.
    pub component_risks: Vec<f64>,
    pub iterations: usize,
}

/// Euclidean projection onto the probability simplex.
pub fn project_simplex(v: &[f64]) -> Vec<f64> {
    let mut u = v.to_vec();
    u.sort_by(|a, b| b.total_cmp(a));
    let mut cum = 0.0;
    let mut theta = 0.0;
    for (i, &ui) in u.iter().enumerate() {
        cum += ui;
        let t = (cum - 1.0) / (i + 1) as f64;
        if ui - t > 0.0 {
            theta = t;
        }
    }
    v.iter().map(|&x| (x - theta).max(0.0)).collect()
}

/// Minimizes `a'Ma - 2b'a` over the simplex by projected gradient from the
/// barycenter. Returns the minimizer and the iteration count.
pub fn minimize_on_simplex(m: &[Vec<f64>], b: &[f64], tol: f64) -> Result<(Vec<f64>, usize)> {
    let p = b.len();
    if m.iter().flatten().chain(b).any(|v| !v.is_finite()) {
        return Err(Error::Numerical("non-finite combination objective".into()));
    }
    // Lipschitz bound of the gradient: 2 * max row sum of |M|.
    let lip = 2.0 * m.iter().map(|r| r.iter().map(|v| v.abs()).sum::<f64>()).fold(0.0, f64::max);
    let step = if lip > 0.0 { 1.0 / lip } else { 1.0 };
    let mut alpha = vec![1.0 / p as f64; p];
    for it in 1..=1_000_000 {
        let grad: Vec<f64> = (0..p)
            .map(|k| 2.0 * (m[k].iter().zip(&alpha).map(|(a, b)| a * b).sum::<f64>() - b[k]))
            .collect();
        let cand: Vec<f64> = alpha.iter().zip(&grad).map(|(a, g)| a - step * g).collect();
        let next = project_simplex(&cand);
        let change = next.iter().zip(&alpha).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        alpha = next;
        if change < tol {
            return Ok((alpha, it));
        }
    }
    log::warn!("combination weights did not converge");
    Ok((alpha, 1_000_000))
}

/// Simplex weights of the combination `sum_k alpha_k f_k` minimizing the
/// (optionally importance weighted) generalized risk on the given rows.
pub fn fit_comb(
    estimators: &[&dyn DensityModel],
    quad_x: ArrayView2<f64>,
    x: ArrayView2<f64>,
    z: &[f64],
    weights: Option<&[f64]>,
) -> Result<CombWeights> {
    let p = estimators.len();
    if p < 2 {
        return Err(Error::InvalidArgument("a combination needs at least two estimators".into()));
    }
    check_response(x, z)?;
    if weights.is_some_and(|w| w.len() != z.len()) {
        return Err(Error::Data("weights and labeled rows differ in length".into()));
    }
    let quad: Vec<Array2<f64>> = estimators.iter().map(|e| e.densities(quad_x)).collect::<Result<_>>()?;
    let lab: Vec<Array2<f64>> = estimators.iter().map(|e| e.densities(x)).collect::<Result<_>>()?;
    comb_from_densities(&quad, &lab, z, weights)
}

/// Combination weights from precomputed component densities: `quad[k]` at the
/// quadrature rows and `lab[k]` at the labeled rows.
pub fn comb_from_densities(
    quad: &[Array2<f64>],
    lab: &[Array2<f64>],
    z: &[f64],
    weights: Option<&[f64]>,
) -> Result<CombWeights> {
    let p = quad.len();
    if p < 2 || lab.len() != p {
        return Err(Error::InvalidArgument("a combination needs at least two estimators".into()));
    }
    if lab.iter().any(|d| d.nrows() != z.len()) || weights.is_some_and(|w| w.len() != z.len()) {
        return Err(Error::Data("densities, responses and weights differ in length".into()));
    }
    let nq = quad[0].nrows() as f64;
    let mut m = vec![vec![0.0; p]; p];
    let mut prod = vec![0.0; GRID_POINTS];
    for k in 0..p {
        for l in k..p {
            let mut s = 0.0;
            for (rk, rl) in quad[k].rows().into_iter().zip(quad[l].rows()) {
                for ((o, a), b) in prod.iter_mut().zip(rk.iter()).zip(rl.iter()) {
                    *o = a * b;
                }
                s += trapezoid(&prod);
            }
            m[k][l] = s / nq;
            m[l][k] = m[k][l];
        }
    }
    let b: Vec<f64> = lab
        .iter()
        .map(|d| {
            d.rows()
                .into_iter()
                .enumerate()
                .map(|(i, r)| {
                    let f = interpolate(r.as_slice().expect("standard layout"), z[i]);
                    weights.map_or(f, |w| f * w[i])
                })
                .sum::<f64>()
                / z.len() as f64
        })
        .collect();
    let (alpha, iterations) = minimize_on_simplex(&m, &b, 1e-9)?;
    let quad_form = |a: &[f64]| {
        let mut v = 0.0;
        for k in 0..p {
            for l in 0..p {
                v += a[k] * m[k][l] * a[l];
            }
        }
        v - 2.0 * a.iter().zip(&b).map(|(x, y)| x * y).sum::<f64>()
    };
    let component_risks = (0..p).map(|k| m[k][k] - 2.0 * b[k]).collect();
    Ok(CombWeights { risk: quad_form(&alpha), alpha, component_risks, iterations })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CombModel {
    pub components: Vec<FittedCde>,
    pub alpha: Vec<f64>,
}

impl DensityModel for CombModel {
    fn densities(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut out = Array2::zeros((x.nrows(), GRID_POINTS));
        for (c, &a) in self.components.iter().zip(&self.alpha) {
            if a > 0.0 {
                out.scaled_add(a, &c.densities(x)?);
            }
        }
        Ok(out)
    }
}

/// Which estimator to fit per stratum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum CdeMethod {
    Single { grid: CdeGrid },
    Comb { grids: Vec<CdeGrid> },
}

impl CdeMethod {
    /// Combination of ker-NN and series with default grids.
    pub fn default_comb() -> Self {
        CdeMethod::Comb {
            grids: vec![CdeGrid::default_for(CdeKind::KerNn), CdeGrid::default_for(CdeKind::Series)],
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CdeConfig {
    /// Folds for hyperparameter selection and for the out-of-fold densities
    /// that combination weights are fitted on.
    pub folds: usize,
}

impl Default for CdeConfig {
    fn default() -> Self {
        Self { folds: 5 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumCde {
    pub stratum: usize,
    pub n_train: usize,
    pub n_predicted: usize,
    pub selected: Vec<CdeSpec>,
    pub alpha: Option<Vec<f64>>,
}

/// Densities for target rows, one grid row per entry of `rows`.
#[derive(Debug, Clone, PartialEq)]
pub struct StratifiedCde {
    pub rows: Vec<usize>,
    pub strata: Vec<usize>,
    pub densities: Array2<f64>,
    pub fits: Vec<StratumCde>,
}

impl StratifiedCde {
    /// Long format `row,z,density`.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["row", "z", "density"])?;
        for (r, d) in self.rows.iter().zip(self.densities.rows()) {
            for (b, v) in d.iter().enumerate() {
                w.write_record([r.to_string(), grid_point(b).to_string(), v.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        #[derive(Serialize)]
        struct Out<'a> {
            grid_points: usize,
            grid_min: f64,
            grid_max: f64,
            rows: &'a [usize],
            strata: &'a [usize],
            values: Vec<Vec<f64>>,
            fits: &'a [StratumCde],
        }
        Ok(serde_json::to_string(&Out {
            grid_points: GRID_POINTS,
            grid_min: 0.0,
            grid_max: 1.0,
            rows: &self.rows,
            strata: &self.strata,
            values: self.densities.rows().into_iter().map(|r| r.to_vec()).collect(),
            fits: &self.fits,
        })?)
    }
}

fn fit_method(
    method: &CdeMethod,
    x: ArrayView2<f64>,
    z: &[f64],
    cfg: &CdeConfig,
    seed: u64,
) -> Result<(Box<dyn DensityModel>, Vec<CdeSpec>, Option<Vec<f64>>)> {
    let folds = cfg.folds.min(z.len());
    match method {
        CdeMethod::Single { grid } => {
            let f = fit_cde(grid, x, z, folds, None, rng::derive_seed(seed, 0))?;
            let spec = f.model.spec;
            Ok((Box::new(f.model), vec![spec], None))
        }
        CdeMethod::Comb { grids } => {
            let fits: Vec<CdeFit> = grids
                .iter()
                .enumerate()
                .map(|(g, grid)| fit_cde(grid, x, z, folds, None, rng::derive_seed(seed, 1 + g as u64)))
                .collect::<Result<_>>()?;
            let specs: Vec<CdeSpec> = fits.iter().map(|f| f.model.spec).collect();
            // out-of-fold densities of the selected components
            let n = z.len();
            let fold_of = crate::learn::fold_assignment(n, folds, rng::derive_seed(seed, 0));
            let mut oof = vec![Array2::zeros((n, GRID_POINTS)); specs.len()];
            for f in 0..folds {
                let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
                let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
                let xtr = take_rows(x, &train);
                let ztr: Vec<f64> = train.iter().map(|&i| z[i]).collect();
                let xte = take_rows(x, &test);
                for (k, &spec) in specs.iter().enumerate() {
                    let dens = FittedCde::new(spec, xtr.view(), &ztr)?.densities(xte.view())?;
                    for (r, &i) in test.iter().enumerate() {
                        oof[k].row_mut(i).assign(&dens.row(r));
                    }
                }
            }
            let cw = comb_from_densities(&oof, &oof, z, None)?;
            let components = fits.into_iter().map(|f| f.model).collect();
            let alpha = cw.alpha.clone();
            Ok((Box::new(CombModel { components, alpha: cw.alpha }), specs, Some(alpha)))
        }
    }
}

/// Per-stratum density estimation: each stratum's estimator is fitted by the
/// unweighted risk on the source rows of its merged pool and evaluated at the
/// stratum's target rows.
pub fn stratlearn_cde(
    method: &CdeMethod,
    d: &Dataset,
    z: &[Option<f64>],
    a: &StrataAssignment,
    cfg: &CdeConfig,
    seed: u64,
) -> Result<StratifiedCde> {
    if a.stratum_of.len() != d.n_rows() || z.len() != d.n_rows() {
        return Err(Error::Data("assignment, responses and dataset differ in row count".into()));
    }
    let x = d.x();
    let mut rows = Vec::new();
    let mut strata = Vec::new();
    let mut blocks = Vec::new();
    let mut fits = Vec::new();
    for j in 1..=a.k {
        let targets: Vec<usize> = a.rows_in(j).into_iter().filter(|&i| !d.is_source()[i]).collect();
        if targets.is_empty() {
            continue;
        }
        let train = a.training_rows(j, d.is_source());
        if train.is_empty() {
            return Err(Error::DegenerateStrata(format!("stratum {j} has target rows but no training rows")));
        }
        let zt = train
            .iter()
            .map(|&i| z[i].ok_or_else(|| Error::Data(format!("source row {i} has no response"))))
            .collect::<Result<Vec<f64>>>()?;
        let xtr = take_rows(x, &train);
        let (model, selected, alpha) = fit_method(method, xtr.view(), &zt, cfg, rng::derive_seed(seed, j as u64))?;
        blocks.push(model.densities(take_rows(x, &targets).view())?);
        fits.push(StratumCde { stratum: j, n_train: train.len(), n_predicted: targets.len(), selected, alpha });
        strata.extend(std::iter::repeat_n(j, targets.len()));
        rows.extend(targets);
    }
    let views: Vec<_> = blocks.iter().map(|b| b.view()).collect();
    let stacked = ndarray::concatenate(ndarray::Axis(0), &views).map_err(|e| Error::Data(e.to_string()))?;
    let mut order: Vec<usize> = (0..rows.len()).collect();
    order.sort_by_key(|&i| rows[i]);
    Ok(StratifiedCde {
        rows: order.iter().map(|&i| rows[i]).collect(),
        strata: order.iter().map(|&i| strata[i]).collect(),
        densities: take_rows(stacked.view(), &order),
        fits,
    })
}

/// Unadjusted estimator on all source rows.
pub fn biased_cde(method: &CdeMethod, d: &Dataset, z: &[Option<f64>], cfg: &CdeConfig, seed: u64) -> Result<StratifiedCde> {
    stratlearn_cde(method, d, z, &StrataAssignment::single(d.n_rows()), cfg, seed)
}

/// Single estimator on all source rows with hyperparameters chosen by the
/// importance weighted risk; `w` has one entry per source row.
pub fn weighted_cde(
    grid: &CdeGrid,
    d: &Dataset,
    z: &[Option<f64>],
    w: &[f64],
    cfg: &CdeConfig,
    seed: u64,
) -> Result<StratifiedCde> {
    let src = d.source_rows();
    let tgt = d.target_rows();
    if w.len() != src.len() {
        return Err(Error::Data(format!("{} weights for {} source rows", w.len(), src.len())));
    }
    let zs = src
        .iter()
        .map(|&i| z[i].ok_or_else(|| Error::Data(format!("source row {i} has no response"))))
        .collect::<Result<Vec<f64>>>()?;
    let xs = take_rows(d.x(), &src);
    let xt = take_rows(d.x(), &tgt);
    let f = fit_cde(
        grid,
        xs.view(),
        &zs,
        cfg.folds.min(zs.len()),
        Some(ImportanceRisk { target_x: xt.view(), weights: w }),
        rng::derive_seed(seed, 0),
    )?;
    Ok(StratifiedCde {
        strata: vec![1; tgt.len()],
        densities: f.model.densities(xt.view())?,
        fits: vec![StratumCde {
            stratum: 1,
            n_train: src.len(),
            n_predicted: tgt.len(),
            selected: vec![f.model.spec],
            alpha: None,
        }],
        rows: tgt,
    })
}
