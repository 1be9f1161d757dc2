//! Base learners behind one weighted-fit interface, empirical risk,
//! (importance weighted) cross-validation, importance-sampling fits and the
//! per-stratum orchestrator.

use ndarray::{Array2, ArrayView2};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_logistic, sigmoid, IrlsOptions};
use crate::linalg::solve_spd;
use crate::neighbors::{k_nearest, take_rows};
use crate::rng;
use crate::strata::StrataAssignment;
use crate::tabular::Dataset;
use crate::weights::sampling_probabilities;

/// Log-loss clipping constant.
pub const LOGLOSS_EPS: f64 = 1e-12;
pub const DEFAULT_FOLDS: usize = 10;
pub const DEFAULT_RIDGE: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum LearnerSpec {
    LogisticClassifier { lambda: f64 },
    LeastSquares { lambda: f64 },
    KnnRegressor { k: usize },
}

impl LearnerSpec {
    pub fn loss(&self) -> LossKind {
        match self {
            LearnerSpec::LogisticClassifier { .. } => LossKind::Logloss,
            _ => LossKind::Squared,
        }
    }

    fn validate(&self) -> Result<()> {
        match *self {
            LearnerSpec::LogisticClassifier { lambda } | LearnerSpec::LeastSquares { lambda } => {
                if !(lambda >= 0.0 && lambda.is_finite()) {
                    return Err(Error::InvalidArgument(format!("ridge lambda {lambda} must be >= 0")));
                }
            }
            LearnerSpec::KnnRegressor { k } => {
                if k == 0 {
                    return Err(Error::InvalidArgument("knn needs k >= 1".into()));
                }
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FittedLearner {
    Linear {
        spec: LearnerSpec,
        intercept: f64,
        coef: Vec<f64>,
    },
    Logistic {
        spec: LearnerSpec,
        intercept: f64,
        coef: Vec<f64>,
        converged: bool,
    },
    /// Predicts a constant, e.g. logistic fit on one-class labels.
    Constant {
        spec: LearnerSpec,
        n_features: usize,
        value: f64,
    },
    Knn {
        k: usize,
        n_features: usize,
        /// Row-major training covariates.
        x: Vec<f64>,
        y: Vec<f64>,
        w: Vec<f64>,
    },
}

impl FittedLearner {
    pub fn spec(&self) -> LearnerSpec {
        match self {
            FittedLearner::Linear { spec, .. }
            | FittedLearner::Logistic { spec, .. }
            | FittedLearner::Constant { spec, .. } => *spec,
            FittedLearner::Knn { k, .. } => LearnerSpec::KnnRegressor { k: *k },
        }
    }

    pub fn n_features(&self) -> usize {
        match self {
            FittedLearner::Linear { coef, .. } | FittedLearner::Logistic { coef, .. } => coef.len(),
            FittedLearner::Constant { n_features, .. } | FittedLearner::Knn { n_features, .. } => *n_features,
        }
    }

    pub fn predict(&self, x: ArrayView2<f64>) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features() {
            return Err(Error::Data(format!(
                "model expects {} columns, got {}",
                self.n_features(),
                x.ncols()
            )));
        }
        let linear = |b0: f64, coef: &[f64]| {
            x.rows()
                .into_iter()
                .map(|r| b0 + r.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>())
                .collect::<Vec<f64>>()
        };
        Ok(match self {
            FittedLearner::Linear { intercept, coef, .. } => linear(*intercept, coef),
            FittedLearner::Logistic { intercept, coef, .. } => {
                linear(*intercept, coef).into_iter().map(sigmoid).collect()
            }
            FittedLearner::Constant { value, .. } => vec![*value; x.nrows()],
            FittedLearner::Knn { k, n_features, x: xt, y, w } => {
                let reference = ArrayView2::from_shape((y.len(), *n_features), xt)
                    .map_err(|e| Error::Data(e.to_string()))?;
                let xs = x.as_standard_layout();
                xs.rows()
                    .into_iter()
                    .map(|q| knn_vote(&k_nearest(reference, q, *k), y, w))
                    .collect()
            }
        })
    }
}

fn knn_vote(nb: &[usize], y: &[f64], w: &[f64]) -> f64 {
    let (mut num, mut den) = (0.0, 0.0);
    for &i in nb {
        num += w[i] * y[i];
        den += w[i];
    }
    num / den
}

fn check_lengths(x: ArrayView2<f64>, y: &[f64], w: Option<&[f64]>) -> Result<()> {
    if y.len() != x.nrows() {
        return Err(Error::Data(format!("{} rows but {} labels", x.nrows(), y.len())));
    }
    if let Some(w) = w {
        if w.len() != y.len() {
            return Err(Error::Data(format!("{} rows but {} weights", y.len(), w.len())));
        }
        if w.iter().any(|v| !(v.is_finite() && *v >= 0.0)) {
            return Err(Error::Data("weights must be finite and nonnegative".into()));
        }
    }
    if y.iter().any(|v| !v.is_finite()) {
        return Err(Error::Data("labels must be finite".into()));
    }
    Ok(())
}

/// Weights rescaled so they sum to the number of positive-weight rows.
/// Unit weights come back unchanged.
fn normalized_weights(n: usize, w: Option<&[f64]>) -> Result<Vec<f64>> {
    let Some(w) = w else { return Ok(vec![1.0; n]) };
    let total: f64 = w.iter().sum();
    let m = w.iter().filter(|&&v| v > 0.0).count();
    if m == 0 {
        return Err(Error::Data("all training weights are zero".into()));
    }
    let scale = m as f64 / total;
    Ok(w.iter().map(|v| v * scale).collect())
}

/// Fits `spec` on `(x, y)`, minimizing the `w`-weighted objective normalized
/// by the weight total. Rows with zero weight are ignored.
pub fn fit(spec: &LearnerSpec, x: ArrayView2<f64>, y: &[f64], w: Option<&[f64]>) -> Result<FittedLearner> {
    spec.validate()?;
    check_lengths(x, y, w)?;
    if x.nrows() == 0 {
        return Err(Error::Data("cannot fit on zero rows".into()));
    }
    let wn = normalized_weights(y.len(), w)?;
    let f = x.ncols();
    match *spec {
        LearnerSpec::LeastSquares { lambda } => {
            let p = f + 1;
            let mut a = vec![0.0; p * p];
            let mut b = vec![0.0; p];
            let mut z = vec![0.0; p];
            for (i, row) in x.rows().into_iter().enumerate() {
                let wi = wn[i];
                if wi == 0.0 {
                    continue;
                }
                z[0] = 1.0;
                for j in 0..f {
                    z[j + 1] = row[j];
                }
                for r in 0..p {
                    let wz = wi * z[r];
                    b[r] += wz * y[i];
                    for c in r..p {
                        a[r * p + c] += wz * z[c];
                    }
                }
            }
            for r in 0..p {
                for c in 0..r {
                    a[r * p + c] = a[c * p + r];
                }
            }
            for j in 1..p {
                a[j * p + j] += lambda;
            }
            let sol = solve_spd(&a, &b)?;
            if sol.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numerical("singular normal equations; use lambda > 0".into()));
            }
            Ok(FittedLearner::Linear { spec: *spec, intercept: sol[0], coef: sol[1..].to_vec() })
        }
        LearnerSpec::LogisticClassifier { lambda } => {
            if y.iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Data("logistic labels must be 0 or 1".into()));
            }
            let used: Vec<f64> = y.iter().zip(&wn).filter(|(_, &w)| w > 0.0).map(|(&v, _)| v).collect();
            if used.iter().all(|&v| v == used[0]) {
                log::warn!("logistic fit on one-class labels; returning the constant predictor {}", used[0]);
                return Ok(FittedLearner::Constant { spec: *spec, n_features: f, value: used[0] });
            }
            let active = vec![true; f];
            let fit = fit_logistic(
                x,
                y,
                &wn,
                &IrlsOptions { lambda, max_iter: 100, tol: 1e-8, active: &active },
            )?;
            if !fit.converged {
                log::warn!("logistic fit did not converge in 100 iterations");
            }
            Ok(FittedLearner::Logistic {
                spec: *spec,
                intercept: fit.intercept,
                coef: fit.coef,
                converged: fit.converged,
            })
        }
        LearnerSpec::KnnRegressor { k } => {
            let keep: Vec<usize> = (0..y.len()).filter(|&i| wn[i] > 0.0).collect();
            if keep.len() < k {
                log::warn!("knn with k = {k} on {} training rows", keep.len());
            }
            let xt = take_rows(x, &keep);
            Ok(FittedLearner::Knn {
                k,
                n_features: f,
                x: xt.into_raw_vec_and_offset().0,
                y: keep.iter().map(|&i| y[i]).collect(),
                w: keep.iter().map(|&i| wn[i]).collect(),
            })
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LossKind {
    Logloss,
    Squared,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Weighting {
    Uniform,
    Importance,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RiskEstimate {
    pub value: f64,
    pub loss_kind: LossKind,
    pub weighting: Weighting,
    pub n: usize,
    /// Log-loss predictions that had to be clipped into `(eps, 1 - eps)`.
    pub clipped: usize,
}

fn pointwise_loss(p: f64, y: f64, kind: LossKind) -> (f64, bool) {
    match kind {
        LossKind::Squared => ((p - y).powi(2), false),
        LossKind::Logloss => {
            let c = p.clamp(LOGLOSS_EPS, 1.0 - LOGLOSS_EPS);
            (-(y * c.ln() + (1.0 - y) * (1.0 - c).ln()), c != p)
        }
    }
}

/// `(1/n) sum_i w_i loss(pred_i, y_i)`, with `w = 1` when absent.
pub fn empirical_risk(pred: &[f64], y: &[f64], kind: LossKind, w: Option<&[f64]>) -> Result<RiskEstimate> {
    if pred.len() != y.len() || w.is_some_and(|w| w.len() != y.len()) {
        return Err(Error::Data("predictions, labels and weights differ in length".into()));
    }
    if y.is_empty() {
        return Err(Error::Data("empirical risk of zero rows".into()));
    }
    let mut total = 0.0;
    let mut clipped = 0;
    for i in 0..y.len() {
        let (l, c) = pointwise_loss(pred[i], y[i], kind);
        clipped += usize::from(c);
        total += match w {
            Some(w) => w[i] * l,
            None => l,
        };
    }
    if clipped > 0 {
        log::debug!("{clipped} log-loss predictions clipped");
    }
    let value = total / y.len() as f64;
    if !value.is_finite() {
        return Err(Error::Numerical("non-finite empirical risk".into()));
    }
    Ok(RiskEstimate {
        value,
        loss_kind: kind,
        weighting: if w.is_some() { Weighting::Importance } else { Weighting::Uniform },
        n: y.len(),
        clipped,
    })
}

/// Fold of every row under a seeded shuffle: position `r` of the permutation
/// goes to fold `r mod folds`.
pub fn fold_assignment(n: usize, folds: usize, seed: u64) -> Vec<usize> {
    let mut perm: Vec<usize> = (0..n).collect();
    perm.shuffle(&mut rng::seeded(seed));
    let mut fold = vec![0; n];
    for (r, &i) in perm.iter().enumerate() {
        fold[i] = r % folds.max(1);
    }
    fold
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct CvConfig {
    pub folds: usize,
    pub repeats: usize,
    /// Fit each fold with the supplied weights too (weighted ERM); otherwise
    /// weights only enter the held-out loss.
    pub fit_weighted: bool,
}

impl Default for CvConfig {
    fn default() -> Self {
        Self { folds: DEFAULT_FOLDS, repeats: 1, fit_weighted: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvRow {
    pub spec: LearnerSpec,
    pub risk: f64,
    /// Held-out risk of every fold, repeat-major.
    pub fold_risks: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CvResult {
    pub best: usize,
    pub best_spec: LearnerSpec,
    pub table: Vec<CvRow>,
    pub loss_kind: LossKind,
    pub weighted: bool,
}

impl CvResult {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["spec", "risk", "selected"])?;
        for (i, r) in self.table.iter().enumerate() {
            w.write_record([
                serde_json::to_string(&r.spec)?,
                r.risk.to_string(),
                (i == self.best).to_string(),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }
}

fn one_class(y: &[f64], rows: &[usize]) -> bool {
    rows.iter().all(|&i| y[i] == y[rows[0]])
}

fn folds_ok(y: &[f64], fold_of: &[usize], folds: usize) -> bool {
    (0..folds).all(|f| {
        let train: Vec<usize> = (0..y.len()).filter(|&i| fold_of[i] != f).collect();
        !train.is_empty() && !one_class(y, &train)
    })
}

/// Held-out predictions for every grid point of a pure k-NN grid, sharing one
/// neighbour search per query.
fn knn_fold_predictions(
    ks: &[usize],
    x_train: ArrayView2<f64>,
    y_train: &[f64],
    w_train: &[f64],
    x_test: ArrayView2<f64>,
) -> Vec<Vec<f64>> {
    let keep: Vec<usize> = (0..y_train.len()).filter(|&i| w_train[i] > 0.0).collect();
    let xr = take_rows(x_train, &keep);
    let yr: Vec<f64> = keep.iter().map(|&i| y_train[i]).collect();
    let wr: Vec<f64> = keep.iter().map(|&i| w_train[i]).collect();
    let kmax = ks.iter().copied().max().unwrap_or(1);
    let mut out = vec![Vec::with_capacity(x_test.nrows()); ks.len()];
    for q in x_test.rows() {
        let nb = k_nearest(xr.view(), q, kmax);
        for (g, &k) in ks.iter().enumerate() {
            out[g].push(knn_vote(&nb[..k.min(nb.len())], &yr, &wr));
        }
    }
    out
}

/// Selects the grid point with the lowest mean held-out risk. Ties go to the
/// earliest grid entry. With `w` the held-out loss is importance weighted.
pub fn cross_validate(
    grid: &[LearnerSpec],
    x: ArrayView2<f64>,
    y: &[f64],
    cfg: &CvConfig,
    w: Option<&[f64]>,
    seed: u64,
) -> Result<CvResult> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let loss_kind = grid[0].loss();
    if grid.iter().any(|s| s.loss() != loss_kind) {
        return Err(Error::InvalidArgument("grid mixes classifiers and regressors".into()));
    }
    for s in grid {
        s.validate()?;
    }
    check_lengths(x, y, w)?;
    let n = y.len();
    if cfg.folds < 2 || n < cfg.folds {
        return Err(Error::InvalidArgument(format!(
            "cross-validation needs 2 <= folds <= n, got folds = {} and n = {n}",
            cfg.folds
        )));
    }
    let x = x.as_standard_layout();
    let x = x.view();
    let unit = vec![1.0; n];
    let w_all = w.unwrap_or(&unit);
    let knn_grid: Option<Vec<usize>> = grid
        .iter()
        .map(|s| match s {
            LearnerSpec::KnnRegressor { k } => Some(*k),
            _ => None,
        })
        .collect();

    let mut fold_risks = vec![Vec::new(); grid.len()];
    for rep in 0..cfg.repeats.max(1) {
        let rep_seed = rng::derive_seed(seed, rep as u64);
        let mut fold_of = fold_assignment(n, cfg.folds, rep_seed);
        if loss_kind == LossKind::Logloss && !folds_ok(y, &fold_of, cfg.folds) {
            fold_of = fold_assignment(n, cfg.folds, rng::derive_seed(rep_seed, 1));
            if !folds_ok(y, &fold_of, cfg.folds) {
                return Err(Error::Data("a training fold has a single class after reshuffling".into()));
            }
        }
        for f in 0..cfg.folds {
            let train: Vec<usize> = (0..n).filter(|&i| fold_of[i] != f).collect();
            let test: Vec<usize> = (0..n).filter(|&i| fold_of[i] == f).collect();
            let xtr = take_rows(x, &train);
            let xte = take_rows(x, &test);
            let ytr: Vec<f64> = train.iter().map(|&i| y[i]).collect();
            let yte: Vec<f64> = test.iter().map(|&i| y[i]).collect();
            let wtr: Vec<f64> = train.iter().map(|&i| w_all[i]).collect();
            let wte: Vec<f64> = test.iter().map(|&i| w_all[i]).collect();
            let fit_w = (cfg.fit_weighted && w.is_some()).then_some(wtr.as_slice());
            let held_w = w.is_some().then_some(wte.as_slice());

            let preds: Vec<Vec<f64>> = match &knn_grid {
                Some(ks) => {
                    let wn = normalized_weights(ytr.len(), fit_w)?;
                    knn_fold_predictions(ks, xtr.view(), &ytr, &wn, xte.view())
                }
                None => grid
                    .iter()
                    .map(|s| fit(s, xtr.view(), &ytr, fit_w)?.predict(xte.view()))
                    .collect::<Result<_>>()?,
            };
            for (g, p) in preds.iter().enumerate() {
                fold_risks[g].push(empirical_risk(p, &yte, loss_kind, held_w)?.value);
            }
        }
    }
    let table: Vec<CvRow> = grid
        .iter()
        .zip(fold_risks)
        .map(|(s, fr)| CvRow { spec: *s, risk: fr.iter().sum::<f64>() / fr.len() as f64, fold_risks: fr })
        .collect();
    let mut best = 0;
    for (g, r) in table.iter().enumerate() {
        if r.risk < table[best].risk {
            best = g;
        }
    }
    Ok(CvResult { best, best_spec: grid[best], table, loss_kind, weighted: w.is_some() })
}

/// Draws `n_draws` rows with replacement under `p`, then fits unweighted.
/// Returns the fit and the drawn row indices.
pub fn importance_sampled_fit(
    spec: &LearnerSpec,
    x: ArrayView2<f64>,
    y: &[f64],
    p: &[f64],
    n_draws: usize,
    seed: u64,
) -> Result<(FittedLearner, Vec<usize>)> {
    let rows = importance_sample(p, n_draws, seed)?;
    check_lengths(x, y, None)?;
    if p.len() != y.len() {
        return Err(Error::Data("sampling probabilities and rows differ in length".into()));
    }
    let xs = take_rows(x, &rows);
    let ys: Vec<f64> = rows.iter().map(|&i| y[i]).collect();
    if rows.iter().all(|&i| i == rows[0]) {
        log::warn!("importance resample holds a single distinct row");
    }
    Ok((fit(spec, xs.view(), &ys, None)?, rows))
}

/// Row indices drawn with replacement under `p`.
pub fn importance_sample(p: &[f64], n_draws: usize, seed: u64) -> Result<Vec<usize>> {
    if n_draws < 1 {
        return Err(Error::InvalidArgument("n_draws must be at least 1".into()));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-8 {
        return Err(Error::InvalidArgument(format!("sampling probabilities sum to {total}, not 1")));
    }
    let dist = WeightedIndex::new(p).map_err(|e| Error::InvalidArgument(e.to_string()))?;
    let mut r = rng::seeded(seed);
    Ok((0..n_draws).map(|_| dist.sample(&mut r)).collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumModel {
    pub stratum: usize,
    pub pool: Vec<usize>,
    pub n_train: usize,
    pub n_predicted: usize,
    pub cv: Option<CvResult>,
    pub model: FittedLearner,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RowPrediction {
    pub row: usize,
    pub stratum: usize,
    pub prediction: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratifiedFit {
    /// One entry per target row, in row order.
    pub predictions: Vec<RowPrediction>,
    pub models: Vec<StratumModel>,
}

impl StratifiedFit {
    pub fn values(&self) -> Vec<f64> {
        self.predictions.iter().map(|p| p.prediction).collect()
    }

    pub fn rows(&self) -> Vec<usize> {
        self.predictions.iter().map(|p| p.row).collect()
    }
}

pub fn predictions_csv(preds: &[RowPrediction]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "stratum", "prediction"])?;
    for p in preds {
        w.write_record([p.row.to_string(), p.stratum.to_string(), p.prediction.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

/// Cross-validates (when the grid has more than one point) and fits on the
/// given rows. The fold seed is `derive_seed(seed, stratum)`.
fn select_and_fit(
    grid: &[LearnerSpec],
    x: ArrayView2<f64>,
    y: &[f64],
    cfg: &CvConfig,
    seed: u64,
) -> Result<(Option<CvResult>, FittedLearner)> {
    let degenerate = grid[0].loss() == LossKind::Logloss && y.iter().all(|&v| v == y[0]);
    if grid.len() == 1 || degenerate {
        return Ok((None, fit(&grid[0], x, y, None)?));
    }
    let folds = cfg.folds.min(y.len());
    let cv = cross_validate(grid, x, y, &CvConfig { folds, ..*cfg }, None, seed)?;
    let model = fit(&cv.best_spec, x, y, None)?;
    Ok((Some(cv), model))
}

/// Per-stratum model selection and fit on the pooled source rows of
/// `merge_map[j]`, predicting the target rows of stratum `j`.
pub fn stratlearn_fit_predict(
    grid: &[LearnerSpec],
    d: &Dataset,
    a: &StrataAssignment,
    cfg: &CvConfig,
    seed: u64,
) -> Result<StratifiedFit> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    if a.stratum_of.len() != d.n_rows() {
        return Err(Error::Data("assignment and dataset differ in row count".into()));
    }
    let x = d.x();
    let mut predictions = Vec::with_capacity(d.n_target());
    let mut models = Vec::with_capacity(a.k);
    for j in 1..=a.k {
        let train = a.training_rows(j, d.is_source());
        let targets: Vec<usize> = a.rows_in(j).into_iter().filter(|&i| !d.is_source()[i]).collect();
        if train.is_empty() {
            if targets.is_empty() {
                continue;
            }
            return Err(Error::DegenerateStrata(format!("stratum {j} has target rows but no training rows")));
        }
        let y = d.labels_of(&train)?;
        let xtr = take_rows(x, &train);
        let (cv, model) = select_and_fit(grid, xtr.view(), &y, cfg, rng::derive_seed(seed, j as u64))
            .map_err(|e| annotate(e, j))?;
        let p = model.predict(take_rows(x, &targets).view())?;
        predictions.extend(
            targets
                .iter()
                .zip(p)
                .map(|(&row, prediction)| RowPrediction { row, stratum: j, prediction }),
        );
        models.push(StratumModel {
            stratum: j,
            pool: a.merge_map[j - 1].clone(),
            n_train: train.len(),
            n_predicted: targets.len(),
            cv,
            model,
        });
    }
    predictions.sort_by_key(|p| p.row);
    Ok(StratifiedFit { predictions, models })
}

fn annotate(e: Error, stratum: usize) -> Error {
    match e {
        Error::Data(m) => Error::Data(format!("stratum {stratum}: {m}")),
        Error::Numerical(m) => Error::Numerical(format!("stratum {stratum}: {m}")),
        other => other,
    }
}

/// Unadjusted fit on all source rows: the single-stratum case.
pub fn biased_fit_predict(grid: &[LearnerSpec], d: &Dataset, cfg: &CvConfig, seed: u64) -> Result<StratifiedFit> {
    stratlearn_fit_predict(grid, d, &StrataAssignment::single(d.n_rows()), cfg, seed)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainingMode {
    /// Weighted fit, hyperparameters by importance weighted CV of weighted fits.
    WeightedErm,
    /// Unweighted fit, hyperparameters by importance weighted CV.
    Iwcv,
    /// Resample under the weights, then ordinary CV and fit on the resample.
    ImportanceSampling,
    /// Hyperparameters by importance weighted CV, final fit on the resample.
    IwcvPlusSampling,
}

/// Importance-weighting baselines. `w` holds one weight per source row in
/// row order; predictions cover every target row.
pub fn weighted_fit_predict(
    grid: &[LearnerSpec],
    d: &Dataset,
    w: &[f64],
    mode: TrainingMode,
    cfg: &CvConfig,
    seed: u64,
) -> Result<(Vec<RowPrediction>, Option<CvResult>, FittedLearner)> {
    if grid.is_empty() {
        return Err(Error::InvalidArgument("empty hyperparameter grid".into()));
    }
    let src = d.source_rows();
    let tgt = d.target_rows();
    if w.len() != src.len() {
        return Err(Error::Data(format!("{} weights for {} source rows", w.len(), src.len())));
    }
    let x = take_rows(d.x(), &src);
    let y = d.labels_of(&src)?;
    let cv_seed = rng::derive_seed(seed, 1);
    let sample_seed = rng::derive_seed(seed, rng::streams::SAMPLING);
    let folds = cfg.folds.min(y.len());
    let iw = |fit_weighted: bool| {
        cross_validate(grid, x.view(), &y, &CvConfig { folds, fit_weighted, ..*cfg }, Some(w), cv_seed)
    };
    let resample = || -> Result<(Array2<f64>, Vec<f64>)> {
        let p = sampling_probabilities(w, src.len(), tgt.len())?;
        let rows = importance_sample(&p, src.len(), sample_seed)?;
        Ok((take_rows(x.view(), &rows), rows.iter().map(|&i| y[i]).collect()))
    };
    let (cv, model) = match mode {
        TrainingMode::WeightedErm => {
            let cv = (grid.len() > 1).then(|| iw(true)).transpose()?;
            let spec = cv.as_ref().map_or(grid[0], |c| c.best_spec);
            (cv, fit(&spec, x.view(), &y, Some(w))?)
        }
        TrainingMode::Iwcv => {
            let cv = (grid.len() > 1).then(|| iw(false)).transpose()?;
            let spec = cv.as_ref().map_or(grid[0], |c| c.best_spec);
            (cv, fit(&spec, x.view(), &y, None)?)
        }
        TrainingMode::ImportanceSampling => {
            let (xs, ys) = resample()?;
            let (cv, m) = select_and_fit(grid, xs.view(), &ys, cfg, cv_seed)?;
            (cv, m)
        }
        TrainingMode::IwcvPlusSampling => {
            let cv = (grid.len() > 1).then(|| iw(false)).transpose()?;
            let spec = cv.as_ref().map_or(grid[0], |c| c.best_spec);
            let (xs, ys) = resample()?;
            (cv, fit(&spec, xs.view(), &ys, None)?)
        }
    };
    let p = model.predict(take_rows(d.x(), &tgt).view())?;
    let preds = tgt
        .iter()
        .zip(p)
        .map(|(&row, prediction)| RowPrediction { row, stratum: 1, prediction })
        .collect();
    Ok((preds, cv, model))
}
