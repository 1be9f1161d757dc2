//! Target-side metrics: AUC and ROC, MSE, log-loss, conditional density
//! target risk, and (paired) bootstrap standard errors.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::learn::{empirical_risk, LossKind};
use crate::rng;

pub const DEFAULT_N_BOOT: usize = 400;
/// Redraws allowed for a resample that lost one of the two classes.
pub const MAX_REDRAWS: usize = 10;

fn class_counts(labels: &[f64]) -> Result<(usize, usize)> {
    let mut pos = 0;
    for &y in labels {
        if y == 1.0 {
            pos += 1;
        } else if y != 0.0 {
            return Err(Error::Data(format!("binary labels must be 0 or 1, got {y}")));
        }
    }
    Ok((pos, labels.len() - pos))
}

fn check(scores: &[f64], labels: &[f64]) -> Result<(usize, usize)> {
    if scores.len() != labels.len() {
        return Err(Error::Data("scores and labels differ in length".into()));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::Data("NaN score".into()));
    }
    let (p, n) = class_counts(labels)?;
    if p == 0 || n == 0 {
        return Err(Error::Data("AUC needs both classes".into()));
    }
    Ok((p, n))
}

/// Groups of tied scores in decreasing score order, as (positives, negatives).
fn tie_groups(scores: &[f64], labels: &[f64]) -> Vec<(usize, usize)> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut groups: Vec<(usize, usize)> = Vec::new();
    let mut prev = f64::NAN;
    for i in idx {
        if scores[i] != prev {
            groups.push((0, 0));
            prev = scores[i];
        }
        let g = groups.last_mut().expect("group exists");
        if labels[i] == 1.0 {
            g.0 += 1;
        } else {
            g.1 += 1;
        }
    }
    groups
}

/// Probability that a random positive outscores a random negative, ties
/// counting one half.
pub fn auc(scores: &[f64], labels: &[f64]) -> Result<f64> {
    let (p, n) = check(scores, labels)?;
    let mut neg_above = 0usize;
    let mut num = 0.0;
    for (gp, gn) in tie_groups(scores, labels) {
        // positives in this group beat every negative below it
        num += gp as f64 * (n - neg_above - gn) as f64 + 0.5 * (gp * gn) as f64;
        neg_above += gn;
    }
    Ok(num / (p as f64 * n as f64))
}

/// ROC points `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one per distinct score
/// threshold, with interior points on straight horizontal or vertical runs
/// dropped.
pub fn roc_curve(scores: &[f64], labels: &[f64]) -> Result<Vec<(f64, f64)>> {
    let (p, n) = check(scores, labels)?;
    let mut pts = vec![(0usize, 0usize)];
    let (mut tp, mut fp) = (0, 0);
    for (gp, gn) in tie_groups(scores, labels) {
        tp += gp;
        fp += gn;
        pts.push((fp, tp));
    }
    let mut kept: Vec<(usize, usize)> = Vec::with_capacity(pts.len());
    for (i, &pt) in pts.iter().enumerate() {
        if i > 0 && i + 1 < pts.len() {
            let (a, c) = (pts[i - 1], pts[i + 1]);
            let vertical = a.0 == pt.0 && pt.0 == c.0;
            let horizontal = a.1 == pt.1 && pt.1 == c.1;
            if vertical || horizontal {
                continue;
            }
        }
        kept.push(pt);
    }
    Ok(kept.into_iter().map(|(f, t)| (f as f64 / n as f64, t as f64 / p as f64)).collect())
}

/// Trapezoid area under a polyline of ROC points.
pub fn trapezoid_area(points: &[(f64, f64)]) -> f64 {
    points.windows(2).map(|w| (w[1].0 - w[0].0) * (w[1].1 + w[0].1) / 2.0).sum()
}

pub fn roc_csv(points: &[(f64, f64)]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["fpr", "tpr"])?;
    for (f, t) in points {
        w.write_record([f.to_string(), t.to_string()])?;
    }
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

pub fn mse(pred: &[f64], y: &[f64]) -> Result<f64> {
    Ok(empirical_risk(pred, y, LossKind::Squared, None)?.value)
}

pub fn logloss(pred: &[f64], y: &[f64]) -> Result<f64> {
    Ok(empirical_risk(pred, y, LossKind::Logloss, None)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Metric {
    Auc,
    Mse,
    Logloss,
    /// Mean of per-row losses `int f^2 - 2 f(z_i)`; the labels are unused.
    CdeTargetRisk,
}

impl Metric {
    pub fn compute(&self, pred: &[f64], y: &[f64]) -> Result<f64> {
        match self {
            Metric::Auc => auc(pred, y),
            Metric::Mse => mse(pred, y),
            Metric::Logloss => logloss(pred, y),
            Metric::CdeTargetRisk => {
                if pred.is_empty() {
                    return Err(Error::Data("no rows".into()));
                }
                Ok(pred.iter().sum::<f64>() / pred.len() as f64)
            }
        }
    }

    fn needs_both_classes(&self) -> bool {
        matches!(self, Metric::Auc)
    }

    /// Whether larger values are better.
    pub fn higher_is_better(&self) -> bool {
        matches!(self, Metric::Auc)
    }
}

/// Row indices of bootstrap replicate `r`, redrawn while a class is missing.
/// `None` when every retry lost a class.
pub fn bootstrap_indices(labels: &[f64], both_classes: bool, seed: u64, r: usize) -> Option<Vec<usize>> {
    let n = labels.len();
    let mut g = rng::seeded(rng::derive_seed(seed, r as u64));
    for _ in 0..=MAX_REDRAWS {
        let idx: Vec<usize> = (0..n).map(|_| g.random_range(0..n)).collect();
        if !both_classes {
            return Some(idx);
        }
        let pos = idx.iter().filter(|&&i| labels[i] == 1.0).count();
        if pos > 0 && pos < n {
            return Some(idx);
        }
    }
    None
}

fn sample_sd(v: &[f64]) -> f64 {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BootstrapSe {
    pub se: f64,
    pub n_boot: usize,
    pub n_valid: usize,
    pub n_skipped: usize,
}

/// Standard deviation of `metric` over `n_boot` row resamples.
pub fn bootstrap_se(metric: Metric, pred: &[f64], y: &[f64], n_boot: usize, seed: u64) -> Result<BootstrapSe> {
    let out = paired_bootstrap(metric, &[pred], y, n_boot, seed)?;
    Ok(BootstrapSe { se: out.se[0], n_boot, n_valid: out.n_valid, n_skipped: out.n_skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PairedBootstrap {
    /// Metric of each prediction set on the full evaluation rows.
    pub values: Vec<f64>,
    pub se: Vec<f64>,
    /// SE of `values[i] - values[0]` for every `i` (0 for `i = 0`).
    pub diff_se: Vec<f64>,
    pub n_boot: usize,
    pub n_valid: usize,
    pub n_skipped: usize,
}

/// Bootstrap of several prediction sets on shared resamples.
pub fn paired_bootstrap(
    metric: Metric,
    preds: &[&[f64]],
    y: &[f64],
    n_boot: usize,
    seed: u64,
) -> Result<PairedBootstrap> {
    if n_boot < 2 {
        return Err(Error::InvalidArgument("n_boot must be at least 2".into()));
    }
    if preds.is_empty() || preds.iter().any(|p| p.len() != y.len()) {
        return Err(Error::Data("prediction sets must match the evaluation rows".into()));
    }
    let values = preds.iter().map(|p| metric.compute(p, y)).collect::<Result<Vec<_>>>()?;
    let mut reps: Vec<Vec<f64>> = vec![Vec::with_capacity(n_boot); preds.len()];
    let mut skipped = 0;
    let mut pb = vec![0.0; y.len()];
    let mut yb = vec![0.0; y.len()];
    for r in 0..n_boot {
        let Some(idx) = bootstrap_indices(y, metric.needs_both_classes(), seed, r) else {
            skipped += 1;
            continue;
        };
        for (k, &i) in idx.iter().enumerate() {
            yb[k] = y[i];
        }
        for (m, p) in preds.iter().enumerate() {
            for (k, &i) in idx.iter().enumerate() {
                pb[k] = p[i];
            }
            reps[m].push(metric.compute(&pb, &yb)?);
        }
    }
    let n_valid = n_boot - skipped;
    if n_valid < 2 {
        return Err(Error::Numerical("metric undefined on nearly every bootstrap resample".into()));
    }
    if skipped > 0 {
        log::warn!("{skipped} of {n_boot} bootstrap resamples skipped");
    }
    let se = reps.iter().map(|r| sample_sd(r)).collect();
    let diff_se = reps
        .iter()
        .map(|r| {
            let d: Vec<f64> = r.iter().zip(&reps[0]).map(|(a, b)| a - b).collect();
            sample_sd(&d)
        })
        .collect();
    Ok(PairedBootstrap { values, se, diff_se, n_boot, n_valid, n_skipped: skipped })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub metric: Metric,
    pub value: f64,
    pub bootstrap_se: f64,
    pub n_boot: usize,
    pub n_skipped: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub roc_points: Option<Vec<(f64, f64)>>,
}

impl EvalReport {
    pub fn new(metric: Metric, pred: &[f64], y: &[f64], n_boot: usize, seed: u64) -> Result<Self> {
        let bs = bootstrap_se(metric, pred, y, n_boot, seed)?;
        Ok(Self {
            metric,
            value: metric.compute(pred, y)?,
            bootstrap_se: bs.se,
            n_boot,
            n_skipped: bs.n_skipped,
            roc_points: (metric == Metric::Auc).then(|| roc_curve(pred, y)).transpose()?,
        })
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}
