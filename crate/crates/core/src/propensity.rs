//! Propensity score `e(x) = P(source | x)` by ridge logistic regression on the
//! pooled source and target covariates (main effects only).

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::glm::{fit_logistic, sigmoid, IrlsOptions};
use crate::tabular::Dataset;

/// Scores are clamped into `[MIN_SCORE, 1 - MIN_SCORE]` so they stay strictly
/// inside the unit interval in floating point.
pub const MIN_SCORE: f64 = 1e-12;

/// Coefficient magnitude above which the fit is reported as (near) separated.
pub const SEPARATION_CAP: f64 = 100.0;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PropensityConfig {
    pub ridge_lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for PropensityConfig {
    fn default() -> Self {
        Self { ridge_lambda: 1e-6, max_iter: 100, tol: 1e-8 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedCoefficient {
    pub name: String,
    pub value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropensityModel {
    pub intercept: f64,
    pub coefficients: Vec<NamedCoefficient>,
    pub ridge_lambda: f64,
    pub converged: bool,
    pub iterations: usize,
    /// Zero-variance columns left out of the fit (coefficient fixed at 0).
    pub excluded_columns: Vec<String>,
    pub warnings: Vec<String>,
    /// Penalized log-likelihood before the first and after every iteration.
    #[serde(skip)]
    pub objective_trace: Vec<f64>,
}

impl PropensityModel {
    pub fn slopes(&self) -> Vec<f64> {
        self.coefficients.iter().map(|c| c.value).collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("model serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// One-paragraph convergence summary for the CLI.
    pub fn diagnostics(&self) -> String {
        let max_abs = self.slopes().iter().fold(0.0f64, |m, v| m.max(v.abs()));
        let mut s = format!(
            "propensity fit: converged={} iterations={} lambda={:e} max|slope|={:.4}",
            self.converged, self.iterations, self.ridge_lambda, max_abs
        );
        for w in &self.warnings {
            s.push_str("\n  warning: ");
            s.push_str(w);
        }
        s
    }
}

/// Fits `P(s = 1 | x)` on every row of `d` by IRLS.
///
/// Non-convergence and near separation are recorded in `warnings` rather than
/// returned as errors.
pub fn fit_propensity(d: &Dataset, cfg: &PropensityConfig) -> Result<PropensityModel> {
    d.require_both_domains()?;
    if cfg.ridge_lambda < 0.0 || !cfg.ridge_lambda.is_finite() {
        return Err(Error::InvalidArgument("ridge_lambda must be nonnegative".into()));
    }
    if cfg.tol <= 0.0 {
        return Err(Error::InvalidArgument("tol must be positive".into()));
    }
    let x = d.x();
    let active: Vec<bool> = x
        .columns()
        .into_iter()
        .map(|c| c.iter().any(|&v| v != c[0]))
        .collect();
    let s: Vec<f64> = d.is_source().iter().map(|&b| if b { 1.0 } else { 0.0 }).collect();
    let w = vec![1.0; s.len()];
    let fit = fit_logistic(
        x,
        &s,
        &w,
        &IrlsOptions {
            lambda: cfg.ridge_lambda,
            max_iter: cfg.max_iter,
            tol: cfg.tol,
            active: &active,
        },
    )?;

    let mut warnings = Vec::new();
    if !fit.converged {
        warnings.push(format!("IRLS did not converge in {} iterations", cfg.max_iter));
    }
    let names = d.column_names();
    for (j, &b) in fit.coef.iter().enumerate() {
        if b.abs() > SEPARATION_CAP {
            warnings.push(format!(
                "coefficient of `{}` is {b:.3e}: source and target are nearly separable",
                names[j]
            ));
        }
    }
    for w in &warnings {
        log::warn!("{w}");
    }
    Ok(PropensityModel {
        intercept: fit.intercept,
        coefficients: names
            .iter()
            .zip(&fit.coef)
            .map(|(n, &v)| NamedCoefficient { name: n.clone(), value: v })
            .collect(),
        ridge_lambda: cfg.ridge_lambda,
        converged: fit.converged,
        iterations: fit.iterations,
        excluded_columns: (0..active.len())
            .filter(|&j| !active[j])
            .map(|j| names[j].clone())
            .collect(),
        warnings,
        objective_trace: fit.objective_trace,
    })
}

/// Elementwise `logistic(intercept + x . beta)`, strictly inside (0, 1).
pub fn predict_propensity(m: &PropensityModel, x: ArrayView2<f64>) -> Result<Vec<f64>> {
    if x.ncols() != m.coefficients.len() {
        return Err(Error::Data(format!(
            "propensity model has {} coefficients, data has {} columns",
            m.coefficients.len(),
            x.ncols()
        )));
    }
    let beta = m.slopes();
    Ok(x.rows()
        .into_iter()
        .map(|row| {
            let eta = m.intercept + row.iter().zip(&beta).map(|(a, b)| a * b).sum::<f64>();
            sigmoid(eta).clamp(MIN_SCORE, 1.0 - MIN_SCORE)
        })
        .collect())
}
