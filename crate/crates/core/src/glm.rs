//! Ridge-penalized, case-weighted logistic regression by iteratively
//! reweighted least squares with step halving.

use ndarray::ArrayView2;

use crate::error::{Error, Result};
use crate::linalg::solve_spd;

#[derive(Debug, Clone)]
pub(crate) struct LogisticFit {
    pub intercept: f64,
    /// One entry per column of the design; inactive columns stay at 0.
    pub coef: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Penalized log-likelihood at the start and after every iteration.
    pub objective_trace: Vec<f64>,
}

pub(crate) fn softplus(eta: f64) -> f64 {
    if eta > 0.0 {
        eta + (-eta).exp().ln_1p()
    } else {
        eta.exp().ln_1p()
    }
}

pub(crate) fn sigmoid(eta: f64) -> f64 {
    if eta >= 0.0 {
        1.0 / (1.0 + (-eta).exp())
    } else {
        let e = eta.exp();
        e / (1.0 + e)
    }
}

/// `sum_i w_i [y_i eta_i - log(1 + e^eta_i)] - lambda/2 |beta|^2`, intercept unpenalized.
pub(crate) fn penalized_loglik(
    x: ArrayView2<f64>,
    y: &[f64],
    w: &[f64],
    lambda: f64,
    intercept: f64,
    coef: &[f64],
) -> f64 {
    let ll: f64 = x
        .rows()
        .into_iter()
        .zip(y.iter().zip(w))
        .filter(|(_, (_, &wi))| wi != 0.0)
        .map(|(row, (&yi, &wi))| {
            let eta = intercept + row.iter().zip(coef).map(|(a, b)| a * b).sum::<f64>();
            wi * (yi * eta - softplus(eta))
        })
        .sum();
    ll - 0.5 * lambda * coef.iter().map(|b| b * b).sum::<f64>()
}

pub(crate) struct IrlsOptions<'a> {
    pub lambda: f64,
    pub max_iter: usize,
    pub tol: f64,
    /// Columns allowed to carry a coefficient.
    pub active: &'a [bool],
}

pub(crate) fn fit_logistic(
    x: ArrayView2<f64>,
    y: &[f64],
    w: &[f64],
    opts: &IrlsOptions,
) -> Result<LogisticFit> {
    let (n, f) = x.dim();
    debug_assert_eq!(y.len(), n);
    debug_assert_eq!(w.len(), n);
    let cols: Vec<usize> = (0..f).filter(|&j| opts.active[j]).collect();
    let p = cols.len() + 1;

    let mut intercept = 0.0;
    let mut coef = vec![0.0; f];
    let mut obj = penalized_loglik(x, y, w, opts.lambda, intercept, &coef);
    let mut trace = vec![obj];
    let mut converged = false;
    let mut iterations = 0;

    let mut hess = vec![0.0; p * p];
    let mut grad = vec![0.0; p];
    let mut z = vec![0.0; p];
    while iterations < opts.max_iter {
        iterations += 1;
        hess.iter_mut().for_each(|v| *v = 0.0);
        grad.iter_mut().for_each(|v| *v = 0.0);
        for (i, row) in x.rows().into_iter().enumerate() {
            let wi = w[i];
            if wi == 0.0 {
                continue;
            }
            let eta = intercept + cols.iter().map(|&j| row[j] * coef[j]).sum::<f64>();
            let mu = sigmoid(eta);
            let r = wi * (y[i] - mu);
            let v = wi * mu * (1.0 - mu);
            z[0] = 1.0;
            for (a, &j) in cols.iter().enumerate() {
                z[a + 1] = row[j];
            }
            for a in 0..p {
                grad[a] += r * z[a];
                let va = v * z[a];
                for b in a..p {
                    hess[a * p + b] += va * z[b];
                }
            }
        }
        for (a, &j) in cols.iter().enumerate() {
            grad[a + 1] -= opts.lambda * coef[j];
            hess[(a + 1) * p + a + 1] += opts.lambda;
        }
        for a in 0..p {
            for b in 0..a {
                hess[a * p + b] = hess[b * p + a];
            }
        }
        // Tiny jitter keeps the intercept-only and separated cases solvable.
        for a in 0..p {
            hess[a * p + a] += 1e-12;
        }
        let step = solve_spd(&hess, &grad)?;
        if step.iter().any(|s| !s.is_finite()) {
            return Err(Error::Numerical("non-finite Newton step in logistic fit".into()));
        }

        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..40 {
            let cand_b0 = intercept + t * step[0];
            let mut cand = coef.clone();
            for (a, &j) in cols.iter().enumerate() {
                cand[j] += t * step[a + 1];
            }
            let cand_obj = penalized_loglik(x, y, w, opts.lambda, cand_b0, &cand);
            // Near the optimum the objective is flat below rounding level, so
            // allow a decrease of that size rather than halving forever.
            if cand_obj >= obj - 1e-12 * (1.0 + obj.abs()) {
                accepted = Some((cand_b0, cand, cand_obj, t));
                break;
            }
            t *= 0.5;
        }
        let Some((b0, cand, cand_obj, t)) = accepted else {
            // No ascent direction left at machine precision.
            converged = true;
            trace.push(obj);
            break;
        };
        let max_update = step.iter().map(|s| (t * s).abs()).fold(0.0, f64::max);
        intercept = b0;
        coef = cand;
        obj = cand_obj;
        trace.push(obj);
        if max_update < opts.tol {
            converged = true;
            break;
        }
    }
    Ok(LogisticFit {
        intercept,
        coef,
        iterations,
        converged,
        objective_trace: trace,
    })
}
