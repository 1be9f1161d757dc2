//! Covariate and predicted-outcome balance diagnostics within strata.

use serde::{Deserialize, Serialize};
use statrs::function::factorial::ln_factorial;

use crate::error::{Error, Result};
use crate::strata::StrataAssignment;
use crate::tabular::Dataset;

pub const DEFAULT_MIN_PER_SIDE: usize = 20;
pub const DEFAULT_THRESHOLD: f64 = 0.5;

fn mean_var(v: &[f64]) -> (f64, f64) {
    let n = v.len() as f64;
    let m = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0);
    (m, var)
}

/// Absolute standardized mean difference
/// `|mean_S - mean_T| / sqrt((var_S + var_T) / 2)` with `n - 1` variances.
///
/// Zero pooled variance gives 0 for equal means and `+inf` otherwise.
pub fn smd(source: &[f64], target: &[f64]) -> Result<f64> {
    if source.len() < 2 || target.len() < 2 {
        return Err(Error::Data(format!(
            "SMD needs at least two values per side, got {} and {}",
            source.len(),
            target.len()
        )));
    }
    let (ms, vs) = mean_var(source);
    let (mt, vt) = mean_var(target);
    let pooled = ((vs + vt) / 2.0).sqrt();
    let diff = (ms - mt).abs();
    Ok(if pooled > 0.0 {
        diff / pooled
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    })
}

/// Two-sample Kolmogorov-Smirnov statistic `sup_x |F_S(x) - F_T(x)|`.
pub fn ks_statistic(source: &[f64], target: &[f64]) -> Result<f64> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::Data("KS statistic needs nonempty samples".into()));
    }
    let mut a = source.to_vec();
    let mut b = target.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let (mut i, mut j) = (0, 0);
    let mut d: f64 = 0.0;
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / na - j as f64 / nb).abs());
    }
    Ok(d)
}

fn ln_table_prob(a: u64, b: u64, c: u64, d: u64) -> f64 {
    let n = a + b + c + d;
    ln_factorial(a + b) + ln_factorial(c + d) + ln_factorial(a + c) + ln_factorial(b + d)
        - ln_factorial(n)
        - ln_factorial(a)
        - ln_factorial(b)
        - ln_factorial(c)
        - ln_factorial(d)
}

/// Two-sided Fisher exact test on `[[a, b], [c, d]]`: total probability of the
/// tables with the observed margins that are no more probable than the
/// observed one.
pub fn fisher_exact_2x2(a: u64, b: u64, c: u64, d: u64) -> Result<f64> {
    if a + b + c + d == 0 {
        return Err(Error::InvalidArgument("Fisher test on an all-zero table".into()));
    }
    let (r1, c1, n) = (a + b, a + c, a + b + c + d);
    let lo = c1.saturating_sub(n - r1);
    let hi = r1.min(c1);
    let ln_obs = ln_table_prob(a, b, c, d);
    // relative tolerance for floating-point ties, as in common implementations
    let cutoff = ln_obs + 1e-7f64.ln_1p();
    let mut p = 0.0;
    for x in lo..=hi {
        let lp = ln_table_prob(x, r1 - x, c1 - x, n + x - r1 - c1);
        if lp <= cutoff {
            p += lp.exp();
        }
    }
    Ok(p.min(1.0))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CovariateBalance {
    pub covariate: String,
    pub smd: f64,
    pub ks: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Aggregate {
    pub mean_smd: f64,
    pub sd_smd: f64,
    pub mean_ks: f64,
    pub sd_ks: f64,
}

impl Aggregate {
    fn of(rows: &[CovariateBalance]) -> Self {
        let ms = |v: Vec<f64>| {
            let n = v.len() as f64;
            let m = v.iter().sum::<f64>() / n;
            let sd = if v.len() > 1 {
                (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / (n - 1.0)).sqrt()
            } else {
                0.0
            };
            (m, sd)
        };
        let (mean_smd, sd_smd) = ms(rows.iter().map(|r| r.smd).collect());
        let (mean_ks, sd_ks) = ms(rows.iter().map(|r| r.ks).collect());
        Self { mean_smd, sd_smd, mean_ks, sd_ks }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumBalance {
    pub stratum: usize,
    pub source_count: usize,
    pub target_count: usize,
    /// Empty when either side has fewer than `min_per_side` rows.
    pub covariates: Vec<CovariateBalance>,
    pub summary: Option<Aggregate>,
    /// `1 - mean_smd / raw mean_smd` (ratio of averages).
    pub smd_improvement: Option<f64>,
    pub ks_improvement: Option<f64>,
}

impl StratumBalance {
    pub fn sufficient(&self) -> bool {
        self.summary.is_some()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceReport {
    pub min_per_side: usize,
    pub raw: Vec<CovariateBalance>,
    pub raw_summary: Aggregate,
    pub strata: Vec<StratumBalance>,
}

impl BalanceReport {
    /// Mean over sufficient strata of the within-stratum mean SMD.
    pub fn mean_stratum_smd(&self) -> Option<f64> {
        let v: Vec<f64> = self
            .strata
            .iter()
            .filter_map(|s| s.summary.map(|a| a.mean_smd))
            .collect();
        (!v.is_empty()).then(|| v.iter().sum::<f64>() / v.len() as f64)
    }

    /// Long format: `stratum,covariate,smd,ks`, with `raw` rows first.
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stratum", "covariate", "smd", "ks"])?;
        for c in &self.raw {
            w.write_record(["raw", &c.covariate, &c.smd.to_string(), &c.ks.to_string()])?;
        }
        for s in &self.strata {
            if s.covariates.is_empty() {
                w.write_record([&s.stratum.to_string(), "*", "insufficient data", "insufficient data"])?;
            }
            for c in &s.covariates {
                w.write_record([&s.stratum.to_string(), &c.covariate, &c.smd.to_string(), &c.ks.to_string()])?;
            }
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }

    /// Raw versus within-stratum SMD/KS per covariate, for scatter plots.
    pub fn scatter_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["stratum", "covariate", "raw_smd", "stratum_smd", "raw_ks", "stratum_ks"])?;
        for s in self.strata.iter().filter(|s| s.sufficient()) {
            for (c, r) in s.covariates.iter().zip(&self.raw) {
                w.write_record([
                    s.stratum.to_string(),
                    c.covariate.clone(),
                    r.smd.to_string(),
                    c.smd.to_string(),
                    r.ks.to_string(),
                    c.ks.to_string(),
                ])?;
            }
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }
}

fn column_balance(d: &Dataset, src: &[usize], tgt: &[usize]) -> Result<Vec<CovariateBalance>> {
    let x = d.x();
    d.column_names()
        .iter()
        .enumerate()
        .map(|(j, name)| {
            let a: Vec<f64> = src.iter().map(|&i| x[[i, j]]).collect();
            let b: Vec<f64> = tgt.iter().map(|&i| x[[i, j]]).collect();
            Ok(CovariateBalance {
                covariate: name.clone(),
                smd: smd(&a, &b)?,
                ks: ks_statistic(&a, &b)?,
            })
        })
        .collect()
}

/// SMD and KS of every covariate, unstratified and within each stratum.
/// Strata with fewer than `min_per_side` source or target rows are reported
/// without statistics.
pub fn balance_report(d: &Dataset, a: &StrataAssignment, min_per_side: usize) -> Result<BalanceReport> {
    if a.stratum_of.len() != d.n_rows() {
        return Err(Error::Data("assignment and dataset differ in row count".into()));
    }
    let raw = column_balance(d, &d.source_rows(), &d.target_rows())?;
    let raw_summary = Aggregate::of(&raw);
    let need = min_per_side.max(2);
    let strata = (1..=a.k)
        .map(|j| {
            let (src, tgt): (Vec<usize>, Vec<usize>) =
                a.rows_in(j).into_iter().partition(|&i| d.is_source()[i]);
            let ok = src.len() >= need && tgt.len() >= need;
            let covariates = if ok { column_balance(d, &src, &tgt)? } else { vec![] };
            let summary = ok.then(|| Aggregate::of(&covariates));
            Ok(StratumBalance {
                stratum: j,
                source_count: src.len(),
                target_count: tgt.len(),
                smd_improvement: summary.map(|s| 1.0 - s.mean_smd / raw_summary.mean_smd),
                ks_improvement: summary.map(|s| 1.0 - s.mean_ks / raw_summary.mean_ks),
                covariates,
                summary,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(BalanceReport { min_per_side, raw, raw_summary, strata })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutcomeBalance {
    pub stratum: usize,
    pub source_count: usize,
    pub target_count: usize,
    pub source_positive: usize,
    pub target_positive: usize,
    pub source_proportion: Option<f64>,
    pub target_proportion: Option<f64>,
    /// `None` when one side of the stratum is empty.
    pub p_value: Option<f64>,
}

/// Thresholded predicted labels per stratum, compared across domains with
/// Fisher's exact test.
pub fn predicted_outcome_balance(
    predictions: &[f64],
    is_source: &[bool],
    a: &StrataAssignment,
    threshold: f64,
) -> Result<Vec<OutcomeBalance>> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument("threshold must lie in (0, 1)".into()));
    }
    if predictions.len() != is_source.len() || predictions.len() != a.stratum_of.len() {
        return Err(Error::Data("predictions, indicator and strata differ in length".into()));
    }
    (1..=a.k)
        .map(|j| {
            let mut c = [[0u64; 2]; 2]; // [domain][predicted positive]
            for i in a.rows_in(j) {
                let dom = usize::from(!is_source[i]);
                let pos = usize::from(predictions[i] > threshold);
                c[dom][pos] += 1;
            }
            let ns = c[0][0] + c[0][1];
            let nt = c[1][0] + c[1][1];
            let prop = |pos: u64, n: u64| (n > 0).then(|| pos as f64 / n as f64);
            let p_value = if ns > 0 && nt > 0 {
                Some(fisher_exact_2x2(c[0][1], c[0][0], c[1][1], c[1][0])?)
            } else {
                None
            };
            Ok(OutcomeBalance {
                stratum: j,
                source_count: ns as usize,
                target_count: nt as usize,
                source_positive: c[0][1] as usize,
                target_positive: c[1][1] as usize,
                source_proportion: prop(c[0][1], ns),
                target_proportion: prop(c[1][1], nt),
                p_value,
            })
        })
        .collect()
}
