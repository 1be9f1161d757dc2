//! Propensity-score stratification.
//!
//! Rows are grouped by the empirical `j/k` quantiles `q_j` of the pooled
//! scores. Stratum `j` holds the rows with `q_{k-j} < e(x) <= q_{k-j+1}`
//! (`q_0 = 0`, `q_k = 1`), so stratum 1 carries the highest scores, i.e. the
//! region where source data are densest. Small source strata borrow training
//! rows from their neighbours towards stratum 1; target rows never move.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tabular::Dataset;

pub const DEFAULT_K: usize = 5;
pub const DEFAULT_MIN_SOURCE: usize = 40;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataAssignment {
    pub k: usize,
    /// Interior quantiles `q_1 <= ... <= q_{k-1}`.
    pub boundaries: Vec<f64>,
    /// Stratum of every row, `1..=k`.
    pub stratum_of: Vec<usize>,
    /// `merge_map[j - 1]`: ascending, contiguous strata whose source rows train stratum `j`.
    pub merge_map: Vec<Vec<usize>>,
    #[serde(default)]
    pub warnings: Vec<String>,
}

impl StrataAssignment {
    /// Stratum of a new score under the same boundaries.
    pub fn stratum_for_score(&self, score: f64) -> usize {
        stratum_index(&self.boundaries, score)
    }

    pub fn rows_in(&self, stratum: usize) -> Vec<usize> {
        (0..self.stratum_of.len())
            .filter(|&i| self.stratum_of[i] == stratum)
            .collect()
    }

    /// Source rows that train the model for `stratum`, in row order.
    pub fn training_rows(&self, stratum: usize, is_source: &[bool]) -> Vec<usize> {
        let pool = &self.merge_map[stratum - 1];
        (0..self.stratum_of.len())
            .filter(|&i| is_source[i] && pool.contains(&self.stratum_of[i]))
            .collect()
    }

    pub fn counts(&self, is_source: &[bool]) -> Vec<(usize, usize)> {
        let mut c = vec![(0, 0); self.k];
        for (&j, &s) in self.stratum_of.iter().zip(is_source) {
            if s {
                c[j - 1].0 += 1;
            } else {
                c[j - 1].1 += 1;
            }
        }
        c
    }

    /// Single stratum holding every row: the unadjusted ("biased") setting.
    pub fn single(n: usize) -> Self {
        Self {
            k: 1,
            boundaries: vec![],
            stratum_of: vec![1; n],
            merge_map: vec![vec![1]],
            warnings: vec![],
        }
    }
}

fn stratum_index(boundaries: &[f64], score: f64) -> usize {
    let k = boundaries.len() + 1;
    let below = boundaries.partition_point(|&q| q < score);
    k - below
}

/// Empirical order-statistic quantile at level `j / k`: the smallest sorted
/// value whose ECDF reaches the level.
fn inverse_ecdf(sorted: &[f64], j: usize, k: usize) -> f64 {
    let n = sorted.len();
    let rank = (j * n).div_ceil(k).max(1);
    sorted[rank - 1]
}

/// Assigns every row to one of `k` propensity strata.
///
/// `k = 1` is accepted and yields the single-stratum assignment.
pub fn stratify(scores: &[f64], k: usize) -> Result<StrataAssignment> {
    let n = scores.len();
    if k == 0 {
        return Err(Error::InvalidArgument("k must be at least 1".into()));
    }
    if n < k {
        return Err(Error::InvalidArgument(format!("{n} rows cannot form {k} strata")));
    }
    if let Some(bad) = scores.iter().find(|s| !(**s > 0.0 && **s < 1.0)) {
        return Err(Error::Data(format!("propensity score {bad} outside (0, 1)")));
    }
    if k == 1 {
        return Ok(StrataAssignment::single(n));
    }
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let distinct = 1 + sorted.windows(2).filter(|w| w[1] != w[0]).count();
    if distinct < k {
        return Err(Error::DegenerateStrata(format!(
            "{distinct} distinct score values for {k} strata"
        )));
    }
    let boundaries: Vec<f64> = (1..k)
        .map(|j| inverse_ecdf(&sorted, j, k))
        .collect();
    let stratum_of = scores.iter().map(|&e| stratum_index(&boundaries, e)).collect();
    Ok(StrataAssignment {
        k,
        boundaries,
        stratum_of,
        merge_map: (1..=k).map(|j| vec![j]).collect(),
        warnings: vec![],
    })
}

/// Extends the training pool of every stratum with fewer than `min_source`
/// source rows by adjacent strata towards stratum 1, until the pool is large
/// enough or stratum 1 has been added.
///
/// A stratum with target rows whose pool still has no source rows is an error.
pub fn merge_small_strata(
    a: &StrataAssignment,
    is_source: &[bool],
    min_source: usize,
) -> Result<StrataAssignment> {
    if min_source == 0 {
        return Err(Error::InvalidArgument("min_source must be at least 1".into()));
    }
    let counts = a.counts(is_source);
    let total: usize = counts.iter().map(|c| c.0).sum();
    if total < min_source {
        return Err(Error::Data(format!(
            "only {total} source rows in total, fewer than min_source = {min_source}"
        )));
    }
    let mut out = a.clone();
    for j in 1..=a.k {
        let mut pool = vec![j];
        let mut pooled = counts[j - 1].0;
        let mut next = j;
        while pooled < min_source && next > 1 {
            next -= 1;
            pool.insert(0, next);
            pooled += counts[next - 1].0;
        }
        if pooled == 0 && counts[j - 1].1 > 0 {
            return Err(Error::Data(format!(
                "stratum {j} has target rows but no source rows even after merging"
            )));
        }
        if pooled < min_source {
            out.warnings.push(format!(
                "stratum {j} trains on {pooled} source rows (< {min_source}) after merging up to stratum 1"
            ));
        }
        out.merge_map[j - 1] = pool;
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StratumSummary {
    pub stratum: usize,
    pub source_count: usize,
    pub target_count: usize,
    /// Mean label (the positive proportion for binary labels).
    pub source_label_mean: Option<f64>,
    pub target_label_mean: Option<f64>,
    /// Number of rows labeled 1, when the labels are binary.
    pub source_positives: Option<usize>,
    pub target_positives: Option<usize>,
    pub target_labeled: usize,
    pub training_strata: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrataReport {
    pub strata: Vec<StratumSummary>,
}

impl StrataReport {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record([
            "stratum",
            "source_count",
            "target_count",
            "source_label_mean",
            "target_label_mean",
            "source_positives",
            "target_positives",
            "training_strata",
        ])?;
        let opt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        let optn = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_else(|| "NA".into());
        for s in &self.strata {
            w.write_record([
                s.stratum.to_string(),
                s.source_count.to_string(),
                s.target_count.to_string(),
                opt(s.source_label_mean),
                opt(s.target_label_mean),
                optn(s.source_positives),
                optn(s.target_positives),
                s.training_strata
                    .iter()
                    .map(usize::to_string)
                    .collect::<Vec<_>>()
                    .join(";"),
            ])?;
        }
        w.into_inner().map_err(|e| Error::Data(e.to_string()))
    }
}

/// Per-stratum composition. Target label columns are `None` when no target
/// label is known.
pub fn strata_report(a: &StrataAssignment, d: &Dataset) -> Result<StrataReport> {
    if a.stratum_of.len() != d.n_rows() {
        return Err(Error::Data("assignment and dataset differ in row count".into()));
    }
    let binary = d
        .labels()
        .is_some_and(|y| y.iter().flatten().all(|&v| v == 0.0 || v == 1.0));
    let summarize = |vals: &[f64]| -> (Option<f64>, Option<usize>) {
        if vals.is_empty() {
            return (None, None);
        }
        let mean = vals.iter().sum::<f64>() / vals.len() as f64;
        let pos = binary.then(|| vals.iter().filter(|&&v| v == 1.0).count());
        (Some(mean), pos)
    };
    let strata = (1..=a.k)
        .map(|j| {
            let rows = a.rows_in(j);
            let (src, tgt): (Vec<usize>, Vec<usize>) =
                rows.iter().partition(|&&i| d.is_source()[i]);
            let ys: Vec<f64> = src.iter().filter_map(|&i| d.label(i)).collect();
            let yt: Vec<f64> = tgt.iter().filter_map(|&i| d.label(i)).collect();
            let (sm, sp) = summarize(&ys);
            let (tm, tp) = summarize(&yt);
            StratumSummary {
                stratum: j,
                source_count: src.len(),
                target_count: tgt.len(),
                source_label_mean: sm,
                target_label_mean: tm,
                source_positives: sp,
                target_positives: tp,
                target_labeled: yt.len(),
                training_strata: a.merge_map[j - 1].clone(),
            }
        })
        .collect();
    Ok(StrataReport { strata })
}
