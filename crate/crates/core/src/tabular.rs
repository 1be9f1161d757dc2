//! Data model, CSV ingestion, covariate standardization and synthetic
//! covariate shift by beta-density rejection sampling.

use std::collections::HashSet;
use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::function::beta::ln_beta;

use crate::error::{Error, Result};
use crate::rng;

/// Covariates, optional labels and the source/target indicator of every row.
///
/// Labels are stored as `Option<f64>` per row so an unknown target label is
/// never confused with a zero.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    x: Array2<f64>,
    labels: Option<Vec<Option<f64>>>,
    is_source: Vec<bool>,
    column_names: Vec<String>,
    label_name: String,
    indicator_name: String,
}

impl Dataset {
    pub fn new(
        x: Array2<f64>,
        labels: Option<Vec<Option<f64>>>,
        is_source: Vec<bool>,
        column_names: Vec<String>,
    ) -> Result<Self> {
        let (n, f) = x.dim();
        if n == 0 || f == 0 {
            return Err(Error::Data(format!("dataset must have rows and covariates, got {n}x{f}")));
        }
        if column_names.len() != f {
            return Err(Error::Data(format!(
                "{} column names for {f} covariates",
                column_names.len()
            )));
        }
        if is_source.len() != n {
            return Err(Error::Data("indicator length differs from row count".into()));
        }
        if let Some((i, _)) = x.indexed_iter().find(|(_, v)| !v.is_finite()) {
            return Err(Error::Cell {
                row: i.0 + 1,
                column: column_names[i.1].clone(),
                message: "non-finite covariate".into(),
            });
        }
        if let Some(y) = &labels {
            if y.len() != n {
                return Err(Error::Data("label length differs from row count".into()));
            }
            for (i, (yi, &src)) in y.iter().zip(&is_source).enumerate() {
                match yi {
                    None if src => {
                        return Err(Error::Data(format!("source row {} has no label", i + 1)))
                    }
                    Some(v) if !v.is_finite() => {
                        return Err(Error::Data(format!("row {} has a non-finite label", i + 1)))
                    }
                    _ => {}
                }
            }
        }
        Ok(Self {
            x,
            labels,
            is_source,
            column_names,
            label_name: "y".into(),
            indicator_name: "s".into(),
        })
    }

    pub fn with_column_roles(mut self, label_name: &str, indicator_name: &str) -> Self {
        self.label_name = label_name.into();
        self.indicator_name = indicator_name.into();
        self
    }

    pub fn n_rows(&self) -> usize {
        self.x.nrows()
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    pub fn x(&self) -> ArrayView2<'_, f64> {
        self.x.view()
    }

    pub fn labels(&self) -> Option<&[Option<f64>]> {
        self.labels.as_deref()
    }

    pub fn label(&self, row: usize) -> Option<f64> {
        self.labels.as_ref().and_then(|y| y[row])
    }

    pub fn is_source(&self) -> &[bool] {
        &self.is_source
    }

    pub fn column_names(&self) -> &[String] {
        &self.column_names
    }

    pub fn label_name(&self) -> &str {
        &self.label_name
    }

    pub fn indicator_name(&self) -> &str {
        &self.indicator_name
    }

    pub fn source_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| self.is_source[i]).collect()
    }

    pub fn target_rows(&self) -> Vec<usize> {
        (0..self.n_rows()).filter(|&i| !self.is_source[i]).collect()
    }

    pub fn n_source(&self) -> usize {
        self.is_source.iter().filter(|&&s| s).count()
    }

    pub fn n_target(&self) -> usize {
        self.n_rows() - self.n_source()
    }

    /// Fails unless both domains are represented.
    pub fn require_both_domains(&self) -> Result<()> {
        let ns = self.n_source();
        if ns == 0 || ns == self.n_rows() {
            return Err(Error::Data(format!(
                "need source and target rows, got {ns} source and {} target",
                self.n_target()
            )));
        }
        Ok(())
    }

    /// Labels of `rows`, failing if any is unknown.
    pub fn labels_of(&self, rows: &[usize]) -> Result<Vec<f64>> {
        rows.iter()
            .map(|&i| {
                self.label(i)
                    .ok_or_else(|| Error::Data(format!("row {} has no label", i + 1)))
            })
            .collect()
    }

    /// True when every row, including targets, carries a label.
    pub fn fully_labeled(&self) -> bool {
        self.labels
            .as_ref()
            .is_some_and(|y| y.iter().all(Option::is_some))
    }

    pub fn with_indicator(&self, is_source: Vec<bool>) -> Result<Self> {
        let mut d = Dataset::new(
            self.x.clone(),
            self.labels.clone(),
            is_source,
            self.column_names.clone(),
        )?;
        d.label_name.clone_from(&self.label_name);
        d.indicator_name.clone_from(&self.indicator_name);
        Ok(d)
    }

    pub fn with_covariates(&self, x: Array2<f64>, column_names: Vec<String>) -> Result<Self> {
        let mut d = Dataset::new(x, self.labels.clone(), self.is_source.clone(), column_names)?;
        d.label_name.clone_from(&self.label_name);
        d.indicator_name.clone_from(&self.indicator_name);
        Ok(d)
    }

    /// Subset of rows, in the given order.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Self> {
        let x = crate::neighbors::take_rows(self.x.view(), rows);
        let labels = self
            .labels
            .as_ref()
            .map(|y| rows.iter().map(|&i| y[i]).collect());
        let s = rows.iter().map(|&i| self.is_source[i]).collect();
        let mut d = Dataset::new(x, labels, s, self.column_names.clone())?;
        d.label_name.clone_from(&self.label_name);
        d.indicator_name.clone_from(&self.indicator_name);
        Ok(d)
    }

    /// Appends independent standard normal covariates named `noise1`, `noise2`, ...
    pub fn with_noise_covariates(&self, count: usize, seed: u64) -> Result<Self> {
        use rand_distr::{Distribution, StandardNormal};
        let (n, f) = self.x.dim();
        let mut r = rng::seeded(seed);
        let mut x = Array2::zeros((n, f + count));
        x.slice_mut(ndarray::s![.., ..f]).assign(&self.x);
        for i in 0..n {
            for j in 0..count {
                x[[i, f + j]] = StandardNormal.sample(&mut r);
            }
        }
        let mut names = self.column_names.clone();
        names.extend((1..=count).map(|j| format!("noise{j}")));
        self.with_covariates(x, names)
    }

    pub fn column_index(&self, name: &str) -> Result<usize> {
        self.column_names
            .iter()
            .position(|c| c == name)
            .ok_or_else(|| Error::InvalidArgument(format!("no covariate named `{name}`")))
    }

    /// Writes covariates, then the label column (when present), then the indicator.
    pub fn write_csv<W: Write>(&self, out: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(out);
        let mut header: Vec<&str> = self.column_names.iter().map(String::as_str).collect();
        if self.labels.is_some() {
            header.push(&self.label_name);
        }
        header.push(&self.indicator_name);
        w.write_record(&header)?;
        let mut record = Vec::with_capacity(header.len());
        for i in 0..self.n_rows() {
            record.clear();
            record.extend(self.x.row(i).iter().map(|v| v.to_string()));
            if let Some(y) = &self.labels {
                record.push(y[i].map(|v| v.to_string()).unwrap_or_default());
            }
            record.push(if self.is_source[i] { "1" } else { "0" }.to_string());
            w.write_record(&record)?;
        }
        w.flush().map_err(|e| Error::io("<csv output>", e))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let f = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(f))
    }
}

/// Reads a dataset from a CSV file with a header row.
///
/// Every column other than the label and indicator columns is a covariate.
/// Without an indicator column all rows are treated as source rows.
pub fn load_csv(
    path: &Path,
    label_column: Option<&str>,
    indicator_column: Option<&str>,
) -> Result<Dataset> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, label_column, indicator_column)
}

pub fn read_csv<R: Read>(
    input: R,
    label_column: Option<&str>,
    indicator_column: Option<&str>,
) -> Result<Dataset> {
    let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(input);
    let header: Vec<String> = rdr.headers()?.iter().map(|h| h.trim().to_string()).collect();

    let mut seen = HashSet::new();
    for h in &header {
        if !seen.insert(h.as_str()) {
            return Err(Error::Data(format!("duplicate column name `{h}`")));
        }
    }
    let find = |name: &str| {
        header
            .iter()
            .position(|h| h == name)
            .ok_or_else(|| Error::Data(format!("column `{name}` not found in header")))
    };
    let label_idx = label_column.map(find).transpose()?;
    let indicator_idx = indicator_column.map(find).transpose()?;
    let covariates: Vec<usize> = (0..header.len())
        .filter(|&j| Some(j) != label_idx && Some(j) != indicator_idx)
        .collect();

    let mut values = Vec::new();
    let mut labels = Vec::new();
    let mut is_source = Vec::new();
    for (r, record) in rdr.records().enumerate() {
        let record = record?;
        let row = r + 1;
        let cell = |j: usize| record.get(j).map(str::trim).unwrap_or("");
        for &j in &covariates {
            let v: f64 = cell(j).parse().map_err(|_| Error::Cell {
                row,
                column: header[j].clone(),
                message: format!("`{}` is not a number", cell(j)),
            })?;
            if !v.is_finite() {
                return Err(Error::Cell {
                    row,
                    column: header[j].clone(),
                    message: "non-finite covariate".into(),
                });
            }
            values.push(v);
        }
        let src = match indicator_idx {
            None => true,
            Some(j) => match cell(j) {
                "1" | "1.0" => true,
                "0" | "0.0" => false,
                other => {
                    return Err(Error::Cell {
                        row,
                        column: header[j].clone(),
                        message: format!("indicator must be 0 or 1, got `{other}`"),
                    })
                }
            },
        };
        is_source.push(src);
        if let Some(j) = label_idx {
            let raw = cell(j);
            let y = if raw.is_empty() {
                None
            } else {
                Some(raw.parse::<f64>().map_err(|_| Error::Cell {
                    row,
                    column: header[j].clone(),
                    message: format!("`{raw}` is not a number"),
                })?)
            };
            labels.push(y);
        }
    }
    let n = is_source.len();
    if n == 0 {
        return Err(Error::Data("no data rows".into()));
    }
    let x = Array2::from_shape_vec((n, covariates.len()), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    let names = covariates.iter().map(|&j| header[j].clone()).collect();
    let d = Dataset::new(x, label_idx.map(|_| labels), is_source, names)?;
    Ok(d.with_column_roles(
        label_column.unwrap_or("y"),
        indicator_column.unwrap_or("s"),
    ))
}

/// Per-column affine transform recorded by [`standardize`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ColumnScale {
    pub name: String,
    pub mean: f64,
    pub scale: f64,
    /// Zero-variance column, passed through unchanged.
    pub constant: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StandardizationRecord {
    pub columns: Vec<ColumnScale>,
}

impl StandardizationRecord {
    pub fn apply(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        if x.ncols() != self.columns.len() {
            return Err(Error::Data(format!(
                "expected {} columns, got {}",
                self.columns.len(),
                x.ncols()
            )));
        }
        let mut out = x.to_owned();
        for (mut col, c) in out.axis_iter_mut(Axis(1)).zip(&self.columns) {
            if !c.constant {
                col.mapv_inplace(|v| (v - c.mean) / c.scale);
            }
        }
        Ok(out)
    }

    pub fn constant_columns(&self) -> Vec<usize> {
        (0..self.columns.len())
            .filter(|&j| self.columns[j].constant)
            .collect()
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("record serializes")
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }
}

/// Centers and scales every covariate to sample mean 0 and sample standard
/// deviation 1 (n - 1 denominator), over all rows.
pub fn standardize(d: &Dataset) -> Result<(Dataset, StandardizationRecord)> {
    let n = d.n_rows();
    if n < 2 {
        return Err(Error::Data("standardization needs at least two rows".into()));
    }
    let columns = d
        .x
        .axis_iter(Axis(1))
        .zip(&d.column_names)
        .map(|(col, name)| {
            let mean = col.sum() / n as f64;
            let var = col.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
            let sd = var.sqrt();
            if sd > 0.0 && sd.is_finite() {
                ColumnScale { name: name.clone(), mean, scale: sd, constant: false }
            } else {
                log::warn!("column `{name}` has zero variance; left unscaled");
                ColumnScale { name: name.clone(), mean: 0.0, scale: 1.0, constant: true }
            }
        })
        .collect();
    let record = StandardizationRecord { columns };
    let x = record.apply(d.x())?;
    Ok((d.with_covariates(x, d.column_names.clone())?, record))
}

/// Parameters of the beta-density rejection shift.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ShiftSpec {
    pub beta_a: f64,
    pub beta_b: f64,
    pub shift_column: usize,
    pub seed: u64,
}

impl ShiftSpec {
    pub fn medium(shift_column: usize, seed: u64) -> Self {
        Self { beta_a: 13.0, beta_b: 4.0, shift_column, seed }
    }

    pub fn weak(shift_column: usize, seed: u64) -> Self {
        Self { beta_a: 9.0, beta_b: 4.0, shift_column, seed }
    }

    pub fn strong(shift_column: usize, seed: u64) -> Self {
        Self { beta_a: 18.0, beta_b: 4.0, shift_column, seed }
    }
}

fn beta_ln_pdf(u: f64, a: f64, b: f64, ln_norm: f64) -> f64 {
    let lx = if a == 1.0 { 0.0 } else { (a - 1.0) * u.ln() };
    let l1x = if b == 1.0 { 0.0 } else { (b - 1.0) * (1.0 - u).ln() };
    lx + l1x - ln_norm
}

/// Target-assignment probabilities `f(u) / max f` at the min-max rescaled
/// column values `u`.
///
/// For `a, b >= 1` the maximum is analytic: the mode when both exceed 1, else
/// the density at the boundary it peaks on. When either parameter is below 1
/// the density is unbounded and the maximum over the observed values is used,
/// with values kept inside the open interval.
pub fn acceptance_probabilities(column: &[f64], a: f64, b: f64) -> Result<Vec<f64>> {
    if !(a > 0.0 && b > 0.0 && a.is_finite() && b.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "beta parameters must be positive, got ({a}, {b})"
        )));
    }
    let lo = column.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = column.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !(hi > lo) {
        return Err(Error::Data("shift column is constant".into()));
    }
    let ln_norm = ln_beta(a, b);
    let eps = 1e-12;
    let rescaled: Vec<f64> = column.iter().map(|&v| (v - lo) / (hi - lo)).collect();
    let ln_max = if a >= 1.0 && b >= 1.0 {
        let peak = if a > 1.0 && b > 1.0 {
            (a - 1.0) / (a + b - 2.0)
        } else if a == 1.0 && b == 1.0 {
            0.5
        } else if a == 1.0 {
            0.0
        } else {
            1.0
        };
        beta_ln_pdf(peak, a, b, ln_norm)
    } else {
        rescaled
            .iter()
            .map(|&u| beta_ln_pdf(u.clamp(eps, 1.0 - eps), a, b, ln_norm))
            .fold(f64::NEG_INFINITY, f64::max)
    };
    Ok(rescaled
        .iter()
        .map(|&u| {
            let u = if a >= 1.0 && b >= 1.0 { u } else { u.clamp(eps, 1.0 - eps) };
            (beta_ln_pdf(u, a, b, ln_norm) - ln_max).exp().min(1.0)
        })
        .collect())
}

/// Reassigns every row to the target domain with probability given by the
/// normalized beta density of its rescaled shift column; the remaining rows
/// become source rows. Row order, covariates and labels are unchanged.
pub fn simulate_shift(d: &Dataset, spec: &ShiftSpec) -> Result<Dataset> {
    if d.n_rows() < 2 {
        return Err(Error::Data("shift simulation needs at least two rows".into()));
    }
    if spec.shift_column >= d.n_features() {
        return Err(Error::InvalidArgument(format!(
            "shift column {} out of range for {} covariates",
            spec.shift_column,
            d.n_features()
        )));
    }
    if !d.fully_labeled() {
        return Err(Error::Data("shift simulation requires every row to be labeled".into()));
    }
    let column = d.x.column(spec.shift_column).to_vec();
    let accept = acceptance_probabilities(&column, spec.beta_a, spec.beta_b)?;
    let mut r = rng::seeded(spec.seed);
    let is_source = accept
        .iter()
        .map(|&p| r.random::<f64>() >= p)
        .collect();
    d.with_indicator(is_source)
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn ds(x: Array2<f64>) -> Dataset {
        let n = x.nrows();
        let names = (0..x.ncols()).map(|j| format!("x{j}")).collect();
        Dataset::new(x, Some(vec![Some(1.0); n]), vec![true; n], names).unwrap()
    }

    #[test]
    fn parses_small_file() {
        let text = "x1,x2,y,s\n1,2,0,1\n3,4.5,1,0\n-1,0,1,1\n";
        let d = read_csv(text.as_bytes(), Some("y"), Some("s")).unwrap();
        assert_eq!((d.n_rows(), d.n_features()), (3, 2));
        assert_eq!(d.is_source(), &[true, false, true]);
        assert_eq!(d.x()[[1, 1]], 4.5);
        assert_eq!(d.label(1), Some(1.0));
    }

    #[test]
    fn bad_indicator_names_row_and_column() {
        let text = "x1,x2,y,s\n1,2,0,1\n3,4,1,2\n";
        let err = read_csv(text.as_bytes(), Some("y"), Some("s")).unwrap_err();
        match err {
            Error::Cell { row, column, .. } => {
                assert_eq!(row, 2);
                assert_eq!(column, "s");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn missing_target_labels_are_explicit() {
        let text = "x1,y,s\n1,0,1\n2,,0\n3,1,1\n";
        let d = read_csv(text.as_bytes(), Some("y"), Some("s")).unwrap();
        assert_eq!(d.label(1), None);
        assert_eq!(d.labels().unwrap()[0], Some(0.0));
        assert!(!d.fully_labeled());
    }

    #[test]
    fn missing_source_label_rejected() {
        let text = "x1,y,s\n1,,1\n2,1,0\n";
        assert!(read_csv(text.as_bytes(), Some("y"), Some("s")).is_err());
    }

    #[test]
    fn ingestion_errors() {
        assert!(read_csv("a,a\n1,2\n".as_bytes(), None, None).is_err());
        let e = read_csv("a,b\n1,x\n".as_bytes(), None, None).unwrap_err();
        assert!(matches!(e, Error::Cell { row: 1, .. }));
        let e = read_csv("a,b\n1,inf\n".as_bytes(), None, None).unwrap_err();
        assert!(matches!(e, Error::Cell { .. }));
        assert!(load_csv(Path::new("/nonexistent/file.csv"), None, None).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_values() {
        let text = "a,b,y,s\n0.1,2,,0\n3,-4e-7,1.5,1\n";
        let d = read_csv(text.as_bytes(), Some("y"), Some("s")).unwrap();
        let mut buf = Vec::new();
        d.write_csv(&mut buf).unwrap();
        let back = read_csv(buf.as_slice(), Some("y"), Some("s")).unwrap();
        assert_eq!(d, back);
    }

    #[test]
    fn standardizes_to_unit_sd() {
        let (s, rec) = standardize(&ds(array![[1.0, 5.0], [2.0, 5.0], [3.0, 5.0]])).unwrap();
        let col: Vec<f64> = s.x().column(0).to_vec();
        assert!((col[0] + 1.0).abs() < 1e-12 && col[1].abs() < 1e-12 && (col[2] - 1.0).abs() < 1e-12);
        assert_eq!(s.x().column(1).to_vec(), vec![5.0; 3]);
        assert!(rec.columns[1].constant && !rec.columns[0].constant);
        assert_eq!(rec.constant_columns(), vec![1]);
    }

    #[test]
    fn record_reapplies_identically_and_serializes() {
        let a = ds(array![[1.0, 0.0], [4.0, 2.0], [2.0, 7.0]]);
        let (sa, rec) = standardize(&a).unwrap();
        assert_eq!(rec.apply(a.x()).unwrap(), sa.x().to_owned());
        let back = StandardizationRecord::from_toml(&rec.to_toml()).unwrap();
        assert_eq!(back, rec);
        let other = array![[3.0, 1.0]];
        assert_eq!(back.apply(other.view()).unwrap(), rec.apply(other.view()).unwrap());
        assert!(rec.apply(array![[1.0]].view()).is_err());
    }

    #[test]
    fn beta_mode_accepts_with_probability_one() {
        // rescaled values 0, 0.8, 1
        let p = acceptance_probabilities(&[0.0, 8.0, 10.0], 13.0, 4.0).unwrap();
        assert_eq!(p[1], 1.0);
        assert_eq!(p[0], 0.0);
        assert!(p[2] == 0.0);
        assert!(acceptance_probabilities(&[0.0, 1.0], 0.0, 4.0).is_err());
        assert!(acceptance_probabilities(&[0.0, 1.0], 2.0, -1.0).is_err());
    }

    #[test]
    fn boundary_peaked_betas_are_normalized() {
        let p = acceptance_probabilities(&[0.0, 0.5, 1.0], 1.0, 3.0).unwrap();
        assert!((p[0] - 1.0).abs() < 1e-12);
        assert!((p[1] - 0.25).abs() < 1e-12);
        let p = acceptance_probabilities(&[0.0, 0.5, 1.0], 1.0, 1.0).unwrap();
        assert!(p.iter().all(|&v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn shift_rejects_bad_inputs() {
        let d = ds(array![[0.0], [1.0], [2.0]]);
        let mut spec = ShiftSpec::medium(0, 1);
        spec.beta_b = 0.0;
        assert!(simulate_shift(&d, &spec).is_err());
        assert!(simulate_shift(&ds(array![[0.0]]), &ShiftSpec::medium(0, 1)).is_err());
        assert!(simulate_shift(&d, &ShiftSpec::medium(3, 1)).is_err());
    }

    #[test]
    fn shift_is_seeded_and_touches_only_indicator() {
        let x = Array2::from_shape_fn((200, 2), |(i, j)| (i * (j + 1)) as f64 * 0.01);
        let d = ds(x);
        let a = simulate_shift(&d, &ShiftSpec::medium(0, 42)).unwrap();
        let b = simulate_shift(&d, &ShiftSpec::medium(0, 42)).unwrap();
        assert_eq!(a.is_source(), b.is_source());
        assert_eq!(a.x(), d.x());
        assert_eq!(a.labels(), d.labels());
        assert!(a.n_target() > 0 && a.n_source() > 0);
    }

    #[test]
    fn noise_covariates_are_appended() {
        let d = ds(array![[1.0], [2.0]]).with_noise_covariates(3, 9).unwrap();
        assert_eq!(d.n_features(), 4);
        assert_eq!(d.column_names()[3], "noise3");
        assert_eq!(d.x()[[1, 0]], 2.0);
    }
}
