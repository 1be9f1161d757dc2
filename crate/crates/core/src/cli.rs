//! Config-driven command-line front end.
//!
//! Every subcommand reads one JSON [`RunConfig`], writes its artifacts into
//! the output directory under fixed file names and records a [`Manifest`]
//! holding the config, the master seed and the SHA-256 of the input. A
//! manifest is enough to rerun the pipeline exactly (`pipeline --manifest`).

use std::collections::BTreeMap;
use std::ffi::OsString;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::balance::{self, balance_report, predicted_outcome_balance, BalanceReport};
use crate::cdens::{self, CdeConfig, CdeMethod, ResponseScale, StratifiedCde, GRID_POINTS};
use crate::error::{Error, Result};
use crate::eval::{self, paired_bootstrap, EvalReport, Metric};
use crate::learn::{self, CvConfig, CvResult, FittedLearner, LearnerSpec, RowPrediction, TrainingMode};
use crate::neighbors::take_rows;
use crate::propensity::{fit_propensity, predict_propensity, PropensityConfig, PropensityModel};
use crate::rng::{self, streams};
use crate::strata::{self, merge_small_strata, strata_report, stratify, StrataAssignment};
use crate::synth;
use crate::tabular::{read_csv, simulate_shift, standardize, Dataset, ShiftSpec, StandardizationRecord};
use crate::weights::{self, KernelRatioConfig, WeightVector};

/// Output file names. They never change between runs.
pub mod files {
    pub const MANIFEST: &str = "manifest.json";
    pub const DATASET: &str = "dataset.csv";
    pub const STANDARDIZATION: &str = "standardization.toml";
    pub const PROPENSITY_MODEL: &str = "propensity_model.toml";
    pub const PROPENSITY_SCORES: &str = "propensity_scores.csv";
    pub const STRATA: &str = "strata.csv";
    pub const STRATA_SUMMARY: &str = "strata.json";
    pub const STRATA_REPORT: &str = "strata_report.csv";
    pub const BALANCE_REPORT: &str = "balance_report.csv";
    pub const BALANCE_SUMMARY: &str = "balance_summary.json";
    pub const BALANCE_SCATTER: &str = "balance_scatter.csv";
    pub const OUTCOME_BALANCE: &str = "outcome_balance.csv";
    pub const WEIGHTS: &str = "weights.csv";
    pub const MODEL: &str = "model.json";
    pub const CV_REPORT: &str = "cv_report.json";
    pub const PREDICTIONS: &str = "predictions.csv";
    pub const DENSITIES: &str = "densities.csv";
    pub const CDE_FITS: &str = "cde_fits.json";
    pub const RESPONSE_SCALE: &str = "response_scale.json";
    pub const EVAL_REPORT: &str = "eval_report.json";
    pub const ROC: &str = "roc.csv";
    pub const COMPARISON: &str = "comparison.csv";
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    Stratlearn,
    Biased,
    Ips,
    Kliep,
    Ulsif,
    Nn,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Stratlearn => "stratlearn",
            Method::Biased => "biased",
            Method::Ips => "ips",
            Method::Kliep => "kliep",
            Method::Ulsif => "ulsif",
            Method::Nn => "nn",
        }
    }

    pub fn is_weighting(&self) -> bool {
        !matches!(self, Method::Stratlearn | Method::Biased)
    }
}

/// What is learned on the source rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case", deny_unknown_fields)]
pub enum Task {
    /// Classifier or regressor; the grid is searched by cross-validation.
    Learner { grid: Vec<LearnerSpec> },
    /// Conditional density of the label. Weighting methods need a `single`
    /// estimator grid.
    Cde {
        method: CdeMethod,
        #[serde(default = "default_cde_folds")]
        folds: usize,
    },
}

fn default_cde_folds() -> usize {
    CdeConfig::default().folds
}

/// Built-in data generators, an alternative to an input file.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Synthetic {
    NoShift { n: usize, n_features: usize },
    Regression { n: usize },
    Classification { n: usize },
    Density { n: usize, n_noise: usize },
}

impl Synthetic {
    fn generate(&self, seed: u64) -> Result<Dataset> {
        match *self {
            Synthetic::NoShift { n, n_features } => synth::no_shift(n, n_features, seed),
            Synthetic::Regression { n } => synth::regression(n, seed),
            Synthetic::Classification { n } => synth::classification(n, seed),
            Synthetic::Density { n, n_noise } => synth::density(n, n_noise, seed),
        }
    }
}

/// Beta rejection shift applied to a fully labeled input.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ShiftConfig {
    pub beta_a: f64,
    pub beta_b: f64,
    /// Covariate that drives the shift.
    pub column: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    /// Label used in comparison tables; defaults to the method name.
    pub name: Option<String>,
    /// CSV input. Relative paths are resolved against the config file.
    pub input: Option<PathBuf>,
    pub synthetic: Option<Synthetic>,
    pub label: Option<String>,
    pub indicator: Option<String>,
    /// When set, every command first splits the input into source and target.
    pub shift: Option<ShiftConfig>,
    pub method: Method,
    /// Training mode of the weighting methods (ignored by stratlearn and biased).
    pub mode: TrainingMode,
    pub task: Task,
    pub standardize: bool,
    pub propensity: PropensityConfig,
    pub k: usize,
    pub min_source: usize,
    pub folds: usize,
    pub repeats: usize,
    pub kernel_ratio: KernelRatioConfig,
    pub nn_neighbors: usize,
    pub balance_min_per_side: usize,
    pub outcome_threshold: f64,
    pub n_boot: usize,
    pub seed: u64,
    pub output: Option<PathBuf>,
    /// Saved model for `predict` (default: `model.json` in the output directory).
    pub model: Option<PathBuf>,
    /// Predictions for `evaluate` (default: the output directory's file).
    pub predictions: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: None,
            input: None,
            synthetic: None,
            label: Some("y".into()),
            indicator: Some("s".into()),
            shift: None,
            method: Method::Stratlearn,
            mode: TrainingMode::ImportanceSampling,
            task: Task::Learner { grid: vec![LearnerSpec::LeastSquares { lambda: learn::DEFAULT_RIDGE }] },
            standardize: true,
            propensity: PropensityConfig::default(),
            k: strata::DEFAULT_K,
            min_source: strata::DEFAULT_MIN_SOURCE,
            folds: learn::DEFAULT_FOLDS,
            repeats: 1,
            kernel_ratio: KernelRatioConfig::default(),
            nn_neighbors: 10,
            balance_min_per_side: balance::DEFAULT_MIN_PER_SIDE,
            outcome_threshold: balance::DEFAULT_THRESHOLD,
            n_boot: eval::DEFAULT_N_BOOT,
            seed: 0,
            output: None,
            model: None,
            predictions: None,
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// Reads a config file and resolves relative paths against its directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_json(&text)?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut cfg.input, &mut cfg.model, &mut cfg.predictions].into_iter().flatten() {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(cfg)
    }

    /// Number of strata actually used: the biased method is the k = 1 case.
    pub fn effective_k(&self) -> usize {
        if self.method == Method::Biased {
            1
        } else {
            self.k
        }
    }

    pub fn display_name(&self) -> String {
        self.name.clone().unwrap_or_else(|| {
            if self.method.is_weighting() && matches!(self.task, Task::Learner { .. }) {
                format!("{}_{}", self.method.name(), mode_name(self.mode))
            } else {
                self.method.name().to_string()
            }
        })
    }

    fn cv(&self) -> CvConfig {
        CvConfig { folds: self.folds, repeats: self.repeats, fit_weighted: false }
    }

    fn validate(&self) -> Result<()> {
        if self.input.is_some() == self.synthetic.is_some() {
            return Err(Error::Config("set exactly one of `input` and `synthetic`".into()));
        }
        if self.folds < 2 || self.repeats < 1 {
            return Err(Error::Config("folds must be >= 2 and repeats >= 1".into()));
        }
        match &self.task {
            Task::Learner { grid } if grid.is_empty() => {
                return Err(Error::Config("learner grid is empty".into()));
            }
            Task::Cde { folds, .. } if *folds < 2 => {
                return Err(Error::Config("cde folds must be >= 2".into()));
            }
            Task::Cde { method: CdeMethod::Comb { .. }, .. } if self.method.is_weighting() => {
                return Err(Error::Config(format!(
                    "method `{}` takes a single CDE estimator grid, not a combination",
                    self.method.name()
                )));
            }
            _ => {}
        }
        Ok(())
    }
}

fn mode_name(m: TrainingMode) -> &'static str {
    match m {
        TrainingMode::WeightedErm => "weighted_erm",
        TrainingMode::Iwcv => "iwcv",
        TrainingMode::ImportanceSampling => "importance_sampling",
        TrainingMode::IwcvPlusSampling => "iwcv_plus_sampling",
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OutputFile {
    pub name: String,
    pub sha256: String,
}

/// Everything needed to repeat a run. No timestamps or absolute output paths
/// are recorded, so repeated runs write identical manifests.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub seed: u64,
    pub input_sha256: String,
    /// Effective config; `output` is left empty.
    pub config: RunConfig,
    pub summary: BTreeMap<String, serde_json::Value>,
    pub outputs: Vec<OutputFile>,
}

impl Manifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Config(format!("manifest: {e}")))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

/// Reports produced by a command, in write order.
#[derive(Debug, Default)]
struct Artifacts {
    files: Vec<(&'static str, Vec<u8>)>,
    summary: BTreeMap<String, serde_json::Value>,
}

impl Artifacts {
    fn add(&mut self, name: &'static str, bytes: impl Into<Vec<u8>>) {
        self.files.push((name, bytes.into()));
    }

    fn note(&mut self, key: &str, value: impl Serialize) {
        self.summary
            .insert(key.into(), serde_json::to_value(value).unwrap_or(serde_json::Value::Null));
    }

    fn write(self, dir: &Path, command: &str, cfg: &RunConfig, input_sha256: &str) -> Result<Manifest> {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let mut outputs = Vec::with_capacity(self.files.len());
        for (name, bytes) in &self.files {
            let p = dir.join(name);
            fs::write(&p, bytes).map_err(|e| Error::io(&p, e))?;
            outputs.push(OutputFile { name: name.to_string(), sha256: sha256_hex(bytes) });
        }
        outputs.sort_by(|a, b| a.name.cmp(&b.name));
        let manifest = Manifest {
            tool: env!("CARGO_PKG_NAME").into(),
            version: env!("CARGO_PKG_VERSION").into(),
            command: command.into(),
            seed: cfg.seed,
            input_sha256: input_sha256.into(),
            config: RunConfig { output: None, ..cfg.clone() },
            summary: self.summary,
            outputs,
        };
        let p = dir.join(files::MANIFEST);
        let mut text = serde_json::to_string_pretty(&manifest)?;
        text.push('\n');
        fs::write(&p, text).map_err(|e| Error::io(&p, e))?;
        Ok(manifest)
    }
}

struct Input {
    data: Dataset,
    sha256: String,
}

fn load_input(cfg: &RunConfig, indicator: Option<&str>) -> Result<Input> {
    cfg.validate()?;
    let label = cfg.label.as_deref().unwrap_or("y");
    let ind = indicator.unwrap_or("s");
    match (&cfg.input, &cfg.synthetic) {
        (Some(path), None) => {
            let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
            let data = read_csv(&bytes[..], cfg.label.as_deref(), indicator)?;
            Ok(Input { data, sha256: sha256_hex(&bytes) })
        }
        (None, Some(s)) => {
            let data = s.generate(cfg.seed)?.with_column_roles(label, ind);
            let mut bytes = Vec::new();
            data.write_csv(&mut bytes)?;
            Ok(Input { data, sha256: sha256_hex(&bytes) })
        }
        _ => unreachable!("validated above"),
    }
}

fn apply_shift(cfg: &RunConfig, d: &Dataset) -> Result<Option<(Dataset, ShiftSpec)>> {
    let Some(s) = &cfg.shift else { return Ok(None) };
    if !(s.beta_a > 0.0 && s.beta_b > 0.0 && s.beta_a.is_finite() && s.beta_b.is_finite()) {
        return Err(Error::Config(format!(
            "beta parameters must be positive and finite, got ({}, {})",
            s.beta_a, s.beta_b
        )));
    }
    let spec = ShiftSpec {
        beta_a: s.beta_a,
        beta_b: s.beta_b,
        shift_column: d.column_index(&s.column).map_err(|e| Error::Config(e.to_string()))?,
        seed: rng::derive_seed(cfg.seed, streams::SHIFT),
    };
    Ok(Some((simulate_shift(d, &spec)?, spec)))
}

/// Loads the input and applies the configured shift, if any.
fn load_shifted(cfg: &RunConfig) -> Result<Input> {
    let indicator = if cfg.shift.is_some() { None } else { cfg.indicator.as_deref() };
    let mut input = load_input(cfg, indicator).map_err(|e| e.in_stage("input"))?;
    if let Some((d, _)) = apply_shift(cfg, &input.data).map_err(|e| e.in_stage("shift"))? {
        input.data = d.with_column_roles(
            cfg.label.as_deref().unwrap_or("y"),
            cfg.indicator.as_deref().unwrap_or("s"),
        );
    }
    Ok(input)
}

struct Prepared {
    data: Dataset,
    record: Option<StandardizationRecord>,
    propensity: PropensityModel,
    scores: Vec<f64>,
    strata: StrataAssignment,
}

fn csv_bytes(w: csv::Writer<Vec<u8>>) -> Result<Vec<u8>> {
    w.into_inner().map_err(|e| Error::Data(e.to_string()))
}

fn propensity_stage(cfg: &RunConfig, raw: &Dataset, art: &mut Artifacts) -> Result<Prepared> {
    let st = |e: Error| e.in_stage("propensity");
    raw.require_both_domains().map_err(st)?;
    let (data, record) = if cfg.standardize {
        let (d, r) = standardize(raw).map_err(st)?;
        (d, Some(r))
    } else {
        (raw.clone(), None)
    };
    if let Some(r) = &record {
        art.add(files::STANDARDIZATION, r.to_toml());
    }
    let propensity = fit_propensity(&data, &cfg.propensity).map_err(st)?;
    log::info!("{}", propensity.diagnostics());
    let scores = predict_propensity(&propensity, data.x()).map_err(st)?;
    art.add(files::PROPENSITY_MODEL, propensity.to_toml());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "is_source", "score"])?;
    for (i, s) in scores.iter().enumerate() {
        w.write_record([i.to_string(), u8::from(data.is_source()[i]).to_string(), s.to_string()])?;
    }
    art.add(files::PROPENSITY_SCORES, csv_bytes(w)?);
    art.note("n_rows", data.n_rows());
    art.note("n_source", data.n_source());
    art.note("n_target", data.n_target());
    art.note("propensity_converged", propensity.converged);
    let n = data.n_rows();
    Ok(Prepared { data, record, propensity, scores, strata: StrataAssignment::single(n) })
}

fn strata_stage(cfg: &RunConfig, p: &mut Prepared, art: &mut Artifacts) -> Result<()> {
    let a = stratify(&p.scores, cfg.effective_k()).map_err(|e| e.in_stage("stratify"))?;
    let merged = merge_small_strata(&a, p.data.is_source(), cfg.min_source).map_err(|e| e.in_stage("merge"))?;
    for w in &merged.warnings {
        log::warn!("{w}");
    }
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["row", "is_source", "score", "stratum"])?;
    for (i, s) in p.scores.iter().enumerate() {
        w.write_record([
            i.to_string(),
            u8::from(p.data.is_source()[i]).to_string(),
            s.to_string(),
            merged.stratum_of[i].to_string(),
        ])?;
    }
    art.add(files::STRATA, csv_bytes(w)?);
    #[derive(Serialize)]
    struct Summary<'a> {
        k: usize,
        boundaries: &'a [f64],
        merge_map: &'a [Vec<usize>],
        counts: Vec<(usize, usize)>,
        warnings: &'a [String],
    }
    let summary = Summary {
        k: merged.k,
        boundaries: &merged.boundaries,
        merge_map: &merged.merge_map,
        counts: merged.counts(p.data.is_source()),
        warnings: &merged.warnings,
    };
    art.add(files::STRATA_SUMMARY, serde_json::to_string_pretty(&summary)?);
    let report = strata_report(&merged, &p.data).map_err(|e| e.in_stage("stratify"))?;
    art.add(files::STRATA_REPORT, report.to_csv()?);
    art.note("k", merged.k);
    p.strata = merged;
    Ok(())
}

fn balance_stage(cfg: &RunConfig, p: &Prepared, art: &mut Artifacts) -> Result<BalanceReport> {
    let st = |e: Error| e.in_stage("balance");
    let report = balance_report(&p.data, &p.strata, cfg.balance_min_per_side).map_err(st)?;
    art.add(files::BALANCE_REPORT, report.to_csv().map_err(st)?);
    art.add(files::BALANCE_SCATTER, report.scatter_csv().map_err(st)?);
    art.add(files::BALANCE_SUMMARY, serde_json::to_string_pretty(&report)?);
    art.note("raw_mean_smd", report.raw_summary.mean_smd);
    art.note("stratum_mean_smd", report.mean_stratum_smd());
    Ok(report)
}

fn weights_stage(cfg: &RunConfig, p: &Prepared, art: &mut Artifacts) -> Result<Option<WeightVector>> {
    if !cfg.method.is_weighting() {
        return Ok(None);
    }
    let st = |e: Error| e.in_stage("weights");
    let src = p.data.source_rows();
    let tgt = p.data.target_rows();
    let seed = rng::derive_seed(cfg.seed, streams::WEIGHTS);
    let xs = take_rows(p.data.x(), &src);
    let xt = take_rows(p.data.x(), &tgt);
    let w = match cfg.method {
        Method::Ips => {
            let s: Vec<f64> = src.iter().map(|&i| p.scores[i]).collect();
            weights::ips_weights(&s, src.len(), tgt.len())
        }
        Method::Kliep => weights::kliep_weights(xs.view(), xt.view(), &cfg.kernel_ratio, seed),
        Method::Ulsif => weights::ulsif_weights(xs.view(), xt.view(), &cfg.kernel_ratio, seed),
        Method::Nn => weights::nn_weights(xs.view(), xt.view(), cfg.nn_neighbors),
        Method::Stratlearn | Method::Biased => unreachable!("not a weighting method"),
    }
    .map_err(st)?;
    art.add(files::WEIGHTS, w.to_csv(&src)?);
    art.note("mean_weight", w.mean());
    Ok(Some(w))
}

/// A trained classifier or regressor as saved by `train`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SavedModel {
    pub method: Method,
    pub standardization: Option<StandardizationRecord>,
    pub propensity: PropensityModel,
    pub k: usize,
    pub boundaries: Vec<f64>,
    /// `(stratum, model)`; weighting methods hold a single stratum-1 entry.
    pub models: Vec<(usize, FittedLearner)>,
}

impl SavedModel {
    fn assignment(&self) -> StrataAssignment {
        StrataAssignment {
            k: self.k,
            boundaries: self.boundaries.clone(),
            stratum_of: vec![],
            merge_map: vec![],
            warnings: vec![],
        }
    }

    /// Predictions for `rows` of a raw (unstandardized) dataset.
    pub fn predict(&self, d: &Dataset, rows: &[usize]) -> Result<Vec<RowPrediction>> {
        let x = match &self.standardization {
            Some(r) => r.apply(d.x())?,
            None => d.x().to_owned(),
        };
        let scores = predict_propensity(&self.propensity, x.view())?;
        let a = self.assignment();
        let stratum: Vec<usize> = rows
            .iter()
            .map(|&i| if self.k == 1 { 1 } else { a.stratum_for_score(scores[i]) })
            .collect();
        // one batch per stratum, so the arithmetic matches the training-time predictions
        let mut out = Vec::with_capacity(rows.len());
        for j in 1..=self.k {
            let batch: Vec<usize> = rows.iter().zip(&stratum).filter(|(_, &s)| s == j).map(|(&i, _)| i).collect();
            if batch.is_empty() {
                continue;
            }
            let m = self
                .models
                .iter()
                .find(|(s, _)| *s == j)
                .map(|(_, m)| m)
                .ok_or_else(|| Error::Data(format!("no model was trained for stratum {j}")))?;
            let p = m.predict(take_rows(x.view(), &batch).view())?;
            out.extend(batch.iter().zip(p).map(|(&row, prediction)| RowPrediction { row, stratum: j, prediction }));
        }
        out.sort_by_key(|p| p.row);
        Ok(out)
    }
}

enum Trained {
    Learner {
        predictions: Vec<RowPrediction>,
        logistic: bool,
    },
    Cde {
        result: StratifiedCde,
        scale: ResponseScale,
    },
}

fn train_stage(cfg: &RunConfig, p: &Prepared, w: Option<&WeightVector>, art: &mut Artifacts) -> Result<Trained> {
    let st = |e: Error| e.in_stage("train");
    let seed = match cfg.task {
        Task::Learner { .. } => rng::derive_seed(cfg.seed, streams::LEARN),
        Task::Cde { .. } => rng::derive_seed(cfg.seed, streams::CDE),
    };
    match &cfg.task {
        Task::Learner { grid } => {
            let logistic = grid[0].loss() == learn::LossKind::Logloss;
            if grid.iter().any(|g| (g.loss() == learn::LossKind::Logloss) != logistic) {
                return Err(Error::Config("learner grid mixes classifiers and regressors".into()));
            }
            #[derive(Serialize)]
            struct CvEntry<'a> {
                stratum: usize,
                cv: Option<&'a CvResult>,
            }
            let (predictions, models, cv_json) = match w {
                None => {
                    let fit = learn::stratlearn_fit_predict(grid, &p.data, &p.strata, &cfg.cv(), seed).map_err(st)?;
                    let cv: Vec<CvEntry> =
                        fit.models.iter().map(|m| CvEntry { stratum: m.stratum, cv: m.cv.as_ref() }).collect();
                    let cv_json = serde_json::to_string_pretty(&cv)?;
                    if logistic && p.strata.k > 1 {
                        // predicted labels on both domains for the outcome balance check
                        let mut all = vec![f64::NAN; p.data.n_rows()];
                        for m in &fit.models {
                            let rows = p.strata.rows_in(m.stratum);
                            let v = m.model.predict(take_rows(p.data.x(), &rows).view())?;
                            for (&i, v) in rows.iter().zip(v) {
                                all[i] = v;
                            }
                        }
                        if all.iter().all(|v| v.is_finite()) {
                            let ob = predicted_outcome_balance(
                                &all,
                                p.data.is_source(),
                                &p.strata,
                                cfg.outcome_threshold,
                            )
                            .map_err(|e| e.in_stage("outcome balance"))?;
                            art.add(files::OUTCOME_BALANCE, outcome_csv(&ob)?);
                        }
                    }
                    let models = fit.models.into_iter().map(|m| (m.stratum, m.model)).collect();
                    (fit.predictions, models, cv_json)
                }
                Some(w) => {
                    let (preds, cv, model) =
                        learn::weighted_fit_predict(grid, &p.data, &w.w, cfg.mode, &cfg.cv(), seed).map_err(st)?;
                    let cv_json = serde_json::to_string_pretty(&[CvEntry { stratum: 1, cv: cv.as_ref() }])?;
                    (preds, vec![(1, model)], cv_json)
                }
            };
            let saved = SavedModel {
                method: cfg.method,
                standardization: p.record.clone(),
                propensity: p.propensity.clone(),
                k: if w.is_some() { 1 } else { p.strata.k },
                boundaries: if w.is_some() { vec![] } else { p.strata.boundaries.clone() },
                models,
            };
            art.add(files::MODEL, serde_json::to_string(&saved)?);
            art.add(files::CV_REPORT, cv_json);
            art.add(files::PREDICTIONS, learn::predictions_csv(&predictions)?);
            art.note("n_predictions", predictions.len());
            Ok(Trained::Learner { predictions, logistic })
        }
        Task::Cde { method, folds } => {
            let src = p.data.source_rows();
            let scale = ResponseScale::fit(&p.data.labels_of(&src).map_err(st)?).map_err(st)?;
            let labels = p.data.labels().ok_or_else(|| Error::Data("train: the input has no label column".into()))?;
            let z: Vec<Option<f64>> = labels.iter().map(|v| v.map(|v| scale.apply(&[v])[0])).collect();
            let cde_cfg = CdeConfig { folds: *folds };
            let result = match (w, method) {
                (None, _) => cdens::stratlearn_cde(method, &p.data, &z, &p.strata, &cde_cfg, seed),
                (Some(w), CdeMethod::Single { grid }) => cdens::weighted_cde(grid, &p.data, &z, &w.w, &cde_cfg, seed),
                (Some(_), CdeMethod::Comb { .. }) => unreachable!("rejected by validation"),
            }
            .map_err(st)?;
            art.add(files::RESPONSE_SCALE, serde_json::to_string_pretty(&scale)?);
            art.add(files::CDE_FITS, serde_json::to_string_pretty(&result.fits)?);
            art.add(files::DENSITIES, result.to_csv()?);
            art.note("n_predictions", result.rows.len());
            Ok(Trained::Cde { result, scale })
        }
    }
}

fn outcome_csv(rows: &[balance::OutcomeBalance]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record([
        "stratum",
        "source_count",
        "target_count",
        "source_positive",
        "target_positive",
        "source_proportion",
        "target_proportion",
        "p_value",
    ])?;
    let opt = |v: Option<f64>| v.map(|v| v.to_string()).unwrap_or_default();
    for r in rows {
        w.write_record([
            r.stratum.to_string(),
            r.source_count.to_string(),
            r.target_count.to_string(),
            r.source_positive.to_string(),
            r.target_positive.to_string(),
            opt(r.source_proportion),
            opt(r.target_proportion),
            opt(r.p_value),
        ])?;
    }
    csv_bytes(w)
}

/// Per-row scores and truths that a metric is computed on. For density
/// tasks `values` are the per-row losses and `truth` the rescaled responses.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalData {
    pub metric: Metric,
    pub rows: Vec<usize>,
    pub values: Vec<f64>,
    pub truth: Vec<f64>,
}

/// Labels of `rows`, or `None` when any is unknown.
fn known_labels(d: &Dataset, rows: &[usize]) -> Option<Vec<f64>> {
    let y = d.labels()?;
    rows.iter().map(|&i| y[i]).collect()
}

fn eval_data(d: &Dataset, t: &Trained) -> Result<Option<EvalData>> {
    match t {
        Trained::Learner { predictions, logistic } => {
            let rows: Vec<usize> = predictions.iter().map(|p| p.row).collect();
            let Some(truth) = known_labels(d, &rows) else { return Ok(None) };
            Ok(Some(EvalData {
                metric: if *logistic { Metric::Auc } else { Metric::Mse },
                values: predictions.iter().map(|p| p.prediction).collect(),
                rows,
                truth,
            }))
        }
        Trained::Cde { result, scale } => {
            let Some(y) = known_labels(d, &result.rows) else { return Ok(None) };
            let truth = scale.apply(&y);
            Ok(Some(EvalData {
                metric: Metric::CdeTargetRisk,
                values: cdens::pointwise_losses(&result.densities, &truth),
                rows: result.rows.clone(),
                truth,
            }))
        }
    }
}

fn evaluate_stage(cfg: &RunConfig, e: &EvalData, art: &mut Artifacts) -> Result<()> {
    let seed = rng::derive_seed(cfg.seed, streams::BOOTSTRAP);
    let report = EvalReport::new(e.metric, &e.values, &e.truth, cfg.n_boot, seed).map_err(|e| e.in_stage("evaluate"))?;
    if let Some(pts) = &report.roc_points {
        art.add(files::ROC, eval::roc_csv(pts)?);
    }
    art.add(files::EVAL_REPORT, report.to_json()?);
    art.note("metric", e.metric);
    art.note("value", report.value);
    art.note("bootstrap_se", report.bootstrap_se);
    Ok(())
}

/// Runs every stage in memory; returns the artifacts, the evaluation data (when
/// target labels are known) and the input hash.
fn pipeline(cfg: &RunConfig) -> Result<(Artifacts, Option<EvalData>, String)> {
    let input = load_shifted(cfg)?;
    let mut art = Artifacts::default();
    let mut p = propensity_stage(cfg, &input.data, &mut art)?;
    strata_stage(cfg, &mut p, &mut art)?;
    balance_stage(cfg, &p, &mut art)?;
    let w = weights_stage(cfg, &p, &mut art)?;
    let trained = train_stage(cfg, &p, w.as_ref(), &mut art)?;
    let e = eval_data(&p.data, &trained).map_err(|e| e.in_stage("evaluate"))?;
    match &e {
        Some(e) => evaluate_stage(cfg, e, &mut art)?,
        None => log::info!("target labels unknown; evaluation skipped"),
    }
    Ok((art, e, input.sha256))
}

#[derive(Debug, Parser)]
#[command(name = "stratlearn", version, about = "Propensity-score stratified learning under covariate shift")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON run config (`compare` takes one per run).
    #[arg(long, global = true)]
    pub config: Vec<PathBuf>,
    /// Master seed; overrides the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory; overrides the config.
    #[arg(long, global = true)]
    pub output: Option<PathBuf>,
}

#[derive(Debug, Clone, Subcommand)]
pub enum Command {
    /// Split a labeled input into source and target by the beta rejection shift.
    Simulate,
    /// Fit the propensity model and score every row.
    Propensity,
    /// Propensity strata with small-stratum merging.
    Stratify,
    /// Importance weights of the configured weighting method.
    Weights,
    /// Covariate balance before and within strata.
    Balance,
    /// Fit and save the model(s).
    Train,
    /// Predict target rows with a saved model.
    Predict,
    /// Score saved predictions against known target labels.
    Evaluate,
    /// All stages end to end.
    Pipeline {
        /// Rerun from a manifest instead of a config.
        #[arg(long)]
        manifest: Option<PathBuf>,
    },
    /// Paired bootstrap comparison of several runs on the same target rows.
    Compare {
        #[arg(long, default_value_t = eval::DEFAULT_N_BOOT)]
        n_boot: usize,
    },
}

/// Parses arguments, runs the command and returns the process exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 2 } else { 0 };
            let _ = e.print();
            return code;
        }
    };
    match run(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}

fn one_config(cli: &Cli) -> Result<RunConfig> {
    let [path] = cli.config.as_slice() else {
        return Err(Error::Config("exactly one --config is required".into()));
    };
    let mut cfg = RunConfig::load(path)?;
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(o) = &cli.output {
        cfg.output = Some(o.clone());
    }
    Ok(cfg)
}

fn output_dir(cfg: &RunConfig) -> Result<PathBuf> {
    cfg.output
        .clone()
        .ok_or_else(|| Error::Config("no output directory (set `output` or pass --output)".into()))
}

pub fn run(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Pipeline { manifest: Some(m) } => {
            if !cli.config.is_empty() {
                return Err(Error::Config("pass either --config or --manifest, not both".into()));
            }
            let manifest = Manifest::load(m)?;
            let mut cfg = manifest.config.clone();
            cfg.seed = cli.seed.unwrap_or(manifest.seed);
            cfg.output = cli.output.clone();
            let (art, _, sha) = pipeline(&cfg)?;
            if sha != manifest.input_sha256 {
                return Err(Error::Data(format!(
                    "input hash {sha} differs from the manifest's {}",
                    manifest.input_sha256
                )));
            }
            finish(art, &cfg, "pipeline", &sha)
        }
        Command::Compare { n_boot } => cmd_compare(cli, *n_boot),
        cmd => {
            let cfg = one_config(cli)?;
            match cmd {
                Command::Simulate => cmd_simulate(&cfg),
                Command::Propensity => staged(&cfg, "propensity", Stop::Propensity),
                Command::Stratify => staged(&cfg, "stratify", Stop::Strata),
                Command::Balance => staged(&cfg, "balance", Stop::Balance),
                Command::Weights => {
                    if !cfg.method.is_weighting() {
                        return Err(Error::Config(format!(
                            "method `{}` has no importance weights",
                            cfg.method.name()
                        )));
                    }
                    staged(&cfg, "weights", Stop::Weights)
                }
                Command::Train => staged(&cfg, "train", Stop::Train),
                Command::Predict => cmd_predict(&cfg),
                Command::Evaluate => cmd_evaluate(&cfg),
                Command::Pipeline { .. } => {
                    let (art, _, sha) = pipeline(&cfg)?;
                    finish(art, &cfg, "pipeline", &sha)
                }
                Command::Compare { .. } => unreachable!(),
            }
        }
    }
}

fn finish(art: Artifacts, cfg: &RunConfig, command: &str, sha: &str) -> Result<()> {
    let dir = output_dir(cfg)?;
    let m = art.write(&dir, command, cfg, sha)?;
    if let Some(v) = m.summary.get("value") {
        let se = m.summary.get("bootstrap_se").cloned().unwrap_or_default();
        let metric = m.summary.get("metric").cloned().unwrap_or_default();
        println!("{metric}: {v} (bootstrap se {se})");
    }
    println!("wrote {} files to {}", m.outputs.len() + 1, dir.display());
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Stop {
    Propensity,
    Strata,
    Balance,
    Weights,
    Train,
}

fn staged(cfg: &RunConfig, command: &str, stop: Stop) -> Result<()> {
    let input = load_shifted(cfg)?;
    let mut art = Artifacts::default();
    let mut p = propensity_stage(cfg, &input.data, &mut art)?;
    if stop == Stop::Propensity {
        eprintln!("{}", p.propensity.diagnostics());
        return finish(art, cfg, command, &input.sha256);
    }
    strata_stage(cfg, &mut p, &mut art)?;
    if stop == Stop::Balance {
        balance_stage(cfg, &p, &mut art)?;
    }
    if stop >= Stop::Weights {
        let w = weights_stage(cfg, &p, &mut art)?;
        if stop == Stop::Train {
            train_stage(cfg, &p, w.as_ref(), &mut art)?;
        }
    }
    finish(art, cfg, command, &input.sha256)
}

fn cmd_simulate(cfg: &RunConfig) -> Result<()> {
    if cfg.shift.is_none() {
        return Err(Error::Config("simulate needs a `shift` section".into()));
    }
    let input = load_input(cfg, None).map_err(|e| e.in_stage("input"))?;
    let (d, spec) = apply_shift(cfg, &input.data).map_err(|e| e.in_stage("simulate"))?.expect("shift is set");
    let d = d.with_column_roles(cfg.label.as_deref().unwrap_or("y"), cfg.indicator.as_deref().unwrap_or("s"));
    let mut bytes = Vec::new();
    d.write_csv(&mut bytes)?;
    let mut art = Artifacts::default();
    art.add(files::DATASET, bytes);
    art.note("beta_a", spec.beta_a);
    art.note("beta_b", spec.beta_b);
    art.note("shift_column", cfg.shift.as_ref().map(|s| s.column.clone()));
    art.note("shift_seed", spec.seed);
    art.note("n_source", d.n_source());
    art.note("n_target", d.n_target());
    finish(art, cfg, "simulate", &input.sha256)
}

fn cmd_predict(cfg: &RunConfig) -> Result<()> {
    if !matches!(cfg.task, Task::Learner { .. }) {
        return Err(Error::Config("predict supports learner tasks; density runs predict within `pipeline`".into()));
    }
    let dir = output_dir(cfg)?;
    let model_path = cfg.model.clone().unwrap_or_else(|| dir.join(files::MODEL));
    let text = fs::read_to_string(&model_path).map_err(|e| Error::io(&model_path, e))?;
    let saved: SavedModel = serde_json::from_str(&text).map_err(|e| Error::Config(format!("model: {e}")))?;
    let input = load_shifted(cfg)?;
    let d = &input.data;
    let rows = if d.n_target() > 0 { d.target_rows() } else { (0..d.n_rows()).collect() };
    let preds = saved.predict(d, &rows).map_err(|e| e.in_stage("predict"))?;
    let mut art = Artifacts::default();
    art.add(files::PREDICTIONS, learn::predictions_csv(&preds)?);
    art.note("n_predictions", preds.len());
    art.note("model_sha256", sha256_hex(text.as_bytes()));
    finish(art, cfg, "predict", &input.sha256)
}

fn read_predictions(path: &Path) -> Result<Vec<RowPrediction>> {
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let mut out = Vec::new();
    for rec in r.deserialize() {
        out.push(rec?);
    }
    Ok(out)
}

/// Long-format `row,z,density` back into one grid row per target row.
fn read_densities(path: &Path) -> Result<(Vec<usize>, ndarray::Array2<f64>)> {
    #[derive(Deserialize)]
    struct Rec {
        row: usize,
        #[allow(dead_code)]
        z: f64,
        density: f64,
    }
    let f = fs::File::open(path).map_err(|e| Error::io(path, e))?;
    let mut r = csv::Reader::from_reader(f);
    let mut rows = Vec::new();
    let mut values = Vec::new();
    for rec in r.deserialize() {
        let rec: Rec = rec?;
        if values.len() % GRID_POINTS == 0 {
            rows.push(rec.row);
        } else if rows.last() != Some(&rec.row) {
            return Err(Error::Data(format!("density grid of row {} is incomplete", rows.last().unwrap())));
        }
        values.push(rec.density);
    }
    if values.len() % GRID_POINTS != 0 {
        return Err(Error::Data("density file ends inside a grid".into()));
    }
    let dens = ndarray::Array2::from_shape_vec((rows.len(), GRID_POINTS), values)
        .map_err(|e| Error::Data(e.to_string()))?;
    Ok((rows, dens))
}

fn cmd_evaluate(cfg: &RunConfig) -> Result<()> {
    let dir = output_dir(cfg)?;
    let input = load_shifted(cfg)?;
    let d = &input.data;
    let st = |e: Error| e.in_stage("evaluate");
    let check_rows = |rows: &[usize]| -> Result<()> {
        match rows.iter().find(|&&i| i >= d.n_rows()) {
            Some(i) => Err(Error::Data(format!("evaluate: row {i} is not in the input"))),
            None => Ok(()),
        }
    };
    let e = match &cfg.task {
        Task::Learner { grid } => {
            let path = cfg.predictions.clone().unwrap_or_else(|| dir.join(files::PREDICTIONS));
            let preds = read_predictions(&path).map_err(st)?;
            let rows: Vec<usize> = preds.iter().map(|p| p.row).collect();
            check_rows(&rows)?;
            let truth = known_labels(d, &rows)
                .ok_or_else(|| Error::Data("evaluate: some predicted rows have no label".into()))?;
            let metric = if grid[0].loss() == learn::LossKind::Logloss { Metric::Auc } else { Metric::Mse };
            EvalData { metric, values: preds.iter().map(|p| p.prediction).collect(), rows, truth }
        }
        Task::Cde { .. } => {
            let path = cfg.predictions.clone().unwrap_or_else(|| dir.join(files::DENSITIES));
            let (rows, dens) = read_densities(&path).map_err(st)?;
            check_rows(&rows)?;
            let sp = dir.join(files::RESPONSE_SCALE);
            let text = fs::read_to_string(&sp).map_err(|e| Error::io(&sp, e))?;
            let scale: ResponseScale = serde_json::from_str(&text).map_err(|e| Error::Config(e.to_string()))?;
            let y = known_labels(d, &rows)
                .ok_or_else(|| Error::Data("evaluate: some density rows have no label".into()))?;
            let truth = scale.apply(&y);
            EvalData { metric: Metric::CdeTargetRisk, values: cdens::pointwise_losses(&dens, &truth), rows, truth }
        }
    };
    let mut art = Artifacts::default();
    evaluate_stage(cfg, &e, &mut art)?;
    finish(art, cfg, "evaluate", &input.sha256)
}

/// One line of the comparison table.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub method: String,
    pub metric: Metric,
    pub value: f64,
    pub se: f64,
    pub n_boot: usize,
}

/// Runs every config in memory and compares them with a paired bootstrap on
/// the shared evaluation rows.
pub fn compare_runs(cfgs: &[RunConfig], n_boot: usize, seed: u64) -> Result<(Vec<ComparisonRow>, Vec<f64>)> {
    if cfgs.len() < 2 {
        return Err(Error::Config("compare needs at least two runs".into()));
    }
    let mut evals = Vec::with_capacity(cfgs.len());
    for c in cfgs {
        let name = c.display_name();
        let (_, e, _) = pipeline(c).map_err(|e| e.in_stage(&format!("run `{name}`")))?;
        let e = e.ok_or_else(|| Error::Data(format!("run `{name}` has no labeled target rows to evaluate")))?;
        evals.push((name, e));
    }
    let first = &evals[0].1;
    for (name, e) in &evals[1..] {
        if e.metric != first.metric || e.rows != first.rows || e.truth != first.truth {
            return Err(Error::Data(format!(
                "run `{name}` was evaluated on different rows, labels or metric than `{}`",
                evals[0].0
            )));
        }
    }
    let preds: Vec<&[f64]> = evals.iter().map(|(_, e)| e.values.as_slice()).collect();
    let pb = paired_bootstrap(first.metric, &preds, &first.truth, n_boot, seed)?;
    let rows = evals
        .iter()
        .enumerate()
        .map(|(i, (name, e))| ComparisonRow {
            method: name.clone(),
            metric: e.metric,
            value: pb.values[i],
            se: pb.se[i],
            n_boot: pb.n_valid,
        })
        .collect();
    Ok((rows, pb.diff_se))
}

pub fn comparison_csv(rows: &[ComparisonRow]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    csv_bytes(w)
}

fn cmd_compare(cli: &Cli, n_boot: usize) -> Result<()> {
    let cfgs = cli.config.iter().map(|p| RunConfig::load(p)).collect::<Result<Vec<_>>>()?;
    let seed = cli.seed.unwrap_or_else(|| cfgs.first().map_or(0, |c| c.seed));
    let dir = cli
        .output
        .clone()
        .ok_or_else(|| Error::Config("compare needs --output".into()))?;
    let (rows, diff_se) = compare_runs(&cfgs, n_boot, rng::derive_seed(seed, streams::BOOTSTRAP))?;
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let p = dir.join(files::COMPARISON);
    fs::write(&p, comparison_csv(&rows)?).map_err(|e| Error::io(&p, e))?;
    for (i, r) in rows.iter().enumerate() {
        let diff = if i == 0 {
            String::new()
        } else {
            format!("  (vs {}: {:+.6} +/- {:.6})", rows[0].method, r.value - rows[0].value, 2.0 * diff_se[i])
        };
        println!("{:<28} {:?} {:.6} +/- {:.6}{diff}", r.method, r.metric, r.value, 2.0 * r.se);
    }
    Ok(())
}
