//! End-to-end orchestration: data, original model, unlearning grid,
//! evaluation, membership inference, aggregation and artifact files.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::conformal::{self, ConformalCalibrator, ProbabilityMatrix, QuantileRule, Threshold};
use crate::csvio;
use crate::dataset::{self, Dataset, DatasetSpec, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::metrics::{self, MetricsReport};
use crate::mia;
use crate::model::{self, EpochStats, Mlp, TrainConfig};
use crate::seed;
use crate::unlearn::{self, Method, SemiShadowConfig, UnlearnRunConfig};

pub const TOOL_VERSION: &str = env!("CARGO_PKG_VERSION");

/// Requested evaluation-calibration size; scaled down when D_c is smaller.
pub const DEFAULT_CALIB_SIZE: usize = 2000;

pub const DEFAULT_HIDDEN: usize = 64;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    pub alpha: f64,
    pub calib_size: usize,
    pub rule: QuantileRule,
    /// Finetune epochs of the semi-shadow model used for label-corrupting
    /// methods; `None` disables it.
    pub semi_shadow_epochs: Option<usize>,
    pub with_mia: bool,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            alpha: unlearn::DEFAULT_ALPHA,
            calib_size: DEFAULT_CALIB_SIZE,
            rule: QuantileRule::Corrected,
            semi_shadow_epochs: None,
            with_mia: true,
        }
    }
}

/// Identifies the run a report belongs to.
#[derive(Debug, Clone, PartialEq)]
pub struct RunLabel {
    pub method: String,
    pub lambda: f64,
    pub seed: u64,
}

/// Trains the original model θ_o on D_train = D_r ∪ D_f.
pub fn train_original(
    dataset: &Dataset,
    splits: &SplitAssignment,
    hidden_dim: usize,
    config: &TrainConfig,
) -> Result<(Mlp, Vec<EpochStats>)> {
    dataset.check_splits(splits)?;
    let train = dataset.select(&splits.train_ids())?;
    let init = Mlp::init(
        dataset.dim,
        hidden_dim,
        dataset.num_classes,
        seed::derive_seed(config.seed, "train/init"),
    )?;
    let cfg = TrainConfig {
        seed: seed::derive_seed(config.seed, "train/shuffle"),
        ..*config
    };
    model::train(init, &train, &cfg)
}

/// Conformal and accuracy evaluation of a probability matrix carrying the
/// forget, retain, test and calib_eval splits. `calib_override` supplies an
/// alternative source for the calibration scores (semi-shadow model).
pub fn evaluate_matrix(
    matrix: &ProbabilityMatrix,
    calib_override: Option<&ProbabilityMatrix>,
    label: &RunLabel,
    config: &EvalConfig,
) -> Result<MetricsReport> {
    let calib_source = calib_override.unwrap_or(matrix);
    let calib_ids = calib_source.ids_in(Split::CalibEval);
    if calib_ids.is_empty() {
        return Err(Error::Calibration("calibration split `calib_eval` is empty".into()));
    }
    if config.calib_size == 0 {
        return Err(Error::Config("calibration size must be positive".into()));
    }
    let mut rng = seed::stage_rng(label.seed, "eval/calib");
    let used = dataset::subsample_ids(&calib_ids, config.calib_size, &mut rng);
    let scores: Vec<f64> = used
        .iter()
        .map(|id| {
            let r = calib_source.get(*id).expect("id from matrix");
            1.0 - r.probs[r.label]
        })
        .collect();
    let mut cal = ConformalCalibrator::from_scores(scores, config.alpha, config.rule)?;
    cal.num_classes = Some(calib_source.num_classes());
    let sets = conformal::prediction_sets(matrix, &cal)?;

    let acc = metrics::accuracy_metrics(matrix)?;
    let conformal = [Split::Forget, Split::Retain, Split::Test]
        .into_iter()
        .map(|s| Ok((s.to_string(), metrics::split_conformal(&sets, matrix, s)?)))
        .collect::<Result<BTreeMap<_, _>>>()?;
    let report = MetricsReport {
        method: label.method.clone(),
        lambda: label.lambda,
        alpha: config.alpha,
        seed: label.seed,
        num_classes: matrix.num_classes(),
        ua: acc.ua,
        ra: acc.ra,
        ta: acc.ta,
        q_hat: cal.q_hat(),
        q_hat_include_all: cal.threshold == Threshold::IncludeAll,
        calib_size: used.len(),
        calib_scale: used.len() as f64 / config.calib_size as f64,
        conformal,
        recovery: metrics::recovery_analysis(matrix, &sets, Split::Forget)?,
        mia: None,
        miacr: None,
        mia_recovery: None,
        gap_to_retrain: None,
    };
    report.check_invariants()?;
    Ok(report)
}

/// Adds MIA, MIACR and MIA recovery to `report`.
pub fn attach_mia(report: &mut MetricsReport, matrix: &ProbabilityMatrix) -> Result<mia::AttackModel> {
    let (eval, attack) = mia::evaluate(matrix, report.alpha, seed::derive_seed(report.seed, "mia"))?;
    report.mia = Some(eval.mia);
    report.miacr = Some(eval.miacr);
    report.mia_recovery = Some(eval.recovery);
    report.check_invariants()?;
    Ok(attack)
}

pub const EVAL_SPLITS: [Split; 4] = [Split::Forget, Split::Retain, Split::Test, Split::CalibEval];

/// Predicts, calibrates and scores one unlearned model.
pub fn evaluate_model(
    params: &Mlp,
    original: &Mlp,
    dataset: &Dataset,
    splits: &SplitAssignment,
    method: Method,
    label: &RunLabel,
    config: &EvalConfig,
) -> Result<(MetricsReport, ProbabilityMatrix)> {
    let matrix = params.predict_matrix(dataset, splits, &EVAL_SPLITS)?;
    let shadow = match config.semi_shadow_epochs {
        Some(epochs) if method.corrupts_labels() => {
            let calib = dataset.select(&splits.calib_eval)?;
            let cfg = SemiShadowConfig {
                epochs,
                seed: seed::derive_seed(label.seed, "shadow"),
                ..Default::default()
            };
            let shadow = unlearn::semi_shadow_calibrate(original, &calib, &cfg)?;
            Some(shadow.predict_matrix(dataset, splits, &[Split::CalibEval])?)
        }
        _ => None,
    };
    let mut report = evaluate_matrix(&matrix, shadow.as_ref(), label, config)?;
    if config.with_mia {
        attach_mia(&mut report, &matrix)?;
    }
    Ok((report, matrix))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PipelineConfig {
    pub dataset: DatasetSpec,
    pub hidden_dim: usize,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub lambdas: Vec<f64>,
    pub alphas: Vec<f64>,
    pub seeds: Vec<u64>,
    pub delta: f64,
    /// α used for q̄ during unlearning, independent of the evaluation α.
    pub unlearn_alpha: f64,
    pub eval: EvalConfig,
    /// Per-method overrides of the unlearning presets.
    #[serde(default)]
    pub overrides: BTreeMap<Method, UnlearnRunConfig>,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            dataset: DatasetSpec::default(),
            hidden_dim: DEFAULT_HIDDEN,
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            lambdas: vec![0.0],
            alphas: vec![unlearn::DEFAULT_ALPHA],
            seeds: vec![0, 1, 2],
            delta: unlearn::DEFAULT_DELTA,
            unlearn_alpha: unlearn::DEFAULT_ALPHA,
            eval: EvalConfig::default(),
            overrides: BTreeMap::new(),
        }
    }
}

impl PipelineConfig {
    pub fn unlearn_config(&self, method: Method, lambda: f64, seed: u64) -> UnlearnRunConfig {
        let base = self
            .overrides
            .get(&method)
            .copied()
            .unwrap_or_else(|| UnlearnRunConfig::preset(method));
        let base = if method == Method::Retrain && !self.overrides.contains_key(&method) {
            UnlearnRunConfig {
                epochs: self.train.epochs,
                learning_rate: self.train.learning_rate,
                momentum: self.train.momentum,
                batch_size: self.train.batch_size,
                ..base
            }
        } else {
            base
        };
        UnlearnRunConfig {
            method,
            lambda,
            delta: self.delta,
            alpha: self.unlearn_alpha,
            seed,
            ..base
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.methods.is_empty() || self.lambdas.is_empty() || self.alphas.is_empty() || self.seeds.is_empty() {
            return Err(Error::Config("sweep grid has an empty axis".into()));
        }
        for &a in &self.alphas {
            if !(a > 0.0 && a < 1.0) {
                return Err(Error::Config(format!("alpha {a} must lie in (0, 1)")));
            }
        }
        for &l in &self.lambdas {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(Error::Config(format!("lambda {l} must be finite and >= 0")));
            }
        }
        self.train.validate()?;
        self.dataset.validate()
    }
}

/// One unlearning cell of the grid for a fixed seed.
#[derive(Debug, Clone)]
pub struct CellResult {
    pub method: Method,
    pub lambda: f64,
    pub outcome: unlearn::UnlearnOutcome,
    pub reports: Vec<(MetricsReport, ProbabilityMatrix)>,
}

/// Everything produced for one seed.
#[derive(Debug, Clone)]
pub struct SeedResult {
    pub seed: u64,
    pub dataset: Dataset,
    pub splits: SplitAssignment,
    pub original: Mlp,
    pub cells: Vec<CellResult>,
}

/// Runs every (method, λ) cell for one seed, cells in parallel.
pub fn run_seed(config: &PipelineConfig, seed: u64) -> Result<SeedResult> {
    let spec = DatasetSpec {
        seed,
        ..config.dataset.clone()
    };
    let (dataset, splits) = dataset::generate(&spec)?;
    let train_cfg = TrainConfig { seed, ..config.train };
    let (original, _) = train_original(&dataset, &splits, config.hidden_dim, &train_cfg)?;

    let grid: Vec<(Method, f64)> = config
        .methods
        .iter()
        .flat_map(|&m| config.lambdas.iter().map(move |&l| (m, l)))
        .collect();
    let cells = grid
        .par_iter()
        .map(|&(method, lambda)| {
            let ucfg = config.unlearn_config(method, lambda, seed);
            let outcome = unlearn::run_method(&ucfg, &original, &dataset, &splits)?;
            let label = RunLabel {
                method: method.name().to_string(),
                lambda,
                seed,
            };
            let reports = config
                .alphas
                .iter()
                .map(|&alpha| {
                    let ecfg = EvalConfig {
                        alpha,
                        ..config.eval.clone()
                    };
                    evaluate_model(&outcome.params, &original, &dataset, &splits, method, &label, &ecfg)
                })
                .collect::<Result<Vec<_>>>()?;
            Ok(CellResult {
                method,
                lambda,
                outcome,
                reports,
            })
        })
        .collect::<Result<Vec<_>>>()?;

    Ok(SeedResult {
        seed,
        dataset,
        splits,
        original,
        cells,
    })
}

/// Fills `gap_to_retrain` on every report using the retrain report with the
/// smallest λ at the same (seed, α). No-op when retrain is not in the grid.
pub fn attach_gaps(reports: &mut [MetricsReport]) -> Result<()> {
    let mut refs: BTreeMap<(u64, u64), MetricsReport> = BTreeMap::new();
    for r in reports.iter().filter(|r| r.method == Method::Retrain.name()) {
        let key = (r.seed, r.alpha.to_bits());
        match refs.get(&key) {
            Some(prev) if prev.lambda <= r.lambda => {}
            _ => {
                refs.insert(key, r.clone());
            }
        }
    }
    for r in reports.iter_mut() {
        if let Some(rt) = refs.get(&(r.seed, r.alpha.to_bits())) {
            r.gap_to_retrain = Some(metrics::gap_to_retrain(r, rt)?);
        }
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub method: String,
    pub lambda: f64,
    pub alpha: f64,
    pub n: usize,
    pub mean: BTreeMap<String, f64>,
    pub std: BTreeMap<String, f64>,
}

type Group = ((String, f64, f64), Vec<BTreeMap<String, f64>>);

/// Mean and sample std of every metric across seeds, per (method, λ, α).
pub fn summarize(reports: &[MetricsReport]) -> Vec<SummaryRow> {
    let mut groups: Vec<Group> = Vec::new();
    for r in reports {
        let key = (r.method.clone(), r.lambda, r.alpha);
        match groups.iter_mut().find(|(k, _)| *k == key) {
            Some((_, v)) => v.push(r.metric_map()),
            None => groups.push((key, vec![r.metric_map()])),
        }
    }
    groups
        .into_iter()
        .map(|((method, lambda, alpha), maps)| {
            let n = maps.len();
            let mut mean = BTreeMap::new();
            let mut std = BTreeMap::new();
            for k in maps[0].keys() {
                let vals: Vec<f64> = maps.iter().filter_map(|m| m.get(k).copied()).collect();
                let mu = vals.iter().sum::<f64>() / vals.len() as f64;
                let sd = if vals.len() > 1 {
                    (vals.iter().map(|v| (v - mu).powi(2)).sum::<f64>() / (vals.len() - 1) as f64).sqrt()
                } else {
                    0.0
                };
                mean.insert(k.clone(), mu);
                std.insert(k.clone(), sd);
            }
            SummaryRow {
                method,
                lambda,
                alpha,
                n,
                mean,
                std,
            }
        })
        .collect()
}

pub fn summary_csv(rows: &[SummaryRow]) -> String {
    let Some(first) = rows.first() else {
        return String::new();
    };
    let keys: Vec<&String> = first.mean.keys().collect();
    let mut out = String::from("method,lambda,alpha,n");
    for k in &keys {
        let _ = write!(out, ",{k}_mean,{k}_std");
    }
    out.push('\n');
    for r in rows {
        let _ = write!(out, "{},{},{},{}", r.method, r.lambda, r.alpha, r.n);
        for k in &keys {
            let m = r.mean.get(*k).copied().unwrap_or(f64::NAN);
            let s = r.std.get(*k).copied().unwrap_or(f64::NAN);
            let _ = write!(out, ",{},{}", metrics::format_metric(k, m), metrics::format_metric(k, s));
        }
        out.push('\n');
    }
    out
}

/// Fixed-width comparison table. Gaps to retrain appear in parentheses.
pub fn comparison_text(reports: &[MetricsReport]) -> String {
    let cols: [(&str, &str); 11] = [
        ("UA", "ua"),
        ("RA", "ra"),
        ("TA", "ta"),
        ("Cov_f", "coverage_forget"),
        ("Size_f", "set_size_forget"),
        ("CR_f", "cr_forget"),
        ("Cov_t", "coverage_test"),
        ("Size_t", "set_size_test"),
        ("CR_t", "cr_test"),
        ("MIA", "mia"),
        ("MIACR", "miacr"),
    ];
    let mut out = format!("{:<16} {:>6} {:>5} {:>5}", "method", "lambda", "alpha", "seed");
    for (h, _) in cols {
        let _ = write!(out, " {h:>15}");
    }
    out.push('\n');
    for r in reports {
        let m = r.metric_map();
        let _ = write!(out, "{:<16} {:>6} {:>5} {:>5}", r.method, r.lambda, r.alpha, r.seed);
        for (_, k) in cols {
            let cell = match m.get(k) {
                None => "-".to_string(),
                Some(v) => {
                    let base = metrics::format_metric(k, *v);
                    match r.gap_to_retrain.as_ref().and_then(|g| g.get(k)) {
                        Some(g) => format!("{base}({})", metrics::format_metric(k, *g)),
                        None => base,
                    }
                }
            };
            let _ = write!(out, " {cell:>15}");
        }
        out.push('\n');
    }
    out
}

/// Record of a command's configuration, outputs and timings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub command: String,
    pub config: serde_json::Value,
    pub artifacts: BTreeMap<String, PathBuf>,
    pub timings_ms: BTreeMap<String, u128>,
}

impl RunManifest {
    pub fn new(command: &str, config: serde_json::Value) -> Self {
        RunManifest {
            tool_version: TOOL_VERSION.to_string(),
            command: command.to_string(),
            config,
            artifacts: BTreeMap::new(),
            timings_ms: BTreeMap::new(),
        }
    }

    pub fn artifact(&mut self, name: impl Into<String>, path: &Path) {
        self.artifacts.insert(name.into(), path.to_path_buf());
    }

    /// Writes the manifest after checking every artifact exists.
    pub fn write(&self, path: &Path) -> Result<()> {
        for (name, p) in &self.artifacts {
            if !p.exists() {
                return Err(Error::Consistency(format!(
                    "manifest artifact `{name}` missing at {}",
                    p.display()
                )));
            }
        }
        csvio::write_string(path, &(serde_json::to_string_pretty(self)? + "\n"))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&csvio::read_to_string(path)?)?)
    }
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    csvio::write_string(path, text)
}

pub fn read_text(path: &Path) -> Result<String> {
    csvio::read_to_string(path)
}

pub fn load_report(path: &Path) -> Result<MetricsReport> {
    MetricsReport::from_json(&csvio::read_to_string(path)?)
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    pub reports: Vec<MetricsReport>,
    pub summary: Vec<SummaryRow>,
    pub manifest: RunManifest,
}

fn fmt_num(v: f64) -> String {
    format!("{v}")
}

/// Full grid. When `out_dir` is given every artifact is written beneath it:
/// per seed the dataset, splits, original checkpoint, and per cell the
/// unlearned checkpoint, epoch log, probability matrix and one report per α;
/// at the top `sweep_rows.csv`, `sweep_summary.csv`, `comparison.txt` and
/// `manifest.json`.
pub fn run_sweep(config: &PipelineConfig, out_dir: Option<&Path>) -> Result<SweepOutput> {
    config.validate()?;
    let started = Instant::now();
    let mut manifest = RunManifest::new("sweep", serde_json::to_value(config)?);
    let per_seed = config
        .seeds
        .par_iter()
        .map(|&s| run_seed(config, s))
        .collect::<Result<Vec<_>>>()?;

    let mut reports: Vec<MetricsReport> = per_seed
        .iter()
        .flat_map(|sr| sr.cells.iter().flat_map(|c| c.reports.iter().map(|(r, _)| r.clone())))
        .collect();
    attach_gaps(&mut reports)?;
    let summary = summarize(&reports);

    if let Some(dir) = out_dir {
        let mut idx = 0;
        for sr in &per_seed {
            let sdir = dir.join(format!("seed_{}", sr.seed));
            let p = sdir.join("dataset.csv");
            sr.dataset.save(&p)?;
            manifest.artifact(format!("seed_{}/dataset", sr.seed), &p);
            let p = sdir.join("splits.csv");
            sr.splits.save(&p)?;
            manifest.artifact(format!("seed_{}/splits", sr.seed), &p);
            let p = sdir.join("original.ckpt");
            sr.original.save(&p)?;
            manifest.artifact(format!("seed_{}/original", sr.seed), &p);
            for cell in &sr.cells {
                let name = format!("{}_lambda{}", cell.method, fmt_num(cell.lambda));
                let cdir = sdir.join(&name);
                let key = format!("seed_{}/{name}", sr.seed);
                let p = cdir.join("unlearned.ckpt");
                cell.outcome.params.save(&p)?;
                manifest.artifact(format!("{key}/checkpoint"), &p);
                let p = cdir.join("epoch_log.csv");
                unlearn::save_epoch_log(&cell.outcome.log, &p)?;
                manifest.artifact(format!("{key}/epoch_log"), &p);
                let p = cdir.join("predictions.csv");
                cell.reports[0].1.save(&p)?;
                manifest.artifact(format!("{key}/predictions"), &p);
                for _ in &cell.reports {
                    let r = &reports[idx];
                    idx += 1;
                    let p = cdir.join(format!("report_alpha{}.json", fmt_num(r.alpha)));
                    write_text(&p, &r.to_json()?)?;
                    manifest.artifact(format!("{key}/report_alpha{}", fmt_num(r.alpha)), &p);
                }
            }
        }
        let p = dir.join("sweep_rows.csv");
        write_text(&p, &metrics::reports_csv(&reports)?)?;
        manifest.artifact("sweep_rows", &p);
        let p = dir.join("sweep_summary.csv");
        write_text(&p, &summary_csv(&summary))?;
        manifest.artifact("sweep_summary", &p);
        let p = dir.join("comparison.txt");
        write_text(&p, &comparison_text(&reports))?;
        manifest.artifact("comparison", &p);
        manifest
            .timings_ms
            .insert("total".to_string(), started.elapsed().as_millis());
        manifest.write(&dir.join("manifest.json"))?;
    }
    Ok(SweepOutput {
        reports,
        summary,
        manifest,
    })
}
