//! `cpu-unlearn` command-line front end.
//!
//! Every command reads and writes plain files under `--out-dir` (default
//! `runs`) unless explicit paths are given, and writes a manifest listing its
//! configuration and artifacts next to its primary output.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or
//! consistency error, 3 numerical divergence.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use cpu_unlearn::conformal::{self, ProbabilityMatrix};
use cpu_unlearn::dataset::{self, Dataset, DatasetSpec, ForgetTarget, Split, SplitAssignment};
use cpu_unlearn::metrics::{self, MetricsReport};
use cpu_unlearn::model::{Mlp, TrainConfig};
use cpu_unlearn::pipeline::{self, EvalConfig, PipelineConfig, RunLabel, RunManifest};
use cpu_unlearn::unlearn::{self, Method, UnlearnRunConfig};
use cpu_unlearn::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "cpu-unlearn", version, about = "Conformal evaluation and unlearning on a synthetic task")]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Args)]
struct Global {
    /// Master seed; every stage derives its own stream from it.
    #[arg(long, global = true, env = "CPU_UNLEARN_SEED", default_value_t = 0)]
    seed: u64,
    /// Miscoverage level for evaluation.
    #[arg(long, global = true, env = "CPU_UNLEARN_ALPHA", default_value_t = unlearn::DEFAULT_ALPHA)]
    alpha: f64,
    /// Weight of the conformal unlearning term.
    #[arg(long, global = true, env = "CPU_UNLEARN_LAMBDA", default_value_t = 0.0)]
    lambda: f64,
    /// Margin of the clamped unlearning losses.
    #[arg(long, global = true, env = "CPU_UNLEARN_DELTA", default_value_t = unlearn::DEFAULT_DELTA)]
    delta: f64,
    /// Unlearning method (retrain, finetune, random_label, gradient_ascent, neggrad_plus).
    #[arg(long, global = true, env = "CPU_UNLEARN_METHOD")]
    method: Option<Method>,
    /// Random forgetting: fraction of the training set to forget.
    #[arg(long, global = true, env = "CPU_UNLEARN_FORGET_FRACTION", conflicts_with = "forget_class")]
    forget_fraction: Option<f64>,
    /// Class-wise forgetting: forget every training sample of this class.
    #[arg(long, global = true, env = "CPU_UNLEARN_FORGET_CLASS")]
    forget_class: Option<usize>,
    /// Requested evaluation calibration size.
    #[arg(long, global = true, env = "CPU_UNLEARN_CALIB_SIZE", default_value_t = pipeline::DEFAULT_CALIB_SIZE)]
    calib_size: usize,
    #[arg(long, global = true, env = "CPU_UNLEARN_OUT_DIR", default_value = "runs")]
    out_dir: PathBuf,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic dataset and its split file.
    GenData(GenDataArgs),
    /// Train the original model on retain ∪ forget.
    Train(TrainArgs),
    /// Run one unlearning method from the original checkpoint.
    Unlearn(UnlearnArgs),
    /// Write the probability matrix of a checkpoint.
    Predict(PredictArgs),
    /// Calibrate, build prediction sets and write a metrics report.
    Eval(EvalArgs),
    /// Train the membership attack and add its metrics to a report.
    Mia(MiaArgs),
    /// Threshold variability as a function of calibration size.
    CalibStability(StabilityArgs),
    /// Full grid over methods, λ, α and seeds.
    Sweep(SweepArgs),
    /// Merge report files into one CSV and text table.
    Report(ReportArgs),
}

#[derive(Debug, Args)]
struct DataPaths {
    /// Dataset CSV [default: <out-dir>/dataset.csv].
    #[arg(long)]
    data: Option<PathBuf>,
    /// Split CSV [default: <out-dir>/splits.csv].
    #[arg(long)]
    split_file: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long)]
    num_classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    train_per_class: Option<usize>,
    #[arg(long)]
    test_per_class: Option<usize>,
    #[arg(long)]
    pool_per_class: Option<usize>,
    #[arg(long)]
    calib_eval_per_class: Option<usize>,
    #[arg(long)]
    calib_unlearn_per_class: Option<usize>,
    #[arg(long)]
    separation: Option<f64>,
    #[arg(long)]
    noise: Option<f64>,
    /// Draw calibration sets uniformly instead of per class.
    #[arg(long)]
    uniform_calibration: bool,
}

#[derive(Debug, Args)]
struct TrainArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long, default_value_t = pipeline::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    #[arg(long)]
    momentum: Option<f64>,
    #[arg(long)]
    batch_size: Option<usize>,
    /// Checkpoint path [default: <out-dir>/original.ckpt].
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct UnlearnArgs {
    #[command(flatten)]
    paths: DataPaths,
    /// Original checkpoint [default: <out-dir>/original.ckpt].
    #[arg(long)]
    model: Option<PathBuf>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    learning_rate: Option<f64>,
    /// Miscoverage level of the per-epoch unlearning threshold.
    #[arg(long, default_value_t = unlearn::DEFAULT_ALPHA)]
    unlearn_alpha: f64,
    #[arg(long, default_value_t = unlearn::DEFAULT_NEGGRAD_BETA)]
    neggrad_beta: f64,
    /// Output directory [default: <out-dir>/<method>_lambda<λ>].
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct PredictArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long)]
    model: PathBuf,
    /// `all` or a comma-separated list of split names.
    #[arg(long, default_value = "all")]
    splits: String,
    /// Output CSV [default: predictions.csv next to the model].
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Split file the prediction rows are checked against.
    #[arg(long)]
    split_file: Option<PathBuf>,
    /// Report of the retrained reference; adds gap-to-retrain deltas.
    #[arg(long)]
    retrain_report: Option<PathBuf>,
    /// Probability matrix whose calib_eval rows replace the calibration scores.
    #[arg(long)]
    shadow_predictions: Option<PathBuf>,
    /// Use the uncorrected ⌈n(1−α)⌉ quantile rank.
    #[arg(long)]
    empirical_quantile: bool,
    /// Report JSON [default: report_alpha<α>.json next to the predictions].
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct MiaArgs {
    #[arg(long)]
    predictions: PathBuf,
    /// Report JSON updated in place.
    #[arg(long)]
    report: PathBuf,
    /// Attack model file [default: attack.txt next to the report].
    #[arg(long)]
    attack_output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StabilityArgs {
    #[command(flatten)]
    paths: DataPaths,
    #[arg(long)]
    model: PathBuf,
    #[arg(long, value_delimiter = ',', default_value = "50,100,200,500,1000,1500,2000")]
    sizes: Vec<usize>,
    #[arg(long, default_value_t = 20)]
    repeats: usize,
    /// Output directory [default: <out-dir>/stability].
    #[arg(long)]
    output_dir: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SweepArgs {
    #[arg(long, value_delimiter = ',')]
    methods: Vec<Method>,
    /// λ values [default: the global --lambda].
    #[arg(long, value_delimiter = ',')]
    lambdas: Vec<f64>,
    /// α values [default: the global --alpha].
    #[arg(long, value_delimiter = ',')]
    alphas: Vec<f64>,
    #[arg(long, value_delimiter = ',', default_value = "0,1,2")]
    seeds: Vec<u64>,
    #[arg(long, default_value_t = pipeline::DEFAULT_HIDDEN)]
    hidden: usize,
    #[arg(long, default_value_t = unlearn::DEFAULT_ALPHA)]
    unlearn_alpha: f64,
    /// Semi-shadow calibration for label-corrupting methods.
    #[arg(long)]
    semi_shadow_epochs: Option<usize>,
    #[arg(long)]
    no_mia: bool,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Report JSON files.
    #[arg(required = true)]
    inputs: Vec<PathBuf>,
    /// Output stem [default: <out-dir>/report]; writes .csv and .txt.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code() as u8)
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    let g = &cli.global;
    match &cli.command {
        Command::GenData(a) => gen_data(g, a),
        Command::Train(a) => train(g, a),
        Command::Unlearn(a) => unlearn_cmd(g, a),
        Command::Predict(a) => predict(g, a),
        Command::Eval(a) => eval(g, a),
        Command::Mia(a) => mia_cmd(g, a),
        Command::CalibStability(a) => stability(g, a),
        Command::Sweep(a) => sweep(g, a),
        Command::Report(a) => report(g, a),
    }
}

impl Global {
    fn forget(&self) -> Option<ForgetTarget> {
        match (self.forget_class, self.forget_fraction) {
            (Some(c), _) => Some(ForgetTarget::Class(c)),
            (None, Some(f)) => Some(ForgetTarget::Fraction(f)),
            (None, None) => None,
        }
    }

    fn require_method(&self) -> Result<Method> {
        self.method
            .ok_or_else(|| Error::Config("--method is required for this command".into()))
    }
}

impl DataPaths {
    fn data(&self, g: &Global) -> PathBuf {
        self.data.clone().unwrap_or_else(|| g.out_dir.join("dataset.csv"))
    }

    fn splits(&self, g: &Global) -> PathBuf {
        self.split_file.clone().unwrap_or_else(|| g.out_dir.join("splits.csv"))
    }

    fn load(&self, g: &Global, num_classes: Option<usize>) -> Result<(Dataset, SplitAssignment)> {
        let dataset = Dataset::load(&self.data(g), num_classes)?;
        let splits = SplitAssignment::load(&self.splits(g))?;
        dataset.check_splits(&splits)?;
        Ok((dataset, splits))
    }
}

fn parent_of(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

fn finish(mut manifest: RunManifest, dir: &Path, started: Instant) -> Result<()> {
    manifest
        .timings_ms
        .insert("total".to_string(), started.elapsed().as_millis());
    let path = dir.join(format!("manifest_{}.json", manifest.command));
    manifest.write(&path)
}

fn gen_data(g: &Global, a: &GenDataArgs) -> Result<()> {
    let started = Instant::now();
    let d = DatasetSpec::default();
    let spec = DatasetSpec {
        num_classes: a.num_classes.unwrap_or(d.num_classes),
        dim: a.dim.unwrap_or(d.dim),
        train_per_class: a.train_per_class.unwrap_or(d.train_per_class),
        test_per_class: a.test_per_class.unwrap_or(d.test_per_class),
        pool_per_class: a.pool_per_class.unwrap_or(d.pool_per_class),
        calib_eval_per_class: a.calib_eval_per_class.unwrap_or(d.calib_eval_per_class),
        calib_unlearn_per_class: a.calib_unlearn_per_class.unwrap_or(d.calib_unlearn_per_class),
        separation: a.separation.unwrap_or(d.separation),
        noise: a.noise.unwrap_or(d.noise),
        seed: g.seed,
        forget: g.forget().unwrap_or(d.forget),
        balanced_calibration: !a.uniform_calibration,
    };
    let (dataset, splits) = dataset::generate(&spec)?;
    let mut manifest = RunManifest::new("gen-data", serde_json::to_value(&spec)?);
    let p = g.out_dir.join("dataset.csv");
    dataset.save(&p)?;
    manifest.artifact("dataset", &p);
    let p = g.out_dir.join("splits.csv");
    splits.save(&p)?;
    manifest.artifact("splits", &p);
    finish(manifest, &g.out_dir, started)
}

fn train(g: &Global, a: &TrainArgs) -> Result<()> {
    let started = Instant::now();
    let (dataset, splits) = a.paths.load(g, None)?;
    let d = TrainConfig::default();
    let cfg = TrainConfig {
        epochs: a.epochs.unwrap_or(d.epochs),
        learning_rate: a.learning_rate.unwrap_or(d.learning_rate),
        momentum: a.momentum.unwrap_or(d.momentum),
        batch_size: a.batch_size.unwrap_or(d.batch_size),
        seed: g.seed,
    };
    let (params, stats) = pipeline::train_original(&dataset, &splits, a.hidden, &cfg)?;
    let out = a.output.clone().unwrap_or_else(|| g.out_dir.join("original.ckpt"));
    let dir = parent_of(&out);
    let mut manifest = RunManifest::new(
        "train",
        json!({ "train": cfg, "hidden_dim": a.hidden, "data": a.paths.data(g), "splits": a.paths.splits(g) }),
    );
    params.save(&out)?;
    manifest.artifact("checkpoint", &out);
    let mut log = String::from("epoch,mean_loss,accuracy\n");
    for s in &stats {
        log.push_str(&format!("{},{:e},{:e}\n", s.epoch, s.mean_loss, s.accuracy));
    }
    let p = dir.join("train_log.csv");
    pipeline::write_text(&p, &log)?;
    manifest.artifact("train_log", &p);
    finish(manifest, &dir, started)
}

fn unlearn_cmd(g: &Global, a: &UnlearnArgs) -> Result<()> {
    let started = Instant::now();
    let method = g.require_method()?;
    let model_path = a.model.clone().unwrap_or_else(|| g.out_dir.join("original.ckpt"));
    let original = Mlp::load(&model_path)?;
    let (dataset, splits) = a.paths.load(g, Some(original.num_classes))?;
    let preset = if method == Method::Retrain {
        let t = TrainConfig::default();
        UnlearnRunConfig {
            epochs: t.epochs,
            learning_rate: t.learning_rate,
            ..UnlearnRunConfig::preset(method)
        }
    } else {
        UnlearnRunConfig::preset(method)
    };
    let cfg = UnlearnRunConfig {
        lambda: g.lambda,
        delta: g.delta,
        alpha: a.unlearn_alpha,
        epochs: a.epochs.unwrap_or(preset.epochs),
        learning_rate: a.learning_rate.unwrap_or(preset.learning_rate),
        seed: g.seed,
        neggrad_beta: a.neggrad_beta,
        ..preset
    };
    let outcome = unlearn::run_method(&cfg, &original, &dataset, &splits)?;
    let dir = a
        .output_dir
        .clone()
        .unwrap_or_else(|| g.out_dir.join(format!("{}_lambda{}", method, g.lambda)));
    let mut manifest = RunManifest::new("unlearn", json!({ "unlearn": cfg, "model": model_path }));
    let p = dir.join("unlearned.ckpt");
    outcome.params.save(&p)?;
    manifest.artifact("checkpoint", &p);
    let p = dir.join("epoch_log.csv");
    unlearn::save_epoch_log(&outcome.log, &p)?;
    manifest.artifact("epoch_log", &p);
    finish(manifest, &dir, started)
}

fn parse_splits(text: &str) -> Result<Vec<Split>> {
    if text.trim().eq_ignore_ascii_case("all") {
        return Ok(Split::ALL.to_vec());
    }
    text.split(',').map(|s| s.trim().parse()).collect()
}

fn predict(g: &Global, a: &PredictArgs) -> Result<()> {
    let started = Instant::now();
    let params = Mlp::load(&a.model)?;
    let (dataset, splits) = a.paths.load(g, Some(params.num_classes))?;
    let which = parse_splits(&a.splits)?;
    let matrix = params.predict_matrix(&dataset, &splits, &which)?;
    let out = a.output.clone().unwrap_or_else(|| parent_of(&a.model).join("predictions.csv"));
    let names: Vec<&str> = which.iter().map(|s| s.name()).collect();
    let mut manifest = RunManifest::new("predict", json!({ "model": a.model, "splits": names }));
    matrix.save(&out)?;
    manifest.artifact("predictions", &out);
    finish(manifest, &parent_of(&out), started)
}

fn eval(g: &Global, a: &EvalArgs) -> Result<()> {
    let started = Instant::now();
    let matrix = ProbabilityMatrix::load(&a.predictions)?;
    if let Some(path) = &a.split_file {
        let splits = SplitAssignment::load(path)?;
        for split in pipeline::EVAL_SPLITS {
            matrix.check_split_members(split, splits.get(split))?;
        }
    }
    let shadow = a.shadow_predictions.as_deref().map(ProbabilityMatrix::load).transpose()?;
    let cfg = EvalConfig {
        alpha: g.alpha,
        calib_size: g.calib_size,
        rule: if a.empirical_quantile {
            conformal::QuantileRule::Empirical
        } else {
            conformal::QuantileRule::Corrected
        },
        semi_shadow_epochs: None,
        with_mia: false,
    };
    let label = RunLabel {
        method: g.method.map(|m| m.name().to_string()).unwrap_or_else(|| "model".into()),
        lambda: g.lambda,
        seed: g.seed,
    };
    let mut report = pipeline::evaluate_matrix(&matrix, shadow.as_ref(), &label, &cfg)?;
    if let Some(path) = &a.retrain_report {
        let rt = pipeline::load_report(path)?;
        report.gap_to_retrain = Some(metrics::gap_to_retrain(&report, &rt)?);
    }
    let out = a
        .output
        .clone()
        .unwrap_or_else(|| parent_of(&a.predictions).join(format!("report_alpha{}.json", g.alpha)));
    let mut manifest = RunManifest::new(
        "eval",
        json!({ "eval": cfg, "predictions": a.predictions, "split_file": a.split_file,
                "retrain_report": a.retrain_report, "shadow_predictions": a.shadow_predictions }),
    );
    pipeline::write_text(&out, &report.to_json()?)?;
    manifest.artifact("report", &out);
    finish(manifest, &parent_of(&out), started)
}

fn mia_cmd(_g: &Global, a: &MiaArgs) -> Result<()> {
    let started = Instant::now();
    let matrix = ProbabilityMatrix::load(&a.predictions)?;
    let mut report = pipeline::load_report(&a.report)?;
    let attack = pipeline::attach_mia(&mut report, &matrix)?;
    let dir = parent_of(&a.report);
    let attack_path = a.attack_output.clone().unwrap_or_else(|| dir.join("attack.txt"));
    let mut manifest = RunManifest::new("mia", json!({ "predictions": a.predictions, "report": a.report }));
    pipeline::write_text(&a.report, &report.to_json()?)?;
    manifest.artifact("report", &a.report);
    attack.save(&attack_path)?;
    manifest.artifact("attack", &attack_path);
    finish(manifest, &dir, started)
}

fn stability(g: &Global, a: &StabilityArgs) -> Result<()> {
    let started = Instant::now();
    let params = Mlp::load(&a.model)?;
    let (dataset, splits) = a.paths.load(g, Some(params.num_classes))?;
    let pool = [Split::CalibEval, Split::Pool];
    let matrix = params.predict_matrix(&dataset, &splits, &pool)?;
    let scores: Vec<f64> = pool.iter().flat_map(|&s| matrix.true_label_scores(s)).collect();
    let study = conformal::stability_study(&scores, &a.sizes, a.repeats, g.alpha, g.seed)?;
    let dir = a.output_dir.clone().unwrap_or_else(|| g.out_dir.join("stability"));
    let mut manifest = RunManifest::new(
        "calib-stability",
        json!({ "model": a.model, "sizes": a.sizes, "repeats": a.repeats, "alpha": g.alpha,
                "seed": g.seed, "pool_size": scores.len() }),
    );
    let p = dir.join("stability_draws.csv");
    pipeline::write_text(&p, &study.draws_csv())?;
    manifest.artifact("draws", &p);
    let p = dir.join("stability_summary.csv");
    pipeline::write_text(&p, &study.summary_csv())?;
    manifest.artifact("summary", &p);
    finish(manifest, &dir, started)
}

fn sweep(g: &Global, a: &SweepArgs) -> Result<()> {
    let base = PipelineConfig::default();
    let mut dataset = base.dataset.clone();
    if let Some(f) = g.forget() {
        dataset.forget = f;
    }
    let cfg = PipelineConfig {
        dataset,
        hidden_dim: a.hidden,
        methods: if a.methods.is_empty() { base.methods.clone() } else { a.methods.clone() },
        lambdas: if a.lambdas.is_empty() { vec![g.lambda] } else { a.lambdas.clone() },
        alphas: if a.alphas.is_empty() { vec![g.alpha] } else { a.alphas.clone() },
        seeds: a.seeds.clone(),
        delta: g.delta,
        unlearn_alpha: a.unlearn_alpha,
        eval: EvalConfig {
            calib_size: g.calib_size,
            semi_shadow_epochs: a.semi_shadow_epochs,
            with_mia: !a.no_mia,
            ..EvalConfig::default()
        },
        ..base
    };
    let out = pipeline::run_sweep(&cfg, Some(&g.out_dir))?;
    print!("{}", pipeline::comparison_text(&out.reports));
    Ok(())
}

fn report(g: &Global, a: &ReportArgs) -> Result<()> {
    let started = Instant::now();
    let mut reports = a
        .inputs
        .iter()
        .map(|p| pipeline::load_report(p))
        .collect::<Result<Vec<MetricsReport>>>()?;
    if reports.iter().any(|r| r.method == Method::Retrain.name()) {
        pipeline::attach_gaps(&mut reports)?;
    }
    let stem = a.output.clone().unwrap_or_else(|| g.out_dir.join("report"));
    let csv = stem.with_extension("csv");
    let txt = stem.with_extension("txt");
    let mut manifest = RunManifest::new("report", json!({ "inputs": a.inputs }));
    pipeline::write_text(&csv, &metrics::reports_csv(&reports)?)?;
    manifest.artifact("csv", &csv);
    let text = pipeline::comparison_text(&reports);
    pipeline::write_text(&txt, &text)?;
    manifest.artifact("text", &txt);
    print!("{text}");
    finish(manifest, &parent_of(&csv), started)
}
