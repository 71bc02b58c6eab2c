//! Unlearning methods and the conformal unlearning loss.
//!
//! Five host methods are provided: retraining from scratch, finetuning on the
//! retain set, random relabelling of the forget set, gradient ascent on the
//! forget set, and NegGrad+. Any of them can be wrapped with the conformal
//! term: forget samples additionally contribute `λ · max{q̄ − S(x, y), −Δ}`,
//! where `S = 1 − p_y` and q̄ is re-calibrated on D_c' at the start of every
//! epoch. Minimising the term pushes the true-label score past q̄ by Δ, at
//! which point its gradient switches off.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalCalibrator, QuantileRule, Threshold};
use crate::csvio;
use crate::dataset::{Dataset, Sample, SplitAssignment};
use crate::error::{Error, Result};
use crate::model::{
    self, accuracy, cross_entropy, cross_entropy_logit_grad, softmax_backward, Mlp, Objective, SampleLoss,
    TrainConfig,
};
use crate::seed;

pub const DEFAULT_DELTA: f64 = 0.01;
pub const DEFAULT_ALPHA: f64 = 0.05;
pub const DEFAULT_NEGGRAD_BETA: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Retrain,
    Finetune,
    RandomLabel,
    GradientAscent,
    NegGradPlus,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Retrain,
        Method::Finetune,
        Method::RandomLabel,
        Method::GradientAscent,
        Method::NegGradPlus,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Retrain => "retrain",
            Method::Finetune => "finetune",
            Method::RandomLabel => "random_label",
            Method::GradientAscent => "gradient_ascent",
            Method::NegGradPlus => "neggrad_plus",
        }
    }

    pub fn short(self) -> &'static str {
        match self {
            Method::Retrain => "RT",
            Method::Finetune => "FT",
            Method::RandomLabel => "RL",
            Method::GradientAscent => "GA",
            Method::NegGradPlus => "NG+",
        }
    }

    /// Methods that train on corrupted labels and so shift the forget-set
    /// score distribution away from the calibration data.
    pub fn corrupts_labels(self) -> bool {
        matches!(self, Method::RandomLabel)
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.trim().to_ascii_lowercase().replace('-', "_");
        Method::ALL
            .into_iter()
            .find(|m| m.name() == norm || m.short().eq_ignore_ascii_case(s.trim()))
            .or(match norm.as_str() {
                "rt" => Some(Method::Retrain),
                "ft" => Some(Method::Finetune),
                "rl" => Some(Method::RandomLabel),
                "ga" => Some(Method::GradientAscent),
                "neggrad+" | "ng+" | "neggradplus" => Some(Method::NegGradPlus),
                _ => None,
            })
            .ok_or_else(|| Error::Config(format!("unknown unlearning method `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnRunConfig {
    pub method: Method,
    pub lambda: f64,
    pub delta: f64,
    pub alpha: f64,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub neggrad_beta: f64,
}

impl UnlearnRunConfig {
    /// Per-method defaults tuned for the synthetic task.
    pub fn preset(method: Method) -> Self {
        let (epochs, learning_rate) = match method {
            Method::Retrain => (TrainConfig::default().epochs, TrainConfig::default().learning_rate),
            Method::Finetune => (20, 0.05),
            Method::RandomLabel => (10, 0.05),
            Method::GradientAscent => (1, 0.05),
            Method::NegGradPlus => (10, 0.05),
        };
        UnlearnRunConfig {
            method,
            lambda: 0.0,
            delta: DEFAULT_DELTA,
            alpha: DEFAULT_ALPHA,
            epochs,
            learning_rate,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
            neggrad_beta: DEFAULT_NEGGRAD_BETA,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::Config(format!("lambda {} must be finite and >= 0", self.lambda)));
        }
        if !(self.delta > 0.0 && self.delta.is_finite()) {
            return Err(Error::Config(format!("delta {} must be positive", self.delta)));
        }
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::Config(format!("alpha {} must lie in (0, 1)", self.alpha)));
        }
        if !(self.neggrad_beta > 0.0 && self.neggrad_beta <= 1.0) {
            return Err(Error::Config(format!("NegGrad+ beta {} must lie in (0, 1]", self.neggrad_beta)));
        }
        self.train_config().validate()
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            momentum: self.momentum,
            batch_size: self.batch_size,
            seed: seed::derive_seed(self.seed, &format!("unlearn/{}/shuffle", self.method)),
        }
    }
}

/// Loss value with its gradient with respect to the probability vector.
#[derive(Debug, Clone, PartialEq)]
pub struct LossValue {
    pub value: f64,
    pub grad: Vec<f64>,
    /// The `−Δ` branch of the max is active; the gradient is zero.
    pub clamped: bool,
}

fn check_label(probs: &[f64], label: usize) -> Result<()> {
    if label >= probs.len() {
        return Err(Error::Index {
            index: label,
            len: probs.len(),
        });
    }
    Ok(())
}

fn clamp_at(raw: f64, delta: f64, unclamped_grad: impl FnOnce() -> Vec<f64>, k: usize) -> LossValue {
    if raw > -delta {
        LossValue {
            value: raw,
            grad: unclamped_grad(),
            clamped: false,
        }
    } else {
        LossValue {
            value: -delta,
            grad: vec![0.0; k],
            clamped: true,
        }
    }
}

/// Margin loss `max{p_t − max_{i≠t} p_i, −Δ}`. The competitor is the lowest
/// index among the largest non-true probabilities.
pub fn loss_cw(probs: &[f64], label: usize, delta: f64) -> Result<LossValue> {
    check_label(probs, label)?;
    let competitor = (0..probs.len())
        .filter(|&i| i != label)
        .fold(None, |best: Option<usize>, i| match best {
            Some(b) if probs[b] >= probs[i] => Some(b),
            _ => Some(i),
        })
        .ok_or(Error::Index { index: label, len: 1 })?;
    let raw = probs[label] - probs[competitor];
    Ok(clamp_at(
        raw,
        delta,
        || {
            let mut g = vec![0.0; probs.len()];
            g[label] = 1.0;
            g[competitor] = -1.0;
            g
        },
        probs.len(),
    ))
}

/// Conformal unlearning loss `max{q̄ − S(x, y_t), −Δ}` with `S = 1 − p_t`.
pub fn loss_unlearn(probs: &[f64], label: usize, q_bar: f64, delta: f64) -> Result<LossValue> {
    check_label(probs, label)?;
    let score = 1.0 - probs[label];
    Ok(clamp_at(
        q_bar - score,
        delta,
        || {
            let mut g = vec![0.0; probs.len()];
            g[label] = 1.0;
            g
        },
        probs.len(),
    ))
}

/// `L_original + λ·L_unlearn`, gradients combined linearly. At λ = 0 the
/// original loss is returned untouched.
pub fn loss_total(original: &LossValue, unlearn: &LossValue, lambda: f64) -> Result<LossValue> {
    if lambda.is_nan() || lambda < 0.0 {
        return Err(Error::Config(format!("lambda {lambda} must be >= 0")));
    }
    if original.grad.len() != unlearn.grad.len() {
        return Err(Error::Dimension {
            what: "loss gradients",
            expected: original.grad.len(),
            got: unlearn.grad.len(),
        });
    }
    if lambda == 0.0 {
        return Ok(original.clone());
    }
    Ok(LossValue {
        value: original.value + lambda * unlearn.value,
        grad: original.grad.iter().zip(&unlearn.grad).map(|(a, b)| a + lambda * b).collect(),
        clamped: false,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct UnlearnThreshold {
    pub q_bar: f64,
    pub epoch: usize,
    pub source_size: usize,
    pub include_all: bool,
}

/// q̄: corrected-rank (1−α) quantile of true-label scores on D_c' under `params`.
pub fn compute_q_bar(params: &Mlp, calib: &[&Sample], alpha: f64, epoch: usize) -> Result<UnlearnThreshold> {
    if calib.is_empty() {
        return Err(Error::Calibration("unlearning calibration set D_c' is empty".into()));
    }
    let scores = calib
        .iter()
        .map(|s| Ok(1.0 - params.forward(&s.features)?[s.label]))
        .collect::<Result<Vec<_>>>()?;
    let cal = ConformalCalibrator::from_scores(scores, alpha, QuantileRule::Corrected)?;
    Ok(UnlearnThreshold {
        q_bar: cal.q_hat(),
        epoch,
        source_size: calib.len(),
        include_all: cal.threshold == Threshold::IncludeAll,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub epoch: usize,
    /// Per-epoch sums divided by the number of training samples seen, so
    /// `loss_total = loss_orig + λ·loss_unlearn`.
    pub loss_orig: f64,
    pub loss_unlearn: f64,
    pub loss_total: f64,
    pub q_bar: f64,
    pub acc_forget: f64,
    pub acc_retain: f64,
    pub acc_test: f64,
}

pub fn epoch_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,loss_orig,loss_unlearn,q_bar,acc_forget,acc_retain,acc_test,loss_total\n");
    for e in log {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            e.epoch, e.loss_orig, e.loss_unlearn, e.q_bar, e.acc_forget, e.acc_retain, e.acc_test, e.loss_total
        );
    }
    out
}

pub fn save_epoch_log(log: &[EpochLog], path: &Path) -> Result<()> {
    csvio::write_string(path, &epoch_log_csv(log))
}

#[derive(Debug, Clone)]
pub struct UnlearnOutcome {
    pub params: Mlp,
    pub log: Vec<EpochLog>,
    pub thresholds: Vec<UnlearnThreshold>,
    /// Forget samples handed to the training objective.
    pub forget_reads: usize,
}

/// One evaluation of the conformal losses on a forget sample during training.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ForgetStep {
    pub epoch: usize,
    pub id: usize,
    pub q_bar: f64,
    pub loss_cw: f64,
    pub loss_unlearn: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Role {
    Retain,
    Forget,
}

struct EvalSets<'a> {
    forget: Vec<&'a Sample>,
    retain: Vec<&'a Sample>,
    test: Vec<&'a Sample>,
    calib_unlearn: Vec<&'a Sample>,
}

struct UnlearnObjective<'a, 'o> {
    config: UnlearnRunConfig,
    observer: Option<&'o mut dyn FnMut(&ForgetStep)>,
    epoch: usize,
    cpu: bool,
    roles: BTreeMap<usize, Role>,
    relabel: BTreeMap<usize, usize>,
    eval: EvalSets<'a>,
    q_bar: f64,
    sums: (f64, f64, f64),
    seen: usize,
    forget_reads: usize,
    log: Vec<EpochLog>,
    thresholds: Vec<UnlearnThreshold>,
}

impl UnlearnObjective<'_, '_> {
    /// Host loss of one sample as a logit-layer gradient.
    fn host_loss(&self, sample: &Sample, role: Role, probs: &[f64]) -> (f64, Vec<f64>) {
        let ce = |label: usize, scale: f64| {
            let mut g = cross_entropy_logit_grad(probs, label);
            g.iter_mut().for_each(|v| *v *= scale);
            (scale * cross_entropy(probs, label), g)
        };
        match (self.config.method, role) {
            (_, Role::Retain) => ce(sample.label, 1.0),
            (Method::RandomLabel, Role::Forget) => ce(self.relabel[&sample.id], 1.0),
            (Method::GradientAscent, Role::Forget) => ce(sample.label, -1.0),
            (Method::NegGradPlus, Role::Forget) => ce(sample.label, -self.config.neggrad_beta),
            // Retrain and finetune only see forget samples through the conformal term.
            (Method::Retrain | Method::Finetune, Role::Forget) => (0.0, vec![0.0; probs.len()]),
        }
    }
}

impl Objective for UnlearnObjective<'_, '_> {
    fn begin_epoch(&mut self, epoch: usize, params: &Mlp) -> Result<()> {
        let t = compute_q_bar(params, &self.eval.calib_unlearn, self.config.alpha, epoch)?;
        self.q_bar = t.q_bar;
        self.epoch = epoch;
        self.thresholds.push(t);
        self.sums = (0.0, 0.0, 0.0);
        self.seen = 0;
        Ok(())
    }

    fn sample_loss(&mut self, sample: &Sample, probs: &[f64]) -> Result<SampleLoss> {
        let role = *self
            .roles
            .get(&sample.id)
            .ok_or_else(|| Error::Consistency(format!("sample {} has no training role", sample.id)))?;
        self.seen += 1;
        let (orig_value, mut grad_logits) = self.host_loss(sample, role, probs);
        let mut unlearn_value = 0.0;
        let mut total_value = orig_value;
        if role == Role::Forget {
            self.forget_reads += 1;
            let delta = self.config.delta;
            let cw = loss_cw(probs, sample.label, delta)?;
            let unl = loss_unlearn(probs, sample.label, self.q_bar, delta)?;
            if let Some(observe) = self.observer.as_mut() {
                observe(&ForgetStep {
                    epoch: self.epoch,
                    id: sample.id,
                    q_bar: self.q_bar,
                    loss_cw: cw.value,
                    loss_unlearn: unl.value,
                });
            }
            if !(-delta..=1.0).contains(&cw.value) {
                return Err(Error::Invariant(format!("L_cw = {} outside [-Δ, 1]", cw.value)));
            }
            if !(-delta..=self.q_bar).contains(&unl.value) {
                return Err(Error::Invariant(format!(
                    "L_unlearn = {} outside [-Δ, q̄ = {}]",
                    unl.value, self.q_bar
                )));
            }
            if self.cpu {
                unlearn_value = unl.value;
                let host = LossValue {
                    value: orig_value,
                    grad: vec![0.0; probs.len()],
                    clamped: false,
                };
                let total = loss_total(&host, &unl, self.config.lambda)?;
                total_value = total.value;
                // Host gradient is already at the logits; the conformal
                // gradient lives on the probabilities.
                for (g, u) in grad_logits.iter_mut().zip(softmax_backward(probs, &total.grad)) {
                    *g += u;
                }
            }
        }
        self.sums.0 += orig_value;
        self.sums.1 += unlearn_value;
        self.sums.2 += total_value;
        Ok(SampleLoss {
            value: total_value,
            grad_logits,
        })
    }

    fn end_epoch(&mut self, epoch: usize, params: &Mlp) -> Result<()> {
        let n = self.seen.max(1) as f64;
        self.log.push(EpochLog {
            epoch,
            loss_orig: self.sums.0 / n,
            loss_unlearn: self.sums.1 / n,
            loss_total: self.sums.2 / n,
            q_bar: self.q_bar,
            acc_forget: accuracy(params, &self.eval.forget)?,
            acc_retain: accuracy(params, &self.eval.retain)?,
            acc_test: accuracy(params, &self.eval.test)?,
        });
        Ok(())
    }
}

/// Uniformly random wrong label for every forget id, fixed by `seed`.
pub fn random_wrong_labels(samples: &[&Sample], num_classes: usize, seed: u64) -> BTreeMap<usize, usize> {
    let mut rng = seed::rng(seed);
    let mut sorted: Vec<&Sample> = samples.to_vec();
    sorted.sort_by_key(|s| s.id);
    sorted
        .into_iter()
        .map(|s| (s.id, (s.label + rng.random_range(1..num_classes)) % num_classes))
        .collect()
}

fn run(
    config: &UnlearnRunConfig,
    original: &Mlp,
    dataset: &Dataset,
    splits: &SplitAssignment,
    cpu: bool,
    observer: Option<&mut dyn FnMut(&ForgetStep)>,
) -> Result<UnlearnOutcome> {
    config.validate()?;
    dataset.check_splits(splits)?;
    let forget = dataset.select(&splits.forget)?;
    let retain = dataset.select(&splits.retain)?;
    let eval = EvalSets {
        forget: forget.clone(),
        retain: retain.clone(),
        test: dataset.select(&splits.test)?,
        calib_unlearn: dataset.select(&splits.calib_unlearn)?,
    };
    let with_cpu = cpu && config.lambda > 0.0;

    let (use_retain, use_forget) = match config.method {
        Method::Retrain => (true, false),
        Method::Finetune => (true, with_cpu),
        Method::RandomLabel | Method::NegGradPlus => (true, true),
        Method::GradientAscent => (false, true),
    };
    let mut roles = BTreeMap::new();
    let mut train_set: Vec<&Sample> = Vec::new();
    if use_retain {
        train_set.extend(&retain);
        roles.extend(retain.iter().map(|s| (s.id, Role::Retain)));
    }
    if use_forget {
        train_set.extend(&forget);
        roles.extend(forget.iter().map(|s| (s.id, Role::Forget)));
    }
    train_set.sort_by_key(|s| s.id);

    let relabel = if config.method == Method::RandomLabel {
        random_wrong_labels(&forget, dataset.num_classes, seed::derive_seed(config.seed, "unlearn/random_label"))
    } else {
        BTreeMap::new()
    };

    let start = if config.method == Method::Retrain {
        Mlp::init(
            original.input_dim,
            original.hidden_dim,
            original.num_classes,
            seed::derive_seed(config.seed, "unlearn/retrain/init"),
        )?
    } else {
        original.clone()
    };

    let mut objective = UnlearnObjective {
        config: *config,
        observer,
        epoch: 0,
        cpu: with_cpu,
        roles,
        relabel,
        eval,
        q_bar: 0.0,
        sums: (0.0, 0.0, 0.0),
        seen: 0,
        forget_reads: 0,
        log: Vec::new(),
        thresholds: Vec::new(),
    };
    let (params, _) = model::train_with(start, &train_set, &config.train_config(), &mut objective)?;
    Ok(UnlearnOutcome {
        params,
        log: objective.log,
        thresholds: objective.thresholds,
        forget_reads: objective.forget_reads,
    })
}

/// Runs `config.method`, adding the conformal term when `config.lambda > 0`.
pub fn run_method(
    config: &UnlearnRunConfig,
    original: &Mlp,
    dataset: &Dataset,
    splits: &SplitAssignment,
) -> Result<UnlearnOutcome> {
    run(config, original, dataset, splits, true, None)
}

/// [`run_method`] reporting every forget-sample loss evaluation to `observer`.
pub fn run_method_observed(
    config: &UnlearnRunConfig,
    original: &Mlp,
    dataset: &Dataset,
    splits: &SplitAssignment,
    observer: &mut dyn FnMut(&ForgetStep),
) -> Result<UnlearnOutcome> {
    run(config, original, dataset, splits, true, Some(observer))
}

/// Runs the host method alone; `config.lambda` is ignored.
pub fn run_host(
    config: &UnlearnRunConfig,
    original: &Mlp,
    dataset: &Dataset,
    splits: &SplitAssignment,
) -> Result<UnlearnOutcome> {
    run(config, original, dataset, splits, false, None)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SemiShadowConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for SemiShadowConfig {
    fn default() -> Self {
        SemiShadowConfig {
            epochs: 2,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

/// Copy of `original` finetuned on calibration samples with random wrong
/// labels. Its calibration scores stand in for the raw ones when evaluating
/// label-corrupting methods.
pub fn semi_shadow_calibrate(original: &Mlp, calib: &[&Sample], config: &SemiShadowConfig) -> Result<Mlp> {
    if config.epochs == 0 {
        return Err(Error::Config("semi-shadow calibration needs at least one epoch".into()));
    }
    if calib.is_empty() {
        return Err(Error::Calibration("no calibration samples for semi-shadow model".into()));
    }
    let labels = random_wrong_labels(calib, original.num_classes, seed::derive_seed(config.seed, "shadow/labels"));
    let relabelled: Vec<Sample> = calib
        .iter()
        .map(|s| Sample {
            id: s.id,
            features: s.features.clone(),
            label: labels[&s.id],
        })
        .collect();
    let refs: Vec<&Sample> = relabelled.iter().collect();
    let cfg = TrainConfig {
        epochs: config.epochs,
        learning_rate: config.learning_rate,
        momentum: config.momentum,
        batch_size: config.batch_size,
        seed: seed::derive_seed(config.seed, "shadow/shuffle"),
    };
    let (params, _) = model::train(original.clone(), &refs, &cfg)?;
    Ok(params)
}

/// Mean true-label nonconformity of `samples` under `params`.
pub fn mean_score(params: &Mlp, samples: &[&Sample]) -> Result<f64> {
    let mut sum = 0.0;
    for s in samples {
        sum += 1.0 - params.forward(&s.features)?[s.label];
    }
    Ok(sum / samples.len().max(1) as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{generate, DatasetSpec};

    #[test]
    fn cw_examples() {
        let l = loss_cw(&[0.6, 0.3, 0.1], 0, 0.01).unwrap();
        assert!((l.value - 0.3).abs() < 1e-15 && !l.clamped);
        assert_eq!(l.grad, vec![1.0, -1.0, 0.0]);
        let l = loss_cw(&[0.05, 0.95, 0.0], 0, 0.01).unwrap();
        assert_eq!(l.value, -0.01);
        assert!(l.clamped && l.grad.iter().all(|&g| g == 0.0));
        assert!(matches!(loss_cw(&[0.5, 0.5], 2, 0.01), Err(Error::Index { .. })));
        // Tied competitors: lowest index wins.
        let l = loss_cw(&[0.5, 0.25, 0.25], 0, 0.01).unwrap();
        assert_eq!(l.grad, vec![1.0, -1.0, 0.0]);
    }

    #[test]
    fn unlearn_examples() {
        let l = loss_unlearn(&[0.5, 0.5], 0, 0.8, 0.01).unwrap();
        assert!((l.value - 0.3).abs() < 1e-15);
        assert_eq!(l.grad, vec![1.0, 0.0]);
        let l = loss_unlearn(&[0.05, 0.95], 0, 0.8, 0.01).unwrap();
        assert_eq!(l.value, -0.01);
        assert!(l.clamped && l.grad == vec![0.0, 0.0]);
    }

    #[test]
    fn total_examples() {
        let o = LossValue {
            value: 0.5,
            grad: vec![0.1, -0.2],
            clamped: false,
        };
        let u = LossValue {
            value: 0.3,
            grad: vec![1.0, 0.0],
            clamped: false,
        };
        assert_eq!(loss_total(&o, &u, 0.0).unwrap(), o);
        let t = loss_total(&o, &u, 1.0).unwrap();
        assert!((t.value - 0.8).abs() < 1e-15);
        let t = loss_total(&o, &u, 0.5).unwrap();
        assert_eq!(t.grad, vec![0.1 + 0.5 * 1.0, -0.2 + 0.5 * 0.0]);
        assert!(loss_total(&o, &u, -1.0).is_err());
    }

    #[test]
    fn q_bar_examples() {
        let samples: Vec<Sample> = (0..20)
            .map(|i| Sample {
                id: i,
                features: vec![0.0],
                label: i % 10,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let uniform = Mlp::zeros(1, 2, 10);
        let t = compute_q_bar(&uniform, &refs, 0.05, 0).unwrap();
        assert!((t.q_bar - 0.9).abs() < 1e-12);
        assert!(matches!(compute_q_bar(&uniform, &[], 0.05, 0), Err(Error::Calibration(_))));

        // One-hot correct model: label 0 everywhere and a huge bias on class 0.
        let mut confident = Mlp::zeros(1, 2, 2);
        confident.b2[0] = 800.0;
        let zeros: Vec<Sample> = (0..30)
            .map(|i| Sample {
                id: i,
                features: vec![0.0],
                label: 0,
            })
            .collect();
        let refs: Vec<&Sample> = zeros.iter().collect();
        assert_eq!(compute_q_bar(&confident, &refs, 0.05, 0).unwrap().q_bar, 0.0);
    }

    #[test]
    fn method_names_parse() {
        for m in Method::ALL {
            assert_eq!(m.name().parse::<Method>().unwrap(), m);
            assert_eq!(m.short().parse::<Method>().unwrap(), m);
        }
        assert!("teacher".parse::<Method>().is_err());
    }

    fn tiny() -> (Dataset, SplitAssignment, Mlp) {
        let spec = DatasetSpec {
            num_classes: 3,
            dim: 4,
            train_per_class: 40,
            test_per_class: 20,
            pool_per_class: 30,
            calib_eval_per_class: 10,
            calib_unlearn_per_class: 10,
            seed: 3,
            ..Default::default()
        };
        let (d, s) = generate(&spec).unwrap();
        let train = d.select(&s.train_ids()).unwrap();
        let cfg = TrainConfig {
            epochs: 5,
            ..Default::default()
        };
        let (p, _) = model::train(Mlp::init(4, 8, 3, 1).unwrap(), &train, &cfg).unwrap();
        (d, s, p)
    }

    #[test]
    fn retrain_never_touches_forget_samples() {
        let (d, s, p) = tiny();
        let cfg = UnlearnRunConfig {
            epochs: 3,
            lambda: 0.5,
            ..UnlearnRunConfig::preset(Method::Retrain)
        };
        let out = run_method(&cfg, &p, &d, &s).unwrap();
        assert_eq!(out.forget_reads, 0);
        assert_eq!(out.log.len(), 3);
    }

    #[test]
    fn zero_lambda_matches_host() {
        let (d, s, p) = tiny();
        for m in Method::ALL {
            let cfg = UnlearnRunConfig {
                epochs: 2,
                ..UnlearnRunConfig::preset(m)
            };
            let a = run_method(&cfg, &p, &d, &s).unwrap();
            let b = run_host(&cfg, &p, &d, &s).unwrap();
            assert_eq!(a.params, b.params, "{m}");
        }
    }

    #[test]
    fn epoch_log_decomposes() {
        let (d, s, p) = tiny();
        for m in [Method::Finetune, Method::RandomLabel, Method::GradientAscent, Method::NegGradPlus] {
            let cfg = UnlearnRunConfig {
                lambda: 0.5,
                epochs: 2,
                ..UnlearnRunConfig::preset(m)
            };
            let out = run_method(&cfg, &p, &d, &s).unwrap();
            assert!(out.forget_reads > 0);
            for e in &out.log {
                assert!((e.loss_total - (e.loss_orig + 0.5 * e.loss_unlearn)).abs() < 1e-12);
            }
            assert!(epoch_log_csv(&out.log).starts_with("epoch,loss_orig,loss_unlearn,q_bar,"));
        }
    }

    #[test]
    fn semi_shadow_behaviour() {
        let (d, s, p) = tiny();
        let calib = d.select(&s.calib_eval).unwrap();
        let cfg = SemiShadowConfig {
            epochs: 0,
            ..Default::default()
        };
        assert!(matches!(semi_shadow_calibrate(&p, &calib, &cfg), Err(Error::Config(_))));
        let cfg = SemiShadowConfig::default();
        let shadow = semi_shadow_calibrate(&p, &calib, &cfg).unwrap();
        assert!(mean_score(&shadow, &calib).unwrap() > mean_score(&p, &calib).unwrap());
        assert_eq!(semi_shadow_calibrate(&p, &calib, &cfg).unwrap(), shadow);
    }

    #[test]
    fn random_labels_are_wrong() {
        let samples: Vec<Sample> = (0..50)
            .map(|i| Sample {
                id: i,
                features: vec![],
                label: i % 4,
            })
            .collect();
        let refs: Vec<&Sample> = samples.iter().collect();
        let l = random_wrong_labels(&refs, 4, 1);
        assert!(samples.iter().all(|s| l[&s.id] != s.label && l[&s.id] < 4));
    }
}
