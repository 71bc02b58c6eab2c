//! Confidence-based membership inference and its conformal variant (MIACR).
//!
//! The attack is a logistic regression over four confidence features of a
//! sample's probability vector. Members (label 1) are drawn from the retain
//! split and non-members (label 0) from the test split, in equal numbers; 20%
//! of each side is held back to calibrate the conformal threshold over the
//! binary attack labels.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::conformal::{ConformalCalibrator, ProbabilityMatrix, QuantileRule, Threshold};
use crate::csvio;
use crate::dataset::{subsample_ids, Split};
use crate::error::{Error, Result};
use crate::metrics::Recovery;
use crate::model::{argmax, cross_entropy, PROB_FLOOR};
use crate::seed;

pub const FEATURE_NAMES: [&str; 4] = ["true_prob", "max_prob", "ce_loss", "entropy"];

const MAX_ITERATIONS: usize = 500;
const GRAD_TOLERANCE: f64 = 1e-6;
const STEP_SIZE: f64 = 1.0;
const CALIBRATION_FRACTION: f64 = 0.2;

/// Decision threshold on member probability for the binary MIA metric.
pub const DECISION_THRESHOLD: f64 = 0.5;

/// (true-class probability, max probability, cross-entropy, entropy).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AttackFeatures(pub [f64; 4]);

impl AttackFeatures {
    pub fn from_probs(probs: &[f64], label: usize) -> Self {
        let max = probs[argmax(probs)];
        let entropy: f64 = probs
            .iter()
            .filter(|&&p| p > 0.0)
            .map(|&p| -p * p.max(PROB_FLOOR).ln())
            .sum();
        AttackFeatures([probs[label], max, cross_entropy(probs, label), entropy])
    }
}

pub fn extract_features(matrix: &ProbabilityMatrix, split: Split) -> Vec<(usize, AttackFeatures)> {
    matrix
        .rows_in(split)
        .map(|r| (r.id, AttackFeatures::from_probs(&r.probs, r.label)))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackModel {
    pub weights: [f64; 4],
    pub bias: f64,
    /// Per-feature standardisation applied before the linear layer.
    pub feature_mean: [f64; 4],
    pub feature_scale: [f64; 4],
    pub iterations: usize,
    pub seed: u64,
}

fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

impl AttackModel {
    fn standardize(&self, f: &AttackFeatures) -> [f64; 4] {
        std::array::from_fn(|j| (f.0[j] - self.feature_mean[j]) / self.feature_scale[j])
    }

    /// P(member | features).
    pub fn member_probability(&self, f: &AttackFeatures) -> f64 {
        let x = self.standardize(f);
        sigmoid(self.weights.iter().zip(&x).map(|(w, v)| w * v).sum::<f64>() + self.bias)
    }

    /// 1 = member, 0 = non-member.
    pub fn predict(&self, f: &AttackFeatures) -> u8 {
        u8::from(self.member_probability(f) >= DECISION_THRESHOLD)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "feature_order {}", FEATURE_NAMES.join(","));
        let row = |v: &[f64; 4]| v.iter().map(|x| format!("{x:e}")).collect::<Vec<_>>().join(",");
        let _ = writeln!(out, "weights {}", row(&self.weights));
        let _ = writeln!(out, "bias {:e}", self.bias);
        let _ = writeln!(out, "feature_mean {}", row(&self.feature_mean));
        let _ = writeln!(out, "feature_scale {}", row(&self.feature_scale));
        let _ = writeln!(out, "iterations {}", self.iterations);
        let _ = writeln!(out, "seed {}", self.seed);
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut kv = std::collections::BTreeMap::new();
        for (i, line) in text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let (k, v) = line
                .trim()
                .split_once(' ')
                .ok_or_else(|| Error::parse(source, i + 1, "expected `key value`"))?;
            kv.insert(k.to_string(), (i + 1, v.trim().to_string()));
        }
        let get = |k: &str| {
            kv.get(k)
                .cloned()
                .ok_or_else(|| Error::parse(source, 0, format!("missing key `{k}`")))
        };
        let (ln, order) = get("feature_order")?;
        if order != FEATURE_NAMES.join(",") {
            return Err(Error::parse(source, ln, format!("unsupported feature order `{order}`")));
        }
        let arr = |k: &str| -> Result<[f64; 4]> {
            let (ln, v) = get(k)?;
            let vals = v
                .split(',')
                .map(|f| csvio::parse_field::<f64>(f.trim(), source, ln, k))
                .collect::<Result<Vec<_>>>()?;
            <[f64; 4]>::try_from(vals).map_err(|_| Error::parse(source, ln, format!("`{k}` needs 4 values")))
        };
        let scalar = |k: &str| -> Result<(usize, String)> { get(k) };
        let (ln, bias) = scalar("bias")?;
        let (ln_it, it) = scalar("iterations")?;
        let (ln_seed, sd) = scalar("seed")?;
        let model = AttackModel {
            weights: arr("weights")?,
            bias: csvio::parse_field(&bias, source, ln, "bias")?,
            feature_mean: arr("feature_mean")?,
            feature_scale: arr("feature_scale")?,
            iterations: csvio::parse_field(&it, source, ln_it, "iterations")?,
            seed: csvio::parse_field(&sd, source, ln_seed, "seed")?,
        };
        let all = model
            .weights
            .iter()
            .chain(&model.feature_mean)
            .chain(&model.feature_scale)
            .chain(std::iter::once(&model.bias));
        if all.clone().any(|v| !v.is_finite()) || model.feature_scale.iter().any(|&s| s <= 0.0) {
            return Err(Error::parse(source, 0, "non-finite or non-positive attack parameters"));
        }
        Ok(model)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_text(&csvio::read_to_string(path)?, &path.display().to_string())
    }
}

/// Fits the attack by full-batch gradient descent on class-balanced logistic
/// loss until the largest gradient entry drops below 1e-6 or 500 iterations.
pub fn train_attack(members: &[AttackFeatures], nonmembers: &[AttackFeatures], seed: u64) -> Result<AttackModel> {
    if members.is_empty() || nonmembers.is_empty() {
        return Err(Error::Training(
            "attack training needs both member and non-member samples".into(),
        ));
    }
    let all = || members.iter().chain(nonmembers);
    let n = (members.len() + nonmembers.len()) as f64;
    let mut mean = [0.0; 4];
    for f in all() {
        for j in 0..4 {
            mean[j] += f.0[j] / n;
        }
    }
    let mut scale = [0.0; 4];
    for f in all() {
        for j in 0..4 {
            scale[j] += (f.0[j] - mean[j]).powi(2) / n;
        }
    }
    let scale = scale.map(|v| if v.sqrt() > 1e-12 { v.sqrt() } else { 1.0 });

    let mut rng = seed::rng(seed);
    let init = Normal::new(0.0, 0.01).expect("valid normal");
    let mut model = AttackModel {
        weights: std::array::from_fn(|_| init.sample(&mut rng)),
        bias: 0.0,
        feature_mean: mean,
        feature_scale: scale,
        iterations: 0,
        seed,
    };
    let data: Vec<([f64; 4], f64, f64)> = members
        .iter()
        .map(|f| (model.standardize(f), 1.0, 0.5 / members.len() as f64))
        .chain(
            nonmembers
                .iter()
                .map(|f| (model.standardize(f), 0.0, 0.5 / nonmembers.len() as f64)),
        )
        .collect();

    for it in 0..MAX_ITERATIONS {
        let mut gw = [0.0; 4];
        let mut gb = 0.0;
        for (x, y, w) in &data {
            let z = model.weights.iter().zip(x).map(|(a, b)| a * b).sum::<f64>() + model.bias;
            let err = w * (sigmoid(z) - y);
            for j in 0..4 {
                gw[j] += err * x[j];
            }
            gb += err;
        }
        model.iterations = it + 1;
        let gmax = gw.iter().chain(std::iter::once(&gb)).fold(0.0f64, |m, g| m.max(g.abs()));
        if gmax < GRAD_TOLERANCE {
            break;
        }
        for j in 0..4 {
            model.weights[j] -= STEP_SIZE * gw[j];
        }
        model.bias -= STEP_SIZE * gb;
    }
    if !(model.weights.iter().all(|w| w.is_finite()) && model.bias.is_finite()) {
        return Err(Error::Training("attack weights diverged".into()));
    }
    Ok(model)
}

/// Percentage of `forget` samples the attack calls members.
pub fn mia_metric(attack: &AttackModel, forget: &[AttackFeatures]) -> f64 {
    if forget.is_empty() {
        return 0.0;
    }
    let members = forget.iter().filter(|f| attack.predict(f) == 1).count();
    100.0 * members as f64 / forget.len() as f64
}

/// Attack features with their true membership labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelledFeatures {
    pub features: Vec<AttackFeatures>,
    pub labels: Vec<u8>,
}

/// Conformal calibrator over the binary membership labels.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaCalibrator {
    pub inner: ConformalCalibrator,
}

impl MiaCalibrator {
    pub fn q_hat(&self) -> f64 {
        self.inner.q_hat()
    }

    pub fn threshold(&self) -> Threshold {
        self.inner.threshold
    }
}

/// Nonconformity of membership label `label` given member probability `p1`.
pub fn binary_nonconformity(p1: f64, label: u8) -> f64 {
    if label == 1 {
        1.0 - p1
    } else {
        p1
    }
}

pub fn calibrate_attack(attack: &AttackModel, calib: &LabelledFeatures, alpha: f64) -> Result<MiaCalibrator> {
    if calib.features.is_empty() {
        return Err(Error::Calibration("empty attack calibration split".into()));
    }
    let scores = calib
        .features
        .iter()
        .zip(&calib.labels)
        .map(|(f, &y)| binary_nonconformity(attack.member_probability(f), y))
        .collect();
    Ok(MiaCalibrator {
        inner: ConformalCalibrator::from_scores(scores, alpha, QuantileRule::Corrected)?,
    })
}

/// Conformal set over {0, 1}, ascending.
pub fn binary_set(attack: &AttackModel, f: &AttackFeatures, threshold: Threshold) -> Vec<u8> {
    let p1 = attack.member_probability(f);
    [0u8, 1]
        .into_iter()
        .filter(|&y| threshold.admits(binary_nonconformity(p1, y)))
        .collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct MiacrResult {
    pub miacr: f64,
    /// Fraction of forget samples whose set contains 0; an upper bound on MIACR.
    pub contains_zero: f64,
    pub sets: Vec<Vec<u8>>,
}

/// Fraction of forget samples whose binary conformal set is exactly {0}.
pub fn miacr(attack: &AttackModel, calibrator: &MiaCalibrator, forget: &[AttackFeatures]) -> Result<MiacrResult> {
    if forget.is_empty() {
        return Err(Error::EmptySplit {
            split: Split::Forget.to_string(),
        });
    }
    let sets: Vec<Vec<u8>> = forget
        .iter()
        .map(|f| binary_set(attack, f, calibrator.threshold()))
        .collect();
    let n = forget.len() as f64;
    let exact = sets.iter().filter(|s| s.as_slice() == [0]).count();
    let zero = sets.iter().filter(|s| s.contains(&0)).count();
    Ok(MiacrResult {
        miacr: exact as f64 / n,
        contains_zero: zero as f64 / n,
        sets,
    })
}

/// Forget samples the attack calls non-members, and how many of those still
/// have 1 in their conformal set.
pub fn mia_recovery(attack: &AttackModel, sets: &[Vec<u8>], forget: &[AttackFeatures]) -> Result<Recovery> {
    if sets.len() != forget.len() {
        return Err(Error::Consistency(format!(
            "{} binary sets for {} forget samples",
            sets.len(),
            forget.len()
        )));
    }
    let mut mislabel = 0;
    let mut inset = 0;
    for (f, s) in forget.iter().zip(sets) {
        if attack.predict(f) == 0 {
            mislabel += 1;
            if s.contains(&1) {
                inset += 1;
            }
        }
    }
    Recovery::from_counts(mislabel, inset)
}

/// Attack together with the data it was fit and calibrated on.
#[derive(Debug, Clone)]
pub struct AttackSetup {
    pub model: AttackModel,
    pub calibration: LabelledFeatures,
    pub train_members: usize,
    pub train_nonmembers: usize,
}

/// Balanced retain-vs-test attack with a 20% held-out calibration slice of each side.
pub fn build_attack(matrix: &ProbabilityMatrix, seed: u64) -> Result<AttackSetup> {
    let retain = matrix.ids_in(Split::Retain);
    let test = matrix.ids_in(Split::Test);
    let n = retain.len().min(test.len());
    if n < 2 {
        return Err(Error::Training("attack needs at least 2 retain and 2 test samples".into()));
    }
    let mut rng = seed::stage_rng(seed, "mia/subsample");
    let feats = |ids: std::collections::BTreeSet<usize>, rng: &mut rand_chacha::ChaCha8Rng| {
        let mut v: Vec<AttackFeatures> = ids
            .iter()
            .map(|id| {
                let r = matrix.get(*id).expect("id from matrix");
                AttackFeatures::from_probs(&r.probs, r.label)
            })
            .collect();
        v.shuffle(rng);
        v
    };
    let members = feats(subsample_ids(&retain, n, &mut rng), &mut rng);
    let nonmembers = feats(subsample_ids(&test, n, &mut rng), &mut rng);
    let n_cal = ((n as f64 * CALIBRATION_FRACTION).round() as usize).clamp(1, n - 1);
    let (m_cal, m_fit) = members.split_at(n_cal);
    let (u_cal, u_fit) = nonmembers.split_at(n_cal);
    let model = train_attack(m_fit, u_fit, seed::derive_seed(seed, "mia/train"))?;
    let calibration = LabelledFeatures {
        features: m_cal.iter().chain(u_cal).copied().collect(),
        labels: std::iter::repeat_n(1u8, n_cal).chain(std::iter::repeat_n(0u8, n_cal)).collect(),
    };
    Ok(AttackSetup {
        model,
        calibration,
        train_members: m_fit.len(),
        train_nonmembers: u_fit.len(),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiaEvaluation {
    pub mia: f64,
    pub miacr: f64,
    pub q_hat_mia: f64,
    pub recovery: Recovery,
}

/// Builds the attack on `matrix` and scores its forget split.
pub fn evaluate(matrix: &ProbabilityMatrix, alpha: f64, seed: u64) -> Result<(MiaEvaluation, AttackModel)> {
    let setup = build_attack(matrix, seed)?;
    let forget: Vec<AttackFeatures> = extract_features(matrix, Split::Forget).into_iter().map(|(_, f)| f).collect();
    let cal = calibrate_attack(&setup.model, &setup.calibration, alpha)?;
    let res = miacr(&setup.model, &cal, &forget)?;
    let recovery = mia_recovery(&setup.model, &res.sets, &forget)?;
    Ok((
        MiaEvaluation {
            mia: mia_metric(&setup.model, &forget),
            miacr: res.miacr,
            q_hat_mia: cal.q_hat(),
            recovery,
        },
        setup.model,
    ))
}
