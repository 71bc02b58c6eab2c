//! Split conformal prediction over classifier probabilities.
//!
//! Nonconformity of label `y` is `1 - p_y(x)`. The threshold q̂ is the
//! ⌈(n+1)(1-α)⌉-th smallest true-label score on the calibration split; when
//! that rank exceeds `n` the threshold is "include everything". A label joins
//! the prediction set when its score is `<= q̂`.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::dataset::{subsample_ids, Split};
use crate::error::{Error, Result};
use crate::seed;

/// Slack applied before taking the ceiling of a rank so decimal α values such
/// as 0.05 do not round up through representation error.
const RANK_EPS: f64 = 1e-9;

const ROW_SUM_TOL: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbRow {
    pub id: usize,
    pub label: usize,
    pub split: Split,
    pub probs: Vec<f64>,
}

/// Model outputs for a set of samples, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbabilityMatrix {
    num_classes: usize,
    rows: Vec<ProbRow>,
    index: BTreeMap<usize, usize>,
}

impl ProbabilityMatrix {
    pub fn new(num_classes: usize, rows: Vec<ProbRow>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (pos, row) in rows.iter().enumerate() {
            if row.probs.len() != num_classes {
                return Err(Error::Dimension {
                    what: "probability row",
                    expected: num_classes,
                    got: row.probs.len(),
                });
            }
            if row.label >= num_classes {
                return Err(Error::Index {
                    index: row.label,
                    len: num_classes,
                });
            }
            let sum: f64 = row.probs.iter().sum();
            if row.probs.iter().any(|p| !(0.0..=1.0).contains(p)) || (sum - 1.0).abs() > ROW_SUM_TOL {
                return Err(Error::Consistency(format!(
                    "row for id {} is not a probability vector (sum {sum})",
                    row.id
                )));
            }
            if index.insert(row.id, pos).is_some() {
                return Err(Error::Consistency(format!("duplicate id {} in probability matrix", row.id)));
            }
        }
        Ok(ProbabilityMatrix {
            num_classes,
            rows,
            index,
        })
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn rows(&self) -> &[ProbRow] {
        &self.rows
    }

    pub fn get(&self, id: usize) -> Option<&ProbRow> {
        self.index.get(&id).map(|&i| &self.rows[i])
    }

    pub fn rows_in(&self, split: Split) -> impl Iterator<Item = &ProbRow> {
        self.rows.iter().filter(move |r| r.split == split)
    }

    pub fn ids_in(&self, split: Split) -> BTreeSet<usize> {
        self.rows_in(split).map(|r| r.id).collect()
    }

    /// True-label nonconformity scores of every row in `split`.
    pub fn true_label_scores(&self, split: Split) -> Vec<f64> {
        self.rows_in(split).map(|r| 1.0 - r.probs[r.label]).collect()
    }

    /// Rows whose ids are in `ids`, keeping this matrix's order.
    pub fn restrict(&self, ids: &BTreeSet<usize>) -> Result<Self> {
        let rows = self.rows.iter().filter(|r| ids.contains(&r.id)).cloned().collect();
        ProbabilityMatrix::new(self.num_classes, rows)
    }

    /// Verifies every id of `ids` has a row tagged `split`.
    pub fn check_split_members(&self, split: Split, ids: &BTreeSet<usize>) -> Result<()> {
        for &id in ids {
            match self.get(id) {
                None => {
                    return Err(Error::Consistency(format!(
                        "id {id} of split `{split}` is missing from the probability matrix"
                    )))
                }
                Some(r) if r.split != split => {
                    return Err(Error::Consistency(format!(
                        "id {id} is tagged `{}` but belongs to split `{split}`",
                        r.split
                    )))
                }
                Some(_) => {}
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label,split");
        for j in 0..self.num_classes {
            let _ = write!(out, ",p{j}");
        }
        out.push('\n');
        for r in &self.rows {
            let _ = write!(out, "{},{},{}", r.id, r.label, r.split);
            for p in &r.probs {
                let _ = write!(out, ",{p:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let mut k = 0;
        let rows = csvio::data_lines(text, source, |h| {
            k = h.len().saturating_sub(3);
            h.len() >= 5
                && h[..3] == ["id", "label", "split"]
                && h[3..].iter().enumerate().all(|(j, f)| *f == format!("p{j}"))
        })?;
        let mut out = Vec::with_capacity(rows.len());
        for (line, fields) in rows {
            if fields.len() != k + 3 {
                return Err(Error::parse(
                    source,
                    line,
                    format!("expected {} fields, found {}", k + 3, fields.len()),
                ));
            }
            let id = csvio::parse_field(fields[0], source, line, "id")?;
            let label: usize = csvio::parse_field(fields[1], source, line, "label")?;
            let split: Split = fields[2]
                .parse()
                .map_err(|_| Error::parse(source, line, format!("unknown split `{}`", fields[2])))?;
            let probs = fields[3..]
                .iter()
                .map(|f| csvio::parse_field::<f64>(f, source, line, "probability"))
                .collect::<Result<Vec<_>>>()?;
            if label >= k {
                return Err(Error::parse(source, line, format!("label {label} out of range")));
            }
            out.push(ProbRow { id, label, split, probs });
        }
        ProbabilityMatrix::new(k, out).map_err(|e| match e {
            Error::Consistency(msg) => Error::parse(source, 0, msg),
            other => other,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_string(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = csvio::read_to_string(path)?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// `1 - p[label]`.
pub fn nonconformity(probs: &[f64], label: usize) -> Result<f64> {
    probs
        .get(label)
        .map(|p| 1.0 - p)
        .ok_or(Error::Index {
            index: label,
            len: probs.len(),
        })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum QuantileRule {
    /// Finite-sample corrected rank ⌈(n+1)(1-α)⌉.
    #[default]
    Corrected,
    /// Plain empirical quantile, rank ⌈n(1-α)⌉ clamped to at least 1.
    Empirical,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    Finite(f64),
    /// Rank beyond the calibration set: every label is admitted.
    IncludeAll,
}

impl Threshold {
    pub fn admits(self, score: f64) -> bool {
        match self {
            Threshold::Finite(q) => score <= q,
            Threshold::IncludeAll => true,
        }
    }

    /// Numeric view. Nonconformity scores never exceed 1, so including
    /// everything is the same as a threshold of 1.
    pub fn value(self) -> f64 {
        match self {
            Threshold::Finite(q) => q,
            Threshold::IncludeAll => 1.0,
        }
    }
}

/// 1-based rank of the calibration score used as threshold.
pub fn quantile_rank(n: usize, alpha: f64, rule: QuantileRule) -> usize {
    let m = match rule {
        QuantileRule::Corrected => (n + 1) as f64,
        QuantileRule::Empirical => n as f64,
    };
    ((m * (1.0 - alpha) - RANK_EPS).ceil().max(1.0)) as usize
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConformalCalibrator {
    pub alpha: f64,
    pub rule: QuantileRule,
    /// Calibration scores, ascending.
    pub scores: Vec<f64>,
    pub threshold: Threshold,
    /// Class count of the matrix the scores came from, when known.
    pub num_classes: Option<usize>,
}

impl ConformalCalibrator {
    pub fn from_scores(mut scores: Vec<f64>, alpha: f64, rule: QuantileRule) -> Result<Self> {
        if !(alpha > 0.0 && alpha < 1.0) {
            return Err(Error::Config(format!("alpha {alpha} must lie strictly between 0 and 1")));
        }
        if scores.is_empty() {
            return Err(Error::Calibration("empty calibration set".into()));
        }
        if scores.iter().any(|s| !s.is_finite()) {
            return Err(Error::Calibration("non-finite calibration score".into()));
        }
        // Stable sort keeps tied scores in input order; ties share a value so
        // the threshold is unaffected.
        scores.sort_by(f64::total_cmp);
        let rank = quantile_rank(scores.len(), alpha, rule);
        let threshold = if rank > scores.len() {
            Threshold::IncludeAll
        } else {
            Threshold::Finite(scores[rank - 1])
        };
        Ok(ConformalCalibrator {
            alpha,
            rule,
            scores,
            threshold,
            num_classes: None,
        })
    }

    pub fn q_hat(&self) -> f64 {
        self.threshold.value()
    }

    pub fn n(&self) -> usize {
        self.scores.len()
    }
}

/// Calibrates on the true-label scores of the rows tagged `split`.
pub fn calibrate(matrix: &ProbabilityMatrix, split: Split, alpha: f64) -> Result<ConformalCalibrator> {
    calibrate_with(matrix, split, alpha, QuantileRule::Corrected)
}

pub fn calibrate_with(
    matrix: &ProbabilityMatrix,
    split: Split,
    alpha: f64,
    rule: QuantileRule,
) -> Result<ConformalCalibrator> {
    let scores = matrix.true_label_scores(split);
    if scores.is_empty() {
        return Err(Error::Calibration(format!("calibration split `{split}` is empty")));
    }
    let mut cal = ConformalCalibrator::from_scores(scores, alpha, rule)?;
    cal.num_classes = Some(matrix.num_classes());
    Ok(cal)
}

/// Labels whose score is admitted by `threshold`, ascending.
pub fn prediction_set(probs: &[f64], threshold: Threshold) -> Vec<usize> {
    probs
        .iter()
        .enumerate()
        .filter(|(_, p)| threshold.admits(1.0 - *p))
        .map(|(j, _)| j)
        .collect()
}

/// Prediction sets keyed by sample id.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionSetBatch {
    pub num_classes: usize,
    pub threshold: Threshold,
    pub sets: BTreeMap<usize, Vec<usize>>,
}

impl PredictionSetBatch {
    pub fn get(&self, id: usize) -> Option<&[usize]> {
        self.sets.get(&id).map(Vec::as_slice)
    }
}

pub fn prediction_sets(matrix: &ProbabilityMatrix, calibrator: &ConformalCalibrator) -> Result<PredictionSetBatch> {
    if let Some(k) = calibrator.num_classes {
        if k != matrix.num_classes() {
            return Err(Error::Dimension {
                what: "calibrator class count",
                expected: matrix.num_classes(),
                got: k,
            });
        }
    }
    let sets = matrix
        .rows()
        .iter()
        .map(|r| (r.id, prediction_set(&r.probs, calibrator.threshold)))
        .collect();
    Ok(PredictionSetBatch {
        num_classes: matrix.num_classes(),
        threshold: calibrator.threshold,
        sets,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilityDraw {
    pub size: usize,
    pub repeat: usize,
    pub q_hat: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StabilitySummary {
    pub size: usize,
    pub mean: f64,
    /// Sample standard deviation over repeats.
    pub std: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StabilityStudy {
    pub draws: Vec<StabilityDraw>,
    pub summary: Vec<StabilitySummary>,
}

impl StabilityStudy {
    pub fn draws_csv(&self) -> String {
        let mut out = String::from("size,repeat,q_hat\n");
        for d in &self.draws {
            let _ = writeln!(out, "{},{},{}", d.size, d.repeat, d.q_hat);
        }
        out
    }

    pub fn summary_csv(&self) -> String {
        let mut out = String::from("size,mean,std\n");
        for s in &self.summary {
            let _ = writeln!(out, "{},{},{}", s.size, s.mean, s.std);
        }
        out
    }
}

/// Calibration-size stability of q̂: for each size, draws `repeats`
/// subsamples of the pool without replacement and calibrates each one.
/// Include-all thresholds are recorded as 1.
pub fn stability_study(
    pool_scores: &[f64],
    sizes: &[usize],
    repeats: usize,
    alpha: f64,
    seed: u64,
) -> Result<StabilityStudy> {
    if repeats < 2 {
        return Err(Error::Config("stability study needs at least 2 repeats".into()));
    }
    if let Some(&bad) = sizes.iter().find(|&&s| s == 0 || s > pool_scores.len()) {
        return Err(Error::Config(format!(
            "subsample size {bad} outside 1..={} (pool size)",
            pool_scores.len()
        )));
    }
    let all: BTreeSet<usize> = (0..pool_scores.len()).collect();
    let per_size: Vec<Vec<StabilityDraw>> = sizes
        .par_iter()
        .map(|&size| {
            let mut rng = seed::stage_rng(seed, &format!("stability/{size}"));
            (0..repeats)
                .map(|repeat| {
                    let picked = subsample_ids(&all, size, &mut rng);
                    let scores = picked.iter().map(|&i| pool_scores[i]).collect();
                    let cal = ConformalCalibrator::from_scores(scores, alpha, QuantileRule::Corrected)?;
                    Ok(StabilityDraw {
                        size,
                        repeat,
                        q_hat: cal.q_hat(),
                    })
                })
                .collect::<Result<Vec<_>>>()
        })
        .collect::<Result<Vec<_>>>()?;

    let summary = per_size
        .iter()
        .zip(sizes)
        .map(|(draws, &size)| {
            let n = draws.len() as f64;
            let mean = draws.iter().map(|d| d.q_hat).sum::<f64>() / n;
            let var = draws.iter().map(|d| (d.q_hat - mean).powi(2)).sum::<f64>() / (n - 1.0);
            StabilitySummary {
                size,
                mean,
                std: var.sqrt(),
            }
        })
        .collect();
    Ok(StabilityStudy {
        draws: per_size.into_iter().flatten().collect(),
        summary,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(id: usize, label: usize, split: Split, probs: &[f64]) -> ProbRow {
        ProbRow {
            id,
            label,
            split,
            probs: probs.to_vec(),
        }
    }

    /// Smallest score s with #{scores <= s} >= (1-α)(n+1); include-all when none.
    fn counting_oracle(scores: &[f64], alpha: f64) -> Threshold {
        let need = (1.0 - alpha) * (scores.len() + 1) as f64 - RANK_EPS;
        let mut candidates = scores.to_vec();
        candidates.sort_by(f64::total_cmp);
        for &s in &candidates {
            let count = scores.iter().filter(|&&x| x <= s).count();
            if count as f64 >= need {
                return Threshold::Finite(s);
            }
        }
        Threshold::IncludeAll
    }

    #[test]
    fn nonconformity_examples() {
        assert_eq!(nonconformity(&[1.0, 0.0, 0.0], 0).unwrap(), 0.0);
        assert_eq!(nonconformity(&[0.2, 0.5, 0.3], 1).unwrap(), 0.5);
        assert!((nonconformity(&[0.1; 10], 4).unwrap() - 0.9).abs() < 1e-15);
        assert!(matches!(nonconformity(&[0.5, 0.5], 2), Err(Error::Index { .. })));
    }

    #[test]
    fn calibrate_grid_scores() {
        let scores: Vec<f64> = (1..=100).map(|i| i as f64 / 100.0).collect();
        assert_eq!(quantile_rank(100, 0.05, QuantileRule::Corrected), 96);
        let cal = ConformalCalibrator::from_scores(scores.clone(), 0.05, QuantileRule::Corrected).unwrap();
        assert_eq!(cal.threshold, Threshold::Finite(0.96));
        assert_eq!(cal.threshold, counting_oracle(&scores, 0.05));
        let emp = ConformalCalibrator::from_scores(scores, 0.05, QuantileRule::Empirical).unwrap();
        assert_eq!(emp.threshold, Threshold::Finite(0.95));
    }

    #[test]
    fn calibrate_constant_and_small() {
        for alpha in [0.05, 0.1, 0.2, 0.5] {
            let cal = ConformalCalibrator::from_scores(vec![0.3; 50], alpha, QuantileRule::Corrected).unwrap();
            assert_eq!(cal.threshold, Threshold::Finite(0.3));
        }
        let cal = ConformalCalibrator::from_scores(vec![0.1, 0.2, 0.3, 0.4, 0.5], 0.05, QuantileRule::Corrected).unwrap();
        assert_eq!(quantile_rank(5, 0.05, QuantileRule::Corrected), 6);
        assert_eq!(cal.threshold, Threshold::IncludeAll);
        let m = ProbabilityMatrix::new(3, vec![row(0, 0, Split::Test, &[0.98, 0.01, 0.01])]).unwrap();
        let sets = prediction_sets(&m, &cal).unwrap();
        assert_eq!(sets.get(0).unwrap(), &[0, 1, 2]);
    }

    #[test]
    fn calibrate_errors() {
        assert!(matches!(
            ConformalCalibrator::from_scores(vec![], 0.1, QuantileRule::Corrected),
            Err(Error::Calibration(_))
        ));
        assert!(matches!(
            ConformalCalibrator::from_scores(vec![0.1], 0.0, QuantileRule::Corrected),
            Err(Error::Config(_))
        ));
        let m = ProbabilityMatrix::new(2, vec![row(0, 0, Split::Test, &[0.5, 0.5])]).unwrap();
        assert!(matches!(calibrate(&m, Split::CalibEval, 0.1), Err(Error::Calibration(_))));
    }

    #[test]
    fn prediction_set_examples() {
        let probs = [0.7, 0.2, 0.1];
        let q = Threshold::Finite(0.85);
        // Per-label comparison oracle: scores [0.3, 0.8, 0.9].
        let oracle: Vec<usize> = (0..3).filter(|&j| 1.0 - probs[j] <= 0.85).collect();
        assert_eq!(prediction_set(&probs, q), oracle);
        assert_eq!(prediction_set(&probs, q), vec![0, 1]);
        assert!(prediction_set(&probs, Threshold::Finite(0.0)).is_empty());
        assert_eq!(prediction_set(&probs, Threshold::IncludeAll), vec![0, 1, 2]);
    }

    #[test]
    fn class_count_mismatch() {
        let m3 = ProbabilityMatrix::new(3, vec![row(0, 0, Split::CalibEval, &[0.5, 0.25, 0.25])]).unwrap();
        let m2 = ProbabilityMatrix::new(2, vec![row(0, 0, Split::Test, &[0.5, 0.5])]).unwrap();
        let cal = calibrate(&m3, Split::CalibEval, 0.5).unwrap();
        assert!(matches!(prediction_sets(&m2, &cal), Err(Error::Dimension { .. })));
    }

    #[test]
    fn matrix_validation_and_csv() {
        assert!(ProbabilityMatrix::new(2, vec![row(0, 0, Split::Test, &[0.6, 0.6])]).is_err());
        assert!(ProbabilityMatrix::new(
            2,
            vec![row(0, 0, Split::Test, &[0.5, 0.5]), row(0, 1, Split::Test, &[0.5, 0.5])]
        )
        .is_err());
        let m = ProbabilityMatrix::new(
            3,
            vec![
                row(4, 2, Split::Forget, &[0.1, 0.2, 0.7]),
                row(9, 0, Split::CalibEval, &[1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0]),
            ],
        )
        .unwrap();
        let text = m.to_csv();
        assert!(text.starts_with("id,label,split,p0,p1,p2\n4,2,forget,"));
        assert_eq!(ProbabilityMatrix::from_csv(&text, "t").unwrap(), m);
        let err = ProbabilityMatrix::from_csv("id,label,split,p0,p1\n1,0,bogus,0.5,0.5\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn stability_examples() {
        let scores: Vec<f64> = (0..40).map(|i| (i as f64 * 0.37).fract()).collect();
        let study = stability_study(&scores, &[10, 40], 5, 0.1, 3).unwrap();
        assert_eq!(study.draws.len(), 10);
        assert_eq!(study.summary[1].std, 0.0);
        assert!(study.summary[0].std > 0.0);
        assert_eq!(study, stability_study(&scores, &[10, 40], 5, 0.1, 3).unwrap());
        assert!(matches!(stability_study(&scores, &[10], 1, 0.1, 3), Err(Error::Config(_))));
        assert!(matches!(stability_study(&scores, &[41], 3, 0.1, 3), Err(Error::Config(_))));
        assert!(study.summary_csv().starts_with("size,mean,std\n10,"));
        assert!(study.draws_csv().starts_with("size,repeat,q_hat\n10,0,"));
    }

    proptest! {
        #[test]
        fn matches_counting_oracle(
            scores in prop::collection::vec((0u32..200).prop_map(|v| v as f64 / 200.0), 1..300),
            alpha in prop::sample::select(vec![0.05, 0.10, 0.15, 0.20]),
        ) {
            let cal = ConformalCalibrator::from_scores(scores.clone(), alpha, QuantileRule::Corrected).unwrap();
            prop_assert_eq!(cal.threshold, counting_oracle(&scores, alpha));
        }

        #[test]
        fn sets_are_monotone_in_alpha(
            scores in prop::collection::vec(0.0f64..1.0, 20..200),
            p0 in 0.0f64..1.0,
            p1 in 0.0f64..1.0,
        ) {
            let probs = [p0 * p1, p0 * (1.0 - p1), 1.0 - p0];
            let mut prev: Option<(f64, Vec<usize>)> = None;
            for alpha in [0.05, 0.10, 0.15, 0.20] {
                let cal = ConformalCalibrator::from_scores(scores.clone(), alpha, QuantileRule::Corrected).unwrap();
                let set = prediction_set(&probs, cal.threshold);
                if let Some((q, s)) = &prev {
                    prop_assert!(cal.q_hat() <= *q);
                    prop_assert!(set.iter().all(|j| s.contains(j)));
                }
                // Loosening the threshold by a hair never drops a member.
                let loose = prediction_set(&probs, Threshold::Finite(cal.q_hat() + 1e-12));
                prop_assert!(set.iter().all(|j| loose.contains(j)));
                prev = Some((cal.q_hat(), set));
            }
        }
    }
}
