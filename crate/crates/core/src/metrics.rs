//! Unlearning metrics: UA/RA/TA, Coverage, Set Size, CR, fake-unlearning
//! recovery counts and gaps to the retrain reference.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::conformal::{PredictionSetBatch, ProbabilityMatrix};
use crate::dataset::Split;
use crate::error::{Error, Result};
use crate::model::argmax;

fn counts(matrix: &ProbabilityMatrix, split: Split) -> Result<(usize, usize)> {
    let mut n = 0usize;
    let mut correct = 0usize;
    for r in matrix.rows_in(split) {
        n += 1;
        if argmax(&r.probs) == r.label {
            correct += 1;
        }
    }
    if n == 0 {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    Ok((correct, n))
}

/// Fraction of rows in `split` whose argmax equals the label.
pub fn accuracy(matrix: &ProbabilityMatrix, split: Split) -> Result<f64> {
    let (correct, n) = counts(matrix, split)?;
    Ok(correct as f64 / n as f64)
}

fn percent(count: usize, n: usize) -> f64 {
    100.0 * count as f64 / n as f64
}

/// Percentages: UA = 100·(1 − acc(D_f)), RA = 100·acc(D_r), TA = 100·acc(D_test).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AccuracyMetrics {
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
}

pub fn accuracy_metrics(matrix: &ProbabilityMatrix) -> Result<AccuracyMetrics> {
    let (fc, fn_) = counts(matrix, Split::Forget)?;
    let (rc, rn) = counts(matrix, Split::Retain)?;
    let (tc, tn) = counts(matrix, Split::Test)?;
    Ok(AccuracyMetrics {
        ua: percent(fn_ - fc, fn_),
        ra: percent(rc, rn),
        ta: percent(tc, tn),
    })
}

fn split_sets<'a>(
    sets: &'a PredictionSetBatch,
    matrix: &'a ProbabilityMatrix,
    split: Split,
) -> Result<Vec<(usize, &'a [usize])>> {
    let out: Vec<(usize, &[usize])> = matrix
        .rows_in(split)
        .map(|r| {
            sets.get(r.id)
                .map(|s| (r.label, s))
                .ok_or_else(|| Error::Consistency(format!("no prediction set for id {} in split `{split}`", r.id)))
        })
        .collect::<Result<_>>()?;
    if out.is_empty() {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    Ok(out)
}

/// Mean of 1[y ∈ C(x)] over the split.
pub fn coverage(sets: &PredictionSetBatch, matrix: &ProbabilityMatrix, split: Split) -> Result<f64> {
    let rows = split_sets(sets, matrix, split)?;
    let hit = rows.iter().filter(|(y, s)| s.contains(y)).count();
    Ok(hit as f64 / rows.len() as f64)
}

/// Mean of |C(x)| over the split.
pub fn set_size(sets: &PredictionSetBatch, matrix: &ProbabilityMatrix, split: Split) -> Result<f64> {
    let rows = split_sets(sets, matrix, split)?;
    let total: usize = rows.iter().map(|(_, s)| s.len()).sum();
    Ok(total as f64 / rows.len() as f64)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ConformalRatio {
    pub value: f64,
    /// Set when every set was empty and the ratio was defined as 0.
    pub degenerate: bool,
}

/// CR = coverage / set size. Lower on forget data means stronger forgetting.
pub fn cr(coverage: f64, set_size: f64) -> Result<ConformalRatio> {
    if !(coverage >= 0.0 && set_size >= 0.0) {
        return Err(Error::Domain(format!(
            "coverage {coverage} and set size {set_size} must be non-negative"
        )));
    }
    if set_size == 0.0 {
        return Ok(ConformalRatio {
            value: 0.0,
            degenerate: true,
        });
    }
    Ok(ConformalRatio {
        value: coverage / set_size,
        degenerate: false,
    })
}

/// Misclassified samples whose true label is still inside the prediction set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Recovery {
    pub mislabel: usize,
    pub inset: usize,
    /// inset / mislabel as a fraction; 0 with `undefined` set when nothing was mislabelled.
    pub ratio: f64,
    pub undefined: bool,
}

impl Recovery {
    pub fn from_counts(mislabel: usize, inset: usize) -> Result<Self> {
        if inset > mislabel {
            return Err(Error::Consistency(format!(
                "in-set count {inset} exceeds mis-label count {mislabel}"
            )));
        }
        Ok(if mislabel == 0 {
            Recovery {
                mislabel,
                inset,
                ratio: 0.0,
                undefined: true,
            }
        } else {
            Recovery {
                mislabel,
                inset,
                ratio: inset as f64 / mislabel as f64,
                undefined: false,
            }
        })
    }

    pub fn ratio_percent(&self) -> f64 {
        100.0 * self.ratio
    }
}

/// Counts forget samples that look forgotten under argmax (mis-labelled) and,
/// among them, those whose prediction set still holds the true label.
pub fn recovery_analysis(matrix: &ProbabilityMatrix, sets: &PredictionSetBatch, split: Split) -> Result<Recovery> {
    let mut mislabel = 0;
    let mut inset = 0;
    let mut n = 0;
    for r in matrix.rows_in(split) {
        n += 1;
        if argmax(&r.probs) != r.label {
            mislabel += 1;
            let set = sets
                .get(r.id)
                .ok_or_else(|| Error::Consistency(format!("no prediction set for id {}", r.id)))?;
            if set.contains(&r.label) {
                inset += 1;
            }
        }
    }
    if n == 0 {
        return Err(Error::EmptySplit {
            split: split.to_string(),
        });
    }
    Recovery::from_counts(mislabel, inset)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitConformal {
    pub coverage: f64,
    pub set_size: f64,
    pub cr: f64,
    pub cr_degenerate: bool,
    /// CR is only a reported unlearning signal on forget and test data.
    pub canonical: bool,
}

pub fn split_conformal(sets: &PredictionSetBatch, matrix: &ProbabilityMatrix, split: Split) -> Result<SplitConformal> {
    let cov = coverage(sets, matrix, split)?;
    let size = set_size(sets, matrix, split)?;
    let ratio = cr(cov, size)?;
    Ok(SplitConformal {
        coverage: cov,
        set_size: size,
        cr: ratio.value,
        cr_degenerate: ratio.degenerate,
        canonical: matches!(split, Split::Forget | Split::Test),
    })
}

/// Full evaluation of one unlearned model. JSON field names are stable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub method: String,
    pub lambda: f64,
    pub alpha: f64,
    pub seed: u64,
    pub num_classes: usize,
    pub ua: f64,
    pub ra: f64,
    pub ta: f64,
    pub q_hat: f64,
    pub q_hat_include_all: bool,
    pub calib_size: usize,
    /// Calibration size actually used over the size requested.
    pub calib_scale: f64,
    /// Keyed by split name: forget, retain, test.
    pub conformal: BTreeMap<String, SplitConformal>,
    pub recovery: Recovery,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub miacr: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mia_recovery: Option<Recovery>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gap_to_retrain: Option<BTreeMap<String, f64>>,
}

impl MetricsReport {
    /// Flat view of every scalar metric, used for gaps and CSV rows.
    pub fn metric_map(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("ua".to_string(), self.ua);
        m.insert("ra".to_string(), self.ra);
        m.insert("ta".to_string(), self.ta);
        for (split, c) in &self.conformal {
            m.insert(format!("coverage_{split}"), c.coverage);
            m.insert(format!("set_size_{split}"), c.set_size);
            m.insert(format!("cr_{split}"), c.cr);
        }
        m.insert("recovery_ratio".to_string(), self.recovery.ratio);
        if let Some(v) = self.mia {
            m.insert("mia".to_string(), v);
        }
        if let Some(v) = self.miacr {
            m.insert("miacr".to_string(), v);
        }
        if let Some(r) = &self.mia_recovery {
            m.insert("mia_recovery_ratio".to_string(), r.ratio);
        }
        m
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)? + "\n")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        Ok(serde_json::from_str(text)?)
    }

    pub fn check_invariants(&self) -> Result<()> {
        let pct = |v: f64| (0.0..=100.0).contains(&v);
        if !(pct(self.ua) && pct(self.ra) && pct(self.ta) && self.mia.is_none_or(pct)) {
            return Err(Error::Invariant("accuracy-style metric outside [0, 100]".into()));
        }
        if !self.miacr.is_none_or(|v| (0.0..=1.0).contains(&v)) {
            return Err(Error::Invariant("MIACR outside [0, 1]".into()));
        }
        for (split, c) in &self.conformal {
            if !(0.0..=1.0).contains(&c.coverage) || !(0.0..=self.num_classes as f64).contains(&c.set_size) {
                return Err(Error::Invariant(format!("conformal metrics out of range on `{split}`")));
            }
            if c.coverage > c.set_size || c.cr < 0.0 {
                return Err(Error::Invariant(format!("coverage exceeds set size on `{split}`")));
            }
            if c.set_size > 0.0 && (c.cr * c.set_size - c.coverage).abs() > 1e-12 {
                return Err(Error::Invariant(format!("CR identity broken on `{split}`")));
            }
        }
        if self.recovery.inset > self.recovery.mislabel {
            return Err(Error::Invariant("in-set count exceeds mis-label count".into()));
        }
        Ok(())
    }
}

/// |metric − retrain metric| for every metric key the two reports share, so a
/// report without membership metrics can still be compared.
pub fn gap_to_retrain(report: &MetricsReport, retrain: &MetricsReport) -> Result<BTreeMap<String, f64>> {
    let mut mine = report.metric_map();
    let mut theirs = retrain.metric_map();
    mine.retain(|k, _| theirs.contains_key(k));
    theirs.retain(|k, _| mine.contains_key(k));
    gap_between(&mine, &theirs)
}

pub fn gap_between(metrics: &BTreeMap<String, f64>, reference: &BTreeMap<String, f64>) -> Result<BTreeMap<String, f64>> {
    if metrics.len() != reference.len() || metrics.keys().any(|k| !reference.contains_key(k)) {
        let a: Vec<_> = metrics.keys().collect();
        let b: Vec<_> = reference.keys().collect();
        return Err(Error::Consistency(format!("metric keys differ: {a:?} vs {b:?}")));
    }
    Ok(metrics
        .iter()
        .map(|(k, v)| (k.clone(), (v - reference[k]).abs()))
        .collect())
}

/// Display precision for a metric key: accuracies and MIA in percent get one
/// decimal, everything conformal gets three.
pub fn display_decimals(key: &str) -> usize {
    match key {
        "ua" | "ra" | "ta" | "mia" => 1,
        _ => 3,
    }
}

pub fn round_to(v: f64, decimals: usize) -> f64 {
    let f = 10f64.powi(decimals as i32);
    (v * f).round() / f
}

pub fn format_metric(key: &str, v: f64) -> String {
    format!("{:.*}", display_decimals(key), v)
}

/// Header and one CSV row per report, metrics rounded for display. Columns are
/// the union of all metric keys; a metric a report lacks is left blank.
pub fn reports_csv(reports: &[MetricsReport]) -> Result<String> {
    if reports.is_empty() {
        return Ok(String::new());
    }
    let keys: BTreeSet<String> = reports.iter().flat_map(|r| r.metric_map().into_keys()).collect();
    let mut out = String::from("method,lambda,alpha,seed");
    for k in &keys {
        let _ = write!(out, ",{k}");
    }
    out.push('\n');
    for r in reports {
        let m = r.metric_map();
        let _ = write!(out, "{},{},{},{}", r.method, r.lambda, r.alpha, r.seed);
        for k in &keys {
            match m.get(k) {
                Some(v) => {
                    let _ = write!(out, ",{}", format_metric(k, *v));
                }
                None => out.push(','),
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::conformal::{ProbRow, Threshold};

    fn matrix(rows: &[(usize, Split, &[f64])]) -> ProbabilityMatrix {
        let k = rows[0].2.len();
        ProbabilityMatrix::new(
            k,
            rows.iter()
                .enumerate()
                .map(|(id, (label, split, p))| ProbRow {
                    id,
                    label: *label,
                    split: *split,
                    probs: p.to_vec(),
                })
                .collect(),
        )
        .unwrap()
    }

    fn batch(m: &ProbabilityMatrix, sets: Vec<Vec<usize>>) -> PredictionSetBatch {
        PredictionSetBatch {
            num_classes: m.num_classes(),
            threshold: Threshold::Finite(0.5),
            sets: m.rows().iter().map(|r| r.id).zip(sets).collect(),
        }
    }

    #[test]
    fn ua_from_forget_accuracy() {
        // 9138 of 10000 forget samples correct.
        let right = [0.9, 0.1];
        let wrong = [0.1, 0.9];
        let mut rows: Vec<(usize, Split, &[f64])> = (0..10_000)
            .map(|i| (0, Split::Forget, if i < 9138 { &right[..] } else { &wrong[..] }))
            .collect();
        rows.push((0, Split::Retain, &right));
        rows.push((0, Split::Test, &right));
        let a = accuracy_metrics(&matrix(&rows)).unwrap();
        assert!((a.ua - 8.62).abs() < 1e-9, "{}", a.ua);
    }

    #[test]
    fn accuracy_examples() {
        let good = [0.8, 0.1, 0.1];
        let m = matrix(&[(0, Split::Forget, &good), (0, Split::Retain, &good), (0, Split::Test, &good)]);
        let a = accuracy_metrics(&m).unwrap();
        assert_eq!((a.ua, a.ra, a.ta), (0.0, 100.0, 100.0));

        let u = [1.0 / 3.0; 3];
        let m = matrix(&[(0, Split::Test, &u), (0, Split::Test, &u)]);
        assert_eq!(accuracy(&m, Split::Test).unwrap(), 1.0);
        let err = accuracy(&m, Split::Forget).unwrap_err();
        assert!(err.to_string().contains("forget"));
    }

    #[test]
    fn coverage_and_size_fixture() {
        // 10 samples, the first 9 have their label in the set.
        let p = [0.5, 0.5];
        let rows: Vec<(usize, Split, &[f64])> = (0..10).map(|_| (0, Split::Forget, &p[..])).collect();
        let m = matrix(&rows);
        let mut sets = vec![vec![0]; 9];
        sets.push(vec![1]);
        let b = batch(&m, sets);
        assert!((coverage(&b, &m, Split::Forget).unwrap() - 0.9).abs() < 1e-15);
        assert_eq!(set_size(&b, &m, Split::Forget).unwrap(), 1.0);

        let b = batch(&m, vec![vec![0, 1]; 10]);
        assert_eq!(coverage(&b, &m, Split::Forget).unwrap(), 1.0);
        let b = batch(&m, vec![vec![1]; 10]);
        assert_eq!(coverage(&b, &m, Split::Forget).unwrap(), 0.0);
    }

    #[test]
    fn set_size_half_empty() {
        let p = [0.1; 10];
        let rows: Vec<(usize, Split, &[f64])> = (0..4).map(|_| (0, Split::Test, &p[..])).collect();
        let m = matrix(&rows);
        let b = batch(&m, vec![vec![], (0..10).collect(), vec![], (0..10).collect()]);
        assert_eq!(set_size(&b, &m, Split::Test).unwrap(), 5.0);
    }

    #[test]
    fn missing_set_is_consistency_error() {
        let p = [0.5, 0.5];
        let m = matrix(&[(0, Split::Test, &p), (0, Split::Test, &p)]);
        let mut b = batch(&m, vec![vec![0], vec![0]]);
        b.sets.remove(&1);
        assert!(matches!(coverage(&b, &m, Split::Test), Err(Error::Consistency(_))));
    }

    #[test]
    fn cr_examples() {
        assert!((cr(0.941, 1.089).unwrap().value - 0.864).abs() < 5e-4);
        assert_eq!(cr(1.0, 1.0).unwrap().value, 1.0);
        assert_eq!(cr(0.5, 2.0).unwrap().value, 0.25);
        let d = cr(0.0, 0.0).unwrap();
        assert!(d.degenerate && d.value == 0.0);
        assert!(matches!(cr(-0.1, 1.0), Err(Error::Domain(_))));
    }

    #[test]
    fn recovery_examples() {
        let r = Recovery::from_counts(431, 132).unwrap();
        assert!((r.ratio_percent() - 30.6).abs() < 0.05);
        let r = Recovery::from_counts(0, 0).unwrap();
        assert!(r.undefined && r.ratio == 0.0);

        // 5 samples: ids 0..3 misclassified, ids 0 and 1 still covered.
        let wrong = [0.2, 0.8];
        let right = [0.9, 0.1];
        let m = matrix(&[
            (0, Split::Forget, &wrong),
            (0, Split::Forget, &wrong),
            (0, Split::Forget, &wrong),
            (0, Split::Forget, &right),
            (0, Split::Forget, &right),
        ]);
        let b = batch(&m, vec![vec![0, 1], vec![0, 1], vec![1], vec![0], vec![0]]);
        let r = recovery_analysis(&m, &b, Split::Forget).unwrap();
        assert_eq!((r.mislabel, r.inset), (3, 2));
        assert!((r.ratio_percent() - 66.7).abs() < 0.05);
    }

    fn report(ua: f64, cr_f: f64) -> MetricsReport {
        let mut conformal = BTreeMap::new();
        conformal.insert(
            "forget".to_string(),
            SplitConformal {
                coverage: 0.9,
                set_size: 1.0,
                cr: cr_f,
                cr_degenerate: false,
                canonical: true,
            },
        );
        MetricsReport {
            method: "x".into(),
            lambda: 0.0,
            alpha: 0.05,
            seed: 0,
            num_classes: 10,
            ua,
            ra: 99.0,
            ta: 90.0,
            q_hat: 0.9,
            q_hat_include_all: false,
            calib_size: 2000,
            calib_scale: 1.0,
            conformal,
            recovery: Recovery::from_counts(10, 3).unwrap(),
            mia: None,
            miacr: None,
            mia_recovery: None,
            gap_to_retrain: None,
        }
    }

    #[test]
    fn gaps() {
        let rt = report(8.6, 0.864);
        let ft = report(3.8, 0.986);
        let g = gap_to_retrain(&ft, &rt).unwrap();
        assert_eq!(round_to(g["ua"], 1), 4.8);
        assert_eq!(round_to(g["cr_forget"], 3), 0.122);
        assert!(gap_to_retrain(&rt, &rt).unwrap().values().all(|&v| v == 0.0));
        let mut with_mia = ft.clone();
        with_mia.mia = Some(50.0);
        let g = gap_to_retrain(&with_mia, &rt).unwrap();
        assert!(!g.contains_key("mia"));
        assert_eq!(g.len(), rt.metric_map().len());
        let csv = reports_csv(&[rt.clone(), with_mia]).unwrap();
        let lines: Vec<&str> = csv.lines().collect();
        let col = lines[0].split(',').position(|c| c == "mia").unwrap();
        assert_eq!(lines[1].split(',').nth(col), Some(""));
        assert_eq!(lines[2].split(',').nth(col), Some("50.0"));
    }

    #[test]
    fn report_json_and_csv() {
        let r = report(8.6, 0.864);
        let back = MetricsReport::from_json(&r.to_json().unwrap()).unwrap();
        assert_eq!(back, r);
        let csv = reports_csv(&[r.clone(), r]).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.lines().nth(1).unwrap().contains(",0.864,"));
    }
}
