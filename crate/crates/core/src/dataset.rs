//! Synthetic Gaussian-blob classification data and split management.
//!
//! Class `c` is centred at `separation · e_c` when there are no more classes
//! than feature dimensions, and at a random point on the sphere of radius
//! `separation` otherwise; samples are the centre plus isotropic Gaussian
//! noise of scale `noise`. Each class contributes a fixed number of samples to
//! three disjoint blocks: train, test, and a held-out pool from which both
//! calibration sets are carved.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::csvio;
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Sample {
    pub id: usize,
    pub features: Vec<f64>,
    pub label: usize,
}

/// What gets forgotten.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ForgetTarget {
    /// A uniformly drawn fraction of the training set.
    Fraction(f64),
    /// Every training sample of one class.
    Class(usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Held-out samples per class; both calibration sets come out of this.
    pub pool_per_class: usize,
    /// Evaluation calibration samples (D_c) per class.
    pub calib_eval_per_class: usize,
    /// Unlearning-phase calibration samples (D_c') per class.
    pub calib_unlearn_per_class: usize,
    pub separation: f64,
    pub noise: f64,
    pub seed: u64,
    pub forget: ForgetTarget,
    /// Draw calibration sets class-balanced (default) or uniformly from the pool.
    pub balanced_calibration: bool,
}

impl Default for DatasetSpec {
    fn default() -> Self {
        DatasetSpec {
            num_classes: 5,
            dim: 16,
            train_per_class: 200,
            test_per_class: 400,
            pool_per_class: 1000,
            calib_eval_per_class: 400,
            calib_unlearn_per_class: 200,
            separation: 3.0,
            noise: 1.0,
            seed: 0,
            forget: ForgetTarget::Fraction(0.10),
            balanced_calibration: true,
        }
    }
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        let cfg = |m: &str| Err(Error::Config(m.to_string()));
        if self.num_classes < 2 {
            return cfg("need at least 2 classes");
        }
        if self.dim < 1 {
            return cfg("feature dimension must be at least 1");
        }
        if self.train_per_class == 0
            || self.test_per_class == 0
            || self.pool_per_class == 0
            || self.calib_eval_per_class == 0
            || self.calib_unlearn_per_class == 0
        {
            return cfg("all per-class sample counts must be positive");
        }
        if self.calib_eval_per_class + self.calib_unlearn_per_class > self.pool_per_class {
            return cfg("calibration sets do not fit in the held-out pool");
        }
        if !(self.separation.is_finite() && self.separation >= 0.0) {
            return cfg("separation must be finite and non-negative");
        }
        if !(self.noise.is_finite() && self.noise > 0.0) {
            return cfg("noise scale must be finite and positive");
        }
        match self.forget {
            ForgetTarget::Fraction(f) => {
                if !(f > 0.0 && f < 1.0) {
                    return Err(Error::Config(format!(
                        "forget fraction {f} must lie strictly between 0 and 1"
                    )));
                }
                let n = self.forget_count(f);
                if n == 0 || n == self.train_per_class * self.num_classes {
                    return Err(Error::Config(format!(
                        "forget fraction {f} leaves an empty forget or retain set"
                    )));
                }
            }
            ForgetTarget::Class(c) => {
                if c >= self.num_classes {
                    return Err(Error::Config(format!(
                        "forget class {c} out of range for {} classes",
                        self.num_classes
                    )));
                }
            }
        }
        Ok(())
    }

    fn forget_count(&self, fraction: f64) -> usize {
        (fraction * (self.train_per_class * self.num_classes) as f64).round() as usize
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Retain,
    Forget,
    CalibEval,
    CalibUnlearn,
    Test,
    Pool,
}

impl Split {
    pub const ALL: [Split; 6] = [
        Split::Retain,
        Split::Forget,
        Split::CalibEval,
        Split::CalibUnlearn,
        Split::Test,
        Split::Pool,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Split::Retain => "retain",
            Split::Forget => "forget",
            Split::CalibEval => "calib_eval",
            Split::CalibUnlearn => "calib_unlearn",
            Split::Test => "test",
            Split::Pool => "pool",
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Split::ALL
            .into_iter()
            .find(|sp| sp.name() == s)
            .ok_or_else(|| Error::Config(format!("unknown split `{s}`")))
    }
}

/// Id sets of the six splits. All six are pairwise disjoint; `pool` holds the
/// held-out samples left over after both calibration sets were drawn.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct SplitAssignment {
    pub retain: BTreeSet<usize>,
    pub forget: BTreeSet<usize>,
    pub calib_eval: BTreeSet<usize>,
    pub calib_unlearn: BTreeSet<usize>,
    pub test: BTreeSet<usize>,
    pub pool: BTreeSet<usize>,
}

impl SplitAssignment {
    pub fn get(&self, split: Split) -> &BTreeSet<usize> {
        match split {
            Split::Retain => &self.retain,
            Split::Forget => &self.forget,
            Split::CalibEval => &self.calib_eval,
            Split::CalibUnlearn => &self.calib_unlearn,
            Split::Test => &self.test,
            Split::Pool => &self.pool,
        }
    }

    fn get_mut(&mut self, split: Split) -> &mut BTreeSet<usize> {
        match split {
            Split::Retain => &mut self.retain,
            Split::Forget => &mut self.forget,
            Split::CalibEval => &mut self.calib_eval,
            Split::CalibUnlearn => &mut self.calib_unlearn,
            Split::Test => &mut self.test,
            Split::Pool => &mut self.pool,
        }
    }

    /// D_train = D_f ∪ D_r.
    pub fn train_ids(&self) -> BTreeSet<usize> {
        self.retain.union(&self.forget).copied().collect()
    }

    /// Split of an id, if it belongs to any.
    pub fn split_of(&self, id: usize) -> Option<Split> {
        Split::ALL.into_iter().find(|&s| self.get(s).contains(&id))
    }

    /// Checks pairwise disjointness of all splits.
    pub fn validate(&self) -> Result<()> {
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        for split in Split::ALL {
            for &id in self.get(split) {
                if let Some(prev) = seen.insert(id, split) {
                    return Err(Error::Consistency(format!(
                        "id {id} appears in both `{prev}` and `{split}`"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("split,id\n");
        for split in Split::ALL {
            for id in self.get(split) {
                let _ = writeln!(out, "{split},{id}");
            }
        }
        out
    }

    pub fn from_csv(text: &str, source: &str) -> Result<Self> {
        let rows = csvio::data_lines(text, source, |h| h == ["split", "id"])?;
        let mut out = SplitAssignment::default();
        let mut seen: BTreeMap<usize, Split> = BTreeMap::new();
        for (line, fields) in rows {
            if fields.len() != 2 {
                return Err(Error::parse(source, line, "expected 2 fields"));
            }
            let split: Split = fields[0]
                .parse()
                .map_err(|_| Error::parse(source, line, format!("unknown split `{}`", fields[0])))?;
            let id: usize = csvio::parse_field(fields[1], source, line, "id")?;
            if let Some(prev) = seen.insert(id, split) {
                return Err(Error::parse(
                    source,
                    line,
                    format!("id {id} already assigned to `{prev}`"),
                ));
            }
            out.get_mut(split).insert(id);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_string(path, &self.to_csv())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = csvio::read_to_string(path)?;
        Self::from_csv(&text, &path.display().to_string())
    }
}

/// Generated samples plus dimensions, indexed by id.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub num_classes: usize,
    pub dim: usize,
    samples: Vec<Sample>,
    index: BTreeMap<usize, usize>,
}

impl Dataset {
    pub fn new(num_classes: usize, dim: usize, samples: Vec<Sample>) -> Result<Self> {
        let mut index = BTreeMap::new();
        for (pos, s) in samples.iter().enumerate() {
            if s.features.len() != dim {
                return Err(Error::Dimension {
                    what: "sample features",
                    expected: dim,
                    got: s.features.len(),
                });
            }
            if s.label >= num_classes {
                return Err(Error::Index {
                    index: s.label,
                    len: num_classes,
                });
            }
            if index.insert(s.id, pos).is_some() {
                return Err(Error::Consistency(format!("duplicate sample id {}", s.id)));
            }
        }
        Ok(Dataset {
            num_classes,
            dim,
            samples,
            index,
        })
    }

    pub fn samples(&self) -> &[Sample] {
        &self.samples
    }

    pub fn get(&self, id: usize) -> Option<&Sample> {
        self.index.get(&id).map(|&i| &self.samples[i])
    }

    /// Samples for a set of ids, in ascending id order.
    pub fn select<'a>(&'a self, ids: &BTreeSet<usize>) -> Result<Vec<&'a Sample>> {
        ids.iter()
            .map(|&id| {
                self.get(id)
                    .ok_or_else(|| Error::Consistency(format!("split references unknown id {id}")))
            })
            .collect()
    }

    /// Checks that every id in `splits` exists in this dataset.
    pub fn check_splits(&self, splits: &SplitAssignment) -> Result<()> {
        splits.validate()?;
        for split in Split::ALL {
            for &id in splits.get(split) {
                if self.get(id).is_none() {
                    return Err(Error::Consistency(format!(
                        "split `{split}` references id {id} missing from the dataset"
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("id,label");
        for j in 0..self.dim {
            let _ = write!(out, ",f{j}");
        }
        out.push('\n');
        for s in &self.samples {
            let _ = write!(out, "{},{}", s.id, s.label);
            for x in &s.features {
                let _ = write!(out, ",{}", format_feature(*x));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str, source: &str, num_classes: Option<usize>) -> Result<Self> {
        let mut dim = 0;
        let rows = csvio::data_lines(text, source, |h| {
            let ok = h.len() >= 3
                && h[0] == "id"
                && h[1] == "label"
                && h[2..].iter().enumerate().all(|(j, f)| *f == format!("f{j}"));
            dim = h.len().saturating_sub(2);
            ok
        })?;
        let mut samples = Vec::with_capacity(rows.len());
        for (line, fields) in rows {
            if fields.len() != dim + 2 {
                return Err(Error::parse(
                    source,
                    line,
                    format!("expected {} fields, found {}", dim + 2, fields.len()),
                ));
            }
            let id = csvio::parse_field(fields[0], source, line, "id")?;
            let label = csvio::parse_field(fields[1], source, line, "label")?;
            let features = fields[2..]
                .iter()
                .map(|f| csvio::parse_field::<f64>(f, source, line, "feature"))
                .collect::<Result<Vec<_>>>()?;
            if features.iter().any(|x| !x.is_finite()) {
                return Err(Error::parse(source, line, "non-finite feature"));
            }
            samples.push(Sample { id, features, label });
        }
        if samples.is_empty() {
            return Err(Error::parse(source, 1, "no samples"));
        }
        let k = num_classes.unwrap_or_else(|| samples.iter().map(|s| s.label).max().unwrap_or(0) + 1);
        Dataset::new(k, dim, samples).map_err(|e| Error::parse(source, 0, e.to_string()))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_string(path, &self.to_csv())
    }

    pub fn load(path: &Path, num_classes: Option<usize>) -> Result<Self> {
        let text = csvio::read_to_string(path)?;
        Self::from_csv(&text, &path.display().to_string(), num_classes)
    }
}

/// Nine significant digits, the precision of the dataset file.
fn format_feature(x: f64) -> String {
    format!("{x:.8e}")
}

/// Rounds to what the dataset file stores so a save/load cycle is lossless.
fn quantize_feature(x: f64) -> f64 {
    format_feature(x).parse().expect("formatted float parses")
}

/// Draws the dataset and its split assignment. Deterministic in `spec`.
pub fn generate(spec: &DatasetSpec) -> Result<(Dataset, SplitAssignment)> {
    spec.validate()?;
    let k = spec.num_classes;
    let mut rng = seed::stage_rng(spec.seed, "dataset");

    // Orthogonal centres when they fit, random directions otherwise.
    let centers: Vec<Vec<f64>> = (0..k)
        .map(|c| {
            if k <= spec.dim {
                let mut v = vec![0.0; spec.dim];
                v[c] = spec.separation;
                return v;
            }
            let dir: Vec<f64> = (0..spec.dim).map(|_| StandardNormal.sample(&mut rng)).collect();
            let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
            dir.into_iter().map(|v| spec.separation * v / norm).collect()
        })
        .collect();

    let mut samples = Vec::new();
    let mut next_id = 0usize;
    let mut draw_block = |count: usize, rng: &mut rand_chacha::ChaCha8Rng, samples: &mut Vec<Sample>| {
        let mut by_class = vec![Vec::with_capacity(count); k];
        for (label, center) in centers.iter().enumerate() {
            for _ in 0..count {
                let features = center
                    .iter()
                    .map(|c| {
                        let z: f64 = StandardNormal.sample(&mut *rng);
                        quantize_feature(c + spec.noise * z)
                    })
                    .collect();
                samples.push(Sample {
                    id: next_id,
                    features,
                    label,
                });
                by_class[label].push(next_id);
                next_id += 1;
            }
        }
        by_class
    };

    let train = draw_block(spec.train_per_class, &mut rng, &mut samples);
    let test = draw_block(spec.test_per_class, &mut rng, &mut samples);
    let pool = draw_block(spec.pool_per_class, &mut rng, &mut samples);

    let mut splits = SplitAssignment {
        test: test.into_iter().flatten().collect(),
        ..Default::default()
    };

    let train_ids: Vec<usize> = train.iter().flatten().copied().collect();
    let mut split_rng = seed::stage_rng(spec.seed, "splits");
    let forget: BTreeSet<usize> = match spec.forget {
        ForgetTarget::Fraction(f) => {
            let n = spec.forget_count(f);
            rand::seq::index::sample(&mut split_rng, train_ids.len(), n)
                .into_iter()
                .map(|i| train_ids[i])
                .collect()
        }
        ForgetTarget::Class(c) => train[c].iter().copied().collect(),
    };
    splits.retain = train_ids.iter().copied().filter(|id| !forget.contains(id)).collect();
    splits.forget = forget;

    if spec.balanced_calibration {
        for mut ids in pool {
            ids.shuffle(&mut split_rng);
            let (ce, rest) = ids.split_at(spec.calib_eval_per_class);
            let (cu, left) = rest.split_at(spec.calib_unlearn_per_class);
            splits.calib_eval.extend(ce);
            splits.calib_unlearn.extend(cu);
            splits.pool.extend(left);
        }
    } else {
        let mut ids: Vec<usize> = pool.into_iter().flatten().collect();
        ids.shuffle(&mut split_rng);
        let n_ce = spec.calib_eval_per_class * k;
        let n_cu = spec.calib_unlearn_per_class * k;
        splits.calib_eval.extend(&ids[..n_ce]);
        splits.calib_unlearn.extend(&ids[n_ce..n_ce + n_cu]);
        splits.pool.extend(&ids[n_ce + n_cu..]);
    }

    let dataset = Dataset::new(k, spec.dim, samples)?;
    debug_assert!(splits.validate().is_ok());
    Ok((dataset, splits))
}

/// Uniform sample of `n` ids out of `ids` without replacement, in ascending order.
pub fn subsample_ids<R: Rng + ?Sized>(ids: &BTreeSet<usize>, n: usize, rng: &mut R) -> BTreeSet<usize> {
    let all: Vec<usize> = ids.iter().copied().collect();
    if n >= all.len() {
        return ids.clone();
    }
    rand::seq::index::sample(rng, all.len(), n)
        .into_iter()
        .map(|i| all[i])
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> DatasetSpec {
        DatasetSpec {
            train_per_class: 200,
            test_per_class: 20,
            pool_per_class: 30,
            calib_eval_per_class: 10,
            calib_unlearn_per_class: 10,
            seed: 7,
            ..Default::default()
        }
    }

    #[test]
    fn forget_fraction_sizes() {
        let (_, s) = generate(&small_spec()).unwrap();
        assert_eq!(s.forget.len(), 100);
        assert_eq!(s.retain.len(), 900);
        s.validate().unwrap();
    }

    #[test]
    fn forget_class_takes_whole_class() {
        let spec = DatasetSpec {
            forget: ForgetTarget::Class(2),
            ..small_spec()
        };
        let (d, s) = generate(&spec).unwrap();
        assert_eq!(s.forget.len(), 200);
        assert!(s.forget.iter().all(|&id| d.get(id).unwrap().label == 2));
        assert!(s.retain.iter().all(|&id| d.get(id).unwrap().label != 2));
    }

    #[test]
    fn generation_is_deterministic() {
        let (d1, s1) = generate(&small_spec()).unwrap();
        let (d2, s2) = generate(&small_spec()).unwrap();
        assert_eq!(s1, s2);
        assert_eq!(d1.to_csv(), d2.to_csv());
    }

    #[test]
    fn different_seeds_change_forget_set() {
        let (_, a) = generate(&small_spec()).unwrap();
        let (_, b) = generate(&DatasetSpec { seed: 8, ..small_spec() }).unwrap();
        assert_ne!(a.forget, b.forget);
    }

    #[test]
    fn split_invariants() {
        let (d, s) = generate(&small_spec()).unwrap();
        let train = s.train_ids();
        assert_eq!(train.len(), 1000);
        assert!(s.calib_eval.is_disjoint(&train) && s.calib_eval.is_disjoint(&s.test));
        assert!(s.calib_unlearn.is_disjoint(&s.calib_eval));
        let total: usize = Split::ALL.iter().map(|&sp| s.get(sp).len()).sum();
        assert_eq!(total, d.samples().len());
        for split in [Split::CalibEval, Split::CalibUnlearn] {
            let mut hist = vec![0; 5];
            for &id in s.get(split) {
                hist[d.get(id).unwrap().label] += 1;
            }
            assert_eq!(hist, vec![10; 5]);
        }
    }

    #[test]
    fn uniform_calibration_still_disjoint() {
        let spec = DatasetSpec {
            balanced_calibration: false,
            ..small_spec()
        };
        let (_, s) = generate(&spec).unwrap();
        s.validate().unwrap();
        assert_eq!(s.calib_eval.len(), 50);
        assert_eq!(s.calib_unlearn.len(), 50);
        assert_eq!(s.pool.len(), 50);
    }

    #[test]
    fn config_errors() {
        for forget in [ForgetTarget::Fraction(0.0), ForgetTarget::Fraction(1.0), ForgetTarget::Class(5)] {
            let spec = DatasetSpec { forget, ..small_spec() };
            assert!(matches!(generate(&spec), Err(Error::Config(_))));
        }
        let spec = DatasetSpec {
            test_per_class: 0,
            ..small_spec()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
        let spec = DatasetSpec {
            num_classes: 1,
            ..small_spec()
        };
        assert!(matches!(generate(&spec), Err(Error::Config(_))));
    }

    #[test]
    fn split_file_roundtrip_and_errors() {
        let (_, s) = generate(&small_spec()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("splits.csv");
        s.save(&path).unwrap();
        assert_eq!(SplitAssignment::load(&path).unwrap(), s);

        let err = SplitAssignment::from_csv("split,id\nretain,1\nforget,1\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 3, .. }), "{err}");
        assert!(matches!(SplitAssignment::from_csv("", "t"), Err(Error::Parse { .. })));
        let err = SplitAssignment::from_csv("split,id\nretain,x\n", "t").unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }));
    }

    #[test]
    fn dataset_file_roundtrip_is_exact() {
        let (d, _) = generate(&small_spec()).unwrap();
        let back = Dataset::from_csv(&d.to_csv(), "t", Some(5)).unwrap();
        assert_eq!(back, d);
        let header: Vec<String> = (0..d.dim).map(|j| format!("f{j}")).collect();
        assert!(d.to_csv().starts_with(&format!("id,label,{}\n", header.join(","))));
    }
}
