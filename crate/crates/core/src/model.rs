//! One-hidden-layer tanh MLP with softmax output, explicit backprop and SGD.
//!
//! Shapes: `w1` is `hidden × input` and `w2` is `classes × hidden`, both
//! row-major. Everything is `f64`.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::conformal::{ProbRow, ProbabilityMatrix};
use crate::csvio;
use crate::dataset::{Dataset, Sample, Split, SplitAssignment};
use crate::error::{Error, Result};
use crate::seed;

/// Probability floor used inside logarithms.
pub const PROB_FLOOR: f64 = 1e-12;

/// Batches whose mean loss exceeds this magnitude abort training.
pub const DIVERGENCE_LIMIT: f64 = 1e6;

const CHECKPOINT_MAGIC: &str = "cpu-unlearn-mlp v1";

#[derive(Debug, Clone, PartialEq)]
pub struct Mlp {
    pub input_dim: usize,
    pub hidden_dim: usize,
    pub num_classes: usize,
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
}

/// Gradient of a scalar loss with respect to every parameter.
///
/// `probs` carries the upstream gradient the bundle was computed from (zero
/// when backpropagation started at the logits) and `logits` the gradient at
/// the pre-softmax layer.
#[derive(Debug, Clone, PartialEq)]
pub struct GradBundle {
    pub w1: Vec<f64>,
    pub b1: Vec<f64>,
    pub w2: Vec<f64>,
    pub b2: Vec<f64>,
    pub probs: Vec<f64>,
    pub logits: Vec<f64>,
}

impl GradBundle {
    pub fn zeros_like(p: &Mlp) -> Self {
        GradBundle {
            w1: vec![0.0; p.w1.len()],
            b1: vec![0.0; p.b1.len()],
            w2: vec![0.0; p.w2.len()],
            b2: vec![0.0; p.b2.len()],
            probs: vec![0.0; p.num_classes],
            logits: vec![0.0; p.num_classes],
        }
    }

    fn param_slices(&self) -> [&[f64]; 4] {
        [&self.w1, &self.b1, &self.w2, &self.b2]
    }

    fn param_slices_mut(&mut self) -> [&mut Vec<f64>; 4] {
        [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2]
    }

    /// `self += scale * other` over the parameter gradients.
    pub fn add_scaled(&mut self, other: &GradBundle, scale: f64) {
        for (dst, src) in self.param_slices_mut().into_iter().zip(other.param_slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += scale * s;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        for dst in self.param_slices_mut() {
            dst.iter_mut().for_each(|d| *d *= factor);
        }
    }

    pub fn is_zero(&self) -> bool {
        self.param_slices().iter().all(|s| s.iter().all(|&v| v == 0.0))
    }

    /// Parameter gradients flattened in checkpoint order (w1, b1, w2, b2).
    pub fn flat(&self) -> Vec<f64> {
        self.param_slices().concat()
    }
}

/// Hidden activations and output probabilities of one forward pass.
#[derive(Debug, Clone)]
pub struct Activations {
    pub hidden: Vec<f64>,
    pub probs: Vec<f64>,
}

impl Mlp {
    pub fn zeros(input_dim: usize, hidden_dim: usize, num_classes: usize) -> Self {
        Mlp {
            input_dim,
            hidden_dim,
            num_classes,
            w1: vec![0.0; hidden_dim * input_dim],
            b1: vec![0.0; hidden_dim],
            w2: vec![0.0; num_classes * hidden_dim],
            b2: vec![0.0; num_classes],
        }
    }

    /// Glorot-uniform weights, zero biases.
    pub fn init(input_dim: usize, hidden_dim: usize, num_classes: usize, seed: u64) -> Result<Self> {
        if input_dim == 0 || hidden_dim == 0 || num_classes < 2 {
            return Err(Error::Config(format!(
                "invalid architecture {input_dim} -> {hidden_dim} -> {num_classes}"
            )));
        }
        let mut rng = seed::rng(seed);
        let mut p = Mlp::zeros(input_dim, hidden_dim, num_classes);
        let a1 = (6.0 / (input_dim + hidden_dim) as f64).sqrt();
        let a2 = (6.0 / (hidden_dim + num_classes) as f64).sqrt();
        p.w1.iter_mut().for_each(|w| *w = rng.random_range(-a1..a1));
        p.w2.iter_mut().for_each(|w| *w = rng.random_range(-a2..a2));
        Ok(p)
    }

    pub fn num_params(&self) -> usize {
        self.w1.len() + self.b1.len() + self.w2.len() + self.b2.len()
    }

    /// Parameters flattened in checkpoint order.
    pub fn flat(&self) -> Vec<f64> {
        [&self.w1[..], &self.b1, &self.w2, &self.b2].concat()
    }

    /// Mutable access to the `i`-th flattened parameter.
    pub fn param_mut(&mut self, mut i: usize) -> &mut f64 {
        for v in [&mut self.w1, &mut self.b1, &mut self.w2, &mut self.b2] {
            if i < v.len() {
                return &mut v[i];
            }
            i -= v.len();
        }
        panic!("parameter index out of range");
    }

    pub fn is_finite(&self) -> bool {
        self.flat().iter().all(|v| v.is_finite())
    }

    fn check_input(&self, features: &[f64]) -> Result<()> {
        if features.len() != self.input_dim {
            return Err(Error::Dimension {
                what: "input features",
                expected: self.input_dim,
                got: features.len(),
            });
        }
        Ok(())
    }

    fn validate_shapes(&self) -> Result<()> {
        let expect = [
            ("w1", self.hidden_dim * self.input_dim, self.w1.len()),
            ("b1", self.hidden_dim, self.b1.len()),
            ("w2", self.num_classes * self.hidden_dim, self.w2.len()),
            ("b2", self.num_classes, self.b2.len()),
        ];
        for (what, expected, got) in expect {
            if expected != got {
                return Err(Error::Dimension { what, expected, got });
            }
        }
        Ok(())
    }

    pub fn activations(&self, features: &[f64]) -> Result<Activations> {
        self.check_input(features)?;
        let hidden: Vec<f64> = self
            .w1
            .chunks_exact(self.input_dim)
            .zip(&self.b1)
            .map(|(row, b)| (dot(row, features) + b).tanh())
            .collect();
        let logits: Vec<f64> = self
            .w2
            .chunks_exact(self.hidden_dim)
            .zip(&self.b2)
            .map(|(row, b)| dot(row, &hidden) + b)
            .collect();
        Ok(Activations {
            hidden,
            probs: softmax(&logits),
        })
    }

    /// Class probabilities for one input.
    pub fn forward(&self, features: &[f64]) -> Result<Vec<f64>> {
        Ok(self.activations(features)?.probs)
    }

    /// Gradients of a loss whose derivative with respect to the output
    /// probabilities is `grad_probs`.
    pub fn backward(&self, features: &[f64], grad_probs: &[f64]) -> Result<GradBundle> {
        if grad_probs.len() != self.num_classes {
            return Err(Error::Dimension {
                what: "loss gradient",
                expected: self.num_classes,
                got: grad_probs.len(),
            });
        }
        let act = self.activations(features)?;
        let grad_logits = softmax_backward(&act.probs, grad_probs);
        let mut g = self.backward_from_logits(features, &act, &grad_logits);
        g.probs = grad_probs.to_vec();
        Ok(g)
    }

    /// Backpropagation starting at the logit layer.
    pub fn backward_from_logits(&self, features: &[f64], act: &Activations, grad_logits: &[f64]) -> GradBundle {
        let mut g = GradBundle::zeros_like(self);
        g.logits = grad_logits.to_vec();
        g.b2.copy_from_slice(grad_logits);
        let mut grad_hidden = vec![0.0; self.hidden_dim];
        for (c, &gl) in grad_logits.iter().enumerate() {
            let row = c * self.hidden_dim;
            for j in 0..self.hidden_dim {
                g.w2[row + j] = gl * act.hidden[j];
                grad_hidden[j] += gl * self.w2[row + j];
            }
        }
        for j in 0..self.hidden_dim {
            let gz = grad_hidden[j] * (1.0 - act.hidden[j] * act.hidden[j]);
            g.b1[j] = gz;
            let row = j * self.input_dim;
            for (i, &x) in features.iter().enumerate() {
                g.w1[row + i] = gz * x;
            }
        }
        g
    }

    /// Probability matrix over the requested splits, rows ordered by split then id.
    pub fn predict_matrix(
        &self,
        dataset: &Dataset,
        splits: &SplitAssignment,
        which: &[Split],
    ) -> Result<ProbabilityMatrix> {
        let mut rows = Vec::new();
        for &split in which {
            for sample in dataset.select(splits.get(split))? {
                rows.push(ProbRow {
                    id: sample.id,
                    label: sample.label,
                    split,
                    probs: self.forward(&sample.features)?,
                });
            }
        }
        ProbabilityMatrix::new(self.num_classes, rows)
    }

    pub fn to_text(&self) -> String {
        let mut out = format!(
            "{CHECKPOINT_MAGIC}\ndims {} {} {}\n",
            self.input_dim, self.hidden_dim, self.num_classes
        );
        for (name, vals) in [("w1", &self.w1), ("b1", &self.b1), ("w2", &self.w2), ("b2", &self.b2)] {
            out.push_str(name);
            for v in vals {
                let _ = write!(out, " {v:e}");
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str, source: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate().map(|(i, l)| (i + 1, l.trim()));
        let mut next = |what: &str| {
            lines
                .next()
                .ok_or_else(|| Error::parse(source, 0, format!("truncated checkpoint: missing {what}")))
        };
        let (ln, magic) = next("header")?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::parse(source, ln, format!("bad checkpoint header `{magic}`")));
        }
        let (ln, dims) = next("dims")?;
        let parts: Vec<&str> = dims.split_whitespace().collect();
        if parts.len() != 4 || parts[0] != "dims" {
            return Err(Error::parse(source, ln, "expected `dims <input> <hidden> <classes>`"));
        }
        let d: usize = csvio::parse_field(parts[1], source, ln, "input dim")?;
        let h: usize = csvio::parse_field(parts[2], source, ln, "hidden dim")?;
        let k: usize = csvio::parse_field(parts[3], source, ln, "class count")?;
        let mut p = Mlp::zeros(d, h, k);
        for name in ["w1", "b1", "w2", "b2"] {
            let (ln, line) = next(name)?;
            let mut parts = line.split_whitespace();
            if parts.next() != Some(name) {
                return Err(Error::parse(source, ln, format!("expected `{name}` row")));
            }
            let vals = parts
                .map(|f| csvio::parse_field::<f64>(f, source, ln, "weight"))
                .collect::<Result<Vec<_>>>()?;
            if vals.iter().any(|v| !v.is_finite()) {
                return Err(Error::parse(source, ln, "non-finite weight"));
            }
            let dst = match name {
                "w1" => &mut p.w1,
                "b1" => &mut p.b1,
                "w2" => &mut p.w2,
                _ => &mut p.b2,
            };
            if vals.len() != dst.len() {
                return Err(Error::parse(
                    source,
                    ln,
                    format!("`{name}` has {} values, expected {}", vals.len(), dst.len()),
                ));
            }
            *dst = vals;
        }
        p.validate_shapes()?;
        Ok(p)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        csvio::write_string(path, &self.to_text())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = csvio::read_to_string(path)?;
        Self::from_text(&text, &path.display().to_string())
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let sum: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / sum).collect()
}

/// Vector-Jacobian product of softmax: maps dL/dp to dL/dz.
pub fn softmax_backward(probs: &[f64], grad_probs: &[f64]) -> Vec<f64> {
    let inner = dot(probs, grad_probs);
    probs.iter().zip(grad_probs).map(|(p, g)| p * (g - inner)).collect()
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// `-ln p[label]`, with the probability floored at [`PROB_FLOOR`].
pub fn cross_entropy(probs: &[f64], label: usize) -> f64 {
    -probs[label].max(PROB_FLOOR).ln()
}

/// Gradient of cross-entropy with respect to the logits: `p - onehot(label)`.
pub fn cross_entropy_logit_grad(probs: &[f64], label: usize) -> Vec<f64> {
    let mut g = probs.to_vec();
    g[label] -= 1.0;
    g
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            learning_rate: 0.05,
            momentum: 0.9,
            batch_size: 64,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        Ok(())
    }
}

/// Plain gradient step without momentum.
pub fn sgd_step(params: &Mlp, grads: &GradBundle, learning_rate: f64) -> Mlp {
    let mut out = params.clone();
    for (dst, src) in [&mut out.w1, &mut out.b1, &mut out.w2, &mut out.b2]
        .into_iter()
        .zip(grads.param_slices())
    {
        dst.iter_mut().zip(src).for_each(|(w, g)| *w -= learning_rate * g);
    }
    out
}

/// SGD with heavy-ball momentum: `v = μv + g`, `θ -= lr·v`.
#[derive(Debug, Clone)]
pub struct Sgd {
    learning_rate: f64,
    momentum: f64,
    velocity: Option<GradBundle>,
}

impl Sgd {
    pub fn new(learning_rate: f64, momentum: f64) -> Self {
        Sgd {
            learning_rate,
            momentum,
            velocity: None,
        }
    }

    pub fn step(&mut self, params: &mut Mlp, grads: &GradBundle) {
        let v = self.velocity.get_or_insert_with(|| GradBundle::zeros_like(params));
        v.scale(self.momentum);
        v.add_scaled(grads, 1.0);
        for (dst, src) in [&mut params.w1, &mut params.b1, &mut params.w2, &mut params.b2]
            .into_iter()
            .zip(v.param_slices())
        {
            dst.iter_mut().zip(src).for_each(|(w, g)| *w -= self.learning_rate * g);
        }
    }
}

/// Per-sample loss value and its gradient at the logit layer.
#[derive(Debug, Clone)]
pub struct SampleLoss {
    pub value: f64,
    pub grad_logits: Vec<f64>,
}

/// Training objective evaluated sample by sample inside mini-batches.
pub trait Objective {
    fn begin_epoch(&mut self, _epoch: usize, _params: &Mlp) -> Result<()> {
        Ok(())
    }

    fn sample_loss(&mut self, sample: &Sample, probs: &[f64]) -> Result<SampleLoss>;

    fn end_epoch(&mut self, _epoch: usize, _params: &Mlp) -> Result<()> {
        Ok(())
    }
}

/// Cross-entropy against each sample's own label.
#[derive(Debug, Clone, Copy, Default)]
pub struct CrossEntropy;

impl Objective for CrossEntropy {
    fn sample_loss(&mut self, sample: &Sample, probs: &[f64]) -> Result<SampleLoss> {
        Ok(SampleLoss {
            value: cross_entropy(probs, sample.label),
            grad_logits: cross_entropy_logit_grad(probs, sample.label),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub mean_loss: f64,
    /// Accuracy on the training samples, measured before each step.
    pub accuracy: f64,
}

pub fn train(params: Mlp, samples: &[&Sample], config: &TrainConfig) -> Result<(Mlp, Vec<EpochStats>)> {
    train_with(params, samples, config, &mut CrossEntropy)
}

/// Mini-batch SGD over `samples` with a caller-supplied objective. The batch
/// gradient is the mean of per-sample gradients; the shuffle order is fixed
/// by `config.seed`.
pub fn train_with<O: Objective + ?Sized>(
    mut params: Mlp,
    samples: &[&Sample],
    config: &TrainConfig,
    objective: &mut O,
) -> Result<(Mlp, Vec<EpochStats>)> {
    config.validate()?;
    if samples.is_empty() {
        return Err(Error::Training("no training samples".into()));
    }
    let mut rng = seed::rng(config.seed);
    let mut opt = Sgd::new(config.learning_rate, config.momentum);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut stats = Vec::with_capacity(config.epochs);
    let mut grads = GradBundle::zeros_like(&params);

    for epoch in 0..config.epochs {
        objective.begin_epoch(epoch, &params)?;
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for batch in order.chunks(config.batch_size) {
            grads.scale(0.0);
            let mut batch_loss = 0.0;
            for &i in batch {
                let sample = samples[i];
                let act = params.activations(&sample.features)?;
                if argmax(&act.probs) == sample.label {
                    correct += 1;
                }
                let loss = objective.sample_loss(sample, &act.probs)?;
                batch_loss += loss.value;
                let g = params.backward_from_logits(&sample.features, &act, &loss.grad_logits);
                grads.add_scaled(&g, 1.0);
            }
            let n = batch.len() as f64;
            let mean = batch_loss / n;
            if !mean.is_finite() || mean.abs() > DIVERGENCE_LIMIT {
                return Err(Error::Divergence { epoch, loss: mean });
            }
            grads.scale(1.0 / n);
            opt.step(&mut params, &grads);
            if !params.is_finite() {
                return Err(Error::Divergence { epoch, loss: f64::NAN });
            }
            loss_sum += batch_loss;
        }
        objective.end_epoch(epoch, &params)?;
        stats.push(EpochStats {
            epoch,
            mean_loss: loss_sum / samples.len() as f64,
            accuracy: correct as f64 / samples.len() as f64,
        });
    }
    Ok((params, stats))
}

/// Accuracy of `params` on `samples` using argmax with lowest-index ties.
pub fn accuracy(params: &Mlp, samples: &[&Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(&params.forward(&s.features)?) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}
