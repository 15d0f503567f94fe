//! Datasets, minibatch SGD with momentum, and top-1 evaluation.

use std::collections::HashMap;
use std::path::Path;

use rand::seq::SliceRandom;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::Matrix;
use crate::network::{backward, forward_trace, ResidualNet};
use crate::rng;

/// Labelled samples. Labels are dense class indices.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Matrix,
    pub y: Vec<usize>,
    pub num_classes: usize,
    /// Original label strings, indexed by class, when loaded from CSV.
    pub label_names: Option<Vec<String>>,
}

impl Dataset {
    pub fn new(x: Matrix, y: Vec<usize>, num_classes: usize) -> Result<Self> {
        if x.rows() != y.len() {
            return Err(Error::InvalidData(format!(
                "{} samples but {} labels",
                x.rows(),
                y.len()
            )));
        }
        if let Some(&bad) = y.iter().find(|&&c| c >= num_classes) {
            return Err(Error::InvalidData(format!(
                "label {bad} out of range for {num_classes} classes"
            )));
        }
        Ok(Self {
            x,
            y,
            num_classes,
            label_names: None,
        })
    }

    pub fn len(&self) -> usize {
        self.y.len()
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.x.cols()
    }

    pub fn subset(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select_rows(idx),
            y: idx.iter().map(|&i| self.y[i]).collect(),
            num_classes: self.num_classes,
            label_names: self.label_names.clone(),
        }
    }

    pub fn class_counts(&self) -> Vec<usize> {
        let mut c = vec![0; self.num_classes];
        for &l in &self.y {
            c[l] += 1;
        }
        c
    }
}

/// Disjoint train and test partitions of one dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SplitData {
    pub train: Dataset,
    pub test: Dataset,
}

/// Splits per class in storage order: the first `round((1 − test_fraction)·m)`
/// samples of each class train, the rest test.
pub fn stratified_split(data: &Dataset, test_fraction: f64) -> Result<SplitData> {
    if !(0.0..1.0).contains(&test_fraction) {
        return Err(Error::InvalidData(format!(
            "test fraction {test_fraction} outside [0, 1)"
        )));
    }
    let mut by_class: Vec<Vec<usize>> = vec![Vec::new(); data.num_classes];
    for (i, &c) in data.y.iter().enumerate() {
        by_class[c].push(i);
    }
    let mut is_test = vec![false; data.len()];
    for members in &by_class {
        let keep = ((1.0 - test_fraction) * members.len() as f64).round() as usize;
        for &i in &members[keep..] {
            is_test[i] = true;
        }
    }
    let (test, train): (Vec<usize>, Vec<usize>) = (0..data.len()).partition(|&i| is_test[i]);
    Ok(SplitData {
        train: data.subset(&train),
        test: data.subset(&test),
    })
}

/// Gaussian mixture: one mean per class drawn uniformly on the unit sphere,
/// isotropic noise of standard deviation `spread`, classes assigned
/// round-robin, then an 80/20 stratified split.
pub fn synth_dataset(n: usize, d: usize, classes: usize, spread: f64, seed: u64) -> Result<SplitData> {
    if classes < 2 || n < classes || d == 0 {
        return Err(Error::InvalidData(format!(
            "synth needs classes >= 2, n >= classes, d >= 1 (got n={n}, d={d}, classes={classes})"
        )));
    }
    if !(spread.is_finite() && spread >= 0.0) {
        return Err(Error::InvalidData(format!("spread must be >= 0, got {spread}")));
    }
    let mut r = rng::stream(seed, rng::tags::DATA);
    let mut means = Vec::with_capacity(classes);
    while means.len() < classes {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut r)).collect();
        let norm = v.iter().map(|a| a * a).sum::<f64>().sqrt();
        if norm > 1e-12 {
            means.push(v.into_iter().map(|a| a / norm).collect::<Vec<f64>>());
        }
    }
    let y: Vec<usize> = (0..n).map(|i| i % classes).collect();
    let mut data = Vec::with_capacity(n * d);
    for &c in &y {
        for m in &means[c] {
            let noise: f64 = StandardNormal.sample(&mut r);
            data.push(m + spread * noise);
        }
    }
    let full = Dataset::new(Matrix::new(n, d, data)?, y, classes)?;
    stratified_split(&full, 0.2)
}

/// Reads a headed CSV. Every column except `label_column` must be numeric.
/// Labels are mapped to `0..C` in first-seen order; the mapping is kept in
/// [`Dataset::label_names`].
pub fn load_csv(path: impl AsRef<Path>, label_column: &str) -> Result<Dataset> {
    let path = path.as_ref();
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| Error::Csv {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?;
    let headers = rdr
        .headers()
        .map_err(|e| Error::Csv {
            path: path.into(),
            line: 1,
            msg: e.to_string(),
        })?
        .clone();
    if headers.is_empty() {
        return Err(Error::EmptyCsv(path.into()));
    }
    let label_idx = headers
        .iter()
        .position(|h| h.trim() == label_column)
        .ok_or_else(|| Error::MissingColumn {
            path: path.into(),
            column: label_column.to_string(),
        })?;
    let d = headers.len() - 1;
    let mut data = Vec::new();
    let mut labels = Vec::new();
    let mut names: Vec<String> = Vec::new();
    let mut index: HashMap<String, usize> = HashMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| Error::Csv {
            path: path.into(),
            line: e.position().map_or(0, |p| p.line()),
            msg: e.to_string(),
        })?;
        let line = rec.position().map_or(0, |p| p.line());
        for (j, cell) in rec.iter().enumerate() {
            if j == label_idx {
                let key = cell.trim().to_string();
                let next = names.len();
                let c = *index.entry(key.clone()).or_insert_with(|| {
                    names.push(key);
                    next
                });
                labels.push(c);
            } else {
                let v: f64 = cell.trim().parse().map_err(|_| Error::Csv {
                    path: path.into(),
                    line,
                    msg: format!("column {:?}: non-numeric value {cell:?}", &headers[j]),
                })?;
                if !v.is_finite() {
                    return Err(Error::Csv {
                        path: path.into(),
                        line,
                        msg: format!("column {:?}: non-finite value {cell:?}", &headers[j]),
                    });
                }
                data.push(v);
            }
        }
    }
    if labels.is_empty() {
        return Err(Error::EmptyCsv(path.into()));
    }
    let n = labels.len();
    let num_classes = names.len();
    let mut ds = Dataset::new(Matrix::new(n, d, data)?, labels, num_classes)?;
    ds.label_names = Some(names);
    Ok(ds)
}

/// SGD hyperparameters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    #[serde(default)]
    pub momentum: f64,
    #[serde(default)]
    pub weight_decay: f64,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "yes")]
    pub shuffle: bool,
    /// Standard deviation of additive Gaussian input noise; 0 disables it.
    #[serde(default)]
    pub jitter: f64,
}

fn yes() -> bool {
    true
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 30,
            batch_size: 64,
            learning_rate: 0.05,
            momentum: 0.9,
            weight_decay: 1e-4,
            seed: 0,
            shuffle: true,
            jitter: 0.0,
        }
    }
}

impl TrainConfig {
    /// Fine-tuning default derived from a training config: 10 epochs at a
    /// tenth of the training rate.
    pub fn finetune_default(train: &TrainConfig) -> TrainConfig {
        TrainConfig {
            epochs: 10,
            learning_rate: train.learning_rate * 0.1,
            ..train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be >= 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate > 0.0) {
            return Err(Error::Config("learning_rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must lie in [0, 1)".into()));
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            return Err(Error::Config("weight_decay must be >= 0".into()));
        }
        if !(self.jitter.is_finite() && self.jitter >= 0.0) {
            return Err(Error::Config("jitter must be >= 0".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainHistory {
    pub train_loss: Vec<f64>,
    pub train_accuracy: Vec<f64>,
    pub test_accuracy: Vec<f64>,
}

/// Mean softmax cross-entropy over the batch and its gradient w.r.t. the
/// logits.
pub fn softmax_cross_entropy(logits: &Matrix, y: &[usize]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    let mut loss = 0.0;
    for i in 0..n {
        let row = logits.row(i);
        let max = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
        let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        loss += log_z - row[y[i]];
        let g = grad.row_mut(i);
        for (gj, &v) in g.iter_mut().zip(row) {
            *gj = (v - log_z).exp() / n as f64;
        }
        g[y[i]] -= 1.0 / n as f64;
    }
    (loss / n as f64, grad)
}

/// Index of the row maximum; ties go to the lowest index.
pub fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (j, &v) in row.iter().enumerate().skip(1) {
        if v > row[best] {
            best = j;
        }
    }
    best
}

/// Top-1 accuracy of `logits` against `y`.
pub fn accuracy_of_logits(logits: &Matrix, y: &[usize]) -> f64 {
    let hits = (0..logits.rows())
        .filter(|&i| argmax(logits.row(i)) == y[i])
        .count();
    hits as f64 / y.len() as f64
}

/// Top-1 accuracy of `net` on `data`.
pub fn evaluate(net: &ResidualNet, data: &Dataset) -> Result<f64> {
    if data.is_empty() {
        return Err(Error::EmptyData);
    }
    Ok(accuracy_of_logits(&net.forward(&data.x)?, &data.y))
}

/// Trains `net` by minibatch SGD with momentum on softmax cross-entropy.
///
/// The batch order is fixed by `cfg.seed`, so the result is reproducible bit
/// for bit.
pub fn train(net: &ResidualNet, data: &SplitData, cfg: &TrainConfig) -> Result<(ResidualNet, TrainHistory)> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::EmptyData);
    }
    if data.train.dim() != net.input_dim() {
        return Err(Error::Shape {
            op: "train",
            left: data.train.x.shape(),
            right: (data.train.len(), net.input_dim()),
        });
    }
    let mut net = net.clone();
    let mut history = TrainHistory::default();
    if cfg.epochs == 0 {
        return Ok((net, history));
    }
    let mut velocity = net.zeros_like();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut shuffle_rng = rng::stream(cfg.seed, rng::tags::SHUFFLE);
    let mut jitter_rng = rng::stream(cfg.seed, rng::tags::JITTER);

    for epoch in 0..cfg.epochs {
        if cfg.shuffle {
            order.shuffle(&mut shuffle_rng);
        }
        let mut loss_sum = 0.0;
        let mut hits = 0usize;
        for (b, batch) in order.chunks(cfg.batch_size).enumerate() {
            let mut x = data.train.x.select_rows(batch);
            if cfg.jitter > 0.0 {
                for v in x.data_mut() {
                    let z: f64 = StandardNormal.sample(&mut jitter_rng);
                    *v += cfg.jitter * z;
                }
            }
            let y: Vec<usize> = batch.iter().map(|&i| data.train.y[i]).collect();
            let trace = forward_trace(&net, &x)?;
            let (loss, d_logits) = softmax_cross_entropy(trace.logits(), &y);
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, batch: b, loss });
            }
            loss_sum += loss * batch.len() as f64;
            hits += (0..y.len())
                .filter(|&i| argmax(trace.logits().row(i)) == y[i])
                .count();
            let (grad, _) = backward(&net, &trace, &d_logits)?;
            sgd_step(&mut net, &mut velocity, &grad, cfg);
        }
        let n = data.train.len() as f64;
        history.train_loss.push(loss_sum / n);
        history.train_accuracy.push(hits as f64 / n);
        history.test_accuracy.push(if data.test.is_empty() {
            f64::NAN
        } else {
            evaluate(&net, &data.test)?
        });
    }
    Ok((net, history))
}

fn sgd_step(net: &mut ResidualNet, velocity: &mut ResidualNet, grad: &ResidualNet, cfg: &TrainConfig) {
    let grads = grad.tensors();
    for ((w, v), g) in net.tensors_mut().into_iter().zip(velocity.tensors_mut()).zip(grads) {
        for ((wi, vi), gi) in w.iter_mut().zip(v.iter_mut()).zip(g) {
            *vi = cfg.momentum * *vi + gi + cfg.weight_decay * *wi;
            *wi -= cfg.learning_rate * *vi;
        }
    }
}

/// Short supervised recovery after a removal; same machinery as [`train`].
pub fn finetune(net: &ResidualNet, data: &SplitData, cfg: &TrainConfig) -> Result<ResidualNet> {
    train(net, data, cfg).map(|(n, _)| n)
}
