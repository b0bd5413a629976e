//! Linear probe: multinomial logistic regression trained with SGD on frozen
//! features, with a step-decayed learning rate.

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::engine::{embed, LayeredNet};
use crate::error::{Error, Result};
use crate::optim::sgd_step;
use crate::rng::{self, streams};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Epochs after which the learning rate is multiplied by `gamma`.
    pub step_milestones: Vec<usize>,
    pub gamma: f64,
    pub batch_size: usize,
    /// Fraction of samples used for training; the rest is held out.
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 28,
            lr: 0.01,
            weight_decay: 5e-4,
            momentum: 0.9,
            step_milestones: vec![8, 16, 24],
            gamma: 0.1,
            batch_size: 32,
            train_fraction: 0.8,
            seed: 0,
        }
    }
}

impl ProbeConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 || self.batch_size == 0 {
            return Err(Error::InvalidConfig("epochs and batch_size must be >= 1".into()));
        }
        if !(self.lr > 0.0) || !(self.weight_decay >= 0.0) || !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidConfig("probe needs lr > 0, weight_decay >= 0, momentum in [0, 1)".into()));
        }
        if !(self.gamma > 0.0) || !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return Err(Error::InvalidConfig("probe needs gamma > 0 and train_fraction in (0, 1)".into()));
        }
        let m = &self.step_milestones;
        if m.windows(2).any(|w| w[0] > w[1]) || m.iter().any(|&e| e == 0 || e > self.epochs) {
            return Err(Error::InvalidConfig(format!(
                "milestones {m:?} must be sorted within [1, {}]",
                self.epochs
            )));
        }
        Ok(())
    }

    pub fn lr_at(&self, epoch: usize) -> f64 {
        let passed = self.step_milestones.iter().filter(|&&m| epoch >= m).count();
        self.lr * self.gamma.powi(passed as i32)
    }
}

/// Unit-norm embeddings of the frozen trunk, one row per sample.
pub fn extract_features(net: &LayeredNet, samples: &Matrix) -> Result<Matrix> {
    embed(net, samples)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearClassifier {
    /// `dim × n_classes`.
    pub weight: Matrix,
    pub bias: Vec<f64>,
}

impl LinearClassifier {
    pub fn logits(&self, x: &Matrix) -> Result<Matrix> {
        let mut out = x.matmul(&self.weight)?;
        for r in 0..out.rows() {
            for (v, b) in out.row_mut(r).iter_mut().zip(&self.bias) {
                *v += b;
            }
        }
        Ok(out)
    }

    pub fn predict(&self, x: &Matrix) -> Result<Vec<usize>> {
        let logits = self.logits(x)?;
        Ok((0..logits.rows())
            .map(|r| {
                let row = logits.row(r);
                (0..row.len()).fold(0, |best, c| if row[c] > row[best] { c } else { best })
            })
            .collect())
    }

    /// Mean cross-entropy plus its gradients with respect to weight and bias.
    fn loss_and_grad(&self, x: &Matrix, labels: &[usize]) -> Result<(f64, Matrix, Vec<f64>)> {
        let logits = self.logits(x)?;
        let n = x.rows() as f64;
        let mut d = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = logits.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - max).exp()).sum();
            loss += max + sum.ln() - row[y];
            let dr = d.row_mut(r);
            for c in 0..row.len() {
                dr[c] = ((row[c] - max).exp() / sum - if c == y { 1.0 } else { 0.0 }) / n;
            }
        }
        Ok((loss / n, x.t_matmul(&d)?, d.col_sums()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub top1: f64,
    pub n_train: usize,
    pub n_test: usize,
    /// Full training-split loss after each epoch.
    pub epoch_losses: Vec<f64>,
    #[serde(skip)]
    pub classifier: Option<LinearClassifier>,
}

fn gather(x: &Matrix, labels: &[usize], idx: &[usize]) -> (Matrix, Vec<usize>) {
    let mut data = Vec::with_capacity(idx.len() * x.cols());
    for &i in idx {
        data.extend_from_slice(x.row(i));
    }
    (
        Matrix::from_vec(idx.len(), x.cols(), data).expect("row count matches"),
        idx.iter().map(|&i| labels[i]).collect(),
    )
}

/// Trains on a seeded split of `features` and reports held-out top-1.
pub fn train_probe(features: &Matrix, labels: &[usize], cfg: &ProbeConfig) -> Result<ProbeReport> {
    cfg.validate()?;
    if labels.len() != features.rows() {
        return Err(Error::Shape(format!("{} labels for {} samples", labels.len(), features.rows())));
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut distinct = labels.to_vec();
    distinct.sort_unstable();
    distinct.dedup();
    if distinct.len() < 2 {
        return Err(Error::InvalidArgument("probe needs at least two classes".into()));
    }
    let n = features.rows();
    let n_train = ((cfg.train_fraction * n as f64).round() as usize).clamp(1, n - 1);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng::stream(cfg.seed, &[streams::PROBE]));
    let (train_x, train_y) = gather(features, labels, &order[..n_train]);
    let (test_x, test_y) = gather(features, labels, &order[n_train..]);

    let dim = features.cols();
    let mut clf = LinearClassifier {
        weight: Matrix::zeros(dim, n_classes),
        bias: vec![0.0; n_classes],
    };
    let mut vw = vec![0.0; dim * n_classes];
    let mut vb = vec![0.0; n_classes];
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    let mut idx: Vec<usize> = (0..n_train).collect();
    for epoch in 0..cfg.epochs {
        let lr = cfg.lr_at(epoch);
        idx.shuffle(&mut rng::stream(cfg.seed, &[streams::PROBE, 1 + epoch as u64]));
        for chunk in idx.chunks(cfg.batch_size) {
            let (bx, by) = gather(&train_x, &train_y, chunk);
            let (_, gw, gb) = clf.loss_and_grad(&bx, &by)?;
            sgd_step(clf.weight.as_mut_slice(), gw.as_slice(), &mut vw, lr, cfg.weight_decay, cfg.momentum)?;
            sgd_step(&mut clf.bias, &gb, &mut vb, lr, 0.0, cfg.momentum)?;
        }
        let (loss, _, _) = clf.loss_and_grad(&train_x, &train_y)?;
        if !loss.is_finite() {
            return Err(Error::Numeric(format!("probe loss {loss} at epoch {epoch}")));
        }
        epoch_losses.push(loss);
    }
    let pred = clf.predict(&test_x)?;
    let correct = pred.iter().zip(&test_y).filter(|(p, y)| p == y).count();
    Ok(ProbeReport {
        top1: correct as f64 / test_y.len() as f64,
        n_train,
        n_test: test_y.len(),
        epoch_losses,
        classifier: Some(clf),
    })
}
