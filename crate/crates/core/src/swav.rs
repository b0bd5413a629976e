//! Swapped-prediction objective: Sinkhorn codes, multi-view cross-entropy,
//! view generation and the synthetic cluster dataset.

use rand::seq::index;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SwavConfig {
    pub tau: f64,
    pub epsilon: f64,
    pub n_sinkhorn_iters: usize,
    pub n_prototypes: usize,
    pub n_global_views: usize,
    pub n_local_views: usize,
    /// Std-dev of the Gaussian noise added to global views.
    pub view_noise: f64,
    /// Multiplier on `view_noise` for local views.
    pub local_noise_scale: f64,
    /// Fraction of coordinates a local view keeps.
    pub local_keep_ratio: f64,
}

impl Default for SwavConfig {
    fn default() -> Self {
        Self {
            tau: 0.1,
            epsilon: 0.03,
            n_sinkhorn_iters: 10,
            n_prototypes: 16,
            n_global_views: 2,
            n_local_views: 4,
            view_noise: 0.05,
            local_noise_scale: 2.0,
            local_keep_ratio: 0.6,
        }
    }
}

impl SwavConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::InvalidConfig(format!("tau must be > 0, got {}", self.tau)));
        }
        if !(self.epsilon > 0.0) {
            return Err(Error::InvalidConfig(format!("epsilon must be > 0, got {}", self.epsilon)));
        }
        if self.n_sinkhorn_iters == 0 {
            return Err(Error::InvalidConfig("sinkhorn_iters must be >= 1".into()));
        }
        if self.n_prototypes == 0 {
            return Err(Error::InvalidConfig("prototypes must be >= 1".into()));
        }
        if !(self.view_noise >= 0.0 && self.local_noise_scale >= 0.0) {
            return Err(Error::InvalidConfig("view noise must be >= 0".into()));
        }
        if !(self.local_keep_ratio > 0.0 && self.local_keep_ratio <= 1.0) {
            return Err(Error::InvalidConfig("local_keep_ratio must be in (0, 1]".into()));
        }
        Ok(())
    }

    pub fn n_views(&self) -> usize {
        self.n_global_views + self.n_local_views
    }
}

/// Transport plan `Q` (`K × B`): total mass 1, columns summing to `1/B`.
#[derive(Debug, Clone, PartialEq)]
pub struct CodeMatrix {
    pub q: Matrix,
}

impl CodeMatrix {
    /// Per-sample codes (`B × K`), each row a probability vector.
    pub fn per_sample(&self) -> Matrix {
        let b = self.q.cols() as f64;
        let mut t = self.q.transpose();
        for v in t.as_mut_slice() {
            *v *= b;
        }
        t
    }
}

/// Sinkhorn-Knopp on `scores` (`K × B`): exponentiate `scores/ε` after
/// subtracting the global max, then alternate row normalization to `1/K`
/// and column normalization to `1/B`, finishing on columns.
pub fn sinkhorn(scores: &Matrix, epsilon: f64, n_iters: usize) -> Result<CodeMatrix> {
    if !scores.all_finite() {
        return Err(Error::Numeric("non-finite scores passed to sinkhorn".into()));
    }
    if n_iters == 0 || !(epsilon > 0.0) {
        return Err(Error::InvalidConfig("sinkhorn needs epsilon > 0 and >= 1 iteration".into()));
    }
    let (k, b) = (scores.rows(), scores.cols());
    if k == 0 || b == 0 {
        return Err(Error::Shape("empty score matrix".into()));
    }
    let max = scores.as_slice().iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut q = scores.clone();
    for v in q.as_mut_slice() {
        *v = ((*v - max) / epsilon).exp();
    }
    let total: f64 = q.as_slice().iter().sum();
    for v in q.as_mut_slice() {
        *v /= total;
    }
    let (kf, bf) = (k as f64, b as f64);
    for _ in 0..n_iters {
        for r in 0..k {
            let row = q.row_mut(r);
            let s: f64 = row.iter().sum();
            if !(s > 0.0) {
                return Err(Error::Numeric(format!("prototype row {r} underflowed in sinkhorn")));
            }
            for v in row {
                *v /= s;
                *v /= kf;
            }
        }
        let sums = q.col_sums();
        if sums.iter().any(|s| !(*s > 0.0)) {
            return Err(Error::Numeric("sample column underflowed in sinkhorn".into()));
        }
        for r in 0..k {
            for (v, s) in q.row_mut(r).iter_mut().zip(&sums) {
                *v /= s;
                *v /= bf;
            }
        }
    }
    Ok(CodeMatrix { q })
}

/// Codes for one view: `scores` is `B × K`, result is `B × K` with unit row sums.
pub fn compute_codes(scores: &Matrix, cfg: &SwavConfig) -> Result<Matrix> {
    Ok(sinkhorn(&scores.transpose(), cfg.epsilon, cfg.n_sinkhorn_iters)?.per_sample())
}

#[derive(Debug, Clone, PartialEq)]
pub struct SwavLoss {
    /// Mean over all (prediction view, code view) pairs of the batch-mean ℓ.
    pub loss: f64,
    /// Sum of the per-pair terms, before pair averaging.
    pub total: f64,
    pub n_pairs: usize,
    /// Gradient of `loss` on each view's scores.
    pub score_grads: Vec<Matrix>,
}

fn log_softmax_row(row: &[f64], tau: f64, out: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max) / tau;
    let mut sum = 0.0;
    for &s in row {
        sum += (s / tau - max).exp();
    }
    let lse = max + sum.ln();
    for (o, &s) in out.iter_mut().zip(row) {
        *o = s / tau - lse;
    }
}

/// Swapped-prediction loss given per-view scores (`B × K`, global views
/// first). Codes come from the global views; every other view predicts them.
pub fn swav_loss(view_scores: &[Matrix], cfg: &SwavConfig) -> Result<SwavLoss> {
    check_views(view_scores, cfg)?;
    let codes = view_scores[..cfg.n_global_views]
        .iter()
        .map(|s| compute_codes(s, cfg))
        .collect::<Result<Vec<_>>>()?;
    swav_loss_with_codes(view_scores, &codes, cfg)
}

fn check_views(view_scores: &[Matrix], cfg: &SwavConfig) -> Result<()> {
    cfg.validate()?;
    if cfg.n_global_views < 2 {
        return Err(Error::InvalidConfig("swapped prediction needs >= 2 global views".into()));
    }
    if view_scores.len() != cfg.n_views() {
        return Err(Error::Shape(format!(
            "{} score matrices for {} views",
            view_scores.len(),
            cfg.n_views()
        )));
    }
    let (b, k) = (view_scores[0].rows(), view_scores[0].cols());
    if k != cfg.n_prototypes || view_scores.iter().any(|s| s.rows() != b || s.cols() != k) {
        return Err(Error::Shape("view score matrices disagree in shape".into()));
    }
    Ok(())
}

/// Loss and score gradients with the codes held fixed (no gradient flows
/// through them).
pub fn swav_loss_with_codes(view_scores: &[Matrix], codes: &[Matrix], cfg: &SwavConfig) -> Result<SwavLoss> {
    check_views(view_scores, cfg)?;
    if codes.len() != cfg.n_global_views {
        return Err(Error::Shape("one code matrix per global view required".into()));
    }
    let (b, k) = (view_scores[0].rows(), view_scores[0].cols());
    let n_views = cfg.n_views();
    let n_pairs = cfg.n_global_views * (n_views - 1);
    let weight = 1.0 / (b as f64 * n_pairs as f64);

    let mut total = 0.0;
    let mut grads = vec![Matrix::zeros(b, k); n_views];
    let mut logp = vec![0.0; k];
    for (v, scores) in view_scores.iter().enumerate() {
        for row in 0..b {
            log_softmax_row(scores.row(row), cfg.tau, &mut logp);
            for (g, q) in codes.iter().enumerate() {
                if g == v {
                    continue;
                }
                let q_row = q.row(row);
                let mut term = 0.0;
                let mut q_sum = 0.0;
                for (&qk, &lp) in q_row.iter().zip(&logp) {
                    term -= qk * lp;
                    q_sum += qk;
                }
                total += term / b as f64;
                let grow = grads[v].row_mut(row);
                for ((gk, &qk), &lp) in grow.iter_mut().zip(q_row).zip(&logp) {
                    *gk += weight * (q_sum * lp.exp() - qk) / cfg.tau;
                }
            }
        }
    }
    Ok(SwavLoss {
        loss: total / n_pairs as f64,
        total,
        n_pairs,
        score_grads: grads,
    })
}

/// Augmented views of one sample: global views add Gaussian noise, local
/// views keep a random subset of coordinates and add stronger noise.
pub fn make_views<R: Rng + ?Sized>(sample: &[f64], cfg: &SwavConfig, rng: &mut R) -> Result<Vec<Vec<f64>>> {
    if sample.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("non-finite sample".into()));
    }
    let dim = sample.len();
    let global = Normal::new(0.0, cfg.view_noise).map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let local = Normal::new(0.0, cfg.view_noise * cfg.local_noise_scale)
        .map_err(|e| Error::InvalidConfig(e.to_string()))?;
    let keep = ((cfg.local_keep_ratio * dim as f64).round() as usize).min(dim);
    let mut views = Vec::with_capacity(cfg.n_views());
    for _ in 0..cfg.n_global_views {
        views.push(sample.iter().map(|&x| x + global.sample(rng)).collect());
    }
    for _ in 0..cfg.n_local_views {
        let mut mask = vec![false; dim];
        for i in index::sample(rng, dim, keep) {
            mask[i] = true;
        }
        views.push(
            sample
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| if m { x } else { 0.0 } + local.sample(rng))
                .collect(),
        );
    }
    Ok(views)
}

/// Stacks the views of a batch into one matrix per view.
pub fn make_view_batch<R: Rng + ?Sized>(samples: &[&[f64]], cfg: &SwavConfig, rng: &mut R) -> Result<Vec<Matrix>> {
    let dim = samples.first().map_or(0, |s| s.len());
    let mut per_view: Vec<Vec<f64>> = vec![Vec::with_capacity(samples.len() * dim); cfg.n_views()];
    for s in samples {
        for (v, view) in make_views(s, cfg, rng)?.into_iter().enumerate() {
            per_view[v].extend(view);
        }
    }
    per_view
        .into_iter()
        .map(|data| Matrix::from_vec(samples.len(), dim, data))
        .collect()
}

/// Isotropic Gaussian clusters around unit-norm means.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub samples: Matrix,
    pub labels: Vec<usize>,
    pub means: Matrix,
}

pub fn synth_dataset<R: Rng + ?Sized>(
    n_clusters: usize,
    dim: usize,
    n_samples: usize,
    spread: f64,
    rng: &mut R,
) -> Result<SynthDataset> {
    if n_clusters < 2 {
        return Err(Error::InvalidConfig("need at least 2 clusters".into()));
    }
    if dim == 0 || !(spread >= 0.0) {
        return Err(Error::InvalidConfig("dim must be >= 1 and spread >= 0".into()));
    }
    let unit = Normal::new(0.0, 1.0).expect("unit normal");
    let mut means = Matrix::zeros(n_clusters, dim);
    for c in 0..n_clusters {
        let row = means.row_mut(c);
        for v in row.iter_mut() {
            *v = unit.sample(rng);
        }
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        for v in row.iter_mut() {
            *v /= n;
        }
    }
    let mut samples = Matrix::zeros(n_samples, dim);
    let mut labels = Vec::with_capacity(n_samples);
    for i in 0..n_samples {
        let c = rng.random_range(0..n_clusters);
        labels.push(c);
        for (v, &m) in samples.row_mut(i).iter_mut().zip(means.row(c)) {
            *v = m + spread * unit.sample(rng);
        }
    }
    Ok(SynthDataset {
        samples,
        labels,
        means,
    })
}
