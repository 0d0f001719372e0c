//! The local learner: logistic regression with an intercept, trained by
//! federated SGD on per-user mean gradients.

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("dimension mismatch: expected {expected}, got {got}")]
    DimensionMismatch { expected: usize, got: usize },
    #[error("dataset is empty")]
    EmptyDataset,
    #[error("no gradients to aggregate")]
    NoGradients,
    #[error("non-finite value in {0}")]
    NonFinite(&'static str),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

/// Logistic sigmoid, evaluated without overflow for large `|t|`.
pub fn expit(t: f64) -> f64 {
    if t >= 0.0 {
        1.0 / (1.0 + (-t).exp())
    } else {
        let e = t.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^t)`.
pub fn softplus(t: f64) -> f64 {
    t.max(0.0) + (-t.abs()).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

pub fn norm(v: &[f64]) -> f64 {
    dot(v, v).sqrt()
}

/// Equal-length feature rows stored contiguously, with binary labels.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    dim: usize,
    features: Vec<f64>,
    labels: Vec<bool>,
}

impl Dataset {
    pub fn new(dim: usize) -> Self {
        Self { dim, features: Vec::new(), labels: Vec::new() }
    }

    pub fn with_capacity(dim: usize, rows: usize) -> Self {
        Self { dim, features: Vec::with_capacity(dim * rows), labels: Vec::with_capacity(rows) }
    }

    pub fn push(&mut self, x: &[f64], y: bool) -> Result<()> {
        if x.len() != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: x.len() });
        }
        self.features.extend_from_slice(x);
        self.labels.push(y);
        Ok(())
    }

    /// Appends every row of `other`.
    pub fn extend(&mut self, other: &Dataset) -> Result<()> {
        if other.dim != self.dim {
            return Err(ModelError::DimensionMismatch { expected: self.dim, got: other.dim });
        }
        self.features.extend_from_slice(&other.features);
        self.labels.extend_from_slice(&other.labels);
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn x(&self, i: usize) -> &[f64] {
        &self.features[i * self.dim..(i + 1) * self.dim]
    }

    pub fn y(&self, i: usize) -> bool {
        self.labels[i]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&[f64], bool)> + '_ {
        self.features.chunks_exact(self.dim.max(1)).take(self.len()).zip(self.labels.iter().copied())
    }

    /// Column means of the features.
    pub fn feature_means(&self) -> Vec<f64> {
        let mut mean = vec![0.0; self.dim];
        for (x, _) in self.iter() {
            for (m, v) in mean.iter_mut().zip(x) {
                *m += v;
            }
        }
        let n = self.len().max(1) as f64;
        mean.iter_mut().for_each(|m| *m /= n);
        mean
    }
}

/// Weights of `h_theta(x) = expit(theta[0] + theta[1..] . x)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    theta: Vec<f64>,
}

impl ModelParams {
    pub fn zeros(feature_dim: usize) -> Self {
        Self { theta: vec![0.0; feature_dim + 1] }
    }

    /// `theta[0]` is the intercept.
    pub fn new(theta: Vec<f64>) -> Result<Self> {
        if theta.is_empty() {
            return Err(ModelError::DimensionMismatch { expected: 1, got: 0 });
        }
        if theta.iter().any(|t| !t.is_finite()) {
            return Err(ModelError::NonFinite("theta"));
        }
        Ok(Self { theta })
    }

    pub fn feature_dim(&self) -> usize {
        self.theta.len() - 1
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.theta
    }

    pub fn logit(&self, x: &[f64]) -> f64 {
        self.theta[0] + dot(&self.theta[1..], x)
    }

    fn check(&self, data: &Dataset) -> Result<()> {
        if data.dim() != self.feature_dim() {
            return Err(ModelError::DimensionMismatch { expected: self.feature_dim(), got: data.dim() });
        }
        if data.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        Ok(())
    }
}

/// Gradient clipping bound and Gaussian noise multiplier for uploads.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DpConfig {
    /// L2 bound on each uploaded gradient; `f64::INFINITY` disables clipping.
    pub clip_norm: f64,
    /// Noise standard deviation per coordinate, in units of `clip_norm`.
    pub noise_sigma: f64,
}

impl DpConfig {
    pub fn disabled() -> Self {
        Self { clip_norm: f64::INFINITY, noise_sigma: 0.0 }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.clip_norm > 0.0) {
            return Err(ModelError::InvalidConfig(format!("dp.clip_norm must be > 0, got {}", self.clip_norm)));
        }
        if !(self.noise_sigma >= 0.0) || !self.noise_sigma.is_finite() {
            return Err(ModelError::InvalidConfig(format!(
                "dp.noise_sigma must be finite and >= 0, got {}",
                self.noise_sigma
            )));
        }
        if self.noise_sigma > 0.0 && self.clip_norm.is_infinite() {
            return Err(ModelError::InvalidConfig("dp.noise_sigma > 0 requires a finite dp.clip_norm".into()));
        }
        Ok(())
    }
}

impl Default for DpConfig {
    fn default() -> Self {
        Self::disabled()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub eta: f64,
    /// Clients sampled per iteration.
    pub k: usize,
    pub max_iterations: usize,
    /// Uploads whose latency exceeds this are dropped.
    pub straggler_cutoff: f64,
    pub rounds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { eta: 0.5, k: 10, max_iterations: 25, straggler_cutoff: std::f64::consts::E, rounds: 20 }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0) || !self.eta.is_finite() {
            return Err(ModelError::InvalidConfig(format!("train.eta must be > 0, got {}", self.eta)));
        }
        if self.k == 0 {
            return Err(ModelError::InvalidConfig("train.k must be >= 1".into()));
        }
        if self.max_iterations == 0 {
            return Err(ModelError::InvalidConfig("train.max_iterations must be >= 1".into()));
        }
        if !(self.straggler_cutoff > 0.0) {
            return Err(ModelError::InvalidConfig(format!(
                "train.straggler_cutoff must be > 0, got {}",
                self.straggler_cutoff
            )));
        }
        if self.rounds == 0 {
            return Err(ModelError::InvalidConfig("train.rounds must be >= 1".into()));
        }
        Ok(())
    }
}

pub fn predict(theta: &ModelParams, x: &[f64]) -> Result<f64> {
    if x.len() != theta.feature_dim() {
        return Err(ModelError::DimensionMismatch { expected: theta.feature_dim(), got: x.len() });
    }
    Ok(expit(theta.logit(x)))
}

/// Mean binary cross-entropy over the dataset.
pub fn local_loss(theta: &ModelParams, data: &Dataset) -> Result<f64> {
    theta.check(data)?;
    let total: f64 = data
        .iter()
        .map(|(x, y)| {
            let l = theta.logit(x);
            softplus(l) - if y { l } else { 0.0 }
        })
        .sum();
    Ok(total / data.len() as f64)
}

/// Exact gradient of [`local_loss`].
pub fn local_gradient(theta: &ModelParams, data: &Dataset) -> Result<Vec<f64>> {
    theta.check(data)?;
    let mut g = vec![0.0; theta.theta.len()];
    for (x, y) in data.iter() {
        let resid = expit(theta.logit(x)) - if y { 1.0 } else { 0.0 };
        g[0] += resid;
        for (gj, xj) in g[1..].iter_mut().zip(x) {
            *gj += resid * xj;
        }
    }
    let n = data.len() as f64;
    g.iter_mut().for_each(|v| *v /= n);
    Ok(g)
}

/// Clips `g` to norm at most `clip_norm`, then adds N(0, (sigma * C)^2) noise
/// to every coordinate.
pub fn privatize<R: Rng + ?Sized>(g: &[f64], dp: &DpConfig, rng: &mut R) -> Vec<f64> {
    let n = norm(g);
    let scale = if dp.clip_norm.is_finite() && n > dp.clip_norm { dp.clip_norm / n } else { 1.0 };
    let mut out: Vec<f64> = g.iter().map(|v| v * scale).collect();
    if dp.noise_sigma > 0.0 {
        let sd = dp.noise_sigma * dp.clip_norm;
        for v in out.iter_mut() {
            let z: f64 = StandardNormal.sample(rng);
            *v += sd * z;
        }
    }
    out
}

/// Arithmetic mean, accumulated in input order.
pub fn aggregate(gradients: &[Vec<f64>]) -> Result<Vec<f64>> {
    let first = gradients.first().ok_or(ModelError::NoGradients)?;
    let mut sum = vec![0.0; first.len()];
    for g in gradients {
        if g.len() != sum.len() {
            return Err(ModelError::DimensionMismatch { expected: sum.len(), got: g.len() });
        }
        for (s, v) in sum.iter_mut().zip(g) {
            *s += v;
        }
    }
    let n = gradients.len() as f64;
    sum.iter_mut().for_each(|s| *s /= n);
    Ok(sum)
}

/// `theta - eta * g_bar`.
pub fn sgd_step(theta: &ModelParams, g_bar: &[f64], eta: f64) -> Result<ModelParams> {
    if g_bar.len() != theta.theta.len() {
        return Err(ModelError::DimensionMismatch { expected: theta.theta.len(), got: g_bar.len() });
    }
    if g_bar.iter().any(|v| !v.is_finite()) {
        return Err(ModelError::NonFinite("aggregated gradient"));
    }
    let theta = theta.theta.iter().zip(g_bar).map(|(t, g)| t - eta * g).collect();
    ModelParams::new(theta)
}

/// Fraction of rows where `predict >= 0.5` agrees with the label.
pub fn evaluate_accuracy(theta: &ModelParams, test: &Dataset) -> Result<f64> {
    theta.check(test)?;
    let correct = test.iter().filter(|(x, y)| (theta.logit(x) >= 0.0) == *y).count();
    Ok(correct as f64 / test.len() as f64)
}
