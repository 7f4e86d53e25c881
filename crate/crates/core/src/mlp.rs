//! Feed-forward network production model: dataset splitting, z-score
//! normalisation, mini-batch gradient descent with early stopping, evaluation.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::season::FeatureDataset;

#[derive(Debug, Error, PartialEq)]
pub enum ModelError {
    #[error("empty dataset")]
    EmptyDataset,
    #[error("empty input")]
    EmptyInput,
    #[error("expected {expected} features, got {actual}")]
    DimensionMismatch { expected: usize, actual: usize },
    #[error("length mismatch: {0} vs {1}")]
    LengthMismatch(usize, usize),
    #[error("invalid split spec: {0}")]
    InvalidSplit(String),
    #[error("invalid hyperparameters: {0}")]
    InvalidHyper(String),
    #[error("training diverged at epoch {epoch}: loss is not finite")]
    DivergenceDetected { epoch: usize },
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SplitSpec {
    pub train_frac: f64,
    pub val_frac: f64,
    pub test_frac: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train_frac: 0.7, val_frac: 0.15, test_frac: 0.15, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        for (name, f) in [("train", self.train_frac), ("val", self.val_frac), ("test", self.test_frac)] {
            if !(f > 0.0 && f < 1.0) {
                return Err(ModelError::InvalidSplit(format!("{name} fraction {f} is outside (0, 1)")));
            }
        }
        let sum = self.train_frac + self.val_frac + self.test_frac;
        if (sum - 1.0).abs() > 1e-12 {
            return Err(ModelError::InvalidSplit(format!("fractions sum to {sum}, not 1")));
        }
        Ok(())
    }

    /// Partition sizes `(train, val, test)`; train takes the rounding remainder.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let part = |f: f64| ((n as f64 * f + 1e-9).floor() as usize).min(n);
        let val = part(self.val_frac);
        let test = part(self.test_frac).min(n - val);
        (n - val - test, val, test)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SplitIndices {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

pub fn split_indices(n: usize, spec: &SplitSpec) -> Result<SplitIndices> {
    if n == 0 {
        return Err(ModelError::EmptyDataset);
    }
    spec.validate()?;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed));
    let (tr, va, _) = spec.sizes(n);
    Ok(SplitIndices { train: order[..tr].to_vec(), val: order[tr..tr + va].to_vec(), test: order[tr + va..].to_vec() })
}

pub fn split_dataset(ds: &FeatureDataset, spec: &SplitSpec) -> Result<(FeatureDataset, FeatureDataset, FeatureDataset)> {
    let s = split_indices(ds.len(), spec)?;
    Ok((ds.subset(&s.train), ds.subset(&s.val), ds.subset(&s.test)))
}

/// Training-set z-score statistics. Constant features are dropped; a
/// constant target denormalises every output to its value.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub input_names: Vec<String>,
    pub kept: Vec<usize>,
    pub dropped: Vec<String>,
    pub feature_mean: Vec<f64>,
    pub feature_std: Vec<f64>,
    pub target_mean: f64,
    pub target_std: f64,
}

fn mean_std(values: impl Iterator<Item = f64> + Clone) -> (f64, f64) {
    let n = values.clone().count() as f64;
    let mean = values.clone().sum::<f64>() / n;
    let var = values.map(|v| (v - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

impl NormStats {
    pub fn fit(ds: &FeatureDataset) -> Result<Self> {
        if ds.is_empty() {
            return Err(ModelError::EmptyDataset);
        }
        let mut s = NormStats {
            input_names: ds.feature_names.clone(),
            kept: Vec::new(),
            dropped: Vec::new(),
            feature_mean: Vec::new(),
            feature_std: Vec::new(),
            target_mean: 0.0,
            target_std: 1.0,
        };
        for j in 0..ds.n_features() {
            let (m, sd) = mean_std(ds.x.iter().map(|r| r[j]));
            if sd > 0.0 && sd.is_finite() {
                s.kept.push(j);
                s.feature_mean.push(m);
                s.feature_std.push(sd);
            } else {
                log::warn!("dropping constant feature {}", ds.feature_names[j]);
                s.dropped.push(ds.feature_names[j].clone());
            }
        }
        let (m, sd) = mean_std(ds.y.iter().copied());
        s.target_mean = m;
        s.target_std = sd;
        Ok(s)
    }

    pub fn n_inputs(&self) -> usize {
        self.input_names.len()
    }

    pub fn transform_row(&self, row: &[f64]) -> Result<Vec<f64>> {
        if row.len() != self.n_inputs() {
            return Err(ModelError::DimensionMismatch { expected: self.n_inputs(), actual: row.len() });
        }
        Ok(self.kept.iter().enumerate().map(|(k, &j)| (row[j] - self.feature_mean[k]) / self.feature_std[k]).collect())
    }

    /// Divisor for target z-scores; 1 for a constant target.
    pub fn target_scale(&self) -> f64 {
        if self.target_std > 0.0 {
            self.target_std
        } else {
            1.0
        }
    }

    pub fn normalize_target(&self, y: f64) -> f64 {
        (y - self.target_mean) / self.target_scale()
    }

    pub fn denormalize_target(&self, z: f64) -> f64 {
        z * self.target_std + self.target_mean
    }
}

/// Z-score `ds`, fitting statistics unless `stats` is given.
pub fn normalize(ds: &FeatureDataset, stats: Option<&NormStats>) -> Result<(FeatureDataset, NormStats)> {
    let stats = match stats {
        Some(s) => s.clone(),
        None => NormStats::fit(ds)?,
    };
    let x = ds.x.iter().map(|r| stats.transform_row(r)).collect::<Result<Vec<_>>>()?;
    let out = FeatureDataset {
        feature_names: stats.kept.iter().map(|&j| stats.input_names[j].clone()).collect(),
        x,
        y: ds.y.iter().map(|&y| stats.normalize_target(y)).collect(),
        pixel_index: ds.pixel_index.clone(),
    };
    Ok((out, stats))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Tanh,
}

impl Activation {
    fn apply(self, z: f64) -> f64 {
        match self {
            Activation::Relu => z.max(0.0),
            Activation::Tanh => z.tanh(),
        }
    }

    /// Derivative given pre-activation `z` and output `a`.
    fn derivative(self, z: f64, a: f64) -> f64 {
        match self {
            Activation::Relu => {
                if z > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Activation::Tanh => 1.0 - a * a,
        }
    }
}

/// Fully connected network with hidden activations and an identity output.
/// `weights[l]` is `layer_sizes[l+1] × layer_sizes[l]`, row-major.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Network {
    pub layer_sizes: Vec<usize>,
    pub activation: Activation,
    pub weights: Vec<Vec<f64>>,
    pub biases: Vec<Vec<f64>>,
}

impl Network {
    /// Glorot-uniform weights, zero biases.
    pub fn init(layer_sizes: &[usize], activation: Activation, rng: &mut impl Rng) -> Self {
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for w in layer_sizes.windows(2) {
            let (fan_in, fan_out) = (w[0], w[1]);
            let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
            weights.push((0..fan_in * fan_out).map(|_| rng.random_range(-limit..limit)).collect());
            biases.push(vec![0.0; fan_out]);
        }
        Self { layer_sizes: layer_sizes.to_vec(), activation, weights, biases }
    }

    pub fn zeros(layer_sizes: &[usize], activation: Activation) -> Self {
        Self {
            layer_sizes: layer_sizes.to_vec(),
            activation,
            weights: layer_sizes.windows(2).map(|w| vec![0.0; w[0] * w[1]]).collect(),
            biases: layer_sizes.windows(2).map(|w| vec![0.0; w[1]]).collect(),
        }
    }

    pub fn n_inputs(&self) -> usize {
        self.layer_sizes[0]
    }

    fn n_layers(&self) -> usize {
        self.weights.len()
    }

    /// Pre-activations and activations of every layer; `acts[0]` is the input.
    fn forward_trace(&self, x: &[f64]) -> (Vec<Vec<f64>>, Vec<Vec<f64>>) {
        let mut pre = Vec::with_capacity(self.n_layers());
        let mut acts = vec![x.to_vec()];
        for l in 0..self.n_layers() {
            let (n_in, n_out) = (self.layer_sizes[l], self.layer_sizes[l + 1]);
            let a = &acts[l];
            let z: Vec<f64> = (0..n_out)
                .map(|o| {
                    let w = &self.weights[l][o * n_in..(o + 1) * n_in];
                    self.biases[l][o] + w.iter().zip(a).map(|(w, a)| w * a).sum::<f64>()
                })
                .collect();
            let out = if l + 1 == self.n_layers() { z.clone() } else { z.iter().map(|&v| self.activation.apply(v)).collect() };
            pre.push(z);
            acts.push(out);
        }
        (pre, acts)
    }

    pub fn forward(&self, x: &[f64]) -> f64 {
        self.forward_trace(x).1.last().unwrap()[0]
    }

    pub fn n_params(&self) -> usize {
        self.weights.iter().map(Vec::len).sum::<usize>() + self.biases.iter().map(Vec::len).sum::<usize>()
    }

    /// Parameters flattened as `w0, b0, w1, b1, ...`.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for (w, b) in self.weights.iter().zip(&self.biases) {
            out.extend_from_slice(w);
            out.extend_from_slice(b);
        }
        out
    }

    pub fn set_params(&mut self, p: &[f64]) {
        assert_eq!(p.len(), self.n_params(), "parameter vector length");
        let mut k = 0;
        for (w, b) in self.weights.iter_mut().zip(self.biases.iter_mut()) {
            let (nw, nb) = (w.len(), b.len());
            w.copy_from_slice(&p[k..k + nw]);
            k += nw;
            b.copy_from_slice(&p[k..k + nb]);
            k += nb;
        }
    }

    /// Mean squared error over the batch.
    pub fn loss(&self, x: &[Vec<f64>], y: &[f64]) -> f64 {
        x.iter().zip(y).map(|(r, t)| (self.forward(r) - t).powi(2)).sum::<f64>() / x.len() as f64
    }

    /// Mean squared error and its gradient, flattened like [`Network::params`].
    pub fn loss_and_gradient(&self, x: &[Vec<f64>], y: &[f64]) -> (f64, Vec<f64>) {
        let n = x.len() as f64;
        let mut gw: Vec<Vec<f64>> = self.weights.iter().map(|w| vec![0.0; w.len()]).collect();
        let mut gb: Vec<Vec<f64>> = self.biases.iter().map(|b| vec![0.0; b.len()]).collect();
        let mut loss = 0.0;
        for (row, t) in x.iter().zip(y) {
            let (pre, acts) = self.forward_trace(row);
            let err = acts.last().unwrap()[0] - t;
            loss += err * err;
            let mut delta = vec![2.0 * err / n];
            for l in (0..self.n_layers()).rev() {
                let n_in = self.layer_sizes[l];
                let a_in = &acts[l];
                for (o, d) in delta.iter().enumerate() {
                    gb[l][o] += d;
                    for (g, a) in gw[l][o * n_in..(o + 1) * n_in].iter_mut().zip(a_in) {
                        *g += d * a;
                    }
                }
                if l > 0 {
                    delta = (0..n_in)
                        .map(|i| {
                            let back: f64 = delta.iter().enumerate().map(|(o, d)| d * self.weights[l][o * n_in + i]).sum();
                            back * self.activation.derivative(pre[l - 1][i], acts[l][i])
                        })
                        .collect();
                }
            }
        }
        let mut grad = Vec::with_capacity(self.n_params());
        for (w, b) in gw.iter().zip(&gb) {
            grad.extend_from_slice(w);
            grad.extend_from_slice(b);
        }
        (loss / n, grad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MlpHyper {
    pub hidden: Vec<usize>,
    pub activation: Activation,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub max_epochs: usize,
    pub patience: usize,
}

impl Default for MlpHyper {
    fn default() -> Self {
        Self { hidden: vec![32, 32], activation: Activation::Relu, learning_rate: 1e-3, batch_size: 32, max_epochs: 500, patience: 20 }
    }
}

impl MlpHyper {
    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(ModelError::InvalidHyper(format!("learning_rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 || self.max_epochs == 0 {
            return Err(ModelError::InvalidHyper("batch_size and max_epochs must be positive".into()));
        }
        if self.hidden.contains(&0) {
            return Err(ModelError::InvalidHyper("hidden layers must have at least one unit".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_rmse: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpModel {
    pub net: Network,
    pub norm: NormStats,
    pub hyper: MlpHyper,
    pub seed: u64,
    pub best_epoch: usize,
    pub training_log: Vec<EpochRecord>,
}

fn labelled(ds: &FeatureDataset) -> Result<()> {
    if let Some(i) = ds.y.iter().position(|y| !y.is_finite()) {
        return Err(ModelError::InvalidHyper(format!("row {i} has no finite target")));
    }
    Ok(())
}

/// Train on `train`, early-stopping on validation RMSE (z-scored units).
/// With an empty validation set the training loss is monitored instead.
pub fn train_mlp(train: &FeatureDataset, val: &FeatureDataset, hyper: &MlpHyper, seed: u64) -> Result<MlpModel> {
    if train.is_empty() {
        return Err(ModelError::EmptyDataset);
    }
    hyper.validate()?;
    labelled(train)?;
    labelled(val)?;
    let (tr, norm) = normalize(train, None)?;
    let (va, _) = normalize(val, Some(&norm))?;

    let mut sizes = vec![norm.kept.len()];
    sizes.extend(&hyper.hidden);
    sizes.push(1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut net = Network::init(&sizes, hyper.activation, &mut rng);

    let mut best = (f64::INFINITY, net.params(), 0usize);
    let mut since_best = 0;
    let mut log = Vec::new();
    let mut order: Vec<usize> = (0..tr.len()).collect();
    for epoch in 1..=hyper.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(hyper.batch_size) {
            let bx: Vec<Vec<f64>> = batch.iter().map(|&i| tr.x[i].clone()).collect();
            let by: Vec<f64> = batch.iter().map(|&i| tr.y[i]).collect();
            let (loss, grad) = net.loss_and_gradient(&bx, &by);
            if !loss.is_finite() {
                return Err(ModelError::DivergenceDetected { epoch });
            }
            let p: Vec<f64> = net.params().iter().zip(&grad).map(|(p, g)| p - hyper.learning_rate * g).collect();
            net.set_params(&p);
        }
        let train_loss = net.loss(&tr.x, &tr.y);
        let val_rmse = if va.is_empty() { train_loss.sqrt() } else { net.loss(&va.x, &va.y).sqrt() };
        if !train_loss.is_finite() || !val_rmse.is_finite() {
            return Err(ModelError::DivergenceDetected { epoch });
        }
        log.push(EpochRecord { epoch, train_loss, val_rmse });
        if val_rmse < best.0 {
            best = (val_rmse, net.params(), epoch);
            since_best = 0;
        } else {
            since_best += 1;
            if since_best >= hyper.patience {
                break;
            }
        }
    }
    net.set_params(&best.1);
    Ok(MlpModel { net, norm, hyper: hyper.clone(), seed, best_epoch: best.2, training_log: log })
}

/// Denormalised network output without the non-negativity clamp.
pub fn forward_denormalized(m: &MlpModel, x: &[f64]) -> Result<f64> {
    let z = m.norm.transform_row(x)?;
    Ok(m.norm.denormalize_target(m.net.forward(&z)))
}

/// Predicted production for one feature vector, clamped at zero.
pub fn predict_mlp(m: &MlpModel, x: &[f64]) -> Result<f64> {
    forward_denormalized(m, x).map(|v| v.max(0.0))
}

pub fn predict_batch(m: &MlpModel, x: &[Vec<f64>]) -> Result<Vec<f64>> {
    x.par_iter().map(|r| predict_mlp(m, r)).collect()
}

fn check_pair(pred: &[f64], actual: &[f64]) -> Result<()> {
    if pred.len() != actual.len() {
        return Err(ModelError::LengthMismatch(pred.len(), actual.len()));
    }
    if pred.is_empty() {
        return Err(ModelError::EmptyInput);
    }
    Ok(())
}

pub fn rmse(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    Ok((pred.iter().zip(actual).map(|(p, a)| (p - a).powi(2)).sum::<f64>() / pred.len() as f64).sqrt())
}

/// Coefficient of determination; 1 minus residual over total sum of squares.
pub fn r_squared(pred: &[f64], actual: &[f64]) -> Result<f64> {
    check_pair(pred, actual)?;
    let mean = actual.iter().sum::<f64>() / actual.len() as f64;
    let ss_res: f64 = pred.iter().zip(actual).map(|(p, a)| (a - p).powi(2)).sum();
    let ss_tot: f64 = actual.iter().map(|a| (a - mean).powi(2)).sum();
    Ok(if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else if ss_res == 0.0 { 1.0 } else { f64::NEG_INFINITY })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub n: usize,
    /// RMSE in tonnes per cell.
    pub rmse_t: f64,
    /// RMSE on z-scored targets.
    pub rmse_z: f64,
    pub r2: f64,
}

pub fn evaluate(m: &MlpModel, ds: &FeatureDataset) -> Result<Evaluation> {
    let pred = predict_batch(m, &ds.x)?;
    let rmse_t = rmse(&pred, &ds.y)?;
    Ok(Evaluation { n: ds.len(), rmse_t, rmse_z: rmse_t / m.norm.target_scale(), r2: r_squared(&pred, &ds.y)? })
}
