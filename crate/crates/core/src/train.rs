//! Scale-by-scale training.
//!
//! Scale `i` trains while scales `1..i` stay frozen: the lower scales only
//! supply the fused-feature store, and the loss is the softmax cross-entropy
//! of scale `i`'s own predictions.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::ScaleModel;
use crate::cloud::PointCloud;
use crate::error::{Error, Result};
use crate::fusion::FusedFeatureStore;
use crate::partition::PartitionSet;
use crate::pipeline::lower_scale_store;
use crate::tensor::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    /// Rescale each batch gradient to at most this L2 norm.
    pub max_grad_norm: Option<f64>,
    pub rng_seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 34,
            batch_size: 4,
            learning_rate: 0.05,
            momentum: 0.9,
            max_grad_norm: None,
            rng_seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::Config("epochs must be at least 1".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.learning_rate.is_finite() && self.learning_rate >= 0.0) {
            return Err(Error::Config("learning_rate must be finite and non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config("momentum must be in [0, 1)".into()));
        }
        if let Some(c) = self.max_grad_norm {
            if !(c.is_finite() && c > 0.0) {
                return Err(Error::Config("max_grad_norm must be positive".into()));
            }
        }
        Ok(())
    }
}

/// A labeled cloud together with its partition set.
#[derive(Debug, Clone)]
pub struct TrainingScene {
    pub cloud: PointCloud,
    pub parts: PartitionSet,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TrainReport {
    pub scale: usize,
    /// Mean per-scene loss of every epoch.
    pub epoch_losses: Vec<f64>,
}

/// Mean softmax cross-entropy and its gradient with respect to the logits.
pub fn softmax_cross_entropy(logits: &Matrix, labels: &[u16]) -> (f64, Matrix) {
    let n = logits.rows();
    let mut grad = Matrix::zeros(n, logits.cols());
    if n == 0 {
        return (0.0, grad);
    }
    let inv_n = 1.0 / n as f64;
    // Running mean: identical per-row losses average to exactly that value.
    let mut loss = 0.0;
    for r in 0..n {
        let row = logits.row(r);
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
        let log_z = max + sum.ln();
        let y = labels[r] as usize;
        loss += (log_z - row[y] - loss) / (r + 1) as f64;
        let g = grad.row_mut(r);
        for (c, gc) in g.iter_mut().enumerate() {
            let p = (row[c] - log_z).exp();
            *gc = (p - if c == y { 1.0 } else { 0.0 }) * inv_n;
        }
    }
    (loss, grad)
}

/// Train the model of `scale_id` (1-based) with every lower scale frozen.
///
/// The trained model is left unfrozen; call [`ScaleModel::freeze`] before
/// training the next scale.
pub fn train_scale(
    models: &mut [ScaleModel],
    scale_id: usize,
    scenes: &[TrainingScene],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scale_id == 0 || scale_id > models.len() {
        return Err(Error::Config(format!(
            "scale {scale_id} outside 1..={}",
            models.len()
        )));
    }
    if let Some(m) = models[..scale_id - 1].iter().find(|m| !m.is_frozen()) {
        return Err(Error::NotFrozen(m.scale_id));
    }
    let (lower, rest) = models.split_at_mut(scale_id - 1);
    let model = &mut rest[0];
    if model.is_frozen() {
        return Err(Error::Frozen(model.scale_id));
    }
    if scenes.iter().any(|s| s.cloud.labels().is_none()) {
        return Err(Error::MissingLabels);
    }

    // Lower scales are frozen, so their stores never change during training.
    let mut samples: Vec<(PointCloud, Option<FusedFeatureStore>)> = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let Some(idx) = scene.parts.partitions.get(scale_id - 1) else {
            return Err(Error::Config(format!("scene has no partition {scale_id}")));
        };
        let part = scene.cloud.gather(idx)?;
        if part.is_empty() {
            continue;
        }
        let store = if model.has_fusion() && !lower.is_empty() {
            Some(lower_scale_store(lower, &scene.cloud, &scene.parts, true)?)
        } else {
            None
        };
        samples.push((part, store));
    }
    fit(model, &samples, cfg)
}

/// Train a whole-cloud model on the union of partitions `1..=upto_scale`.
pub fn train_baseline(
    model: &mut ScaleModel,
    scenes: &[TrainingScene],
    upto_scale: usize,
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    cfg.validate()?;
    if scenes.iter().any(|s| s.cloud.labels().is_none()) {
        return Err(Error::MissingLabels);
    }
    let mut samples = Vec::with_capacity(scenes.len());
    for scene in scenes {
        let part = scene.cloud.gather(&scene.parts.union_upto(upto_scale))?;
        if !part.is_empty() {
            samples.push((part, None));
        }
    }
    fit(model, &samples, cfg)
}

fn fit(
    model: &mut ScaleModel,
    samples: &[(PointCloud, Option<FusedFeatureStore>)],
    cfg: &TrainConfig,
) -> Result<TrainReport> {
    if model.is_frozen() {
        return Err(Error::Frozen(model.scale_id));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.rng_seed ^ model.scale_id as u64);
    let num_params = model.net.num_params();
    let mut velocity = vec![0.0; num_params];
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);

    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut grad = vec![0.0; num_params];
            for &s in batch {
                let (part, store) = &samples[s];
                let labels = part.labels().ok_or(Error::MissingLabels)?;
                let fwd = model.forward(part, store.as_ref(), true)?;
                let (loss, d_logits) = softmax_cross_entropy(&fwd.prediction().logits, labels);
                epoch_loss += loss;
                let g = model
                    .backward(&fwd, &d_logits)?
                    .ok_or(Error::Frozen(model.scale_id))?;
                for (a, b) in grad.iter_mut().zip(g.flat_params()) {
                    *a += b;
                }
            }
            let inv = batch_scale(&grad, batch.len(), cfg.max_grad_norm);
            let step: Vec<f64> = velocity
                .iter_mut()
                .zip(&grad)
                .map(|(v, g)| {
                    *v = cfg.momentum * *v + g * inv;
                    cfg.learning_rate * *v
                })
                .collect();
            model.apply_update(&step)?;
        }
        if !model.net.is_finite() {
            return Err(Error::Invariant("training diverged to non-finite weights".into()));
        }
        epoch_losses.push(epoch_loss / samples.len().max(1) as f64);
    }
    Ok(TrainReport {
        scale: model.scale_id,
        epoch_losses,
    })
}

/// Factor turning a summed batch gradient into the (optionally clipped) mean.
fn batch_scale(grad: &[f64], batch_len: usize, max_norm: Option<f64>) -> f64 {
    let inv = 1.0 / batch_len as f64;
    match max_norm {
        Some(max) => {
            let norm = inv * grad.iter().map(|g| g * g).sum::<f64>().sqrt();
            if norm > max {
                inv * max / norm
            } else {
                inv
            }
        }
        None => inv,
    }
}
