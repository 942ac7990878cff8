//! Training loop, evaluation and metrics.

use std::fmt::Write as _;
use std::time::Instant;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Model, PointCloud};
use crate::data::{Dataset, Sample};
use crate::diagnostics::{invariance_error, pairwise_sum};
use crate::error::{Error, Result};
use crate::rotations::{cubic_group, Rotation};
use crate::tape::Adam;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    /// Seeds shuffling and rotation augmentation.
    pub seed: u64,
    /// Test clouds used for the per-epoch invariance measurement.
    pub invariance_clouds: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 60,
            lr: 1e-3,
            batch_size: 16,
            seed: 0,
            invariance_clouds: 4,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(Error::Config(format!("learning rate must be positive, got {}", self.lr)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    /// Mean training loss over the epoch's batches.
    pub loss: f64,
    pub train_accuracy: f64,
    pub test_accuracy: f64,
    /// Mean logit invariance error over the cubic group.
    pub invariance_error: f64,
    pub wall_ms: f64,
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

/// Fraction of samples whose largest logit is the label.
pub fn accuracy(model: &Model, samples: &[Sample]) -> Result<f64> {
    if samples.is_empty() {
        return Ok(f64::NAN);
    }
    let mut correct = 0usize;
    for s in samples {
        if argmax(model.logits(&s.cloud)?.as_slice()) == s.label {
            correct += 1;
        }
    }
    Ok(correct as f64 / samples.len() as f64)
}

/// Mean over `rotations` of the relative logit change when the cloud is
/// rotated.
pub fn logit_invariance(model: &Model, cloud: &PointCloud, rotations: &[Rotation]) -> Result<f64> {
    let base = model.logits(cloud)?;
    let errs = rotations
        .iter()
        .map(|r| {
            let z = model.logits(&cloud.rotate(r))?;
            Ok(invariance_error(base.as_slice(), z.as_slice()))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&errs) / errs.len().max(1) as f64)
}

/// Mean of [`logit_invariance`] over several clouds.
pub fn mean_logit_invariance(model: &Model, clouds: &[&PointCloud], rotations: &[Rotation]) -> Result<f64> {
    let v = clouds
        .iter()
        .map(|c| logit_invariance(model, c, rotations))
        .collect::<Result<Vec<_>>>()?;
    Ok(pairwise_sum(&v) / v.len().max(1) as f64)
}

/// Adam on mean softmax cross-entropy; train clouds get a fresh Haar
/// rotation every epoch when the dataset asks for augmentation.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<Vec<EpochMetrics>> {
    cfg.validate()?;
    if data.train.is_empty() {
        return Err(Error::InvalidInput("empty training split".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut adam = Adam::new(cfg.lr);
    let cubic = cubic_group().rotations();
    let probe: Vec<&PointCloud> = data
        .test
        .iter()
        .take(cfg.invariance_clouds)
        .map(|s| &s.cloud)
        .collect();
    let mut order: Vec<usize> = (0..data.train.len()).collect();
    let mut history = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        order.shuffle(&mut rng);
        let clouds: Vec<PointCloud> = order
            .iter()
            .map(|&i| {
                let c = &data.train[i].cloud;
                if data.augment_rotations {
                    c.rotate(&Rotation::random_haar(&mut rng))
                } else {
                    c.clone()
                }
            })
            .collect();
        let mut losses = Vec::new();
        let mut correct = 0usize;
        for (chunk, idx) in clouds.chunks(cfg.batch_size).zip(order.chunks(cfg.batch_size)) {
            let refs: Vec<&PointCloud> = chunk.iter().collect();
            let labels: Vec<usize> = idx.iter().map(|&i| data.train[i].label).collect();
            let (loss, grads, logits) = model.loss_and_gradients(&refs, &labels).map_err(|e| match e {
                Error::NonFinite(what) => Error::NonFinite(format!("{what} during epoch {epoch}")),
                other => other,
            })?;
            for (r, &y) in labels.iter().enumerate() {
                let row: Vec<f64> = logits.row(r).iter().copied().collect();
                if argmax(&row) == y {
                    correct += 1;
                }
            }
            losses.push(loss * labels.len() as f64);
            let mut params = model.weights_mut().params_mut();
            adam.step(&mut params, &grads)?;
        }
        let loss = pairwise_sum(&losses) / data.train.len() as f64;
        let train_accuracy = correct as f64 / data.train.len() as f64;
        let test_accuracy = accuracy(model, &data.test)?;
        let invariance_error = mean_logit_invariance(model, &probe, &cubic)?;
        history.push(EpochMetrics {
            epoch,
            loss,
            train_accuracy,
            test_accuracy,
            invariance_error,
            wall_ms: start.elapsed().as_secs_f64() * 1e3,
        });
    }
    Ok(history)
}

/// `epoch,split,accuracy,invariance_error,wall_ms,loss` with one train and
/// one test row per epoch (the loss column is empty on test rows).
pub fn metrics_csv(history: &[EpochMetrics]) -> String {
    let mut out = String::from("epoch,split,accuracy,invariance_error,wall_ms,loss\n");
    for m in history {
        let _ = writeln!(
            out,
            "{},train,{},{:e},{:.3},{}",
            m.epoch, m.train_accuracy, m.invariance_error, m.wall_ms, m.loss
        );
        let _ = writeln!(
            out,
            "{},test,{},{:e},{:.3},",
            m.epoch, m.test_accuracy, m.invariance_error, m.wall_ms
        );
    }
    out
}
