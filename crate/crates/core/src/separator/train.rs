use std::path::Path;

use ndarray::{Array1, Array2};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{example_loss, param_gradients, SeparatorConfig, SeparatorParams};
use crate::corpus::{Manifest, MixtureKind, Split};
use crate::error::{Error, Result};
use crate::signal::AudioClip;
use crate::spectral::{ideal_binary_mask, log_magnitude, pad_edges, stft, MaskSet, StftConfig};

const SCALE_FLOOR: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub plateau_patience: usize,
    pub lr_factor: f64,
    pub seed: u64,
}

impl TrainConfig {
    pub fn paper_scale() -> Self {
        Self {
            epochs: 300,
            batch_size: 128,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            plateau_patience: 3,
            lr_factor: 0.5,
            seed: 0,
        }
    }

    pub fn desk_scale() -> Self {
        Self {
            epochs: 50,
            batch_size: 8,
            ..Self::paper_scale()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.epochs > 0
            && self.batch_size > 0
            && self.learning_rate >= 0.0
            && self.learning_rate.is_finite()
            && (0.0..1.0).contains(&self.beta1)
            && (0.0..1.0).contains(&self.beta2)
            && self.epsilon > 0.0
            && self.lr_factor > 0.0
            && self.lr_factor <= 1.0;
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(format!("bad training config {self:?}")))
        }
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::desk_scale()
    }
}

/// ADAM with bias correction over a flat list of tensors.
#[derive(Clone, Debug)]
pub struct Adam {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(shapes: &[usize], beta1: f64, beta2: f64, epsilon: f64) -> Self {
        Self {
            beta1,
            beta2,
            epsilon,
            step: 0,
            m: shapes.iter().map(|&n| vec![0.0; n]).collect(),
            v: shapes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, params: Vec<&mut [f64]>, grads: Vec<&[f64]>, lr: f64) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, (p, g)) in params.into_iter().zip(grads).enumerate() {
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for j in 0..p.len() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                p[j] -= step;
            }
        }
    }
}

/// Network input and oracle target of one mixture.
#[derive(Clone, Debug)]
pub struct TrainingExample {
    pub mix_id: String,
    pub features: Array2<f64>,
    pub target: MaskSet,
}

/// Log-magnitude features of the edge-padded mixture and the ideal binary
/// mask of its equally padded sources.
pub fn prepare_example(mix_id: &str, mixture: &AudioClip, sources: &[AudioClip]) -> Result<TrainingExample> {
    let config = StftConfig::default();
    let spec = stft(&pad_edges(mixture, &config), &config)?;
    let source_specs = sources
        .iter()
        .map(|s| stft(&pad_edges(&s.fit_to(mixture.len()), &config), &config))
        .collect::<Result<Vec<_>>>()?;
    let target = ideal_binary_mask(&source_specs)?;
    if let Some(i) = target.masks.iter().position(|m| m.sum() == 0.0) {
        return Err(Error::EmptySpeakerMask(i));
    }
    Ok(TrainingExample {
        mix_id: mix_id.to_string(),
        features: log_magnitude(&spec),
        target,
    })
}

/// Loads one split of the manifest as training examples.
pub fn manifest_examples(
    manifest: &Manifest,
    root: &Path,
    split: Split,
    kind: MixtureKind,
) -> Result<Vec<TrainingExample>> {
    manifest
        .split(split)
        .map(|entry| {
            let ex = manifest.load_example(root, entry, kind)?;
            prepare_example(&ex.mix_id, &ex.mixture, &ex.sources)
        })
        .collect()
}

/// Per-bin mean and inverse standard deviation over all training frames.
pub fn feature_statistics(examples: &[TrainingExample]) -> Result<(Array1<f64>, Array1<f64>)> {
    let first = examples
        .first()
        .ok_or_else(|| Error::InvalidArgument("no training examples".into()))?;
    let bins = first.features.ncols();
    let mut sum = Array1::<f64>::zeros(bins);
    let mut sq = Array1::<f64>::zeros(bins);
    let mut frames = 0usize;
    for ex in examples {
        if ex.features.ncols() != bins {
            return Err(Error::ShapeMismatch(format!("{} vs {bins} bins", ex.features.ncols())));
        }
        for row in ex.features.rows() {
            sum += &row;
            sq += &row.mapv(|x| x * x);
            frames += 1;
        }
    }
    let mean = sum / frames as f64;
    let var = sq / frames as f64 - mean.mapv(|x| x * x);
    let scale = var.mapv(|v| 1.0 / v.max(0.0).sqrt().max(SCALE_FLOOR));
    Ok((mean, scale))
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub valid_loss: f64,
    pub lr: f64,
}

#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Parameters at the lowest validation loss.
    pub params: SeparatorParams,
    pub curve: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub best_valid_loss: f64,
}

fn mean_loss(examples: &[TrainingExample], params: &SeparatorParams, config: &SeparatorConfig) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += example_loss(ex.features.view(), &ex.target, params, config)?;
    }
    Ok(total / examples.len() as f64)
}

/// Minibatch ADAM with a plateau learning-rate schedule.
///
/// Parameters are initialized from `tconfig.seed`, so two runs with the same
/// seed start from identical weights regardless of data. Input
/// standardization is taken from the training set.
pub fn train(
    train_set: &[TrainingExample],
    valid_set: &[TrainingExample],
    tconfig: &TrainConfig,
    sconfig: &SeparatorConfig,
) -> Result<TrainOutcome> {
    tconfig.validate()?;
    sconfig.validate()?;
    if train_set.is_empty() || valid_set.is_empty() {
        return Err(Error::InvalidArgument(format!(
            "training needs non-empty train and validation splits ({} / {})",
            train_set.len(),
            valid_set.len()
        )));
    }
    let mut params = SeparatorParams::init(sconfig, tconfig.seed)?;
    let (mean, scale) = feature_statistics(train_set)?;
    params.input_mean = mean;
    params.input_scale = scale;

    let shapes: Vec<usize> = params.trainable().iter().map(|t| t.len()).collect();
    let mut adam = Adam::new(&shapes, tconfig.beta1, tconfig.beta2, tconfig.epsilon);
    let mut rng = ChaCha8Rng::seed_from_u64(tconfig.seed ^ 0x74_7261_696e);
    let mut order: Vec<usize> = (0..train_set.len()).collect();
    let mut lr = tconfig.learning_rate;
    let mut best = (params.clone(), 0usize, f64::INFINITY);
    let mut stale = 0usize;
    let mut curve = Vec::with_capacity(tconfig.epochs);

    for epoch in 1..=tconfig.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for chunk in order.chunks(tconfig.batch_size) {
            let batch: Vec<_> = chunk
                .iter()
                .map(|&i| (train_set[i].features.view(), &train_set[i].target))
                .collect();
            let (loss, grads) = match param_gradients(&batch, &params, sconfig) {
                Ok(v) => v,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            if !loss.is_finite() {
                return Err(Error::Diverged { epoch, loss });
            }
            epoch_loss += loss * chunk.len() as f64;
            adam.update(params.trainable_mut(), grads.trainable(), lr);
        }
        let train_loss = epoch_loss / train_set.len() as f64;
        let valid_loss = mean_loss(valid_set, &params, sconfig).map_err(|e| match e {
            Error::NonFinite(_) => Error::Diverged { epoch, loss: f64::NAN },
            other => other,
        })?;
        if !valid_loss.is_finite() || !params.is_finite() {
            return Err(Error::Diverged { epoch, loss: valid_loss });
        }
        log::info!("epoch {epoch}: train {train_loss:.5} valid {valid_loss:.5} lr {lr:e}");
        curve.push(EpochRecord {
            epoch,
            train_loss,
            valid_loss,
            lr,
        });
        if valid_loss < best.2 {
            best = (params.clone(), epoch, valid_loss);
            stale = 0;
        } else {
            stale += 1;
            if stale >= tconfig.plateau_patience {
                lr *= tconfig.lr_factor;
                stale = 0;
            }
        }
    }
    Ok(TrainOutcome {
        params: best.0,
        curve,
        best_epoch: best.1,
        best_valid_loss: best.2,
    })
}

/// Trains on the train split of one mixture kind, validating on the
/// validation split of the same kind.
pub fn train_from_manifest(
    manifest: &Manifest,
    root: &Path,
    kind: MixtureKind,
    tconfig: &TrainConfig,
    sconfig: &SeparatorConfig,
) -> Result<TrainOutcome> {
    let train_set = manifest_examples(manifest, root, Split::Train, kind)?;
    let valid_set = manifest_examples(manifest, root, Split::Validation, kind)?;
    train(&train_set, &valid_set, tconfig, sconfig)
}
