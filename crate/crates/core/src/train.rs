//! Supervised training of the source classifier on clean data.

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::LabeledImages;
use crate::error::{Error, Result};
use crate::image::ImageTensor;
use crate::masking::{mask_image, Band, MaskPolicy};
use crate::model::{Classifier, Trainable};
use crate::objectives::cross_entropy_rows;
use crate::optim::{AdamConfig, AdamState};
use crate::tensor::{Tape, Tensor};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    /// Minimum clean accuracy (held-out when available, otherwise train).
    pub threshold: f64,
    /// Probability that a training image is replaced by a randomly masked
    /// copy, so that masked views are in-distribution for the source model.
    pub mask_augment: f64,
    /// Masking levels drawn uniformly for augmented images.
    pub mask_levels: Vec<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            epochs: 6,
            lr: 1e-3,
            batch: 50,
            seed: 0,
            threshold: 0.95,
            mask_augment: 0.5,
            mask_levels: vec![0.1, 0.2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainReport {
    /// Mean training loss per epoch.
    pub loss_curve: Vec<f64>,
    pub train_accuracy: f64,
    pub heldout_accuracy: Option<f64>,
}

/// Fraction of correctly classified images, evaluated in chunks.
pub fn accuracy(model: &Classifier, data: &LabeledImages) -> Result<f64> {
    if data.is_empty() {
        return Ok(0.0);
    }
    let mut correct = 0;
    for start in (0..data.len()).step_by(200) {
        let idx: Vec<usize> = (start..(start + 200).min(data.len())).collect();
        let pred = model.predict(&data.images.select(&idx))?;
        correct += idx.iter().zip(pred).filter(|(i, p)| data.labels[**i] == *p).count();
    }
    Ok(correct as f64 / data.len() as f64)
}

const AUGMENT_POLICIES: [MaskPolicy; 5] = [
    MaskPolicy::Patch { side: None },
    MaskPolicy::Pixel,
    MaskPolicy::Frequency {
        band: Band::All,
        symmetric: false,
    },
    MaskPolicy::Frequency {
        band: Band::Low,
        symmetric: false,
    },
    MaskPolicy::Frequency {
        band: Band::High,
        symmetric: false,
    },
];

fn augment(images: &mut ImageTensor, cfg: &PretrainConfig, rng: &mut ChaCha8Rng) -> Result<()> {
    if cfg.mask_augment <= 0.0 || cfg.mask_levels.is_empty() {
        return Ok(());
    }
    let (h, w) = (images.height(), images.width());
    for img in 0..images.batch() {
        if rng.gen::<f64>() >= cfg.mask_augment {
            continue;
        }
        let policy = AUGMENT_POLICIES[rng.gen_range(0..AUGMENT_POLICIES.len())];
        let level = cfg.mask_levels[rng.gen_range(0..cfg.mask_levels.len())];
        if policy.check_level(level, h, w).is_ok() {
            mask_image(images.image_mut(img), h, w, level, &policy, rng)?;
        }
    }
    Ok(())
}

/// Trains every parameter with cross-entropy and Adam, then checks the
/// accuracy threshold.
pub fn pretrain_source(
    model: &mut Classifier,
    train: &LabeledImages,
    heldout: Option<&LabeledImages>,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    if cfg.batch == 0 || train.is_empty() {
        return Err(Error::Parameter {
            name: "pretrain",
            detail: "needs a positive batch and a non-empty training split".into(),
        });
    }
    let classes = model.config().classes;
    let mut opt = AdamState::new(
        model,
        Trainable::All,
        AdamConfig {
            lr: cfg.lr,
            ..AdamConfig::default()
        },
    );
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut curve = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut total = 0.0;
        let mut batches = 0;
        for idx in order.chunks(cfg.batch) {
            let mut batch = train.select(idx);
            augment(&mut batch.images, cfg, &mut rng)?;
            let mut onehot = vec![0.0; idx.len() * classes];
            for (r, &l) in batch.labels.iter().enumerate() {
                onehot[r * classes + l] = 1.0;
            }
            let mut tape = Tape::new();
            let (bound, logits) = model.forward(&mut tape, &batch.images, Trainable::All)?;
            let p = tape.softmax(logits)?;
            let target = tape.constant(Tensor::new(vec![idx.len(), classes], onehot)?);
            let rows = cross_entropy_rows(&mut tape, target, p)?;
            let loss = tape.mean(rows);
            total += tape.value(loss).item();
            batches += 1;
            let grads = tape.backward(loss)?;
            let pairs: Vec<_> = bound.leaves().map(|(i, v)| (i, grads.wrt(v))).collect();
            opt.step(model, &pairs)?;
        }
        curve.push(total / batches as f64);
    }
    let train_accuracy = accuracy(model, train)?;
    let heldout_accuracy = heldout.map(|h| accuracy(model, h)).transpose()?;
    let measured = heldout_accuracy.unwrap_or(train_accuracy);
    if measured < cfg.threshold {
        return Err(Error::TrainingFailure {
            accuracy: measured,
            threshold: cfg.threshold,
            curve,
        });
    }
    Ok(PretrainReport {
        loss_curve: curve,
        train_accuracy,
        heldout_accuracy,
    })
}
