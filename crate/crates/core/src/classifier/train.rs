use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{argmax, cross_entropy, ArchId, ClassifierModel};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{adam_step, AdamConfig, AdamState, Tensor};

#[derive(Debug, Clone)]
pub struct LabeledImage {
    pub image: Image,
    pub label: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Random horizontal flips of training images.
    pub flip: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 12,
            batch_size: 16,
            lr: 3e-3,
            flip: true,
        }
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub train_accuracy: f64,
    /// `None` when no test images were given.
    pub test_accuracy: Option<f64>,
    /// Mean cross-entropy per epoch.
    pub epoch_losses: Vec<f64>,
}

fn channel_stats(train: &[LabeledImage]) -> ([f64; 3], [f64; 3]) {
    let mut sum = [0.0; 3];
    let mut sq = [0.0; 3];
    let mut n = 0.0;
    for s in train {
        for c in 0..3 {
            for &v in s.image.channel(c) {
                sum[c] += v;
                sq[c] += v * v;
            }
        }
        n += s.image.pixel_count() as f64;
    }
    let mean = sum.map(|s| s / n);
    let mut std = [0.0; 3];
    for c in 0..3 {
        std[c] = (sq[c] / n - mean[c] * mean[c]).max(0.0).sqrt().max(1e-3);
    }
    (mean, std)
}

pub fn accuracy(model: &ClassifierModel, set: &[LabeledImage]) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::Dataset("accuracy of an empty set".into()));
    }
    let mut correct = 0usize;
    for s in set {
        let (z, _) = model.forward(&s.image)?;
        correct += usize::from(argmax(&z) == s.label);
    }
    Ok(correct as f64 / set.len() as f64)
}

/// Cross-entropy training with Adam from a seeded initialization.
///
/// Same inputs and seed give bit-identical weights.
pub fn train_classifier(
    train: &[LabeledImage],
    test: &[LabeledImage],
    arch: ArchId,
    num_classes: usize,
    cfg: &TrainConfig,
    seed: u64,
) -> Result<TrainOutcome> {
    let first = train
        .first()
        .ok_or_else(|| Error::Dataset("training set is empty".into()))?;
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::invalid("train_classifier", "epochs, batch_size and lr must be positive"));
    }
    let size = (first.image.height(), first.image.width());
    for s in train.iter().chain(test) {
        if s.label >= num_classes {
            return Err(Error::Dataset(format!("label {} outside [0, {num_classes})", s.label)));
        }
        if (s.image.height(), s.image.width()) != size {
            return Err(Error::Dataset(format!(
                "image size {}x{} differs from {}x{}",
                s.image.height(),
                s.image.width(),
                size.0,
                size.1
            )));
        }
    }

    let (mean, std) = channel_stats(train);
    let mut model = ClassifierModel::new(arch, num_classes, size, mean, std, arch.build(num_classes, seed))?;
    let adam = AdamConfig {
        lr: cfg.lr,
        ..AdamConfig::default()
    };
    let mut states: Vec<AdamState> = model.named_tensors().iter().map(|(_, t)| AdamState::new(t, adam)).collect();

    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x7261_696e);
    let mut order: Vec<usize> = (0..train.len()).collect();
    let mut epoch_losses = Vec::with_capacity(cfg.epochs);
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        let mut epoch_loss = 0.0;
        for batch in order.chunks(cfg.batch_size) {
            let mut acc: Option<Vec<Tensor>> = None;
            for &i in batch {
                let sample = &train[i];
                let flipped;
                let img = if cfg.flip && rng.gen_bool(0.5) {
                    flipped = sample.image.flipped_horizontal();
                    &flipped
                } else {
                    &sample.image
                };
                let (z, cache) = model.forward(img)?;
                let (loss, g) = cross_entropy(&z, sample.label);
                epoch_loss += loss;
                let (_, grads) = model.backward(&cache, &g, true)?;
                match acc.as_mut() {
                    None => acc = Some(grads),
                    Some(a) => {
                        for (x, y) in a.iter_mut().zip(&grads) {
                            x.add_assign(y)?;
                        }
                    }
                }
            }
            let scale = 1.0 / batch.len() as f64;
            let mut grads = acc.expect("non-empty batch");
            let mut slot = 0;
            for layer in &mut model.layers {
                for (_, p) in layer.params_mut() {
                    grads[slot].scale(scale);
                    adam_step(p, &grads[slot], &mut states[slot])?;
                    slot += 1;
                }
            }
        }
        if !epoch_loss.is_finite() {
            return Err(Error::NonFinite {
                context: "classifier training loss".into(),
                iteration: Some(epoch_losses.len()),
            });
        }
        epoch_losses.push(epoch_loss / train.len() as f64);
    }

    let model = ClassifierModel::new(arch, num_classes, size, mean, std, model.layers)?;
    let train_accuracy = accuracy(&model, train)?;
    let test_accuracy = if test.is_empty() { None } else { Some(accuracy(&model, test)?) };
    Ok(TrainOutcome {
        model,
        train_accuracy,
        test_accuracy,
        epoch_losses,
    })
}
