//! Small frozen CNN classifiers: logits, softmax prediction, the margin loss
//! used by the attack, and gradients back to the input image.

mod layers;
mod train;
mod weights;

pub use layers::Layer;
pub use train::{accuracy, train_classifier, LabeledImage, TrainConfig, TrainOutcome};
pub use weights::{fcnn_to_bytes, read_packed, write_packed, PackedManifest, TensorEntry, MAGIC};

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ArchId {
    #[serde(rename = "cnn-a")]
    CnnA,
    #[serde(rename = "cnn-b")]
    CnnB,
}

impl ArchId {
    pub fn as_str(&self) -> &'static str {
        match self {
            ArchId::CnnA => "cnn-a",
            ArchId::CnnB => "cnn-b",
        }
    }

    /// Freshly initialized layer stack.
    ///
    /// - `cnn-a`: three 3×3 conv blocks (16, 32, 32 maps) with 2×2 average
    ///   pooling after the first two, global average pooling, linear head.
    /// - `cnn-b`: a 5×5 conv (12 maps) with pooling, one 3×3 conv (24 maps),
    ///   global average pooling, linear head.
    pub fn build(&self, num_classes: usize, seed: u64) -> Vec<Layer> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match self {
            ArchId::CnnA => vec![
                Layer::conv(3, 16, 3, &mut rng),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::conv(16, 32, 3, &mut rng),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::conv(32, 32, 3, &mut rng),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::linear(32, num_classes, &mut rng),
            ],
            ArchId::CnnB => vec![
                Layer::conv(3, 12, 5, &mut rng),
                Layer::Relu,
                Layer::AvgPool2,
                Layer::conv(12, 24, 3, &mut rng),
                Layer::Relu,
                Layer::GlobalAvgPool,
                Layer::linear(24, num_classes, &mut rng),
            ],
        }
    }
}

impl fmt::Display for ArchId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ArchId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "cnn-a" => Ok(ArchId::CnnA),
            "cnn-b" => Ok(ArchId::CnnB),
            other => Err(Error::invalid("ArchId", format!("unknown architecture '{other}'"))),
        }
    }
}

/// An immutable trained classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct ClassifierModel {
    arch: ArchId,
    num_classes: usize,
    input_size: (usize, usize),
    mean: [f64; 3],
    std: [f64; 3],
    layers: Vec<Layer>,
    tag: u64,
}

impl ClassifierModel {
    pub fn new(
        arch: ArchId,
        num_classes: usize,
        input_size: (usize, usize),
        mean: [f64; 3],
        std: [f64; 3],
        layers: Vec<Layer>,
    ) -> Result<Self> {
        if num_classes < 2 {
            return Err(Error::invalid("ClassifierModel", format!("need at least 2 classes, got {num_classes}")));
        }
        if std.iter().any(|&s| s <= 0.0 || !s.is_finite()) {
            return Err(Error::invalid("ClassifierModel", "std must be positive"));
        }
        let mut model = Self {
            arch,
            num_classes,
            input_size,
            mean,
            std,
            layers,
            tag: 0,
        };
        let probe = Image::filled(input_size.0, input_size.1, [0.5; 3]);
        let (logits, _) = model.forward(&probe)?;
        if logits.len() != num_classes {
            return Err(Error::shape("ClassifierModel", "logit count", num_classes, logits.len()));
        }
        model.tag = u64::from_le_bytes(model.fingerprint_bytes()[..8].try_into().expect("8 bytes"));
        Ok(model)
    }

    pub fn arch(&self) -> ArchId {
        self.arch
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn input_size(&self) -> (usize, usize) {
        self.input_size
    }

    pub fn mean(&self) -> [f64; 3] {
        self.mean
    }

    pub fn std(&self) -> [f64; 3] {
        self.std
    }

    pub fn layers(&self) -> &[Layer] {
        &self.layers
    }

    fn fingerprint_bytes(&self) -> Vec<u8> {
        let mut h = Sha256::new();
        h.update(self.arch.as_str().as_bytes());
        for v in self.mean.iter().chain(&self.std) {
            h.update(v.to_le_bytes());
        }
        for (_, t) in self.named_tensors() {
            for v in t.data() {
                h.update(v.to_le_bytes());
            }
        }
        h.finalize().to_vec()
    }

    /// SHA-256 over architecture, normalization and all weights.
    pub fn fingerprint(&self) -> String {
        hex::encode(self.fingerprint_bytes())
    }

    pub(crate) fn named_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        for (i, layer) in self.layers.iter().enumerate() {
            for (name, t) in layer.params() {
                out.push((format!("layer{i}.{name}"), t));
            }
        }
        out
    }

    fn standardize(&self, img: &Image) -> Result<Tensor> {
        let (h, w) = self.input_size;
        if img.height() != h || img.width() != w {
            return Err(Error::shape("classify", "image pixels", h * w, img.pixel_count()));
        }
        let n = h * w;
        let mut t = img.tensor().clone();
        for c in 0..3 {
            for v in &mut t.data_mut()[c * n..(c + 1) * n] {
                *v = (*v - self.mean[c]) / self.std[c];
            }
        }
        Ok(t)
    }

    /// Logits and the activations needed by [`classifier_backward_to_input`].
    pub fn forward(&self, img: &Image) -> Result<(Vec<f64>, ForwardCache)> {
        let mut x = self.standardize(img)?;
        let mut inputs = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let y = layer.forward(&x)?;
            inputs.push(std::mem::replace(&mut x, y));
        }
        Ok((
            x.into_data(),
            ForwardCache {
                tag: self.tag,
                inputs,
            },
        ))
    }

    /// Backpropagates a logit cotangent; returns the input-space gradient of
    /// the standardized tensor and, if requested, parameter gradients.
    pub(crate) fn backward(
        &self,
        cache: &ForwardCache,
        cotangent: &[f64],
        want_params: bool,
    ) -> Result<(Tensor, Vec<Tensor>)> {
        if cache.tag != self.tag || cache.inputs.len() != self.layers.len() {
            return Err(Error::StaleCache {
                params: self.tag,
                cache: cache.tag,
            });
        }
        if cotangent.len() != self.num_classes {
            return Err(Error::shape("classifier backward", "cotangent length", self.num_classes, cotangent.len()));
        }
        let mut g = Tensor::new(vec![self.num_classes], cotangent.to_vec())?;
        let mut param_grads: Vec<Vec<Tensor>> = Vec::new();
        for (layer, input) in self.layers.iter().zip(&cache.inputs).rev() {
            let (gi, gp) = layer.backward(&g, input, want_params)?;
            g = gi;
            if want_params {
                param_grads.push(gp);
            }
        }
        Ok((g, param_grads.into_iter().rev().flatten().collect()))
    }
}

/// Saved layer inputs of one forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    tag: u64,
    inputs: Vec<Tensor>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub logits: Vec<f64>,
    pub probs: Vec<f64>,
    pub label: usize,
}

impl Prediction {
    pub fn from_logits(logits: Vec<f64>) -> Self {
        let probs = softmax(&logits);
        let label = argmax(&probs);
        Self { logits, probs, label }
    }
}

/// Softmax with max subtraction.
pub fn softmax(logits: &[f64]) -> Vec<f64> {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|z| (z - m).exp()).collect();
    let s: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / s).collect()
}

/// Index of the maximum; ties go to the lowest index.
pub fn argmax(values: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in values.iter().enumerate() {
        if *v > values[best] {
            best = i;
        }
    }
    best
}

pub fn classify(model: &ClassifierModel, img: &Image) -> Result<Prediction> {
    let (logits, _) = model.forward(img)?;
    Ok(Prediction::from_logits(logits))
}

#[derive(Debug, Clone, PartialEq)]
pub struct MarginLoss {
    /// `z_y − max_{i≠y} z_i`; negative exactly when the image is misclassified.
    pub value: f64,
    pub runner_up: usize,
    /// `+1` at `y`, `−1` at the runner-up, 0 elsewhere.
    pub grad: Vec<f64>,
}

pub fn margin_loss(logits: &[f64], y: usize) -> Result<MarginLoss> {
    let d = logits.len();
    if d < 2 {
        return Err(Error::invalid("margin_loss", format!("need at least 2 classes, got {d}")));
    }
    if y >= d {
        return Err(Error::invalid("margin_loss", format!("class {y} out of range for {d} logits")));
    }
    let mut runner_up = if y == 0 { 1 } else { 0 };
    for i in 0..d {
        if i != y && logits[i] > logits[runner_up] {
            runner_up = i;
        }
    }
    let mut grad = vec![0.0; d];
    grad[y] = 1.0;
    grad[runner_up] = -1.0;
    Ok(MarginLoss {
        value: logits[y] - logits[runner_up],
        runner_up,
        grad,
    })
}

/// `d(logits · cotangent) / d img` for the raw `[0, 1]` image.
pub fn classifier_backward_to_input(
    model: &ClassifierModel,
    cache: &ForwardCache,
    cotangent: &[f64],
) -> Result<Tensor> {
    let (mut g, _) = model.backward(cache, cotangent, false)?;
    let n = model.input_size.0 * model.input_size.1;
    for c in 0..3 {
        for v in &mut g.data_mut()[c * n..(c + 1) * n] {
            *v /= model.std[c];
        }
    }
    Ok(g)
}

/// Cross-entropy of the softmax against `label`, with its logit gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let m = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = m + logits.iter().map(|z| (z - m).exp()).sum::<f64>().ln();
    let mut g = softmax(logits);
    // p_y − 1 rounds to 0 once p_y saturates; −Σ_{i≠y} p_i does not.
    g[label] = -g.iter().enumerate().filter(|(i, _)| *i != label).map(|(_, p)| p).sum::<f64>();
    (lse - logits[label], g)
}

pub fn save_model(model: &ClassifierModel, path: &Path) -> Result<()> {
    std::fs::write(path, model_to_bytes(model))?;
    Ok(())
}

pub fn model_to_bytes(model: &ClassifierModel) -> Vec<u8> {
    let named = model.named_tensors();
    let manifest = PackedManifest::classifier(model, &named);
    let tensors: Vec<&Tensor> = named.iter().map(|(_, t)| *t).collect();
    write_packed(&manifest, &tensors)
}

pub fn load_model(path: &Path) -> Result<ClassifierModel> {
    model_from_bytes(&std::fs::read(path)?)
}

/// Loads and checks the stored architecture against `expected`.
pub fn load_model_as(path: &Path, expected: ArchId) -> Result<ClassifierModel> {
    let model = load_model(path)?;
    if model.arch != expected {
        return Err(Error::ArchitectureMismatch {
            expected: expected.to_string(),
            found: model.arch.to_string(),
        });
    }
    Ok(model)
}

pub fn model_from_bytes(bytes: &[u8]) -> Result<ClassifierModel> {
    let (manifest, tensors) = read_packed(bytes)?;
    let arch: ArchId = manifest.architecture.parse().map_err(|_| Error::ArchitectureMismatch {
        expected: "cnn-a or cnn-b".into(),
        found: manifest.architecture.clone(),
    })?;
    let num_classes = manifest
        .num_classes
        .ok_or_else(|| Error::Format("manifest lacks num_classes".into()))?;
    let (h, w) = (
        manifest.input_height.ok_or_else(|| Error::Format("manifest lacks input_height".into()))?,
        manifest.input_width.ok_or_else(|| Error::Format("manifest lacks input_width".into()))?,
    );
    let mean = manifest.mean.ok_or_else(|| Error::Format("manifest lacks mean".into()))?;
    let std = manifest.std.ok_or_else(|| Error::Format("manifest lacks std".into()))?;

    let mut layers = arch.build(num_classes, 0);
    let mut provided = manifest.tensors.iter().zip(tensors);
    for (i, layer) in layers.iter_mut().enumerate() {
        for (name, slot) in layer.params_mut() {
            let full = format!("layer{i}.{name}");
            let (entry, tensor) = provided
                .next()
                .ok_or_else(|| Error::Format(format!("missing tensor {full}")))?;
            if entry.name != full {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("{arch} tensor {full}"),
                    found: entry.name.clone(),
                });
            }
            if tensor.shape() != slot.shape() {
                return Err(Error::ArchitectureMismatch {
                    expected: format!("{full} with shape {:?}", slot.shape()),
                    found: format!("shape {:?}", tensor.shape()),
                });
            }
            *slot = tensor;
        }
    }
    if provided.next().is_some() {
        return Err(Error::Format("manifest lists more tensors than the architecture has".into()));
    }
    ClassifierModel::new(arch, num_classes, (h, w), mean, std, layers)
}
