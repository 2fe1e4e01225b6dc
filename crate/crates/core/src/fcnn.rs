//! Dilated fully convolutional network that maps an image to its structure
//! image.
//!
//! Layout: a stack of 3×3 dilated convolutions (24 feature maps by default),
//! each followed by instance normalization and a leaky ReLU, then one linear
//! 1×1 convolution back to 3 channels. The last entry of the dilation list
//! belongs to the 1×1 layer.
//!
//! Hidden convolutions carry no bias: the per-channel mean subtraction of the
//! normalization cancels it exactly and the normalization shift plays its role.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::{
    adam_step, conv2d_backward, conv2d_backward_params, conv2d_forward, instance_norm_backward,
    instance_norm_forward_any, leaky_relu_backward, leaky_relu_forward, AdamConfig, AdamState, ConvSpec,
    NormCache, Tensor, DEFAULT_LEAKY_SLOPE, DEFAULT_NORM_EPS,
};

pub const DEFAULT_DILATIONS: [usize; 8] = [1, 2, 4, 8, 16, 32, 1, 1];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FcnnArchitecture {
    pub dilations: Vec<usize>,
    pub width: usize,
    pub kernel: usize,
    pub leaky_slope: f64,
    pub norm_eps: f64,
}

impl Default for FcnnArchitecture {
    fn default() -> Self {
        Self {
            dilations: DEFAULT_DILATIONS.to_vec(),
            width: 24,
            kernel: 3,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
            norm_eps: DEFAULT_NORM_EPS,
        }
    }
}

impl FcnnArchitecture {
    pub fn validate(&self) -> Result<()> {
        const OP: &str = "FcnnArchitecture";
        if self.dilations.len() < 2 {
            return Err(Error::invalid(OP, "need at least one hidden layer plus the output layer"));
        }
        if self.dilations.iter().any(|&d| d == 0) {
            return Err(Error::invalid(OP, "dilations must be >= 1"));
        }
        if self.width == 0 || self.kernel % 2 == 0 {
            return Err(Error::invalid(OP, "width must be >= 1 and kernel odd"));
        }
        if !(self.leaky_slope > 0.0 && self.leaky_slope < 1.0) || self.norm_eps <= 0.0 {
            return Err(Error::invalid(OP, "leaky slope must be in (0, 1) and eps > 0"));
        }
        Ok(())
    }

    pub fn hidden_specs(&self) -> Vec<ConvSpec> {
        let hidden = &self.dilations[..self.dilations.len() - 1];
        hidden
            .iter()
            .enumerate()
            .map(|(i, &d)| {
                let c_in = if i == 0 { 3 } else { self.width };
                ConvSpec::same(c_in, self.width, self.kernel, d)
            })
            .collect()
    }

    pub fn output_spec(&self) -> ConvSpec {
        ConvSpec::same(self.width, 3, 1, *self.dilations.last().expect("validated"))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HiddenLayer {
    pub weight: Tensor,
    pub gain: Tensor,
    pub shift: Tensor,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FcnnParams {
    pub arch: FcnnArchitecture,
    pub hidden: Vec<HiddenLayer>,
    pub output_weight: Tensor,
    pub output_bias: Tensor,
    pub seed: u64,
    /// Bumped on every mutation through [`FcnnParams::tensors_mut`]; lets
    /// the backward pass reject caches from an older forward.
    version: u64,
}

impl FcnnParams {
    pub fn version(&self) -> u64 {
        self.version
    }

    /// Parameter tensors in a fixed order: per hidden layer weight, gain,
    /// shift; then output weight and bias.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::with_capacity(self.hidden.len() * 3 + 2);
        for l in &self.hidden {
            out.extend([&l.weight, &l.gain, &l.shift]);
        }
        out.push(&self.output_weight);
        out.push(&self.output_bias);
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        self.version += 1;
        let mut out = Vec::with_capacity(self.hidden.len() * 3 + 2);
        for l in &mut self.hidden {
            out.push(&mut l.weight);
            out.push(&mut l.gain);
            out.push(&mut l.shift);
        }
        out.push(&mut self.output_weight);
        out.push(&mut self.output_bias);
        out
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut out = Vec::new();
        for i in 0..self.hidden.len() {
            out.push(format!("hidden{i}.weight"));
            out.push(format!("hidden{i}.gain"));
            out.push(format!("hidden{i}.shift"));
        }
        out.push("output.weight".into());
        out.push("output.bias".into());
        out
    }

    pub fn parameter_count(&self) -> usize {
        self.tensors().iter().map(|t| t.len()).sum()
    }
}

/// He-uniform weights (`U(±sqrt(6 / fan_in))`, variance `2 / fan_in`), unit
/// gains, zero shifts and bias.
pub fn fcnn_init(arch: &FcnnArchitecture, seed: u64) -> Result<FcnnParams> {
    arch.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut he = |spec: &ConvSpec| {
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        Tensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-bound..bound))
    };
    let hidden = arch
        .hidden_specs()
        .iter()
        .map(|spec| HiddenLayer {
            weight: he(spec),
            gain: Tensor::full(&[arch.width], 1.0),
            shift: Tensor::zeros(&[arch.width]),
        })
        .collect();
    let out_spec = arch.output_spec();
    Ok(FcnnParams {
        arch: arch.clone(),
        hidden,
        output_weight: he(&out_spec),
        output_bias: Tensor::zeros(&[3]),
        seed,
        version: 0,
    })
}

/// Activations saved by [`fcnn_forward`].
#[derive(Debug, Clone)]
pub struct FcnnCache {
    version: u64,
    shape: Vec<usize>,
    /// Input of each hidden convolution, then the input of the output layer.
    layer_inputs: Vec<Tensor>,
    norm_caches: Vec<NormCache>,
    norm_outputs: Vec<Tensor>,
}

/// Raw (unclamped) structure image and the saved activations.
pub fn fcnn_forward(img: &Image, params: &FcnnParams) -> Result<(Image, FcnnCache)> {
    let arch = &params.arch;
    let mut x = img.tensor().clone();
    let mut layer_inputs = Vec::with_capacity(params.hidden.len() + 1);
    let mut norm_caches = Vec::with_capacity(params.hidden.len());
    let mut norm_outputs = Vec::with_capacity(params.hidden.len());
    for (spec, layer) in arch.hidden_specs().iter().zip(&params.hidden) {
        let conv = conv2d_forward(&x, spec, &layer.weight, &Tensor::zeros(&[spec.out_channels]))?;
        let (normed, cache) = instance_norm_forward_any(&conv, &layer.gain, &layer.shift, arch.norm_eps)?;
        let act = leaky_relu_forward(&normed, arch.leaky_slope);
        layer_inputs.push(std::mem::replace(&mut x, act));
        norm_caches.push(cache);
        norm_outputs.push(normed);
    }
    let out = conv2d_forward(&x, &arch.output_spec(), &params.output_weight, &params.output_bias)?;
    layer_inputs.push(x);
    let cache = FcnnCache {
        version: params.version,
        shape: img.tensor().shape().to_vec(),
        layer_inputs,
        norm_caches,
        norm_outputs,
    };
    Ok((Image::from_tensor(out)?, cache))
}

/// Gradients in the order of [`FcnnParams::tensors`].
pub fn fcnn_backward(grad_structure: &Tensor, cache: &FcnnCache, params: &FcnnParams) -> Result<Vec<Tensor>> {
    if cache.version != params.version {
        return Err(Error::StaleCache {
            params: params.version,
            cache: cache.version,
        });
    }
    if grad_structure.shape() != cache.shape.as_slice() {
        return Err(Error::shape(
            "fcnn_backward",
            "grad_structure elements",
            cache.shape.iter().product(),
            grad_structure.len(),
        ));
    }
    let arch = &params.arch;
    let specs = arch.hidden_specs();
    let n_hidden = params.hidden.len();
    let mut grads: Vec<Tensor> = Vec::with_capacity(n_hidden * 3 + 2);

    let out = conv2d_backward(grad_structure, &cache.layer_inputs[n_hidden], &arch.output_spec(), &params.output_weight)?;
    let mut g = out.input;
    let mut hidden_grads: Vec<[Tensor; 3]> = Vec::with_capacity(n_hidden);
    for i in (0..n_hidden).rev() {
        let layer = &params.hidden[i];
        let g_norm = leaky_relu_backward(&g, &cache.norm_outputs[i], arch.leaky_slope)?;
        let ng = instance_norm_backward(&g_norm, &cache.norm_caches[i], &layer.gain)?;
        let g_weight = if i > 0 {
            let cg = conv2d_backward(&ng.input, &cache.layer_inputs[i], &specs[i], &layer.weight)?;
            g = cg.input;
            cg.weights
        } else {
            conv2d_backward_params(&ng.input, &cache.layer_inputs[i], &specs[i], &layer.weight)?.0
        };
        hidden_grads.push([g_weight, ng.gain, ng.shift]);
    }
    for triple in hidden_grads.into_iter().rev() {
        grads.extend(triple);
    }
    grads.push(out.weights);
    grads.push(out.bias);
    Ok(grads)
}

/// Adam state for every parameter tensor of a network.
#[derive(Debug, Clone)]
pub struct FcnnOptimizer {
    states: Vec<AdamState>,
}

impl FcnnOptimizer {
    pub fn new(params: &FcnnParams, config: AdamConfig) -> Self {
        Self {
            states: params.tensors().into_iter().map(|t| AdamState::new(t, config)).collect(),
        }
    }

    pub fn step(&mut self, params: &mut FcnnParams, grads: &[Tensor]) -> Result<()> {
        let tensors = params.tensors_mut();
        if grads.len() != tensors.len() {
            return Err(Error::shape("FcnnOptimizer::step", "gradient count", tensors.len(), grads.len()));
        }
        for ((p, g), st) in tensors.into_iter().zip(grads).zip(&mut self.states) {
            adam_step(p, g, st)?;
        }
        Ok(())
    }
}
