use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{conv2d_backward, conv2d_forward, ConvSpec, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub enum Layer {
    Conv { spec: ConvSpec, weight: Tensor, bias: Tensor },
    Relu,
    /// 2×2 average pooling with stride 2; an odd trailing row/column is dropped.
    AvgPool2,
    GlobalAvgPool,
    /// `weight` is `[out, in]`.
    Linear { weight: Tensor, bias: Tensor },
}

impl Layer {
    pub(crate) fn conv(c_in: usize, c_out: usize, k: usize, rng: &mut ChaCha8Rng) -> Self {
        let spec = ConvSpec::same(c_in, c_out, k, 1);
        let bound = (6.0 / spec.fan_in() as f64).sqrt();
        Layer::Conv {
            spec,
            weight: Tensor::from_fn(&spec.weight_shape(), |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub(crate) fn linear(c_in: usize, c_out: usize, rng: &mut ChaCha8Rng) -> Self {
        let bound = (1.0 / c_in as f64).sqrt();
        Layer::Linear {
            weight: Tensor::from_fn(&[c_out, c_in], |_| rng.gen_range(-bound..bound)),
            bias: Tensor::zeros(&[c_out]),
        }
    }

    pub fn params(&self) -> Vec<(&'static str, &Tensor)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => Vec::new(),
        }
    }

    pub(crate) fn params_mut(&mut self) -> Vec<(&'static str, &mut Tensor)> {
        match self {
            Layer::Conv { weight, bias, .. } | Layer::Linear { weight, bias } => {
                vec![("weight", weight), ("bias", bias)]
            }
            _ => Vec::new(),
        }
    }

    pub(crate) fn forward(&self, x: &Tensor) -> Result<Tensor> {
        match self {
            Layer::Conv { spec, weight, bias } => conv2d_forward(x, spec, weight, bias),
            Layer::Relu => Ok(x.map(|v| v.max(0.0))),
            Layer::AvgPool2 => {
                let (c, h, w) = x.dims3("AvgPool2")?;
                let (oh, ow) = (h / 2, w / 2);
                if oh == 0 || ow == 0 {
                    return Err(Error::invalid("AvgPool2", format!("input {h}x{w} too small")));
                }
                let d = x.data();
                Ok(Tensor::from_fn(&[c, oh, ow], |i| {
                    let (ch, y, xx) = (i / (oh * ow), (i / ow) % oh, i % ow);
                    let base = ch * h * w + 2 * y * w + 2 * xx;
                    0.25 * (d[base] + d[base + 1] + d[base + w] + d[base + w + 1])
                }))
            }
            Layer::GlobalAvgPool => {
                let (c, h, w) = x.dims3("GlobalAvgPool")?;
                let n = h * w;
                Ok(Tensor::from_fn(&[c], |ch| x.data()[ch * n..(ch + 1) * n].iter().sum::<f64>() / n as f64))
            }
            Layer::Linear { weight, bias } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                if x.len() != inp {
                    return Err(Error::shape("Linear", "input features", inp, x.len()));
                }
                let w = weight.data();
                Ok(Tensor::from_fn(&[out], |o| {
                    bias.data()[o] + w[o * inp..(o + 1) * inp].iter().zip(x.data()).map(|(a, b)| a * b).sum::<f64>()
                }))
            }
        }
    }

    /// Returns the input cotangent and (when requested) parameter gradients
    /// in [`Layer::params`] order.
    pub(crate) fn backward(&self, g: &Tensor, input: &Tensor, want_params: bool) -> Result<(Tensor, Vec<Tensor>)> {
        match self {
            Layer::Conv { spec, weight, .. } => {
                let cg = conv2d_backward(g, input, spec, weight)?;
                let params = if want_params { vec![cg.weights, cg.bias] } else { Vec::new() };
                Ok((cg.input, params))
            }
            Layer::Relu => Ok((g.zip_map(input, |gv, x| if x > 0.0 { gv } else { 0.0 })?, Vec::new())),
            Layer::AvgPool2 => {
                let (c, h, w) = input.dims3("AvgPool2")?;
                let (oh, ow) = (h / 2, w / 2);
                let mut out = Tensor::zeros(input.shape());
                let gd = g.data();
                let od = out.data_mut();
                for ch in 0..c {
                    for y in 0..oh {
                        for x in 0..ow {
                            let v = 0.25 * gd[(ch * oh + y) * ow + x];
                            let base = ch * h * w + 2 * y * w + 2 * x;
                            od[base] += v;
                            od[base + 1] += v;
                            od[base + w] += v;
                            od[base + w + 1] += v;
                        }
                    }
                }
                Ok((out, Vec::new()))
            }
            Layer::GlobalAvgPool => {
                let (_, h, w) = input.dims3("GlobalAvgPool")?;
                let n = h * w;
                let gd = g.data();
                Ok((Tensor::from_fn(input.shape(), |i| gd[i / n] / n as f64), Vec::new()))
            }
            Layer::Linear { weight, .. } => {
                let (out, inp) = (weight.shape()[0], weight.shape()[1]);
                let w = weight.data();
                let gd = g.data();
                let gin = Tensor::from_fn(input.shape(), |i| (0..out).map(|o| gd[o] * w[o * inp + i]).sum());
                let params = if want_params {
                    let x = input.data();
                    vec![Tensor::from_fn(&[out, inp], |k| gd[k / inp] * x[k % inp]), g.clone()]
                } else {
                    Vec::new()
                };
                Ok((gin, params))
            }
        }
    }
}
