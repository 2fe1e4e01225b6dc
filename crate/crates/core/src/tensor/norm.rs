//! Per-channel instance normalization with a learnable affine.

use super::Tensor;
use crate::error::{Error, Result};

pub const DEFAULT_NORM_EPS: f64 = 1e-5;

/// Saved state for the backward pass.
#[derive(Debug, Clone)]
pub struct NormCache {
    normalized: Tensor,
    inv_std: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct NormGrads {
    pub input: Tensor,
    pub gain: Tensor,
    pub shift: Tensor,
}

pub fn instance_norm_forward(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    const OP: &str = "instance_norm_forward";
    let (_, h, w) = x.dims3(OP)?;
    let n = h * w;
    if n < 2 {
        return Err(Error::invalid(OP, format!("need at least 2 pixels per channel, got {n}")));
    }
    instance_norm_forward_any(x, gain, shift, eps)
}

/// Same as [`instance_norm_forward`] but accepts single-pixel channels, where
/// the normalized value is 0 and the output is the shift.
pub(crate) fn instance_norm_forward_any(
    x: &Tensor,
    gain: &Tensor,
    shift: &Tensor,
    eps: f64,
) -> Result<(Tensor, NormCache)> {
    const OP: &str = "instance_norm_forward";
    let (c, h, w) = x.dims3(OP)?;
    let n = h * w;
    if eps <= 0.0 {
        return Err(Error::invalid(OP, "eps must be positive"));
    }
    if gain.len() != c {
        return Err(Error::shape(OP, "gain length", c, gain.len()));
    }
    if shift.len() != c {
        return Err(Error::shape(OP, "shift length", c, shift.len()));
    }
    let mut normalized = Tensor::zeros(x.shape());
    let mut out = Tensor::zeros(x.shape());
    let mut inv_std = Vec::with_capacity(c);
    for ch in 0..c {
        let src = &x.data()[ch * n..(ch + 1) * n];
        let mean = src.iter().sum::<f64>() / n as f64;
        let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n as f64;
        let istd = 1.0 / (var + eps).sqrt();
        inv_std.push(istd);
        let (g, s) = (gain.data()[ch], shift.data()[ch]);
        let xh = &mut normalized.data_mut()[ch * n..(ch + 1) * n];
        for (dst, v) in xh.iter_mut().zip(src) {
            *dst = (v - mean) * istd;
        }
        for (dst, v) in out.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(&normalized.data()[ch * n..(ch + 1) * n]) {
            *dst = g * v + s;
        }
    }
    Ok((out, NormCache { normalized, inv_std }))
}

pub fn instance_norm_backward(grad_out: &Tensor, cache: &NormCache, gain: &Tensor) -> Result<NormGrads> {
    const OP: &str = "instance_norm_backward";
    grad_out.check_same_shape(&cache.normalized, OP)?;
    let (c, h, w) = grad_out.dims3(OP)?;
    let n = h * w;
    let nf = n as f64;
    let mut input = Tensor::zeros(grad_out.shape());
    let mut g_gain = Vec::with_capacity(c);
    let mut g_shift = Vec::with_capacity(c);
    for ch in 0..c {
        let g = &grad_out.data()[ch * n..(ch + 1) * n];
        let xh = &cache.normalized.data()[ch * n..(ch + 1) * n];
        let sum_g: f64 = g.iter().sum();
        let sum_gx: f64 = g.iter().zip(xh).map(|(a, b)| a * b).sum();
        g_shift.push(sum_g);
        g_gain.push(sum_gx);
        let scale = gain.data()[ch] * cache.inv_std[ch] / nf;
        for ((dst, gv), xv) in input.data_mut()[ch * n..(ch + 1) * n].iter_mut().zip(g).zip(xh) {
            *dst = scale * (nf * gv - sum_g - xv * sum_gx);
        }
    }
    Ok(NormGrads {
        input,
        gain: Tensor::new(vec![c], g_gain)?,
        shift: Tensor::new(vec![c], g_shift)?,
    })
}
