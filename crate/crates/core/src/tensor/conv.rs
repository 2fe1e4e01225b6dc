//! Stride-1 dilated 2-D cross-correlation with zero padding.
//!
//! Lowered to a single GEMM per call. Kernel taps whose receptive offset
//! falls entirely inside the padding for the given input size (common for
//! dilation 16/32 on small images) are dropped from the column matrix, since
//! they only ever multiply zeros.

use serde::{Deserialize, Serialize};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvSpec {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: (usize, usize),
    pub dilation: usize,
    pub padding: usize,
}

impl ConvSpec {
    /// Square kernel with padding `dilation * (k - 1) / 2`, which keeps the
    /// spatial size unchanged for odd `k`.
    pub fn same(in_channels: usize, out_channels: usize, kernel: usize, dilation: usize) -> Self {
        Self {
            in_channels,
            out_channels,
            kernel: (kernel, kernel),
            dilation,
            padding: dilation * (kernel - 1) / 2,
        }
    }

    pub fn weight_shape(&self) -> [usize; 4] {
        [self.out_channels, self.in_channels, self.kernel.0, self.kernel.1]
    }

    pub fn fan_in(&self) -> usize {
        self.in_channels * self.kernel.0 * self.kernel.1
    }

    pub fn output_size(&self, h: usize, w: usize) -> Result<(usize, usize)> {
        let span_h = self.dilation * (self.kernel.0 - 1);
        let span_w = self.dilation * (self.kernel.1 - 1);
        let oh = (h + 2 * self.padding).checked_sub(span_h).filter(|&v| v > 0);
        let ow = (w + 2 * self.padding).checked_sub(span_w).filter(|&v| v > 0);
        match (oh, ow) {
            (Some(oh), Some(ow)) => Ok((oh, ow)),
            _ => Err(Error::invalid(
                "conv2d",
                format!("kernel span exceeds padded input {h}x{w}"),
            )),
        }
    }

    fn validate(&self, op: &'static str) -> Result<()> {
        if self.dilation == 0 || self.kernel.0 == 0 || self.kernel.1 == 0 {
            return Err(Error::invalid(op, "kernel and dilation must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct ConvGrads {
    pub input: Tensor,
    pub weights: Tensor,
    pub bias: Tensor,
}

/// One kernel tap that touches at least one real input pixel.
#[derive(Debug, Clone, Copy)]
struct Tap {
    ky: usize,
    kx: usize,
    dy: isize,
    dx: isize,
    y0: usize,
    y1: usize,
    x0: usize,
    x1: usize,
}

struct Geometry {
    c_in: usize,
    h: usize,
    w: usize,
    oh: usize,
    ow: usize,
    taps: Vec<Tap>,
}

impl Geometry {
    fn new(input: &Tensor, spec: &ConvSpec, op: &'static str) -> Result<Self> {
        spec.validate(op)?;
        let (c_in, h, w) = input.dims3(op)?;
        if c_in != spec.in_channels {
            return Err(Error::shape(op, "input channels", spec.in_channels, c_in));
        }
        let (oh, ow) = spec.output_size(h, w)?;
        let d = spec.dilation as isize;
        let p = spec.padding as isize;
        let mut taps = Vec::with_capacity(spec.kernel.0 * spec.kernel.1);
        for ky in 0..spec.kernel.0 {
            let dy = ky as isize * d - p;
            let y0 = (-dy).max(0) as usize;
            let y1 = (h as isize - dy).min(oh as isize).max(0) as usize;
            if y0 >= y1 {
                continue;
            }
            for kx in 0..spec.kernel.1 {
                let dx = kx as isize * d - p;
                let x0 = (-dx).max(0) as usize;
                let x1 = (w as isize - dx).min(ow as isize).max(0) as usize;
                if x0 >= x1 {
                    continue;
                }
                taps.push(Tap { ky, kx, dy, dx, y0, y1, x0, x1 });
            }
        }
        Ok(Self { c_in, h, w, oh, ow, taps })
    }

    fn rows(&self) -> usize {
        self.c_in * self.taps.len()
    }

    fn pixels(&self) -> usize {
        self.oh * self.ow
    }

    fn im2col(&self, input: &[f64]) -> Vec<f64> {
        let n = self.pixels();
        let mut col = vec![0.0; self.rows() * n];
        for ci in 0..self.c_in {
            let plane = &input[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, tap) in self.taps.iter().enumerate() {
                let row = &mut col[(ci * self.taps.len() + t) * n..][..n];
                for y in tap.y0..tap.y1 {
                    let iy = (y as isize + tap.dy) as usize;
                    let ix0 = (tap.x0 as isize + tap.dx) as usize;
                    let len = tap.x1 - tap.x0;
                    row[y * self.ow + tap.x0..][..len]
                        .copy_from_slice(&plane[iy * self.w + ix0..][..len]);
                }
            }
        }
        col
    }

    fn col2im(&self, col: &[f64]) -> Vec<f64> {
        let n = self.pixels();
        let mut out = vec![0.0; self.c_in * self.h * self.w];
        for ci in 0..self.c_in {
            let plane = &mut out[ci * self.h * self.w..(ci + 1) * self.h * self.w];
            for (t, tap) in self.taps.iter().enumerate() {
                let row = &col[(ci * self.taps.len() + t) * n..][..n];
                for y in tap.y0..tap.y1 {
                    let iy = (y as isize + tap.dy) as usize;
                    let ix0 = (tap.x0 as isize + tap.dx) as usize;
                    let len = tap.x1 - tap.x0;
                    let src = &row[y * self.ow + tap.x0..][..len];
                    for (d, s) in plane[iy * self.w + ix0..][..len].iter_mut().zip(src) {
                        *d += s;
                    }
                }
            }
        }
        out
    }

    /// Weight matrix `[C_out, C_in * taps]` restricted to the active taps.
    fn gather_weights(&self, weights: &[f64], spec: &ConvSpec) -> Vec<f64> {
        let k = self.rows();
        let (kh, kw) = spec.kernel;
        let mut wm = vec![0.0; spec.out_channels * k];
        for co in 0..spec.out_channels {
            for ci in 0..self.c_in {
                for (t, tap) in self.taps.iter().enumerate() {
                    wm[co * k + ci * self.taps.len() + t] =
                        weights[((co * self.c_in + ci) * kh + tap.ky) * kw + tap.kx];
                }
            }
        }
        wm
    }
}

fn check_params(spec: &ConvSpec, weights: &Tensor, bias: Option<&Tensor>, op: &'static str) -> Result<()> {
    let expected = spec.weight_shape();
    if weights.shape().len() != 4 {
        return Err(Error::shape(op, "weight rank", 4, weights.shape().len()));
    }
    let names = ["weight out_channels", "weight in_channels", "kernel height", "kernel width"];
    for (i, name) in names.iter().enumerate() {
        if weights.shape()[i] != expected[i] {
            return Err(Error::shape(op, *name, expected[i], weights.shape()[i]));
        }
    }
    if let Some(bias) = bias {
        if bias.len() != spec.out_channels {
            return Err(Error::shape(op, "bias length", spec.out_channels, bias.len()));
        }
    }
    Ok(())
}

/// Row-major `c[m,n] = a[m,k] * b[k,n]` with arbitrary strides on `a` and `b`.
#[allow(clippy::too_many_arguments)]
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    rsa: usize,
    csa: usize,
    b: &[f64],
    rsb: usize,
    csb: usize,
    c: &mut [f64],
) {
    debug_assert!(c.len() >= m * n);
    if m == 0 || n == 0 {
        return;
    }
    if k == 0 {
        c[..m * n].iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    // SAFETY: the slices cover every index addressed by the given dims/strides
    // (asserted by the callers' shape checks) and `c` does not alias `a`/`b`.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

pub fn conv2d_forward(input: &Tensor, spec: &ConvSpec, weights: &Tensor, bias: &Tensor) -> Result<Tensor> {
    const OP: &str = "conv2d_forward";
    check_params(spec, weights, Some(bias), OP)?;
    let geo = Geometry::new(input, spec, OP)?;
    let n = geo.pixels();
    let k = geo.rows();
    let col = geo.im2col(input.data());
    let wm = geo.gather_weights(weights.data(), spec);
    let mut out = vec![0.0; spec.out_channels * n];
    gemm(spec.out_channels, k, n, &wm, k, 1, &col, n, 1, &mut out);
    for (co, b) in bias.data().iter().enumerate() {
        out[co * n..(co + 1) * n].iter_mut().for_each(|v| *v += b);
    }
    Tensor::new(vec![spec.out_channels, geo.oh, geo.ow], out)
}

pub fn conv2d_backward(
    grad_out: &Tensor,
    saved_input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
) -> Result<ConvGrads> {
    let (input, weights_grad, bias) = backward_impl(grad_out, saved_input, spec, weights, true)?;
    Ok(ConvGrads {
        input: input.expect("input gradient requested"),
        weights: weights_grad,
        bias,
    })
}

/// Parameter gradients only; skips the input-gradient GEMM.
pub(crate) fn conv2d_backward_params(
    grad_out: &Tensor,
    saved_input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
) -> Result<(Tensor, Tensor)> {
    let (_, w, b) = backward_impl(grad_out, saved_input, spec, weights, false)?;
    Ok((w, b))
}

fn backward_impl(
    grad_out: &Tensor,
    saved_input: &Tensor,
    spec: &ConvSpec,
    weights: &Tensor,
    want_input: bool,
) -> Result<(Option<Tensor>, Tensor, Tensor)> {
    const OP: &str = "conv2d_backward";
    check_params(spec, weights, None, OP)?;
    let geo = Geometry::new(saved_input, spec, OP)?;
    let (gc, gh, gw) = grad_out.dims3(OP)?;
    if gc != spec.out_channels {
        return Err(Error::shape(OP, "grad_out channels", spec.out_channels, gc));
    }
    if gh != geo.oh {
        return Err(Error::shape(OP, "grad_out height", geo.oh, gh));
    }
    if gw != geo.ow {
        return Err(Error::shape(OP, "grad_out width", geo.ow, gw));
    }
    let n = geo.pixels();
    let k = geo.rows();
    let m = spec.out_channels;
    let g = grad_out.data();

    let bias: Vec<f64> = (0..m).map(|co| g[co * n..(co + 1) * n].iter().sum()).collect();

    let col = geo.im2col(saved_input.data());
    // grad_wm[m,k] = g[m,n] * col^T[n,k]
    let mut grad_wm = vec![0.0; m * k];
    gemm(m, n, k, g, n, 1, &col, 1, n, &mut grad_wm);
    let (kh, kw) = spec.kernel;
    let mut grad_w = vec![0.0; m * geo.c_in * kh * kw];
    for co in 0..m {
        for ci in 0..geo.c_in {
            for (t, tap) in geo.taps.iter().enumerate() {
                grad_w[((co * geo.c_in + ci) * kh + tap.ky) * kw + tap.kx] =
                    grad_wm[co * k + ci * geo.taps.len() + t];
            }
        }
    }

    let input = if want_input {
        let wm = geo.gather_weights(weights.data(), spec);
        // grad_col[k,n] = wm^T[k,m] * g[m,n]
        let mut grad_col = vec![0.0; k * n];
        gemm(k, m, n, &wm, 1, k, g, n, 1, &mut grad_col);
        Some(Tensor::new(saved_input.shape().to_vec(), geo.col2im(&grad_col))?)
    } else {
        None
    };

    Ok((
        input,
        Tensor::new(weights.shape().to_vec(), grad_w)?,
        Tensor::new(vec![m], bias)?,
    ))
}
