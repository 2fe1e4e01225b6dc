//! sRGB ↔ CIE L*a*b* (D65, 2° observer) with exact backward passes.
//!
//! Constants:
//! - sRGB transfer function per IEC 61966-2-1: linear segment `c / 12.92`
//!   for `c <= 0.04045`, otherwise `((c + 0.055) / 1.055)^2.4`; encoding uses
//!   the `0.0031308` breakpoint.
//! - Linear sRGB → XYZ matrix (D65) with four-decimal primaries as published
//!   by Lindbloom (`0.4124564 ...`). The reference white is the image of
//!   RGB (1, 1, 1) under that matrix, so white maps to L = 100, a = b = 0.
//! - `f(t) = t^(1/3)` for `t > (6/29)^3`, otherwise `t / (3 (6/29)^2) + 4/29`.
//!
//! At the exact breakpoints the linear branch is used for both values and
//! derivatives.

use std::sync::LazyLock;

use crate::error::Result;
use crate::image::Image;
use crate::tensor::Tensor;

const RGB_TO_XYZ: [[f64; 3]; 3] = [
    [0.4124564, 0.3575761, 0.1804375],
    [0.2126729, 0.7151522, 0.0721750],
    [0.0193339, 0.1191920, 0.9503041],
];

const DELTA: f64 = 6.0 / 29.0;

static XYZ_TO_RGB: LazyLock<[[f64; 3]; 3]> = LazyLock::new(|| invert3(&RGB_TO_XYZ));

static WHITE: LazyLock<[f64; 3]> = LazyLock::new(|| {
    let m = &RGB_TO_XYZ;
    [
        m[0][0] + m[0][1] + m[0][2],
        m[1][0] + m[1][1] + m[1][2],
        m[2][0] + m[2][1] + m[2][2],
    ]
});

fn invert3(m: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let det = m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
        - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
        + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0]);
    let mut inv = [[0.0; 3]; 3];
    for (i, row) in inv.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let (r0, r1) = ((j + 1) % 3, (j + 2) % 3);
            let (c0, c1) = ((i + 1) % 3, (i + 2) % 3);
            *v = (m[r0][c0] * m[r1][c1] - m[r0][c1] * m[r1][c0]) / det;
        }
    }
    inv
}

fn srgb_decode(c: f64) -> (f64, f64) {
    if c <= 0.04045 {
        (c / 12.92, 1.0 / 12.92)
    } else {
        let base = (c + 0.055) / 1.055;
        (base.powf(2.4), 2.4 / 1.055 * base.powf(1.4))
    }
}

fn srgb_encode(l: f64) -> (f64, f64) {
    if l <= 0.0031308 {
        (12.92 * l, 12.92)
    } else {
        let p = l.powf(1.0 / 2.4);
        (1.055 * p - 0.055, 1.055 / 2.4 * p / l)
    }
}

fn lab_f(t: f64) -> (f64, f64) {
    if t > DELTA * DELTA * DELTA {
        let c = t.cbrt();
        (c, 1.0 / (3.0 * c * c))
    } else {
        let s = 1.0 / (3.0 * DELTA * DELTA);
        (t * s + 4.0 / 29.0, s)
    }
}

fn lab_f_inv(f: f64) -> (f64, f64) {
    if f > DELTA {
        (f * f * f, 3.0 * f * f)
    } else {
        let s = 3.0 * DELTA * DELTA;
        (s * (f - 4.0 / 29.0), s)
    }
}

fn matvec(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[0][1] * v[1] + m[0][2] * v[2],
        m[1][0] * v[0] + m[1][1] * v[1] + m[1][2] * v[2],
        m[2][0] * v[0] + m[2][1] * v[1] + m[2][2] * v[2],
    ]
}

fn matvec_t(m: &[[f64; 3]; 3], v: [f64; 3]) -> [f64; 3] {
    [
        m[0][0] * v[0] + m[1][0] * v[1] + m[2][0] * v[2],
        m[0][1] * v[0] + m[1][1] * v[1] + m[2][1] * v[2],
        m[0][2] * v[0] + m[1][2] * v[1] + m[2][2] * v[2],
    ]
}

/// Converts one in-range sRGB triple; returns Lab and the local derivatives
/// needed for the backward pass.
fn rgb_px(rgb: [f64; 3]) -> ([f64; 3], RgbPxDeriv) {
    let mut lin = [0.0; 3];
    let mut dlin = [0.0; 3];
    for c in 0..3 {
        (lin[c], dlin[c]) = srgb_decode(rgb[c]);
    }
    let xyz = matvec(&RGB_TO_XYZ, lin);
    let white = *WHITE;
    let mut f = [0.0; 3];
    let mut df = [0.0; 3];
    for k in 0..3 {
        let (v, d) = lab_f(xyz[k] / white[k]);
        f[k] = v;
        df[k] = d / white[k];
    }
    let lab = [116.0 * f[1] - 16.0, 500.0 * (f[0] - f[1]), 200.0 * (f[1] - f[2])];
    (lab, RgbPxDeriv { dlin, df })
}

struct RgbPxDeriv {
    dlin: [f64; 3],
    df: [f64; 3],
}

impl RgbPxDeriv {
    fn vjp(&self, g: [f64; 3]) -> [f64; 3] {
        // d(lab)/d(f) transposed
        let gf = [500.0 * g[1], 116.0 * g[0] - 500.0 * g[1] + 200.0 * g[2], -200.0 * g[2]];
        let gxyz = [gf[0] * self.df[0], gf[1] * self.df[1], gf[2] * self.df[2]];
        let glin = matvec_t(&RGB_TO_XYZ, gxyz);
        [glin[0] * self.dlin[0], glin[1] * self.dlin[1], glin[2] * self.dlin[2]]
    }
}

/// Converts Lab to sRGB without clamping; returns the derivative data.
fn lab_px(lab: [f64; 3]) -> ([f64; 3], LabPxDeriv) {
    let fy = (lab[0] + 16.0) / 116.0;
    let fx = fy + lab[1] / 500.0;
    let fz = fy - lab[2] / 200.0;
    let white = *WHITE;
    let mut xyz = [0.0; 3];
    let mut dxyz = [0.0; 3];
    for (k, fv) in [fx, fy, fz].into_iter().enumerate() {
        let (t, dt) = lab_f_inv(fv);
        xyz[k] = t * white[k];
        dxyz[k] = dt * white[k];
    }
    let lin = matvec(&XYZ_TO_RGB, xyz);
    let mut rgb = [0.0; 3];
    let mut denc = [0.0; 3];
    for c in 0..3 {
        (rgb[c], denc[c]) = srgb_encode(lin[c]);
    }
    (rgb, LabPxDeriv { dxyz, denc })
}

struct LabPxDeriv {
    dxyz: [f64; 3],
    denc: [f64; 3],
}

impl LabPxDeriv {
    fn vjp(&self, g: [f64; 3]) -> [f64; 3] {
        let glin = [g[0] * self.denc[0], g[1] * self.denc[1], g[2] * self.denc[2]];
        let gxyz = matvec_t(&XYZ_TO_RGB, glin);
        let gf = [gxyz[0] * self.dxyz[0], gxyz[1] * self.dxyz[1], gxyz[2] * self.dxyz[2]];
        // fx = L/116 + a/500 + 16/116, fy = (L+16)/116, fz = (L+16)/116 - b/200
        [(gf[0] + gf[1] + gf[2]) / 116.0, gf[0] / 500.0, -gf[2] / 200.0]
    }
}

/// Planar `[L, a, b]` image.
#[derive(Debug, Clone, PartialEq)]
pub struct LabImage {
    data: Tensor,
    /// Number of input samples that were outside `[0, 1]` and got clamped.
    pub clamped_inputs: usize,
}

impl LabImage {
    pub fn from_tensor(data: Tensor) -> Result<Self> {
        // same layout contract as Image
        let img = Image::from_tensor(data)?;
        Ok(Self {
            data: img.into_tensor(),
            clamped_inputs: 0,
        })
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    fn plane(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn l(&self) -> &[f64] {
        self.plane(0)
    }

    pub fn a(&self) -> &[f64] {
        self.plane(1)
    }

    pub fn b(&self) -> &[f64] {
        self.plane(2)
    }

    pub fn l_mut(&mut self) -> &mut [f64] {
        let n = self.height() * self.width();
        &mut self.data.data_mut()[..n]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }
}

fn gather(data: &[f64], n: usize, p: usize) -> [f64; 3] {
    [data[p], data[n + p], data[2 * n + p]]
}

fn scatter(data: &mut [f64], n: usize, p: usize, v: [f64; 3]) {
    data[p] = v[0];
    data[n + p] = v[1];
    data[2 * n + p] = v[2];
}

/// Out-of-range inputs are clamped to `[0, 1]` and counted in
/// [`LabImage::clamped_inputs`].
pub fn rgb_to_lab(img: &Image) -> LabImage {
    let n = img.pixel_count();
    let src = img.data();
    let mut out = Tensor::zeros(img.tensor().shape());
    let mut clamped = 0;
    for p in 0..n {
        let mut rgb = gather(src, n, p);
        for v in rgb.iter_mut() {
            if !(0.0..=1.0).contains(v) {
                clamped += 1;
                *v = v.clamp(0.0, 1.0);
            }
        }
        scatter(out.data_mut(), n, p, rgb_px(rgb).0);
    }
    LabImage {
        data: out,
        clamped_inputs: clamped,
    }
}

/// Gradient w.r.t. the RGB input given a `[3, H, W]` cotangent on `[L, a, b]`.
/// Samples that were clamped in the forward pass receive zero gradient.
pub fn rgb_to_lab_backward(grad_lab: &Tensor, saved_input: &Image) -> Result<Tensor> {
    grad_lab.check_same_shape(saved_input.tensor(), "rgb_to_lab_backward")?;
    let n = saved_input.pixel_count();
    let src = saved_input.data();
    let g = grad_lab.data();
    let mut out = Tensor::zeros(grad_lab.shape());
    for p in 0..n {
        let rgb = gather(src, n, p);
        let inside = rgb.map(|v| (0.0..=1.0).contains(&v));
        let (_, deriv) = rgb_px(rgb.map(|v| v.clamp(0.0, 1.0)));
        let mut grad = deriv.vjp(gather(g, n, p));
        for c in 0..3 {
            if !inside[c] {
                grad[c] = 0.0;
            }
        }
        scatter(out.data_mut(), n, p, grad);
    }
    Ok(out)
}

/// Result of [`lab_to_rgb`] before and after the final clamp.
#[derive(Debug, Clone)]
pub struct LabToRgb {
    pub image: Image,
    /// Per-sample flag: the unclamped value was outside `[0, 1]`.
    pub clamp_mask: Vec<bool>,
}

impl LabToRgb {
    /// Fraction of pixels where at least one channel was clamped.
    pub fn clamp_active_fraction(&self) -> f64 {
        let n = self.image.pixel_count();
        let active = (0..n)
            .filter(|&p| self.clamp_mask[p] || self.clamp_mask[n + p] || self.clamp_mask[2 * n + p])
            .count();
        active as f64 / n as f64
    }

    pub fn pixel_clamped(&self, p: usize) -> bool {
        let n = self.image.pixel_count();
        self.clamp_mask[p] || self.clamp_mask[n + p] || self.clamp_mask[2 * n + p]
    }
}

pub fn lab_to_rgb(lab: &LabImage) -> LabToRgb {
    let (h, w) = (lab.height(), lab.width());
    let n = h * w;
    let src = lab.data.data();
    let mut out = vec![0.0; 3 * n];
    let mut mask = vec![false; 3 * n];
    for p in 0..n {
        let (rgb, _) = lab_px(gather(src, n, p));
        for c in 0..3 {
            let v = rgb[c];
            mask[c * n + p] = !(0.0..=1.0).contains(&v);
            out[c * n + p] = v.clamp(0.0, 1.0);
        }
    }
    LabToRgb {
        image: Image::from_planar(h, w, out).expect("shape preserved"),
        clamp_mask: mask,
    }
}

/// Gradient w.r.t. `[L, a, b]` given a cotangent on the clamped RGB output.
/// Clamped samples pass no gradient.
pub fn lab_to_rgb_backward(grad_rgb: &Tensor, saved_input: &LabImage) -> Result<Tensor> {
    grad_rgb.check_same_shape(&saved_input.data, "lab_to_rgb_backward")?;
    let n = saved_input.height() * saved_input.width();
    let src = saved_input.data.data();
    let g = grad_rgb.data();
    let mut out = Tensor::zeros(grad_rgb.shape());
    for p in 0..n {
        let (rgb, deriv) = lab_px(gather(src, n, p));
        let mut gp = gather(g, n, p);
        for c in 0..3 {
            if !(0.0..=1.0).contains(&rgb[c]) {
                gp[c] = 0.0;
            }
        }
        scatter(out.data_mut(), n, p, deriv.vjp(gp));
    }
    Ok(out)
}

/// Single-pixel convenience wrapper around [`rgb_to_lab`].
pub fn rgb_to_lab_pixel(rgb: [f64; 3]) -> [f64; 3] {
    rgb_px(rgb.map(|v| v.clamp(0.0, 1.0))).0
}

/// Single-pixel convenience wrapper around [`lab_to_rgb`] (clamped).
pub fn lab_to_rgb_pixel(lab: [f64; 3]) -> [f64; 3] {
    lab_px(lab).0.map(|v| v.clamp(0.0, 1.0))
}
