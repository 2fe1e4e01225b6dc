//! ℓ0 gradient-minimization smoothing.
//!
//! Approximately minimizes `Σ (S − I)² + λ · #{p : ∇S_p ≠ 0}` by half-quadratic
//! splitting: auxiliary gradients are hard-thresholded jointly over the three
//! channels, then the quadratic subproblem in `S` is solved exactly in the
//! Fourier domain. Boundaries are circular, which is what makes the FFT solve
//! exact. `β` starts at `beta0` and grows by `kappa` until it reaches
//! `beta_max`.

use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::image::Image;

/// Joint gradient magnitude below which a pixel counts as flat.
pub const FLAT_GRADIENT: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct L0Config {
    pub lambda: f64,
    pub kappa: f64,
    pub beta_max: f64,
    pub beta0: f64,
}

impl L0Config {
    pub fn with_lambda(lambda: f64) -> Self {
        Self {
            lambda,
            kappa: 2.0,
            beta_max: 1e5,
            beta0: 2.0 * lambda,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.lambda > 0.0
            && self.kappa > 1.0
            && self.beta0 > 0.0
            && self.beta_max > self.beta0
            && [self.lambda, self.kappa, self.beta0, self.beta_max].iter().all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(
                "l0_smooth",
                format!("need lambda > 0, kappa > 1, beta_max > beta0 > 0; got {self:?}"),
            ))
        }
    }
}

impl Default for L0Config {
    fn default() -> Self {
        Self::with_lambda(0.02)
    }
}

#[derive(Debug, Clone)]
pub struct L0Output {
    /// Final estimate, clamped to `[0, 1]`.
    pub image: Image,
    /// [`l0_energy`] of the unclamped estimate after each outer iteration.
    pub energy_trace: Vec<f64>,
}

pub fn l0_smooth(img: &Image, cfg: &L0Config) -> Result<Image> {
    Ok(l0_smooth_traced(img, cfg)?.image)
}

pub fn l0_smooth_traced(img: &Image, cfg: &L0Config) -> Result<L0Output> {
    cfg.validate()?;
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let fft = Fft2::new(h, w);

    let mut denom = vec![0.0; n];
    for y in 0..h {
        let cy = 2.0 - 2.0 * (2.0 * std::f64::consts::PI * y as f64 / h as f64).cos();
        for x in 0..w {
            let cx = 2.0 - 2.0 * (2.0 * std::f64::consts::PI * x as f64 / w as f64).cos();
            denom[y * w + x] = cx + cy;
        }
    }

    let spectra: Vec<Vec<Complex<f64>>> = (0..3)
        .map(|c| {
            let mut buf: Vec<Complex<f64>> = img.channel(c).iter().map(|&v| Complex::new(v, 0.0)).collect();
            fft.forward(&mut buf);
            buf
        })
        .collect();

    let mut s = img.clone();
    let mut gx = vec![0.0; 3 * n];
    let mut gy = vec![0.0; 3 * n];
    let mut trace = Vec::new();
    let mut beta = cfg.beta0;
    let mut iteration = 0;
    while beta < cfg.beta_max {
        forward_differences(s.data(), h, w, &mut gx, &mut gy);
        let threshold = cfg.lambda / beta;
        for p in 0..n {
            let mag: f64 = (0..3).map(|c| gx[c * n + p].powi(2) + gy[c * n + p].powi(2)).sum();
            if mag <= threshold {
                for c in 0..3 {
                    gx[c * n + p] = 0.0;
                    gy[c * n + p] = 0.0;
                }
            }
        }

        for c in 0..3 {
            let hx = &gx[c * n..(c + 1) * n];
            let vy = &gy[c * n..(c + 1) * n];
            // adjoint of the forward difference: d^T g [x] = g[x-1] - g[x]
            let mut buf: Vec<Complex<f64>> = (0..n)
                .map(|p| {
                    let (y, x) = (p / w, p % w);
                    let xl = (x + w - 1) % w;
                    let yu = (y + h - 1) % h;
                    Complex::new(hx[y * w + xl] - hx[p] + vy[yu * w + x] - vy[p], 0.0)
                })
                .collect();
            fft.forward(&mut buf);
            for ((b, f), d) in buf.iter_mut().zip(&spectra[c]).zip(&denom) {
                *b = (f + *b * beta) / (1.0 + beta * d);
            }
            fft.inverse(&mut buf);
            for (dst, v) in s.data_mut()[c * n..(c + 1) * n].iter_mut().zip(&buf) {
                *dst = v.re;
            }
        }

        if !s.tensor().is_finite() {
            return Err(Error::NonFinite {
                context: "l0_smooth".into(),
                iteration: Some(iteration),
            });
        }
        trace.push(l0_energy(img, &s, cfg.lambda)?);
        beta *= cfg.kappa;
        iteration += 1;
    }

    Ok(L0Output {
        image: s.clamped(),
        energy_trace: trace,
    })
}

/// `Σ (S − I)² + λ · (number of pixels whose joint-channel gradient magnitude
/// exceeds 1e-9)`, using the same circular forward differences as the solver.
pub fn l0_energy(img: &Image, smoothed: &Image, lambda: f64) -> Result<f64> {
    img.tensor().check_same_shape(smoothed.tensor(), "l0_energy")?;
    let fidelity: f64 = img
        .data()
        .iter()
        .zip(smoothed.data())
        .map(|(a, b)| (a - b) * (a - b))
        .sum();
    Ok(fidelity + lambda * gradient_count(smoothed) as f64)
}

/// Number of pixels whose joint-channel gradient magnitude exceeds `1e-9`.
pub fn gradient_count(img: &Image) -> usize {
    let (h, w) = (img.height(), img.width());
    let n = h * w;
    let mut gx = vec![0.0; 3 * n];
    let mut gy = vec![0.0; 3 * n];
    forward_differences(img.data(), h, w, &mut gx, &mut gy);
    (0..n)
        .filter(|&p| {
            let mag: f64 = (0..3).map(|c| gx[c * n + p].powi(2) + gy[c * n + p].powi(2)).sum();
            mag.sqrt() > FLAT_GRADIENT
        })
        .count()
}

fn forward_differences(data: &[f64], h: usize, w: usize, gx: &mut [f64], gy: &mut [f64]) {
    let n = h * w;
    for c in 0..3 {
        let plane = &data[c * n..(c + 1) * n];
        for y in 0..h {
            let yd = (y + 1) % h;
            for x in 0..w {
                let xr = (x + 1) % w;
                let p = y * w + x;
                gx[c * n + p] = plane[y * w + xr] - plane[p];
                gy[c * n + p] = plane[yd * w + x] - plane[p];
            }
        }
    }
}

/// Separable 2-D FFT over a row-major `h × w` buffer.
struct Fft2 {
    h: usize,
    w: usize,
    row_fwd: Arc<dyn Fft<f64>>,
    row_inv: Arc<dyn Fft<f64>>,
    col_fwd: Arc<dyn Fft<f64>>,
    col_inv: Arc<dyn Fft<f64>>,
}

impl Fft2 {
    fn new(h: usize, w: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self {
            h,
            w,
            row_fwd: planner.plan_fft_forward(w),
            row_inv: planner.plan_fft_inverse(w),
            col_fwd: planner.plan_fft_forward(h),
            col_inv: planner.plan_fft_inverse(h),
        }
    }

    fn forward(&self, buf: &mut [Complex<f64>]) {
        self.run(buf, &self.row_fwd, &self.col_fwd);
    }

    fn inverse(&self, buf: &mut [Complex<f64>]) {
        self.run(buf, &self.row_inv, &self.col_inv);
        let scale = 1.0 / (self.h * self.w) as f64;
        buf.iter_mut().for_each(|v| *v *= scale);
    }

    fn run(&self, buf: &mut [Complex<f64>], rows: &Arc<dyn Fft<f64>>, cols: &Arc<dyn Fft<f64>>) {
        rows.process(buf);
        let mut column = vec![Complex::new(0.0, 0.0); self.h];
        for x in 0..self.w {
            for y in 0..self.h {
                column[y] = buf[y * self.w + x];
            }
            cols.process(&mut column);
            for y in 0..self.h {
                buf[y * self.w + x] = column[y];
            }
        }
    }
}
