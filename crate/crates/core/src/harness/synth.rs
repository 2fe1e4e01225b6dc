//! Synthetic "textured shapes" desk dataset: ten classes of 32×32 images
//! with random colours, placement, scale and sensor-like noise.

use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::lab_to_rgb_pixel;
use crate::error::Result;
use crate::image::Image;

pub const CLASS_NAMES: [&str; 10] = [
    "00_circle",
    "01_square",
    "02_triangle",
    "03_hstripes",
    "04_vstripes",
    "05_dstripes",
    "06_checker",
    "07_ring",
    "08_cross",
    "09_dots",
];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub size: usize,
    pub train_per_class: usize,
    pub test_per_class: usize,
    /// Clean images for detector calibration.
    pub calib_per_class: usize,
    /// Clean images for measuring the detector's false-positive rate.
    pub heldout_per_class: usize,
    /// Standard deviation of the additive pixel noise.
    pub noise: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            size: 32,
            train_per_class: 200,
            test_per_class: 40,
            calib_per_class: 100,
            heldout_per_class: 100,
            noise: 0.03,
        }
    }
}

pub const SPLITS: [&str; 4] = ["train", "test", "calib", "heldout"];

/// An in-gamut colour with moderate chroma, returned as (Lab, RGB).
fn color(rng: &mut ChaCha8Rng) -> ([f64; 3], [f64; 3]) {
    loop {
        let lab = [rng.gen_range(25.0..85.0), rng.gen_range(-30.0..30.0), rng.gen_range(-30.0..30.0)];
        let rgb = lab_to_rgb_pixel(lab);
        if rgb.iter().all(|v| (0.02..=0.98).contains(v)) {
            return (lab, rgb);
        }
    }
}

/// A foreground colour well separated from the background in lightness.
fn contrasting(rng: &mut ChaCha8Rng, bg: [f64; 3]) -> [f64; 3] {
    loop {
        let (lab, rgb) = color(rng);
        if (lab[0] - bg[0]).abs() > 20.0 {
            return rgb;
        }
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    // Box–Muller; one value per call keeps the stream simple.
    let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
    let u2: f64 = rng.gen();
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

/// Renders one image of `class` (index into [`CLASS_NAMES`]).
pub fn synthetic_image(class: usize, size: usize, noise: f64, rng: &mut ChaCha8Rng) -> Image {
    let s = size as f64;
    let (bg_lab, bg) = color(rng);
    let fg = contrasting(rng, bg_lab);
    let cx = s * rng.gen_range(0.35..0.65);
    let cy = s * rng.gen_range(0.35..0.65);
    let r = s * rng.gen_range(0.22..0.34);
    let period = s * rng.gen_range(0.18..0.3);
    let phase = rng.gen_range(0.0..period);
    let anti = rng.gen_bool(0.5);
    // Low-amplitude background texture so images carry fine detail.
    let tex_f = rng.gen_range(0.3..0.8);
    let tex_a = rng.gen_range(0.02..0.06);

    let inside = |x: f64, y: f64| -> bool {
        let (dx, dy) = (x - cx, y - cy);
        let d = (dx * dx + dy * dy).sqrt();
        match class {
            0 => d < r,
            1 => dx.abs() < 0.85 * r && dy.abs() < 0.85 * r,
            2 => {
                let t = (dy + r) / (2.0 * r);
                (0.0..=1.0).contains(&t) && dx.abs() < t * r
            }
            3 => (y + phase).rem_euclid(period) < period / 2.0,
            4 => (x + phase).rem_euclid(period) < period / 2.0,
            5 => {
                let u = if anti { x + y } else { x - y + s };
                (u + phase).rem_euclid(period * 1.2) < period * 0.6
            }
            6 => {
                let q = period * 0.8;
                (((x + phase) / q).floor() as i64 + ((y + phase) / q).floor() as i64).rem_euclid(2) == 0
            }
            7 => d < r && d > 0.55 * r,
            8 => (dx.abs() < 0.28 * r || dy.abs() < 0.28 * r) && dx.abs() < r && dy.abs() < r,
            _ => {
                let q = period;
                let (mx, my) = ((x + phase).rem_euclid(q) - q / 2.0, (y + phase).rem_euclid(q) - q / 2.0);
                (mx * mx + my * my).sqrt() < q * 0.25
            }
        }
    };

    let n = size * size;
    let mut data = vec![0.0; 3 * n];
    for y in 0..size {
        for x in 0..size {
            // 2×2 supersampling for anti-aliased edges.
            let mut cov = 0.0;
            for (ox, oy) in [(0.25, 0.25), (0.75, 0.25), (0.25, 0.75), (0.75, 0.75)] {
                if inside(x as f64 + ox, y as f64 + oy) {
                    cov += 0.25;
                }
            }
            let tex = tex_a * ((x as f64 * tex_f).sin() * (y as f64 * tex_f * 1.3).cos());
            for c in 0..3 {
                let v = bg[c] * (1.0 - cov) + fg[c] * cov + tex + noise * gauss(rng);
                data[c * n + y * size + x] = v.clamp(0.0, 1.0);
            }
        }
    }
    Image::from_planar(size, size, data).expect("size > 0").quantized()
}

/// Writes `root/<split>/<class>/<index>.png` for every split in [`SPLITS`].
pub fn generate_synthetic(root: &Path, cfg: &SynthConfig, seed: u64) -> Result<()> {
    let counts = [cfg.train_per_class, cfg.test_per_class, cfg.calib_per_class, cfg.heldout_per_class];
    for (si, (split, count)) in SPLITS.iter().zip(counts).enumerate() {
        for (class, name) in CLASS_NAMES.iter().enumerate() {
            let dir = root.join(split).join(name);
            std::fs::create_dir_all(&dir)?;
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream((si * CLASS_NAMES.len() + class) as u64);
            for i in 0..count {
                synthetic_image(class, cfg.size, cfg.noise, &mut rng).save(&dir.join(format!("{i:05}.png")))?;
            }
        }
    }
    Ok(())
}
