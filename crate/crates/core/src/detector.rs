//! Feature-squeezing detection: compare the classifier's probability vector
//! on an image with the one on a squeezed copy, flag the image when the ℓ1
//! distance exceeds a threshold calibrated on clean images.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::classifier::{classify, ClassifierModel};
use crate::error::{Error, Result};
use crate::image::Image;

/// Minimum clean sample for [`calibrate`].
pub const MIN_CALIBRATION_IMAGES: usize = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Squeezer {
    BitDepth { bits: u32 },
    Median { size: usize },
}

impl Squeezer {
    /// Bit depths 4–7 and 2×2 / 3×3 medians.
    pub fn default_set() -> Vec<Squeezer> {
        let mut v: Vec<Squeezer> = (4..=7).map(|bits| Squeezer::BitDepth { bits }).collect();
        v.extend([2, 3].map(|size| Squeezer::Median { size }));
        v
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Squeezer::BitDepth { bits } if !(1..=8).contains(&bits) => {
                Err(Error::invalid("Squeezer", format!("bit depth {bits} outside 1..=8")))
            }
            Squeezer::Median { size: 0 } => Err(Error::invalid("Squeezer", "median window must be at least 1")),
            _ => Ok(()),
        }
    }

    pub fn apply(&self, img: &Image) -> Image {
        match *self {
            Squeezer::BitDepth { bits } => bit_depth_reduce(img, bits),
            Squeezer::Median { size } => median_filter(img, size),
        }
    }

    /// Short label: `4b` … `7b` for bit depths, `2m`, `3m` for medians.
    pub fn label(&self) -> String {
        self.to_string()
    }
}

impl fmt::Display for Squeezer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Squeezer::BitDepth { bits } => write!(f, "{bits}b"),
            Squeezer::Median { size } => write!(f, "{size}m"),
        }
    }
}

/// `floor(x·(2^b − 1) + 1/2) / (2^b − 1)` per value, after clamping to `[0, 1]`.
pub fn bit_depth_reduce(img: &Image, bits: u32) -> Image {
    let levels = ((1u64 << bits.clamp(1, 52)) - 1) as f64;
    let t = img.tensor().map(|v| (v.clamp(0.0, 1.0) * levels + 0.5).floor() / levels);
    Image::from_tensor(t).expect("shape preserved")
}

/// Per-channel `k×k` median with replicate padding.
///
/// The window around `(y, x)` spans offsets `-(k/2) ..= (k-1)/2` on each axis
/// (so a 2×2 window covers the pixel, its upper and left neighbours). For
/// an even number of samples the lower of the two middle values is taken.
pub fn median_filter(img: &Image, k: usize) -> Image {
    let (h, w) = (img.height(), img.width());
    let lo = (k / 2) as isize;
    let hi = ((k.max(1) - 1) / 2) as isize;
    let mut out = img.clone();
    let mut window = Vec::with_capacity(k * k);
    for c in 0..3 {
        let src = img.channel(c);
        for y in 0..h {
            for x in 0..w {
                window.clear();
                for dy in -lo..=hi {
                    let yy = (y as isize + dy).clamp(0, h as isize - 1) as usize;
                    for dx in -lo..=hi {
                        let xx = (x as isize + dx).clamp(0, w as isize - 1) as usize;
                        window.push(src[yy * w + xx]);
                    }
                }
                window.sort_by(f64::total_cmp);
                out.data_mut()[c * h * w + y * w + x] = window[(window.len() - 1) / 2];
            }
        }
    }
    out
}

/// `Σ_d |p_d(img) − p_d(squeeze(img))|` for each squeezer, in `[0, 2]`.
pub fn squeeze_score(model: &ClassifierModel, img: &Image, squeezers: &[Squeezer]) -> Result<Vec<f64>> {
    let base = classify(model, img)?.probs;
    squeezers
        .iter()
        .map(|s| {
            let p = classify(model, &s.apply(img))?.probs;
            Ok(base.iter().zip(&p).map(|(a, b)| (a - b).abs()).sum())
        })
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorCalibration {
    pub squeezers: Vec<Squeezer>,
    pub thresholds: Vec<f64>,
    /// Threshold on the maximum score over all squeezers.
    pub joint_threshold: f64,
    pub target_fpr: f64,
    pub sample_size: usize,
    /// Clean scores, one row per calibration image.
    pub scores: Vec<Vec<f64>>,
}

/// Lowest sample value `t` such that at most `floor(target·N)` samples are
/// strictly greater than `t`.
pub fn fpr_threshold(scores: &[f64], target_fpr: f64) -> f64 {
    let mut sorted = scores.to_vec();
    sorted.sort_by(f64::total_cmp);
    let n = sorted.len();
    let allowed = ((target_fpr * n as f64) + 1e-9).floor() as usize;
    if allowed >= n {
        return f64::NEG_INFINITY;
    }
    sorted[n - allowed - 1]
}

pub fn calibrate(
    model: &ClassifierModel,
    clean: &[Image],
    squeezers: &[Squeezer],
    target_fpr: f64,
) -> Result<DetectorCalibration> {
    if clean.len() < MIN_CALIBRATION_IMAGES {
        return Err(Error::invalid(
            "calibrate",
            format!("need at least {MIN_CALIBRATION_IMAGES} clean images, got {}", clean.len()),
        ));
    }
    let scores = clean
        .iter()
        .map(|img| squeeze_score(model, img, squeezers))
        .collect::<Result<Vec<_>>>()?;
    calibrate_from_scores(squeezers, scores, target_fpr)
}

/// Calibration from precomputed clean scores (rows in squeezer order).
pub fn calibrate_from_scores(
    squeezers: &[Squeezer],
    scores: Vec<Vec<f64>>,
    target_fpr: f64,
) -> Result<DetectorCalibration> {
    if !(0.0..1.0).contains(&target_fpr) {
        return Err(Error::invalid("calibrate", format!("target_fpr {target_fpr} outside [0, 1)")));
    }
    if scores.is_empty() {
        return Err(Error::invalid("calibrate", "no clean scores"));
    }
    for s in squeezers {
        s.validate()?;
    }
    if let Some(row) = scores.iter().find(|r| r.len() != squeezers.len()) {
        return Err(Error::shape("calibrate", "scores per image", squeezers.len(), row.len()));
    }
    let thresholds = (0..squeezers.len())
        .map(|j| fpr_threshold(&scores.iter().map(|r| r[j]).collect::<Vec<_>>(), target_fpr))
        .collect();
    let joint: Vec<f64> = scores.iter().map(|r| r.iter().cloned().fold(0.0, f64::max)).collect();
    Ok(DetectorCalibration {
        squeezers: squeezers.to_vec(),
        thresholds,
        joint_threshold: fpr_threshold(&joint, target_fpr),
        target_fpr,
        sample_size: scores.len(),
        scores,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub scores: Vec<f64>,
    /// `score > threshold`, per squeezer.
    pub flags: Vec<bool>,
    /// Max score over squeezers against the joint threshold.
    pub joint_flag: bool,
}

impl DetectorCalibration {
    pub fn judge(&self, scores: Vec<f64>) -> Detection {
        let flags = scores.iter().zip(&self.thresholds).map(|(s, t)| s > t).collect();
        let max = scores.iter().cloned().fold(0.0, f64::max);
        Detection {
            joint_flag: max > self.joint_threshold,
            flags,
            scores,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

pub fn is_adversarial(cal: &DetectorCalibration, model: &ClassifierModel, img: &Image) -> Result<Detection> {
    Ok(cal.judge(squeeze_score(model, img, &cal.squeezers)?))
}
