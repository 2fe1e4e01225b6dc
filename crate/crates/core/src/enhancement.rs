//! Structure/detail decomposition of the L channel and sigmoid detail
//! enhancement.
//!
//! The enhanced lightness is
//!
//! ```text
//! L' = (f((L_s − v1)/100, v2)·100 + v1) + f(L_d/100, v3)·100,
//! f(a, b) = 1/(1 + e^(−ab)) − 1/2
//! ```
//!
//! where `L_s` is the lightness of the structure image and `L_d = L − L_s`
//! the detail layer. Chroma (`a`, `b`) is taken from the original image.

use serde::{Deserialize, Serialize};

use crate::color::{lab_to_rgb, lab_to_rgb_backward, rgb_to_lab, rgb_to_lab_backward, LabImage};
use crate::error::{Error, Result};
use crate::image::Image;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EnhancementParams {
    /// Sigmoid midpoint in L units.
    pub v1: f64,
    /// Slope applied to the structure layer.
    pub v2: f64,
    /// Slope applied to the detail layer.
    pub v3: f64,
}

impl Default for EnhancementParams {
    fn default() -> Self {
        Self {
            v1: 56.0,
            v2: 1.0,
            v3: 15.0,
        }
    }
}

impl EnhancementParams {
    pub fn validate(&self) -> Result<()> {
        if self.v2 > 0.0 && self.v3 > 0.0 && (0.0..=100.0).contains(&self.v1) {
            Ok(())
        } else {
            Err(Error::invalid(
                "EnhancementParams",
                format!("need v2 > 0, v3 > 0, v1 in [0, 100]; got {self:?}"),
            ))
        }
    }
}

/// `1/(1 + e^(−ab)) − 1/2`, evaluated as `tanh(ab/2)/2` which is odd and
/// does not overflow.
pub fn sigmoid_remap(a: f64, b: f64) -> f64 {
    0.5 * (0.5 * a * b).tanh()
}

/// `∂/∂a` of [`sigmoid_remap`].
pub fn sigmoid_remap_slope(a: f64, b: f64) -> f64 {
    let f = sigmoid_remap(a, b);
    b * (0.25 - f * f)
}

pub fn enhance_l_pixel(structure_l: f64, detail_l: f64, p: &EnhancementParams) -> f64 {
    (sigmoid_remap((structure_l - p.v1) / 100.0, p.v2) * 100.0 + p.v1)
        + sigmoid_remap(detail_l / 100.0, p.v3) * 100.0
}

/// Enhanced lightness, no clamping.
pub fn enhance_l(structure_l: &[f64], detail_l: &[f64], p: &EnhancementParams) -> Result<Vec<f64>> {
    if structure_l.len() != detail_l.len() {
        return Err(Error::shape("enhance_l", "detail length", structure_l.len(), detail_l.len()));
    }
    Ok(structure_l
        .iter()
        .zip(detail_l)
        .map(|(&s, &d)| enhance_l_pixel(s, d, p))
        .collect())
}

/// Returns `(∂/∂structure_l, ∂/∂detail_l)` cotangents, treating the two
/// inputs as independent.
pub fn enhance_l_backward(
    grad_out: &[f64],
    structure_l: &[f64],
    detail_l: &[f64],
    p: &EnhancementParams,
) -> Result<(Vec<f64>, Vec<f64>)> {
    if grad_out.len() != structure_l.len() || grad_out.len() != detail_l.len() {
        return Err(Error::shape("enhance_l_backward", "length", grad_out.len(), structure_l.len()));
    }
    let mut gs = Vec::with_capacity(grad_out.len());
    let mut gd = Vec::with_capacity(grad_out.len());
    for ((&g, &s), &d) in grad_out.iter().zip(structure_l).zip(detail_l) {
        // the ·100 and /100 scalings cancel
        gs.push(g * sigmoid_remap_slope((s - p.v1) / 100.0, p.v2));
        gd.push(g * sigmoid_remap_slope(d / 100.0, p.v3));
    }
    Ok((gs, gd))
}

/// Lightness split of an image into structure and detail.
#[derive(Debug, Clone)]
pub struct Decomposition {
    pub structure: Image,
    pub structure_l: Vec<f64>,
    pub detail_l: Vec<f64>,
}

impl Decomposition {
    pub fn new(original_lab: &LabImage, structure: Image) -> Result<Self> {
        if structure.height() != original_lab.height() || structure.width() != original_lab.width() {
            return Err(Error::shape(
                "Decomposition::new",
                "structure pixels",
                original_lab.height() * original_lab.width(),
                structure.pixel_count(),
            ));
        }
        let structure_lab = rgb_to_lab(&structure);
        let structure_l = structure_lab.l().to_vec();
        let detail_l = original_lab.l().iter().zip(&structure_l).map(|(l, s)| l - s).collect();
        Ok(Self {
            structure,
            structure_l,
            detail_l,
        })
    }
}

/// Everything [`compose_adversarial_backward`] needs.
#[derive(Debug, Clone)]
pub struct ComposeCache {
    decomposition: Decomposition,
    enhanced_lab: LabImage,
    params: EnhancementParams,
}

#[derive(Debug, Clone)]
pub struct Composed {
    /// Adversarial RGB image, clamped to `[0, 1]`.
    pub image: Image,
    /// The recombined Lab image before conversion back to RGB.
    pub lab: LabImage,
    pub clamp_mask: Vec<bool>,
    pub clamp_active_fraction: f64,
    pub cache: ComposeCache,
}

impl Composed {
    pub fn pixel_clamped(&self, p: usize) -> bool {
        let n = self.image.pixel_count();
        self.clamp_mask[p] || self.clamp_mask[n + p] || self.clamp_mask[2 * n + p]
    }
}

/// Builds the detail-enhanced image from the original and a structure image.
pub fn compose_adversarial(original: &Image, structure: &Image, p: &EnhancementParams) -> Result<Composed> {
    let original_lab = rgb_to_lab(original);
    compose_with_lab(&original_lab, structure, p)
}

/// Like [`compose_adversarial`] with the original's Lab conversion precomputed.
pub fn compose_with_lab(original_lab: &LabImage, structure: &Image, p: &EnhancementParams) -> Result<Composed> {
    p.validate()?;
    let decomposition = Decomposition::new(original_lab, structure.clone())?;
    let enhanced_l = enhance_l(&decomposition.structure_l, &decomposition.detail_l, p)?;
    let mut lab = original_lab.clone();
    lab.clamped_inputs = 0;
    lab.l_mut().copy_from_slice(&enhanced_l);
    let rgb = lab_to_rgb(&lab);
    let clamp_active_fraction = rgb.clamp_active_fraction();
    Ok(Composed {
        image: rgb.image,
        lab: lab.clone(),
        clamp_mask: rgb.clamp_mask,
        clamp_active_fraction,
        cache: ComposeCache {
            decomposition,
            enhanced_lab: lab,
            params: *p,
        },
    })
}

/// Cotangent on the structure image given a cotangent on the adversarial RGB
/// output. The original image is constant.
pub fn compose_adversarial_backward(grad_rgb: &Tensor, cache: &ComposeCache) -> Result<Tensor> {
    let grad_lab = lab_to_rgb_backward(grad_rgb, &cache.enhanced_lab)?;
    let n = cache.decomposition.structure.pixel_count();
    let grad_l = &grad_lab.data()[..n];
    let d = &cache.decomposition;
    let (gs, gd) = enhance_l_backward(grad_l, &d.structure_l, &d.detail_l, &cache.params)?;
    // detail_l = L(original) − L(structure)
    let mut grad_structure_lab = Tensor::zeros(grad_rgb.shape());
    for (dst, (a, b)) in grad_structure_lab.data_mut()[..n].iter_mut().zip(gs.iter().zip(&gd)) {
        *dst = a - b;
    }
    rgb_to_lab_backward(&grad_structure_lab, &d.structure)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::rgb_to_lab_pixel;
    use crate::tensor::finite_diff_check;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    /// `1/(1+e^{-z}) - 1/2` straight from the definition.
    fn sigmoid_reference(a: f64, b: f64) -> f64 {
        1.0 / (1.0 + (-a * b).exp()) - 0.5
    }

    #[test]
    fn remap_values() {
        assert_eq!(sigmoid_remap(0.0, 3.0), 0.0);
        assert!((sigmoid_remap(1.0, 1.0) - 0.231_058_578_630_004_9).abs() < 1e-9);
        assert!((sigmoid_remap(800.0, 1.0) - 0.5).abs() < 1e-15);
        assert!((sigmoid_remap(-800.0, 1.0) + 0.5).abs() < 1e-15);
        for &(a, b) in &[(0.3, 2.0), (-1.7, 0.5), (0.05, 15.0)] {
            assert!((sigmoid_remap(a, b) - sigmoid_reference(a, b)).abs() < 1e-15);
            assert!((sigmoid_remap(-a, b) + sigmoid_remap(a, b)).abs() < 1e-15);
        }
    }

    #[test]
    fn enhance_at_midpoint_is_identity() {
        let p = EnhancementParams::default();
        assert_eq!(enhance_l_pixel(56.0, 0.0, &p), 56.0);
    }

    #[test]
    fn ten_unit_detail_is_magnified() {
        let p = EnhancementParams::default();
        let term = enhance_l_pixel(56.0, 10.0, &p) - 56.0;
        // 100 * (1/(1+e^-1.5) - 1/2)
        assert!((term - 31.757_447_619_364_36).abs() < 1e-3, "{term}");
    }

    #[test]
    fn slope_at_origin() {
        let p = EnhancementParams::default();
        let (_, gd) = enhance_l_backward(&[1.0], &[p.v1], &[0.0], &p).unwrap();
        assert!((gd[0] - p.v3 / 4.0).abs() < 1e-15);
    }

    #[test]
    fn enhance_gradients() {
        let p = EnhancementParams::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let s = Tensor::from_fn(&[12], |_| rng.gen_range(0.0..100.0));
            let d = Tensor::from_fn(&[12], |_| rng.gen_range(-20.0..20.0));
            let r: Vec<f64> = (0..12).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let dot = |v: &[f64]| v.iter().zip(&r).map(|(a, b)| a * b).sum::<f64>();
            let err = finite_diff_check(
                |sv| {
                    let out = enhance_l(sv.data(), d.data(), &p)?;
                    let (gs, _) = enhance_l_backward(&r, sv.data(), d.data(), &p)?;
                    Ok((dot(&out), Tensor::new(vec![12], gs)?))
                },
                &s,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "structure {err}");
            let err = finite_diff_check(
                |dv| {
                    let out = enhance_l(s.data(), dv.data(), &p)?;
                    let (_, gd) = enhance_l_backward(&r, s.data(), dv.data(), &p)?;
                    Ok((dot(&out), Tensor::new(vec![12], gd)?))
                },
                &d,
                1e-5,
            )
            .unwrap();
            assert!(err < 1e-4, "detail {err}");
        }
    }

    #[test]
    fn detail_is_amplified_over_small_range() {
        let p = EnhancementParams::default();
        for i in -1000..=1000 {
            let d = i as f64 / 100.0;
            let term = sigmoid_remap(d / 100.0, p.v3) * 100.0;
            assert!(term.abs() >= d.abs(), "{d}: {term}");
        }
    }

    #[test]
    fn chroma_is_preserved_before_clamp() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let orig = Image::from_planar(4, 4, (0..48).map(|_| rng.gen_range(0.0..1.0)).collect()).unwrap();
        let structure = Image::from_planar(4, 4, (0..48).map(|_| rng.gen_range(-0.2..1.2)).collect()).unwrap();
        let out = compose_adversarial(&orig, &structure, &EnhancementParams::default()).unwrap();
        let lab = rgb_to_lab(&orig);
        assert_eq!(out.lab.a(), lab.a());
        assert_eq!(out.lab.b(), lab.b());
    }

    #[test]
    fn fixed_point_at_midpoint() {
        // a gray whose lightness is exactly v1 is left alone when structure == original
        let mut lo = 0.0f64;
        let mut hi = 1.0f64;
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if rgb_to_lab_pixel([mid, mid, mid])[0] < 56.0 {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        let g = 0.5 * (lo + hi);
        let orig = Image::filled(3, 3, [g, g, g]);
        let out = compose_adversarial(&orig, &orig, &EnhancementParams::default()).unwrap();
        assert!(out.image.max_abs_diff(&orig).unwrap() < 1e-9);
    }

    #[test]
    fn compose_gradient() {
        let p = EnhancementParams::default();
        for seed in 0..10 {
            let mut rng = ChaCha8Rng::seed_from_u64(20 + seed);
            let orig = Image::from_planar(3, 3, (0..27).map(|_| rng.gen_range(0.2..0.8)).collect()).unwrap();
            let structure = Image::from_planar(
                3,
                3,
                orig.data().iter().map(|v| v + rng.gen_range(-0.03..0.03)).collect(),
            )
            .unwrap();
            let r = Tensor::from_fn(&[3, 3, 3], |_| rng.gen_range(-1.0..1.0));
            let orig_lab = rgb_to_lab(&orig);
            let err = finite_diff_check(
                |t| {
                    let s = Image::from_tensor(t.clone())?;
                    let out = compose_with_lab(&orig_lab, &s, &p)?;
                    let g = compose_adversarial_backward(&r, &out.cache)?;
                    Ok((out.image.tensor().dot(&r)?, g))
                },
                structure.tensor(),
                1e-6,
            )
            .unwrap();
            assert!(err < 1e-4, "seed {seed}: {err}");
        }
    }
}
