//! The EdgeFool optimization loop and a one-step FGSM baseline.
//!
//! A fresh structure network is trained per image on
//! `L = α·L_s + L_adv`, where `L_s` pulls the network output towards the
//! ℓ0-smoothed guidance image and `L_adv` is the margin loss of the
//! detail-enhanced image. The loop stops as soon as the enhanced image is
//! misclassified while `L_s < τ`.

use serde::{Deserialize, Serialize};

use crate::classifier::{argmax, classifier_backward_to_input, cross_entropy, margin_loss, ClassifierModel};
use crate::color::rgb_to_lab;
use crate::enhancement::{compose_adversarial_backward, compose_with_lab, EnhancementParams};
use crate::error::{Error, Result};
use crate::fcnn::{fcnn_backward, fcnn_forward, fcnn_init, FcnnArchitecture, FcnnOptimizer};
use crate::image::Image;
use crate::smoothing::{l0_smooth, L0Config};
use crate::tensor::{AdamConfig, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AttackConfig {
    pub alpha: f64,
    pub tau: f64,
    pub enhancement: EnhancementParams,
    pub adam: AdamConfig,
    pub max_iters: usize,
    pub l0: L0Config,
    pub fcnn: FcnnArchitecture,
    pub seed: u64,
    /// When false the margin-loss gradient is dropped and the loop only
    /// regresses the structure image onto the guidance image.
    pub adversarial_gradient: bool,
    /// Confidence floor `κ`: the adversarial term becomes `max(L_adv, −κ)`,
    /// so it stops pulling once the image is misclassified by `κ`. `None`
    /// keeps the unbounded margin.
    pub margin_floor: Option<f64>,
    /// Fit the network to the guidance image before the joint objective
    /// takes over. `None` optimizes the joint loss from the first step.
    pub warmup: Option<Warmup>,
}

/// Per-image initialization of the structure network: only `α·L_s` is
/// minimized, with its own Adam settings, until `L_s < fraction·τ` or
/// `max_iters` steps. The joint phase then starts with fresh optimizer
/// state. Warm-up steps count towards the attack's iteration budget.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Warmup {
    pub adam: AdamConfig,
    pub fraction: f64,
    pub max_iters: usize,
}

impl Default for Warmup {
    fn default() -> Self {
        Self {
            adam: AdamConfig {
                lr: 1e-2,
                beta1: 0.9,
                beta2: 0.9,
                epsilon: 1e-8,
            },
            fraction: 0.3,
            max_iters: 300,
        }
    }
}

impl Default for AttackConfig {
    fn default() -> Self {
        Self {
            alpha: 10.0,
            tau: 5e-4,
            enhancement: EnhancementParams::default(),
            adam: AdamConfig::default(),
            max_iters: 500,
            l0: L0Config::default(),
            fcnn: FcnnArchitecture::default(),
            seed: 0,
            adversarial_gradient: true,
            margin_floor: None,
            warmup: Some(Warmup::default()),
        }
    }
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha.is_finite()) {
            return Err(Error::invalid("AttackConfig", format!("alpha must be positive, got {}", self.alpha)));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(Error::invalid("AttackConfig", format!("tau must be positive, got {}", self.tau)));
        }
        if self.max_iters == 0 {
            return Err(Error::invalid("AttackConfig", "max_iters must be at least 1"));
        }
        if !(self.adam.lr > 0.0) {
            return Err(Error::invalid("AttackConfig", "adam.lr must be positive"));
        }
        self.enhancement.validate()?;
        self.l0.validate()?;
        self.fcnn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub total: f64,
    pub smooth: f64,
    pub adversarial: f64,
}

impl LossBreakdown {
    pub fn new(alpha: f64, smooth: f64, adversarial: f64) -> Self {
        Self {
            total: alpha * smooth + adversarial,
            smooth,
            adversarial,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AttackStatus {
    Success,
    Failed,
    /// The classifier already got the clean image wrong; nothing was run.
    AlreadyMisled,
}

#[derive(Debug, Clone)]
pub struct AttackResult {
    pub status: AttackStatus,
    pub adversarial: Image,
    pub success: bool,
    /// Optimizer steps taken, warm-up included.
    pub iterations: usize,
    /// Steps spent in the structure-only warm-up.
    pub warmup_iterations: usize,
    /// Losses of the returned image; `None` for attacks without a loss
    /// decomposition.
    pub loss: Option<LossBreakdown>,
    pub original_label: usize,
    pub adversarial_label: usize,
    pub mean_abs_diff: f64,
    pub clamp_fraction: f64,
    /// Losses at every evaluated iterate, in order.
    pub trace: Vec<LossBreakdown>,
}

impl AttackResult {
    fn already_misled(img: &Image, label: usize) -> Self {
        Self {
            status: AttackStatus::AlreadyMisled,
            adversarial: img.clone(),
            success: false,
            iterations: 0,
            warmup_iterations: 0,
            loss: None,
            original_label: label,
            adversarial_label: label,
            mean_abs_diff: 0.0,
            clamp_fraction: 0.0,
            trace: Vec::new(),
        }
    }
}

/// Mean squared error and its gradient `2(s − g)/N`.
pub fn smoothing_loss(structure: &Image, guidance: &Image) -> Result<(f64, Tensor)> {
    let diff = structure.tensor().zip_map(guidance.tensor(), |s, g| s - g)?;
    let n = diff.len() as f64;
    let loss = diff.data().iter().map(|d| d * d).sum::<f64>() / n;
    Ok((loss, diff.map(|d| 2.0 * d / n)))
}

fn check_finite(value: f64, what: &str, iteration: usize) -> Result<()> {
    if value.is_finite() {
        Ok(())
    } else {
        Err(Error::NonFinite {
            context: what.to_string(),
            iteration: Some(iteration),
        })
    }
}

/// Runs EdgeFool on one image.
///
/// The attacked label `y` is the classifier's prediction on `img`. If
/// `true_label` is given and differs from it, no attack is run and the
/// result is flagged [`AttackStatus::AlreadyMisled`].
pub fn edgefool_attack(
    img: &Image,
    model: &ClassifierModel,
    cfg: &AttackConfig,
    true_label: Option<usize>,
) -> Result<AttackResult> {
    cfg.validate()?;
    let (clean_logits, _) = model.forward(img)?;
    let y = argmax(&clean_logits);
    if true_label.is_some_and(|t| t != y) {
        return Ok(AttackResult::already_misled(img, y));
    }

    let guidance = l0_smooth(img, &cfg.l0)?;
    let original_lab = rgb_to_lab(img);
    let mut params = fcnn_init(&cfg.fcnn, cfg.seed)?;
    let mut warming = cfg.warmup;
    let mut opt = match warming {
        Some(w) => FcnnOptimizer::new(&params, w.adam),
        None => FcnnOptimizer::new(&params, cfg.adam),
    };
    let mut trace = Vec::new();

    let mut iteration = 0;
    let mut warmup_steps = 0;
    loop {
        let (structure, fcache) = fcnn_forward(img, &params)?;
        let (smooth, smooth_grad) = smoothing_loss(&structure, &guidance)?;
        let composed = compose_with_lab(&original_lab, &structure, &cfg.enhancement)?;
        let (logits, ccache) = model.forward(&composed.image)?;
        let margin = margin_loss(&logits, y)?;
        let floored = cfg.margin_floor.is_some_and(|k| margin.value < -k);
        let adversarial = if floored { -cfg.margin_floor.unwrap_or_default() } else { margin.value };
        let loss = LossBreakdown::new(cfg.alpha, smooth, adversarial);
        check_finite(loss.total, "attack loss", iteration)?;
        trace.push(loss);

        let adversarial_label = argmax(&logits);
        let success = adversarial_label != y && smooth < cfg.tau;
        if success || iteration == cfg.max_iters {
            return Ok(AttackResult {
                status: if success { AttackStatus::Success } else { AttackStatus::Failed },
                mean_abs_diff: composed.image.mean_abs_diff(img)?,
                clamp_fraction: composed.clamp_active_fraction,
                adversarial: composed.image,
                success,
                iterations: iteration,
                warmup_iterations: warmup_steps,
                loss: Some(loss),
                original_label: y,
                adversarial_label,
                trace,
            });
        }

        if let Some(w) = warming {
            if smooth < w.fraction * cfg.tau || iteration >= w.max_iters {
                warming = None;
                opt = FcnnOptimizer::new(&params, cfg.adam);
            }
        }
        if warming.is_some() {
            warmup_steps += 1;
        }
        let mut grad = smooth_grad;
        grad.scale(cfg.alpha);
        if cfg.adversarial_gradient && !floored && warming.is_none() {
            let g_img = classifier_backward_to_input(model, &ccache, &margin.grad)?;
            grad.add_assign(&compose_adversarial_backward(&g_img, &composed.cache)?)?;
        }
        let grads = fcnn_backward(&grad, &fcache, &params)?;
        for g in &grads {
            g.ensure_finite("structure-network gradient")?;
        }
        opt.step(&mut params, &grads)?;
        iteration += 1;
    }
}

/// One-step sign attack on the cross-entropy of the predicted label:
/// `clamp(I + ε·sign(∇_I CE))`.
pub fn fgsm_attack(img: &Image, model: &ClassifierModel, epsilon: f64, true_label: Option<usize>) -> Result<AttackResult> {
    if !(epsilon >= 0.0 && epsilon.is_finite()) {
        return Err(Error::invalid("fgsm_attack", format!("epsilon must be non-negative, got {epsilon}")));
    }
    let (logits, cache) = model.forward(img)?;
    let y = argmax(&logits);
    if true_label.is_some_and(|t| t != y) {
        return Ok(AttackResult::already_misled(img, y));
    }
    let (_, ce_grad) = cross_entropy(&logits, y);
    let g = classifier_backward_to_input(model, &cache, &ce_grad)?;
    let mut clamp_count = 0usize;
    let perturbed = img.tensor().zip_map(&g, |x, gv| {
        let v = x + epsilon * sign(gv);
        v.clamp(0.0, 1.0)
    })?;
    for (x, gv) in img.data().iter().zip(g.data()) {
        let v = x + epsilon * sign(*gv);
        clamp_count += usize::from(!(0.0..=1.0).contains(&v));
    }
    let adversarial = Image::from_tensor(perturbed)?;
    let adversarial_label = argmax(&model.forward(&adversarial)?.0);
    let success = adversarial_label != y;
    Ok(AttackResult {
        status: if success { AttackStatus::Success } else { AttackStatus::Failed },
        mean_abs_diff: adversarial.mean_abs_diff(img)?,
        clamp_fraction: clamp_count as f64 / img.data().len() as f64,
        adversarial,
        success,
        iterations: 1,
        warmup_iterations: 0,
        loss: None,
        original_label: y,
        adversarial_label,
        trace: Vec::new(),
    })
}

fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}
