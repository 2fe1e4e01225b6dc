//! End-to-end evaluation: attack every correctly classified image, measure
//! transfer to other classifiers and detection by feature squeezing.

use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::dataset::{load_dataset, Dataset};
use super::report::{compute_metrics, write_rows_csv, ImageRow, MethodRow, Metrics, RowSchema, RowStatus};
use crate::attack::{edgefool_attack, fgsm_attack, AttackConfig, AttackResult};
use crate::classifier::{argmax, load_model, ClassifierModel};
use crate::detector::{calibrate, is_adversarial, squeeze_score, DetectorCalibration, Squeezer};
use crate::error::{Error, Result};
use crate::image::Image;

pub const CONFIG_VERSION: u32 = 1;
pub const REPORT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FgsmConfig {
    /// Tried in ascending order per image; the first that misleads the
    /// target is kept, otherwise the largest.
    pub epsilons: Vec<f64>,
}

impl Default for FgsmConfig {
    fn default() -> Self {
        Self {
            epsilons: [1.0, 2.0, 4.0, 8.0, 16.0, 32.0].map(|k| k / 255.0).to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub version: u32,
    /// Class-per-directory tree of images to attack.
    pub dataset: PathBuf,
    pub target_model: PathBuf,
    pub transfer_models: Vec<PathBuf>,
    pub attack: AttackConfig,
    /// `None` skips the FGSM baseline.
    pub fgsm: Option<FgsmConfig>,
    pub squeezers: Vec<Squeezer>,
    /// Clean images for detector calibration; `None` skips detection.
    pub calibration_dataset: Option<PathBuf>,
    /// Clean images for measuring the calibrated false-positive rate.
    pub heldout_dataset: Option<PathBuf>,
    pub target_fpr: f64,
    pub output_dir: PathBuf,
    pub jobs: usize,
    /// Master seed; image `i` is attacked with a seed derived from `(seed, i)`.
    pub seed: u64,
    /// Stop after this many correctly classified images, visiting classes
    /// round-robin (see [`attack_order`]).
    pub max_attacked: Option<usize>,
    pub save_images: bool,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            version: CONFIG_VERSION,
            dataset: PathBuf::new(),
            target_model: PathBuf::new(),
            transfer_models: Vec::new(),
            attack: AttackConfig::default(),
            fgsm: Some(FgsmConfig::default()),
            squeezers: Squeezer::default_set(),
            calibration_dataset: None,
            heldout_dataset: None,
            target_fpr: 0.05,
            output_dir: PathBuf::from("eval-out"),
            jobs: 1,
            seed: 0,
            max_attacked: None,
            save_images: true,
        }
    }
}

impl ExperimentConfig {
    /// Reads a JSON config; relative paths are taken relative to the file.
    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::invalid("ExperimentConfig", format!("{}: {e}", path.display())))?;
        let mut cfg: ExperimentConfig = serde_json::from_slice(&bytes)
            .map_err(|e| Error::invalid("ExperimentConfig", format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() && !p.as_os_str().is_empty() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.dataset);
        fix(&mut cfg.target_model);
        fix(&mut cfg.output_dir);
        cfg.transfer_models.iter_mut().for_each(fix);
        cfg.calibration_dataset.iter_mut().for_each(fix);
        cfg.heldout_dataset.iter_mut().for_each(fix);
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.version != CONFIG_VERSION {
            return Err(Error::invalid("ExperimentConfig", format!("unsupported version {}", self.version)));
        }
        self.attack.validate()?;
        for s in &self.squeezers {
            s.validate()?;
        }
        if self.jobs == 0 {
            return Err(Error::invalid("ExperimentConfig", "jobs must be at least 1"));
        }
        if let Some(f) = &self.fgsm {
            if f.epsilons.is_empty() || f.epsilons.iter().any(|e| !(*e >= 0.0 && e.is_finite())) {
                return Err(Error::invalid("ExperimentConfig", "fgsm.epsilons must be non-empty and non-negative"));
            }
        }
        let mut paths = vec![&self.dataset, &self.target_model];
        paths.extend(&self.transfer_models);
        paths.extend(self.calibration_dataset.as_ref());
        paths.extend(self.heldout_dataset.as_ref());
        for p in paths {
            if !p.exists() {
                return Err(Error::invalid("ExperimentConfig", format!("path does not exist: {}", p.display())));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelInfo {
    pub name: String,
    pub path: String,
    pub architecture: String,
    pub fingerprint: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationSummary {
    pub target_fpr: f64,
    pub sample_size: usize,
    pub thresholds: Vec<(String, f64)>,
    pub joint_threshold: f64,
    /// Flag rate of each squeezer on the calibration sample itself.
    pub calibration_fpr: Vec<(String, f64)>,
    pub heldout_fpr: Option<Vec<(String, f64)>>,
    pub heldout_joint_fpr: Option<f64>,
}

/// Per bit-depth squeezer: EdgeFool detectability ≤ FGSM detectability.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectabilityComparison {
    pub squeezer: String,
    pub edgefool: Option<f64>,
    pub fgsm: Option<f64>,
    pub edgefool_lower_or_equal: Option<bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub report_version: u32,
    pub tool_version: String,
    /// Seconds since the Unix epoch; excluded from [`EvalReport::determinism_hash`].
    pub timestamp: String,
    pub config: ExperimentConfig,
    pub class_names: Vec<String>,
    pub target_model: ModelInfo,
    pub transfer_models: Vec<ModelInfo>,
    pub calibration: Option<CalibrationSummary>,
    pub schema: RowSchema,
    pub metrics: Metrics,
    pub detectability_comparison: Vec<DetectabilityComparison>,
    pub warnings: Vec<String>,
    pub rows: Vec<ImageRow>,
}

impl EvalReport {
    /// SHA-256 of the JSON report with the timestamp blanked.
    pub fn determinism_hash(&self) -> String {
        let mut r = self.clone();
        r.timestamp.clear();
        hex::encode(Sha256::digest(serde_json::to_vec(&r).expect("report serializes")))
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, serde_json::to_vec_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Ok(serde_json::from_slice(&std::fs::read(path)?)?)
    }
}

/// SplitMix64 finalizer over `(seed, index)`.
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Dataset indices in attack order: round-robin over classes (the first
/// image of every class, then the second, ...), so a cap on the number of
/// attacked images covers all classes evenly.
pub fn attack_order(dataset: &Dataset) -> Vec<usize> {
    let mut seen = vec![0usize; dataset.class_names.len()];
    let mut keyed: Vec<(usize, usize, usize)> = dataset
        .samples
        .iter()
        .enumerate()
        .map(|(i, s)| {
            let rank = seen[s.label];
            seen[s.label] += 1;
            (rank, s.label, i)
        })
        .collect();
    keyed.sort_unstable();
    keyed.into_iter().map(|(_, _, i)| i).collect()
}

fn model_name(path: &Path, taken: &[String]) -> String {
    let stem = path.file_stem().and_then(|s| s.to_str()).unwrap_or("model").to_string();
    let mut name = stem.clone();
    let mut k = 2;
    while taken.contains(&name) {
        name = format!("{stem}-{k}");
        k += 1;
    }
    name
}

fn model_info(name: String, path: &Path, m: &ClassifierModel) -> ModelInfo {
    ModelInfo {
        name,
        path: path.display().to_string(),
        architecture: m.arch().to_string(),
        fingerprint: m.fingerprint(),
    }
}

fn label_of(model: &ClassifierModel, img: &Image) -> Result<usize> {
    Ok(argmax(&model.forward(img)?.0))
}

struct Ctx<'a> {
    target: &'a ClassifierModel,
    transfers: &'a [ClassifierModel],
    detector: Option<&'a DetectorCalibration>,
    cfg: &'a ExperimentConfig,
}

fn method_row(ctx: &Ctx<'_>, y: usize, res: &AttackResult, epsilon: Option<f64>) -> Result<(MethodRow, Image)> {
    let quantized = res.adversarial.quantized();
    let label_quantized = label_of(ctx.target, &quantized)?;
    let success_quantized = res.success && label_quantized != y;
    let mut transfer = Vec::with_capacity(ctx.transfers.len());
    let mut transfer_quantized = Vec::with_capacity(ctx.transfers.len());
    for m in ctx.transfers {
        transfer.push(res.success && label_of(m, &res.adversarial)? != y);
        transfer_quantized.push(success_quantized && label_of(m, &quantized)? != y);
    }
    let detection = match ctx.detector {
        Some(cal) => Some(is_adversarial(cal, ctx.target, &quantized)?),
        None => None,
    };
    let loss = res.loss;
    Ok((
        MethodRow {
            success: res.success,
            success_quantized,
            label: res.adversarial_label,
            label_quantized,
            iterations: res.iterations,
            warmup_iterations: res.warmup_iterations,
            epsilon,
            loss_total: loss.map(|l| l.total),
            loss_smooth: loss.map(|l| l.smooth),
            loss_adversarial: loss.map(|l| l.adversarial),
            mean_abs_diff: res.mean_abs_diff,
            clamp_fraction: res.clamp_fraction,
            transfer,
            transfer_quantized,
            scores: detection.as_ref().map(|d| d.scores.clone()).unwrap_or_default(),
            flags: detection.as_ref().map(|d| d.flags.clone()).unwrap_or_default(),
            joint_flag: detection.is_some_and(|d| d.joint_flag),
        },
        quantized,
    ))
}

fn fgsm_search(ctx: &Ctx<'_>, img: &Image, y: usize, fcfg: &FgsmConfig) -> Result<(AttackResult, f64)> {
    let mut eps: Vec<f64> = fcfg.epsilons.clone();
    eps.sort_by(f64::total_cmp);
    let mut last = None;
    for &e in &eps {
        let res = fgsm_attack(img, ctx.target, e, Some(y))?;
        if res.success {
            return Ok((res, e));
        }
        last = Some((res, e));
    }
    Ok(last.expect("non-empty epsilon list"))
}

struct Attacked {
    edgefool: MethodRow,
    fgsm: Option<MethodRow>,
    images: Vec<(&'static str, Image)>,
}

fn attack_one(ctx: &Ctx<'_>, index: usize, img: &Image, y: usize) -> Result<Attacked> {
    let cfg = AttackConfig {
        seed: derive_seed(ctx.cfg.seed, index as u64),
        ..ctx.cfg.attack.clone()
    };
    let ef = edgefool_attack(img, ctx.target, &cfg, Some(y))?;
    let (edgefool, ef_q) = method_row(ctx, y, &ef, None)?;
    let mut images = vec![("edgefool", ef_q)];
    let fgsm = match &ctx.cfg.fgsm {
        Some(f) => {
            let (res, eps) = fgsm_search(ctx, img, y, f)?;
            let (row, q) = method_row(ctx, y, &res, Some(eps))?;
            images.push(("fgsm", q));
            Some(row)
        }
        None => None,
    };
    Ok(Attacked { edgefool, fgsm, images })
}

fn flag_rates(cal: &DetectorCalibration, rows: &[Vec<f64>]) -> (Vec<(String, f64)>, f64) {
    let n = rows.len() as f64;
    let per = cal
        .squeezers
        .iter()
        .enumerate()
        .map(|(j, s)| {
            let k = rows.iter().filter(|r| r[j] > cal.thresholds[j]).count();
            (s.label(), k as f64 / n)
        })
        .collect();
    let joint = rows.iter().filter(|r| cal.judge(r.to_vec()).joint_flag).count() as f64 / n;
    (per, joint)
}

fn timestamp() -> String {
    std::time::SystemTime::now()
        .duration_since(std::time::UNIX_EPOCH)
        .map(|d| d.as_secs().to_string())
        .unwrap_or_default()
}

/// Runs the full evaluation and writes `report.json`, `rows.csv`,
/// `calibration.json` and (optionally) the adversarial PNGs under
/// `cfg.output_dir`. Failures on a single image are recorded in its row.
pub fn run_evaluation(cfg: &ExperimentConfig) -> Result<EvalReport> {
    cfg.validate()?;
    let dataset = load_dataset(&cfg.dataset)?;
    let target = load_model(&cfg.target_model)?;
    let mut names = Vec::new();
    let mut transfers = Vec::new();
    let mut transfer_info = Vec::new();
    for p in &cfg.transfer_models {
        let m = load_model(p)?;
        let name = model_name(p, &names);
        transfer_info.push(model_info(name.clone(), p, &m));
        names.push(name);
        transfers.push(m);
    }
    let target_info = model_info(model_name(&cfg.target_model, &[]), &cfg.target_model, &target);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cfg.jobs)
        .build()
        .map_err(|e| Error::invalid("run_evaluation", e.to_string()))?;
    let mut warnings = Vec::new();

    let calibration = match &cfg.calibration_dataset {
        Some(p) if !cfg.squeezers.is_empty() => {
            let clean: Vec<Image> = load_dataset(p)?.samples.into_iter().map(|s| s.image).collect();
            Some(pool.install(|| calibrate(&target, &clean, &cfg.squeezers, cfg.target_fpr))?)
        }
        Some(_) => {
            warnings.push("no squeezers configured; detection skipped".into());
            None
        }
        None => None,
    };
    let calibration_summary = match &calibration {
        Some(cal) => {
            let (calibration_fpr, _) = flag_rates(cal, &cal.scores);
            let heldout = match &cfg.heldout_dataset {
                Some(p) => {
                    let ds = load_dataset(p)?;
                    let scores = pool.install(|| {
                        ds.samples
                            .par_iter()
                            .map(|s| squeeze_score(&target, &s.image, &cal.squeezers))
                            .collect::<Result<Vec<_>>>()
                    })?;
                    Some(flag_rates(cal, &scores))
                }
                None => None,
            };
            Some(CalibrationSummary {
                target_fpr: cal.target_fpr,
                sample_size: cal.sample_size,
                thresholds: cal.squeezers.iter().map(|s| s.label()).zip(cal.thresholds.iter().cloned()).collect(),
                joint_threshold: cal.joint_threshold,
                calibration_fpr,
                heldout_joint_fpr: heldout.as_ref().map(|h| h.1),
                heldout_fpr: heldout.map(|h| h.0),
            })
        }
        None => None,
    };

    // Clean predictions decide which images are attacked.
    let clean_labels = pool.install(|| {
        dataset
            .samples
            .par_iter()
            .map(|s| label_of(&target, &s.image))
            .collect::<Vec<_>>()
    });
    let mut selected = Vec::new();
    let mut attacked = 0usize;
    for i in attack_order(&dataset) {
        if cfg.max_attacked.is_some_and(|m| attacked >= m) {
            break;
        }
        if matches!(&clean_labels[i], Ok(l) if *l == dataset.samples[i].label) {
            attacked += 1;
        }
        selected.push(i);
    }

    let ctx = Ctx {
        target: &target,
        transfers: &transfers,
        detector: calibration.as_ref(),
        cfg,
    };
    let results: Vec<(ImageRow, Vec<(&'static str, Image)>)> = pool.install(|| {
        selected
            .par_iter()
            .map(|&i| {
                let s = &dataset.samples[i];
                let rel = dataset.paths[i]
                    .strip_prefix(&cfg.dataset)
                    .unwrap_or(&dataset.paths[i])
                    .display()
                    .to_string();
                let mut row = ImageRow {
                    index: i,
                    path: rel,
                    true_label: s.label,
                    clean_label: s.label,
                    status: RowStatus::Attacked,
                    error: None,
                    edgefool: None,
                    fgsm: None,
                };
                let y = match &clean_labels[i] {
                    Ok(y) => *y,
                    Err(e) => {
                        row.status = RowStatus::Error;
                        row.error = Some(e.to_string());
                        return (row, Vec::new());
                    }
                };
                row.clean_label = y;
                if y != s.label {
                    row.status = RowStatus::Skipped;
                    return (row, Vec::new());
                }
                match attack_one(&ctx, i, &s.image, y) {
                    Ok(a) => {
                        row.edgefool = Some(a.edgefool);
                        row.fgsm = a.fgsm;
                        (row, a.images)
                    }
                    Err(e) => {
                        row.status = RowStatus::Error;
                        row.error = Some(e.to_string());
                        (row, Vec::new())
                    }
                }
            })
            .collect()
    });

    std::fs::create_dir_all(&cfg.output_dir)?;
    let mut rows = Vec::with_capacity(results.len());
    for (row, images) in results {
        if cfg.save_images {
            for (method, img) in images {
                let dir = cfg.output_dir.join("adversarial").join(method);
                std::fs::create_dir_all(&dir)?;
                img.save(&dir.join(format!("{:05}.png", row.index)))?;
            }
        }
        rows.push(row);
    }

    let schema = RowSchema {
        transfer_models: names,
        squeezers: calibration
            .as_ref()
            .map(|c| c.squeezers.iter().map(Squeezer::label).collect())
            .unwrap_or_default(),
    };
    let metrics = compute_metrics(&rows, &schema);
    if metrics.attacked == 0 {
        warnings.push("no image was attacked; rates are undefined".into());
    }
    if metrics.errors > 0 {
        warnings.push(format!("{} image(s) failed; see the rows' error column", metrics.errors));
    }
    let detectability_comparison = match (&calibration, &metrics.fgsm) {
        (Some(cal), Some(f)) => cal
            .squeezers
            .iter()
            .filter(|s| matches!(s, Squeezer::BitDepth { .. }))
            .map(|s| {
                let (e, g) = (metrics.edgefool.detectability[&s.label()], f.detectability[&s.label()]);
                DetectabilityComparison {
                    squeezer: s.label(),
                    edgefool: e,
                    fgsm: g,
                    edgefool_lower_or_equal: e.zip(g).map(|(e, g)| e <= g),
                }
            })
            .collect(),
        _ => Vec::new(),
    };

    let report = EvalReport {
        report_version: REPORT_VERSION,
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        timestamp: timestamp(),
        config: cfg.clone(),
        class_names: dataset.class_names.clone(),
        target_model: target_info,
        transfer_models: transfer_info,
        calibration: calibration_summary,
        schema: schema.clone(),
        metrics,
        detectability_comparison,
        warnings,
        rows,
    };
    write_rows_csv(&cfg.output_dir.join("rows.csv"), &report.rows, &schema)?;
    if let Some(cal) = &calibration {
        cal.save(&cfg.output_dir.join("calibration.json"))?;
    }
    report.save(&cfg.output_dir.join("report.json"))?;
    Ok(report)
}
