//! Python bindings: images, classifiers, the ℓ0 smoother, both attacks and
//! the feature-squeezing detector. Images cross the boundary as flat
//! planar (CHW) lists of floats in `[0, 1]`.

use std::path::PathBuf;

use pyo3::exceptions::{PyRuntimeError, PyValueError};
use pyo3::prelude::*;

use edgefool_core::attack::{edgefool_attack, fgsm_attack, AttackConfig, AttackResult};
use edgefool_core::classifier::{classify, load_model, ClassifierModel};
use edgefool_core::color::{lab_to_rgb, rgb_to_lab, LabImage};
use edgefool_core::detector::{calibrate, is_adversarial, squeeze_score, DetectorCalibration, Squeezer};
use edgefool_core::harness::derive_seed;
use edgefool_core::smoothing::{l0_smooth, L0Config};
use edgefool_core::{Error, Tensor};

fn py_err(e: Error) -> PyErr {
    match e {
        Error::ShapeMismatch { .. } | Error::InvalidArgument { .. } => PyValueError::new_err(e.to_string()),
        other => PyRuntimeError::new_err(other.to_string()),
    }
}

fn parse_json<T: serde::de::DeserializeOwned>(json: &str) -> PyResult<T> {
    serde_json::from_str(json).map_err(|e| PyValueError::new_err(e.to_string()))
}

#[pyclass(name = "Image", module = "edgefool", from_py_object)]
#[derive(Clone)]
struct PyImage {
    inner: edgefool_core::Image,
}

#[pymethods]
impl PyImage {
    #[new]
    fn new(height: usize, width: usize, data: Vec<f64>) -> PyResult<Self> {
        edgefool_core::Image::from_planar(height, width, data)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    /// Uniform colour image.
    #[staticmethod]
    fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        Self {
            inner: edgefool_core::Image::filled(height, width, rgb),
        }
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        edgefool_core::Image::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn height(&self) -> usize {
        self.inner.height()
    }

    #[getter]
    fn width(&self) -> usize {
        self.inner.width()
    }

    /// Planar channel-major values.
    fn data(&self) -> Vec<f64> {
        self.inner.data().to_vec()
    }

    fn pixel(&self, y: usize, x: usize) -> PyResult<[f64; 3]> {
        if y >= self.inner.height() || x >= self.inner.width() {
            return Err(PyValueError::new_err(format!("pixel ({y}, {x}) out of bounds")));
        }
        Ok(self.inner.pixel(y, x))
    }

    /// Rounded to 8 bits per channel, as it would be saved.
    fn quantized(&self) -> Self {
        Self {
            inner: self.inner.quantized(),
        }
    }

    fn mean_abs_diff(&self, other: &PyImage) -> PyResult<f64> {
        self.inner.mean_abs_diff(&other.inner).map_err(py_err)
    }

    fn __repr__(&self) -> String {
        format!("Image({}x{})", self.inner.height(), self.inner.width())
    }
}

/// Planar L, a, b values of an RGB image.
#[pyfunction]
fn rgb_to_lab_planar(img: &PyImage) -> Vec<f64> {
    rgb_to_lab(&img.inner).tensor().data().to_vec()
}

/// Inverse of [`rgb_to_lab_planar`]; out-of-gamut values are clamped.
#[pyfunction]
fn lab_to_rgb_planar(height: usize, width: usize, lab: Vec<f64>) -> PyResult<PyImage> {
    let t = Tensor::new(vec![3, height, width], lab).map_err(py_err)?;
    let lab = LabImage::from_tensor(t).map_err(py_err)?;
    Ok(PyImage {
        inner: lab_to_rgb(&lab).image,
    })
}

#[pyfunction]
#[pyo3(signature = (img, lam = 0.02))]
fn smooth(img: &PyImage, lam: f64) -> PyResult<PyImage> {
    l0_smooth(&img.inner, &L0Config::with_lambda(lam))
        .map(|inner| PyImage { inner })
        .map_err(py_err)
}

#[pyclass(name = "Classifier", module = "edgefool")]
struct PyClassifier {
    inner: ClassifierModel,
}

#[pymethods]
impl PyClassifier {
    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        load_model(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    #[getter]
    fn arch(&self) -> String {
        self.inner.arch().to_string()
    }

    #[getter]
    fn num_classes(&self) -> usize {
        self.inner.num_classes()
    }

    #[getter]
    fn input_size(&self) -> (usize, usize) {
        self.inner.input_size()
    }

    fn fingerprint(&self) -> String {
        self.inner.fingerprint()
    }

    /// `(label, probabilities)`.
    fn predict(&self, img: &PyImage) -> PyResult<(usize, Vec<f64>)> {
        let p = classify(&self.inner, &img.inner).map_err(py_err)?;
        Ok((p.label, p.probs))
    }

    fn logits(&self, img: &PyImage) -> PyResult<Vec<f64>> {
        Ok(self.inner.forward(&img.inner).map_err(py_err)?.0)
    }
}

#[pyclass(name = "AttackResult", module = "edgefool", get_all)]
struct PyAttackResult {
    adversarial: PyImage,
    success: bool,
    status: String,
    iterations: usize,
    warmup_iterations: usize,
    original_label: usize,
    adversarial_label: usize,
    mean_abs_diff: f64,
    clamp_fraction: f64,
    /// `(total, smooth, adversarial)` of the returned image, if defined.
    loss: Option<(f64, f64, f64)>,
    /// `(total, smooth, adversarial)` per iteration.
    trace: Vec<(f64, f64, f64)>,
}

impl From<AttackResult> for PyAttackResult {
    fn from(r: AttackResult) -> Self {
        let status = serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default();
        Self {
            adversarial: PyImage { inner: r.adversarial },
            success: r.success,
            status,
            iterations: r.iterations,
            warmup_iterations: r.warmup_iterations,
            original_label: r.original_label,
            adversarial_label: r.adversarial_label,
            mean_abs_diff: r.mean_abs_diff,
            clamp_fraction: r.clamp_fraction,
            loss: r.loss.map(|l| (l.total, l.smooth, l.adversarial)),
            trace: r.trace.iter().map(|l| (l.total, l.smooth, l.adversarial)).collect(),
        }
    }
}

#[pymethods]
impl PyAttackResult {
    fn __repr__(&self) -> String {
        format!(
            "AttackResult(success={}, {} -> {}, iterations={})",
            self.success, self.original_label, self.adversarial_label, self.iterations
        )
    }
}

/// Detail-enhancing attack. `config` is an optional JSON object of attack
/// settings (same keys as the CLI config); `seed` overrides its seed.
#[pyfunction]
#[pyo3(signature = (img, model, label = None, seed = None, config = None))]
fn attack(
    img: &PyImage,
    model: &PyClassifier,
    label: Option<usize>,
    seed: Option<u64>,
    config: Option<&str>,
) -> PyResult<PyAttackResult> {
    let mut cfg: AttackConfig = match config {
        Some(j) => parse_json(j)?,
        None => AttackConfig::default(),
    };
    if let Some(s) = seed {
        cfg.seed = s;
    }
    edgefool_attack(&img.inner, &model.inner, &cfg, label)
        .map(Into::into)
        .map_err(py_err)
}

#[pyfunction]
#[pyo3(signature = (img, model, epsilon, label = None))]
fn fgsm(img: &PyImage, model: &PyClassifier, epsilon: f64, label: Option<usize>) -> PyResult<PyAttackResult> {
    fgsm_attack(&img.inner, &model.inner, epsilon, label)
        .map(Into::into)
        .map_err(py_err)
}

fn squeezers_from(json: Option<&str>) -> PyResult<Vec<Squeezer>> {
    let list: Vec<Squeezer> = match json {
        Some(j) => parse_json(j)?,
        None => Squeezer::default_set(),
    };
    for s in &list {
        s.validate().map_err(py_err)?;
    }
    Ok(list)
}

/// L1 distance between the softmax of the image and of each squeezed copy.
#[pyfunction]
#[pyo3(signature = (model, img, squeezers = None))]
fn squeeze_scores(model: &PyClassifier, img: &PyImage, squeezers: Option<&str>) -> PyResult<Vec<(String, f64)>> {
    let list = squeezers_from(squeezers)?;
    let scores = squeeze_score(&model.inner, &img.inner, &list).map_err(py_err)?;
    Ok(list.iter().map(Squeezer::label).zip(scores).collect())
}

#[pyclass(name = "Detector", module = "edgefool")]
struct PyDetector {
    inner: DetectorCalibration,
}

#[pymethods]
impl PyDetector {
    /// Thresholds at the `target_fpr` quantile of clean-image scores.
    #[staticmethod]
    #[pyo3(signature = (model, clean, target_fpr = 0.05, squeezers = None))]
    fn calibrate(model: &PyClassifier, clean: Vec<PyImage>, target_fpr: f64, squeezers: Option<&str>) -> PyResult<Self> {
        let list = squeezers_from(squeezers)?;
        let images: Vec<_> = clean.into_iter().map(|i| i.inner).collect();
        calibrate(&model.inner, &images, &list, target_fpr)
            .map(|inner| Self { inner })
            .map_err(py_err)
    }

    #[staticmethod]
    fn load(path: PathBuf) -> PyResult<Self> {
        DetectorCalibration::load(&path).map(|inner| Self { inner }).map_err(py_err)
    }

    fn save(&self, path: PathBuf) -> PyResult<()> {
        self.inner.save(&path).map_err(py_err)
    }

    #[getter]
    fn thresholds(&self) -> Vec<(String, f64)> {
        self.inner
            .squeezers
            .iter()
            .map(Squeezer::label)
            .zip(self.inner.thresholds.iter().copied())
            .collect()
    }

    /// `(flagged by any squeezer, per-squeezer flags, scores)`.
    fn judge(&self, model: &PyClassifier, img: &PyImage) -> PyResult<(bool, Vec<bool>, Vec<f64>)> {
        let d = is_adversarial(&self.inner, &model.inner, &img.inner).map_err(py_err)?;
        Ok((d.flags.iter().any(|&f| f), d.flags, d.scores))
    }
}

/// Per-image seed used by the evaluation harness.
#[pyfunction(name = "derive_seed")]
fn py_derive_seed(seed: u64, index: u64) -> u64 {
    derive_seed(seed, index)
}

#[pymodule]
fn edgefool(m: &Bound<'_, PyModule>) -> PyResult<()> {
    m.add_class::<PyImage>()?;
    m.add_class::<PyClassifier>()?;
    m.add_class::<PyAttackResult>()?;
    m.add_class::<PyDetector>()?;
    m.add_function(wrap_pyfunction!(rgb_to_lab_planar, m)?)?;
    m.add_function(wrap_pyfunction!(lab_to_rgb_planar, m)?)?;
    m.add_function(wrap_pyfunction!(smooth, m)?)?;
    m.add_function(wrap_pyfunction!(attack, m)?)?;
    m.add_function(wrap_pyfunction!(fgsm, m)?)?;
    m.add_function(wrap_pyfunction!(squeeze_scores, m)?)?;
    m.add_function(wrap_pyfunction!(py_derive_seed, m)?)?;
    Ok(())
}
