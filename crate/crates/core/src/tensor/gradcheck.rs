//! Central-difference gradient checking.

use super::Tensor;
use crate::error::{Error, Result};

/// `|a - b| / max(|a|, |b|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Maximum relative error between the analytic gradient returned by `f` and
/// central differences with step `h`, over every coordinate of `x`.
///
/// `f` returns the scalar value and its gradient with respect to its argument.
pub fn finite_diff_check<F>(f: F, x: &Tensor, h: f64) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let coords: Vec<usize> = (0..x.len()).collect();
    finite_diff_check_coords(f, x, h, &coords)
}

/// Same as [`finite_diff_check`], restricted to the listed coordinates.
pub fn finite_diff_check_coords<F>(mut f: F, x: &Tensor, h: f64, coords: &[usize]) -> Result<f64>
where
    F: FnMut(&Tensor) -> Result<(f64, Tensor)>,
{
    let (value, analytic) = f(x)?;
    x.check_same_shape(&analytic, "finite_diff_check")?;
    if !value.is_finite() || !analytic.is_finite() {
        return Err(Error::NonFinite {
            context: "finite_diff_check at base point".into(),
            iteration: None,
        });
    }
    let mut probe = x.clone();
    let mut worst = 0.0f64;
    for &i in coords {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let (fp, _) = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let (fm, _) = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite {
                context: format!("finite_diff_check at coordinate {i}"),
                iteration: None,
            });
        }
        let numeric = (fp - fm) / (2.0 * h);
        worst = worst.max(relative_error(analytic.data()[i], numeric));
    }
    Ok(worst)
}
