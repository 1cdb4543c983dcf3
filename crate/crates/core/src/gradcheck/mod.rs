//! Central finite-difference verification of analytic gradients.

mod suite;

pub use suite::{
    dense_block_cases, run_suite, standard_cases, Case, SuiteEntry, SuiteOptions, SuiteReport, STRUCTURAL_ZERO,
};

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-6;
pub const DEFAULT_TOLERANCE: f64 = 1e-4;

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the worst element.
    pub worst_index: usize,
    pub checked: usize,
    pub tolerance: f64,
    pub passed: bool,
}

/// Relative error with denominator `max(|a|, |n|, 1e-8)`.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` with central differences of the scalar function `f`
/// around `point`, probing every element.
pub fn grad_check<T, F>(
    f: F,
    point: &Tensor<T>,
    analytic: &Tensor<T>,
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    let all: Vec<usize> = (0..point.len()).collect();
    grad_check_at(f, point, analytic, &all, step, tolerance)
}

/// Like [`grad_check`], probing only the listed flat indices.
pub fn grad_check_at<T, F>(
    mut f: F,
    point: &Tensor<T>,
    analytic: &Tensor<T>,
    indices: &[usize],
    step: f64,
    tolerance: f64,
) -> Result<GradCheckReport>
where
    T: Scalar,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if step <= 0.0 {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    analytic.expect_shape(point.shape(), "analytic gradient")?;
    let h = T::lit(step);
    let mut probe = point.clone();
    let mut worst = (0.0f64, 0usize);
    for &i in indices {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!(
                "function value at element {i} +/- {step}: {plus}, {minus}"
            )));
        }
        let numeric = (plus - minus).as_f64() / (2.0 * step);
        let err = relative_error(analytic.data()[i].as_f64(), numeric);
        if err > worst.0 || worst.0.is_nan() {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        max_rel_error: worst.0,
        worst_index: worst.1,
        checked: indices.len(),
        tolerance,
        passed: worst.0 < tolerance,
    })
}
