use crate::error::{Error, Result};
use crate::nd::{Real, Tensor};

/// Central-difference estimate of the gradient of a scalar function.
///
/// This path never touches the tape, so it serves as an independent oracle
/// for [`crate::nd::Graph::backward`].
pub fn finite_diff_gradient<T, F>(mut f: F, point: &Tensor<T>, h: T) -> Result<Tensor<T>>
where
    T: Real,
    F: FnMut(&Tensor<T>) -> Result<T>,
{
    if !(h > T::zero()) {
        return Err(Error::Argument(format!(
            "step size must be positive, got {h}"
        )));
    }
    let mut probe = point.clone();
    let mut out = Tensor::zeros(point.shape());
    let two_h = h + h;
    for i in 0..point.len() {
        let orig = point.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite {
                location: format!("finite difference at coordinate {i}"),
            });
        }
        out.data_mut()[i] = (plus - minus) / two_h;
    }
    Ok(out)
}

/// Coordinate-wise comparison of an analytic gradient against an estimate.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    pub errors: Vec<f64>,
    pub h: f64,
}

/// `|a - b| / max(|a|, |b|, 1e-12)`
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-12)
}

impl GradCheckReport {
    pub fn compare<T: Real>(analytic: &Tensor<T>, numeric: &Tensor<T>, h: T) -> Result<Self> {
        analytic.same_shape(numeric, "grad_check")?;
        let errors: Vec<f64> = analytic
            .data()
            .iter()
            .zip(numeric.data())
            .map(|(a, b)| relative_error(a.to_f64_lossless(), b.to_f64_lossless()))
            .collect();
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        Ok(GradCheckReport {
            max_rel_error,
            errors,
            h: h.to_f64_lossless(),
        })
    }

    /// Concatenates reports over several parameter blocks.
    pub fn merge(reports: impl IntoIterator<Item = GradCheckReport>) -> Self {
        let mut errors = Vec::new();
        let mut h = 0.0;
        for r in reports {
            h = r.h;
            errors.extend(r.errors);
        }
        let max_rel_error = errors.iter().copied().fold(0.0, f64::max);
        GradCheckReport {
            max_rel_error,
            errors,
            h,
        }
    }
}
