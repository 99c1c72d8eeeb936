use super::Tensor;
use crate::error::{MoceError, Result};

/// Magnitude below which [`relative_error`] measures absolute error instead.
pub const RELATIVE_ERROR_FLOOR: f64 = 1e-3;

/// Central-difference gradient of a scalar function.
///
/// Coordinate `i` is `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h`.
pub fn finite_difference_gradient<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if h.is_nan() || h <= 0.0 {
        return Err(MoceError::contract(format!(
            "finite-difference step must be positive, got {h}"
        )));
    }
    let mut probe = x.clone();
    let mut out = Vec::with_capacity(x.numel());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !plus.is_finite() || !minus.is_finite() {
            return Err(MoceError::numeric(format!(
                "non-finite function value while differencing coordinate {i}"
            )));
        }
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape(), out)
}

/// `|a − b| / max(|a|, |b|, RELATIVE_ERROR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(RELATIVE_ERROR_FLOOR)
}

pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient length mismatch");
    analytic
        .iter()
        .zip(numeric)
        .map(|(a, n)| relative_error(*a, *n))
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn sum_gives_ones() {
        let x = Tensor::vector(vec![0.3, -1.0, 4.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(t.data().iter().sum()), &x, 1e-5).unwrap();
        for v in g.data() {
            assert!((v - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn half_norm_squared_gives_x() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let g = finite_difference_gradient(|t| Ok(0.5 * t.norm_sq()), &x, 1e-5).unwrap();
        assert!((g.data()[0] - 1.0).abs() < 1e-8);
        assert!((g.data()[1] - 2.0).abs() < 1e-8);
    }

    #[test]
    fn rejects_bad_step_and_non_finite_values() {
        let x = Tensor::vector(vec![1.0]).unwrap();
        assert!(finite_difference_gradient(|_| Ok(0.0), &x, 0.0).is_err());
        let err = finite_difference_gradient(|_| Ok(f64::NAN), &x, 1e-5).unwrap_err();
        assert!(matches!(err, MoceError::Numeric(_)));
    }
}
