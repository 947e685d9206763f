use super::Tensor;
use crate::error::{Error, Result};

/// Central-difference gradient of a scalar function at `point`.
///
/// Each coordinate is probed at `point ± eps`; the function must be
/// deterministic. Any non-finite probe value is reported with the coordinate
/// being perturbed.
pub fn finite_diff_grad<F>(mut f: F, point: &Tensor, eps: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if eps.is_nan() || eps <= 0.0 {
        return Err(Error::Invalid(format!("finite-difference step must be > 0, got {eps}")));
    }
    let mut probe = point.clone();
    let mut grad = Tensor::zeros(point.shape());
    for i in 0..point.len() {
        let x = point.data()[i];
        probe.data_mut()[i] = x + eps;
        let up = f(&probe)?;
        probe.data_mut()[i] = x - eps;
        let down = f(&probe)?;
        probe.data_mut()[i] = x;
        for value in [up, down] {
            if !value.is_finite() {
                return Err(Error::NonFiniteProbe { index: i, value });
            }
        }
        grad.data_mut()[i] = (up - down) / (2.0 * eps);
    }
    Ok(grad)
}

/// `‖a − b‖ / max(‖a‖, ‖b‖)`, or 0 when both are (numerically) zero.
pub fn relative_error(a: &Tensor, b: &Tensor) -> f64 {
    let diff: f64 = a
        .data()
        .iter()
        .zip(b.data())
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let scale = a.norm().max(b.norm());
    if scale < 1e-12 {
        0.0
    } else {
        diff / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = finite_diff_grad(|t| Ok(t.item() * t.item()), &Tensor::scalar(3.0), 1e-5).unwrap();
        assert!((g.item() - 6.0).abs() < 1e-8);
    }

    #[test]
    fn constant_has_zero_gradient() {
        let p = Tensor::row(&[1.0, -2.0, 0.5]);
        let g = finite_diff_grad(|_| Ok(4.25), &p, 1e-5).unwrap();
        assert!(g.data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn rejects_bad_step_and_non_finite_probes() {
        let p = Tensor::row(&[1.0, 0.0]);
        assert!(finite_diff_grad(|_| Ok(0.0), &p, 0.0).is_err());
        let err = finite_diff_grad(|t| Ok(t.data()[1].sqrt()), &p, 1e-5).unwrap_err();
        assert!(matches!(err, Error::NonFiniteProbe { index: 1, .. }), "{err}");
    }
}
