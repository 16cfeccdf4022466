use super::tensor::Tensor;

/// Central-difference estimate of `df/dx`, one coordinate at a time.
pub fn finite_difference_grad(f: impl Fn(&Tensor) -> f64, x: &Tensor, h: f64) -> Tensor {
    let mut probe = x.clone();
    let mut grad = vec![0.0; x.len()];
    for (i, g) in grad.iter_mut().enumerate() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let plus = f(&probe);
        probe.data_mut()[i] = orig - h;
        let minus = f(&probe);
        probe.data_mut()[i] = orig;
        *g = (plus - minus) / (2.0 * h);
    }
    Tensor::from_parts(x.shape().to_vec(), grad)
}

/// `max_i |a_i - b_i| / max(max_i |b_i|, floor)`.
///
/// Normalizing by the largest reference magnitude keeps coordinates whose
/// true derivative is near zero from dominating the comparison.
pub fn relative_error(analytic: &[f64], reference: &[f64], floor: f64) -> f64 {
    assert_eq!(analytic.len(), reference.len());
    let scale = reference.iter().fold(floor, |m, v| m.max(v.abs()));
    analytic
        .iter()
        .zip(reference)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
        / scale
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_at_three() {
        let g = finite_difference_grad(|t| t.item() * t.item(), &Tensor::scalar(3.0), 1e-5);
        assert!((g.item() - 6.0).abs() < 1e-6);
    }

    #[test]
    fn exp_at_zero() {
        let g = finite_difference_grad(|t| t.item().exp(), &Tensor::scalar(0.0), 1e-5);
        assert!((g.item() - 1.0).abs() < 1e-8);
    }
}
