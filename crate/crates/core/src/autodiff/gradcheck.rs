use super::tensor::Tensor;

/// Central-difference gradient of `f` at `x`, one coordinate at a time.
pub fn finite_diff_grad(mut f: impl FnMut(&Tensor<f64>) -> f64, x: &Tensor<f64>, h: f64) -> Tensor<f64> {
    let mut probe = x.clone();
    let mut grad = Tensor::zeros(x.shape().to_vec());
    for i in 0..x.numel() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe);
        probe.data_mut()[i] = orig - h;
        let down = f(&probe);
        probe.data_mut()[i] = orig;
        grad.data_mut()[i] = (up - down) / (2.0 * h);
    }
    grad
}

/// Largest per-coordinate relative error between two gradients.
///
/// Each coordinate is divided by `max(|a_i|, |b_i|, floor)` where `floor` is
/// `rel_floor` times the largest magnitude in either gradient, so coordinates
/// that are numerically zero compare on an absolute scale.
pub fn max_relative_error(analytic: &Tensor<f64>, numeric: &Tensor<f64>, rel_floor: f64) -> f64 {
    assert_eq!(analytic.shape(), numeric.shape());
    let scale = analytic
        .data()
        .iter()
        .chain(numeric.data())
        .fold(0.0f64, |m, x| m.max(x.abs()));
    let floor = (rel_floor * scale).max(f64::MIN_POSITIVE);
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(a, n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
