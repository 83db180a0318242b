//! Central finite-difference helpers for verifying analytic gradients.

/// Central difference of `f` at `x` with half-width `step`.
pub fn central_diff(f: &mut impl FnMut(f64) -> f64, x: f64, step: f64) -> f64 {
    (f(x + step) - f(x - step)) / (2.0 * step)
}

/// Relative error with a floor so that near-zero pairs compare on an
/// absolute scale.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(1e-6)
}

/// Largest relative error between an analytic gradient and central finite
/// differences. `perturbed(i, delta)` must evaluate the objective with
/// parameter `i` shifted by `delta`, leaving all other parameters alone.
pub fn max_gradient_error(
    analytic: &[f64],
    step: f64,
    mut perturbed: impl FnMut(usize, f64) -> f64,
) -> f64 {
    let mut worst = 0.0f64;
    for (i, &grad) in analytic.iter().enumerate() {
        let fd = (perturbed(i, step) - perturbed(i, -step)) / (2.0 * step);
        worst = worst.max(relative_error(grad, fd));
    }
    worst
}
