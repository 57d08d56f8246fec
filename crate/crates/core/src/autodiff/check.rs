/// Central difference `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate.
pub fn central_difference(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            probe[i] = x[i] + h;
            let up = f(&probe);
            probe[i] = x[i] - h;
            let down = f(&probe);
            probe[i] = x[i];
            (up - down) / (2.0 * h)
        })
        .collect()
}

/// Max over coordinates of `|fd_i - g_i| / max(1, |g_i|)`.
///
/// Non-differentiable points are reported as large errors, never masked.
pub fn grad_check(f: impl FnMut(&[f64]) -> f64, x: &[f64], grad: &[f64], h: f64) -> f64 {
    assert!(h > 0.0, "finite-difference step must be positive");
    assert_eq!(x.len(), grad.len(), "gradient length mismatch");
    central_difference(f, x, h)
        .iter()
        .zip(grad)
        .map(|(fd, g)| {
            let e = (fd - g).abs() / g.abs().max(1.0);
            if e.is_nan() {
                f64::INFINITY
            } else {
                e
            }
        })
        .fold(0.0, f64::max)
}
