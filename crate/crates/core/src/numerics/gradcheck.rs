//! Central finite differences, used as the independent oracle for analytic
//! gradients. Only forward evaluations are involved.

/// Step used by every gradient check in the crate.
pub const FD_STEP: f64 = 1e-3;

/// Denominator floor for relative error. Components whose magnitude is below
/// it are compared on an absolute scale instead.
pub const REL_FLOOR: f64 = 1e-2;

/// Numerical gradient of `f` at `x` by central differences.
pub fn central_difference(x: &[f64], h: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + h;
            let up = f(&probe);
            probe[i] = orig - h;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(REL_FLOOR)
}

/// Largest [`relative_error`] over paired components.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len());
    analytic.iter().zip(numeric).map(|(&a, &n)| relative_error(a, n)).fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cubic_derivative() {
        let g = central_difference(&[2.0], FD_STEP, |x| x[0].powi(3));
        assert!((g[0] - 12.0).abs() < 1e-5);
    }
}
