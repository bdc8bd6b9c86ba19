//! Central finite-difference gradient checks.
//!
//! The harness only sees a closure from a flat parameter vector to a
//! scalar, so it stays independent of the tape it is used to check.

/// Relative error with an absolute floor so exact zeros compare cleanly.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    let denom = analytic.abs().max(numeric.abs()).max(1e-6);
    (analytic - numeric).abs() / denom
}

/// Central-difference gradient of `f` at `x` with step `h`.
pub fn numeric_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], h: f64) -> Vec<f64> {
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

#[derive(Clone, Debug, PartialEq)]
pub struct GradCheck {
    pub max_relative_error: f64,
    pub worst_index: usize,
    pub checked: usize,
}

impl GradCheck {
    pub fn passes(&self, tol: f64) -> bool {
        self.max_relative_error < tol
    }
}

/// Compares an analytic gradient against central differences.
pub fn check_gradient(f: impl Fn(&[f64]) -> f64, x: &[f64], analytic: &[f64], h: f64) -> GradCheck {
    assert_eq!(x.len(), analytic.len());
    let numeric = numeric_gradient(f, x, h);
    let mut worst = (0.0, 0);
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(*a, *n);
        if e > worst.0 || e.is_nan() {
            worst = (e, i);
        }
    }
    GradCheck {
        max_relative_error: worst.0,
        worst_index: worst.1,
        checked: x.len(),
    }
}
