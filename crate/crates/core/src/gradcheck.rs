//! Central finite differences for checking hand-written backward passes.
//!
//! Deliberately independent of the layer code: it only ever evaluates the
//! scalar function it is handed.

use alloc::vec::Vec;

use crate::math;

/// Default step for central differences at 64-bit precision.
pub const STEP: f64 = 1e-6;

/// Numerical gradient of `f` at `x` with step [`STEP`].
pub fn numeric<F: FnMut(&[f64]) -> f64>(x: &[f64], f: F) -> Vec<f64> {
    numeric_with_step(x, STEP, f)
}

pub fn numeric_with_step<F: FnMut(&[f64]) -> f64>(x: &[f64], step: f64, mut f: F) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + step;
            let up = f(&probe);
            probe[i] = orig - step;
            let down = f(&probe);
            probe[i] = orig;
            (up - down) / (2.0 * step)
        })
        .collect()
}

/// `‖a − b‖₂ / max(‖a‖₂, ‖b‖₂)`; zero when both vectors vanish.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    assert_eq!(analytic.len(), numeric.len(), "gradient lengths differ");
    let norm = |v: &[f64]| math::sqrt(v.iter().map(|x| x * x).sum());
    let diff: Vec<f64> = analytic.iter().zip(numeric).map(|(a, b)| a - b).collect();
    let scale = norm(analytic).max(norm(numeric));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn gradient_of_a_cubic() {
        let g = numeric(&[2.0, -1.0], |v| v[0] * v[0] * v[0] + 3.0 * v[1]);
        assert!(relative_error(&g, &[12.0, 3.0]) < 1e-9);
    }
}
