//! Rescaled BraninHoo (upper objective) + rescaled GoldsteinPrice (lower
//! objective) on the unit square.
//!
//! Both use the standardized benchmark forms whose outputs are already close
//! to zero mean and unit variance over [0,1]^2. The source functions are
//! minimized; this problem maximizes their negations.

use super::FunctionId;
use std::f64::consts::PI;

/// Rescaled BraninHoo, minimization form, inputs in [0,1]^2.
fn branin_rescaled(x1: f64, x2: f64) -> f64 {
    let xb1 = 15.0 * x1 - 5.0;
    let xb2 = 15.0 * x2;
    let t = xb2 - 5.1 * xb1 * xb1 / (4.0 * PI * PI) + 5.0 * xb1 / PI - 6.0;
    (t * t + (10.0 - 10.0 / (8.0 * PI)) * xb1.cos() - 44.81) / 51.95
}

/// Rescaled (log-form) GoldsteinPrice, minimization form, inputs in [0,1]^2.
fn goldstein_price_rescaled(x1: f64, x2: f64) -> f64 {
    let xb1 = 4.0 * x1 - 2.0;
    let xb2 = 4.0 * x2 - 2.0;
    let a = 1.0
        + (xb1 + xb2 + 1.0).powi(2)
            * (19.0 - 14.0 * xb1 + 3.0 * xb1 * xb1 - 14.0 * xb2 + 6.0 * xb1 * xb2
                + 3.0 * xb2 * xb2);
    let b = 30.0
        + (2.0 * xb1 - 3.0 * xb2).powi(2)
            * (18.0 - 32.0 * xb1 + 12.0 * xb1 * xb1 + 48.0 * xb2 - 36.0 * xb1 * xb2
                + 27.0 * xb2 * xb2);
    ((a * b).ln() - 8.693) / 2.427
}

pub(super) fn evaluate(id: FunctionId, x: &[f64], z: &[f64]) -> f64 {
    match id {
        FunctionId::UpperObjective => -branin_rescaled(x[0], z[0]),
        FunctionId::LowerObjective => -goldstein_price_rescaled(x[0], z[0]),
        other => panic!("branin_goldstein has no constraints, got {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Expected values from an independent high-precision evaluation of the
    // published rescaled forms.

    #[test]
    fn branin_reference_values() {
        assert_relative_eq!(branin_rescaled(0.5, 0.25), -0.9942938123192304, epsilon = 1e-12);
        assert_relative_eq!(branin_rescaled(0.0, 0.0), 4.876209740358164, epsilon = 1e-12);
        assert_relative_eq!(branin_rescaled(1.0, 1.0), 1.7528814413743128, epsilon = 1e-12);
    }

    #[test]
    fn goldstein_reference_values() {
        assert_relative_eq!(
            goldstein_price_rescaled(0.25, 0.5),
            -1.263032091598419,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            goldstein_price_rescaled(0.5, 0.15),
            -0.8399973805340828,
            epsilon = 1e-12
        );
    }

    #[test]
    fn objectives_negate_the_minimization_forms() {
        let x = [0.5];
        let z = [0.25];
        assert_eq!(
            evaluate(FunctionId::UpperObjective, &x, &z),
            -branin_rescaled(0.5, 0.25)
        );
        assert_eq!(
            evaluate(FunctionId::LowerObjective, &x, &z),
            -goldstein_price_rescaled(0.5, 0.25)
        );
    }
}
