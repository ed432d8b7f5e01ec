//! Edited SMD bilevel test problems (variants 2, 6, 12), with p = r = 1 and
//! q = 2, so d_x = 2 and d_z = 3.
//!
//! Upper variables: x_u1 (1 dim), x_u2 (1 dim). Lower variables: x_l1 (2 dims),
//! x_l2 (1 dim). Inputs arrive normalized to [0,1] and are mapped back onto the
//! original variable ranges; every summation over an index set is replaced by
//! its mean so values do not grow with dimension counts. The source problems
//! minimize both levels; these evaluations return the negated objectives.

use super::FunctionId;
use std::f64::consts::{E, PI};

fn affine(v: f64, lo: f64, hi: f64) -> f64 {
    lo + v * (hi - lo)
}

/// SMD2 original variables from normalized inputs:
/// x_u1 in [-1,2], x_u2 in [-5,1], x_l1 in [-1,2]^2, x_l2 in [0,e].
pub(crate) fn smd2_raw(x: &[f64], z: &[f64]) -> (f64, f64, f64, f64, f64) {
    (
        affine(x[0], -1.0, 2.0),
        affine(x[1], -5.0, 1.0),
        affine(z[0], -1.0, 2.0),
        affine(z[1], -1.0, 2.0),
        affine(z[2], 0.0, E),
    )
}

pub(super) fn evaluate_smd2(id: FunctionId, x: &[f64], z: &[f64]) -> f64 {
    let (xu1, xu2, xl1a, xl1b, xl2) = smd2_raw(x, z);
    let log_term = (0.99 * xl2 + 0.01).ln();
    match id {
        FunctionId::UpperObjective => {
            let f1 = xu1 * xu1;
            let f2 = -(xl1a * xl1a + xl1b * xl1b) / 2.0;
            let f3 = -xu2 * xu2 - (xu2 - log_term).powi(2);
            -(f1 + f2 + f3)
        }
        FunctionId::LowerObjective => {
            let f1 = xu1 * xu1;
            let f2 = (xl1a * xl1a + xl1b * xl1b) / 2.0;
            let f3 = (xu2 - log_term).powi(2);
            -(f1 + f2 + f3)
        }
        other => panic!("smd2 has no constraints, got {other:?}"),
    }
}

/// SMD6 original variables: every block in [-1,2]. The two x_l1 dims split into
/// one penalized dim and one free valley dim (the alternating pair sum of the
/// source problem is empty at this size).
pub(crate) fn smd6_raw(x: &[f64], z: &[f64]) -> (f64, f64, f64, f64, f64) {
    (
        affine(x[0], -1.0, 2.0),
        affine(x[1], -1.0, 2.0),
        affine(z[0], -1.0, 2.0),
        affine(z[1], -1.0, 2.0),
        affine(z[2], -1.0, 2.0),
    )
}

pub(super) fn evaluate_smd6(id: FunctionId, x: &[f64], z: &[f64]) -> f64 {
    let (xu1, xu2, xl1a, xl1b, xl2) = smd6_raw(x, z);
    match id {
        FunctionId::UpperObjective => {
            let f1 = xu1 * xu1;
            let f2 = -xl1a * xl1a + xl1b * xl1b;
            let f3 = xu2 * xu2 - (xu2 - xl2).powi(2);
            -(f1 + f2 + f3)
        }
        FunctionId::LowerObjective => {
            // Components rebalanced as f1/d + f2/d^2 + f3/d with d = 3.
            let d = 3.0;
            let f1 = xu1 * xu1;
            let f2 = xl1a * xl1a;
            let f3 = (xu2 - xl2).powi(2);
            -(f1 / d + f2 / (d * d) + f3 / d)
        }
        other => panic!("smd6 has no constraints, got {other:?}"),
    }
}

/// SMD12 original variables: x_u1 in [-5,10], x_u2 in [-1,1], x_l1 in [-5,10]^2,
/// x_l2 in [-pi/2, pi/2].
pub(crate) fn smd12_raw(x: &[f64], z: &[f64]) -> (f64, f64, f64, f64, f64) {
    (
        affine(x[0], -5.0, 10.0),
        affine(x[1], -1.0, 1.0),
        affine(z[0], -5.0, 10.0),
        affine(z[1], -5.0, 10.0),
        affine(z[2], -PI / 2.0, PI / 2.0),
    )
}

pub(super) fn evaluate_smd12(id: FunctionId, x: &[f64], z: &[f64]) -> f64 {
    let (xu1, xu2, xl1a, xl1b, xl2) = smd12_raw(x, z);
    let th = xl2.tanh();
    match id {
        FunctionId::UpperObjective => {
            let f1 = (xu1 - 2.0).powi(2);
            let f2 = (xl1a * xl1a + xl1b * xl1b) / 2.0;
            let f3 = (xu2 - 2.0).powi(2) + th.abs() - (xu2 - th).powi(2);
            -(f1 + f2 + f3)
        }
        FunctionId::LowerObjective => {
            let f1 = xu1 * xu1;
            let f2 = (xl1a * xl1a + xl1b * xl1b) / 2.0;
            let f3 = (xu2 - th).powi(2);
            -(f1 + f2 + f3)
        }
        // Feasible iff >= 0. The first upper constraint is the edited active
        // one; the last two pin x_u1 and x_u2 against each other's cubes.
        FunctionId::UpperConstraint(0) => xu2 - th - 1.0,
        FunctionId::UpperConstraint(1) => xu1 - xu2.powi(3),
        FunctionId::UpperConstraint(2) => xu2 - xu1.powi(3),
        // Lower: the edited pair couples the two x_l1 dims; the third requires
        // |x_u2 - tanh(x_l2)| >= 1.
        FunctionId::LowerConstraint(0) => xl1a - xl1b.powi(3),
        FunctionId::LowerConstraint(1) => xl1b - xl1a.powi(3),
        FunctionId::LowerConstraint(2) => (xu2 - th).powi(2) - 1.0,
        other => panic!("smd12 has no such constraint: {other:?}"),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_relative_eq;

    // Expected values from an independent evaluation of the same formulas with
    // a separate implementation.

    #[test]
    fn smd2_reference_values() {
        let x = [0.25, 0.75];
        let z = [0.5, 0.125, 0.625];
        assert_relative_eq!(
            evaluate_smd2(FunctionId::UpperObjective, &x, &z),
            1.5602298742697789,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd2(FunctionId::LowerObjective, &x, &z),
            -1.4352298742697789,
            epsilon = 1e-12
        );
        let x = [0.0, 1.0];
        let z = [1.0, 0.0, 0.5];
        assert_relative_eq!(
            evaluate_smd2(FunctionId::UpperObjective, &x, &z),
            2.9841280227936933,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd2(FunctionId::LowerObjective, &x, &z),
            -3.9841280227936933,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smd2_log_cancellation() {
        // Raw x_l2 = 1 makes log(0.99 + 0.01) = 0, and raw x_u2 = 0 then zeroes
        // the coupled term; with x_u1 = x_l1 = 0 the whole lower objective is 0.
        let x = [1.0 / 3.0, 5.0 / 6.0];
        let z = [1.0 / 3.0, 1.0 / 3.0, 1.0 / E];
        assert_relative_eq!(
            evaluate_smd2(FunctionId::LowerObjective, &x, &z),
            0.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smd6_reference_values() {
        let x = [0.25, 0.75];
        let z = [0.5, 0.125, 0.625];
        assert_relative_eq!(
            evaluate_smd6(FunctionId::UpperObjective, &x, &z),
            -1.625,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd6(FunctionId::LowerObjective, &x, &z),
            -0.0954861111111111,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smd6_component_weights_at_origin() {
        // All-zeros normalized point: raw values are all -1, so the rebalanced
        // lower objective is 1/3 + 1/9 + 0 = 4/9 before negation.
        let x = [0.0, 0.0];
        let z = [0.0, 0.0, 0.0];
        assert_relative_eq!(
            evaluate_smd6(FunctionId::LowerObjective, &x, &z),
            -4.0 / 9.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smd6_valley_dim_does_not_move_lower_objective() {
        let x = [0.4, 0.7];
        let z_a = [0.3, 0.0, 0.9];
        let z_b = [0.3, 1.0, 0.9];
        assert_eq!(
            evaluate_smd6(FunctionId::LowerObjective, &x, &z_a),
            evaluate_smd6(FunctionId::LowerObjective, &x, &z_b)
        );
        assert_ne!(
            evaluate_smd6(FunctionId::UpperObjective, &x, &z_a),
            evaluate_smd6(FunctionId::UpperObjective, &x, &z_b)
        );
    }

    #[test]
    fn smd12_reference_values() {
        let x = [0.25, 0.75];
        let z = [0.5, 0.125, 0.625];
        assert_relative_eq!(
            evaluate_smd12(FunctionId::UpperObjective, &x, &z),
            -21.178041704988438,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::LowerObjective, &x, &z),
            -9.58626804291278,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::UpperConstraint(0), &x, &z),
            -0.8736847479012153,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::UpperConstraint(1), &x, &z),
            -1.375,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::UpperConstraint(2), &x, &z),
            2.453125,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::LowerConstraint(0), &x, &z),
            33.017578125,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::LowerConstraint(1), &x, &z),
            -18.75,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::LowerConstraint(2), &x, &z),
            -0.9840444570872204,
            epsilon = 1e-12
        );
    }

    #[test]
    fn smd12_all_constraints_active_at_continuous_optimum() {
        // Raw optimum x_u1 = 1, x_u2 = 1, x_l1 = 0, x_l2 = 0: every constraint
        // sits exactly on its boundary.
        let x = [0.4, 1.0];
        let z = [1.0 / 3.0, 1.0 / 3.0, 0.5];
        for i in 0..3 {
            assert_relative_eq!(
                evaluate_smd12(FunctionId::UpperConstraint(i), &x, &z),
                0.0,
                epsilon = 1e-12
            );
            assert_relative_eq!(
                evaluate_smd12(FunctionId::LowerConstraint(i), &x, &z),
                0.0,
                epsilon = 1e-12
            );
        }
        assert_relative_eq!(
            evaluate_smd12(FunctionId::UpperObjective, &x, &z),
            -1.0,
            epsilon = 1e-12
        );
        assert_relative_eq!(
            evaluate_smd12(FunctionId::LowerObjective, &x, &z),
            -2.0,
            epsilon = 1e-12
        );
    }

    #[test]
    fn substitutions_cover_original_ranges() {
        // Endpoint checks: normalized 0 and 1 map onto each variable's lo/hi.
        let (u1, u2, l1a, l1b, l2) = smd2_raw(&[0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_eq!((u1, u2, l1a, l1b, l2), (-1.0, -5.0, -1.0, -1.0, 0.0));
        let (u1, u2, l1a, l1b, l2) = smd2_raw(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!((u1, u2, l1a, l1b, l2), (2.0, 1.0, 2.0, 2.0, E));

        let lo = smd6_raw(&[0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_eq!(lo, (-1.0, -1.0, -1.0, -1.0, -1.0));
        let hi = smd6_raw(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!(hi, (2.0, 2.0, 2.0, 2.0, 2.0));

        let (u1, u2, l1a, l1b, l2) = smd12_raw(&[0.0, 0.0], &[0.0, 0.0, 0.0]);
        assert_eq!((u1, u2, l1a, l1b), (-5.0, -1.0, -5.0, -5.0));
        assert_relative_eq!(l2, -PI / 2.0);
        let (u1, u2, l1a, l1b, l2) = smd12_raw(&[1.0, 1.0], &[1.0, 1.0, 1.0]);
        assert_eq!((u1, u2, l1a, l1b), (10.0, 1.0, 10.0, 10.0));
        assert_relative_eq!(l2, PI / 2.0);
    }
}
