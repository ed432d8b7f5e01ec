//! Confidence bounds and trusted sets.
//!
//! Per function the field stores elementwise bounds `u = mu + sqrt(beta) sigma`
//! and `l = mu - sqrt(beta) sigma` over the whole grid. The trusted feasible
//! set keeps points whose constraint upper bounds are all nonnegative; the
//! trusted lower-optimal set keeps points whose lower-objective upper bound is
//! not dominated by the bound at the estimated per-x solution `z_bar`.

use crate::gp::GPPosterior;
use crate::grid::Grid;
use crate::mask::Mask;
use crate::problems::{BilevelProblem, FunctionId};

/// Which trusted lower-optimal set the query loop samples from: the full set,
/// or only the per-x estimated solutions (one point per upper-level point).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PVariant {
    PPlus,
    PBar,
}

/// Scale factor for confidence intervals at iteration `t`:
/// `2 log(n_functions * n_x * n_z * t^2 * pi^2 / (6 delta))`.
pub fn beta(t: usize, delta: f64, n_functions: usize, n_x_points: usize, n_z_points: usize) -> f64 {
    assert!(t >= 1, "iterations start at 1");
    assert!(delta > 0.0 && delta < 1.0, "delta must lie in (0,1), got {delta}");
    assert!(n_functions > 0 && n_x_points > 0 && n_z_points > 0);
    let card = (n_functions * n_x_points * n_z_points) as f64;
    let t = t as f64;
    2.0 * (card * t * t * std::f64::consts::PI.powi(2) / (6.0 * delta)).ln()
}

/// Upper and lower confidence bounds per function over the grid.
#[derive(Debug, Clone)]
pub struct ConfidenceField {
    beta: f64,
    u: Vec<Vec<f64>>,
    l: Vec<Vec<f64>>,
}

/// Builds the field from per-function grid posteriors (indexed in the
/// problem's function order).
pub fn confidence_bounds(posteriors: &[GPPosterior], beta: f64) -> ConfidenceField {
    assert!(beta >= 0.0, "beta must be nonnegative");
    let sqrt_beta = beta.sqrt();
    let mut u = Vec::with_capacity(posteriors.len());
    let mut l = Vec::with_capacity(posteriors.len());
    for post in posteriors {
        let mut uh = Vec::with_capacity(post.mean.len());
        let mut lh = Vec::with_capacity(post.mean.len());
        for (&m, &s) in post.mean.iter().zip(&post.std) {
            uh.push(m + sqrt_beta * s);
            lh.push(m - sqrt_beta * s);
        }
        u.push(uh);
        l.push(lh);
    }
    ConfidenceField { beta, u, l }
}

impl ConfidenceField {
    /// Degenerate or synthetic field from explicit bound arrays. Baselines use
    /// this with `u = l = mu` to get the mean-based set variants.
    pub fn from_parts(beta: f64, u: Vec<Vec<f64>>, l: Vec<Vec<f64>>) -> Self {
        assert_eq!(u.len(), l.len());
        for (uh, lh) in u.iter().zip(&l) {
            assert_eq!(uh.len(), lh.len());
        }
        ConfidenceField { beta, u, l }
    }

    pub fn beta(&self) -> f64 {
        self.beta
    }

    pub fn n_functions(&self) -> usize {
        self.u.len()
    }

    pub fn n_points(&self) -> usize {
        self.u.first().map_or(0, Vec::len)
    }

    pub fn upper(&self, fn_idx: usize) -> &[f64] {
        &self.u[fn_idx]
    }

    pub fn lower(&self, fn_idx: usize) -> &[f64] {
        &self.l[fn_idx]
    }
}

/// Membership masks plus the estimated lower-level solution per upper point.
#[derive(Debug, Clone)]
pub struct TrustedSets {
    pub s_plus: Mask,
    pub s_plus_lo: Mask,
    pub p_plus: Mask,
    pub z_bar: Vec<Option<usize>>,
}

/// Index of the lower objective in the function order (after the upper one).
const LOWER_OBJECTIVE_IDX: usize = 1;

pub(crate) fn feasible_sets_from_indices(
    field: &ConfidenceField,
    upper_constraint_idxs: &[usize],
    lower_constraint_idxs: &[usize],
) -> (Mask, Mask) {
    let n = field.n_points();
    let mut s_plus_lo = Mask::new_true(n);
    for &c in lower_constraint_idxs {
        let u = field.upper(c);
        for (p, &v) in u.iter().enumerate() {
            if v < 0.0 {
                s_plus_lo.set(p, false);
            }
        }
    }
    let mut s_plus = s_plus_lo.clone();
    for &c in upper_constraint_idxs {
        let u = field.upper(c);
        for (p, &v) in u.iter().enumerate() {
            if v < 0.0 {
                s_plus.set(p, false);
            }
        }
    }
    (s_plus, s_plus_lo)
}

/// Trusted feasible set (all constraints) and its lower-constraint-only
/// counterpart: a point stays in while every constraint's upper bound is >= 0.
/// Empty masks are legal; declaring infeasibility is the caller's decision.
pub fn feasible_sets(field: &ConfidenceField, problem: &BilevelProblem) -> (Mask, Mask) {
    let upper: Vec<usize> = (0..problem.n_upper_constraints())
        .map(|i| problem.fn_index(FunctionId::UpperConstraint(i)))
        .collect();
    let lower: Vec<usize> = (0..problem.n_lower_constraints())
        .map(|i| problem.fn_index(FunctionId::LowerConstraint(i)))
        .collect();
    feasible_sets_from_indices(field, &upper, &lower)
}

/// Per-x estimated lower-level solution: the z maximizing the lower
/// objective's upper bound over the slice restricted to `s_plus_lo`; `None`
/// when the restricted slice is empty. Ties break to the lowest z index.
pub fn lower_solution_estimates(
    field: &ConfidenceField,
    s_plus_lo: &Mask,
    grid: &Grid,
) -> Vec<Option<usize>> {
    let u_f = field.upper(LOWER_OBJECTIVE_IDX);
    let n_z = grid.n_z();
    let mut z_bar = Vec::with_capacity(grid.n_x());
    for x_idx in 0..grid.n_x() {
        let base = x_idx * n_z;
        let mut best: Option<(usize, f64)> = None;
        for z_idx in 0..n_z {
            let p = base + z_idx;
            if !s_plus_lo.get(p) {
                continue;
            }
            // Strict comparison keeps the first (lowest-index) maximizer.
            if best.map_or(true, |(_, bv)| u_f[p] > bv) {
                best = Some((z_idx, u_f[p]));
            }
        }
        z_bar.push(best.map(|(z, _)| z));
    }
    z_bar
}

/// Trusted set of (epsilon-)optimal lower-level solutions.
///
/// `PPlus` keeps the points of `s_plus_lo` passing
/// `u_f(x,z) + epsilon >= l_f(x, z_bar(x))`; `PBar` keeps exactly the points
/// `(x, z_bar(x))` for every x where `z_bar` is defined.
pub fn optimal_lower_set(
    field: &ConfidenceField,
    s_plus_lo: &Mask,
    z_bar: &[Option<usize>],
    epsilon: f64,
    variant: PVariant,
    grid: &Grid,
) -> Mask {
    assert!(epsilon >= 0.0, "epsilon must be nonnegative, got {epsilon}");
    let u_f = field.upper(LOWER_OBJECTIVE_IDX);
    let l_f = field.lower(LOWER_OBJECTIVE_IDX);
    let n_z = grid.n_z();
    let mut p_mask = Mask::new_false(field.n_points());
    for (x_idx, zb) in z_bar.iter().enumerate() {
        let Some(zb) = *zb else { continue };
        let base = x_idx * n_z;
        match variant {
            PVariant::PBar => {
                p_mask.set(base + zb, true);
            }
            PVariant::PPlus => {
                let threshold = l_f[base + zb] - epsilon;
                for z_idx in 0..n_z {
                    let p = base + z_idx;
                    if s_plus_lo.get(p) && u_f[p] >= threshold {
                        p_mask.set(p, true);
                    }
                }
            }
        }
    }
    p_mask
}

/// Assembles all trusted sets for one iteration from a confidence field.
pub fn build_trusted_sets(
    field: &ConfidenceField,
    problem: &BilevelProblem,
    grid: &Grid,
    epsilon: f64,
    variant: PVariant,
) -> TrustedSets {
    let (s_plus, s_plus_lo) = feasible_sets(field, problem);
    let z_bar = lower_solution_estimates(field, &s_plus_lo, grid);
    let p_plus = optimal_lower_set(field, &s_plus_lo, &z_bar, epsilon, variant, grid);
    TrustedSets {
        s_plus,
        s_plus_lo,
        p_plus,
        z_bar,
    }
}
