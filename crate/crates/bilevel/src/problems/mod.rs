//! Benchmark bilevel problems.
//!
//! Every problem is expressed internally as a double maximization: the upper
//! level maximizes `F`, the lower level maximizes `f`, and a point is feasible
//! when every constraint value is nonnegative. Source formulas stated as
//! minimizations are negated on the way in. Inputs are normalized to the unit
//! cube per dimension; `noise_std` applies in raw output units.

mod branin_goldstein;
mod smd;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use thiserror::Error;

use crate::trusted::PVariant;

#[derive(Debug, Error, PartialEq)]
pub enum ProblemError {
    #[error("unsupported SMD variant {0} (supported: 2, 6, 12)")]
    UnsupportedVariant(u32),
    #[error("unknown problem name {0:?}")]
    UnknownName(String),
}

/// One member of the function set: objectives first, then constraints in
/// declaration order. Constraint indices are zero-based.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FunctionId {
    UpperObjective,
    LowerObjective,
    UpperConstraint(usize),
    LowerConstraint(usize),
}

impl FunctionId {
    /// Short label used in traces: F, f, G1.., g1..
    pub fn label(&self) -> String {
        match self {
            FunctionId::UpperObjective => "F".to_string(),
            FunctionId::LowerObjective => "f".to_string(),
            FunctionId::UpperConstraint(i) => format!("G{}", i + 1),
            FunctionId::LowerConstraint(i) => format!("g{}", i + 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum ProblemKind {
    BraninGoldstein,
    Smd2,
    Smd6,
    Smd12,
}

/// A benchmark problem: dimensions, constraint counts, noise level, and the
/// pure evaluation map over normalized inputs.
#[derive(Debug, Clone)]
pub struct BilevelProblem {
    name: &'static str,
    kind: ProblemKind,
    d_x: usize,
    d_z: usize,
    n_upper_constraints: usize,
    n_lower_constraints: usize,
    pub noise_std: f64,
}

pub const DEFAULT_NOISE_STD: f64 = 0.01;

/// BraninHoo (upper, rescaled) + GoldsteinPrice (lower, rescaled), both on
/// [0,1]^2 with the benchmark's first input bound to x and second to z.
/// Unconstrained, d_x = d_z = 1.
pub fn make_branin_goldstein() -> BilevelProblem {
    BilevelProblem {
        name: "branin_goldstein",
        kind: ProblemKind::BraninGoldstein,
        d_x: 1,
        d_z: 1,
        n_upper_constraints: 0,
        n_lower_constraints: 0,
        noise_std: DEFAULT_NOISE_STD,
    }
}

/// Edited SMD variant (2, 6, or 12) with p = r = 1, q = 2: d_x = 2, d_z = 3,
/// domains normalized to [0,1]. SMD12 carries 3 upper and 3 lower constraints.
pub fn make_smd(variant: u32) -> Result<BilevelProblem, ProblemError> {
    let (kind, name, n_up, n_lo) = match variant {
        2 => (ProblemKind::Smd2, "smd2", 0, 0),
        6 => (ProblemKind::Smd6, "smd6", 0, 0),
        12 => (ProblemKind::Smd12, "smd12", 3, 3),
        other => return Err(ProblemError::UnsupportedVariant(other)),
    };
    Ok(BilevelProblem {
        name,
        kind,
        d_x: 2,
        d_z: 3,
        n_upper_constraints: n_up,
        n_lower_constraints: n_lo,
        noise_std: DEFAULT_NOISE_STD,
    })
}

impl BilevelProblem {
    pub fn by_name(name: &str) -> Result<BilevelProblem, ProblemError> {
        match name {
            "branin_goldstein" => Ok(make_branin_goldstein()),
            "smd2" => make_smd(2),
            "smd6" => make_smd(6),
            "smd12" => make_smd(12),
            other => Err(ProblemError::UnknownName(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        self.name
    }

    pub fn d_x(&self) -> usize {
        self.d_x
    }

    pub fn d_z(&self) -> usize {
        self.d_z
    }

    pub fn n_upper_constraints(&self) -> usize {
        self.n_upper_constraints
    }

    pub fn n_lower_constraints(&self) -> usize {
        self.n_lower_constraints
    }

    /// Normalized domain bounds for grid construction: the unit cube.
    pub fn x_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.d_x]
    }

    pub fn z_bounds(&self) -> Vec<(f64, f64)> {
        vec![(0.0, 1.0); self.d_z]
    }

    /// The function set in fixed order: F, f, upper constraints, lower constraints.
    pub fn functions(&self) -> Vec<FunctionId> {
        let mut out = vec![FunctionId::UpperObjective, FunctionId::LowerObjective];
        out.extend((0..self.n_upper_constraints).map(FunctionId::UpperConstraint));
        out.extend((0..self.n_lower_constraints).map(FunctionId::LowerConstraint));
        out
    }

    pub fn n_functions(&self) -> usize {
        2 + self.n_upper_constraints + self.n_lower_constraints
    }

    /// Position of a function in the fixed `functions()` order.
    pub fn fn_index(&self, id: FunctionId) -> usize {
        match id {
            FunctionId::UpperObjective => 0,
            FunctionId::LowerObjective => 1,
            FunctionId::UpperConstraint(i) => {
                assert!(i < self.n_upper_constraints, "unknown upper constraint {i}");
                2 + i
            }
            FunctionId::LowerConstraint(i) => {
                assert!(i < self.n_lower_constraints, "unknown lower constraint {i}");
                2 + self.n_upper_constraints + i
            }
        }
    }

    /// Noiseless value of one function at a normalized point. Pure and
    /// deterministic; constraints are feasible exactly when the value is >= 0.
    pub fn evaluate(&self, id: FunctionId, x: &[f64], z: &[f64]) -> f64 {
        assert_eq!(x.len(), self.d_x, "x dimension mismatch");
        assert_eq!(z.len(), self.d_z, "z dimension mismatch");
        if let FunctionId::UpperConstraint(i) = id {
            assert!(i < self.n_upper_constraints, "unknown upper constraint {i}");
        }
        if let FunctionId::LowerConstraint(i) = id {
            assert!(i < self.n_lower_constraints, "unknown lower constraint {i}");
        }
        match self.kind {
            ProblemKind::BraninGoldstein => branin_goldstein::evaluate(id, x, z),
            ProblemKind::Smd2 => smd::evaluate_smd2(id, x, z),
            ProblemKind::Smd6 => smd::evaluate_smd6(id, x, z),
            ProblemKind::Smd12 => smd::evaluate_smd12(id, x, z),
        }
    }

    /// Noisy observation: `evaluate` plus a Gaussian draw with `noise_std`.
    pub fn observe(&self, id: FunctionId, x: &[f64], z: &[f64], rng: &mut impl Rng) -> f64 {
        let value = self.evaluate(id, x, z);
        if self.noise_std == 0.0 {
            return value;
        }
        let normal = Normal::new(0.0, self.noise_std).expect("valid noise std");
        value + normal.sample(rng)
    }

    /// Table of per-experiment defaults: (initial lengthscale, grid points per dim).
    pub fn default_lengthscale(&self) -> f64 {
        match self.kind {
            ProblemKind::BraninGoldstein => 0.2,
            ProblemKind::Smd2 => 0.7,
            ProblemKind::Smd6 => 0.2,
            ProblemKind::Smd12 => 0.4,
        }
    }

    pub fn default_grid_m(&self) -> usize {
        match self.kind {
            ProblemKind::BraninGoldstein => 100,
            ProblemKind::Smd2 => 25,
            ProblemKind::Smd6 => 25,
            ProblemKind::Smd12 => 16,
        }
    }

    /// SMD2 samples from the per-x estimated-solution set; the rest use the
    /// full trusted lower-optimal set.
    pub fn default_p_variant(&self) -> PVariant {
        match self.kind {
            ProblemKind::Smd2 => PVariant::PBar,
            _ => PVariant::PPlus,
        }
    }

    /// Lower-level argmax tie tolerance for the ground-truth scan. SMD6 has an
    /// exact valley of ties, so it gets a looser tolerance.
    pub fn default_tie_tolerance(&self) -> f64 {
        match self.kind {
            ProblemKind::Smd6 => 1e-6,
            _ => 1e-9,
        }
    }

    /// Default multiplier on the theoretical confidence width for benchmark
    /// runs. The theoretical schedule (scale 1) is what the regret analysis
    /// and the audit configurations assume, but on the dense BraninHoo grid
    /// its width is so conservative that the trusted lower-solution set keeps
    /// upper-greedy points alive past any realistic budget; the benchmark
    /// default narrows it to the scale the reported convergence behavior
    /// needs. Problems whose defaults already converge keep the theoretical
    /// schedule.
    pub fn default_beta_scale(&self) -> f64 {
        match self.kind {
            ProblemKind::BraninGoldstein => 0.1,
            _ => 1.0,
        }
    }
}
