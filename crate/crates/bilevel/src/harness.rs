//! Experiment orchestration: output normalization, seeded runs with regret
//! bookkeeping and bound audits, and CSV emission.
//!
//! Normalization is calibrated once per experiment from a fixed-seed uniform
//! sample of grid nodes and then frozen, keeping GP noise variances and
//! confidence widths stationary across a run. Objectives get the full affine
//! map; constraints are scaled only, so the feasibility boundary at zero is
//! preserved and trusted-set membership tests keep their meaning.

use std::collections::BTreeMap;
use std::fmt;
use std::io;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::baselines::{
    nested_run, trustedrand_initialize, NestedConfig, NestedError, TrustedRandConfig,
};
use crate::bilbo::{self, BilboConfig, EstimatorChoice, StepError};
use crate::gp::GPError;
use crate::grid::{build_grid, Grid, GridError, PointIndex};
use crate::oracle::{
    evaluate_on_grid, instantaneous_regret, load_ground_truth, save_ground_truth,
    solve_ground_truth, GroundTruth, Regrets,
};
use crate::problems::{BilevelProblem, FunctionId, ProblemError};
use crate::trusted::{PVariant, TrustedSets};

/// Affine output map `y -> (y - offset) / scale`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OutputMap {
    pub offset: f64,
    pub scale: f64,
}

/// Frozen per-function output maps, indexed in the problem's function order.
#[derive(Debug, Clone, PartialEq)]
pub struct OutputNormalization {
    maps: Vec<OutputMap>,
}

impl OutputNormalization {
    pub fn identity(n_functions: usize) -> Self {
        OutputNormalization {
            maps: vec![OutputMap { offset: 0.0, scale: 1.0 }; n_functions],
        }
    }

    pub fn from_maps(maps: Vec<OutputMap>) -> Self {
        assert!(maps.iter().all(|m| m.scale > 0.0), "scales must be positive");
        OutputNormalization { maps }
    }

    pub fn n_functions(&self) -> usize {
        self.maps.len()
    }

    pub fn apply(&self, fn_idx: usize, raw: f64) -> f64 {
        let m = &self.maps[fn_idx];
        (raw - m.offset) / m.scale
    }

    pub fn scale(&self, fn_idx: usize) -> f64 {
        self.maps[fn_idx].scale
    }

    pub fn offset(&self, fn_idx: usize) -> f64 {
        self.maps[fn_idx].offset
    }
}

/// Noiseless evaluations of every function at uniformly sampled grid nodes.
#[derive(Debug, Clone)]
pub struct CalibrationSample {
    /// Per function (problem order), one value per sampled node.
    pub values: Vec<Vec<f64>>,
}

pub const CALIBRATION_SAMPLES: usize = 1000;
pub const CALIBRATION_SEED: u64 = 0;

pub fn calibration_sample(
    problem: &BilevelProblem,
    grid: &Grid,
    n_samples: usize,
    seed: u64,
) -> CalibrationSample {
    assert!(n_samples > 0);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let functions = problem.functions();
    let mut values = vec![Vec::with_capacity(n_samples); functions.len()];
    let mut buf = vec![0.0; grid.d_x() + grid.d_z()];
    for _ in 0..n_samples {
        let point = PointIndex {
            x_idx: rng.random_range(0..grid.n_x()),
            z_idx: rng.random_range(0..grid.n_z()),
        };
        grid.write_joint(point, &mut buf);
        let (x, z) = buf.split_at(grid.d_x());
        for (fn_idx, &id) in functions.iter().enumerate() {
            values[fn_idx].push(problem.evaluate(id, x, z));
        }
    }
    CalibrationSample { values }
}

/// Fits the frozen output maps: objectives are centered and scaled to unit
/// standard deviation; constraints are scaled only (offset 0) so the sign of
/// a normalized constraint still encodes feasibility. Near-constant outputs
/// fall back to identity scale with a warning.
pub fn normalize_outputs(
    problem: &BilevelProblem,
    sample: &CalibrationSample,
) -> OutputNormalization {
    let functions = problem.functions();
    assert_eq!(sample.values.len(), functions.len());
    let mut maps = Vec::with_capacity(functions.len());
    for (fn_idx, id) in functions.iter().enumerate() {
        let vals = &sample.values[fn_idx];
        assert!(!vals.is_empty(), "calibration sample must be nonempty");
        let n = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / n;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let std = var.sqrt();
        let scale = if std > 1e-12 {
            std
        } else {
            eprintln!(
                "warning: function {} is near-constant over the calibration sample; using identity scale",
                id.label()
            );
            1.0
        };
        let is_constraint = matches!(
            id,
            FunctionId::UpperConstraint(_) | FunctionId::LowerConstraint(_)
        );
        maps.push(OutputMap {
            offset: if is_constraint { 0.0 } else { mean },
            scale,
        });
    }
    OutputNormalization { maps }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Algorithm {
    Bilbo,
    TrustedRand,
    Nested,
}

impl fmt::Display for Algorithm {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Algorithm::Bilbo => "bilbo",
            Algorithm::TrustedRand => "trustedrand",
            Algorithm::Nested => "nested",
        })
    }
}

impl FromStr for Algorithm {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "bilbo" => Ok(Algorithm::Bilbo),
            "trustedrand" => Ok(Algorithm::TrustedRand),
            "nested" => Ok(Algorithm::Nested),
            other => Err(format!(
                "unknown algorithm {other:?} (expected bilbo, trustedrand, or nested)"
            )),
        }
    }
}

#[derive(Debug, Clone)]
pub struct ExperimentConfig {
    pub problem: String,
    pub algorithm: Algorithm,
    pub seeds: Vec<u64>,
    /// Total observation budget per run; initial observations count toward it.
    pub total_queries: usize,
    pub delta: f64,
    pub epsilon: f64,
    /// `None` picks the problem's default variant.
    pub p_variant: Option<PVariant>,
    /// Grid points per dimension; `None` picks the problem default.
    pub grid_m: Option<usize>,
    pub init_observations: usize,
    pub init_lengthscale: Option<f64>,
    /// Multiplier on the theoretical confidence width; `None` picks the
    /// problem default (1 = the union-bound schedule, used by the audit
    /// configurations).
    pub beta_scale: Option<f64>,
    pub noise_std: Option<f64>,
    pub estimator: EstimatorChoice,
    pub tie_tolerance: Option<f64>,
    /// Run the per-iteration containment/bound/inclusion audits (solver runs
    /// only).
    pub audit: bool,
    pub out_dir: Option<PathBuf>,
    pub nested_lower_budget: usize,
    pub nested_lower_restarts: usize,
    pub nested_fd_step: Option<f64>,
}

impl ExperimentConfig {
    pub fn new(problem: impl Into<String>, algorithm: Algorithm) -> Self {
        ExperimentConfig {
            problem: problem.into(),
            algorithm,
            seeds: vec![0],
            total_queries: 200,
            delta: 0.05,
            epsilon: 0.0,
            p_variant: None,
            grid_m: None,
            init_observations: 3,
            init_lengthscale: None,
            beta_scale: None,
            noise_std: None,
            estimator: EstimatorChoice::PosteriorMeanInTrusted,
            tie_tolerance: None,
            audit: true,
            out_dir: None,
            nested_lower_budget: 20,
            nested_lower_restarts: 2,
            nested_fd_step: None,
        }
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let fail = |msg: String| Err(HarnessError::Config(msg));
        if self.seeds.is_empty() {
            return fail("seeds must be nonempty".into());
        }
        if !(self.delta > 0.0 && self.delta < 1.0) {
            return fail(format!("delta must lie in (0,1), got {}", self.delta));
        }
        if self.epsilon < 0.0 {
            return fail(format!("epsilon must be nonnegative, got {}", self.epsilon));
        }
        if self.total_queries == 0 {
            return fail("total queries must be at least 1".into());
        }
        if self.init_observations == 0 {
            return fail("init observations must be at least 1".into());
        }
        if let Some(m) = self.grid_m {
            if m < 2 {
                return fail(format!("grid points per dimension must be >= 2, got {m}"));
            }
        }
        if self.nested_lower_budget == 0 || self.nested_lower_restarts == 0 {
            return fail("nested lower budget and restarts must be positive".into());
        }
        if let Some(scale) = self.beta_scale {
            if !(scale > 0.0) {
                return fail(format!("beta scale must be positive, got {scale}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("invalid configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Problem(#[from] ProblemError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error(transparent)]
    Gp(#[from] GPError),
    #[error(transparent)]
    Nested(#[from] NestedError),
    #[error("ground truth has no feasible optimum; regrets are undefined")]
    NoFeasibleOptimum,
    #[error("i/o failure: {0}")]
    Io(#[from] io::Error),
}

/// Bound-audit facts recorded for one solver iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct RowAudit {
    /// True normalized values inside [l, u] for every function at every point.
    pub containment_ok: bool,
    /// Oracle optimum inside the trusted intersection.
    pub inclusion_ok: bool,
    /// Selection-point regret within `4 sqrt(beta) max_h sigma_h(query)`.
    pub bound_ok: bool,
    /// `4 sqrt(beta) max_h sigma_h(query)`, the bound itself.
    pub bound_value: f64,
    /// Every trusted-feasible point's constraint violation within its width.
    pub constraint_lemma_ok: bool,
    /// Every trusted-lower-optimal point's lower regret within its width sum.
    pub lower_lemma_ok: bool,
    /// Oracle regret at the pre-reassignment point within max estimated regret.
    pub c6_ok: bool,
    /// Largest estimated regret at the pre-reassignment point.
    pub max_rbar: f64,
    /// Fraction of upper points whose trusted-lower-optimal slice holds two
    /// or more points.
    pub p_plus_multi_x_fraction: f64,
}

/// One emitted row: an initial observation (`iter` 0) or one algorithm
/// iteration, with regrets in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRow {
    pub iter: usize,
    pub queries: usize,
    pub r_upper: f64,
    pub r_lower: f64,
    pub r_c_sum: f64,
    pub r_total: f64,
    pub sum_regret: f64,
    /// Running sum of `r_total` over all rows so far, this one included.
    pub cumulative: f64,
    pub estimator_sum_regret: Option<f64>,
    pub h_t: String,
    pub reassigned: Option<bool>,
    pub wall_ms: f64,
    pub audit: Option<RowAudit>,
    pub query_point: PointIndex,
    pub estimator_point: Option<PointIndex>,
    /// Raw-unit counterparts of `r_total` / `sum_regret`.
    pub raw_total: f64,
    pub raw_sum: f64,
}

/// Everything recorded about one seeded run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub problem: String,
    pub algorithm: Algorithm,
    pub seed: u64,
    pub grid_m: usize,
    pub total_queries: usize,
    pub rows: Vec<IterationRow>,
    /// Populated when the run ended early (infeasibility declaration).
    pub reason: Option<String>,
    pub final_estimator: Option<(PointIndex, Regrets)>,
}

/// Immutable per-experiment context shared by all seeds.
struct ExperimentContext {
    problem: BilevelProblem,
    grid: Grid,
    norm: OutputNormalization,
    gt: GroundTruth,
    /// True normalized values per function over the grid (audit runs only).
    true_norm: Option<Vec<Vec<f64>>>,
    /// Normalized slice optima per upper point (audit runs only).
    f_star_norm: Option<Vec<Option<f64>>>,
}

impl ExperimentContext {
    fn regrets(&self, point: PointIndex) -> Regrets {
        instantaneous_regret(&self.gt, &self.problem, &self.grid, &self.norm, point)
    }

    fn regrets_raw(&self, point: PointIndex) -> Regrets {
        let identity = OutputNormalization::identity(self.problem.n_functions());
        instantaneous_regret(&self.gt, &self.problem, &self.grid, &identity, point)
    }
}

fn build_context(config: &ExperimentConfig) -> Result<ExperimentContext, HarnessError> {
    let mut problem = BilevelProblem::by_name(&config.problem)?;
    if let Some(noise) = config.noise_std {
        if noise < 0.0 {
            return Err(HarnessError::Config(format!(
                "noise std must be nonnegative, got {noise}"
            )));
        }
        problem.noise_std = noise;
    }
    let m = config.grid_m.unwrap_or_else(|| problem.default_grid_m());
    let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), m)?;
    let tie_tol = config
        .tie_tolerance
        .unwrap_or_else(|| problem.default_tie_tolerance());

    let gt = match cached_ground_truth_path(config, &problem, m) {
        Some(path) if path.exists() => load_ground_truth(&path)?,
        maybe_path => {
            let gt = solve_ground_truth(&problem, &grid, tie_tol);
            if let Some(path) = maybe_path {
                save_ground_truth(&path, &gt)?;
            }
            gt
        }
    };
    if gt.best.is_none() {
        return Err(HarnessError::NoFeasibleOptimum);
    }

    let sample = calibration_sample(&problem, &grid, CALIBRATION_SAMPLES, CALIBRATION_SEED);
    let norm = normalize_outputs(&problem, &sample);

    let (true_norm, f_star_norm) = if config.audit {
        let functions = problem.functions();
        let mut tables = Vec::with_capacity(functions.len());
        for (fn_idx, &id) in functions.iter().enumerate() {
            let mut vals = evaluate_on_grid(&problem, &grid, id);
            for v in vals.iter_mut() {
                *v = norm.apply(fn_idx, *v);
            }
            tables.push(vals);
        }
        let lower_idx = problem.fn_index(FunctionId::LowerObjective);
        let f_star_norm = gt
            .f_star
            .iter()
            .map(|fs| fs.map(|v| norm.apply(lower_idx, v)))
            .collect();
        (Some(tables), Some(f_star_norm))
    } else {
        (None, None)
    };

    Ok(ExperimentContext {
        problem,
        grid,
        norm,
        gt,
        true_norm,
        f_star_norm,
    })
}

fn cached_ground_truth_path(
    config: &ExperimentConfig,
    problem: &BilevelProblem,
    m: usize,
) -> Option<PathBuf> {
    config
        .out_dir
        .as_ref()
        .map(|dir| dir.join(format!("gt_{}_m{}.bin", problem.name(), m)))
}

pub fn run_experiment(config: &ExperimentConfig) -> Result<Vec<RunRecord>, HarnessError> {
    config.validate()?;
    let ctx = build_context(config)?;
    let init_total = config.init_observations * ctx.problem.n_functions();
    if config.algorithm != Algorithm::Nested && config.total_queries < init_total {
        return Err(HarnessError::Config(format!(
            "total queries {} cannot cover {} initial observations",
            config.total_queries, init_total
        )));
    }

    let mut records = Vec::with_capacity(config.seeds.len());
    for &seed in &config.seeds {
        let record = match config.algorithm {
            Algorithm::Bilbo => run_bilbo_seed(config, &ctx, seed)?,
            Algorithm::TrustedRand => run_trustedrand_seed(config, &ctx, seed)?,
            Algorithm::Nested => run_nested_seed(config, &ctx, seed)?,
        };
        records.push(record);
    }
    if let Some(dir) = &config.out_dir {
        emit_csv(&records, dir)?;
    }
    Ok(records)
}

/// Builds the shared row skeleton from a queried point.
fn base_row(ctx: &ExperimentContext, point: PointIndex, iter: usize, queries: usize) -> IterationRow {
    let r = ctx.regrets(point);
    let raw = ctx.regrets_raw(point);
    IterationRow {
        iter,
        queries,
        r_upper: r.upper,
        r_lower: r.lower,
        r_c_sum: r.constraints.iter().sum(),
        r_total: r.total,
        sum_regret: r.sum,
        cumulative: 0.0, // filled by push_row
        estimator_sum_regret: None,
        h_t: String::new(),
        reassigned: None,
        wall_ms: 0.0,
        audit: None,
        query_point: point,
        estimator_point: None,
        raw_total: raw.total,
        raw_sum: raw.sum,
    }
}

fn push_row(rows: &mut Vec<IterationRow>, mut row: IterationRow) {
    let prev = rows.last().map_or(0.0, |r| r.cumulative);
    row.cumulative = prev + row.r_total;
    rows.push(row);
}

/// Containment, inclusion, and set-lemma audits against the current field
/// and sets (before the iteration's observation lands).
fn audit_sets(
    ctx: &ExperimentContext,
    field: &crate::trusted::ConfidenceField,
    sets: &TrustedSets,
) -> (bool, bool, bool, bool, f64) {
    let true_norm = ctx.true_norm.as_ref().expect("audit tables prepared");
    let f_star_norm = ctx.f_star_norm.as_ref().expect("audit tables prepared");
    let n_fn = ctx.problem.n_functions();
    let n_z = ctx.grid.n_z();

    let mut containment_ok = true;
    'outer: for h in 0..n_fn {
        let (u, l, truth) = (field.upper(h), field.lower(h), &true_norm[h]);
        for p in 0..truth.len() {
            if truth[p] < l[p] || truth[p] > u[p] {
                containment_ok = false;
                break 'outer;
            }
        }
    }

    let best_joint = ctx.grid.joint_index(ctx.gt.best.expect("feasible optimum").point);
    let inclusion_ok = sets.s_plus.get(best_joint) && sets.p_plus.get(best_joint);

    let mut constraint_lemma_ok = true;
    let constraint_idxs: Vec<usize> = (0..ctx.problem.n_upper_constraints())
        .map(|i| ctx.problem.fn_index(FunctionId::UpperConstraint(i)))
        .chain(
            (0..ctx.problem.n_lower_constraints())
                .map(|i| ctx.problem.fn_index(FunctionId::LowerConstraint(i))),
        )
        .collect();
    'cons: for &c in &constraint_idxs {
        let (u, l, truth) = (field.upper(c), field.lower(c), &true_norm[c]);
        for p in sets.s_plus.iter_ones() {
            let violation = (-truth[p]).max(0.0);
            if violation > u[p] - l[p] + 1e-9 {
                constraint_lemma_ok = false;
                break 'cons;
            }
        }
    }

    let mut lower_lemma_ok = true;
    let (u_f, l_f, truth_f) = (field.upper(1), field.lower(1), &true_norm[1]);
    for p in sets.p_plus.iter_ones() {
        let x_idx = p / n_z;
        let z_idx = p % n_z;
        let (Some(f_star), Some(z_bar)) = (f_star_norm[x_idx], sets.z_bar[x_idx]) else {
            continue;
        };
        let mut bound = u_f[p] - l_f[p];
        if z_idx != z_bar {
            let pb = x_idx * n_z + z_bar;
            bound += u_f[pb] - l_f[pb];
        }
        if f_star - truth_f[p] > bound + 1e-9 {
            lower_lemma_ok = false;
            break;
        }
    }

    let mut multi = 0usize;
    for x_idx in 0..ctx.grid.n_x() {
        let base = x_idx * n_z;
        let mut count = 0;
        for z_idx in 0..n_z {
            if sets.p_plus.get(base + z_idx) {
                count += 1;
                if count >= 2 {
                    break;
                }
            }
        }
        if count >= 2 {
            multi += 1;
        }
    }
    let p_plus_multi_x_fraction = multi as f64 / ctx.grid.n_x() as f64;

    (
        containment_ok,
        inclusion_ok,
        constraint_lemma_ok,
        lower_lemma_ok,
        p_plus_multi_x_fraction,
    )
}

fn run_bilbo_seed(
    config: &ExperimentConfig,
    ctx: &ExperimentContext,
    seed: u64,
) -> Result<RunRecord, HarnessError> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let bconfig = BilboConfig {
        delta: config.delta,
        epsilon: config.epsilon,
        p_variant: config
            .p_variant
            .unwrap_or_else(|| ctx.problem.default_p_variant()),
        init_observations: config.init_observations,
        init_lengthscale: config
            .init_lengthscale
            .unwrap_or_else(|| ctx.problem.default_lengthscale()),
        beta_scale: config
            .beta_scale
            .unwrap_or_else(|| ctx.problem.default_beta_scale()),
    };
    let mut state = bilbo::initialize(
        ctx.problem.clone(),
        ctx.grid.clone(),
        ctx.norm.clone(),
        bconfig,
        rng,
    )?;

    let mut rows = Vec::new();
    for (i, obs) in state.init_observations().iter().enumerate() {
        let mut row = base_row(ctx, obs.point, 0, i + 1);
        row.h_t = obs.id.label();
        push_row(&mut rows, row);
    }
    let init_total = rows.len();

    let mut reason = None;
    let iterations = config.total_queries - init_total;
    for _ in 0..iterations {
        let pre_audit = config
            .audit
            .then(|| audit_sets(ctx, state.field(), state.sets()));

        let tic = Instant::now();
        let entry = match state.step() {
            Ok(entry) => entry.clone(),
            Err(StepError::Infeasible) => {
                reason = Some(format!(
                    "infeasibility declared at iteration {}",
                    state.t()
                ));
                break;
            }
            Err(StepError::Gp(e)) => return Err(e.into()),
        };
        let wall_ms = tic.elapsed().as_secs_f64() * 1e3;

        let mut row = base_row(ctx, entry.decision.point, entry.t, init_total + entry.t);
        row.h_t = entry.decision.h_t.label();
        row.reassigned = Some(entry.decision.reassigned);
        row.wall_ms = wall_ms;

        if let Some((containment_ok, inclusion_ok, constraint_lemma_ok, lower_lemma_ok, multi)) =
            pre_audit
        {
            let max_sigma = entry
                .sigma_at_query
                .iter()
                .cloned()
                .fold(0.0f64, f64::max);
            let bound_value = 4.0 * entry.beta.sqrt() * max_sigma;
            let max_rbar = entry
                .decision
                .r_bar
                .iter()
                .cloned()
                .fold(f64::NEG_INFINITY, f64::max);
            let pre_total = ctx.regrets(entry.decision.pre_point).total;
            row.audit = Some(RowAudit {
                containment_ok,
                inclusion_ok,
                // The per-iteration bound controls the regret at the point the
                // acquisition argmax selected, while the sigmas are evaluated at
                // the (possibly reassigned) point actually queried: reassignment
                // only fires when it does not decrease the lower-objective
                // sigma, which is what closes the chain
                //   regret(selected) <= max_h rbar_h(selected)
                //                    <= 4 sqrt(beta) max_h sigma_h(queried).
                // Comparing the queried point's regret against the bound instead
                // is not implied and fails on rare reassigned iterations.
                bound_ok: pre_total <= bound_value + 1e-9,
                bound_value,
                constraint_lemma_ok,
                lower_lemma_ok,
                c6_ok: pre_total <= max_rbar + 1e-9,
                max_rbar,
                p_plus_multi_x_fraction: multi,
            });
        }

        if let Some(est) = state.estimator(config.estimator) {
            row.estimator_point = Some(est);
            row.estimator_sum_regret = Some(ctx.regrets(est).sum);
        }
        push_row(&mut rows, row);
    }

    let final_estimator = state
        .estimator(config.estimator)
        .map(|p| (p, ctx.regrets(p)));
    Ok(RunRecord {
        problem: ctx.problem.name().to_string(),
        algorithm: Algorithm::Bilbo,
        seed,
        grid_m: ctx.grid.m(),
        total_queries: config.total_queries,
        rows,
        reason,
        final_estimator,
    })
}

fn run_trustedrand_seed(
    config: &ExperimentConfig,
    ctx: &ExperimentContext,
    seed: u64,
) -> Result<RunRecord, HarnessError> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let tconfig = TrustedRandConfig {
        epsilon: config.epsilon,
        p_variant: config
            .p_variant
            .unwrap_or_else(|| ctx.problem.default_p_variant()),
        init_observations: config.init_observations,
        init_lengthscale: config
            .init_lengthscale
            .unwrap_or_else(|| ctx.problem.default_lengthscale()),
    };
    let mut state = trustedrand_initialize(
        ctx.problem.clone(),
        ctx.grid.clone(),
        ctx.norm.clone(),
        tconfig,
        rng,
    )?;

    let mut rows = Vec::new();
    for (i, obs) in state.init_observations().iter().enumerate() {
        let mut row = base_row(ctx, obs.point, 0, i + 1);
        row.h_t = obs.id.label();
        push_row(&mut rows, row);
    }
    let init_total = rows.len();
    let n_fn = ctx.problem.n_functions();

    let iterations = (config.total_queries - init_total) / n_fn;
    for _ in 0..iterations {
        let tic = Instant::now();
        let entry = state.step()?.clone();
        let wall_ms = tic.elapsed().as_secs_f64() * 1e3;

        let mut row = base_row(ctx, entry.point, entry.t, init_total + entry.t * n_fn);
        row.h_t = "all".to_string();
        row.wall_ms = wall_ms;
        if let Some(est) = entry.estimator {
            row.estimator_point = Some(est);
            row.estimator_sum_regret = Some(ctx.regrets(est).sum);
        }
        push_row(&mut rows, row);
    }

    let final_estimator = state
        .history()
        .last()
        .and_then(|e| e.estimator)
        .map(|p| (p, ctx.regrets(p)));
    Ok(RunRecord {
        problem: ctx.problem.name().to_string(),
        algorithm: Algorithm::TrustedRand,
        seed,
        grid_m: ctx.grid.m(),
        total_queries: config.total_queries,
        rows,
        reason: None,
        final_estimator,
    })
}

fn run_nested_seed(
    config: &ExperimentConfig,
    ctx: &ExperimentContext,
    seed: u64,
) -> Result<RunRecord, HarnessError> {
    let rng = ChaCha8Rng::seed_from_u64(seed);
    let nconfig = NestedConfig {
        lower_budget: config.nested_lower_budget,
        lower_restarts: config.nested_lower_restarts,
        fd_step: config.nested_fd_step.unwrap_or_else(|| ctx.grid.z_spacing()),
        ucb_delta: config.delta,
        init_upper_points: config.init_observations,
        init_lengthscale: config
            .init_lengthscale
            .unwrap_or_else(|| ctx.problem.default_lengthscale()),
    };
    let tic = Instant::now();
    let entries = nested_run(
        &ctx.problem,
        &ctx.grid,
        &ctx.norm,
        &nconfig,
        config.total_queries,
        rng,
    )?;
    let total_ms = tic.elapsed().as_secs_f64() * 1e3;
    let per_entry_ms = total_ms / entries.len().max(1) as f64;

    let mut rows = Vec::new();
    for entry in &entries {
        let mut row = base_row(ctx, entry.point, entry.upper_t, entry.queries_after);
        row.h_t = "F".to_string();
        row.wall_ms = per_entry_ms;
        if let Some(est) = entry.estimator {
            row.estimator_point = Some(est);
            row.estimator_sum_regret = Some(ctx.regrets(est).sum);
        }
        push_row(&mut rows, row);
    }

    let final_estimator = entries
        .last()
        .and_then(|e| e.estimator)
        .map(|p| (p, ctx.regrets(p)));
    Ok(RunRecord {
        problem: ctx.problem.name().to_string(),
        algorithm: Algorithm::Nested,
        seed,
        grid_m: ctx.grid.m(),
        total_queries: config.total_queries,
        rows,
        reason: None,
        final_estimator,
    })
}

pub const CSV_HEADER: [&str; 18] = [
    "iter",
    "queries",
    "algo",
    "problem",
    "seed",
    "r_F",
    "r_f",
    "r_c_sum",
    "r_t",
    "sum_regret",
    "R_T",
    "estimator_sum_regret",
    "h_t",
    "reassigned",
    "containment_ok",
    "bound_ok",
    "wall_ms",
    "reason",
];

fn fmt_f64(v: f64) -> String {
    // Canonicalize negative zero (the f64 Sum identity) so empty constraint
    // sums do not surface as "-0". Display is shortest-round-trip, which
    // keeps identical runs byte-identical.
    if v == 0.0 {
        return "0".to_string();
    }
    format!("{v}")
}

fn fmt_opt_bool(v: Option<bool>) -> String {
    v.map(|b| b.to_string()).unwrap_or_default()
}

pub fn run_csv_path(dir: &Path, record: &RunRecord) -> PathBuf {
    dir.join(format!(
        "{}_{}_seed{}.csv",
        record.problem, record.algorithm, record.seed
    ))
}

pub fn aggregate_csv_path(dir: &Path, record: &RunRecord) -> PathBuf {
    dir.join(format!("{}_{}_aggregate.csv", record.problem, record.algorithm))
}

/// Writes one CSV per run plus a per-(problem, algorithm) aggregate with
/// means and normal-approximation 95% confidence half-widths over seeds.
pub fn emit_csv(records: &[RunRecord], dir: &Path) -> io::Result<Vec<PathBuf>> {
    assert!(!records.is_empty(), "no records to emit");
    std::fs::create_dir_all(dir)?;
    let mut written = Vec::new();

    for record in records {
        let path = run_csv_path(dir, record);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record(CSV_HEADER)?;
        let last = record.rows.len().saturating_sub(1);
        for (i, row) in record.rows.iter().enumerate() {
            let reason = if i == last {
                record.reason.clone().unwrap_or_default()
            } else {
                String::new()
            };
            w.write_record([
                row.iter.to_string(),
                row.queries.to_string(),
                record.algorithm.to_string(),
                record.problem.clone(),
                record.seed.to_string(),
                fmt_f64(row.r_upper),
                fmt_f64(row.r_lower),
                fmt_f64(row.r_c_sum),
                fmt_f64(row.r_total),
                fmt_f64(row.sum_regret),
                fmt_f64(row.cumulative),
                row.estimator_sum_regret.map(fmt_f64).unwrap_or_default(),
                row.h_t.clone(),
                row.reassigned.map(|b| b.to_string()).unwrap_or_default(),
                fmt_opt_bool(row.audit.as_ref().map(|a| a.containment_ok)),
                fmt_opt_bool(row.audit.as_ref().map(|a| a.bound_ok)),
                fmt_f64(row.wall_ms),
                reason,
            ])?;
        }
        w.flush()?;
        written.push(path);
    }

    // Group by (problem, algorithm) for the aggregates.
    let mut groups: BTreeMap<(String, String), Vec<&RunRecord>> = BTreeMap::new();
    for record in records {
        groups
            .entry((record.problem.clone(), record.algorithm.to_string()))
            .or_default()
            .push(record);
    }
    for ((_, _), group) in &groups {
        let mut by_queries: BTreeMap<usize, (Vec<f64>, Vec<f64>)> = BTreeMap::new();
        for record in group {
            for row in &record.rows {
                let slot = by_queries.entry(row.queries).or_default();
                slot.0.push(row.sum_regret);
                if let Some(e) = row.estimator_sum_regret {
                    slot.1.push(e);
                }
            }
        }
        let path = aggregate_csv_path(dir, group[0]);
        let mut w = csv::Writer::from_path(&path)?;
        w.write_record([
            "queries",
            "n",
            "sum_regret_mean",
            "sum_regret_ci95",
            "estimator_sum_regret_mean",
            "estimator_sum_regret_ci95",
        ])?;
        for (queries, (sums, ests)) in &by_queries {
            let (mean, ci) = mean_ci95(sums);
            let (est_mean, est_ci) = if ests.is_empty() {
                (None, None)
            } else {
                let (m, c) = mean_ci95(ests);
                (Some(m), Some(c))
            };
            w.write_record([
                queries.to_string(),
                sums.len().to_string(),
                fmt_f64(mean),
                fmt_f64(ci),
                est_mean.map(fmt_f64).unwrap_or_default(),
                est_ci.map(fmt_f64).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        written.push(path);
    }
    Ok(written)
}

/// Mean and 1.96 * sd / sqrt(n) half-width (sample standard deviation).
pub fn mean_ci95(values: &[f64]) -> (f64, f64) {
    assert!(!values.is_empty());
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, 1.96 * var.sqrt() / n.sqrt())
}

/// Parses the flat `key = value` config format (`#` comments, blank lines
/// skipped) into overrides applied on top of the given config.
pub fn apply_config_file(config: &mut ExperimentConfig, text: &str) -> Result<(), HarnessError> {
    for (line_no, raw_line) in text.lines().enumerate() {
        let line = raw_line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let Some((key, value)) = line.split_once('=') else {
            return Err(HarnessError::Config(format!(
                "line {}: expected key=value, got {raw_line:?}",
                line_no + 1
            )));
        };
        apply_config_key(config, key.trim(), value.trim()).map_err(|e| {
            HarnessError::Config(format!("line {}: {e}", line_no + 1))
        })?;
    }
    Ok(())
}

pub fn parse_p_variant(value: &str) -> Result<PVariant, String> {
    match value {
        "p_plus" => Ok(PVariant::PPlus),
        "p_bar" => Ok(PVariant::PBar),
        other => Err(format!("unknown p variant {other:?} (expected p_plus or p_bar)")),
    }
}

pub fn parse_estimator(value: &str) -> Result<EstimatorChoice, String> {
    match value {
        "posterior_mean" => Ok(EstimatorChoice::PosteriorMeanInTrusted),
        "minmax" => Ok(EstimatorChoice::MinMaxEstimatedRegret),
        other => Err(format!(
            "unknown estimator {other:?} (expected posterior_mean or minmax)"
        )),
    }
}

fn apply_config_key(
    config: &mut ExperimentConfig,
    key: &str,
    value: &str,
) -> Result<(), String> {
    fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String>
    where
        T::Err: fmt::Display,
    {
        value
            .parse()
            .map_err(|e| format!("invalid value {value:?} for {key}: {e}"))
    }
    match key {
        "problem" => config.problem = value.to_string(),
        "algo" => config.algorithm = value.parse()?,
        "seeds" => {
            let seeds: Result<Vec<u64>, _> = value
                .split(',')
                .map(|s| num::<u64>("seeds", s.trim()))
                .collect();
            config.seeds = seeds?;
        }
        "queries" => config.total_queries = num(key, value)?,
        "delta" => config.delta = num(key, value)?,
        "epsilon" => config.epsilon = num(key, value)?,
        "p_variant" => config.p_variant = Some(parse_p_variant(value)?),
        "grid_m" => config.grid_m = Some(num(key, value)?),
        "init_observations" => config.init_observations = num(key, value)?,
        "lengthscale" => config.init_lengthscale = Some(num(key, value)?),
        "beta_scale" => config.beta_scale = Some(num(key, value)?),
        "noise_std" => config.noise_std = Some(num(key, value)?),
        "estimator" => config.estimator = parse_estimator(value)?,
        "tie_tolerance" => config.tie_tolerance = Some(num(key, value)?),
        "audit" => config.audit = num(key, value)?,
        "out" => config.out_dir = Some(PathBuf::from(value)),
        "nested_lower_budget" => config.nested_lower_budget = num(key, value)?,
        "nested_lower_restarts" => config.nested_lower_restarts = num(key, value)?,
        "nested_fd_step" => config.nested_fd_step = Some(num(key, value)?),
        other => return Err(format!("unknown configuration key {other:?}")),
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::problems::{make_branin_goldstein, make_smd};
    use approx::assert_relative_eq;

    #[test]
    fn calibration_is_deterministic_and_normalizing() {
        let problem = make_branin_goldstein();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 30).unwrap();
        let s1 = calibration_sample(&problem, &grid, 1000, 0);
        let s2 = calibration_sample(&problem, &grid, 1000, 0);
        assert_eq!(s1.values, s2.values);

        let norm = normalize_outputs(&problem, &s1);
        for fn_idx in 0..2 {
            let mapped: Vec<f64> = s1.values[fn_idx]
                .iter()
                .map(|&v| norm.apply(fn_idx, v))
                .collect();
            let n = mapped.len() as f64;
            let mean = mapped.iter().sum::<f64>() / n;
            let var = mapped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_relative_eq!(mean, 0.0, epsilon = 1e-9);
            assert_relative_eq!(var.sqrt(), 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn constraints_keep_their_zero() {
        let problem = make_smd(12).unwrap();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 9).unwrap();
        let sample = calibration_sample(&problem, &grid, 500, 0);
        let norm = normalize_outputs(&problem, &sample);
        for c in 0..3 {
            let fn_idx = problem.fn_index(FunctionId::UpperConstraint(c));
            assert_eq!(norm.offset(fn_idx), 0.0);
            // Scale-only maps preserve sign, hence feasibility.
            assert!(norm.apply(fn_idx, 1.5) > 0.0);
            assert!(norm.apply(fn_idx, -1.5) < 0.0);
            assert_eq!(norm.apply(fn_idx, 0.0), 0.0);
            // Unit standard deviation after mapping; the mean is untouched.
            let mapped: Vec<f64> = sample.values[fn_idx]
                .iter()
                .map(|&v| norm.apply(fn_idx, v))
                .collect();
            let n = mapped.len() as f64;
            let mean = mapped.iter().sum::<f64>() / n;
            let var = mapped.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
            assert_relative_eq!(var, 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn near_constant_output_gets_identity_scale() {
        let problem = make_branin_goldstein();
        let sample = CalibrationSample {
            values: vec![vec![2.5; 10], vec![0.0, 1.0, 2.0, 3.0, 4.0, 0.0, 1.0, 2.0, 3.0, 4.0]],
        };
        let norm = normalize_outputs(&problem, &sample);
        assert_eq!(norm.scale(0), 1.0);
        assert_eq!(norm.offset(0), 2.5);
    }

    #[test]
    fn config_file_round_trip() {
        let mut config = ExperimentConfig::new("branin_goldstein", Algorithm::Bilbo);
        let text = "\
# experiment setup
problem = smd2
algo = trustedrand
seeds = 0, 1, 2
queries = 120
delta = 0.1
epsilon = 0.5
p_variant = p_bar
grid_m = 9
estimator = minmax
audit = false
";
        apply_config_file(&mut config, text).unwrap();
        assert_eq!(config.problem, "smd2");
        assert_eq!(config.algorithm, Algorithm::TrustedRand);
        assert_eq!(config.seeds, vec![0, 1, 2]);
        assert_eq!(config.total_queries, 120);
        assert_eq!(config.delta, 0.1);
        assert_eq!(config.epsilon, 0.5);
        assert_eq!(config.p_variant, Some(PVariant::PBar));
        assert_eq!(config.grid_m, Some(9));
        assert_eq!(config.estimator, EstimatorChoice::MinMaxEstimatedRegret);
        assert!(!config.audit);
    }

    #[test]
    fn config_file_rejects_unknown_keys_and_bad_lines() {
        let mut config = ExperimentConfig::new("smd2", Algorithm::Bilbo);
        assert!(apply_config_file(&mut config, "bogus_key = 3").is_err());
        assert!(apply_config_file(&mut config, "no equals sign here").is_err());
        assert!(apply_config_file(&mut config, "delta = not_a_number").is_err());
    }

    #[test]
    fn config_validation_catches_bad_ranges() {
        let mut config = ExperimentConfig::new("smd2", Algorithm::Bilbo);
        config.delta = 1.5;
        assert!(config.validate().is_err());
        config.delta = 0.05;
        config.seeds.clear();
        assert!(config.validate().is_err());
        config.seeds = vec![0];
        config.epsilon = -1.0;
        assert!(config.validate().is_err());
        config.epsilon = 0.0;
        assert!(config.validate().is_ok());
    }

    #[test]
    fn mean_ci_formula() {
        let (mean, ci) = mean_ci95(&[1.0, 2.0, 3.0, 4.0, 5.0]);
        assert_relative_eq!(mean, 3.0);
        // sd = sqrt(2.5), half-width = 1.96 * sd / sqrt(5).
        assert_relative_eq!(ci, 1.96 * 2.5f64.sqrt() / 5.0f64.sqrt(), epsilon = 1e-12);
        let (mean, ci) = mean_ci95(&[7.0]);
        assert_eq!((mean, ci), (7.0, 0.0));
    }
}
