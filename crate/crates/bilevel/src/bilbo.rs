//! The simultaneous-optimization query loop.
//!
//! Each iteration selects the query point maximizing the upper objective's
//! upper confidence bound over the trusted intersection, picks the single
//! function whose estimated regret at that point is largest, conditionally
//! reassigns the lower coordinate toward the estimated lower solution when
//! the lower objective is queried, observes once, and refreshes only the
//! observed function's model before rebuilding the trusted sets.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::gp::{fit_mle, posterior, GPDataset, GPError, GPHyperparams, GPPosterior};
use crate::grid::{Grid, PointIndex};
use crate::harness::OutputNormalization;
use crate::problems::{BilevelProblem, FunctionId};
use crate::trusted::{
    beta, build_trusted_sets, confidence_bounds, ConfidenceField, PVariant, TrustedSets,
};

/// Floor keeping GP noise positive for noiseless problems.
const MIN_NOISE_VARIANCE: f64 = 1e-12;

#[derive(Debug, Error)]
pub enum StepError {
    /// Terminal: the trusted intersection is empty, so no feasible point
    /// exists with high probability.
    #[error("infeasibility declared: trusted intersection is empty")]
    Infeasible,
    #[error(transparent)]
    Gp(#[from] GPError),
}

#[derive(Debug, Clone, Copy)]
pub struct BilboConfig {
    pub delta: f64,
    pub epsilon: f64,
    pub p_variant: PVariant,
    pub init_observations: usize,
    pub init_lengthscale: f64,
    /// Multiplier on the theoretical confidence width `beta_t`. 1 keeps the
    /// union-bound schedule the regret analysis assumes; the benchmark
    /// experiments use smaller per-problem defaults because the theoretical
    /// width is conservative enough to stall trusted-set refinement at
    /// realistic budgets.
    pub beta_scale: f64,
}

/// Final-answer extraction rule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorChoice {
    /// Historical query whose recorded max estimated regret is smallest.
    MinMaxEstimatedRegret,
    /// Argmax of the current upper-objective posterior mean over the trusted
    /// intersection (the experiment default).
    PosteriorMeanInTrusted,
}

/// One query decision; `point` is what was actually observed, `pre_point`
/// the argmax before conditional reassignment.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryDecision {
    pub point: PointIndex,
    pub pre_point: PointIndex,
    pub h_t: FunctionId,
    pub h_idx: usize,
    pub reassigned: bool,
    /// Estimated regret per function at `pre_point`.
    pub r_bar: Vec<f64>,
}

/// Everything recorded about one completed iteration, sufficient to audit
/// the regret bounds afterwards.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryEntry {
    pub t: usize,
    pub decision: QueryDecision,
    pub observed_raw: f64,
    pub observed_norm: f64,
    /// Confidence scale the iteration's sets were built with.
    pub beta: f64,
    /// Posterior std per function at the queried point, before the update.
    pub sigma_at_query: Vec<f64>,
    /// Posterior std of the lower objective at (x_t, z_bar(x_t)).
    pub sigma_f_at_zbar: f64,
    /// z_bar(x_t) at decision time.
    pub z_bar: Option<usize>,
}

/// One initial observation drawn before the loop starts.
#[derive(Debug, Clone, PartialEq)]
pub struct InitObservation {
    pub fn_idx: usize,
    pub id: FunctionId,
    pub point: PointIndex,
    pub raw: f64,
    pub normalized: f64,
}

pub struct AlgorithmState {
    problem: BilevelProblem,
    grid: Grid,
    norm: OutputNormalization,
    config: BilboConfig,
    grid_coords: Vec<f64>,
    datasets: Vec<GPDataset>,
    hyperparams: Vec<GPHyperparams>,
    posteriors: Vec<GPPosterior>,
    field: ConfidenceField,
    sets: TrustedSets,
    t: usize,
    history: Vec<HistoryEntry>,
    init_observations: Vec<InitObservation>,
    infeasible: bool,
    rng: ChaCha8Rng,
}

/// Draws `k` uniformly random grid observations per function, in function
/// order, pushing normalized targets into fresh datasets.
pub(crate) fn draw_init_observations(
    problem: &BilevelProblem,
    grid: &Grid,
    norm: &OutputNormalization,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> (Vec<GPDataset>, Vec<InitObservation>) {
    let dim = grid.d_x() + grid.d_z();
    let mut datasets: Vec<GPDataset> = (0..problem.n_functions())
        .map(|_| GPDataset::new(dim))
        .collect();
    let mut log = Vec::with_capacity(problem.n_functions() * k);
    let mut buf = vec![0.0; dim];
    for (fn_idx, id) in problem.functions().into_iter().enumerate() {
        for _ in 0..k {
            let point = PointIndex {
                x_idx: rng.random_range(0..grid.n_x()),
                z_idx: rng.random_range(0..grid.n_z()),
            };
            grid.write_joint(point, &mut buf);
            let (x, z) = buf.split_at(grid.d_x());
            let raw = problem.observe(id, x, z, rng);
            let normalized = norm.apply(fn_idx, raw);
            datasets[fn_idx].push(&buf, normalized, raw);
            log.push(InitObservation {
                fn_idx,
                id,
                point,
                raw,
                normalized,
            });
        }
    }
    (datasets, log)
}

/// Per-function GP noise variance in normalized units, floored to stay
/// positive.
pub(crate) fn normalized_noise_variance(
    problem: &BilevelProblem,
    norm: &OutputNormalization,
    fn_idx: usize,
) -> f64 {
    let s = problem.noise_std / norm.scale(fn_idx);
    (s * s).max(MIN_NOISE_VARIANCE)
}

pub fn initialize(
    problem: BilevelProblem,
    grid: Grid,
    norm: OutputNormalization,
    config: BilboConfig,
    mut rng: ChaCha8Rng,
) -> Result<AlgorithmState, GPError> {
    assert!(config.delta > 0.0 && config.delta < 1.0);
    assert!(config.epsilon >= 0.0);
    assert!(config.beta_scale > 0.0);
    let (datasets, init_observations) =
        draw_init_observations(&problem, &grid, &norm, config.init_observations, &mut rng);
    let grid_coords = grid.joint_coords_flat();

    let mut hyperparams = Vec::with_capacity(datasets.len());
    let mut posteriors = Vec::with_capacity(datasets.len());
    for (fn_idx, ds) in datasets.iter().enumerate() {
        let init = GPHyperparams::new(
            config.init_lengthscale,
            1.0,
            normalized_noise_variance(&problem, &norm, fn_idx),
            0.0,
        );
        let hp = fit_mle(ds, &init, true);
        posteriors.push(posterior(ds, &hp, &grid_coords)?);
        hyperparams.push(hp);
    }

    let b = config.beta_scale * beta(1, config.delta, problem.n_functions(), grid.n_x(), grid.n_z());
    let field = confidence_bounds(&posteriors, b);
    let sets = build_trusted_sets(&field, &problem, &grid, config.epsilon, config.p_variant);
    Ok(AlgorithmState {
        problem,
        grid,
        norm,
        config,
        grid_coords,
        datasets,
        hyperparams,
        posteriors,
        field,
        sets,
        t: 1,
        history: Vec::new(),
        init_observations,
        infeasible: false,
        rng,
    })
}

/// Argmax of the upper objective's upper bound over the trusted
/// intersection; ties break to the lowest joint index. `None` signals
/// infeasibility (also when only the intersection, not s_plus, is empty).
pub fn select_query(field: &ConfidenceField, sets: &TrustedSets, grid: &Grid) -> Option<PointIndex> {
    let intersection = sets.s_plus.and(&sets.p_plus);
    let u_upper = field.upper(0);
    let mut best: Option<(usize, f64)> = None;
    for p in intersection.iter_ones() {
        if best.map_or(true, |(_, bv)| u_upper[p] > bv) {
            best = Some((p, u_upper[p]));
        }
    }
    best.map(|(p, _)| grid.from_joint_index(p))
}

/// Estimated regret per function at a candidate query point: the confidence
/// width there, except the lower objective also pays the width at
/// (x, z_bar(x)) whenever z differs from z_bar.
pub fn estimated_regrets(
    field: &ConfidenceField,
    sets: &TrustedSets,
    point: PointIndex,
    grid: &Grid,
) -> Vec<f64> {
    let p = grid.joint_index(point);
    let z_bar = sets.z_bar[point.x_idx]
        .expect("estimated regrets need z_bar; candidate points come from p_plus");
    let p_bar = grid.joint_index(PointIndex {
        x_idx: point.x_idx,
        z_idx: z_bar,
    });
    let mut out = Vec::with_capacity(field.n_functions());
    for h in 0..field.n_functions() {
        // u - l is exactly 2 sqrt(beta) sigma.
        let mut r = field.upper(h)[p] - field.lower(h)[p];
        if h == 1 && point.z_idx != z_bar {
            r += field.upper(h)[p_bar] - field.lower(h)[p_bar];
        }
        out.push(r);
    }
    out
}

/// Argmax over estimated regrets; ties break to the earliest function in
/// the fixed order (upper objective, lower objective, then constraints).
pub fn select_function(r_bar: &[f64]) -> usize {
    assert!(!r_bar.is_empty());
    let mut best = 0;
    for (h, &r) in r_bar.iter().enumerate().skip(1) {
        if r > r_bar[best] {
            best = h;
        }
    }
    best
}

/// Moves the query to (x, z_bar(x)) iff the lower objective was selected and
/// its posterior std at z_bar is at least the std at the original z.
pub fn conditional_reassign(
    posterior_f: &GPPosterior,
    grid: &Grid,
    point: PointIndex,
    z_bar: Option<usize>,
    h_idx: usize,
) -> PointIndex {
    if h_idx != 1 {
        return point;
    }
    let Some(z_bar) = z_bar else { return point };
    let at = |z_idx| posterior_f.std[grid.joint_index(PointIndex { x_idx: point.x_idx, z_idx })];
    if at(z_bar) >= at(point.z_idx) {
        PointIndex {
            x_idx: point.x_idx,
            z_idx: z_bar,
        }
    } else {
        point
    }
}

impl AlgorithmState {
    pub fn problem(&self) -> &BilevelProblem {
        &self.problem
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn norm(&self) -> &OutputNormalization {
        &self.norm
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn field(&self) -> &ConfidenceField {
        &self.field
    }

    pub fn sets(&self) -> &TrustedSets {
        &self.sets
    }

    pub fn posteriors(&self) -> &[GPPosterior] {
        &self.posteriors
    }

    pub fn hyperparams(&self) -> &[GPHyperparams] {
        &self.hyperparams
    }

    pub fn datasets(&self) -> &[GPDataset] {
        &self.datasets
    }

    pub fn history(&self) -> &[HistoryEntry] {
        &self.history
    }

    pub fn init_observations(&self) -> &[InitObservation] {
        &self.init_observations
    }

    pub fn infeasible(&self) -> bool {
        self.infeasible
    }

    /// Runs one iteration. On success the newly appended history entry is
    /// returned; `Infeasible` is terminal.
    pub fn step(&mut self) -> Result<&HistoryEntry, StepError> {
        if self.infeasible {
            return Err(StepError::Infeasible);
        }
        let Some(pre_point) = select_query(&self.field, &self.sets, &self.grid) else {
            self.infeasible = true;
            return Err(StepError::Infeasible);
        };
        let r_bar = estimated_regrets(&self.field, &self.sets, pre_point, &self.grid);
        let h_idx = select_function(&r_bar);
        let z_bar = self.sets.z_bar[pre_point.x_idx];
        let point = conditional_reassign(&self.posteriors[1], &self.grid, pre_point, z_bar, h_idx);
        let reassigned = point != pre_point;
        let id = self.problem.functions()[h_idx];

        let joint = self.grid.joint_index(point);
        let sigma_at_query: Vec<f64> =
            self.posteriors.iter().map(|post| post.std[joint]).collect();
        let sigma_f_at_zbar = match z_bar {
            Some(zb) => {
                self.posteriors[1].std[self.grid.joint_index(PointIndex {
                    x_idx: point.x_idx,
                    z_idx: zb,
                })]
            }
            None => f64::NAN,
        };

        let mut buf = vec![0.0; self.grid.d_x() + self.grid.d_z()];
        self.grid.write_joint(point, &mut buf);
        let (x, z) = buf.split_at(self.grid.d_x());
        let raw = self.problem.observe(id, x, z, &mut self.rng);
        let normalized = self.norm.apply(h_idx, raw);
        self.datasets[h_idx].push(&buf, normalized, raw);

        self.hyperparams[h_idx] = fit_mle(&self.datasets[h_idx], &self.hyperparams[h_idx], true);
        self.posteriors[h_idx] =
            posterior(&self.datasets[h_idx], &self.hyperparams[h_idx], &self.grid_coords)?;

        let beta_now = self.field.beta();
        self.t += 1;
        let b_next = self.config.beta_scale
            * beta(
                self.t,
                self.config.delta,
                self.problem.n_functions(),
                self.grid.n_x(),
                self.grid.n_z(),
            );
        self.field = confidence_bounds(&self.posteriors, b_next);
        self.sets = build_trusted_sets(
            &self.field,
            &self.problem,
            &self.grid,
            self.config.epsilon,
            self.config.p_variant,
        );

        self.history.push(HistoryEntry {
            t: self.t - 1,
            decision: QueryDecision {
                point,
                pre_point,
                h_t: id,
                h_idx,
                reassigned,
                r_bar,
            },
            observed_raw: raw,
            observed_norm: normalized,
            beta: beta_now,
            sigma_at_query,
            sigma_f_at_zbar,
            z_bar,
        });
        Ok(self.history.last().unwrap())
    }

    pub fn estimator(&self, choice: EstimatorChoice) -> Option<PointIndex> {
        match choice {
            EstimatorChoice::MinMaxEstimatedRegret => minmax_from_history(&self.history),
            EstimatorChoice::PosteriorMeanInTrusted => {
                posterior_mean_in_trusted(&self.posteriors[0].mean, &self.sets, &self.grid)
            }
        }
    }
}

/// Historical query minimizing the recorded max estimated regret; earliest
/// iteration wins ties.
pub fn minmax_from_history(history: &[HistoryEntry]) -> Option<PointIndex> {
    let mut best: Option<(PointIndex, f64)> = None;
    for entry in history {
        let worst = entry
            .decision
            .r_bar
            .iter()
            .cloned()
            .fold(f64::NEG_INFINITY, f64::max);
        if best.map_or(true, |(_, bv)| worst < bv) {
            best = Some((entry.decision.point, worst));
        }
    }
    best.map(|(p, _)| p)
}

/// Argmax of a mean surface over the trusted intersection.
pub fn posterior_mean_in_trusted(
    mean_upper: &[f64],
    sets: &TrustedSets,
    grid: &Grid,
) -> Option<PointIndex> {
    let intersection = sets.s_plus.and(&sets.p_plus);
    let mut best: Option<(usize, f64)> = None;
    for p in intersection.iter_ones() {
        if best.map_or(true, |(_, bv)| mean_upper[p] > bv) {
            best = Some((p, mean_upper[p]));
        }
    }
    best.map(|(p, _)| grid.from_joint_index(p))
}
