//! Comparison algorithms: TrustedRand and Nested.
//!
//! TrustedRand keeps the trusted-set machinery but replaces every confidence
//! bound with the posterior mean, samples its query uniformly from the
//! resulting intersection, and observes every function there each iteration.
//! Nested maintains a GP only over the upper variable for the composite
//! objective x -> F(x, z_hat(x)), solving the lower level to convergence with
//! a budgeted local search at every upper query.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::bilbo::{draw_init_observations, normalized_noise_variance, posterior_mean_in_trusted, InitObservation};
use crate::gp::{
    fit_mle, posterior, posterior_mean_on_uniform_grid, GPDataset, GPError, GPHyperparams,
};
use crate::grid::{Grid, PointIndex};
use crate::harness::OutputNormalization;
use crate::mask::Mask;
use crate::problems::{BilevelProblem, FunctionId};
use crate::trusted::{beta, build_trusted_sets, ConfidenceField, PVariant, TrustedSets};

#[derive(Debug, Clone, Copy)]
pub struct TrustedRandConfig {
    pub epsilon: f64,
    pub p_variant: PVariant,
    pub init_observations: usize,
    pub init_lengthscale: f64,
}

/// One TrustedRand iteration: the sampled point, the mean-based intersection
/// it was sampled from, and the observations of every function there.
#[derive(Debug, Clone)]
pub struct TrustedRandEntry {
    pub t: usize,
    pub point: PointIndex,
    /// The query fell outside `mask` because the intersection was empty and
    /// sampling fell back to the whole grid.
    pub fell_back: bool,
    pub mask: Mask,
    pub observed_raw: Vec<f64>,
    pub observed_norm: Vec<f64>,
    /// Argmax of the upper mean over the updated mean-based intersection.
    pub estimator: Option<PointIndex>,
}

pub struct TrustedRandState {
    problem: BilevelProblem,
    grid: Grid,
    norm: OutputNormalization,
    config: TrustedRandConfig,
    datasets: Vec<GPDataset>,
    train_idx: Vec<Vec<u32>>,
    hyperparams: Vec<GPHyperparams>,
    means: Vec<Vec<f64>>,
    mean_sets: TrustedSets,
    t: usize,
    history: Vec<TrustedRandEntry>,
    init_observations: Vec<InitObservation>,
    /// (m, d, spacing) when the grid step is shared across dimensions,
    /// enabling the table-driven mean evaluation.
    fast_grid: Option<(usize, usize, f64)>,
    grid_coords: Option<Vec<f64>>,
    rng: ChaCha8Rng,
}

fn mean_field(means: &[Vec<f64>]) -> ConfidenceField {
    ConfidenceField::from_parts(0.0, means.to_vec(), means.to_vec())
}

fn compute_means(
    ds: &GPDataset,
    hp: &GPHyperparams,
    train_idx: &[u32],
    fast_grid: Option<(usize, usize, f64)>,
    grid_coords: &Option<Vec<f64>>,
) -> Result<Vec<f64>, GPError> {
    match fast_grid {
        Some((m, d, h)) => posterior_mean_on_uniform_grid(ds, hp, train_idx, m, d, h),
        None => Ok(posterior(ds, hp, grid_coords.as_ref().expect("slow-path coords"))?.mean),
    }
}

pub fn trustedrand_initialize(
    problem: BilevelProblem,
    grid: Grid,
    norm: OutputNormalization,
    config: TrustedRandConfig,
    mut rng: ChaCha8Rng,
) -> Result<TrustedRandState, GPError> {
    assert!(config.epsilon >= 0.0);
    let (datasets, init_observations) =
        draw_init_observations(&problem, &grid, &norm, config.init_observations, &mut rng);
    let d = grid.d_x() + grid.d_z();
    let fast_grid = grid.uniform_spacing().map(|h| (grid.m(), d, h));
    let grid_coords = if fast_grid.is_none() {
        Some(grid.joint_coords_flat())
    } else {
        None
    };
    let mut train_idx: Vec<Vec<u32>> = vec![Vec::new(); datasets.len()];
    for obs in &init_observations {
        train_idx[obs.fn_idx].extend(grid.multi_index(obs.point));
    }

    let mut hyperparams = Vec::with_capacity(datasets.len());
    let mut means = Vec::with_capacity(datasets.len());
    for (fn_idx, ds) in datasets.iter().enumerate() {
        let init = GPHyperparams::new(
            config.init_lengthscale,
            1.0,
            normalized_noise_variance(&problem, &norm, fn_idx),
            0.0,
        );
        let hp = fit_mle(ds, &init, true);
        means.push(compute_means(ds, &hp, &train_idx[fn_idx], fast_grid, &grid_coords)?);
        hyperparams.push(hp);
    }
    let mean_sets = build_trusted_sets(
        &mean_field(&means),
        &problem,
        &grid,
        config.epsilon,
        config.p_variant,
    );
    Ok(TrustedRandState {
        problem,
        grid,
        norm,
        config,
        datasets,
        train_idx,
        hyperparams,
        means,
        mean_sets,
        t: 1,
        history: Vec::new(),
        init_observations,
        fast_grid,
        grid_coords,
        rng,
    })
}

impl TrustedRandState {
    pub fn problem(&self) -> &BilevelProblem {
        &self.problem
    }

    pub fn grid(&self) -> &Grid {
        &self.grid
    }

    pub fn t(&self) -> usize {
        self.t
    }

    pub fn history(&self) -> &[TrustedRandEntry] {
        &self.history
    }

    pub fn init_observations(&self) -> &[InitObservation] {
        &self.init_observations
    }

    pub fn datasets(&self) -> &[GPDataset] {
        &self.datasets
    }

    pub fn mean_sets(&self) -> &TrustedSets {
        &self.mean_sets
    }

    pub fn means(&self) -> &[Vec<f64>] {
        &self.means
    }

    /// One iteration: sample from the mean-based intersection (whole grid if
    /// empty), observe every function there, refit and refresh all means.
    pub fn step(&mut self) -> Result<&TrustedRandEntry, GPError> {
        let mask = self.mean_sets.s_plus.and(&self.mean_sets.p_plus);
        let available = mask.count_ones();
        let (joint, fell_back) = if available == 0 {
            (self.rng.random_range(0..self.grid.n_points()), true)
        } else {
            let k = self.rng.random_range(0..available);
            (mask.select(k).expect("k below population count"), false)
        };
        let point = self.grid.from_joint_index(joint);

        let mut buf = vec![0.0; self.grid.d_x() + self.grid.d_z()];
        self.grid.write_joint(point, &mut buf);
        let (x, z) = buf.split_at(self.grid.d_x());
        let mut observed_raw = Vec::with_capacity(self.datasets.len());
        let mut observed_norm = Vec::with_capacity(self.datasets.len());
        for (fn_idx, id) in self.problem.functions().into_iter().enumerate() {
            let raw = self.problem.observe(id, x, z, &mut self.rng);
            let normalized = self.norm.apply(fn_idx, raw);
            self.datasets[fn_idx].push(&buf, normalized, raw);
            self.train_idx[fn_idx].extend(self.grid.multi_index(point));
            observed_raw.push(raw);
            observed_norm.push(normalized);
        }
        for fn_idx in 0..self.datasets.len() {
            self.hyperparams[fn_idx] =
                fit_mle(&self.datasets[fn_idx], &self.hyperparams[fn_idx], true);
            self.means[fn_idx] = compute_means(
                &self.datasets[fn_idx],
                &self.hyperparams[fn_idx],
                &self.train_idx[fn_idx],
                self.fast_grid,
                &self.grid_coords,
            )?;
        }
        self.mean_sets = build_trusted_sets(
            &mean_field(&self.means),
            &self.problem,
            &self.grid,
            self.config.epsilon,
            self.config.p_variant,
        );
        let estimator = posterior_mean_in_trusted(&self.means[0], &self.mean_sets, &self.grid);

        self.history.push(TrustedRandEntry {
            t: self.t,
            point,
            fell_back,
            mask,
            observed_raw,
            observed_norm,
            estimator,
        });
        self.t += 1;
        Ok(self.history.last().unwrap())
    }
}

#[derive(Debug, Error)]
pub enum NestedError {
    #[error("nested baseline does not support constrained problems")]
    Constrained,
    #[error(transparent)]
    Gp(#[from] GPError),
}

#[derive(Debug, Clone, Copy)]
pub struct NestedConfig {
    /// Lower-objective observations spent per lower-level solve.
    pub lower_budget: usize,
    /// Number of local-search starts the budget is split across.
    pub lower_restarts: usize,
    /// Finite-difference step for gradient approximation.
    pub fd_step: f64,
    /// Failure probability driving the upper UCB scale schedule.
    pub ucb_delta: f64,
    pub init_upper_points: usize,
    pub init_lengthscale: f64,
}

impl NestedConfig {
    pub fn defaults(grid: &Grid) -> Self {
        NestedConfig {
            lower_budget: 20,
            lower_restarts: 2,
            fd_step: grid.z_spacing(),
            ucb_delta: 0.05,
            init_upper_points: 3,
            init_lengthscale: 0.2,
        }
    }
}

/// One upper-level query of the Nested baseline (`upper_t` 0 during the
/// initialization phase).
#[derive(Debug, Clone)]
pub struct NestedEntry {
    pub upper_t: usize,
    /// Snapped query point the upper objective was observed at.
    pub point: PointIndex,
    /// Continuous lower solution before snapping.
    pub z_hat: Vec<f64>,
    pub lower_evals: usize,
    pub queries_after: usize,
    pub observed_upper_raw: f64,
    pub estimator: Option<PointIndex>,
}

/// Budgeted multi-start maximization of a (noisy) function over the unit box
/// by finite-difference gradient ascent with a backtracking step; returns the
/// best observed point and the number of evaluations spent.
pub fn maximize_lower(
    f: &mut dyn FnMut(&[f64]) -> f64,
    d: usize,
    max_evals: usize,
    starts: &[Vec<f64>],
    fd_step: f64,
) -> (Vec<f64>, usize) {
    assert!(d > 0 && fd_step > 0.0 && !starts.is_empty());
    let mut best_z = vec![0.5; d];
    let mut best_v = f64::NEG_INFINITY;
    let mut evals = 0usize;

    for (s, start) in starts.iter().enumerate() {
        let mut budget = max_evals / starts.len();
        if s == 0 {
            budget += max_evals % starts.len();
        }
        if budget == 0 {
            continue;
        }
        let mut z = start.clone();
        let mut val = f(&z);
        evals += 1;
        budget -= 1;
        if val > best_v {
            best_v = val;
            best_z = z.clone();
        }

        let mut alpha = 0.25;
        let mut g = vec![0.0; d];
        // Each round spends d evaluations on a gradient and at least one on a
        // step, so stop once the remaining budget cannot cover that.
        while budget > d && alpha > 1e-4 {
            for (i, gi) in g.iter_mut().enumerate() {
                // Forward difference, flipped at the upper boundary.
                let h = if z[i] + fd_step <= 1.0 { fd_step } else { -fd_step };
                let mut probe = z.clone();
                probe[i] += h;
                let v = f(&probe);
                evals += 1;
                budget -= 1;
                if v > best_v {
                    best_v = v;
                    best_z = probe.clone();
                }
                *gi = (v - val) / h;
            }
            let g_norm = g.iter().map(|v| v * v).sum::<f64>().sqrt();
            if g_norm < 1e-12 {
                break;
            }
            let mut accepted = false;
            for _ in 0..4 {
                if budget == 0 {
                    break;
                }
                let z_new: Vec<f64> = z
                    .iter()
                    .zip(&g)
                    .map(|(&zi, &gi)| (zi + alpha * gi / g_norm).clamp(0.0, 1.0))
                    .collect();
                let v_new = f(&z_new);
                evals += 1;
                budget -= 1;
                if v_new > best_v {
                    best_v = v_new;
                    best_z = z_new.clone();
                }
                if v_new > val {
                    z = z_new;
                    val = v_new;
                    alpha = (alpha * 1.5).min(0.5);
                    accepted = true;
                    break;
                }
                alpha *= 0.4;
            }
            if !accepted && alpha <= 1e-4 {
                break;
            }
        }
    }
    (best_z, evals)
}

/// Runs the Nested baseline until `total_budget` observations (upper and
/// lower combined) are exhausted.
pub fn nested_run(
    problem: &BilevelProblem,
    grid: &Grid,
    norm: &OutputNormalization,
    config: &NestedConfig,
    total_budget: usize,
    mut rng: ChaCha8Rng,
) -> Result<Vec<NestedEntry>, NestedError> {
    if problem.n_upper_constraints() > 0 || problem.n_lower_constraints() > 0 {
        return Err(NestedError::Constrained);
    }
    assert!(config.lower_budget > 0 && config.lower_restarts > 0);
    let d_x = grid.d_x();
    let d_z = grid.d_z();
    let n_x = grid.n_x();
    let upper_idx = problem.fn_index(FunctionId::UpperObjective);

    // Flat upper-level coordinates for the composite-objective GP.
    let mut x_coords_flat = vec![0.0; n_x * d_x];
    let mut joint = vec![0.0; d_x + d_z];
    for x_idx in 0..n_x {
        grid.write_joint(PointIndex { x_idx, z_idx: 0 }, &mut joint);
        x_coords_flat[x_idx * d_x..(x_idx + 1) * d_x].copy_from_slice(&joint[..d_x]);
    }

    let mut dataset = GPDataset::new(d_x);
    let mut visited_z: Vec<Option<usize>> = vec![None; n_x];
    let mut entries: Vec<NestedEntry> = Vec::new();
    let mut used = 0usize;

    let solve_and_observe = |x_idx: usize,
                                 used: &mut usize,
                                 dataset: &mut GPDataset,
                                 visited_z: &mut Vec<Option<usize>>,
                                 rng: &mut ChaCha8Rng|
     -> (PointIndex, Vec<f64>, usize, f64) {
        let x = x_coords_flat[x_idx * d_x..(x_idx + 1) * d_x].to_vec();
        // Restart points are drawn before the observation closure is built so
        // both do not need the generator at once.
        let starts: Vec<Vec<f64>> = (0..config.lower_restarts.max(1))
            .map(|_| (0..d_z).map(|_| rng.random::<f64>()).collect())
            .collect();
        let mut lower = |z: &[f64]| problem.observe(FunctionId::LowerObjective, &x, z, rng);
        let (z_hat, lower_evals) = maximize_lower(
            &mut lower,
            d_z,
            config.lower_budget,
            &starts,
            config.fd_step,
        );
        let point = grid.nearest(&x, &z_hat);
        let mut buf = vec![0.0; d_x + d_z];
        grid.write_joint(point, &mut buf);
        let (bx, bz) = buf.split_at(d_x);
        let raw = problem.observe(FunctionId::UpperObjective, bx, bz, rng);
        dataset.push(bx, norm.apply(upper_idx, raw), raw);
        *used += lower_evals + 1;
        visited_z[point.x_idx] = Some(point.z_idx);
        (point, z_hat, lower_evals, raw)
    };

    for _ in 0..config.init_upper_points {
        if used + config.lower_budget + 1 > total_budget {
            break;
        }
        let x_idx = rng.random_range(0..n_x);
        let (point, z_hat, lower_evals, raw) =
            solve_and_observe(x_idx, &mut used, &mut dataset, &mut visited_z, &mut rng);
        entries.push(NestedEntry {
            upper_t: 0,
            point,
            z_hat,
            lower_evals,
            queries_after: used,
            observed_upper_raw: raw,
            estimator: None,
        });
    }

    let noise = normalized_noise_variance(problem, norm, upper_idx);
    let mut hp = GPHyperparams::new(config.init_lengthscale, 1.0, noise, 0.0);
    hp = fit_mle(&dataset, &hp, true);
    let mut post = posterior(&dataset, &hp, &x_coords_flat)?;

    let mut t = 1usize;
    while used + config.lower_budget + 1 <= total_budget {
        let b = beta(t, config.ucb_delta, 1, n_x, 1).sqrt();
        let mut x_idx = 0usize;
        let mut best = f64::NEG_INFINITY;
        for (i, (&mu, &sd)) in post.mean.iter().zip(&post.std).enumerate() {
            let u = mu + b * sd;
            if u > best {
                best = u;
                x_idx = i;
            }
        }
        let (point, z_hat, lower_evals, raw) =
            solve_and_observe(x_idx, &mut used, &mut dataset, &mut visited_z, &mut rng);

        hp = fit_mle(&dataset, &hp, true);
        post = posterior(&dataset, &hp, &x_coords_flat)?;

        let mut est: Option<usize> = None;
        for (i, z) in visited_z.iter().enumerate() {
            if z.is_some() && est.map_or(true, |e| post.mean[i] > post.mean[e]) {
                est = Some(i);
            }
        }
        let estimator = est.map(|x_idx| PointIndex {
            x_idx,
            z_idx: visited_z[x_idx].unwrap(),
        });

        entries.push(NestedEntry {
            upper_t: t,
            point,
            z_hat,
            lower_evals,
            queries_after: used,
            observed_upper_raw: raw,
            estimator,
        });
        t += 1;
    }
    Ok(entries)
}
