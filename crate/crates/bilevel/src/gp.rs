//! Gaussian-process regression with a Matern 5/2 kernel.
//!
//! One GP per blackbox function. Posteriors are exact: a Cholesky
//! factorization of `K + noise*I` (with a jitter ladder on failure) gives the
//! closed forms `mean = m + k' inv(K+noise*I) (y-m)` and
//! `var = k(q,q) - k' inv(K+noise*I) k`. Grid-wide evaluation runs the
//! triangular solve over blocks of query columns so the per-iteration cost is
//! one factorization plus O(n^2 * n_query) sequential arithmetic.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum GPError {
    #[error("kernel matrix factorization failed even with jitter up to {max_jitter}")]
    Factorization { max_jitter: f64 },
    #[error("operation requires a nonempty dataset")]
    EmptyDataset,
}

/// Kernel and noise parameters, all in normalized units.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GPHyperparams {
    pub lengthscale: f64,
    pub outputscale: f64,
    pub noise_variance: f64,
    pub prior_mean: f64,
}

impl GPHyperparams {
    pub fn new(lengthscale: f64, outputscale: f64, noise_variance: f64, prior_mean: f64) -> Self {
        assert!(lengthscale > 0.0, "lengthscale must be positive");
        assert!(outputscale > 0.0, "outputscale must be positive");
        assert!(noise_variance > 0.0, "noise variance must be positive");
        GPHyperparams {
            lengthscale,
            outputscale,
            noise_variance,
            prior_mean,
        }
    }
}

/// Observation store for one function: flat row-major inputs plus normalized
/// and raw target values.
#[derive(Debug, Clone)]
pub struct GPDataset {
    dim: usize,
    inputs: Vec<f64>,
    targets: Vec<f64>,
    raw_targets: Vec<f64>,
}

impl GPDataset {
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0);
        GPDataset {
            dim,
            inputs: Vec::new(),
            targets: Vec::new(),
            raw_targets: Vec::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.targets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.targets.is_empty()
    }

    pub fn push(&mut self, input: &[f64], target: f64, raw_target: f64) {
        assert_eq!(input.len(), self.dim, "input dimension mismatch");
        self.inputs.extend_from_slice(input);
        self.targets.push(target);
        self.raw_targets.push(raw_target);
    }

    pub fn input(&self, i: usize) -> &[f64] {
        &self.inputs[i * self.dim..(i + 1) * self.dim]
    }

    pub fn targets(&self) -> &[f64] {
        &self.targets
    }

    pub fn raw_targets(&self) -> &[f64] {
        &self.raw_targets
    }
}

/// Posterior mean and standard deviation at a list of query points.
#[derive(Debug, Clone)]
pub struct GPPosterior {
    pub mean: Vec<f64>,
    pub std: Vec<f64>,
}

#[inline]
fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    let mut s = 0.0;
    for (x, y) in a.iter().zip(b) {
        let d = x - y;
        s += d * d;
    }
    s
}

/// Matern 5/2 covariance for a squared Euclidean distance.
#[inline]
fn matern52_r2(r2: f64, lengthscale: f64, outputscale: f64) -> f64 {
    let a = (5.0 * r2).sqrt() / lengthscale;
    outputscale * (1.0 + a + a * a / 3.0) * (-a).exp()
}

/// Matern 5/2 covariance between two points:
/// `outputscale * (1 + sqrt(5) r/l + 5 r^2 / (3 l^2)) * exp(-sqrt(5) r/l)`.
pub fn matern52(a: &[f64], b: &[f64], hp: &GPHyperparams) -> f64 {
    assert_eq!(a.len(), b.len(), "dimension mismatch");
    matern52_r2(sq_dist(a, b), hp.lengthscale, hp.outputscale)
}

const JITTER_LADDER: [f64; 4] = [0.0, 1e-8, 1e-6, 1e-4];

/// Cholesky of `k` after adding each ladder jitter to the diagonal in turn.
fn cholesky_with_jitter(k: &DMatrix<f64>) -> Result<nalgebra::Cholesky<f64, nalgebra::Dyn>, GPError> {
    for &jitter in &JITTER_LADDER {
        let mut attempt = k.clone();
        if jitter > 0.0 {
            for i in 0..attempt.nrows() {
                attempt[(i, i)] += jitter;
            }
        }
        if let Some(chol) = nalgebra::Cholesky::new(attempt) {
            return Ok(chol);
        }
    }
    Err(GPError::Factorization {
        max_jitter: JITTER_LADDER[JITTER_LADDER.len() - 1],
    })
}

fn kernel_matrix(ds: &GPDataset, hp: &GPHyperparams) -> DMatrix<f64> {
    let n = ds.len();
    let mut k = DMatrix::zeros(n, n);
    for i in 0..n {
        k[(i, i)] = hp.outputscale + hp.noise_variance;
        for j in 0..i {
            let v = matern52_r2(sq_dist(ds.input(i), ds.input(j)), hp.lengthscale, hp.outputscale);
            k[(i, j)] = v;
            k[(j, i)] = v;
        }
    }
    k
}

// Query points are processed in fixed-width column blocks: wide enough that the
// inner loops vectorize, narrow enough that a block stays cache-resident.
const QUERY_BLOCK: usize = 64;

/// Exact posterior at `query` (flat row-major, `dim` matching the dataset).
///
/// Empty datasets return the prior. Tiny negative variances from cancellation
/// are clamped to zero before the square root.
pub fn posterior(ds: &GPDataset, hp: &GPHyperparams, query: &[f64]) -> Result<GPPosterior, GPError> {
    let dim = ds.dim();
    assert_eq!(query.len() % dim, 0, "query length not a multiple of dim");
    let n_q = query.len() / dim;
    let n = ds.len();

    if n == 0 {
        return Ok(GPPosterior {
            mean: vec![hp.prior_mean; n_q],
            std: vec![hp.outputscale.sqrt(); n_q],
        });
    }

    let k = kernel_matrix(ds, hp);
    let chol = cholesky_with_jitter(&k)?;
    let centered = DVector::from_iterator(n, ds.targets().iter().map(|y| y - hp.prior_mean));
    let alpha = chol.solve(&centered);

    // Row-major copy of L for the blocked forward substitution below.
    let l = chol.l_dirty();
    let mut l_flat = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            l_flat[i * n + j] = l[(i, j)];
        }
    }

    let mut mean = vec![0.0; n_q];
    let mut std = vec![0.0; n_q];
    let mut ks = vec![0.0; n * QUERY_BLOCK];
    let mut sumsq = [0.0; QUERY_BLOCK];

    let mut q0 = 0;
    while q0 < n_q {
        let w = QUERY_BLOCK.min(n_q - q0);
        // Fill the kernel block K* (train rows x query cols) and fold the mean
        // accumulation into the same pass.
        let mean_block = &mut mean[q0..q0 + w];
        for i in 0..n {
            let xi = ds.input(i);
            let ai = alpha[i];
            let row = &mut ks[i * w..i * w + w];
            for (c, r) in row.iter_mut().enumerate() {
                let q = &query[(q0 + c) * dim..(q0 + c + 1) * dim];
                let v = matern52_r2(sq_dist(xi, q), hp.lengthscale, hp.outputscale);
                *r = v;
                mean_block[c] += ai * v;
            }
        }
        // In-place forward substitution: block <- inv(L) * block.
        for i in 0..n {
            let (head, tail) = ks.split_at_mut(i * w);
            let row_i = &mut tail[..w];
            let l_row = &l_flat[i * n..i * n + i];
            for (j, &lij) in l_row.iter().enumerate() {
                if lij != 0.0 {
                    let row_j = &head[j * w..j * w + w];
                    for c in 0..w {
                        row_i[c] -= lij * row_j[c];
                    }
                }
            }
            let inv = 1.0 / l_flat[i * n + i];
            for v in row_i.iter_mut() {
                *v *= inv;
            }
        }
        // var = k(q,q) - ||inv(L) k*||^2, clamped at zero.
        sumsq[..w].fill(0.0);
        for i in 0..n {
            let row = &ks[i * w..i * w + w];
            for c in 0..w {
                sumsq[c] += row[c] * row[c];
            }
        }
        for c in 0..w {
            mean_block[c] += hp.prior_mean;
            std[q0 + c] = (hp.outputscale - sumsq[c]).max(0.0).sqrt();
        }
        q0 += w;
    }

    Ok(GPPosterior { mean, std })
}

/// Posterior mean over every node of a uniform product grid (`d` axes of `m`
/// points with common spacing `h`), for datasets whose inputs all lie on grid
/// nodes (`train_idx`: flat per-point multi-indices, axis order matching the
/// row-major node enumeration).
///
/// Because both endpoints of every kernel evaluation are nodes, the covariance
/// depends only on the integer offset vector, so one lookup table over
/// `sum of squared index offsets` replaces per-pair transcendentals. Values
/// agree with [`posterior`] up to last-ulp rounding in the distance
/// computation. This skips the per-query variance solve entirely, which is
/// what makes mean-only consumers cheap on large grids.
pub fn posterior_mean_on_uniform_grid(
    ds: &GPDataset,
    hp: &GPHyperparams,
    train_idx: &[u32],
    m: usize,
    d: usize,
    h: f64,
) -> Result<Vec<f64>, GPError> {
    let n = ds.len();
    assert_eq!(train_idx.len(), n * d, "one multi-index digit per train dim");
    assert_eq!(ds.dim(), d);
    let n_q = m.checked_pow(d as u32).expect("grid size overflow");
    if n == 0 {
        return Ok(vec![hp.prior_mean; n_q]);
    }

    let k = kernel_matrix(ds, hp);
    let chol = cholesky_with_jitter(&k)?;
    let centered = DVector::from_iterator(n, ds.targets().iter().map(|y| y - hp.prior_mean));
    let alpha = chol.solve(&centered);

    let s_max = d * (m - 1) * (m - 1);
    let h2 = h * h;
    let table: Vec<f64> = (0..=s_max)
        .map(|s| matern52_r2(h2 * s as f64, hp.lengthscale, hp.outputscale))
        .collect();

    let mut mean = vec![hp.prior_mean; n_q];
    // Per-dim squared offsets for one train point, then one table-driven pass
    // over the grid with an odometer carrying the running offset sum.
    let mut sq = vec![0usize; d * m];
    let mut digits = vec![0usize; d];
    for i in 0..n {
        let ti = &train_idx[i * d..(i + 1) * d];
        for k_dim in 0..d {
            let t = ti[k_dim] as i64;
            for j in 0..m {
                let delta = j as i64 - t;
                sq[k_dim * m + j] = (delta * delta) as usize;
            }
        }
        let ai = alpha[i];
        digits.fill(0);
        let mut s: usize = (0..d).map(|k_dim| sq[k_dim * m]).sum();
        for mv in mean.iter_mut() {
            *mv += ai * table[s];
            // Advance the row-major odometer, updating s by the changed digits.
            for k_dim in (0..d).rev() {
                s -= sq[k_dim * m + digits[k_dim]];
                if digits[k_dim] + 1 < m {
                    digits[k_dim] += 1;
                    s += sq[k_dim * m + digits[k_dim]];
                    break;
                }
                digits[k_dim] = 0;
                s += sq[k_dim * m];
            }
        }
    }
    Ok(mean)
}

/// Log marginal likelihood of the dataset under the hyperparameters:
/// `-1/2 y' inv(K+noise*I) y - 1/2 log det(K+noise*I) - n/2 log 2pi`
/// with the prior mean subtracted from `y`.
pub fn log_marginal_likelihood(ds: &GPDataset, hp: &GPHyperparams) -> Result<f64, GPError> {
    if ds.is_empty() {
        return Err(GPError::EmptyDataset);
    }
    let k = kernel_matrix(ds, hp);
    lml_from_matrix(&k, ds.targets(), hp.prior_mean)
}

fn lml_from_matrix(k: &DMatrix<f64>, targets: &[f64], prior_mean: f64) -> Result<f64, GPError> {
    let n = targets.len();
    let chol = cholesky_with_jitter(k)?;
    let centered = DVector::from_iterator(n, targets.iter().map(|y| y - prior_mean));
    let alpha = chol.solve(&centered);
    let quad: f64 = centered.dot(&alpha);
    let l = chol.l_dirty();
    let mut log_det = 0.0;
    for i in 0..n {
        log_det += l[(i, i)].ln();
    }
    log_det *= 2.0;
    Ok(-0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln())
}

/// Log marginal likelihood with the constant prior mean profiled out: for a
/// fixed kernel matrix the likelihood-maximizing constant mean has the closed
/// form `m = (1' inv(K) y) / (1' inv(K) 1)`, so the mean never needs a search
/// coordinate. Returns the likelihood value together with that mean.
fn lml_profiled_mean(k: &DMatrix<f64>, targets: &[f64]) -> Result<(f64, f64), GPError> {
    let n = targets.len();
    let chol = cholesky_with_jitter(k)?;
    let y = DVector::from_column_slice(targets);
    let ones = DVector::from_element(n, 1.0);
    let alpha = chol.solve(&y);
    let gamma = chol.solve(&ones);
    let one_alpha: f64 = ones.dot(&alpha);
    let one_gamma: f64 = ones.dot(&gamma);
    let m = one_alpha / one_gamma;
    let quad: f64 = y.dot(&alpha) - one_alpha * one_alpha / one_gamma;
    let l = chol.l_dirty();
    let mut log_det = 0.0;
    for i in 0..n {
        log_det += l[(i, i)].ln();
    }
    log_det *= 2.0;
    let lml = -0.5 * quad - 0.5 * log_det - 0.5 * n as f64 * (2.0 * std::f64::consts::PI).ln();
    Ok((lml, m))
}

const LOG_LENGTHSCALE_RANGE: (f64, f64) = (-4.605170185988091, 2.302585092994046); // [ln 0.01, ln 10]
const LOG_NOISE_RANGE: (f64, f64) = (-18.420680743952367, 0.0); // [ln 1e-8, ln 1]

/// Below this many observations a lengthscale likelihood fit regularly latches
/// onto degenerate long-lengthscale explanations that extrapolate with
/// near-zero variance; until then the curated initial lengthscale is kept.
/// The constant prior mean is still profiled from the data at any size.
pub const MIN_FIT_OBSERVATIONS: usize = 25;

/// Maximum-likelihood refit of lengthscale and constant prior mean (and noise
/// variance unless `noise_variance_fixed`). The outputscale is pinned to its
/// initial value: outputs are calibrated to unit marginal variance before
/// fitting, so rescaling the prior variance from small datasets would only
/// produce over- or under-confident confidence fields. The prior mean is
/// profiled in closed form at every candidate, and the remaining coordinates
/// use derivative-free coordinate ascent in log space from three starts (the
/// init point and the init shifted by +-1 in every log coordinate). Never
/// returns hyperparameters with a worse marginal likelihood than `init` with
/// its mean profiled; datasets smaller than [`MIN_FIT_OBSERVATIONS`] keep the
/// init lengthscale and only refit the mean.
pub fn fit_mle(ds: &GPDataset, init: &GPHyperparams, noise_variance_fixed: bool) -> GPHyperparams {
    if ds.is_empty() {
        return *init;
    }
    if ds.len() < MIN_FIT_OBSERVATIONS {
        let k = kernel_matrix(ds, init);
        return match lml_profiled_mean(&k, ds.targets()) {
            Ok((v, m)) if v.is_finite() && m.is_finite() => GPHyperparams {
                prior_mean: m,
                ..*init
            },
            _ => *init,
        };
    }
    let n = ds.len();
    // Pairwise squared distances are hyperparameter-independent; computing them
    // once makes each likelihood evaluation a kernel-shape pass plus a Cholesky.
    let mut d2 = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..i {
            let v = sq_dist(ds.input(i), ds.input(j));
            d2[i * n + j] = v;
            d2[j * n + i] = v;
        }
    }

    let ranges: Vec<(f64, f64)> = if noise_variance_fixed {
        vec![LOG_LENGTHSCALE_RANGE]
    } else {
        vec![LOG_LENGTHSCALE_RANGE, LOG_NOISE_RANGE]
    };
    let clamp = |p: &mut [f64]| {
        for (v, r) in p.iter_mut().zip(&ranges) {
            *v = v.clamp(r.0, r.1);
        }
    };

    // The unit-outputscale kernel matrix depends on lengthscale only; cache it
    // so noise moves skip the exp-heavy rebuild.
    let outputscale = init.outputscale;
    let mut cached_log_l = f64::NAN;
    let mut unit_k = DMatrix::<f64>::zeros(n, n);
    let mut k = DMatrix::<f64>::zeros(n, n);
    let mut eval = |p: &[f64]| -> (f64, f64) {
        let log_l = p[0];
        let nv = if noise_variance_fixed { init.noise_variance } else { p[1].exp() };
        if log_l != cached_log_l {
            let l = log_l.exp();
            for i in 0..n {
                unit_k[(i, i)] = 1.0;
                for j in 0..i {
                    let v = matern52_r2(d2[i * n + j], l, 1.0);
                    unit_k[(i, j)] = v;
                    unit_k[(j, i)] = v;
                }
            }
            cached_log_l = log_l;
        }
        for i in 0..n {
            for j in 0..n {
                k[(i, j)] = outputscale * unit_k[(i, j)];
            }
            k[(i, i)] += nv;
        }
        match lml_profiled_mean(&k, ds.targets()) {
            Ok((v, m)) if v.is_finite() && m.is_finite() => (v, m),
            _ => (f64::NEG_INFINITY, init.prior_mean),
        }
    };

    let mut p0 = vec![init.lengthscale.ln()];
    if !noise_variance_fixed {
        p0.push(init.noise_variance.ln());
    }
    clamp(&mut p0);
    let (init_value, init_mean) = eval(&p0);

    let mut starts = vec![p0.clone()];
    for shift in [1.0, -1.0] {
        let mut p = p0.clone();
        for v in p.iter_mut() {
            *v += shift;
        }
        clamp(&mut p);
        starts.push(p);
    }

    let mut best_p = p0.clone();
    let mut best_v = init_value;
    let mut best_m = init_mean;
    for start in starts {
        let mut cur_p = start.clone();
        let (mut cur_v, mut cur_m) = if start == p0 {
            (init_value, init_mean)
        } else {
            eval(&start)
        };
        let mut step = 0.5;
        for _sweep in 0..3 {
            for c in 0..cur_p.len() {
                for dir in [1.0, -1.0] {
                    // Walk while improving, at most a few steps per direction.
                    for _ in 0..3 {
                        let mut cand = cur_p.clone();
                        cand[c] += dir * step;
                        clamp(&mut cand);
                        if cand[c] == cur_p[c] {
                            break;
                        }
                        let (v, m) = eval(&cand);
                        if v > cur_v + 1e-12 {
                            cur_p = cand;
                            cur_v = v;
                            cur_m = m;
                        } else {
                            break;
                        }
                    }
                }
            }
            step *= 0.4;
        }
        if cur_v > best_v {
            best_v = cur_v;
            best_p = cur_p;
            best_m = cur_m;
        }
    }

    if !best_v.is_finite() {
        return *init;
    }
    if best_v <= init_value {
        best_p = p0;
        best_m = init_mean;
    }
    if !best_m.is_finite() {
        best_m = init.prior_mean;
    }
    GPHyperparams {
        lengthscale: best_p[0].exp(),
        outputscale: init.outputscale,
        noise_variance: if noise_variance_fixed { init.noise_variance } else { best_p[1].exp() },
        prior_mean: best_m,
    }
}
