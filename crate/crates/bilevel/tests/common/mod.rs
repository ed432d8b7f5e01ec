//! Shared test support: an independent, deliberately naive Gaussian-process
//! reference implementation plus random dataset generators.
//!
//! The reference inverts the kernel matrix with textbook Gauss-Jordan
//! elimination and evaluates the posterior directly as
//! `mean = m + k*' K^-1 (y - m)` and `var = k(q,q) - k*' K^-1 k*`, sharing no
//! linear algebra with the library's blocked Cholesky path. Agreement between
//! the two is therefore evidence of correctness, not of common bugs.

// Each integration-test binary compiles this module separately and uses a
// different subset of it.
#![allow(dead_code)]

use bilevel::gp::{matern52, GPDataset, GPHyperparams};
use rand::Rng;

/// Plain row-major dense matrix inverse via Gauss-Jordan with partial
/// pivoting. Panics on singular input (test data is well-conditioned by
/// construction: the kernel diagonal carries the noise term).
pub fn invert(a: &[f64], n: usize) -> Vec<f64> {
    assert_eq!(a.len(), n * n);
    let mut aug = vec![0.0; n * 2 * n];
    for i in 0..n {
        for j in 0..n {
            aug[i * 2 * n + j] = a[i * n + j];
        }
        aug[i * 2 * n + n + i] = 1.0;
    }
    for col in 0..n {
        let pivot_row = (col..n)
            .max_by(|&p, &q| {
                aug[p * 2 * n + col]
                    .abs()
                    .total_cmp(&aug[q * 2 * n + col].abs())
            })
            .unwrap();
        assert!(
            aug[pivot_row * 2 * n + col].abs() > 1e-300,
            "singular matrix in naive inverse"
        );
        if pivot_row != col {
            for j in 0..2 * n {
                aug.swap(col * 2 * n + j, pivot_row * 2 * n + j);
            }
        }
        let inv_pivot = 1.0 / aug[col * 2 * n + col];
        for j in 0..2 * n {
            aug[col * 2 * n + j] *= inv_pivot;
        }
        for row in 0..n {
            if row == col {
                continue;
            }
            let factor = aug[row * 2 * n + col];
            if factor != 0.0 {
                for j in 0..2 * n {
                    aug[row * 2 * n + j] -= factor * aug[col * 2 * n + j];
                }
            }
        }
    }
    let mut inv = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            inv[i * n + j] = aug[i * 2 * n + n + j];
        }
    }
    inv
}

/// Posterior mean and standard deviation at one query point, computed by the
/// naive direct-inversion route.
pub fn naive_posterior(ds: &GPDataset, hp: &GPHyperparams, query: &[f64]) -> (f64, f64) {
    let n = ds.len();
    if n == 0 {
        return (hp.prior_mean, hp.outputscale.sqrt());
    }
    let mut k = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..n {
            k[i * n + j] = matern52(ds.input(i), ds.input(j), hp);
            if i == j {
                k[i * n + j] += hp.noise_variance;
            }
        }
    }
    let k_inv = invert(&k, n);
    let k_star: Vec<f64> = (0..n).map(|i| matern52(ds.input(i), query, hp)).collect();
    let centered: Vec<f64> = ds.targets().iter().map(|y| y - hp.prior_mean).collect();

    let mut mean = hp.prior_mean;
    let mut quad = 0.0;
    for i in 0..n {
        let mut row = 0.0;
        for j in 0..n {
            row += k_inv[i * n + j] * centered[j];
        }
        mean += k_star[i] * row;
        let mut rowq = 0.0;
        for j in 0..n {
            rowq += k_inv[i * n + j] * k_star[j];
        }
        quad += k_star[i] * rowq;
    }
    let var = (hp.outputscale - quad).max(0.0);
    (mean, var.sqrt())
}

/// Attempts a textbook Cholesky factorization of the symmetric matrix `a`
/// (row-major, n x n). Success witnesses positive semi-definiteness up to the
/// tolerance folded into `a` by the caller (e.g. `a + tol*I`).
pub fn naive_cholesky_succeeds(a: &[f64], n: usize) -> bool {
    assert_eq!(a.len(), n * n);
    let mut l = vec![0.0; n * n];
    for i in 0..n {
        for j in 0..=i {
            let mut s = a[i * n + j];
            for k in 0..j {
                s -= l[i * n + k] * l[j * n + k];
            }
            if i == j {
                if s <= 0.0 {
                    return false;
                }
                l[i * n + i] = s.sqrt();
            } else {
                l[i * n + j] = s / l[j * n + j];
            }
        }
    }
    true
}

/// Random dataset with inputs uniform in the unit cube and targets from a
/// smooth multi-frequency surface plus noise, so kernels see realistic
/// correlations rather than white noise.
pub fn random_dataset(rng: &mut impl Rng, n: usize, d: usize) -> GPDataset {
    let mut ds = GPDataset::new(d);
    let freq: Vec<f64> = (0..d).map(|_| rng.random_range(1.0..6.0)).collect();
    for _ in 0..n {
        let x: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let y: f64 = x
            .iter()
            .zip(&freq)
            .map(|(v, f)| (v * f).sin())
            .sum::<f64>()
            + 0.05 * rng.random::<f64>();
        ds.push(&x, y, y);
    }
    ds
}

/// Random hyperparameters within the ranges the fitter itself searches.
pub fn random_hyperparams(rng: &mut impl Rng) -> GPHyperparams {
    GPHyperparams::new(
        rng.random_range(0.05..2.0),
        rng.random_range(0.2..5.0),
        rng.random_range(1e-6..1e-2),
        rng.random_range(-0.5..0.5),
    )
}
