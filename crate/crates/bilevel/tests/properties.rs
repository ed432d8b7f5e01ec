//! Property-based checks of the structural invariants: grid indexing, kernel
//! positive semi-definiteness, posterior contraction, trusted-set monotonicity,
//! and the confidence-width schedule.

mod common;

use bilevel::gp::{matern52, posterior, GPDataset, GPHyperparams};
use bilevel::grid::{build_grid, PointIndex};
use bilevel::mask::Mask;
use bilevel::trusted::{beta, lower_solution_estimates, optimal_lower_set, ConfidenceField, PVariant};
use proptest::prelude::*;

/// Strategy for a small random grid: dims in 1..=2, m in 2..=6, finite
/// non-degenerate bounds.
fn grid_strategy() -> impl Strategy<
    Value = (
        Vec<(f64, f64)>,
        Vec<(f64, f64)>,
        usize,
    ),
> {
    let bound = (-5.0f64..5.0, 0.1f64..6.0).prop_map(|(lo, w)| (lo, lo + w));
    (
        prop::collection::vec(bound.clone(), 1..=2),
        prop::collection::vec(bound, 1..=2),
        2usize..=6,
    )
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(128))]

    /// Round trip: coordinates of any valid index map back to the same index.
    #[test]
    fn grid_index_coordinate_bijection(
        (xb, zb, m) in grid_strategy(),
        raw_x in 0usize..10_000,
        raw_z in 0usize..10_000,
    ) {
        let grid = build_grid(&xb, &zb, m).unwrap();
        let idx = PointIndex { x_idx: raw_x % grid.n_x(), z_idx: raw_z % grid.n_z() };
        let (x, z) = grid.coordinates(idx);
        prop_assert_eq!(grid.index_of(&x, &z), Some(idx));
        // The joint linearization must agree with the pairwise one.
        let joint = grid.joint_index(idx);
        prop_assert_eq!(grid.from_joint_index(joint), idx);
    }

    /// The lower slices partition the joint index space: every joint index
    /// appears exactly once across all x slices.
    #[test]
    fn grid_lower_slices_partition_joint_space((xb, zb, m) in grid_strategy()) {
        let grid = build_grid(&xb, &zb, m).unwrap();
        let mut seen = vec![0u32; grid.n_points()];
        for x_idx in 0..grid.n_x() {
            for p in grid.lower_slice(x_idx) {
                prop_assert_eq!(p.x_idx, x_idx);
                seen[grid.joint_index(p)] += 1;
            }
        }
        prop_assert!(seen.iter().all(|&c| c == 1));
    }

    /// Consecutive coordinates along any dimension differ by (hi-lo)/(m-1).
    #[test]
    fn grid_spacing_is_uniform((xb, zb, m) in grid_strategy()) {
        let grid = build_grid(&xb, &zb, m).unwrap();
        let d_z = grid.d_z();
        // Walk the innermost z dimension: adjacent z_idx differ in the last
        // coordinate by exactly one step.
        let (lo, hi) = zb[d_z - 1];
        let step = (hi - lo) / (m - 1) as f64;
        for z_idx in 0..m - 1 {
            let (_, z0) = grid.coordinates(PointIndex { x_idx: 0, z_idx });
            let (_, z1) = grid.coordinates(PointIndex { x_idx: 0, z_idx: z_idx + 1 });
            prop_assert!(((z1[d_z - 1] - z0[d_z - 1]) - step).abs() <= step * 1e-12 + 1e-15);
        }
    }

    /// Matern kernel matrices are symmetric and PSD (witnessed by a naive
    /// Cholesky after a 1e-8 diagonal shift) on random point sets.
    #[test]
    fn kernel_matrix_is_symmetric_psd(
        seed in 0u64..1_000_000,
        n in 2usize..25,
        d in 1usize..4,
    ) {
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, n, d);
        let mut hp = common::random_hyperparams(&mut rng);
        hp.noise_variance = 0.0; // test the raw kernel, not the noise shift
        let mut k = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                k[i * n + j] = matern52(ds.input(i), ds.input(j), &hp);
            }
        }
        for i in 0..n {
            for j in 0..i {
                prop_assert_eq!(k[i * n + j], k[j * n + i]);
            }
            k[i * n + i] += 1e-8;
        }
        prop_assert!(common::naive_cholesky_succeeds(&k, n));
    }

    /// The stable posterior matches the naive direct-inversion reference.
    #[test]
    fn posterior_matches_naive_reference(
        seed in 0u64..1_000_000,
        n in 1usize..30,
        d in 1usize..4,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, n, d);
        let hp = common::random_hyperparams(&mut rng);
        let queries: Vec<Vec<f64>> = (0..4)
            .map(|_| (0..d).map(|_| rng.random::<f64>() * 1.4 - 0.2).collect())
            .collect();
        let flat: Vec<f64> = queries.iter().flatten().copied().collect();
        let post = posterior(&ds, &hp, &flat).unwrap();
        for (qi, q) in queries.iter().enumerate() {
            let (m_ref, s_ref) = common::naive_posterior(&ds, &hp, q);
            prop_assert!((post.mean[qi] - m_ref).abs() < 1e-8,
                "mean mismatch: {} vs {}", post.mean[qi], m_ref);
            prop_assert!((post.std[qi] - s_ref).abs() < 1e-8,
                "std mismatch: {} vs {}", post.std[qi], s_ref);
        }
    }

    /// Posterior standard deviation never exceeds the prior standard deviation.
    #[test]
    fn posterior_std_bounded_by_prior(
        seed in 0u64..1_000_000,
        n in 0usize..40,
        d in 1usize..4,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, n, d);
        let hp = common::random_hyperparams(&mut rng);
        let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let post = posterior(&ds, &hp, &q).unwrap();
        prop_assert!(post.std[0] <= hp.outputscale.sqrt() + 1e-9);
    }

    /// Conditioning on one more observation never increases the posterior
    /// variance at any fixed point.
    #[test]
    fn extra_observation_never_increases_variance(
        seed in 0u64..1_000_000,
        n in 1usize..25,
        d in 1usize..4,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let ds = common::random_dataset(&mut rng, n + 1, d);
        let hp = common::random_hyperparams(&mut rng);
        let mut smaller = GPDataset::new(d);
        for i in 0..n {
            smaller.push(ds.input(i), ds.targets()[i], ds.raw_targets()[i]);
        }
        let q: Vec<f64> = (0..d).map(|_| rng.random::<f64>()).collect();
        let before = posterior(&smaller, &hp, &q).unwrap().std[0];
        let after = posterior(&ds, &hp, &q).unwrap().std[0];
        prop_assert!(after <= before + 1e-9, "std grew: {} -> {}", before, after);
    }

    /// Widening the optimality tolerance only grows the trusted lower set.
    #[test]
    fn lower_set_grows_with_epsilon(
        seed in 0u64..1_000_000,
        m in 2usize..6,
        eps1 in 0.0f64..1.0,
        extra in 0.0f64..1.0,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let grid = build_grid(&[(0.0, 1.0)], &[(0.0, 1.0)], m).unwrap();
        let n = grid.n_points();
        // Synthetic two-function confidence field with u >= l everywhere.
        let mut u = vec![vec![0.0; n], vec![0.0; n]];
        let mut l = vec![vec![0.0; n], vec![0.0; n]];
        for f in 0..2 {
            for p in 0..n {
                let mid: f64 = rng.random_range(-2.0..2.0);
                let half: f64 = rng.random_range(0.0..1.5);
                u[f][p] = mid + half;
                l[f][p] = mid - half;
            }
        }
        let field = ConfidenceField::from_parts(4.0, u, l);
        let mut s_plus_lo = Mask::new_true(n);
        for p in 0..n {
            if rng.random::<f64>() < 0.2 {
                s_plus_lo.set(p, false);
            }
        }
        let z_bar = lower_solution_estimates(&field, &s_plus_lo, &grid);
        let eps2 = eps1 + extra;
        let small = optimal_lower_set(&field, &s_plus_lo, &z_bar, eps1, PVariant::PPlus, &grid);
        let large = optimal_lower_set(&field, &s_plus_lo, &z_bar, eps2, PVariant::PPlus, &grid);
        prop_assert!(small.is_subset_of(&large));
        // And the set always stays inside the lower-feasible mask.
        prop_assert!(large.is_subset_of(&s_plus_lo));
    }

    /// The confidence-width schedule strictly grows with t and shrinks with
    /// delta.
    #[test]
    fn beta_monotone_in_t_and_delta(
        t in 1usize..10_000,
        delta in 0.001f64..0.5,
        n_fn in 1usize..9,
        n_x in 2usize..200,
        n_z in 2usize..200,
    ) {
        let b1 = beta(t, delta, n_fn, n_x, n_z);
        let b2 = beta(t + 1, delta, n_fn, n_x, n_z);
        prop_assert!(b2 > b1);
        let b_tighter = beta(t, delta * 0.5, n_fn, n_x, n_z);
        prop_assert!(b_tighter > b1);
        prop_assert!(b1 > 0.0);
    }
}
