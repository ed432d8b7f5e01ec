//! Brute-force ground truth over the grid, and regret evaluation against it.
//!
//! The solver enumerates every grid point noiselessly: per upper point it
//! finds the lower-feasible z maximizing the lower objective (keeping a tie
//! set within `tie_tolerance`), then maximizes the upper objective over
//! fully feasible points whose z lies in the tie set. Values are raw problem
//! outputs; regret evaluation applies an output normalization so regrets are
//! comparable with model-side quantities.

use std::fs;
use std::io::{self, Read as _, Write as _};
use std::path::Path;

use crate::grid::{Grid, PointIndex};
use crate::harness::OutputNormalization;
use crate::mask::Mask;
use crate::problems::{BilevelProblem, FunctionId};

/// Optimal feasible point and its raw upper-objective value.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GroundTruthBest {
    pub point: PointIndex,
    pub f_upper: f64,
}

/// Exact solution structure of a discretized problem.
#[derive(Debug, Clone, PartialEq)]
pub struct GroundTruth {
    /// Points where every constraint (upper and lower) is nonnegative.
    pub feasible_mask: Mask,
    /// Points where every lower-level constraint is nonnegative.
    pub lower_feasible: Mask,
    /// Per upper point: z indices whose lower objective is within
    /// `tie_tolerance` of the slice maximum over lower-feasible z; empty when
    /// the whole slice is lower-infeasible.
    pub z_star: Vec<Vec<usize>>,
    /// Per upper point: the raw slice maximum the tie set refers to; `None`
    /// when the slice has no lower-feasible z.
    pub f_star: Vec<Option<f64>>,
    /// Bilevel optimum, `None` when no feasible point has an optimal z.
    pub best: Option<GroundTruthBest>,
    pub tie_tolerance: f64,
}

/// Raw noiseless values of one function at every grid point.
pub fn evaluate_on_grid(problem: &BilevelProblem, grid: &Grid, id: FunctionId) -> Vec<f64> {
    let d_x = grid.d_x();
    let mut buf = vec![0.0; d_x + grid.d_z()];
    let mut out = Vec::with_capacity(grid.n_points());
    for joint in 0..grid.n_points() {
        grid.write_joint(grid.from_joint_index(joint), &mut buf);
        let (x, z) = buf.split_at(d_x);
        out.push(problem.evaluate(id, x, z));
    }
    out
}

pub fn solve_ground_truth(problem: &BilevelProblem, grid: &Grid, tie_tolerance: f64) -> GroundTruth {
    assert!(tie_tolerance >= 0.0);
    let n = grid.n_points();
    let n_z = grid.n_z();

    let f_lower = evaluate_on_grid(problem, grid, FunctionId::LowerObjective);
    let f_upper = evaluate_on_grid(problem, grid, FunctionId::UpperObjective);

    let mut lower_feasible = Mask::new_true(n);
    for c in 0..problem.n_lower_constraints() {
        let vals = evaluate_on_grid(problem, grid, FunctionId::LowerConstraint(c));
        for (p, &v) in vals.iter().enumerate() {
            if v < 0.0 {
                lower_feasible.set(p, false);
            }
        }
    }
    let mut feasible_mask = lower_feasible.clone();
    for c in 0..problem.n_upper_constraints() {
        let vals = evaluate_on_grid(problem, grid, FunctionId::UpperConstraint(c));
        for (p, &v) in vals.iter().enumerate() {
            if v < 0.0 {
                feasible_mask.set(p, false);
            }
        }
    }

    let mut z_star = Vec::with_capacity(grid.n_x());
    let mut f_star = Vec::with_capacity(grid.n_x());
    for x_idx in 0..grid.n_x() {
        let base = x_idx * n_z;
        let slice = &f_lower[base..base + n_z];
        let feasible: Vec<usize> = (0..n_z).filter(|z| lower_feasible.get(base + z)).collect();
        if feasible.is_empty() {
            z_star.push(Vec::new());
            f_star.push(None);
            continue;
        }
        let max = feasible
            .iter()
            .map(|&z| slice[z])
            .fold(f64::NEG_INFINITY, f64::max);
        let ties: Vec<usize> = feasible
            .into_iter()
            .filter(|&z| slice[z] >= max - tie_tolerance)
            .collect();
        z_star.push(ties);
        f_star.push(Some(max));
    }

    let mut best: Option<GroundTruthBest> = None;
    for (x_idx, ties) in z_star.iter().enumerate() {
        let base = x_idx * n_z;
        for &z_idx in ties {
            let p = base + z_idx;
            if !feasible_mask.get(p) {
                continue;
            }
            let val = f_upper[p];
            if best.map_or(true, |b| val > b.f_upper) {
                best = Some(GroundTruthBest {
                    point: PointIndex { x_idx, z_idx },
                    f_upper: val,
                });
            }
        }
    }

    GroundTruth {
        feasible_mask,
        lower_feasible,
        z_star,
        f_star,
        best,
        tie_tolerance,
    }
}

/// Instantaneous regret components at one grid point, in normalized units.
#[derive(Debug, Clone, PartialEq)]
pub struct Regrets {
    /// Shortfall of the upper objective against the optimum, clamped at zero.
    pub upper: f64,
    /// Lower-level suboptimality within the queried slice (can be negative
    /// when the query beats the feasible slice optimum by violating
    /// constraints). Zero by definition at a lower-infeasible slice.
    pub lower: f64,
    /// The queried x has no lower-feasible z at all; `lower` is 0 there and
    /// constraint components carry the violation.
    pub slice_infeasible: bool,
    /// Violation per constraint, clamped at zero, in the order the problem
    /// lists constraint functions.
    pub constraints: Vec<f64>,
    pub total: f64,
    pub sum: f64,
}

pub fn instantaneous_regret(
    gt: &GroundTruth,
    problem: &BilevelProblem,
    grid: &Grid,
    norm: &OutputNormalization,
    point: PointIndex,
) -> Regrets {
    let best = gt
        .best
        .expect("regret undefined without a feasible optimum");
    let (x, z) = grid.coordinates(point);

    let f_upper_here = problem.evaluate(FunctionId::UpperObjective, &x, &z);
    let upper_idx = problem.fn_index(FunctionId::UpperObjective);
    let r_upper = (norm.apply(upper_idx, best.f_upper) - norm.apply(upper_idx, f_upper_here)).max(0.0);

    let lower_idx = problem.fn_index(FunctionId::LowerObjective);
    let (r_lower, slice_infeasible) = match gt.f_star[point.x_idx] {
        Some(f_star) => {
            let f_lower_here = problem.evaluate(FunctionId::LowerObjective, &x, &z);
            (
                norm.apply(lower_idx, f_star) - norm.apply(lower_idx, f_lower_here),
                false,
            )
        }
        None => (0.0, true),
    };

    let mut constraints = Vec::with_capacity(problem.n_upper_constraints() + problem.n_lower_constraints());
    for c in 0..problem.n_upper_constraints() {
        let id = FunctionId::UpperConstraint(c);
        let v = norm.apply(problem.fn_index(id), problem.evaluate(id, &x, &z));
        constraints.push((-v).max(0.0));
    }
    for c in 0..problem.n_lower_constraints() {
        let id = FunctionId::LowerConstraint(c);
        let v = norm.apply(problem.fn_index(id), problem.evaluate(id, &x, &z));
        constraints.push((-v).max(0.0));
    }

    let mut total = r_upper.max(r_lower);
    for &rc in &constraints {
        total = total.max(rc);
    }
    let sum = r_upper + r_lower + constraints.iter().sum::<f64>();
    Regrets {
        upper: r_upper,
        lower: r_lower,
        slice_infeasible,
        constraints,
        total,
        sum,
    }
}

/// Running sums of a per-iteration regret sequence.
pub fn accumulate(instants: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(instants.len());
    let mut acc = 0.0;
    for &r in instants {
        acc += r;
        out.push(acc);
    }
    out
}

const CACHE_MAGIC: &[u8; 8] = b"btgtrth1";

fn write_u64(w: &mut impl io::Write, v: u64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn write_f64(w: &mut impl io::Write, v: f64) -> io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_u64(r: &mut impl io::Read) -> io::Result<u64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(u64::from_le_bytes(buf))
}

fn read_f64(r: &mut impl io::Read) -> io::Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn write_mask(w: &mut impl io::Write, mask: &Mask) -> io::Result<()> {
    write_u64(w, mask.len() as u64)?;
    for p in 0..mask.len() {
        w.write_all(&[mask.get(p) as u8])?;
    }
    Ok(())
}

fn read_mask(r: &mut impl io::Read) -> io::Result<Mask> {
    let len = read_u64(r)? as usize;
    let mut mask = Mask::new_false(len);
    let mut buf = vec![0u8; len];
    r.read_exact(&mut buf)?;
    for (p, &b) in buf.iter().enumerate() {
        if b != 0 {
            mask.set(p, true);
        }
    }
    Ok(mask)
}

/// Writes a ground truth to a sidecar cache file.
pub fn save_ground_truth(path: &Path, gt: &GroundTruth) -> io::Result<()> {
    let mut buf = Vec::new();
    buf.write_all(CACHE_MAGIC)?;
    write_f64(&mut buf, gt.tie_tolerance)?;
    write_mask(&mut buf, &gt.feasible_mask)?;
    write_mask(&mut buf, &gt.lower_feasible)?;
    write_u64(&mut buf, gt.z_star.len() as u64)?;
    for ties in &gt.z_star {
        write_u64(&mut buf, ties.len() as u64)?;
        for &z in ties {
            write_u64(&mut buf, z as u64)?;
        }
    }
    write_u64(&mut buf, gt.f_star.len() as u64)?;
    for &v in &gt.f_star {
        match v {
            Some(v) => {
                buf.write_all(&[1])?;
                write_f64(&mut buf, v)?;
            }
            None => buf.write_all(&[0])?,
        }
    }
    match gt.best {
        Some(b) => {
            buf.write_all(&[1])?;
            write_u64(&mut buf, b.point.x_idx as u64)?;
            write_u64(&mut buf, b.point.z_idx as u64)?;
            write_f64(&mut buf, b.f_upper)?;
        }
        None => buf.write_all(&[0])?,
    }
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(path, buf)
}

/// Reads a ground truth back from a sidecar cache file.
pub fn load_ground_truth(path: &Path) -> io::Result<GroundTruth> {
    let data = fs::read(path)?;
    let mut r = io::Cursor::new(data);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != CACHE_MAGIC {
        return Err(io::Error::new(
            io::ErrorKind::InvalidData,
            "unrecognized ground-truth cache header",
        ));
    }
    let tie_tolerance = read_f64(&mut r)?;
    let feasible_mask = read_mask(&mut r)?;
    let lower_feasible = read_mask(&mut r)?;
    let n_x = read_u64(&mut r)? as usize;
    let mut z_star = Vec::with_capacity(n_x);
    for _ in 0..n_x {
        let k = read_u64(&mut r)? as usize;
        let mut ties = Vec::with_capacity(k);
        for _ in 0..k {
            ties.push(read_u64(&mut r)? as usize);
        }
        z_star.push(ties);
    }
    let n_f = read_u64(&mut r)? as usize;
    let mut f_star = Vec::with_capacity(n_f);
    for _ in 0..n_f {
        let mut tag = [0u8; 1];
        r.read_exact(&mut tag)?;
        f_star.push(if tag[0] == 1 {
            Some(read_f64(&mut r)?)
        } else {
            None
        });
    }
    let mut tag = [0u8; 1];
    r.read_exact(&mut tag)?;
    let best = if tag[0] == 1 {
        let x_idx = read_u64(&mut r)? as usize;
        let z_idx = read_u64(&mut r)? as usize;
        let f_upper = read_f64(&mut r)?;
        Some(GroundTruthBest {
            point: PointIndex { x_idx, z_idx },
            f_upper,
        })
    } else {
        None
    };
    Ok(GroundTruth {
        feasible_mask,
        lower_feasible,
        z_star,
        f_star,
        best,
        tie_tolerance,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::build_grid;
    use crate::problems::{make_branin_goldstein, make_smd};
    use approx::assert_relative_eq;

    #[test]
    fn branin_grid_optimum_is_unique_known_point() {
        let problem = make_branin_goldstein();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 100).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        assert_eq!(gt.feasible_mask.count_ones(), grid.n_points());
        let best = gt.best.unwrap();
        // Located independently by exhaustive scan in 128-bit arithmetic.
        assert_eq!(best.point, PointIndex { x_idx: 51, z_idx: 25 });
        assert_relative_eq!(best.f_upper, 1.0055131978898282, epsilon = 1e-12);
        for ties in &gt.z_star {
            assert_eq!(ties.len(), 1);
        }
    }

    #[test]
    fn smd2_grid_optimum_matches_analytic_point() {
        let problem = make_smd(2).unwrap();
        // m = 25 puts a node at 8/24 = 1/3, where the analytic optimizer sits.
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 25).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        let best = gt.best.unwrap();
        let (x, z) = grid.coordinates(best.point);
        assert_relative_eq!(x[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.0, epsilon = 1e-12);
        assert_relative_eq!(z[0], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(z[1], 1.0 / 3.0, epsilon = 1e-12);
        assert_relative_eq!(z[2], 0.0, epsilon = 1e-12);
        assert_relative_eq!(best.f_upper, 25.15589058203268, epsilon = 1e-10);
    }

    #[test]
    fn smd6_tie_sets_cover_flat_valley() {
        let problem = make_smd(6).unwrap();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 9).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-6);
        // One lower coordinate cancels out of the lower objective, so each
        // slice maximum is attained along a full axis of 9 points.
        for ties in &gt.z_star {
            assert_eq!(ties.len(), 9);
        }
    }

    #[test]
    fn smd12_constraints_prune_most_upper_points() {
        let problem = make_smd(12).unwrap();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 9).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        assert!(gt.feasible_mask.count_ones() < grid.n_points());
        let best = gt.best.unwrap();
        let (x, _) = grid.coordinates(best.point);
        assert_relative_eq!(x[0], 0.375, epsilon = 1e-12);
        assert_relative_eq!(x[1], 0.875, epsilon = 1e-12);
        // Count upper points hosting at least one feasible optimal z.
        let n_z = grid.n_z();
        let hosting = (0..grid.n_x())
            .filter(|&xi| {
                gt.z_star[xi]
                    .iter()
                    .any(|&zi| gt.feasible_mask.get(xi * n_z + zi))
            })
            .count();
        assert_eq!(hosting, 3);
    }

    #[test]
    fn regret_zero_exactly_at_optimum() {
        let problem = make_branin_goldstein();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 20).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        let norm = OutputNormalization::identity(problem.functions().len());
        let r = instantaneous_regret(&gt, &problem, &grid, &norm, gt.best.unwrap().point);
        assert_eq!(r.upper, 0.0);
        assert!(r.lower.abs() < 1e-12);
        assert!(r.constraints.is_empty());
        assert!(r.total.abs() < 1e-12);
    }

    #[test]
    fn regret_positive_off_optimum_and_total_is_max() {
        let problem = make_branin_goldstein();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 20).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        let norm = OutputNormalization::identity(problem.functions().len());
        let p = PointIndex { x_idx: 0, z_idx: 0 };
        let r = instantaneous_regret(&gt, &problem, &grid, &norm, p);
        assert!(r.upper > 0.0);
        assert!(r.total >= r.upper && r.total >= r.lower);
        assert_relative_eq!(r.sum, r.upper + r.lower, epsilon = 1e-12);
    }

    #[test]
    fn constraint_regret_reports_violation_magnitude() {
        let problem = make_smd(12).unwrap();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 9).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        let norm = OutputNormalization::identity(problem.functions().len());
        // Find an infeasible point and check some constraint regret is
        // positive and equals the worst raw violation.
        let p = (0..grid.n_points())
            .find(|&p| !gt.feasible_mask.get(p))
            .unwrap();
        let point = grid.from_joint_index(p);
        let r = instantaneous_regret(&gt, &problem, &grid, &norm, point);
        assert_eq!(r.constraints.len(), 6);
        let worst = r.constraints.iter().cloned().fold(0.0, f64::max);
        assert!(worst > 0.0);
        let (x, z) = grid.coordinates(point);
        let mut expect: f64 = 0.0;
        for c in 0..3 {
            expect = expect.max(-problem.evaluate(FunctionId::UpperConstraint(c), &x, &z));
            expect = expect.max(-problem.evaluate(FunctionId::LowerConstraint(c), &x, &z));
        }
        assert_relative_eq!(worst, expect, epsilon = 1e-12);
    }

    #[test]
    fn accumulate_prefix_sums() {
        assert_eq!(accumulate(&[1.0, 2.0, 0.5]), vec![1.0, 3.0, 3.5]);
        assert!(accumulate(&[]).is_empty());
    }

    #[test]
    fn cache_round_trip_is_exact() {
        let problem = make_smd(12).unwrap();
        let grid = build_grid(&problem.x_bounds(), &problem.z_bounds(), 5).unwrap();
        let gt = solve_ground_truth(&problem, &grid, 1e-9);
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("cache").join("gt.bin");
        save_ground_truth(&path, &gt).unwrap();
        let loaded = load_ground_truth(&path).unwrap();
        assert_eq!(gt, loaded);
    }

    #[test]
    fn cache_rejects_foreign_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.bin");
        fs::write(&path, b"definitely not a cache").unwrap();
        assert!(load_ground_truth(&path).is_err());
    }
}
