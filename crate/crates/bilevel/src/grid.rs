//! Uniform discretization of the joint domain.
//!
//! Every dimension gets the same number of points `m`, endpoints included.
//! Joint points are addressed by a [`PointIndex`] pair: `x_idx` linearizes the
//! upper dimensions, `z_idx` the lower ones, both row-major with the first
//! dimension outermost. The joint linearization puts the upper index outermost
//! (`joint = x_idx * n_z + z_idx`), so a lower slice at fixed `x_idx` is a
//! contiguous index range.

use thiserror::Error;

#[derive(Debug, Error, PartialEq)]
pub enum GridError {
    #[error("points per dimension must be at least 2, got {0}")]
    TooFewPoints(usize),
    #[error("bound {0:?} is degenerate (lo must be strictly below hi)")]
    DegenerateBounds((f64, f64)),
    #[error("grid must have at least one upper and one lower dimension")]
    EmptyDims,
}

/// Index of one joint grid point: `x_idx` in `[0, m^d_x)`, `z_idx` in `[0, m^d_z)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct PointIndex {
    pub x_idx: usize,
    pub z_idx: usize,
}

/// Finite uniform grid over the joint upper/lower domain.
#[derive(Debug, Clone)]
pub struct Grid {
    x_bounds: Vec<(f64, f64)>,
    z_bounds: Vec<(f64, f64)>,
    m: usize,
    n_x: usize,
    n_z: usize,
}

/// Builds a grid with `m` uniformly spaced points (endpoints included) per dimension.
pub fn build_grid(
    x_bounds: &[(f64, f64)],
    z_bounds: &[(f64, f64)],
    m: usize,
) -> Result<Grid, GridError> {
    if m < 2 {
        return Err(GridError::TooFewPoints(m));
    }
    if x_bounds.is_empty() || z_bounds.is_empty() {
        return Err(GridError::EmptyDims);
    }
    for &b in x_bounds.iter().chain(z_bounds) {
        if !(b.0 < b.1) || !b.0.is_finite() || !b.1.is_finite() {
            return Err(GridError::DegenerateBounds(b));
        }
    }
    let n_x = m.checked_pow(x_bounds.len() as u32).expect("grid too large");
    let n_z = m.checked_pow(z_bounds.len() as u32).expect("grid too large");
    n_x.checked_mul(n_z).expect("grid too large");
    Ok(Grid {
        x_bounds: x_bounds.to_vec(),
        z_bounds: z_bounds.to_vec(),
        m,
        n_x,
        n_z,
    })
}

impl Grid {
    pub fn m(&self) -> usize {
        self.m
    }

    pub fn d_x(&self) -> usize {
        self.x_bounds.len()
    }

    pub fn d_z(&self) -> usize {
        self.z_bounds.len()
    }

    /// Number of upper-level points, `m^d_x`.
    pub fn n_x(&self) -> usize {
        self.n_x
    }

    /// Number of lower-level points per slice, `m^d_z`.
    pub fn n_z(&self) -> usize {
        self.n_z
    }

    /// Total joint point count, `m^(d_x + d_z)`.
    pub fn n_points(&self) -> usize {
        self.n_x * self.n_z
    }

    /// Coordinate of step `j` along a dimension with the given bounds.
    fn axis_coord(&self, bounds: (f64, f64), j: usize) -> f64 {
        // Endpoints must land exactly on lo/hi; interior points interpolate.
        if j == self.m - 1 {
            bounds.1
        } else {
            bounds.0 + (bounds.1 - bounds.0) * j as f64 / (self.m - 1) as f64
        }
    }

    fn assert_valid(&self, idx: PointIndex) {
        assert!(idx.x_idx < self.n_x, "x_idx {} out of range", idx.x_idx);
        assert!(idx.z_idx < self.n_z, "z_idx {} out of range", idx.z_idx);
    }

    /// Joint coordinate of a grid point as separate upper and lower vectors.
    pub fn coordinates(&self, idx: PointIndex) -> (Vec<f64>, Vec<f64>) {
        self.assert_valid(idx);
        let x = self.decode(idx.x_idx, &self.x_bounds);
        let z = self.decode(idx.z_idx, &self.z_bounds);
        (x, z)
    }

    /// Concatenated `[x, z]` coordinate, written into `out` (length `d_x + d_z`).
    pub fn write_joint(&self, idx: PointIndex, out: &mut [f64]) {
        self.assert_valid(idx);
        let d_x = self.d_x();
        self.decode_into(idx.x_idx, &self.x_bounds, &mut out[..d_x]);
        self.decode_into(idx.z_idx, &self.z_bounds, &mut out[d_x..]);
    }

    fn decode(&self, mut lin: usize, bounds: &[(f64, f64)]) -> Vec<f64> {
        let mut out = vec![0.0; bounds.len()];
        // Row-major: last dimension varies fastest.
        for (k, &b) in bounds.iter().enumerate().rev() {
            out[k] = self.axis_coord(b, lin % self.m);
            lin /= self.m;
        }
        out
    }

    fn decode_into(&self, mut lin: usize, bounds: &[(f64, f64)], out: &mut [f64]) {
        for (k, &b) in bounds.iter().enumerate().rev() {
            out[k] = self.axis_coord(b, lin % self.m);
            lin /= self.m;
        }
    }

    /// Index of the on-grid coordinate `(x, z)`; `None` if any component is
    /// farther than a quarter grid step from every lattice coordinate.
    pub fn index_of(&self, x: &[f64], z: &[f64]) -> Option<PointIndex> {
        Some(PointIndex {
            x_idx: self.encode(x, &self.x_bounds)?,
            z_idx: self.encode(z, &self.z_bounds)?,
        })
    }

    /// Index of the grid point nearest to `(x, z)` (components clamped to bounds).
    pub fn nearest(&self, x: &[f64], z: &[f64]) -> PointIndex {
        PointIndex {
            x_idx: self.encode_nearest(x, &self.x_bounds),
            z_idx: self.encode_nearest(z, &self.z_bounds),
        }
    }

    fn encode(&self, coords: &[f64], bounds: &[(f64, f64)]) -> Option<usize> {
        assert_eq!(coords.len(), bounds.len(), "dimension mismatch");
        let mut lin = 0usize;
        for (&v, &b) in coords.iter().zip(bounds) {
            let step = (b.1 - b.0) / (self.m - 1) as f64;
            let j = ((v - b.0) / step).round();
            if !(0.0..=(self.m - 1) as f64).contains(&j) {
                return None;
            }
            let j = j as usize;
            if (v - self.axis_coord(b, j)).abs() > 0.25 * step {
                return None;
            }
            lin = lin * self.m + j;
        }
        Some(lin)
    }

    fn encode_nearest(&self, coords: &[f64], bounds: &[(f64, f64)]) -> usize {
        assert_eq!(coords.len(), bounds.len(), "dimension mismatch");
        let mut lin = 0usize;
        for (&v, &b) in coords.iter().zip(bounds) {
            let step = (b.1 - b.0) / (self.m - 1) as f64;
            let j = (((v - b.0) / step).round().max(0.0) as usize).min(self.m - 1);
            lin = lin * self.m + j;
        }
        lin
    }

    /// All joint indices with the given `x_idx`, in increasing `z_idx` order.
    pub fn lower_slice(&self, x_idx: usize) -> impl Iterator<Item = PointIndex> + '_ {
        assert!(x_idx < self.n_x, "x_idx {x_idx} out of range");
        (0..self.n_z).map(move |z_idx| PointIndex { x_idx, z_idx })
    }

    /// Joint linear index; lower slices are contiguous ranges of this.
    pub fn joint_index(&self, idx: PointIndex) -> usize {
        idx.x_idx * self.n_z + idx.z_idx
    }

    pub fn from_joint_index(&self, joint: usize) -> PointIndex {
        assert!(joint < self.n_points(), "joint index {joint} out of range");
        PointIndex {
            x_idx: joint / self.n_z,
            z_idx: joint % self.n_z,
        }
    }

    /// Flat row-major table of every joint coordinate, `n_points * (d_x + d_z)`
    /// long; used to batch-evaluate GP posteriors over the whole grid.
    pub fn joint_coords_flat(&self) -> Vec<f64> {
        let d = self.d_x() + self.d_z();
        let mut out = vec![0.0; self.n_points() * d];
        let mut x = vec![0.0; self.d_x()];
        for x_idx in 0..self.n_x {
            self.decode_into(x_idx, &self.x_bounds, &mut x);
            for z_idx in 0..self.n_z {
                let base = (x_idx * self.n_z + z_idx) * d;
                out[base..base + self.d_x()].copy_from_slice(&x);
                self.decode_into(z_idx, &self.z_bounds, &mut out[base + self.d_x()..base + d]);
            }
        }
        out
    }

    /// Grid spacing along the first lower dimension, used as the default
    /// finite-difference step for continuous lower-level search.
    pub fn z_spacing(&self) -> f64 {
        let b = self.z_bounds[0];
        (b.1 - b.0) / (self.m - 1) as f64
    }

    pub fn x_bounds(&self) -> &[(f64, f64)] {
        &self.x_bounds
    }

    pub fn z_bounds(&self) -> &[(f64, f64)] {
        &self.z_bounds
    }

    /// Per-dimension step digits of a point (upper dims then lower dims, each
    /// in `0..m`), in the same axis order as the flat coordinate layout.
    pub fn multi_index(&self, idx: PointIndex) -> Vec<u32> {
        self.assert_valid(idx);
        let d_x = self.d_x();
        let mut out = vec![0u32; d_x + self.d_z()];
        let mut lin = idx.x_idx;
        for k in (0..d_x).rev() {
            out[k] = (lin % self.m) as u32;
            lin /= self.m;
        }
        let mut lin = idx.z_idx;
        for k in (0..self.d_z()).rev() {
            out[d_x + k] = (lin % self.m) as u32;
            lin /= self.m;
        }
        out
    }

    /// The spacing shared by every dimension, or `None` when bounds differ
    /// (relative mismatch above 1e-12).
    pub fn uniform_spacing(&self) -> Option<f64> {
        let steps: Vec<f64> = self
            .x_bounds
            .iter()
            .chain(&self.z_bounds)
            .map(|b| (b.1 - b.0) / (self.m - 1) as f64)
            .collect();
        let first = steps[0];
        if steps.iter().all(|&s| (s - first).abs() <= 1e-12 * first.abs()) {
            Some(first)
        } else {
            None
        }
    }
}
