//! Uniform discretization of the plant state and Gaussian transition rows.
//!
//! A symmetric grid covers `[-x_max, x_max]` with `0` as its middle node. The
//! folded grid is exactly its non-negative half: same spacing, same node
//! values, so mass folded from `±x_j` lands on a node that exists.
//!
//! Rows use the midpoint rule on interior nodes. The two outermost nodes also
//! absorb the Gaussian tail beyond the half-cell edge, then the row is
//! renormalized so it sums to one.

use std::f64::consts::{PI, SQRT_2};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{eps_tau_unchecked, ModelParams};

/// Smallest `n_nodes` accepted by [`build_grid`].
pub const MIN_GRID_NODES: usize = 31;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum GridError {
    #[error("invalid grid: {0}")]
    Invalid(String),
    #[error("variance must be positive, got {0}")]
    NonPositiveVariance(f64),
    #[error("folded row requested on a symmetric grid (or vice versa)")]
    WrongGridKind,
    #[error("folded rows need a non-negative center, got {0}")]
    NegativeCenter(f64),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Grid {
    pub x_nodes: Vec<f64>,
    pub dx: f64,
    pub x_max: f64,
    /// Ages are truncated to `0..=tau_max`.
    pub tau_max: u32,
    pub folded: bool,
}

impl Grid {
    /// `n_nodes` equally spaced nodes on `[-x_max, x_max]`; `n_nodes` must be odd.
    pub fn symmetric(x_max: f64, n_nodes: usize, tau_max: u32) -> Result<Grid, GridError> {
        check_common(x_max, n_nodes, tau_max)?;
        if n_nodes.is_multiple_of(2) {
            return Err(GridError::Invalid(format!(
                "symmetric grid needs an odd node count, got {n_nodes}"
            )));
        }
        let half = (n_nodes - 1) / 2;
        let dx = spacing(x_max, half);
        let x_nodes = (0..n_nodes)
            .map(|k| (k as f64 - half as f64) * dx)
            .collect();
        Ok(Grid {
            x_nodes,
            dx,
            x_max,
            tau_max,
            folded: false,
        })
    }

    /// `n_nodes` equally spaced nodes on `[0, x_max]`.
    pub fn folded(x_max: f64, n_nodes: usize, tau_max: u32) -> Result<Grid, GridError> {
        check_common(x_max, n_nodes, tau_max)?;
        let dx = spacing(x_max, n_nodes - 1);
        let x_nodes = (0..n_nodes).map(|k| k as f64 * dx).collect();
        Ok(Grid {
            x_nodes,
            dx,
            x_max,
            tau_max,
            folded: true,
        })
    }

    pub fn len(&self) -> usize {
        self.x_nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x_nodes.is_empty()
    }

    /// Index of the node holding `x = 0`.
    pub fn zero_index(&self) -> usize {
        if self.folded {
            0
        } else {
            self.len() / 2
        }
    }

    /// Index of the node mirrored through zero (symmetric grids).
    pub fn mirror(&self, i: usize) -> usize {
        debug_assert!(!self.folded);
        self.len() - 1 - i
    }

    /// Folded-grid index of `|x_i|` for a symmetric-grid index `i`.
    pub fn fold_index(&self, i: usize) -> usize {
        debug_assert!(!self.folded);
        let z = self.zero_index();
        i.abs_diff(z)
    }

    /// Node closest to `x`, clamped to the grid.
    pub fn nearest(&self, x: f64) -> usize {
        let first = self.x_nodes[0];
        if self.len() == 1 {
            return 0;
        }
        let k = ((x - first) / self.dx).round();
        k.clamp(0.0, (self.len() - 1) as f64) as usize
    }

    /// Inner edge of the outermost cell, `x_last - dx/2`.
    fn outer_edge(&self) -> f64 {
        self.x_nodes[self.len() - 1] - 0.5 * self.dx
    }

    /// The non-negative half of a symmetric grid.
    pub fn folded_half(&self) -> Grid {
        if self.folded {
            return self.clone();
        }
        Grid {
            x_nodes: self.x_nodes[self.zero_index()..].to_vec(),
            dx: self.dx,
            x_max: self.x_max,
            tau_max: self.tau_max,
            folded: true,
        }
    }
}

fn spacing(x_max: f64, intervals: usize) -> f64 {
    if intervals == 0 {
        // Single node: its cell is the whole line.
        2.0 * x_max
    } else {
        x_max / intervals as f64
    }
}

fn check_common(x_max: f64, n_nodes: usize, tau_max: u32) -> Result<(), GridError> {
    if n_nodes == 0 {
        return Err(GridError::Invalid("need at least one node".into()));
    }
    if !(x_max > 0.0 && x_max.is_finite()) {
        return Err(GridError::Invalid(format!(
            "x_max must be positive, got {x_max}"
        )));
    }
    if tau_max < 2 {
        return Err(GridError::Invalid(format!(
            "tau_max must be at least 2, got {tau_max}"
        )));
    }
    Ok(())
}

/// Grid sized from the model: `x_max = multiplier * sqrt(max_tau eps_tau)`.
///
/// `n_nodes` counts symmetric-grid nodes; the folded grid keeps the
/// `(n_nodes + 1) / 2` non-negative ones.
pub fn build_grid(
    params: &ModelParams,
    x_max_multiplier: f64,
    n_nodes: usize,
    tau_max: u32,
    folded: bool,
) -> Result<Grid, GridError> {
    if n_nodes < MIN_GRID_NODES || n_nodes.is_multiple_of(2) {
        return Err(GridError::Invalid(format!(
            "n_nodes must be odd and at least {MIN_GRID_NODES}, got {n_nodes}"
        )));
    }
    if !(x_max_multiplier > 0.0 && x_max_multiplier.is_finite()) {
        return Err(GridError::Invalid(format!(
            "x_max multiplier must be positive, got {x_max_multiplier}"
        )));
    }
    let max_var = (0..=tau_max)
        .map(|t| eps_tau_unchecked(t, params.a, params.sigma2))
        .fold(0.0_f64, f64::max);
    let x_max = x_max_multiplier * max_var.sqrt();
    if folded {
        Grid::folded(x_max, n_nodes.div_ceil(2), tau_max)
    } else {
        Grid::symmetric(x_max, n_nodes, tau_max)
    }
}

/// Unnormalized Gaussian kernel `exp(-v^2 / 2z)`.
pub fn psi(v: f64, z: f64) -> f64 {
    (-v * v / (2.0 * z)).exp()
}

/// Folded kernel `psi(v - s, z) + psi(v + s, z)`.
pub fn varphi(v: f64, s: f64, z: f64) -> f64 {
    psi(v - s, z) + psi(v + s, z)
}

/// `P(X > t)` for standard normal `X`.
fn upper_tail(t: f64) -> f64 {
    0.5 * libm::erfc(t / SQRT_2)
}

fn check_variance(variance: f64) -> Result<(), GridError> {
    if variance > 0.0 && variance.is_finite() {
        Ok(())
    } else {
        Err(GridError::NonPositiveVariance(variance))
    }
}

fn normalize(mut w: Vec<f64>) -> Vec<f64> {
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|v| *v /= total);
    w
}

/// Discretized `N(center, variance)` on a symmetric grid.
pub fn gaussian_row(center: f64, variance: f64, grid: &Grid) -> Result<Vec<f64>, GridError> {
    check_variance(variance)?;
    if grid.folded {
        return Err(GridError::WrongGridKind);
    }
    let n = grid.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let sd = variance.sqrt();
    let scale = grid.dx / (2.0 * PI * variance).sqrt();
    let edge = grid.outer_edge();
    let w = grid
        .x_nodes
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            if j == 0 {
                upper_tail((edge + center) / sd)
            } else if j == n - 1 {
                upper_tail((edge - center) / sd)
            } else {
                psi(x - center, variance) * scale
            }
        })
        .collect();
    Ok(normalize(w))
}

/// Discretized folded Gaussian: law of `|X|` for `X ~ N(center_abs, variance)`
/// on a folded grid. Node 0 is its own mirror image, so it keeps a single copy
/// of the density.
pub fn folded_gaussian_row(
    center_abs: f64,
    variance: f64,
    grid: &Grid,
) -> Result<Vec<f64>, GridError> {
    check_variance(variance)?;
    if !grid.folded {
        return Err(GridError::WrongGridKind);
    }
    if !(center_abs >= 0.0) {
        return Err(GridError::NegativeCenter(center_abs));
    }
    let n = grid.len();
    if n == 1 {
        return Ok(vec![1.0]);
    }
    let sd = variance.sqrt();
    let scale = grid.dx / (2.0 * PI * variance).sqrt();
    let edge = grid.outer_edge();
    let w = grid
        .x_nodes
        .iter()
        .enumerate()
        .map(|(j, &x)| {
            if j == 0 {
                0.5 * varphi(0.0, center_abs, variance) * scale
            } else if j == n - 1 {
                upper_tail((edge - center_abs) / sd) + upper_tail((edge + center_abs) / sd)
            } else {
                varphi(x, center_abs, variance) * scale
            }
        })
        .collect();
    Ok(normalize(w))
}

/// Row for the grid's kind: plain Gaussian on symmetric grids, folded Gaussian
/// of `|center|` on folded grids.
pub fn row_for(center: f64, variance: f64, grid: &Grid) -> Result<Vec<f64>, GridError> {
    if grid.folded {
        folded_gaussian_row(center.abs(), variance, grid)
    } else {
        gaussian_row(center, variance, grid)
    }
}

/// Pushes a symmetric-grid row through `x -> |x|`.
pub fn fold_row(row: &[f64], grid: &Grid) -> Vec<f64> {
    let z = grid.zero_index();
    let mut out = vec![0.0; z + 1];
    for (j, &p) in row.iter().enumerate() {
        out[j.abs_diff(z)] += p;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn std_cdf(t: f64) -> f64 {
        1.0 - upper_tail(t)
    }

    #[test]
    fn small_grids() {
        let g = Grid::symmetric(2.0, 5, 3).unwrap();
        assert_eq!(g.x_nodes, vec![-2.0, -1.0, 0.0, 1.0, 2.0]);
        let f = Grid::folded(2.0, 3, 3).unwrap();
        assert_eq!(f.x_nodes, vec![0.0, 1.0, 2.0]);
        assert_eq!(g.folded_half(), f);
        assert!(Grid::symmetric(2.0, 4, 3).is_err());
        assert!(Grid::symmetric(2.0, 5, 1).is_err());
        assert!(Grid::symmetric(-1.0, 5, 3).is_err());
    }

    #[test]
    fn build_grid_sizes() {
        let p = ModelParams::new(0.0, 1.0, 0.2, 0.9, 3, vec![1.0]);
        let g = build_grid(&p, 4.0, 31, 7, false).unwrap();
        assert_eq!(g.x_max, 4.0);
        assert_eq!(g.len(), 31);
        assert_eq!(g.x_nodes[15], 0.0);
        assert_eq!(g.x_nodes[0], -g.x_nodes[30]);
        let f = build_grid(&p, 4.0, 31, 7, true).unwrap();
        assert_eq!(f.len(), 16);
        assert_eq!(f.x_nodes[..], g.x_nodes[15..]);
        assert!(build_grid(&p, 4.0, 29, 7, false).is_err());
        assert!(build_grid(&p, 4.0, 32, 7, false).is_err());
        assert!(build_grid(&p, 0.0, 31, 7, false).is_err());

        // x_max follows the largest post-control variance over retained ages.
        let p = ModelParams::default();
        let g = build_grid(&p, 5.0, 201, 25, false).unwrap();
        let want = 5.0 * ((1.0 - 0.64f64.powi(26)) / 0.36).sqrt();
        assert!((g.x_max - want).abs() < 1e-12);
    }

    #[test]
    fn centered_row_is_symmetric() {
        let g = Grid::symmetric(5.0, 41, 3).unwrap();
        let r = gaussian_row(0.0, 1.0, &g).unwrap();
        for i in 0..g.len() {
            assert!((r[i] - r[g.mirror(i)]).abs() < 1e-17);
        }
    }

    #[test]
    fn far_center_collapses_on_boundary() {
        let g = Grid::symmetric(5.0, 41, 3).unwrap();
        let r = gaussian_row(50.0, 1.0, &g).unwrap();
        assert_eq!(r[40], 1.0);
        assert!(r[..40].iter().all(|&v| v == 0.0));
        let r = gaussian_row(-50.0, 1.0, &g).unwrap();
        assert_eq!(r[0], 1.0);
        let f = g.folded_half();
        let r = folded_gaussian_row(50.0, 1.0, &f).unwrap();
        assert_eq!(r[20], 1.0);
    }

    #[test]
    fn bad_inputs() {
        let g = Grid::symmetric(5.0, 41, 3).unwrap();
        assert!(gaussian_row(0.0, 0.0, &g).is_err());
        assert!(gaussian_row(0.0, -1.0, &g).is_err());
        assert!(folded_gaussian_row(0.0, 1.0, &g).is_err());
        let f = g.folded_half();
        assert!(gaussian_row(0.0, 1.0, &f).is_err());
        assert!(folded_gaussian_row(-0.5, 1.0, &f).is_err());
    }

    #[test]
    fn folded_centered_is_doubled_half() {
        let g = Grid::symmetric(5.0, 41, 3).unwrap();
        let f = g.folded_half();
        let r = folded_gaussian_row(0.0, 1.0, &f).unwrap();
        // Interior nodes carry twice the centered density, node 0 once.
        let ratio = r[3] / r[0];
        let want = 2.0 * psi(f.x_nodes[3], 1.0);
        assert!((ratio - want).abs() < 1e-14);
        assert!((varphi(0.7, 0.0, 1.3) - 2.0 * psi(0.7, 1.3)).abs() < 1e-15);
        assert_eq!(varphi(0.7, 0.4, 1.3), varphi(0.7, -0.4, 1.3));
    }

    #[test]
    fn single_node_rows() {
        let g = Grid::symmetric(1.0, 1, 3).unwrap();
        assert_eq!(gaussian_row(0.3, 1.0, &g).unwrap(), vec![1.0]);
        let f = Grid::folded(1.0, 1, 3).unwrap();
        assert_eq!(folded_gaussian_row(0.3, 1.0, &f).unwrap(), vec![1.0]);
    }

    #[test]
    fn nearest_node() {
        let g = Grid::symmetric(2.0, 5, 3).unwrap();
        assert_eq!(g.nearest(0.4), 2);
        assert_eq!(g.nearest(-1.6), 0);
        assert_eq!(g.nearest(99.0), 4);
        assert_eq!(g.fold_index(0), 2);
        assert_eq!(g.fold_index(3), 1);
    }

    proptest! {
        #[test]
        fn rows_are_stochastic(center in -12.0f64..12.0, var in 0.05f64..9.0, half in 1usize..60) {
            let g = Grid::symmetric(6.0, 2 * half + 1, 3).unwrap();
            let r = gaussian_row(center, var, &g).unwrap();
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            let f = g.folded_half();
            let r = folded_gaussian_row(center.abs(), var, &f).unwrap();
            prop_assert!(r.iter().all(|&v| v >= 0.0));
            prop_assert!((r.iter().sum::<f64>() - 1.0).abs() < 1e-12);
        }

        /// Discretize-then-fold equals fold-then-discretize.
        #[test]
        fn folding_commutes_with_discretization(center in -10.0f64..10.0, var in 0.05f64..9.0, half in 1usize..60) {
            let g = Grid::symmetric(6.0, 2 * half + 1, 3).unwrap();
            let folded = fold_row(&gaussian_row(center, var, &g).unwrap(), &g);
            let direct = folded_gaussian_row(center.abs(), var, &g.folded_half()).unwrap();
            for (a, b) in folded.iter().zip(&direct) {
                prop_assert!((a - b).abs() < 1e-9);
            }
        }

        /// On a fine grid the midpoint row tracks exact cell probabilities.
        #[test]
        fn row_matches_cell_masses(center in -3.0f64..3.0, var in 0.5f64..4.0) {
            let g = Grid::symmetric(8.0 * var.sqrt() + 3.0, 401, 3).unwrap();
            let r = gaussian_row(center, var, &g).unwrap();
            let sd = var.sqrt();
            let n = g.len();
            for (j, &x) in g.x_nodes.iter().enumerate() {
                let lo = if j == 0 { f64::NEG_INFINITY } else { x - 0.5 * g.dx };
                let hi = if j == n - 1 { f64::INFINITY } else { x + 0.5 * g.dx };
                let exact = std_cdf((hi - center) / sd) - std_cdf((lo - center) / sd);
                prop_assert!((r[j] - exact).abs() < 1e-4, "node {} got {} want {}", j, r[j], exact);
            }
        }
    }
}
