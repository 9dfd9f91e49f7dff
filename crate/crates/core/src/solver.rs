//! Value iteration over a discretized kernel.
//!
//! Backups are synchronous: `V_{n+1}` is computed entirely from `V_n`. One
//! backup first caches, for every `(tau, y, b)` slice, the expected next value
//! under the drift rows and under each reset row; `Q` values are then short
//! weighted sums of cached expectations. [`finite_horizon_dp`] performs the
//! same recursion without the cache and serves as the oracle for it.

use std::time::Instant;

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::kernel::{Kernel, SliceKey, StateSpace, XMove};
use crate::model::{is_admissible, Action};

/// Residual growth over this many iterations aborts a solve flagged as
/// possibly unstable.
const DIVERGENCE_WINDOW: usize = 50;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SolverError {
    #[error("value table does not match the kernel: {0}")]
    ShapeMismatch(String),
    #[error("invalid solver option: {0}")]
    InvalidOption(String),
    #[error("value iteration diverged: residual grew from {from:.3e} to {to:.3e} over {window} iterations (beta * a^2 = {stability:.4})")]
    Diverged {
        from: f64,
        to: f64,
        window: usize,
        stability: f64,
    },
}

/// Values, action values and the greedy policy over the discretized state
/// space. Inadmissible actions carry `Q = +inf`.
#[derive(Debug, Clone, PartialEq)]
pub struct ValueTable {
    pub grid: Grid,
    pub space: StateSpace,
    pub v: Vec<f64>,
    pub q: Vec<[f64; 3]>,
    pub policy: Vec<Action>,
    pub iteration_count: usize,
    pub final_residual: f64,
}

impl ValueTable {
    /// The all-zero iterate `V_0`.
    pub fn zeros(kernel: &Kernel) -> ValueTable {
        let space = kernel.space();
        let mut q = vec![[0.0; 3]; space.len()];
        for slice in space.slices() {
            for i in 0..space.n_x {
                for u in Action::ALL {
                    if !is_admissible(u, slice.y, slice.b) {
                        q[space.index(i, slice)][u.index()] = f64::INFINITY;
                    }
                }
            }
        }
        ValueTable {
            grid: kernel.grid.clone(),
            space,
            v: vec![0.0; space.len()],
            q,
            policy: vec![Action::Idle; space.len()],
            iteration_count: 0,
            final_residual: f64::INFINITY,
        }
    }

    pub fn value(&self, i: usize, slice: SliceKey) -> f64 {
        self.v[self.space.index(i, slice)]
    }

    pub fn q_value(&self, i: usize, slice: SliceKey, u: Action) -> f64 {
        self.q[self.space.index(i, slice)][u.index()]
    }

    pub fn action(&self, i: usize, slice: SliceKey) -> Action {
        self.policy[self.space.index(i, slice)]
    }

    pub fn slice_values(&self, slice: SliceKey) -> &[f64] {
        let start = self.space.slice_index(slice) * self.space.n_x;
        &self.v[start..start + self.space.n_x]
    }

    /// The table restricted to `x >= 0`, on the folded grid. Returns a clone
    /// for tables that are already folded.
    pub fn folded_half(&self) -> ValueTable {
        if self.grid.folded {
            return self.clone();
        }
        let grid = self.grid.folded_half();
        let space = StateSpace::new(&grid, self.space.battery_cap);
        let z = self.grid.zero_index();
        let mut idx = Vec::with_capacity(space.len());
        for slice in space.slices() {
            for i in 0..space.n_x {
                idx.push(self.space.index(z + i, slice));
            }
        }
        ValueTable {
            grid,
            space,
            v: idx.iter().map(|&k| self.v[k]).collect(),
            q: idx.iter().map(|&k| self.q[k]).collect(),
            policy: idx.iter().map(|&k| self.policy[k]).collect(),
            iteration_count: self.iteration_count,
            final_residual: self.final_residual,
        }
    }

    /// Value at the node nearest to `x` (by `|x|` on a folded grid), with the
    /// age clamped to the retained range.
    pub fn value_at(&self, x: f64, tau: u32, y: u8, b: u32) -> f64 {
        let x = if self.grid.folded { x.abs() } else { x };
        let i = self.grid.nearest(x);
        self.value(
            i,
            SliceKey {
                tau: tau.min(self.space.tau_max),
                y,
                b,
            },
        )
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolveReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub tol: f64,
    pub residual_history: Vec<f64>,
    /// `residual_history[k + 1] / residual_history[k]`.
    pub contraction_estimates: Vec<f64>,
    pub wall_time_secs: f64,
    pub age_truncation_approximate: bool,
    pub warnings: Vec<String>,
}

/// Greedy minimum with ties going to the lowest action index.
fn greedy(q: &[f64; 3]) -> (f64, Action) {
    let mut best = (q[0], Action::Idle);
    for u in [Action::Uplink, Action::Downlink] {
        if q[u.index()] < best.0 {
            best = (q[u.index()], u);
        }
    }
    best
}

fn dot(row: &[f64], v: &[f64]) -> f64 {
    let mut s = 0.0;
    for (r, x) in row.iter().zip(v) {
        s += r * x;
    }
    s
}

/// New values, action values and greedy actions from one backup.
pub type Backup = (Vec<f64>, Vec<[f64; 3]>, Vec<Action>);

/// One synchronous Bellman backup of `v` through `kernel`.
pub fn bellman_backup(v: &[f64], kernel: &Kernel) -> Result<Backup, SolverError> {
    let space = kernel.space();
    if v.len() != space.len() {
        return Err(SolverError::ShapeMismatch(format!(
            "{} values for a state space of {}",
            v.len(),
            space.len()
        )));
    }
    let n = space.n_x;
    let beta = kernel.params.beta;
    let nodes = &kernel.grid.x_nodes;

    let mut drift_ev = vec![0.0; space.len()];
    drift_ev.par_chunks_mut(n).enumerate().for_each(|(s, out)| {
        let vs = &v[s * n..(s + 1) * n];
        for (i, e) in out.iter_mut().enumerate() {
            *e = dot(kernel.drift_row(i), vs);
        }
    });
    let reset_ev: Vec<Vec<f64>> = (0..=space.tau_max)
        .into_par_iter()
        .map(|tau| {
            let row = kernel.reset_row(tau);
            (0..space.n_slices())
                .map(|s| dot(row, &v[s * n..(s + 1) * n]))
                .collect()
        })
        .collect();

    let mut new_v = vec![0.0; space.len()];
    let mut new_q = vec![[f64::INFINITY; 3]; space.len()];
    let mut policy = vec![Action::Idle; space.len()];
    new_v
        .par_chunks_mut(n)
        .zip(new_q.par_chunks_mut(n))
        .zip(policy.par_chunks_mut(n))
        .enumerate()
        .for_each(|(s, ((vs, qs), ps))| {
            let slice = space.slice_key(s);
            for u in Action::ALL {
                let Some(branches) = kernel.branches(slice, u) else {
                    continue;
                };
                for i in 0..n {
                    let mut acc = 0.0;
                    for br in branches {
                        let e = match br.x_move {
                            XMove::Drift => drift_ev[space.index(i, br.next)],
                            XMove::Reset { tau } => {
                                reset_ev[tau as usize][space.slice_index(br.next)]
                            }
                        };
                        acc += br.weight * e;
                    }
                    let x = nodes[i];
                    qs[i][u.index()] = x * x + beta * acc;
                }
            }
            for i in 0..n {
                let (val, act) = greedy(&qs[i]);
                vs[i] = val;
                ps[i] = act;
            }
        });
    Ok((new_v, new_q, policy))
}

fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Iterates from `V_0 = 0` until the sup-norm update drops below `tol` or
/// `max_iter` backups have run.
///
/// Hitting `max_iter` is not an error: the report carries `converged = false`.
/// When `beta * a^2 >= 1` the problem may have infinite cost; the solve then
/// logs a warning and aborts if the residual grows over a 50-iteration window.
pub fn value_iteration(
    kernel: &Kernel,
    tol: f64,
    max_iter: usize,
) -> Result<(ValueTable, SolveReport), SolverError> {
    if !(tol > 0.0) {
        return Err(SolverError::InvalidOption(format!(
            "tol must be positive, got {tol}"
        )));
    }
    let start = Instant::now();
    let params = &kernel.params;
    let stability = params.beta * params.a * params.a;
    let mut warnings = Vec::new();
    if stability >= 1.0 {
        let msg = format!(
            "beta * a^2 = {stability:.4} >= 1: uncontrolled cost is infinite, finiteness of the optimal cost is not guaranteed"
        );
        warn!("{msg}");
        warnings.push(msg);
    }
    if kernel.age_truncation_is_approximate() {
        warnings.push(format!(
            "|a| >= 1: ages above tau_max = {} are merged, the solution is an approximation",
            kernel.grid.tau_max
        ));
    }

    let mut table = ValueTable::zeros(kernel);
    let mut history: Vec<f64> = Vec::new();
    let mut converged = false;
    for _ in 0..max_iter {
        let (v, q, policy) = bellman_backup(&table.v, kernel)?;
        let residual = sup_diff(&v, &table.v);
        table.v = v;
        table.q = q;
        table.policy = policy;
        table.iteration_count += 1;
        table.final_residual = residual;
        history.push(residual);
        if residual < tol {
            converged = true;
            break;
        }
        if stability >= 1.0 && history.len() > DIVERGENCE_WINDOW {
            let from = history[history.len() - 1 - DIVERGENCE_WINDOW];
            if residual > from {
                return Err(SolverError::Diverged {
                    from,
                    to: residual,
                    window: DIVERGENCE_WINDOW,
                    stability,
                });
            }
        }
    }
    let contraction_estimates = history
        .windows(2)
        .map(|w| if w[0] > 0.0 { w[1] / w[0] } else { 0.0 })
        .collect();
    let report = SolveReport {
        converged,
        iterations: table.iteration_count,
        final_residual: table.final_residual,
        tol,
        residual_history: history,
        contraction_estimates,
        wall_time_secs: start.elapsed().as_secs_f64(),
        age_truncation_approximate: kernel.age_truncation_is_approximate(),
        warnings,
    };
    Ok((table, report))
}

/// The horizon-`horizon` value function, computed by the plain recursion
/// `V_{k+1}(s) = min_u [x^2 + beta * sum_branches w * sum_j P(j) V_k(j, next)]`.
pub fn finite_horizon_dp(kernel: &Kernel, horizon: usize) -> ValueTable {
    let space = kernel.space();
    let n = space.n_x;
    let beta = kernel.params.beta;
    let mut table = ValueTable::zeros(kernel);
    for _ in 0..horizon {
        let old = table.v.clone();
        for slice in space.slices() {
            for i in 0..n {
                let x = kernel.grid.x_nodes[i];
                let idx = space.index(i, slice);
                let mut q = [f64::INFINITY; 3];
                for u in Action::ALL {
                    let Some(branches) = kernel.branches(slice, u) else {
                        continue;
                    };
                    let mut acc = 0.0;
                    for br in branches {
                        let row = kernel.row(i, br.x_move);
                        let mut e = 0.0;
                        for j in 0..n {
                            e += row[j] * old[space.index(j, br.next)];
                        }
                        acc += br.weight * e;
                    }
                    q[u.index()] = x * x + beta * acc;
                }
                let mut best = Action::Idle;
                for u in [Action::Uplink, Action::Downlink] {
                    if q[u.index()] < q[best.index()] {
                        best = u;
                    }
                }
                table.q[idx] = q;
                table.v[idx] = q[best.index()];
                table.policy[idx] = best;
            }
        }
        table.final_residual = sup_diff(&table.v, &old);
        table.iteration_count += 1;
    }
    table
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::Grid;
    use crate::kernel::build_kernel;
    use crate::model::ModelParams;

    fn reduced(params: &ModelParams, folded: bool) -> Kernel {
        let g = Grid::symmetric(6.0, 41, 6).unwrap();
        let g = if folded { g.folded_half() } else { g };
        build_kernel(params, &g).unwrap()
    }

    #[test]
    fn backup_of_zero_is_stage_cost() {
        let k = reduced(&ModelParams::default(), true);
        let (v, q, _) = bellman_backup(&vec![0.0; k.space().len()], &k).unwrap();
        for slice in k.space().slices() {
            for i in 0..k.space().n_x {
                let x = k.grid.x_nodes[i];
                let idx = k.space().index(i, slice);
                assert_eq!(v[idx], x * x);
                for u in Action::ALL {
                    let want = if is_admissible(u, slice.y, slice.b) {
                        x * x
                    } else {
                        f64::INFINITY
                    };
                    assert_eq!(q[idx][u.index()], want);
                }
            }
        }
    }

    #[test]
    fn backup_of_constant_adds_discounted_constant() {
        let p = ModelParams::default();
        let k = reduced(&p, false);
        let c = 7.5;
        let (_, q, _) = bellman_backup(&vec![c; k.space().len()], &k).unwrap();
        for slice in k.space().slices() {
            for i in 0..k.space().n_x {
                let x = k.grid.x_nodes[i];
                for u in Action::ALL {
                    let got = q[k.space().index(i, slice)][u.index()];
                    if got.is_finite() {
                        assert!((got - (x * x + p.beta * c)).abs() < 1e-12);
                    }
                }
            }
        }
    }

    #[test]
    fn shape_mismatch_is_reported() {
        let k = reduced(&ModelParams::default(), true);
        assert!(matches!(
            bellman_backup(&[0.0; 3], &k),
            Err(SolverError::ShapeMismatch(_))
        ));
    }

    #[test]
    fn myopic_limit() {
        let mut p = ModelParams::default();
        p.beta = 1e-300;
        let k = reduced(&p, true);
        let (t, rep) = value_iteration(&k, 1e-9, 10).unwrap();
        assert!(rep.converged);
        assert_eq!(rep.iterations, 2);
        for slice in k.space().slices() {
            for i in 0..k.space().n_x {
                let x = k.grid.x_nodes[i];
                assert!((t.value(i, slice) - x * x).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn zero_iterations() {
        let k = reduced(&ModelParams::default(), true);
        let (t, rep) = value_iteration(&k, 1e-6, 0).unwrap();
        assert!(!rep.converged);
        assert!(t.v.iter().all(|&v| v == 0.0));
        assert!(value_iteration(&k, 0.0, 10).is_err());
    }

    #[test]
    fn oracle_matches_bit_for_bit() {
        let k = reduced(&ModelParams::default(), true);
        for n in [0usize, 1, 5] {
            let (t, _) = value_iteration(&k, 1e-300, n).unwrap();
            let o = finite_horizon_dp(&k, n);
            assert_eq!(t.v, o.v, "horizon {n}");
            assert_eq!(t.q, o.q, "horizon {n}");
            assert_eq!(t.policy, o.policy, "horizon {n}");
        }
        let one = finite_horizon_dp(&k, 1);
        for slice in k.space().slices() {
            for i in 0..k.space().n_x {
                let x = k.grid.x_nodes[i];
                assert_eq!(one.value(i, slice), x * x);
            }
        }
    }

    #[test]
    fn iterates_are_monotone_in_n() {
        let k = reduced(&ModelParams::default(), true);
        let mut v = vec![0.0; k.space().len()];
        for _ in 0..30 {
            let (next, _, _) = bellman_backup(&v, &k).unwrap();
            assert!(next.iter().zip(&v).all(|(a, b)| *a >= *b));
            v = next;
        }
    }

    #[test]
    fn residuals_contract_by_beta() {
        let p = ModelParams::new(0.0, 1.0, 0.2, 0.5, 3, vec![1.0 / 3.0; 3]);
        let k = reduced(&p, true);
        let (_, rep) = value_iteration(&k, 1e-10, 200).unwrap();
        assert!(rep.converged);
        for r in &rep.contraction_estimates {
            assert!(*r <= p.beta + 1e-6, "ratio {r}");
        }
        // With a = 0 every action costs the same from the second backup on,
        // so the rate is attained exactly.
        for r in &rep.contraction_estimates[1..rep.contraction_estimates.len().min(10)] {
            assert!((r - p.beta).abs() < 1e-6, "ratio {r}");
        }
    }

    #[test]
    fn iteration_count_within_geometric_bound() {
        let p = ModelParams::default();
        let k = reduced(&p, true);
        let tol = 1e-6;
        let (_, rep) = value_iteration(&k, tol, 1000).unwrap();
        assert!(rep.converged);
        let c = rep.residual_history[0];
        let bound = ((tol * (1.0 - p.beta) / c).ln() / p.beta.ln()).ceil() as usize;
        assert!(rep.iterations <= bound, "{} > {bound}", rep.iterations);
    }

    #[test]
    fn greedy_policy_is_stable_after_convergence() {
        let k = reduced(&ModelParams::default(), true);
        let (t, _) = value_iteration(&k, 1e-9, 2000).unwrap();
        let (_, q, policy) = bellman_backup(&t.v, &k).unwrap();
        for (idx, (a, b)) in policy.iter().zip(&t.policy).enumerate() {
            if a != b {
                // Only a near-tie may flip.
                let gap = (q[idx][a.index()] - q[idx][b.index()]).abs();
                assert!(gap < 1e-7, "state {idx} flipped with gap {gap}");
            }
        }
    }

    #[test]
    fn tie_break_prefers_lowest_index() {
        assert_eq!(greedy(&[1.0, 1.0, 1.0]).1, Action::Idle);
        assert_eq!(greedy(&[2.0, 1.0, 1.0]).1, Action::Uplink);
        assert_eq!(greedy(&[2.0, f64::INFINITY, 1.0]).1, Action::Downlink);
    }

    #[test]
    fn unstable_plant_warns() {
        let p = ModelParams::new(1.1, 1.0, 0.2, 0.9, 2, vec![0.5, 0.5]);
        let k = reduced(&p, true);
        let (_, rep) = value_iteration(&k, 1e-6, 2000).unwrap();
        assert!(!rep.warnings.is_empty());
        assert!(rep.age_truncation_approximate);
        assert!(rep.converged);
    }
}
