//! Threshold policies and numerical checks of the structural properties of
//! solved value tables.
//!
//! All checks run on the folded grid unless stated otherwise. Tolerances are
//! explicit arguments; the CLI uses ten times the solver tolerance.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::Grid;
use crate::kernel::{Kernel, SliceKey, StateSpace};
use crate::model::{is_admissible, Action};
use crate::solver::ValueTable;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum PolicyError {
    #[error("downlink region is not an up-set in x: {0:?}")]
    NotUpSet(Vec<UpSetViolation>),
    #[error("this check needs a {0} grid")]
    WrongGrid(&'static str),
    #[error("value table and kernel disagree: {0}")]
    Mismatch(String),
}

/// Non-downlink nodes found above the first downlink node of one `(tau, b)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpSetViolation {
    pub tau: u32,
    pub b: u32,
    pub nodes: Vec<usize>,
}

/// Index of the first `Downlink` along ascending x, or the indices that break
/// the `[other.., Downlink..]` pattern.
pub fn threshold_index(actions: &[Action]) -> Result<Option<usize>, Vec<usize>> {
    let Some(first) = actions.iter().position(|&a| a == Action::Downlink) else {
        return Ok(None);
    };
    let bad: Vec<usize> = (first..actions.len())
        .filter(|&i| actions[i] != Action::Downlink)
        .collect();
    if bad.is_empty() {
        Ok(Some(first))
    } else {
        Err(bad)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdEntry {
    pub tau: u32,
    pub b: u32,
    /// First grid node where downlink is chosen; `None` means never.
    pub x_star: Option<f64>,
    /// Zero crossing of `Q(.;2) - min(Q(.;0), Q(.;1))` interpolated between
    /// the last non-downlink node and `x_star`.
    pub refined_x_star: Option<f64>,
}

/// Downlink iff `y = 1` and `|x|` reaches the refined threshold of
/// `(tau, b)`; otherwise the greedy choice between idle and uplink at the
/// nearest folded node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdPolicy {
    /// Non-negative nodes the policy was extracted on.
    pub grid: Grid,
    pub battery_cap: u32,
    /// Indexed by `tau * (battery_cap + 1) + b`.
    pub thresholds: Vec<ThresholdEntry>,
    /// Idle/uplink choice per folded state, laid out like a folded value table.
    pub below_rule: Vec<Action>,
    /// Where the source solve came from (config hash or free text).
    pub grid_ref: String,
}

impl ThresholdPolicy {
    fn space(&self) -> StateSpace {
        StateSpace::new(&self.grid, self.battery_cap)
    }

    pub fn tau_max(&self) -> u32 {
        self.grid.tau_max
    }

    pub fn threshold(&self, tau: u32, b: u32) -> Option<f64> {
        self.entry(tau, b).x_star
    }

    pub fn entry(&self, tau: u32, b: u32) -> &ThresholdEntry {
        let tau = tau.min(self.tau_max());
        &self.thresholds[tau as usize * (self.battery_cap as usize + 1) + b as usize]
    }

    /// Decision at `(x_abs, tau, y, b)` with `x_abs >= 0`. Ages beyond the
    /// grid use the last retained age.
    pub fn decide_folded(&self, x_abs: f64, tau: u32, y: u8, b: u32) -> Action {
        let tau = tau.min(self.tau_max());
        if y == 1 {
            if let Some(xs) = self.entry(tau, b).refined_x_star {
                if x_abs >= xs {
                    return Action::Downlink;
                }
            }
        }
        let i = self.grid.nearest(x_abs);
        self.below_rule[self.space().index(i, SliceKey { tau, y, b })]
    }

    pub fn to_csv(&self) -> String {
        let fmt = |v: Option<f64>| v.map_or_else(|| "inf".to_string(), |x| x.to_string());
        let mut out = String::from("tau,b,x_star,refined_x_star\n");
        for e in &self.thresholds {
            out.push_str(&format!(
                "{},{},{},{}\n",
                e.tau,
                e.b,
                fmt(e.x_star),
                fmt(e.refined_x_star)
            ));
        }
        out
    }
}

/// Full-line decision rule obtained from a folded policy via `x -> |x|`.
#[derive(Debug, Clone, PartialEq)]
pub struct UnfoldedPolicy {
    pub folded: ThresholdPolicy,
}

impl UnfoldedPolicy {
    pub fn decide(&self, x: f64, tau: u32, y: u8, b: u32) -> Action {
        self.folded.decide_folded(x.abs(), tau, y, b)
    }
}

pub fn unfold_policy(folded: &ThresholdPolicy) -> UnfoldedPolicy {
    UnfoldedPolicy {
        folded: folded.clone(),
    }
}

/// Non-negative half of a table's grid, with the table index of each node.
fn folded_view(table: &ValueTable) -> (Grid, Vec<usize>) {
    let g = table.grid.folded_half();
    let z = table.grid.zero_index();
    (g, (0..table.grid.len() - z).map(|i| z + i).collect())
}

/// Reads the threshold surface off a solved table. Symmetric tables are read
/// on their non-negative half.
pub fn extract_thresholds(
    table: &ValueTable,
    grid_ref: impl Into<String>,
) -> Result<ThresholdPolicy, PolicyError> {
    let (grid, nodes) = folded_view(table);
    let space = table.space;
    let fspace = StateSpace::new(&grid, space.battery_cap);

    let mut below_rule = vec![Action::Idle; fspace.len()];
    for slice in fspace.slices() {
        for (fi, &ti) in nodes.iter().enumerate() {
            let q = table.q[space.index(ti, slice)];
            let pick = if is_admissible(Action::Uplink, slice.y, slice.b) && q[1] < q[0] {
                Action::Uplink
            } else {
                Action::Idle
            };
            below_rule[fspace.index(fi, slice)] = pick;
        }
    }

    let mut thresholds = Vec::new();
    let mut violations = Vec::new();
    for tau in 0..=space.tau_max {
        for b in 0..=space.battery_cap {
            let slice = SliceKey { tau, y: 1, b };
            let actions: Vec<Action> = nodes.iter().map(|&ti| table.action(ti, slice)).collect();
            match threshold_index(&actions) {
                Err(bad) => violations.push(UpSetViolation { tau, b, nodes: bad }),
                Ok(None) => thresholds.push(ThresholdEntry {
                    tau,
                    b,
                    x_star: None,
                    refined_x_star: None,
                }),
                Ok(Some(k)) => {
                    let gap = |fi: usize| {
                        let q = table.q[space.index(nodes[fi], slice)];
                        q[2] - q[0].min(q[1])
                    };
                    let refined = if k == 0 {
                        grid.x_nodes[0]
                    } else {
                        let (before, after) = (gap(k - 1), gap(k));
                        let frac = if before - after > 0.0 {
                            (before / (before - after)).clamp(0.0, 1.0)
                        } else {
                            1.0
                        };
                        grid.x_nodes[k - 1] + frac * grid.dx
                    };
                    thresholds.push(ThresholdEntry {
                        tau,
                        b,
                        x_star: Some(grid.x_nodes[k]),
                        refined_x_star: Some(refined),
                    });
                }
            }
        }
    }
    if !violations.is_empty() {
        return Err(PolicyError::NotUpSet(violations));
    }
    Ok(ThresholdPolicy {
        grid,
        battery_cap: space.battery_cap,
        thresholds,
        below_rule,
        grid_ref: grid_ref.into(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct ViolationStats {
    pub count: usize,
    /// Largest violation magnitude beyond the tolerance check (0 when none).
    pub worst: f64,
}

impl ViolationStats {
    fn record(&mut self, magnitude: f64) {
        self.count += 1;
        self.worst = self.worst.max(magnitude);
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvennessCheck {
    pub max_dev: f64,
    pub mismatched_actions: usize,
    pub tol: f64,
    pub pass: bool,
}

/// `max |V(x) - V(-x)|` and greedy-action agreement on a symmetric table.
pub fn verify_evenness(table: &ValueTable, tol: f64) -> Result<EvennessCheck, PolicyError> {
    if table.grid.folded {
        return Err(PolicyError::WrongGrid("symmetric"));
    }
    let n = table.space.n_x;
    let mut max_dev = 0.0_f64;
    let mut mismatched_actions = 0;
    for slice in table.space.slices() {
        for i in 0..n / 2 {
            let m = table.grid.mirror(i);
            max_dev = max_dev.max((table.value(i, slice) - table.value(m, slice)).abs());
            if table.action(i, slice) != table.action(m, slice) {
                mismatched_actions += 1;
            }
        }
    }
    Ok(EvennessCheck {
        max_dev,
        mismatched_actions,
        tol,
        pass: max_dev <= tol && mismatched_actions == 0,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MonotonicityCheck {
    /// Adjacent pairs with `V(x_{i+1}) < V(x_i) - tol`.
    pub x: ViolationStats,
    /// Pairs with `V(b + 1) > V(b) + tol`.
    pub b: ViolationStats,
    pub tol: f64,
    pub pass_x: bool,
    pub pass_b: bool,
}

/// Non-decreasing in x, non-increasing in b.
pub fn verify_monotonicity(table: &ValueTable, tol: f64) -> Result<MonotonicityCheck, PolicyError> {
    if !table.grid.folded {
        return Err(PolicyError::WrongGrid("folded"));
    }
    let space = table.space;
    let mut x = ViolationStats::default();
    let mut b = ViolationStats::default();
    for slice in space.slices() {
        let vs = table.slice_values(slice);
        for w in vs.windows(2) {
            if w[1] < w[0] - tol {
                x.record(w[0] - w[1]);
            }
        }
        if slice.b < space.battery_cap {
            let up = SliceKey {
                b: slice.b + 1,
                ..slice
            };
            for i in 0..space.n_x {
                let (lo, hi) = (table.value(i, slice), table.value(i, up));
                if hi > lo + tol {
                    b.record(hi - lo);
                }
            }
        }
    }
    Ok(MonotonicityCheck {
        pass_x: x.count == 0,
        pass_b: b.count == 0,
        x,
        b,
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UpSetCount {
    pub tau: u32,
    pub b: u32,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ThresholdCheck {
    /// `(tau, b)` pairs whose downlink region is not an up-set.
    pub upset_violations: Vec<UpSetCount>,
    /// `Q(.;2) - Q(.;1)` increasing by more than `tol` between adjacent nodes.
    pub c1: ViolationStats,
    /// `Q(.;2) - Q(.;0)` exceeding `tol` after having been `<= 0` at a
    /// smaller x.
    pub c2: ViolationStats,
    pub tol: f64,
    pub pass_upset: bool,
    pub pass_c1: bool,
    pub pass_c2: bool,
}

pub fn verify_threshold_structure(
    table: &ValueTable,
    tol: f64,
) -> Result<ThresholdCheck, PolicyError> {
    if !table.grid.folded {
        return Err(PolicyError::WrongGrid("folded"));
    }
    let space = table.space;
    let n = space.n_x;
    let mut upset_violations = Vec::new();
    let mut c1 = ViolationStats::default();
    let mut c2 = ViolationStats::default();
    for tau in 0..=space.tau_max {
        for b in 0..=space.battery_cap {
            let slice = SliceKey { tau, y: 1, b };
            let actions: Vec<Action> = (0..n).map(|i| table.action(i, slice)).collect();
            if let Err(bad) = threshold_index(&actions) {
                upset_violations.push(UpSetCount {
                    tau,
                    b,
                    count: bad.len(),
                });
            }
            let q = |i: usize, u: Action| table.q_value(i, slice, u);
            if b > 0 {
                for i in 0..n.saturating_sub(1) {
                    let d0 = q(i, Action::Downlink) - q(i, Action::Uplink);
                    let d1 = q(i + 1, Action::Downlink) - q(i + 1, Action::Uplink);
                    if d1 > d0 + tol {
                        c1.record(d1 - d0);
                    }
                }
            }
            let mut entered = false;
            for i in 0..n {
                let d = q(i, Action::Downlink) - q(i, Action::Idle);
                if entered && d > tol {
                    c2.record(d);
                }
                entered |= d <= 0.0;
            }
        }
    }
    Ok(ThresholdCheck {
        pass_upset: upset_violations.is_empty(),
        pass_c1: c1.count == 0,
        pass_c2: c2.count == 0,
        upset_violations,
        c1,
        c2,
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DominanceCheck {
    /// Pairs `x' >= x` with `row(x') . V < row(x) . V - tol`, over all slices.
    pub violations: ViolationStats,
    /// Whether the supplied values were non-decreasing in x (within `tol`).
    pub precondition_holds: bool,
    pub tol: f64,
    pub pass: bool,
}

/// Checks that drift rows of larger x yield larger expected values for a
/// value function that is non-decreasing in x. Reset rows do not depend on
/// the source node and are skipped.
pub fn verify_kernel_dominance(
    kernel: &Kernel,
    v: &[f64],
    tol: f64,
) -> Result<DominanceCheck, PolicyError> {
    if !kernel.grid.folded {
        return Err(PolicyError::WrongGrid("folded"));
    }
    let space = kernel.space();
    if v.len() != space.len() {
        return Err(PolicyError::Mismatch(format!(
            "{} values for {} states",
            v.len(),
            space.len()
        )));
    }
    let n = space.n_x;
    let mut violations = ViolationStats::default();
    let mut precondition_holds = true;
    for s in 0..space.n_slices() {
        let vs = &v[s * n..(s + 1) * n];
        precondition_holds &= vs.windows(2).all(|w| w[1] >= w[0] - tol);
        let ev: Vec<f64> = (0..n)
            .map(|i| kernel.drift_row(i).iter().zip(vs).map(|(p, x)| p * x).sum())
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                if ev[j] < ev[i] - tol {
                    violations.record(ev[i] - ev[j]);
                }
            }
        }
    }
    Ok(DominanceCheck {
        pass: violations.count == 0,
        violations,
        precondition_holds,
        tol,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FoldCheck {
    /// `max |V_full(x, .) - V_folded(|x|, .)|` over all states.
    pub max_dev: f64,
    /// Nodes where the unfolded folded policy differs from the full one.
    pub mismatched_actions: usize,
    pub tol: f64,
    pub pass: bool,
}

/// Compares a symmetric-grid table with a folded-grid table of the same
/// half-grid.
pub fn verify_fold_equivalence(
    full: &ValueTable,
    folded: &ValueTable,
    tol: f64,
) -> Result<FoldCheck, PolicyError> {
    if full.grid.folded {
        return Err(PolicyError::WrongGrid("symmetric"));
    }
    if !folded.grid.folded {
        return Err(PolicyError::WrongGrid("folded"));
    }
    if full.grid.folded_half() != folded.grid || full.space.battery_cap != folded.space.battery_cap
    {
        return Err(PolicyError::Mismatch(
            "folded grid is not the non-negative half of the full grid".into(),
        ));
    }
    let mut max_dev = 0.0_f64;
    let mut mismatched_actions = 0;
    for slice in full.space.slices() {
        for i in 0..full.space.n_x {
            let f = full.grid.fold_index(i);
            max_dev = max_dev.max((full.value(i, slice) - folded.value(f, slice)).abs());
            if full.action(i, slice) != folded.action(f, slice) {
                mismatched_actions += 1;
            }
        }
    }
    Ok(FoldCheck {
        max_dev,
        mismatched_actions,
        tol,
        pass: max_dev <= tol && mismatched_actions == 0,
    })
}

/// How `x*` moves with age and battery. Reported, not asserted.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct ThresholdTrends {
    pub tau_increases: usize,
    pub tau_decreases: usize,
    pub b_increases: usize,
    pub b_decreases: usize,
}

pub fn threshold_trends(policy: &ThresholdPolicy) -> ThresholdTrends {
    let key = |v: Option<f64>| v.unwrap_or(f64::INFINITY);
    let mut t = ThresholdTrends::default();
    let tally = |a: f64, b: f64, inc: &mut usize, dec: &mut usize| {
        if b > a {
            *inc += 1;
        } else if b < a {
            *dec += 1;
        }
    };
    for tau in 0..=policy.tau_max() {
        for b in 0..=policy.battery_cap {
            let here = key(policy.threshold(tau, b));
            if tau < policy.tau_max() {
                tally(
                    here,
                    key(policy.threshold(tau + 1, b)),
                    &mut t.tau_increases,
                    &mut t.tau_decreases,
                );
            }
            if b < policy.battery_cap {
                tally(
                    here,
                    key(policy.threshold(tau, b + 1)),
                    &mut t.b_increases,
                    &mut t.b_decreases,
                );
            }
        }
    }
    t
}

/// Everything `wncs verify` reports.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct StructureReport {
    pub evenness: Option<EvennessCheck>,
    pub fold: Option<FoldCheck>,
    pub monotonicity: Option<MonotonicityCheck>,
    pub threshold: Option<ThresholdCheck>,
    pub dominance: Option<DominanceCheck>,
    pub trends: Option<ThresholdTrends>,
}

impl StructureReport {
    pub fn all_pass(&self) -> bool {
        self.evenness.as_ref().is_none_or(|e| e.pass)
            && self.fold.as_ref().is_none_or(|f| f.pass)
            && self
                .monotonicity
                .as_ref()
                .is_none_or(|m| m.pass_x && m.pass_b)
            && self
                .threshold
                .as_ref()
                .is_none_or(|t| t.pass_upset && t.pass_c1 && t.pass_c2)
            && self.dominance.as_ref().is_none_or(|d| d.pass)
    }
}
