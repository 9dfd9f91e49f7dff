//! Discretized transition kernels for the original and folded MDPs.
//!
//! A kernel never stores a dense `(state, action) x state` matrix. Every
//! transition out of `(x_i, tau, y, b)` under action `u` is a short list of
//! [`Branch`]es: a probability weight, the deterministic next `(tau, y, b)`
//! slice, and which x-transition applies. Only two kinds of x-transition
//! exist:
//!
//! * `Drift`: the uncontrolled step `a * x + w`, one row per source node;
//! * `Reset { tau }`: a delivered control packet built from data of age `tau`,
//!   which leaves `N(0, eps_tau(tau))` independently of the source node.
//!
//! On a folded grid both are folded Gaussians, which is exactly the original
//! kernel pushed through `x -> |x|`.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::grid::{row_for, Grid, GridError};
use crate::model::{eps_tau_unchecked, Action, ModelError, ModelParams};

pub const KERNEL_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum KernelError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Grid(#[from] GridError),
    #[error("kernel artifact: {0}")]
    Artifact(String),
    #[error(transparent)]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// The discrete `(tau, y, b)` part of a state.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SliceKey {
    pub tau: u32,
    pub y: u8,
    pub b: u32,
}

/// Flat layout of `(x_i, tau, y, b)` states. Each `(tau, y, b)` slice is a
/// contiguous run of `n_x` entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StateSpace {
    pub n_x: usize,
    pub tau_max: u32,
    pub battery_cap: u32,
}

impl StateSpace {
    pub fn new(grid: &Grid, battery_cap: u32) -> Self {
        StateSpace {
            n_x: grid.len(),
            tau_max: grid.tau_max,
            battery_cap,
        }
    }

    pub fn n_slices(&self) -> usize {
        (self.tau_max as usize + 1) * 2 * (self.battery_cap as usize + 1)
    }

    pub fn len(&self) -> usize {
        self.n_slices() * self.n_x
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn slice_index(&self, key: SliceKey) -> usize {
        debug_assert!(key.tau <= self.tau_max && key.y <= 1 && key.b <= self.battery_cap);
        (key.tau as usize * 2 + key.y as usize) * (self.battery_cap as usize + 1) + key.b as usize
    }

    pub fn slice_key(&self, s: usize) -> SliceKey {
        let nb = self.battery_cap as usize + 1;
        let b = (s % nb) as u32;
        let y = ((s / nb) % 2) as u8;
        let tau = (s / nb / 2) as u32;
        SliceKey { tau, y, b }
    }

    pub fn index(&self, i: usize, key: SliceKey) -> usize {
        self.slice_index(key) * self.n_x + i
    }

    pub fn slices(&self) -> impl Iterator<Item = SliceKey> + '_ {
        (0..self.n_slices()).map(|s| self.slice_key(s))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum XMove {
    Drift,
    Reset { tau: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Branch {
    pub weight: f64,
    pub next: SliceKey,
    pub x_move: XMove,
}

#[derive(Debug, Clone)]
pub struct Kernel {
    pub params: ModelParams,
    pub grid: Grid,
    space: StateSpace,
    /// Row-major `n x n`, row `i` is the law of the next node from node `i`.
    drift: Vec<f64>,
    /// One row per age.
    reset: Vec<Vec<f64>>,
    /// Per slice, per action; `None` marks an inadmissible action.
    branches: Vec<[Option<Vec<Branch>>; 3]>,
}

impl Kernel {
    pub fn space(&self) -> StateSpace {
        self.space
    }

    pub fn drift_row(&self, i: usize) -> &[f64] {
        let n = self.space.n_x;
        &self.drift[i * n..(i + 1) * n]
    }

    pub fn reset_row(&self, tau: u32) -> &[f64] {
        &self.reset[tau as usize]
    }

    /// The x-transition row used by `x_move` from node `i`.
    pub fn row(&self, i: usize, x_move: XMove) -> &[f64] {
        match x_move {
            XMove::Drift => self.drift_row(i),
            XMove::Reset { tau } => self.reset_row(tau),
        }
    }

    pub fn branches(&self, slice: SliceKey, action: Action) -> Option<&[Branch]> {
        self.branches[self.space.slice_index(slice)][action.index()].as_deref()
    }

    /// Total next-state mass of `(x_i, slice)` under `action`.
    pub fn row_sum(&self, i: usize, slice: SliceKey, action: Action) -> Option<f64> {
        self.branches(slice, action).map(|bs| {
            bs.iter()
                .map(|br| br.weight * self.row(i, br.x_move).iter().sum::<f64>())
                .sum()
        })
    }

    /// With `|a| >= 1` the post-control variance keeps growing with age, so
    /// capping ages at `tau_max` is only an approximation.
    pub fn age_truncation_is_approximate(&self) -> bool {
        self.params.a.abs() >= 1.0
    }

    pub fn to_artifact(&self) -> KernelArtifact {
        let mut branches = Vec::new();
        for slice in self.space.slices() {
            for action in Action::ALL {
                for br in self.branches(slice, action).unwrap_or(&[]) {
                    branches.push(BranchRecord {
                        from: slice,
                        action,
                        branch: *br,
                    });
                }
            }
        }
        KernelArtifact {
            header: KernelHeader {
                schema_version: KERNEL_SCHEMA_VERSION,
                params: self.params.clone(),
                grid: self.grid.clone(),
                battery_cap: self.space.battery_cap,
                age_truncation_approximate: self.age_truncation_is_approximate(),
                decisions: KERNEL_DECISIONS.iter().map(|s| s.to_string()).collect(),
            },
            drift: FlatMatrix {
                rows: self.space.n_x,
                cols: self.space.n_x,
                data: self.drift.clone(),
            },
            reset: FlatMatrix {
                rows: self.reset.len(),
                cols: self.space.n_x,
                data: self.reset.concat(),
            },
            branches,
        }
    }

    pub fn write_json<W: Write>(&self, w: W) -> Result<(), KernelError> {
        serde_json::to_writer(w, &self.to_artifact())?;
        Ok(())
    }

    pub fn read_json<R: Read>(r: R) -> Result<Kernel, KernelError> {
        let art: KernelArtifact = serde_json::from_reader(r)?;
        Kernel::from_artifact(art)
    }

    pub fn from_artifact(art: KernelArtifact) -> Result<Kernel, KernelError> {
        let h = art.header;
        if h.schema_version != KERNEL_SCHEMA_VERSION {
            return Err(KernelError::Artifact(format!(
                "unsupported schema version {}",
                h.schema_version
            )));
        }
        h.params.validate()?;
        let space = StateSpace::new(&h.grid, h.battery_cap);
        let n = space.n_x;
        if art.drift.rows != n || art.drift.cols != n || art.drift.data.len() != n * n {
            return Err(KernelError::Artifact(
                "drift matrix shape does not match grid".into(),
            ));
        }
        let ages = space.tau_max as usize + 1;
        if art.reset.rows != ages || art.reset.cols != n || art.reset.data.len() != ages * n {
            return Err(KernelError::Artifact(
                "reset rows shape does not match grid".into(),
            ));
        }
        let mut branches = vec![[None, None, None]; space.n_slices()];
        for slice in space.slices() {
            for action in Action::ALL {
                if crate::model::is_admissible(action, slice.y, slice.b) {
                    branches[space.slice_index(slice)][action.index()] = Some(Vec::new());
                }
            }
        }
        for rec in art.branches {
            let SliceKey { tau, y, b } = rec.from;
            if tau > space.tau_max || y > 1 || b > space.battery_cap {
                return Err(KernelError::Artifact(format!(
                    "branch source {:?} outside state space",
                    rec.from
                )));
            }
            let slot = branches[space.slice_index(rec.from)][rec.action.index()]
                .as_mut()
                .ok_or_else(|| {
                    KernelError::Artifact(format!(
                        "branch for inadmissible action at {:?}",
                        rec.from
                    ))
                })?;
            slot.push(rec.branch);
        }
        Ok(Kernel {
            params: h.params,
            grid: h.grid,
            space,
            drift: art.drift.data,
            reset: art.reset.data.chunks(n).map(<[f64]>::to_vec).collect(),
            branches,
        })
    }
}

const KERNEL_DECISIONS: &[&str] = &[
    "gaussian rows are normalized densities, midpoint rule on interior nodes",
    "tail mass beyond the outermost half-cell is lumped onto the boundary node",
    "rows are renormalized to sum to one",
    "post-control variance is eps_tau(tau) = sigma2 * (1 - a^(2 tau + 2)) / (1 - a^2)",
    "ages saturate at tau_max",
];

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelHeader {
    pub schema_version: u32,
    pub params: ModelParams,
    pub grid: Grid,
    pub battery_cap: u32,
    pub age_truncation_approximate: bool,
    pub decisions: Vec<String>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FlatMatrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct BranchRecord {
    pub from: SliceKey,
    pub action: Action,
    #[serde(flatten)]
    pub branch: Branch,
}

/// Self-describing JSON form of a [`Kernel`].
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct KernelArtifact {
    pub header: KernelHeader,
    pub drift: FlatMatrix,
    pub reset: FlatMatrix,
    pub branches: Vec<BranchRecord>,
}

fn branches_for(
    params: &ModelParams,
    tau_max: u32,
    slice: SliceKey,
    action: Action,
) -> Vec<Branch> {
    let SliceKey { tau, y, b } = slice;
    let cap = params.battery_capacity;
    let aged = (tau + 1).min(tau_max);
    let mut out = Vec::new();
    let mut push = |weight: f64, next: SliceKey, x_move: XMove| {
        if weight > 0.0 {
            out.push(Branch {
                weight,
                next,
                x_move,
            });
        }
    };
    for (l, &pl) in params.harvest_probs.iter().enumerate() {
        let l = l as u32;
        match action {
            Action::Idle => {
                let nb = (b + l).min(cap);
                push(
                    pl,
                    SliceKey {
                        tau: aged,
                        y,
                        b: nb,
                    },
                    XMove::Drift,
                );
            }
            Action::Uplink => {
                let nb = (b + l - 1).min(cap);
                let p = params.p_uplink;
                push(
                    pl * p,
                    SliceKey {
                        tau: aged,
                        y,
                        b: nb,
                    },
                    XMove::Drift,
                );
                push(
                    pl * (1.0 - p),
                    SliceKey {
                        tau: 1,
                        y: 1,
                        b: nb,
                    },
                    XMove::Drift,
                );
            }
            Action::Downlink => {
                let nb = (b + l).min(cap);
                let p = params.p_downlink;
                push(
                    pl * p,
                    SliceKey {
                        tau: aged,
                        y: 1,
                        b: nb,
                    },
                    XMove::Drift,
                );
                push(
                    pl * (1.0 - p),
                    SliceKey {
                        tau: aged,
                        y: 0,
                        b: nb,
                    },
                    XMove::Reset { tau },
                );
            }
        }
    }
    out
}

/// Materializes the kernel for `grid` (symmetric grid: original MDP, folded
/// grid: folded MDP).
pub fn build_kernel(params: &ModelParams, grid: &Grid) -> Result<Kernel, KernelError> {
    params.validate()?;
    let space = StateSpace::new(grid, params.battery_capacity);
    let n = grid.len();

    let drift_rows: Vec<Vec<f64>> = grid
        .x_nodes
        .par_iter()
        .map(|&x| row_for(params.a * x, params.sigma2, grid))
        .collect::<Result<_, _>>()?;
    let drift = drift_rows.concat();
    debug_assert_eq!(drift.len(), n * n);

    let reset = (0..=grid.tau_max)
        .map(|t| row_for(0.0, eps_tau_unchecked(t, params.a, params.sigma2), grid))
        .collect::<Result<Vec<_>, _>>()?;

    let branches = space
        .slices()
        .map(|slice| {
            Action::ALL.map(|u| {
                crate::model::is_admissible(u, slice.y, slice.b)
                    .then(|| branches_for(params, grid.tau_max, slice, u))
            })
        })
        .collect();

    Ok(Kernel {
        params: params.clone(),
        grid: grid.clone(),
        space,
        drift,
        reset,
        branches,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::{fold_row, gaussian_row, Grid};

    fn small() -> (ModelParams, Grid) {
        let p = ModelParams::default();
        let g = Grid::symmetric(6.0, 41, 6).unwrap();
        (p, g)
    }

    #[test]
    fn slice_layout_roundtrip() {
        let space = StateSpace {
            n_x: 7,
            tau_max: 4,
            battery_cap: 3,
        };
        for s in 0..space.n_slices() {
            assert_eq!(space.slice_index(space.slice_key(s)), s);
        }
        assert_eq!(space.len(), 7 * 5 * 2 * 4);
    }

    #[test]
    fn admissibility_of_branches() {
        let (p, g) = small();
        let k = build_kernel(&p, &g).unwrap();
        for slice in k.space().slices() {
            assert_eq!(k.branches(slice, Action::Uplink).is_some(), slice.b > 0);
            assert_eq!(k.branches(slice, Action::Downlink).is_some(), slice.y == 1);
            assert!(k.branches(slice, Action::Idle).is_some());
        }
    }

    #[test]
    fn branch_structure() {
        let (p, g) = small();
        let k = build_kernel(&p, &g).unwrap();
        let s = SliceKey { tau: 6, y: 1, b: 3 };
        let up = k.branches(s, Action::Uplink).unwrap();
        // Three harvest levels, each with a drop and a success branch.
        assert_eq!(up.len(), 6);
        assert_eq!(up[0].next, SliceKey { tau: 6, y: 1, b: 2 });
        assert_eq!(up[1].next, SliceKey { tau: 1, y: 1, b: 2 });
        assert_eq!(up[5].next, SliceKey { tau: 1, y: 1, b: 3 });
        let dn = k.branches(s, Action::Downlink).unwrap();
        assert_eq!(
            dn[1],
            Branch {
                weight: (1.0 / 3.0) * 0.8,
                next: SliceKey { tau: 6, y: 0, b: 3 },
                x_move: XMove::Reset { tau: 6 }
            }
        );
    }

    #[test]
    fn certain_drop_uplink_matches_idle_up_to_battery() {
        let (mut p, g) = small();
        p.p_uplink = 1.0;
        p.p_downlink = 1.0;
        let k = build_kernel(&p, &g).unwrap();
        let s = SliceKey { tau: 2, y: 0, b: 2 };
        let idle = k.branches(s, Action::Idle).unwrap();
        let up = k.branches(s, Action::Uplink).unwrap();
        assert_eq!(idle.len(), up.len());
        for (l, (i, u)) in idle.iter().zip(up).enumerate() {
            let l = l as u32;
            assert_eq!(i.weight, u.weight);
            assert_eq!(i.x_move, u.x_move);
            assert_eq!(i.next.tau, u.next.tau);
            assert_eq!(i.next.y, u.next.y);
            assert_eq!(i.next.b, (s.b + l).min(3));
            assert_eq!(u.next.b, (s.b + l - 1).min(3));
        }
    }

    #[test]
    fn perfect_downlink_resets_state() {
        let (mut p, g) = small();
        p.p_downlink = 0.0;
        let k = build_kernel(&p, &g).unwrap();
        for tau in 0..=6 {
            let s = SliceKey { tau, y: 1, b: 1 };
            let dn = k.branches(s, Action::Downlink).unwrap();
            assert!(dn
                .iter()
                .all(|b| b.x_move == XMove::Reset { tau } && b.next.y == 0));
            let want = gaussian_row(0.0, eps_tau_unchecked(tau, p.a, p.sigma2), &g).unwrap();
            for i in [0, 13, 40] {
                assert_eq!(k.row(i, dn[0].x_move), &want[..]);
            }
        }
    }

    #[test]
    fn symmetric_kernel_commutes_with_reflection() {
        let (p, g) = small();
        let k = build_kernel(&p, &g).unwrap();
        for i in 0..g.len() {
            let r = k.drift_row(i);
            let m = k.drift_row(g.mirror(i));
            for j in 0..g.len() {
                assert!((r[j] - m[g.mirror(j)]).abs() < 1e-15);
            }
        }
        for tau in 0..=6 {
            let r = k.reset_row(tau);
            for j in 0..g.len() {
                assert!((r[j] - r[g.mirror(j)]).abs() < 1e-15);
            }
        }
    }

    #[test]
    fn folded_kernel_is_pushforward_of_symmetric() {
        let (p, g) = small();
        let f = g.folded_half();
        let ks = build_kernel(&p, &g).unwrap();
        let kf = build_kernel(&p, &f).unwrap();
        for i in 0..f.len() {
            let pushed = fold_row(ks.drift_row(g.zero_index() + i), &g);
            for (a, b) in pushed.iter().zip(kf.drift_row(i)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        for tau in 0..=6 {
            let pushed = fold_row(ks.reset_row(tau), &g);
            for (a, b) in pushed.iter().zip(kf.reset_row(tau)) {
                assert!((a - b).abs() < 1e-9);
            }
        }
        // Same branch structure on both grids.
        for slice in ks.space().slices() {
            for u in Action::ALL {
                assert_eq!(ks.branches(slice, u), kf.branches(slice, u));
            }
        }
    }

    #[test]
    fn json_roundtrip() {
        let (p, g) = small();
        let k = build_kernel(&p, &g).unwrap();
        let mut buf = Vec::new();
        k.write_json(&mut buf).unwrap();
        let back = Kernel::read_json(&buf[..]).unwrap();
        assert_eq!(back.drift, k.drift);
        assert_eq!(back.reset, k.reset);
        assert_eq!(back.branches, k.branches);
        assert_eq!(back.grid, k.grid);
    }
}
