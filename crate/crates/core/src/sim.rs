//! Monte Carlo evaluation of scheduling policies on the continuous-state
//! system.
//!
//! Rollout `i` draws dynamics from stream `2i` and policy randomness from
//! stream `2i + 1` of a ChaCha8 generator seeded with the run seed, so results
//! do not depend on thread scheduling. Every step consumes the same four
//! dynamics draws (noise, harvest, uplink and downlink channel uniforms)
//! whether or not a channel is used, which keeps policies comparable under
//! common random numbers.

use std::fmt;
use std::str::FromStr;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Normal, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::model::{
    admissible_actions, battery_step, control_input, eps_tau_unchecked, is_admissible, plant_step,
    tau_step, y_step, Action, ModelError, ModelParams, State,
};
use crate::policy::UnfoldedPolicy;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("policy {policy} chose {action} at t={t} in state {state:?} (xhat={xhat})")]
    Inadmissible {
        policy: String,
        action: Action,
        t: usize,
        state: State,
        xhat: f64,
    },
    #[error("invalid simulation setting {name}: {reason}")]
    InvalidConfig { name: &'static str, reason: String },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// A decision rule over the true state. `rng` is the rollout's policy stream.
pub trait SchedulingPolicy: Sync {
    fn decide(&self, t: usize, state: &State, rng: &mut dyn RngCore) -> Action;
    fn name(&self) -> String;
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    NeverAct,
    /// Blocks of `k` steps alternate between uplink and downlink phases.
    Periodic(u32),
    GreedyUplink,
    RandomAdmissible,
}

pub const BASELINE_NAMES: &str = "never_act, periodic:<k>, greedy_uplink, random_admissible";

impl FromStr for Baseline {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let s = s.trim();
        let bad = || format!("unknown baseline '{s}'; valid names: {BASELINE_NAMES}");
        match s {
            "never_act" => Ok(Baseline::NeverAct),
            "greedy_uplink" => Ok(Baseline::GreedyUplink),
            "random_admissible" => Ok(Baseline::RandomAdmissible),
            "periodic" => Ok(Baseline::Periodic(1)),
            _ => {
                let k = s.strip_prefix("periodic:").or_else(|| {
                    s.strip_prefix("periodic(")
                        .and_then(|r| r.strip_suffix(')'))
                });
                match k.map(str::parse::<u32>) {
                    Some(Ok(k)) if k >= 1 => Ok(Baseline::Periodic(k)),
                    Some(_) => Err(format!("periodic needs a period k >= 1, got '{s}'")),
                    None => Err(bad()),
                }
            }
        }
    }
}

impl fmt::Display for Baseline {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Baseline::NeverAct => write!(f, "never_act"),
            Baseline::Periodic(k) => write!(f, "periodic:{k}"),
            Baseline::GreedyUplink => write!(f, "greedy_uplink"),
            Baseline::RandomAdmissible => write!(f, "random_admissible"),
        }
    }
}

impl SchedulingPolicy for Baseline {
    fn decide(&self, t: usize, s: &State, rng: &mut dyn RngCore) -> Action {
        match *self {
            Baseline::NeverAct => Action::Idle,
            Baseline::Periodic(k) => {
                let uplink_phase = (t / k as usize).is_multiple_of(2);
                if uplink_phase && s.b > 0 {
                    Action::Uplink
                } else if !uplink_phase && s.y == 1 {
                    Action::Downlink
                } else {
                    Action::Idle
                }
            }
            Baseline::GreedyUplink => {
                if s.y == 1 {
                    Action::Downlink
                } else if s.b > 0 {
                    Action::Uplink
                } else {
                    Action::Idle
                }
            }
            Baseline::RandomAdmissible => {
                let acts = admissible_actions(s.y, s.b);
                acts[rng.random_range(0..acts.len())]
            }
        }
    }

    fn name(&self) -> String {
        self.to_string()
    }
}

impl SchedulingPolicy for UnfoldedPolicy {
    fn decide(&self, _t: usize, s: &State, _rng: &mut dyn RngCore) -> Action {
        UnfoldedPolicy::decide(self, s.x, s.tau, s.y, s.b)
    }

    fn name(&self) -> String {
        "optimal".to_string()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", content = "value", rename_all = "snake_case")]
pub enum InitialState {
    StandardNormal,
    Fixed(f64),
}

impl InitialState {
    fn second_moment(self) -> f64 {
        match self {
            InitialState::StandardNormal => 1.0,
            InitialState::Fixed(x) => x * x,
        }
    }
}

/// How a delivered control packet moves the plant.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlantModel {
    /// Apply `v = -a * xhat`. The next state `a (x - xhat) + w` has variance
    /// `eps(tau)` unconditionally but depends on the current state.
    #[default]
    Exact,
    /// Draw the next state as `N(0, eps(tau))` independently of the current
    /// state, which is the transition law of the scheduling MDP. Uses the
    /// same noise draw, rescaled, so common random numbers are kept.
    IndependentReset,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SimConfig {
    pub horizon: usize,
    pub n_rollouts: usize,
    pub seed: u64,
    pub x0: InitialState,
    pub y0: u8,
    pub b0: u32,
    /// Keep step-by-step traces for the first this-many rollouts.
    pub trace_rollouts: usize,
    pub plant: PlantModel,
}

/// Steps needed for `beta^T <= 1e-6`.
pub fn default_horizon(beta: f64) -> usize {
    ((1e-6_f64).ln() / beta.ln()).ceil().max(1.0) as usize
}

impl SimConfig {
    pub fn new(params: &ModelParams, n_rollouts: usize, seed: u64) -> Self {
        SimConfig {
            horizon: default_horizon(params.beta),
            n_rollouts,
            seed,
            x0: InitialState::StandardNormal,
            y0: 0,
            b0: params.battery_capacity,
            trace_rollouts: 0,
            plant: PlantModel::Exact,
        }
    }

    pub fn validate(&self, params: &ModelParams) -> Result<(), SimError> {
        let bad = |name, reason: &str| {
            Err(SimError::InvalidConfig {
                name,
                reason: reason.to_string(),
            })
        };
        if self.horizon < 1 {
            return bad("horizon", "must be at least 1");
        }
        if self.n_rollouts < 1 {
            return bad("n_rollouts", "must be at least 1");
        }
        if self.y0 > 1 {
            return bad("y0", "must be 0 or 1");
        }
        if self.b0 > params.battery_capacity {
            return bad("b0", "exceeds the battery capacity");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub x: f64,
    pub xhat: f64,
    pub tau: u32,
    pub y: u8,
    pub b: u32,
    pub u: Action,
    /// Whether the activated channel delivered; false when idle.
    pub delivered: bool,
    /// `beta^t x(t)^2`.
    pub cost: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutResult {
    pub discounted_cost: f64,
    /// Indexed by action.
    pub action_counts: [usize; 3],
    pub uplink_deliveries: usize,
    pub downlink_deliveries: usize,
    pub mean_age: f64,
    pub mean_battery: f64,
    pub min_battery: u32,
    pub max_battery: u32,
    pub trace: Option<Vec<TraceRow>>,
}

fn rollout_rngs(seed: u64, index: usize) -> (ChaCha8Rng, ChaCha8Rng) {
    let mut dynamics = ChaCha8Rng::seed_from_u64(seed);
    dynamics.set_stream(2 * index as u64);
    let mut policy = ChaCha8Rng::seed_from_u64(seed);
    policy.set_stream(2 * index as u64 + 1);
    (dynamics, policy)
}

/// Runs rollout `index` of `config`.
pub fn simulate_rollout(
    policy: &dyn SchedulingPolicy,
    params: &ModelParams,
    config: &SimConfig,
    index: usize,
) -> Result<RolloutResult, SimError> {
    let (mut dyn_rng, mut pol_rng) = rollout_rngs(config.seed, index);
    let noise = Normal::new(0.0, params.sigma2.sqrt()).map_err(|e| SimError::InvalidConfig {
        name: "sigma2",
        reason: e.to_string(),
    })?;
    let harvest =
        WeightedIndex::new(&params.harvest_probs).map_err(|e| SimError::InvalidConfig {
            name: "harvest_probs",
            reason: e.to_string(),
        })?;

    let x0 = match config.x0 {
        InitialState::StandardNormal => dyn_rng.sample::<f64, _>(StandardNormal),
        InitialState::Fixed(x) => x,
    };
    let mut s = State {
        x: x0,
        tau: 0,
        y: config.y0,
        b: config.b0,
    };
    let mut xhat = 0.0;
    let mut trace = (index < config.trace_rollouts).then(|| Vec::with_capacity(config.horizon));
    let mut out = RolloutResult {
        discounted_cost: 0.0,
        action_counts: [0; 3],
        uplink_deliveries: 0,
        downlink_deliveries: 0,
        mean_age: 0.0,
        mean_battery: 0.0,
        min_battery: s.b,
        max_battery: s.b,
        trace: None,
    };
    let (mut age_sum, mut battery_sum) = (0.0, 0.0);
    let mut discount = 1.0;

    for t in 0..config.horizon {
        let u = policy.decide(t, &s, &mut pol_rng);
        if !is_admissible(u, s.y, s.b) {
            return Err(SimError::Inadmissible {
                policy: policy.name(),
                action: u,
                t,
                state: s,
                xhat,
            });
        }
        let w = noise.sample(&mut dyn_rng);
        let ell = harvest.sample(&mut dyn_rng) as u32;
        let up_ok = dyn_rng.random::<f64>() >= params.p_uplink;
        let down_ok = dyn_rng.random::<f64>() >= params.p_downlink;
        let delivered = match u {
            Action::Idle => false,
            Action::Uplink => up_ok,
            Action::Downlink => down_ok,
        };

        let cost = discount * s.x * s.x;
        out.discounted_cost += cost;
        out.action_counts[u.index()] += 1;
        age_sum += s.tau as f64;
        battery_sum += s.b as f64;
        if let Some(tr) = trace.as_mut() {
            tr.push(TraceRow {
                t,
                x: s.x,
                xhat,
                tau: s.tau,
                y: s.y,
                b: s.b,
                u,
                delivered,
                cost,
            });
        }

        let x_next = match config.plant {
            PlantModel::IndependentReset if u == Action::Downlink && delivered => {
                w * (eps_tau_unchecked(s.tau, params.a, params.sigma2) / params.sigma2).sqrt()
            }
            _ => plant_step(
                s.x,
                params.a,
                control_input(xhat, params.a, u, delivered),
                w,
            ),
        };
        // The controller propagates its estimate open loop and refreshes it
        // from each delivered uplink sample.
        xhat = if u == Action::Uplink && delivered {
            params.a * s.x
        } else {
            params.a * xhat
        };
        match u {
            Action::Uplink if delivered => out.uplink_deliveries += 1,
            Action::Downlink if delivered => out.downlink_deliveries += 1,
            _ => {}
        }
        s = State {
            x: x_next,
            tau: tau_step(s.tau, u, delivered),
            y: y_step(s.y, u, delivered)?,
            b: battery_step(s.b, ell, u, params.battery_capacity)?,
        };
        out.min_battery = out.min_battery.min(s.b);
        out.max_battery = out.max_battery.max(s.b);
        discount *= params.beta;
    }

    let steps = config.horizon as f64;
    out.mean_age = age_sum / steps;
    out.mean_battery = battery_sum / steps;
    out.trace = trace;
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostEstimate {
    pub policy: String,
    pub mean: f64,
    pub se: f64,
    pub n_rollouts: usize,
    pub horizon: usize,
    pub seed: u64,
    /// Bound on the discounted cost beyond the horizon, or `None` when the
    /// plant is not stable and no bound is available.
    pub truncation_bound: Option<f64>,
    pub diagnostics: Diagnostics,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Diagnostics {
    /// Fraction of steps per action.
    pub action_fractions: [f64; 3],
    pub uplink_delivery_rate: f64,
    pub downlink_delivery_rate: f64,
    pub mean_age: f64,
    pub mean_battery: f64,
    pub min_battery: u32,
    pub max_battery: u32,
}

/// `beta^T S / (1 - beta)` with `S = E[x0^2] + sigma^2 / (1 - a^2)`, which
/// bounds `E[x(t)^2]` for every policy when `|a| < 1`: idling maps `m` to
/// `a^2 m + sigma^2 <= S`, and a reset gives `eps(tau) <= S`.
pub fn truncation_bound(params: &ModelParams, config: &SimConfig) -> Option<f64> {
    let a2 = params.a * params.a;
    if a2 >= 1.0 {
        return None;
    }
    let s = config.x0.second_moment() + params.sigma2 / (1.0 - a2);
    Some(params.beta.powi(config.horizon as i32) * s / (1.0 - params.beta))
}

/// Mean and standard error over `n_rollouts` rollouts, plus traces of the
/// first `trace_rollouts`. Reduction is in rollout order.
pub fn estimate_cost(
    policy: &dyn SchedulingPolicy,
    params: &ModelParams,
    config: &SimConfig,
) -> Result<(CostEstimate, Vec<RolloutResult>), SimError> {
    config.validate(params)?;
    let results: Vec<RolloutResult> = (0..config.n_rollouts)
        .into_par_iter()
        .map(|i| simulate_rollout(policy, params, config, i))
        .collect::<Result<_, _>>()?;

    let n = results.len() as f64;
    let mean = results.iter().map(|r| r.discounted_cost).sum::<f64>() / n;
    let var = if results.len() > 1 {
        results
            .iter()
            .map(|r| (r.discounted_cost - mean).powi(2))
            .sum::<f64>()
            / (n - 1.0)
    } else {
        0.0
    };

    let steps = n * config.horizon as f64;
    let mut counts = [0usize; 3];
    for r in &results {
        for (c, rc) in counts.iter_mut().zip(r.action_counts) {
            *c += rc;
        }
    }
    let rate = |delivered: usize, tried: usize| {
        if tried == 0 {
            0.0
        } else {
            delivered as f64 / tried as f64
        }
    };
    let diagnostics = Diagnostics {
        action_fractions: counts.map(|c| c as f64 / steps),
        uplink_delivery_rate: rate(results.iter().map(|r| r.uplink_deliveries).sum(), counts[1]),
        downlink_delivery_rate: rate(
            results.iter().map(|r| r.downlink_deliveries).sum(),
            counts[2],
        ),
        mean_age: results.iter().map(|r| r.mean_age).sum::<f64>() / n,
        mean_battery: results.iter().map(|r| r.mean_battery).sum::<f64>() / n,
        min_battery: results.iter().map(|r| r.min_battery).min().unwrap_or(0),
        max_battery: results.iter().map(|r| r.max_battery).max().unwrap_or(0),
    };

    let estimate = CostEstimate {
        policy: policy.name(),
        mean,
        se: (var / n).sqrt(),
        n_rollouts: config.n_rollouts,
        horizon: config.horizon,
        seed: config.seed,
        truncation_bound: truncation_bound(params, config),
        diagnostics,
    };
    Ok((estimate, results))
}

/// `sum_{t<T} beta^t E[x(t)^2]` when no packet is ever sent.
pub fn never_act_series(params: &ModelParams, config: &SimConfig) -> f64 {
    let a2 = params.a * params.a;
    let m0 = config.x0.second_moment();
    let mut second_moment = m0;
    let mut total = 0.0;
    let mut discount = 1.0;
    for _ in 0..config.horizon {
        total += discount * second_moment;
        second_moment = a2 * second_moment + params.sigma2;
        discount *= params.beta;
    }
    total
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::eps_tau;
    use proptest::prelude::{any, prop_assert, proptest, ProptestConfig};

    fn cfg(params: &ModelParams, n: usize, seed: u64) -> SimConfig {
        SimConfig::new(params, n, seed)
    }

    #[test]
    fn baseline_names_roundtrip() {
        for b in [
            Baseline::NeverAct,
            Baseline::Periodic(3),
            Baseline::GreedyUplink,
            Baseline::RandomAdmissible,
        ] {
            assert_eq!(b.to_string().parse::<Baseline>().unwrap(), b);
        }
        assert_eq!(
            "periodic(2)".parse::<Baseline>().unwrap(),
            Baseline::Periodic(2)
        );
        assert!("periodic:0".parse::<Baseline>().is_err());
        let err = "optimal_ish".parse::<Baseline>().unwrap_err();
        assert!(err.contains("greedy_uplink"));
    }

    #[test]
    fn baseline_decisions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let st = |y, b| State {
            x: 0.3,
            tau: 2,
            y,
            b,
        };
        assert_eq!(
            Baseline::GreedyUplink.decide(0, &st(1, 0), &mut rng),
            Action::Downlink
        );
        assert_eq!(
            Baseline::GreedyUplink.decide(0, &st(0, 2), &mut rng),
            Action::Uplink
        );
        assert_eq!(
            Baseline::GreedyUplink.decide(0, &st(0, 0), &mut rng),
            Action::Idle
        );
        for y in 0..2 {
            for b in 0..4 {
                assert_eq!(
                    Baseline::NeverAct.decide(7, &st(y, b), &mut rng),
                    Action::Idle
                );
            }
        }
        for _ in 0..100 {
            assert_eq!(
                Baseline::RandomAdmissible.decide(0, &st(0, 0), &mut rng),
                Action::Idle
            );
        }
        let p = Baseline::Periodic(2);
        let seq: Vec<Action> = (0..8).map(|t| p.decide(t, &st(1, 1), &mut rng)).collect();
        use Action::*;
        assert_eq!(
            seq,
            [Uplink, Uplink, Downlink, Downlink, Uplink, Uplink, Downlink, Downlink]
        );
        assert_eq!(p.decide(0, &st(1, 0), &mut rng), Idle);
        assert_eq!(p.decide(2, &st(0, 3), &mut rng), Idle);
    }

    #[test]
    fn random_admissible_covers_all_actions() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut seen = [0usize; 3];
        for _ in 0..3000 {
            seen[Baseline::RandomAdmissible
                .decide(
                    0,
                    &State {
                        x: 0.0,
                        tau: 1,
                        y: 1,
                        b: 2,
                    },
                    &mut rng,
                )
                .index()] += 1;
        }
        for c in seen {
            assert!((c as f64 - 1000.0).abs() < 150.0, "{seen:?}");
        }
    }

    struct Always(Action);
    impl SchedulingPolicy for Always {
        fn decide(&self, _: usize, _: &State, _: &mut dyn RngCore) -> Action {
            self.0
        }
        fn name(&self) -> String {
            format!("always_{}", self.0)
        }
    }

    #[test]
    fn inadmissible_choice_is_reported_with_state() {
        let p = ModelParams::default();
        let c = cfg(&p, 1, 0);
        match simulate_rollout(&Always(Action::Downlink), &p, &c, 0) {
            Err(SimError::Inadmissible {
                t: 0,
                state,
                action: Action::Downlink,
                ..
            }) => assert_eq!(state.y, 0),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn silent_plant_costs_nothing() {
        let mut p = ModelParams::default();
        p.sigma2 = 1e-300;
        let mut c = cfg(&p, 20, 3);
        c.x0 = InitialState::Fixed(0.0);
        for b in [
            Baseline::NeverAct,
            Baseline::GreedyUplink,
            Baseline::RandomAdmissible,
        ] {
            let (est, _) = estimate_cost(&b, &p, &c).unwrap();
            assert!(est.mean < 1e-250, "{}", est.mean);
        }
    }

    #[test]
    fn myopic_cost_is_initial_state() {
        let mut p = ModelParams::default();
        p.beta = 1e-12;
        let c = cfg(&p, 50, 4);
        assert_eq!(c.horizon, 1);
        let (_, rs) = estimate_cost(&Baseline::GreedyUplink, &p, &c).unwrap();
        for (i, r) in rs.iter().enumerate() {
            let (mut rng, _) = rollout_rngs(4, i);
            let x0: f64 = rng.sample(StandardNormal);
            assert_eq!(r.discounted_cost, x0 * x0);
        }
    }

    #[test]
    fn never_act_matches_series() {
        let p = ModelParams::default();
        let c = cfg(&p, 20_000, 11);
        let (est, _) = estimate_cost(&Baseline::NeverAct, &p, &c).unwrap();
        let want = never_act_series(&p, &c);
        assert!(
            (est.mean - want).abs() < 3.0 * est.se,
            "{} vs {want} (se {})",
            est.mean,
            est.se
        );
    }

    #[test]
    fn never_act_series_closed_form() {
        let p = ModelParams::default();
        let mut c = cfg(&p, 1, 0);
        c.x0 = InitialState::Fixed(1.5);
        let (a2, b, s2) = (p.a * p.a, p.beta, p.sigma2);
        let want: f64 = (0..c.horizon)
            .map(|t| {
                let t = t as i32;
                b.powi(t) * (a2.powi(t) * 2.25 + s2 * (1.0 - a2.powi(t)) / (1.0 - a2))
            })
            .sum();
        assert!((never_act_series(&p, &c) - want).abs() < 1e-10 * want);
    }

    #[test]
    fn same_seed_same_bits_across_thread_counts() {
        let p = ModelParams::default();
        let c = cfg(&p, 500, 77);
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(1)
            .build()
            .unwrap();
        let (serial, _) = pool
            .install(|| estimate_cost(&Baseline::RandomAdmissible, &p, &c))
            .unwrap();
        let (parallel, _) = estimate_cost(&Baseline::RandomAdmissible, &p, &c).unwrap();
        assert_eq!(serial, parallel);
        let mut other = c.clone();
        other.seed = 78;
        assert_ne!(
            estimate_cost(&Baseline::RandomAdmissible, &p, &other)
                .unwrap()
                .0
                .mean,
            serial.mean
        );
    }

    #[test]
    fn traced_trajectories_follow_the_model() {
        let p = ModelParams::default();
        let mut c = cfg(&p, 30, 5);
        c.trace_rollouts = 30;
        c.y0 = 1;
        c.b0 = 0;
        for b in [
            Baseline::RandomAdmissible,
            Baseline::GreedyUplink,
            Baseline::Periodic(3),
        ] {
            let (_, rs) = estimate_cost(&b, &p, &c).unwrap();
            for r in &rs {
                let tr = r.trace.as_ref().unwrap();
                assert_eq!(tr.len(), c.horizon);
                assert_eq!(r.action_counts.iter().sum::<usize>(), c.horizon);
                assert!(r.discounted_cost >= 0.0);
                let mut last_sample: Option<(usize, f64)> = None;
                for (k, row) in tr.iter().enumerate() {
                    assert!(row.b <= p.battery_capacity);
                    assert!(row.u != Action::Uplink || row.b > 0);
                    assert!(row.u != Action::Downlink || row.y == 1);
                    if let Some((s, xs)) = last_sample {
                        assert_eq!(row.tau as usize, k - s);
                        let want = p.a.powi(row.tau as i32) * xs;
                        assert!((row.xhat - want).abs() <= 1e-9 * want.abs().max(1e-300));
                    }
                    if k > 0 {
                        let prev = &tr[k - 1];
                        let uplinked = prev.u == Action::Uplink && prev.delivered;
                        assert_eq!(row.tau, if uplinked { 1 } else { prev.tau + 1 });
                    }
                    if row.u == Action::Uplink && row.delivered {
                        last_sample = Some((k, row.x));
                    }
                }
            }
        }
    }

    #[test]
    fn noiseless_downlink_zeroes_the_plant() {
        let mut p = ModelParams::default();
        p.sigma2 = 1e-300;
        p.p_uplink = 0.0;
        p.p_downlink = 0.0;
        let mut c = cfg(&p, 1, 0);
        c.x0 = InitialState::Fixed(2.0);
        c.trace_rollouts = 1;
        c.horizon = 6;
        let (_, rs) = estimate_cost(&Baseline::GreedyUplink, &p, &c).unwrap();
        let tr = rs[0].trace.as_ref().unwrap();
        // Uplink at t=0, downlink at t=1 applies -a * (a * x0).
        assert_eq!(tr[0].u, Action::Uplink);
        assert_eq!(tr[1].u, Action::Downlink);
        assert!(tr[2].x.abs() < 1e-140, "{}", tr[2].x);
    }

    #[test]
    fn post_downlink_variance_matches_eps() {
        let p = ModelParams::default();
        let mut c = cfg(&p, 20_000, 21);
        c.trace_rollouts = c.n_rollouts;
        c.horizon = 40;
        let (_, rs) = estimate_cost(&Baseline::Periodic(2), &p, &c).unwrap();
        let mut by_tau: std::collections::BTreeMap<u32, Vec<f64>> = Default::default();
        for r in &rs {
            let tr = r.trace.as_ref().unwrap();
            for k in 0..tr.len() - 1 {
                if tr[k].u == Action::Downlink && tr[k].delivered && tr[k].t > 0 {
                    by_tau.entry(tr[k].tau).or_default().push(tr[k + 1].x);
                }
            }
        }
        let mut checked = 0;
        for (tau, xs) in by_tau.iter().filter(|(_, xs)| xs.len() >= 10_000) {
            let var = xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64;
            let want = eps_tau(*tau as i64, p.a, p.sigma2).unwrap();
            assert!(
                (var / want - 1.0).abs() < 0.05,
                "tau {tau}: {var} vs {want}"
            );
            checked += 1;
        }
        assert!(
            checked >= 1,
            "{:?}",
            by_tau
                .iter()
                .map(|(t, v)| (*t, v.len()))
                .collect::<Vec<_>>()
        );
    }

    /// Downlinks only when the plant is far out.
    struct FarOut;
    impl SchedulingPolicy for FarOut {
        fn decide(&self, _: usize, s: &State, _: &mut dyn RngCore) -> Action {
            if s.y == 1 && s.x.abs() > 1.5 {
                Action::Downlink
            } else if s.y == 0 && s.b > 0 {
                Action::Uplink
            } else {
                Action::Idle
            }
        }
        fn name(&self) -> String {
            "far_out".into()
        }
    }

    fn post_downlink_second_moment(plant: PlantModel, tau: u32) -> (f64, usize) {
        let p = ModelParams::default();
        let mut c = cfg(&p, 10_000, 8);
        c.trace_rollouts = c.n_rollouts;
        c.horizon = 40;
        c.plant = plant;
        let (_, rs) = estimate_cost(&FarOut, &p, &c).unwrap();
        let mut xs = Vec::new();
        for r in &rs {
            let tr = r.trace.as_ref().unwrap();
            for k in 0..tr.len() - 1 {
                if tr[k].u == Action::Downlink && tr[k].delivered && tr[k].tau == tau {
                    xs.push(tr[k + 1].x);
                }
            }
        }
        (
            xs.iter().map(|x| x * x).sum::<f64>() / xs.len() as f64,
            xs.len(),
        )
    }

    #[test]
    fn state_dependent_downlinks_inflate_the_reset_only_on_the_exact_plant() {
        let p = ModelParams::default();
        let want = eps_tau(1, p.a, p.sigma2).unwrap();
        let (m, n) = post_downlink_second_moment(PlantModel::IndependentReset, 1);
        assert!(n > 10_000);
        assert!((m / want - 1.0).abs() < 0.05, "{m} vs {want}");
        // The exact plant remembers x - xhat, which is large when |x| is.
        let (m, _) = post_downlink_second_moment(PlantModel::Exact, 1);
        assert!(m > 1.1 * want, "{m} vs {want}");
    }

    #[test]
    fn plant_models_agree_for_state_blind_policies() {
        let p = ModelParams::default();
        let mut c = cfg(&p, 2000, 13);
        let (exact, _) = estimate_cost(&Baseline::Periodic(2), &p, &c).unwrap();
        c.plant = PlantModel::IndependentReset;
        let (indep, _) = estimate_cost(&Baseline::Periodic(2), &p, &c).unwrap();
        let se = exact.se.hypot(indep.se);
        assert!((exact.mean - indep.mean).abs() < 3.0 * se);
        assert_eq!(
            exact.diagnostics.action_fractions,
            indep.diagnostics.action_fractions
        );
    }

    #[test]
    fn truncation_bound_covers_tail() {
        let p = ModelParams::default();
        let c = cfg(&p, 1, 0);
        let mut long = c.clone();
        long.horizon = 2000;
        let tail = never_act_series(&p, &long) - never_act_series(&p, &c);
        assert!(tail <= truncation_bound(&p, &c).unwrap());
        let mut unstable = p.clone();
        unstable.a = 1.0;
        assert!(truncation_bound(&unstable, &c).is_none());
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(8))]
        #[test]
        fn se_shrinks_with_more_rollouts(seed in any::<u64>()) {
            let p = ModelParams::default();
            let mut ratios = Vec::new();
            for s in 0..6u64 {
                let c1 = cfg(&p, 2000, seed.wrapping_add(2 * s));
                let mut c2 = c1.clone();
                c2.n_rollouts = 4000;
                c2.seed = seed.wrapping_add(2 * s + 1);
                let se1 = estimate_cost(&Baseline::GreedyUplink, &p, &c1).unwrap().0.se;
                let se2 = estimate_cost(&Baseline::GreedyUplink, &p, &c2).unwrap().0.se;
                ratios.push(se2 / se1);
            }
            let mean = ratios.iter().sum::<f64>() / ratios.len() as f64;
            prop_assert!((mean * 2f64.sqrt() - 1.0).abs() < 0.2, "ratios {:?}", ratios);
        }
    }
}
