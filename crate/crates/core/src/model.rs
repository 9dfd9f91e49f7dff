//! Plant, estimator, channels, battery and control law.
//!
//! Everything here is a pure function over small value types. The grid-based
//! MDP in [`crate::kernel`] and the continuous-state simulator in
//! [`crate::sim`] are both built from these primitives.

use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ModelError {
    #[error("invalid model parameter `{name}`: {reason}")]
    InvalidParam { name: &'static str, reason: String },
    #[error("action {action} is not admissible at y={y}, b={b}")]
    Inadmissible { action: Action, y: u8, b: u32 },
    #[error("age must be non-negative, got {0}")]
    NegativeAge(i64),
}

/// Scheduling decision taken by the sensor at each step.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Action {
    Idle = 0,
    Uplink = 1,
    Downlink = 2,
}

impl Action {
    pub const ALL: [Action; 3] = [Action::Idle, Action::Uplink, Action::Downlink];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Action> {
        Self::ALL.get(i).copied()
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Action::Idle => "idle",
            Action::Uplink => "uplink",
            Action::Downlink => "downlink",
        };
        f.write_str(s)
    }
}

/// Parameters of the scalar plant, the two packet-drop channels, the battery
/// and the cost.
///
/// The controller gain is not stored: it is always `-a`, which makes the plant
/// one-step controllable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelParams {
    /// Plant gain.
    pub a: f64,
    /// Process-noise variance.
    pub sigma2: f64,
    /// Drop probability of the sensor -> controller channel.
    pub p_uplink: f64,
    /// Drop probability of the controller -> actuator channel.
    pub p_downlink: f64,
    /// Discount factor in (0, 1).
    pub beta: f64,
    /// Battery capacity `B`.
    pub battery_capacity: u32,
    /// `harvest_probs[l]` is the probability of harvesting `l` units.
    pub harvest_probs: Vec<f64>,
}

impl Default for ModelParams {
    fn default() -> Self {
        ModelParams::new(0.8, 1.0, 0.2, 0.9, 3, vec![1.0 / 3.0; 3])
    }
}

impl ModelParams {
    /// Both channels share the drop probability `p`.
    pub fn new(
        a: f64,
        sigma2: f64,
        p: f64,
        beta: f64,
        battery_capacity: u32,
        harvest_probs: Vec<f64>,
    ) -> Self {
        ModelParams {
            a,
            sigma2,
            p_uplink: p,
            p_downlink: p,
            beta,
            battery_capacity,
            harvest_probs,
        }
    }

    pub fn controller_gain(&self) -> f64 {
        -self.a
    }

    pub fn max_harvest(&self) -> u32 {
        self.harvest_probs.len().saturating_sub(1) as u32
    }

    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |name, reason: String| Err(ModelError::InvalidParam { name, reason });
        if !self.a.is_finite() {
            return bad("a", format!("must be finite, got {}", self.a));
        }
        if !(self.sigma2 > 0.0 && self.sigma2.is_finite()) {
            return bad("sigma2", format!("must be positive, got {}", self.sigma2));
        }
        for (name, p) in [("p_uplink", self.p_uplink), ("p_downlink", self.p_downlink)] {
            if !(0.0..=1.0).contains(&p) {
                return bad(name, format!("must lie in [0, 1], got {p}"));
            }
        }
        if !(self.beta > 0.0 && self.beta < 1.0) {
            return bad("beta", format!("must lie in (0, 1), got {}", self.beta));
        }
        if self.battery_capacity < 1 {
            return bad("battery_capacity", "must be at least 1".into());
        }
        if self.harvest_probs.is_empty() {
            return bad("harvest_probs", "must not be empty".into());
        }
        if let Some(p) = self.harvest_probs.iter().find(|p| !(**p >= 0.0)) {
            return bad(
                "harvest_probs",
                format!("entries must be non-negative, got {p}"),
            );
        }
        let total: f64 = self.harvest_probs.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return bad("harvest_probs", format!("must sum to 1, got {total}"));
        }
        Ok(())
    }
}

/// MDP state `(x, tau, y, b)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct State {
    pub x: f64,
    pub tau: u32,
    /// 1 when the controller holds an unused control packet.
    pub y: u8,
    pub b: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EstimatorState {
    pub xhat: f64,
}

pub fn is_admissible(action: Action, y: u8, b: u32) -> bool {
    match action {
        Action::Idle => true,
        Action::Uplink => b > 0,
        Action::Downlink => y == 1,
    }
}

/// Admissible actions in ascending index order.
pub fn admissible_actions(y: u8, b: u32) -> Vec<Action> {
    Action::ALL
        .into_iter()
        .filter(|&u| is_admissible(u, y, b))
        .collect()
}

/// `min(b + harvested - [u = Uplink], capacity)`.
pub fn battery_step(b: u32, harvested: u32, u: Action, capacity: u32) -> Result<u32, ModelError> {
    let spend = match u {
        Action::Uplink if b == 0 => return Err(ModelError::Inadmissible { action: u, y: 0, b }),
        Action::Uplink => 1,
        _ => 0,
    };
    Ok((b + harvested - spend).min(capacity))
}

pub fn tau_step(tau: u32, u: Action, uplink_delivered: bool) -> u32 {
    if u == Action::Uplink && uplink_delivered {
        1
    } else {
        tau + 1
    }
}

pub fn y_step(y: u8, u: Action, delivered: bool) -> Result<u8, ModelError> {
    match (u, delivered) {
        (Action::Downlink, _) if y != 1 => Err(ModelError::Inadmissible { action: u, y, b: 0 }),
        (Action::Downlink, true) => Ok(0),
        (Action::Uplink, true) => Ok(1),
        _ => Ok(y),
    }
}

/// Control applied by the actuator: `K * xhat` with `K = -a` on a delivered
/// downlink packet, zero otherwise.
pub fn control_input(xhat: f64, a: f64, u: Action, downlink_delivered: bool) -> f64 {
    if u == Action::Downlink && downlink_delivered {
        -a * xhat
    } else {
        0.0
    }
}

pub fn plant_step(x: f64, a: f64, v: f64, w: f64) -> f64 {
    a * x + v + w
}

/// Variance of `sum_{k=0}^{tau} a^k w_k`, the plant state right after a
/// delivered control packet built from data of age `tau`.
pub fn eps_tau(tau: i64, a: f64, sigma2: f64) -> Result<f64, ModelError> {
    if tau < 0 {
        return Err(ModelError::NegativeAge(tau));
    }
    Ok(eps_tau_unchecked(tau as u32, a, sigma2))
}

pub(crate) fn eps_tau_unchecked(tau: u32, a: f64, sigma2: f64) -> f64 {
    let a2 = a * a;
    if a2 == 1.0 {
        sigma2 * f64::from(tau + 1)
    } else {
        sigma2 * (1.0 - a2.powi(tau as i32 + 1)) / (1.0 - a2)
    }
}
