//! Exact piecewise-linear dynamics between trigger events.
//!
//! Every agent integrates `xdot_i = u_i` with `u_i` held constant between
//! its own triggers, so states are exactly linear in time:
//!
//! ```text
//!     x_i(t) = x_i(t_k) + (t - t_k) u_i          for t >= t_k
//! ```
//!
//! The combinational measurement `q_i(t) = -sum_j L_ij x_j(t)` is therefore
//! affine in `t` on any interval free of triggers of agent `i`'s closed
//! in-neighbourhood, which is what makes exact event scheduling possible.

use thiserror::Error;

use crate::graph::Laplacian;
use crate::tol;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum DynamicsError {
    #[error("advance interval runs backwards: from {from} to {to}")]
    BackwardInterval { from: f64, to: f64 },
    #[error("agent {agent} triggered at {trigger_time}, inside the advance interval starting at {from}")]
    StraddlesTrigger { agent: usize, trigger_time: f64, from: f64 },
    #[error("snapshot entry for agent {agent} is stale: trigger at {trigger_time} is later than the snapshot time {as_of}")]
    StaleSnapshot { agent: usize, trigger_time: f64, as_of: f64 },
    #[error("prediction time {t} precedes the snapshot time {as_of}")]
    QueryBeforeSnapshot { t: f64, as_of: f64 },
    #[error("snapshot is missing in-neighbour {agent}")]
    MissingNeighbor { agent: usize },
    #[error("snapshot contains agent {agent} which is not an in-neighbour")]
    UnexpectedNeighbor { agent: usize },
}

/// Per-agent runtime data: everything needed to evaluate the agent's exact
/// state at any time at or after its last trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AgentRuntime {
    pub agent: usize,
    /// Time of the last trigger `t_k`.
    pub trigger_time: f64,
    /// State at the last trigger `x_i(t_k)`.
    pub trigger_state: f64,
    /// Control held since the last trigger, `u_i = q_i(t_k)`.
    pub control: f64,
    /// Number of triggers so far (the forced one at `t = 0` included).
    pub triggers: u64,
}

impl AgentRuntime {
    pub fn state_at(&self, t: f64) -> f64 {
        self.trigger_state + (t - self.trigger_time) * self.control
    }
}

/// `q_i(x) = -sum_j L_ij x_j`.
pub fn q_of(l: &Laplacian, x: &[f64], i: usize) -> f64 {
    let mut acc = 0.0;
    for j in 0..l.dim() {
        acc -= l.entry(i, j) * x[j];
    }
    acc
}

/// All measurements at once.
pub fn q_all(l: &Laplacian, x: &[f64]) -> Vec<f64> {
    (0..l.dim()).map(|i| q_of(l, x, i)).collect()
}

/// Measurement error `f_i(t) = q_i(t_k) - q_i(t)`: held value minus the
/// current one. Resets to zero at each trigger of agent `i`.
pub fn measurement_error(held: f64, q_now: f64) -> f64 {
    held - q_now
}

/// States of all agents at `to`, given runtimes valid on `[from, to]`.
/// The caller guarantees no trigger occurs inside the interval; runtimes
/// with a trigger after `from` are rejected.
pub fn advance(agents: &[AgentRuntime], from: f64, to: f64) -> Result<Vec<f64>, DynamicsError> {
    if to < from {
        return Err(DynamicsError::BackwardInterval { from, to });
    }
    for rt in agents {
        if rt.trigger_time > from + tol::ROOT_TIME {
            return Err(DynamicsError::StraddlesTrigger {
                agent: rt.agent,
                trigger_time: rt.trigger_time,
                from,
            });
        }
    }
    Ok(agents.iter().map(|rt| rt.state_at(to)).collect())
}

/// What an agent knows about one member of its closed in-neighbourhood:
/// the state and measurement that neighbour broadcast at its last trigger.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SnapshotEntry {
    pub agent: usize,
    pub trigger_time: f64,
    pub state: f64,
    pub control: f64,
}

impl From<AgentRuntime> for SnapshotEntry {
    fn from(rt: AgentRuntime) -> Self {
        Self { agent: rt.agent, trigger_time: rt.trigger_time, state: rt.trigger_state, control: rt.control }
    }
}

/// The information available to one agent at time `as_of`: its own runtime
/// plus the last broadcast of every in-neighbour.
#[derive(Debug, Clone, PartialEq)]
pub struct NeighborSnapshot {
    pub as_of: f64,
    pub own: SnapshotEntry,
    pub neighbors: Vec<SnapshotEntry>,
}

/// An affine signal `value + slope * (t - t_ref)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineSignal {
    pub t_ref: f64,
    pub value: f64,
    pub slope: f64,
}

impl AffineSignal {
    pub fn eval(&self, t: f64) -> f64 {
        self.value + self.slope * (t - self.t_ref)
    }
}

/// Predicts `q_i(t)` from a snapshot, without access to current states.
///
/// Each known agent `j` moves as `x_j(t) = x_j(t_j) + (t - t_j) u_j`, so
/// the prediction is affine with slope `-sum_j L_ij u_j`. It is exact as
/// long as no member of the closed in-neighbourhood triggers after the
/// snapshot was taken. Returns the value at `t` and the affine form.
pub fn predict_q(
    l: &Laplacian,
    snap: &NeighborSnapshot,
    t: f64,
) -> Result<(f64, AffineSignal), DynamicsError> {
    if t < snap.as_of - tol::ROOT_TIME {
        return Err(DynamicsError::QueryBeforeSnapshot { t, as_of: snap.as_of });
    }
    let i = snap.own.agent;
    let mut seen = vec![false; l.dim()];
    let mut value = 0.0;
    let mut slope = 0.0;
    for entry in std::iter::once(&snap.own).chain(snap.neighbors.iter()) {
        let j = entry.agent;
        if j != i && l.entry(i, j) == 0.0 {
            return Err(DynamicsError::UnexpectedNeighbor { agent: j });
        }
        if entry.trigger_time > snap.as_of + tol::ROOT_TIME {
            return Err(DynamicsError::StaleSnapshot {
                agent: j,
                trigger_time: entry.trigger_time,
                as_of: snap.as_of,
            });
        }
        seen[j] = true;
        let coeff = -l.entry(i, j);
        let state_at_ref = entry.state + (snap.as_of - entry.trigger_time) * entry.control;
        value += coeff * state_at_ref;
        slope += coeff * entry.control;
    }
    for j in 0..l.dim() {
        if j != i && l.entry(i, j) != 0.0 && !seen[j] {
            return Err(DynamicsError::MissingNeighbor { agent: j });
        }
    }
    let affine = AffineSignal { t_ref: snap.as_of, value, slope };
    Ok((affine.eval(t), affine))
}
