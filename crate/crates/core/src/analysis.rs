//! Post-run analysis: disagreement measures, decay-rate fitting, and
//! audits of the guarantees a trigger rule is supposed to deliver.
//!
//! The audits re-derive everything from the event trace and the graph,
//! independently of the engine's internal bookkeeping: states come from
//! the exact piecewise-linear replay, measurement errors and thresholds
//! are recomputed from scratch. They are meant to catch engine bugs, not
//! to trust them.

use thiserror::Error;

use crate::engine::SimTrace;
use crate::graph::Laplacian;
use crate::spectral::{SccConstants, SpectralConstants};
use crate::tol;
use crate::triggers::{Envelope, MuFamily, ValidatedRule};

#[derive(Debug, Clone, PartialEq, Error)]
pub enum AnalysisError {
    #[error("cannot fit a decay rate from {points} usable samples")]
    DegenerateFit { points: usize },
    #[error("state length {got} does not match the constants' {expected} agents")]
    Dimension { expected: usize, got: usize },
}

/// `max_i x_i - min_i x_i`, the consensus gap.
pub fn max_spread(x: &[f64]) -> f64 {
    let mut lo = f64::INFINITY;
    let mut hi = f64::NEG_INFINITY;
    for &v in x {
        lo = lo.min(v);
        hi = hi.max(v);
    }
    if x.is_empty() {
        0.0
    } else {
        hi - lo
    }
}

/// Weighted disagreement `V(x) = (1/2) sum_i xi_i (x_i - xbar)^2` with
/// `xbar = xi . x`. Evaluated both directly and through the quadratic
/// form `(1/2) x' U x`; the two routes must agree to rounding.
pub fn lyapunov(c: &SpectralConstants, x: &[f64]) -> Result<f64, AnalysisError> {
    let m = c.xi.len();
    if x.len() != m {
        return Err(AnalysisError::Dimension { expected: m, got: x.len() });
    }
    let xbar: f64 = c.xi.iter().zip(x).map(|(xi, v)| xi * v).sum();
    let direct: f64 =
        0.5 * c.xi.iter().zip(x).map(|(xi, v)| xi * (v - xbar) * (v - xbar)).sum::<f64>();
    let xv = nalgebra::DVector::from_column_slice(x);
    let via_u = 0.5 * (xv.transpose() * &c.u * &xv)[(0, 0)];
    let scale = 1.0 + xv.iter().map(|v| v * v).sum::<f64>();
    assert!(
        (direct - via_u).abs() <= tol::FORMULA_AGREEMENT * scale,
        "disagreement formulas diverged: {direct:e} vs {via_u:e}"
    );
    Ok(direct)
}

/// Per-block disagreement of a reducible system, in the block order of
/// the normal form (receivers first, root last). Every block is measured
/// against the current root agreement value.
pub fn block_lyapunov(scc: &SccConstants, x: &[f64]) -> Result<Vec<f64>, AnalysisError> {
    let m: usize = scc.root_agents.len() + scc.non_root.iter().map(|b| b.agents.len()).sum::<usize>();
    if x.len() != m {
        return Err(AnalysisError::Dimension { expected: m, got: x.len() });
    }
    let nu = scc.agreement(x);
    let mut out = Vec::with_capacity(scc.non_root.len() + 1);
    for block in &scc.non_root {
        let v = 0.5
            * block
                .agents
                .iter()
                .zip(&block.xi)
                .map(|(&i, xi)| xi * (x[i] - nu) * (x[i] - nu))
                .sum::<f64>();
        out.push(v);
    }
    let root_v = 0.5
        * scc
            .root_agents
            .iter()
            .zip(&scc.root.xi)
            .map(|(&i, xi)| xi * (x[i] - nu) * (x[i] - nu))
            .sum::<f64>();
    out.push(root_v);
    Ok(out)
}

/// Total disagreement of a reducible system: the sum of the per-block
/// values of [`block_lyapunov`].
pub fn reducible_lyapunov(scc: &SccConstants, x: &[f64]) -> Result<f64, AnalysisError> {
    Ok(block_lyapunov(scc, x)?.iter().sum())
}

/// Uniform samples of `f(state)` along a trace.
pub fn sample_along(
    trace: &SimTrace,
    count: usize,
    mut f: impl FnMut(f64, &[f64]) -> f64,
) -> Vec<(f64, f64)> {
    let mut replay = trace.replayer();
    let n = count.max(1);
    (0..=n)
        .map(|k| {
            let t = trace.final_time * k as f64 / n as f64;
            (t, f(t, replay.state_at(t)))
        })
        .collect()
}

/// Exponential fit `v(t) ~ exp(intercept + rate t)` by least squares on
/// the log of the positive samples.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecayFit {
    pub rate: f64,
    pub log_intercept: f64,
    pub points: usize,
}

pub fn fit_decay(samples: &[(f64, f64)]) -> Result<DecayFit, AnalysisError> {
    let usable: Vec<(f64, f64)> =
        samples.iter().filter(|(_, v)| *v > 0.0).map(|&(t, v)| (t, v.ln())).collect();
    let n = usable.len();
    if n < 2 {
        return Err(AnalysisError::DegenerateFit { points: n });
    }
    let tbar = usable.iter().map(|(t, _)| t).sum::<f64>() / n as f64;
    let ybar = usable.iter().map(|(_, y)| y).sum::<f64>() / n as f64;
    let sxx: f64 = usable.iter().map(|(t, _)| (t - tbar) * (t - tbar)).sum();
    if sxx <= 1e-300 {
        return Err(AnalysisError::DegenerateFit { points: n });
    }
    let sxy: f64 = usable.iter().map(|(t, y)| (t - tbar) * (y - ybar)).sum();
    let rate = sxy / sxx;
    Ok(DecayFit { rate, log_intercept: ybar - rate * tbar, points: n })
}

/// Like [`fit_decay`], discarding samples before `t0` (transients).
pub fn fit_decay_after(samples: &[(f64, f64)], t0: f64) -> Result<DecayFit, AnalysisError> {
    let tail: Vec<(f64, f64)> = samples.iter().copied().filter(|(t, _)| *t >= t0).collect();
    fit_decay(&tail)
}

/// Outcome of checking the per-agent deviation envelope
/// `|x_i(t) - xbar(t)| <= mu(t)^{-1/2} / d_i` and the induced control
/// bound `|u_i| <= 2 L_ii mu(t_k)^{-1/2} / min_j d_j` along a trace.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundReport {
    /// Earliest sample time from which the envelope holds to the end,
    /// `None` if it is still violated at the last sample.
    pub hold_from: Option<f64>,
    /// Largest deviation-to-envelope ratio seen at or after `hold_from`
    /// (over all samples when `hold_from` is `None`).
    pub worst_ratio: f64,
    /// Earliest trigger time from which every later trigger respects the
    /// control bound.
    pub control_hold_from: Option<f64>,
}

pub fn check_bound(
    trace: &SimTrace,
    c: &SpectralConstants,
    env: &Envelope,
    samples: usize,
) -> Result<BoundReport, AnalysisError> {
    let m = c.xi.len();
    if trace.agent_count() != m {
        return Err(AnalysisError::Dimension { expected: m, got: trace.agent_count() });
    }
    let mut replay = trace.replayer();
    let n = samples.max(1);
    let mut times = Vec::with_capacity(n + 1);
    let mut ratios = Vec::with_capacity(n + 1);
    for k in 0..=n {
        let t = trace.final_time * k as f64 / n as f64;
        let x = replay.state_at(t);
        let xbar: f64 = c.xi.iter().zip(x).map(|(xi, v)| xi * v).sum();
        let inv = env.mu.inv_sqrt_mu(t);
        let ratio = x
            .iter()
            .zip(&env.denominators)
            .map(|(v, d)| (v - xbar).abs() / (inv / d))
            .fold(0.0f64, f64::max);
        times.push(t);
        ratios.push(ratio);
    }
    let slack = 1.0 + tol::PSD_SLACK;
    let last_bad = ratios.iter().rposition(|&r| r > slack);
    let (hold_from, worst_ratio) = match last_bad {
        None => (Some(times[0]), ratios.iter().copied().fold(0.0, f64::max)),
        Some(i) if i + 1 < times.len() => (
            Some(times[i + 1]),
            ratios[i + 1..].iter().copied().fold(0.0, f64::max),
        ),
        Some(_) => (None, ratios.iter().copied().fold(0.0, f64::max)),
    };

    let min_d = env.denominators.iter().copied().fold(f64::INFINITY, f64::min);
    let mut bad_control: Option<f64> = None;
    for ev in trace.events.iter().rev() {
        let lii = c.laplacian.entry(ev.agent, ev.agent);
        let bound = 2.0 * lii * env.mu.inv_sqrt_mu(ev.time) / min_d;
        if ev.control.abs() > bound * slack + 1e-12 {
            bad_control = Some(ev.time);
            break;
        }
    }
    let control_hold_from = match bad_control {
        None => Some(0.0),
        Some(t) => trace.events.iter().map(|e| e.time).find(|&et| et > t),
    };
    Ok(BoundReport { hold_from, worst_ratio, control_hold_from })
}

/// Outcome of re-checking the trigger condition along the whole run.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SoundnessReport {
    /// Largest `|f| - threshold` over all sampled instants and agents;
    /// non-positive means the condition was never violated.
    pub max_excess: f64,
    /// Largest `||f| - threshold|` at the trigger instants themselves
    /// (excluding the forced initial wave): triggers must sit on the
    /// boundary, neither early nor late.
    pub max_boundary_gap: f64,
}

pub fn audit_soundness(
    trace: &SimTrace,
    l: &Laplacian,
    rule: &ValidatedRule,
    samples_per_interval: usize,
) -> SoundnessReport {
    let m = trace.agent_count();
    let mut replay = trace.replayer();
    let mut max_excess = f64::NEG_INFINITY;
    let n = samples_per_interval.max(1);
    let mut boundaries: Vec<f64> = trace.events.iter().map(|e| e.time).collect();
    boundaries.push(trace.final_time);
    boundaries.dedup();
    for w in boundaries.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        for k in 0..n {
            // Open sampling keeps clear of the control switches.
            let t = a + (b - a) * (k as f64 + 0.5) / n as f64;
            let x = replay.state_at(t).to_vec();
            let u = replay.control_at(t);
            for i in 0..m {
                let q = crate::dynamics::q_of(l, &x, i);
                let excess = (u[i] - q).abs() - rule.threshold_at(t, q.abs());
                max_excess = max_excess.max(excess);
            }
        }
    }
    let max_boundary_gap = trace
        .events
        .iter()
        .filter(|e| e.time > 0.0)
        .map(|e| (e.error_before - e.threshold).abs())
        .fold(0.0f64, f64::max);
    SoundnessReport {
        max_excess: if max_excess.is_finite() { max_excess } else { 0.0 },
        max_boundary_gap,
    }
}

/// Inter-event floor certified by a decaying threshold: any two triggers
/// of one agent are separated by at least `mu(T)^{-1/2} / max |dq/dt|`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ZenoReport {
    pub min_gap: Option<f64>,
    pub floor: f64,
    /// Largest aggregate slope `|dq_i/dt|` over the run.
    pub max_rate: f64,
}

impl ZenoReport {
    pub fn holds(&self) -> bool {
        match self.min_gap {
            None => true,
            Some(g) => g + tol::ROOT_TIME >= self.floor,
        }
    }
}

pub fn audit_zeno(trace: &SimTrace, l: &Laplacian, mu: &MuFamily) -> ZenoReport {
    let m = trace.agent_count();
    let mut u = vec![0.0; m];
    let mut max_rate = 0.0f64;
    let mut idx = 0;
    let events = &trace.events;
    while idx < events.len() {
        let t = events[idx].time;
        while idx < events.len() && events[idx].time == t {
            u[events[idx].agent] = events[idx].control;
            idx += 1;
        }
        for i in 0..m {
            let rate: f64 = (0..m).map(|j| -l.entry(i, j) * u[j]).sum();
            max_rate = max_rate.max(rate.abs());
        }
    }
    let floor = if max_rate > 0.0 {
        mu.inv_sqrt_mu(trace.final_time) / max_rate
    } else {
        f64::INFINITY
    };
    ZenoReport { min_gap: trace.min_inter_event(), floor, max_rate }
}
