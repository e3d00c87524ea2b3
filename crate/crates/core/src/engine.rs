//! Discrete-event simulation of the networked integrator system.
//!
//! Between triggers every agent moves along a straight line, so the
//! simulator never integrates: it keeps per-agent affine segments and
//! advances directly from one trigger to the next. Candidate trigger
//! times live in a min-heap ordered by `(time, agent)`; whenever an agent
//! fires, the candidates of every agent whose aggregate depends on the
//! new control (the agent itself and its out-neighbours) are recomputed
//! and the stale heap entries are invalidated through per-agent
//! generation counters. Crossings within [`tol::SIMULTANEITY`] of the
//! current instant are snapped onto it, so near-ties collapse into exact
//! ties and are processed in agent order.
//!
//! Two modes share the loop: the event-triggered mode computes candidate
//! crossings from the exact global state, the self-triggered mode from a
//! [`NeighborSnapshot`] taken at the recompute instant, exactly as the
//! deployed scheduler would. Since the snapshot extrapolation reproduces
//! the true affine aggregate, both modes produce the same executions up
//! to floating-point noise.
//!
//! [`run_oracle`] cross-checks a finished run with explicit Euler
//! integration of the recorded control schedule, either splitting steps
//! at event times (exact for piecewise-constant controls) or holding
//! control changes to the next grid point (genuinely first-order, for
//! convergence studies).

use std::cmp::Ordering;
use std::collections::BinaryHeap;

use thiserror::Error;

use crate::analysis::max_spread;
use crate::dynamics::{q_of, AffineSignal, AgentRuntime, DynamicsError, NeighborSnapshot};
use crate::graph::Laplacian;
use crate::spectral::{constants_for, SpectralError};
use crate::tol;
use crate::triggers::{
    self_triggered_schedule, validate, ScheduleError, TriggerError, TriggerRule, ValidatedRule,
};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("initial state length {got} does not match agent count {expected}")]
    Dimension { expected: usize, got: usize },
    #[error("initial state of agent {agent} is not finite")]
    NonFiniteInitial { agent: usize },
    #[error("state of agent {agent} became non-finite at t = {time}")]
    NonFiniteState { agent: usize, time: f64 },
    #[error("horizon must be positive and finite, got {0}")]
    BadHorizon(f64),
    #[error("graph has no directed spanning tree; consensus is unreachable")]
    NoSpanningTree,
    #[error("reducible graphs support only the exponential absolute rule")]
    ReducibleNeedsExp,
    #[error(transparent)]
    Trigger(#[from] TriggerError),
    #[error(transparent)]
    Spectral(#[from] SpectralError),
    #[error(transparent)]
    Dynamics(#[from] DynamicsError),
    #[error("event cap {cap} reached at t = {time}; execution is Zeno-suspect")]
    ZenoSuspect { time: f64, cap: usize, trace: Box<SimTrace> },
}

impl From<ScheduleError> for EngineError {
    fn from(e: ScheduleError) -> Self {
        match e {
            ScheduleError::Dynamics(d) => Self::Dynamics(d),
            ScheduleError::Trigger(t) => Self::Trigger(t),
        }
    }
}

/// A complete simulation request.
#[derive(Debug, Clone)]
pub struct Scenario {
    pub laplacian: Laplacian,
    pub initial: Vec<f64>,
    pub rule: TriggerRule,
    pub horizon: f64,
    /// Stop once the state spread `max x - min x` falls below this.
    pub consensus_tol: f64,
    /// Abort with [`EngineError::ZenoSuspect`] beyond this many events.
    pub event_cap: usize,
}

impl Scenario {
    pub fn new(laplacian: Laplacian, initial: Vec<f64>, rule: TriggerRule) -> Self {
        Self { laplacian, initial, rule, horizon: 20.0, consensus_tol: 1e-6, event_cap: 1_000_000 }
    }
}

/// One trigger of one agent.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EventRecord {
    pub time: f64,
    pub agent: usize,
    /// Agent state at the trigger.
    pub state: f64,
    /// Freshly sampled aggregate, which becomes the new control.
    pub control: f64,
    /// `|f|` accumulated since the previous trigger, just before reset.
    pub error_before: f64,
    /// Threshold value at the trigger instant.
    pub threshold: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Termination {
    /// Spread fell below the consensus tolerance at this event.
    Consensus,
    /// The horizon was reached with the condition still satisfied.
    Horizon,
    /// The event cap was hit (only inside [`EngineError::ZenoSuspect`]).
    EventCap,
}

/// Full record of a run: the event sequence determines the whole
/// trajectory, which [`Replayer`] reconstructs exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct SimTrace {
    pub initial: Vec<f64>,
    pub events: Vec<EventRecord>,
    pub final_time: f64,
    pub final_state: Vec<f64>,
    pub trigger_counts: Vec<usize>,
    pub recompute_counts: Vec<usize>,
    pub termination: Termination,
}

impl SimTrace {
    pub fn agent_count(&self) -> usize {
        self.initial.len()
    }

    /// Smallest gap between successive triggers of the same agent.
    pub fn min_inter_event(&self) -> Option<f64> {
        let mut last = vec![None; self.agent_count()];
        let mut min: Option<f64> = None;
        for ev in &self.events {
            if let Some(prev) = last[ev.agent] {
                let gap = ev.time - prev;
                min = Some(min.map_or(gap, |m: f64| m.min(gap)));
            }
            last[ev.agent] = Some(ev.time);
        }
        min
    }

    /// Event times of one agent, in order.
    pub fn agent_event_times(&self, agent: usize) -> Vec<f64> {
        self.events.iter().filter(|e| e.agent == agent).map(|e| e.time).collect()
    }

    pub fn replayer(&self) -> Replayer<'_> {
        Replayer::new(self)
    }
}

/// Reconstructs states and controls at arbitrary times from a trace.
/// Sequential forward queries are O(events) in total; a backward query
/// rewinds to the start.
///
/// States evaluate from each agent's latest trigger in a single step,
/// exactly as the engine does, so replayed values are bit-identical to
/// the values the engine saw.
#[derive(Debug)]
pub struct Replayer<'a> {
    trace: &'a SimTrace,
    cursor: usize,
    time: f64,
    /// Per-agent `(trigger time, state at trigger)` anchor.
    anchor: Vec<(f64, f64)>,
    state: Vec<f64>,
    control: Vec<f64>,
    /// Time and held aggregate of each agent's latest trigger.
    last_trigger: Vec<(f64, f64)>,
}

impl<'a> Replayer<'a> {
    fn new(trace: &'a SimTrace) -> Self {
        let m = trace.agent_count();
        Self {
            trace,
            cursor: 0,
            time: 0.0,
            anchor: trace.initial.iter().map(|&x| (0.0, x)).collect(),
            state: trace.initial.clone(),
            control: vec![0.0; m],
            last_trigger: vec![(0.0, 0.0); m],
        }
    }

    fn apply_until(&mut self, t: f64) {
        if t < self.time {
            *self = Self::new(self.trace);
        }
        while self.cursor < self.trace.events.len() {
            let ev = self.trace.events[self.cursor];
            if ev.time > t {
                break;
            }
            self.anchor[ev.agent] = (ev.time, ev.state);
            self.control[ev.agent] = ev.control;
            self.last_trigger[ev.agent] = (ev.time, ev.control);
            self.cursor += 1;
        }
        self.time = t;
    }

    /// States at `t`. Times beyond the final event extrapolate along the
    /// last controls.
    pub fn state_at(&mut self, t: f64) -> &[f64] {
        self.apply_until(t);
        for i in 0..self.state.len() {
            let (t0, x0) = self.anchor[i];
            self.state[i] = x0 + (t - t0) * self.control[i];
        }
        &self.state
    }

    /// Controls in force at `t` (after any triggers at exactly `t`).
    pub fn control_at(&mut self, t: f64) -> &[f64] {
        self.apply_until(t);
        &self.control
    }

    /// Per-agent `(trigger time, held aggregate)` of the latest trigger
    /// at or before `t`.
    pub fn last_trigger_at(&mut self, t: f64) -> &[(f64, f64)] {
        self.apply_until(t);
        &self.last_trigger
    }
}

#[derive(Debug, Clone, Copy)]
struct Candidate {
    time: f64,
    agent: usize,
    generation: u64,
}

impl PartialEq for Candidate {
    fn eq(&self, other: &Self) -> bool {
        self.cmp(other) == Ordering::Equal
    }
}

impl Eq for Candidate {}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> Ordering {
        self.time
            .total_cmp(&other.time)
            .then_with(|| self.agent.cmp(&other.agent))
            .then_with(|| self.generation.cmp(&other.generation))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Mode {
    EventTriggered,
    SelfTriggered,
}

pub fn run_event_triggered(scenario: &Scenario) -> Result<SimTrace, EngineError> {
    run(scenario, Mode::EventTriggered)
}

pub fn run_self_triggered(scenario: &Scenario) -> Result<SimTrace, EngineError> {
    run(scenario, Mode::SelfTriggered)
}

/// Validates the scenario's rule against the graph: spectral constants
/// for irreducible graphs, exponential-absolute only for reducible ones.
pub fn validate_scenario_rule(scenario: &Scenario) -> Result<ValidatedRule, EngineError> {
    let digraph = scenario.laplacian.digraph();
    if !digraph.has_spanning_tree() {
        return Err(EngineError::NoSpanningTree);
    }
    if digraph.is_strongly_connected() {
        let constants = constants_for(&scenario.laplacian)?;
        Ok(validate(scenario.rule, Some(&constants))?)
    } else {
        if !matches!(scenario.rule, TriggerRule::AbsoluteExp { .. }) {
            return Err(EngineError::ReducibleNeedsExp);
        }
        Ok(validate(scenario.rule, None)?)
    }
}

fn run(scenario: &Scenario, mode: Mode) -> Result<SimTrace, EngineError> {
    let l = &scenario.laplacian;
    let m = l.matrix().nrows();
    if scenario.initial.len() != m {
        return Err(EngineError::Dimension { expected: m, got: scenario.initial.len() });
    }
    if let Some(agent) = scenario.initial.iter().position(|x| !x.is_finite()) {
        return Err(EngineError::NonFiniteInitial { agent });
    }
    if !(scenario.horizon > 0.0) || !scenario.horizon.is_finite() {
        return Err(EngineError::BadHorizon(scenario.horizon));
    }
    let rule = validate_scenario_rule(scenario)?;
    let digraph = l.digraph();
    let horizon = scenario.horizon;

    let mut runtimes: Vec<AgentRuntime> = (0..m)
        .map(|agent| AgentRuntime {
            agent,
            trigger_time: 0.0,
            trigger_state: scenario.initial[agent],
            control: 0.0,
            triggers: 0,
        })
        .collect();
    let mut events = Vec::new();
    let mut recompute_counts = vec![0usize; m];
    let mut generations = vec![0u64; m];
    let mut heap: BinaryHeap<std::cmp::Reverse<Candidate>> = BinaryHeap::new();

    // Everyone triggers at t = 0: sample the aggregate and engage it.
    for agent in 0..m {
        let q = q_of(l, &scenario.initial, agent);
        runtimes[agent].control = q;
        runtimes[agent].triggers = 1;
        events.push(EventRecord {
            time: 0.0,
            agent,
            state: scenario.initial[agent],
            control: q,
            error_before: 0.0,
            threshold: rule.threshold_at(0.0, q.abs()),
        });
    }
    let finish = |events: Vec<EventRecord>,
                  runtimes: &[AgentRuntime],
                  recompute_counts: Vec<usize>,
                  final_time: f64,
                  termination: Termination| {
        let final_state: Vec<f64> = runtimes.iter().map(|r| r.state_at(final_time)).collect();
        let trigger_counts = runtimes.iter().map(|r| r.triggers as usize).collect();
        SimTrace {
            initial: scenario.initial.clone(),
            events,
            final_time,
            final_state,
            trigger_counts,
            recompute_counts,
            termination,
        }
    };
    if max_spread(&scenario.initial) < scenario.consensus_tol {
        return Ok(finish(events, &runtimes, recompute_counts, 0.0, Termination::Consensus));
    }

    for agent in 0..m {
        if let Some(time) =
            schedule(&rule, l, &digraph, &runtimes, agent, 0.0, horizon, mode)?
        {
            heap.push(std::cmp::Reverse(Candidate { time, agent, generation: 0 }));
        }
        recompute_counts[agent] += 1;
    }

    while let Some(std::cmp::Reverse(cand)) = heap.pop() {
        if cand.generation != generations[cand.agent] {
            continue;
        }
        let now = cand.time;
        let agent = cand.agent;
        let states: Vec<f64> = runtimes.iter().map(|r| r.state_at(now)).collect();
        if let Some(bad) = states.iter().position(|x| !x.is_finite()) {
            return Err(EngineError::NonFiniteState { agent: bad, time: now });
        }
        let q = q_of(l, &states, agent);
        let rt = &mut runtimes[agent];
        let error_before = (rt.control - q).abs();
        rt.trigger_time = now;
        rt.trigger_state = states[agent];
        rt.control = q;
        rt.triggers += 1;
        events.push(EventRecord {
            time: now,
            agent,
            state: states[agent],
            control: q,
            error_before,
            threshold: rule.threshold_at(now, q.abs()),
        });
        if max_spread(&states) < scenario.consensus_tol {
            return Ok(finish(events, &runtimes, recompute_counts, now, Termination::Consensus));
        }
        if events.len() >= scenario.event_cap {
            let trace =
                finish(events, &runtimes, recompute_counts, now, Termination::EventCap);
            return Err(EngineError::ZenoSuspect {
                time: now,
                cap: scenario.event_cap,
                trace: Box::new(trace),
            });
        }
        let mut affected = digraph.out_neighbors(agent);
        affected.push(agent);
        affected.sort_unstable();
        for &j in &affected {
            generations[j] += 1;
            recompute_counts[j] += 1;
            if let Some(mut time) =
                schedule(&rule, l, &digraph, &runtimes, j, now, horizon, mode)?
            {
                if time - now < tol::SIMULTANEITY {
                    time = now;
                }
                heap.push(std::cmp::Reverse(Candidate {
                    time,
                    agent: j,
                    generation: generations[j],
                }));
            }
        }
    }

    Ok(finish(events, &runtimes, recompute_counts, horizon, Termination::Horizon))
}

/// Next candidate crossing of `agent`, valid until any in-neighbour
/// changes control.
#[allow(clippy::too_many_arguments)]
fn schedule(
    rule: &ValidatedRule,
    l: &Laplacian,
    digraph: &crate::graph::Digraph,
    runtimes: &[AgentRuntime],
    agent: usize,
    now: f64,
    horizon: f64,
    mode: Mode,
) -> Result<Option<f64>, EngineError> {
    if now >= horizon {
        return Ok(None);
    }
    match mode {
        Mode::EventTriggered => {
            let states: Vec<f64> = runtimes.iter().map(|r| r.state_at(now)).collect();
            let value = q_of(l, &states, agent);
            let slope: f64 = (0..runtimes.len())
                .map(|k| -l.matrix()[(agent, k)] * runtimes[k].control)
                .sum();
            let affine = AffineSignal { t_ref: now, value, slope };
            Ok(rule.next_crossing(runtimes[agent].control, &affine, now, horizon)?)
        }
        Mode::SelfTriggered => {
            let neighbors = digraph
                .in_neighbors(agent)
                .into_iter()
                .map(|j| runtimes[j].into())
                .collect();
            let snap = NeighborSnapshot {
                as_of: now,
                own: runtimes[agent].into(),
                neighbors,
            };
            Ok(self_triggered_schedule(rule, l, &snap, horizon)?)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OracleMode {
    /// Steps split exactly at event times; integration of the
    /// piecewise-constant schedule is then exact up to rounding.
    SplitAtEvents,
    /// Control changes take effect at the next grid point, giving the
    /// classic first-order global error of explicit Euler.
    GridAligned,
}

/// Integrates the recorded control schedule with explicit Euler at step
/// `step` up to `trace.final_time` and returns the terminal state.
pub fn run_oracle(trace: &SimTrace, step: f64, mode: OracleMode) -> Vec<f64> {
    oracle_core(trace, step, mode, |_, _| {})
}

/// Largest `|x_oracle - x_exact|` over all oracle step boundaries, with
/// the exact trajectory reconstructed by [`Replayer`]. In
/// [`OracleMode::SplitAtEvents`] this bounds the replay fidelity; in
/// [`OracleMode::GridAligned`] it exposes the genuine first-order error.
pub fn oracle_divergence(trace: &SimTrace, step: f64, mode: OracleMode) -> f64 {
    let mut replay = trace.replayer();
    let mut worst = 0.0f64;
    oracle_core(trace, step, mode, |t, x| {
        let exact = replay.state_at(t);
        for (a, b) in x.iter().zip(exact) {
            worst = worst.max((a - b).abs());
        }
    });
    worst
}

fn oracle_core(
    trace: &SimTrace,
    step: f64,
    mode: OracleMode,
    mut observe: impl FnMut(f64, &[f64]),
) -> Vec<f64> {
    let m = trace.agent_count();
    let horizon = trace.final_time;
    let events = &trace.events;
    let mut x = trace.initial.clone();
    let mut u = vec![0.0; m];
    let mut due = 0usize;
    let mut next = 0usize;
    let mut t = 0.0;
    let apply_due = |u: &mut Vec<f64>, due: &mut usize, upto: f64| {
        while *due < events.len() && events[*due].time <= upto {
            u[events[*due].agent] = events[*due].control;
            *due += 1;
        }
    };
    match mode {
        OracleMode::SplitAtEvents => {
            apply_due(&mut u, &mut due, 0.0);
            while t < horizon {
                while next < events.len() && events[next].time <= t {
                    next += 1;
                }
                let next_event = events.get(next).map_or(horizon, |e| e.time.min(horizon));
                let mut stop = (t + step).min(next_event).min(horizon);
                if stop <= t {
                    stop = next_event.min(horizon);
                }
                let dt = stop - t;
                for (xi, ui) in x.iter_mut().zip(&u) {
                    *xi += dt * ui;
                }
                t = stop;
                observe(t, &x);
                apply_due(&mut u, &mut due, t);
            }
        }
        OracleMode::GridAligned => {
            apply_due(&mut u, &mut due, 0.0);
            let mut k = 0u64;
            while t < horizon {
                let stop = ((k + 1) as f64 * step).min(horizon);
                let dt = stop - t;
                for (xi, ui) in x.iter_mut().zip(&u) {
                    *xi += dt * ui;
                }
                t = stop;
                k += 1;
                observe(t, &x);
                apply_due(&mut u, &mut due, t);
            }
        }
    }
    x
}
