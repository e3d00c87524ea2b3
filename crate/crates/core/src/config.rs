//! Configuration files and on-disk artefacts.
//!
//! Scenarios are TOML documents with four sections:
//!
//! ```toml
//! [graph]                     # inline, or `path = "graph.toml"`
//! agents = 3
//! edges = [
//!     { src = 1, dst = 2, weight = 1.0 },
//!     { src = 2, dst = 3, weight = 2.0 },
//!     { src = 3, dst = 1, weight = 0.5 },
//! ]
//!
//! [scenario]
//! initial_state = [2.0, -1.0, 0.5]
//! mode = "event"              # or "self"
//! horizon = 20.0
//!
//! [rule]
//! kind = "absolute-exp"       # relative-lyapunov | relative-constant |
//!                             # absolute-decaying | absolute-exp
//! beta = 0.5
//!
//! [output]
//! sample_period = 0.05
//! ```
//!
//! Graphs may alternatively be given as a full `laplacian` matrix or as a
//! `system_matrix` (its negation); the two are told apart by the sign of
//! the diagonal. Agent ids in files are 1-based; in-memory indices are
//! 0-based throughout.
//!
//! Event logs serialise to CSV with 17 significant digits, which
//! round-trips `f64` exactly, so a saved log supports bit-exact replay
//! and offline audits.

use std::fs;
use std::io::{self, BufRead, Write};
use std::path::{Path, PathBuf};

use serde::Deserialize;
use thiserror::Error;

use crate::engine::{EventRecord, Scenario, SimTrace, Termination};
use crate::graph::{Digraph, GraphError, Laplacian};
use crate::triggers::{MuFamily, TriggerRule};

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("invalid TOML: {0}")]
    Toml(#[from] toml::de::Error),
    #[error(transparent)]
    Graph(#[from] GraphError),
    #[error("graph section needs exactly one of `edges`, `laplacian`, or `system_matrix`")]
    GraphSourceAmbiguous,
    #[error("graph section with `path` must not carry inline graph data")]
    GraphPathConflict,
    #[error("`agents` is required with an edge list")]
    AgentsRequired,
    #[error("agent id {id} is outside 1..={max}")]
    AgentIdOutOfRange { id: usize, max: usize },
    #[error("matrix row {row} has {got} entries, expected {expected}")]
    RaggedMatrix { row: usize, expected: usize, got: usize },
    #[error("`agents` = {agents} does not match the {rows}-row matrix")]
    AgentsMatrixMismatch { agents: usize, rows: usize },
    #[error("matrix row {row} sums to {sum:e}; rows of a Laplacian must vanish")]
    MatrixRowSum { row: usize, sum: f64 },
    #[error("matrix mixes diagonal signs; cannot tell a Laplacian from a system matrix")]
    MatrixSignsMixed,
    #[error("initial state has {got} entries for {expected} agents")]
    InitialLength { expected: usize, got: usize },
    #[error("unknown mode {0:?}; use \"event\" or \"self\"")]
    UnknownMode(String),
    #[error("unknown rule kind {0:?}")]
    UnknownRuleKind(String),
    #[error("unknown decay family {0:?}; use \"exponential\" or \"polynomial\"")]
    UnknownMuFamily(String),
    #[error("rule field `{field}` is required for kind {kind:?}")]
    MissingRuleField { kind: String, field: &'static str },
    #[error("rule field `{field}` does not apply to kind {kind:?}")]
    ForeignRuleField { kind: String, field: &'static str },
    #[error("line {line}: expected {expected} comma-separated fields, found {got}")]
    CsvShape { line: usize, expected: usize, got: usize },
    #[error("line {line}: cannot parse {text:?} as a number")]
    CsvNumber { line: usize, text: String },
    #[error("event log is empty or missing the initial wave at t = 0")]
    EventLogIncomplete,
}

/// How the engine should be driven.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunMode {
    Event,
    SelfTriggered,
}

/// A fully resolved scenario file.
#[derive(Debug, Clone)]
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub mode: RunMode,
    pub sample_period: Option<f64>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioFile {
    graph: GraphSpec,
    scenario: ScenarioSection,
    rule: RuleSpec,
    output: Option<OutputSection>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct GraphSpec {
    path: Option<String>,
    agents: Option<usize>,
    edges: Option<Vec<EdgeSpec>>,
    laplacian: Option<Vec<Vec<f64>>>,
    system_matrix: Option<Vec<Vec<f64>>>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct EdgeSpec {
    src: usize,
    dst: usize,
    weight: f64,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ScenarioSection {
    initial_state: Vec<f64>,
    mode: Option<String>,
    horizon: Option<f64>,
    consensus_tol: Option<f64>,
    event_cap: Option<usize>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct RuleSpec {
    kind: String,
    a: Option<f64>,
    beta: Option<f64>,
    c: Option<f64>,
    mu: Option<String>,
    mu_rate: Option<f64>,
    mu_power: Option<f64>,
    // Accepted for forward compatibility; currently ignored.
    #[allow(dead_code)]
    phi: Option<toml::Value>,
    #[allow(dead_code)]
    alpha: Option<toml::Value>,
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct OutputSection {
    sample_period: Option<f64>,
}

/// Loads a scenario file; a `[graph] path` entry is resolved relative to
/// the scenario file's directory.
pub fn load_scenario(path: &Path) -> Result<LoadedScenario, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    let base = path.parent().unwrap_or_else(|| Path::new("."));
    parse_scenario(&text, base)
}

/// Parses scenario TOML; relative graph paths resolve against `base`.
pub fn parse_scenario(text: &str, base: &Path) -> Result<LoadedScenario, ConfigError> {
    let file: ScenarioFile = toml::from_str(text)?;
    let laplacian = resolve_graph(&file.graph, base)?;
    let m = laplacian.dim();
    let sec = &file.scenario;
    if sec.initial_state.len() != m {
        return Err(ConfigError::InitialLength { expected: m, got: sec.initial_state.len() });
    }
    let mode = match sec.mode.as_deref() {
        None | Some("event") => RunMode::Event,
        Some("self") => RunMode::SelfTriggered,
        Some(other) => return Err(ConfigError::UnknownMode(other.to_string())),
    };
    let rule = build_rule(&file.rule)?;
    let mut scenario = Scenario::new(laplacian, sec.initial_state.clone(), rule);
    if let Some(h) = sec.horizon {
        scenario.horizon = h;
    }
    if let Some(t) = sec.consensus_tol {
        scenario.consensus_tol = t;
    }
    if let Some(c) = sec.event_cap {
        scenario.event_cap = c;
    }
    let sample_period = file.output.and_then(|o| o.sample_period);
    Ok(LoadedScenario { scenario, mode, sample_period })
}

/// Loads a standalone graph file.
pub fn load_graph(path: &Path) -> Result<Laplacian, ConfigError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    parse_graph(&text)
}

/// Parses graph TOML (the same fields as a `[graph]` section, sans `path`).
pub fn parse_graph(text: &str) -> Result<Laplacian, ConfigError> {
    let spec: GraphSpec = toml::from_str(text)?;
    if spec.path.is_some() {
        return Err(ConfigError::GraphPathConflict);
    }
    graph_from_spec(&spec)
}

fn resolve_graph(spec: &GraphSpec, base: &Path) -> Result<Laplacian, ConfigError> {
    match &spec.path {
        Some(rel) => {
            if spec.agents.is_some()
                || spec.edges.is_some()
                || spec.laplacian.is_some()
                || spec.system_matrix.is_some()
            {
                return Err(ConfigError::GraphPathConflict);
            }
            load_graph(&base.join(rel))
        }
        None => graph_from_spec(spec),
    }
}

fn graph_from_spec(spec: &GraphSpec) -> Result<Laplacian, ConfigError> {
    let sources =
        [spec.edges.is_some(), spec.laplacian.is_some(), spec.system_matrix.is_some()];
    if sources.iter().filter(|&&s| s).count() != 1 {
        return Err(ConfigError::GraphSourceAmbiguous);
    }
    if let Some(edges) = &spec.edges {
        let m = spec.agents.ok_or(ConfigError::AgentsRequired)?;
        let mut list = Vec::with_capacity(edges.len());
        for e in edges {
            for id in [e.src, e.dst] {
                if id == 0 || id > m {
                    return Err(ConfigError::AgentIdOutOfRange { id, max: m });
                }
            }
            list.push((e.src - 1, e.dst - 1, e.weight));
        }
        return Ok(Digraph::build(m, &list)?.laplacian());
    }
    let rows = spec
        .laplacian
        .as_ref()
        .or(spec.system_matrix.as_ref())
        .expect("exactly one source is present");
    let negate = detect_negation(rows)?;
    let m = rows.len();
    if let Some(agents) = spec.agents {
        if agents != m {
            return Err(ConfigError::AgentsMatrixMismatch { agents, rows: m });
        }
    }
    for (i, row) in rows.iter().enumerate() {
        if row.len() != m {
            return Err(ConfigError::RaggedMatrix { row: i + 1, expected: m, got: row.len() });
        }
    }
    let sign = if negate { -1.0 } else { 1.0 };
    let mat =
        nalgebra::DMatrix::from_fn(m, m, |i, j| sign * rows[i][j]);
    Laplacian::from_matrix(mat).map_err(|e| match e {
        GraphError::NonzeroRowSum { row, sum } => {
            ConfigError::MatrixRowSum { row: row + 1, sum }
        }
        other => ConfigError::Graph(other),
    })
}

/// `false` if `rows` already has Laplacian signs (non-negative diagonal),
/// `true` if it is a system matrix (non-positive diagonal) that must be
/// negated.
fn detect_negation(rows: &[Vec<f64>]) -> Result<bool, ConfigError> {
    let mut pos = false;
    let mut neg = false;
    for (i, row) in rows.iter().enumerate() {
        if let Some(&d) = row.get(i) {
            pos |= d > 0.0;
            neg |= d < 0.0;
        }
    }
    match (pos, neg) {
        (true, true) => Err(ConfigError::MatrixSignsMixed),
        (false, true) => Ok(true),
        _ => Ok(false),
    }
}

fn build_rule(spec: &RuleSpec) -> Result<TriggerRule, ConfigError> {
    let kind = spec.kind.as_str();
    let need = |field: &'static str, v: Option<f64>| {
        v.ok_or(ConfigError::MissingRuleField { kind: kind.to_string(), field })
    };
    let forbid = |field: &'static str, absent: bool| {
        if absent {
            Ok(())
        } else {
            Err(ConfigError::ForeignRuleField { kind: kind.to_string(), field })
        }
    };
    match kind {
        "relative-lyapunov" => {
            forbid("c", spec.c.is_none())?;
            let beta = need("beta", spec.beta)?;
            let mu = mu_family(spec, Some(beta))?;
            Ok(TriggerRule::RelativeLyapunov { a: spec.a, beta, mu })
        }
        "relative-constant" => {
            forbid("a", spec.a.is_none())?;
            forbid("beta", spec.beta.is_none())?;
            forbid("mu", spec.mu.is_none())?;
            Ok(TriggerRule::RelativeConstant { c: need("c", spec.c)? })
        }
        "absolute-decaying" => {
            forbid("c", spec.c.is_none())?;
            forbid("beta", spec.beta.is_none())?;
            if spec.mu.is_none() {
                return Err(ConfigError::MissingRuleField { kind: kind.to_string(), field: "mu" });
            }
            let mu = mu_family(spec, None)?;
            Ok(TriggerRule::AbsoluteDecaying { mu, a: spec.a })
        }
        "absolute-exp" => {
            forbid("c", spec.c.is_none())?;
            forbid("mu", spec.mu.is_none())?;
            Ok(TriggerRule::AbsoluteExp { beta: need("beta", spec.beta)?, a: spec.a })
        }
        other => Err(ConfigError::UnknownRuleKind(other.to_string())),
    }
}

/// Resolves the decay family of a rule. With `default_rate` set (the
/// relative rule), a missing family falls back to an exponential weight
/// at that rate.
fn mu_family(spec: &RuleSpec, default_rate: Option<f64>) -> Result<MuFamily, ConfigError> {
    let kind = spec.kind.as_str();
    let family = match (&spec.mu, default_rate) {
        (Some(f), _) => f.as_str(),
        (None, Some(rate)) => {
            return Ok(MuFamily::Exponential { beta: spec.mu_rate.unwrap_or(rate) });
        }
        (None, None) => {
            return Err(ConfigError::MissingRuleField { kind: kind.to_string(), field: "mu" })
        }
    };
    match family {
        "exponential" => {
            if spec.mu_power.is_some() {
                return Err(ConfigError::ForeignRuleField { kind: kind.to_string(), field: "mu_power" });
            }
            let rate = spec.mu_rate.or(default_rate).ok_or(ConfigError::MissingRuleField {
                kind: kind.to_string(),
                field: "mu_rate",
            })?;
            Ok(MuFamily::Exponential { beta: rate })
        }
        "polynomial" => {
            if spec.mu_rate.is_some() {
                return Err(ConfigError::ForeignRuleField { kind: kind.to_string(), field: "mu_rate" });
            }
            let p = spec.mu_power.ok_or(ConfigError::MissingRuleField {
                kind: kind.to_string(),
                field: "mu_power",
            })?;
            Ok(MuFamily::Polynomial { p })
        }
        other => Err(ConfigError::UnknownMuFamily(other.to_string())),
    }
}

/// Serialises a float with 17 significant digits; parsing it back yields
/// the identical bits.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Writes an event log. Agent ids are 1-based in the file.
pub fn write_events_csv(mut w: impl Write, events: &[EventRecord]) -> io::Result<()> {
    writeln!(w, "time,agent,state,control,error,threshold")?;
    for ev in events {
        writeln!(
            w,
            "{},{},{},{},{},{}",
            fmt_f64(ev.time),
            ev.agent + 1,
            fmt_f64(ev.state),
            fmt_f64(ev.control),
            fmt_f64(ev.error_before),
            fmt_f64(ev.threshold),
        )?;
    }
    Ok(())
}

/// Reads an event log written by [`write_events_csv`].
pub fn read_events_csv(r: impl BufRead) -> Result<Vec<EventRecord>, ConfigError> {
    let mut events = Vec::new();
    for (idx, line) in r.lines().enumerate() {
        let line = line.map_err(|source| ConfigError::Io { path: PathBuf::from("<events>"), source })?;
        let line = line.trim();
        if idx == 0 || line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != 6 {
            return Err(ConfigError::CsvShape { line: idx + 1, expected: 6, got: fields.len() });
        }
        let num = |text: &str| -> Result<f64, ConfigError> {
            text.parse::<f64>()
                .map_err(|_| ConfigError::CsvNumber { line: idx + 1, text: text.to_string() })
        };
        let agent: usize = fields[1]
            .parse()
            .map_err(|_| ConfigError::CsvNumber { line: idx + 1, text: fields[1].to_string() })?;
        if agent == 0 {
            return Err(ConfigError::CsvNumber { line: idx + 1, text: fields[1].to_string() });
        }
        events.push(EventRecord {
            time: num(fields[0])?,
            agent: agent - 1,
            state: num(fields[2])?,
            control: num(fields[3])?,
            error_before: num(fields[4])?,
            threshold: num(fields[5])?,
        });
    }
    Ok(events)
}

/// Rebuilds a replayable trace from a saved event log. The initial wave
/// at `t = 0` carries every agent's starting state, so nothing else is
/// needed; `final_time` defaults to the last event time.
pub fn trace_from_events(
    events: Vec<EventRecord>,
    final_time: Option<f64>,
) -> Result<SimTrace, ConfigError> {
    let m = events.iter().take_while(|e| e.time == 0.0).count();
    if m == 0 {
        return Err(ConfigError::EventLogIncomplete);
    }
    let mut initial = vec![f64::NAN; m];
    let mut trigger_counts = vec![0usize; m];
    for ev in &events {
        if ev.agent >= m {
            return Err(ConfigError::EventLogIncomplete);
        }
        trigger_counts[ev.agent] += 1;
    }
    for ev in &events[..m] {
        initial[ev.agent] = ev.state;
    }
    if initial.iter().any(|x| x.is_nan()) {
        return Err(ConfigError::EventLogIncomplete);
    }
    let final_time = final_time.unwrap_or_else(|| events.last().map_or(0.0, |e| e.time));
    let mut trace = SimTrace {
        initial,
        events,
        final_time,
        final_state: Vec::new(),
        trigger_counts,
        recompute_counts: vec![0; m],
        termination: Termination::Horizon,
    };
    trace.final_state = trace.replayer().state_at(final_time).to_vec();
    Ok(trace)
}

/// Writes sampled states: `time,x1,...,xm` every `period` plus the final
/// instant.
pub fn write_trace_csv(mut w: impl Write, trace: &SimTrace, period: f64) -> io::Result<()> {
    let m = trace.agent_count();
    write!(w, "time")?;
    for i in 1..=m {
        write!(w, ",x{i}")?;
    }
    writeln!(w)?;
    let mut replay = trace.replayer();
    let period = if period > 0.0 { period } else { trace.final_time.max(1.0) };
    let mut t = 0.0_f64;
    loop {
        let state = replay.state_at(t.min(trace.final_time));
        write!(w, "{}", fmt_f64(t.min(trace.final_time)))?;
        for x in state {
            write!(w, ",{}", fmt_f64(*x))?;
        }
        writeln!(w)?;
        if t >= trace.final_time {
            break;
        }
        t += period;
    }
    Ok(())
}

/// Writes a `key=value` run summary.
pub fn write_summary(mut w: impl Write, trace: &SimTrace) -> io::Result<()> {
    let termination = match trace.termination {
        Termination::Consensus => "consensus",
        Termination::Horizon => "horizon",
        Termination::EventCap => "event-cap",
    };
    writeln!(w, "termination={termination}")?;
    writeln!(w, "events={}", trace.events.len())?;
    writeln!(w, "final_time={}", fmt_f64(trace.final_time))?;
    writeln!(w, "final_spread={}", fmt_f64(crate::analysis::max_spread(&trace.final_state)))?;
    match trace.min_inter_event() {
        Some(gap) => writeln!(w, "min_inter_event={}", fmt_f64(gap))?,
        None => writeln!(w, "min_inter_event=none")?,
    }
    let counts: Vec<String> = trace.trigger_counts.iter().map(|c| c.to_string()).collect();
    writeln!(w, "trigger_counts={}", counts.join(","))?;
    let recomputes: Vec<String> = trace.recompute_counts.iter().map(|c| c.to_string()).collect();
    writeln!(w, "recompute_counts={}", recomputes.join(","))?;
    Ok(())
}
