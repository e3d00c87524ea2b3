//! Command line front end for the pull-based consensus simulator.
//!
//! Exit codes: 0 success, 2 configuration problems, 3 structural or
//! hypothesis failures (no spanning tree, rule invalid for the graph),
//! 4 Zeno-suspect runs that hit the event cap, 1 anything else.

use std::fs::{self, File};
use std::io::{self, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use pullcon::analysis::{
    self, audit_soundness, audit_zeno, check_bound, fit_decay, max_spread, sample_along,
};
use pullcon::config::{
    self, fmt_f64, load_scenario, parse_graph, parse_scenario, ConfigError, LoadedScenario,
    RunMode,
};
use pullcon::engine::{
    run_event_triggered, run_self_triggered, validate_scenario_rule, EngineError, Scenario,
};
use pullcon::graph::Laplacian;
use pullcon::random;
use pullcon::spectral::{constants_for, scc_constants, verify_inequalities};
use pullcon::triggers::TriggerRule;

#[derive(Parser)]
#[command(name = "pullcon", version, about = "Event-triggered consensus simulator")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Simulate a scenario and write events.csv, trace.csv and summary.txt.
    Run(RunArgs),
    /// Print spectral constants and certificate margins of a graph.
    Constants(ConstantsArgs),
    /// Check event-triggered against self-triggered execution.
    Compare(CompareArgs),
    /// Audit a saved event log against its scenario.
    Analyze(AnalyzeArgs),
}

#[derive(Args)]
struct RunArgs {
    /// Scenario TOML file.
    #[arg(long)]
    config: PathBuf,
    /// Directory for the output artefacts.
    #[arg(long, default_value = ".")]
    out: PathBuf,
    /// Sampling period for trace.csv; overrides the scenario file.
    #[arg(long)]
    sample_period: Option<f64>,
    /// Execution mode; overrides the scenario file.
    #[arg(long, value_enum)]
    mode: Option<ModeArg>,
}

#[derive(Args)]
struct ConstantsArgs {
    /// Graph TOML file, or a scenario file whose graph is used.
    #[arg(long)]
    config: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct CompareArgs {
    /// Scenario TOML file to run in both modes.
    #[arg(long, conflicts_with = "batch")]
    config: Option<PathBuf>,
    /// Number of random cases instead of a fixed scenario.
    #[arg(long)]
    batch: Option<usize>,
    /// Seed for the random cases.
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Largest agent count for random cases.
    #[arg(long, default_value_t = 6)]
    agents: usize,
}

#[derive(Args)]
struct AnalyzeArgs {
    /// Scenario TOML file the log was produced from.
    #[arg(long)]
    config: PathBuf,
    /// Event log written by `run`.
    #[arg(long)]
    events: PathBuf,
    /// Write the report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Event,
    #[value(name = "self")]
    SelfTriggered,
}

impl From<ModeArg> for RunMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::Event => RunMode::Event,
            ModeArg::SelfTriggered => RunMode::SelfTriggered,
        }
    }
}

#[derive(Debug, Error)]
enum CliError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error(transparent)]
    Engine(EngineError),
    #[error("event cap {cap} reached at t = {time:.6}; execution is Zeno-suspect")]
    Zeno { time: f64, cap: usize },
    #[error("cannot write {path}: {source}")]
    Write {
        path: PathBuf,
        source: io::Error,
    },
    #[error("{0}")]
    Mismatch(String),
}

impl From<EngineError> for CliError {
    fn from(e: EngineError) -> Self {
        match e {
            EngineError::ZenoSuspect { time, cap, .. } => CliError::Zeno { time, cap },
            other => CliError::Engine(other),
        }
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Config(_) => 2,
            CliError::Engine(
                EngineError::NoSpanningTree
                | EngineError::ReducibleNeedsExp
                | EngineError::Trigger(_)
                | EngineError::Spectral(_),
            ) => 3,
            CliError::Zeno { .. } => 4,
            _ => 1,
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match dispatch(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn dispatch(command: Command) -> Result<(), CliError> {
    match command {
        Command::Run(args) => cmd_run(args),
        Command::Constants(args) => cmd_constants(args),
        Command::Compare(args) => cmd_compare(args),
        Command::Analyze(args) => cmd_analyze(args),
    }
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path)
        .map(BufWriter::new)
        .map_err(|source| CliError::Write { path: path.to_path_buf(), source })
}

fn write_err(path: &Path) -> impl FnOnce(io::Error) -> CliError + '_ {
    move |source| CliError::Write { path: path.to_path_buf(), source }
}

fn cmd_run(args: RunArgs) -> Result<(), CliError> {
    let LoadedScenario { scenario, mode, sample_period } = load_scenario(&args.config)?;
    let mode = args.mode.map_or(mode, RunMode::from);
    let sample_period = args.sample_period.or(sample_period);
    let outcome = match mode {
        RunMode::Event => run_event_triggered(&scenario),
        RunMode::SelfTriggered => run_self_triggered(&scenario),
    };
    // A capped run still yields its partial trace; write it before
    // reporting the failure so the evidence is on disk.
    let (trace, zeno) = match outcome {
        Ok(trace) => (trace, None),
        Err(EngineError::ZenoSuspect { time, cap, trace }) => {
            (*trace, Some(CliError::Zeno { time, cap }))
        }
        Err(other) => return Err(other.into()),
    };
    fs::create_dir_all(&args.out).map_err(write_err(&args.out))?;
    let events_path = args.out.join("events.csv");
    config::write_events_csv(create(&events_path)?, &trace.events)
        .map_err(write_err(&events_path))?;
    if let Some(period) = sample_period {
        let trace_path = args.out.join("trace.csv");
        config::write_trace_csv(create(&trace_path)?, &trace, period)
            .map_err(write_err(&trace_path))?;
    }
    let summary_path = args.out.join("summary.txt");
    config::write_summary(create(&summary_path)?, &trace).map_err(write_err(&summary_path))?;
    let mut stdout = io::stdout().lock();
    config::write_summary(&mut stdout, &trace)
        .map_err(|source| CliError::Write { path: PathBuf::from("<stdout>"), source })?;
    match zeno {
        Some(err) => Err(err),
        None => Ok(()),
    }
}

/// Accepts either a standalone graph file or a scenario file.
fn load_any_graph(path: &Path) -> Result<Laplacian, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|source| ConfigError::Io { path: path.to_path_buf(), source })?;
    match parse_graph(&text) {
        Ok(l) => Ok(l),
        Err(graph_err) => {
            let base = path.parent().unwrap_or_else(|| Path::new("."));
            match parse_scenario(&text, base) {
                Ok(loaded) => Ok(loaded.scenario.laplacian),
                Err(scenario_err) => {
                    if text.contains("[scenario]") {
                        Err(scenario_err.into())
                    } else {
                        Err(graph_err.into())
                    }
                }
            }
        }
    }
}

fn cmd_constants(args: ConstantsArgs) -> Result<(), CliError> {
    let laplacian = load_any_graph(&args.config)?;
    let digraph = laplacian.digraph();
    if !digraph.has_spanning_tree() {
        return Err(CliError::Engine(EngineError::NoSpanningTree));
    }
    let mut report = String::new();
    let m = laplacian.dim();
    report.push_str(&format!("agents={m}\n"));
    if digraph.is_strongly_connected() {
        let c = constants_for(&laplacian).map_err(|e| CliError::Engine(e.into()))?;
        report.push_str("strongly_connected=true\n");
        report.push_str(&format!("lambda2={}\n", fmt_f64(c.lambda2)));
        report.push_str(&format!("lambda_max={}\n", fmt_f64(c.lambda_max)));
        report.push_str(&format!("mu_max={}\n", fmt_f64(c.mu_max)));
        report.push_str(&format!("gamma2={}\n", fmt_f64(c.gamma2)));
        report.push_str(&format!("rho_ltl={}\n", fmt_f64(c.rho_ltl)));
        report.push_str(&format!("xi_max={}\n", fmt_f64(c.xi_max)));
        report.push_str(&format!("xi={}\n", join_floats(c.xi.iter().copied())));
        let ineq = verify_inequalities(&c);
        report.push_str(&format!("ineq_ru_min={}\n", fmt_f64(ineq.ru_min)));
        report.push_str(&format!("ineq_uull_min={}\n", fmt_f64(ineq.uull_min)));
        report.push_str(&format!("ineq_rll_upper_min={}\n", fmt_f64(ineq.rll_upper_min)));
        report.push_str(&format!("ineq_rll_lower_min={}\n", fmt_f64(ineq.rll_lower_min)));
    } else {
        let pf = laplacian
            .pf_normal_form()
            .map_err(|e| CliError::Config(ConfigError::Graph(e)))?;
        let scc = scc_constants(&pf).map_err(|e| CliError::Engine(e.into()))?;
        report.push_str("strongly_connected=false\n");
        report.push_str(&format!("blocks={}\n", pf.block_count()));
        for (k, block) in pf.blocks().iter().enumerate() {
            let ids: Vec<String> = block.iter().map(|&i| (i + 1).to_string()).collect();
            report.push_str(&format!("block_{}={}\n", k + 1, ids.join(",")));
        }
        let roots: Vec<String> = scc.root_agents.iter().map(|&i| (i + 1).to_string()).collect();
        report.push_str(&format!("root_agents={}\n", roots.join(",")));
        report.push_str(&format!("root_lambda2={}\n", fmt_f64(scc.root.lambda2)));
        report.push_str(&format!("root_xi={}\n", join_floats(scc.root.xi.iter().copied())));
        for (k, block) in scc.non_root.iter().enumerate() {
            report.push_str(&format!(
                "ordering_margin_{}={}\n",
                k + 1,
                fmt_f64(block.ordering_margin())
            ));
        }
    }
    emit(args.out.as_deref(), &report)
}

fn join_floats(values: impl Iterator<Item = f64>) -> String {
    values.map(fmt_f64).collect::<Vec<_>>().join(",")
}

fn emit(out: Option<&Path>, report: &str) -> Result<(), CliError> {
    match out {
        Some(path) => {
            let mut w = create(path)?;
            w.write_all(report.as_bytes()).map_err(write_err(path))?;
            w.flush().map_err(write_err(path))
        }
        None => {
            print!("{report}");
            Ok(())
        }
    }
}

fn cmd_compare(args: CompareArgs) -> Result<(), CliError> {
    match (&args.config, args.batch) {
        (Some(path), None) => {
            let LoadedScenario { scenario, .. } = load_scenario(path)?;
            let line = compare_once(&scenario)?;
            println!("{line}");
            println!("cases=1 status=ok");
            Ok(())
        }
        (None, Some(n)) => {
            let mut rng = ChaCha8Rng::seed_from_u64(args.seed);
            for k in 0..n {
                let (graph, initial, beta) = random::compare_case(&mut rng, args.agents);
                let mut scenario = Scenario::new(
                    graph.laplacian(),
                    initial,
                    TriggerRule::AbsoluteExp { beta, a: None },
                );
                scenario.horizon = 12.0;
                scenario.consensus_tol = 0.0;
                let line = compare_once(&scenario)
                    .map_err(|e| match e {
                        CliError::Mismatch(msg) => CliError::Mismatch(format!("case {k}: {msg}")),
                        other => other,
                    })?;
                println!("case={k} {line}");
            }
            println!("cases={n} status=ok");
            Ok(())
        }
        _ => Err(CliError::Mismatch(
            "use exactly one of --config or --batch".to_string(),
        )),
    }
}

fn compare_once(scenario: &Scenario) -> Result<String, CliError> {
    let event = run_event_triggered(scenario)?;
    let selftrig = run_self_triggered(scenario)?;
    if event.events.len() != selftrig.events.len() {
        return Err(CliError::Mismatch(format!(
            "event counts differ: {} event-triggered vs {} self-triggered",
            event.events.len(),
            selftrig.events.len()
        )));
    }
    let mut max_dt = 0.0f64;
    for (a, b) in event.events.iter().zip(&selftrig.events) {
        if a.agent != b.agent {
            return Err(CliError::Mismatch(format!(
                "agent order diverges at t = {:.6}: {} vs {}",
                a.time,
                a.agent + 1,
                b.agent + 1
            )));
        }
        max_dt = max_dt.max((a.time - b.time).abs());
    }
    let max_dx = event
        .final_state
        .iter()
        .zip(&selftrig.final_state)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0f64, f64::max);
    if max_dt > 1e-6 || max_dx > 1e-6 {
        return Err(CliError::Mismatch(format!(
            "modes diverge: max_time_delta={} max_final_delta={}",
            fmt_f64(max_dt),
            fmt_f64(max_dx)
        )));
    }
    Ok(format!(
        "agents={} events={} max_time_delta={} max_final_delta={}",
        scenario.initial.len(),
        event.events.len(),
        fmt_f64(max_dt),
        fmt_f64(max_dx)
    ))
}

fn cmd_analyze(args: AnalyzeArgs) -> Result<(), CliError> {
    let LoadedScenario { scenario, .. } = load_scenario(&args.config)?;
    let file = File::open(&args.events)
        .map_err(|source| ConfigError::Io { path: args.events.clone(), source })?;
    let events = config::read_events_csv(BufReader::new(file))?;
    let trace = config::trace_from_events(events, None)?;
    if trace.agent_count() != scenario.laplacian.dim() {
        return Err(CliError::Mismatch(format!(
            "event log has {} agents but the scenario graph has {}",
            trace.agent_count(),
            scenario.laplacian.dim()
        )));
    }
    let rule = validate_scenario_rule(&scenario)?;
    let l = &scenario.laplacian;
    let mut report = String::new();
    report.push_str(&format!("events={}\n", trace.events.len()));
    report.push_str(&format!("final_time={}\n", fmt_f64(trace.final_time)));
    report.push_str(&format!("final_spread={}\n", fmt_f64(max_spread(&trace.final_state))));
    match trace.min_inter_event() {
        Some(gap) => report.push_str(&format!("min_inter_event={}\n", fmt_f64(gap))),
        None => report.push_str("min_inter_event=none\n"),
    }
    let sound = audit_soundness(&trace, l, &rule, 8);
    report.push_str(&format!("soundness_max_excess={}\n", fmt_f64(sound.max_excess)));
    report.push_str(&format!(
        "soundness_max_boundary_gap={}\n",
        fmt_f64(sound.max_boundary_gap)
    ));
    if let Some(mu) = rule.effective_mu() {
        let zeno = audit_zeno(&trace, l, &mu);
        match zeno.min_gap {
            Some(gap) => report.push_str(&format!("zeno_min_gap={}\n", fmt_f64(gap))),
            None => report.push_str("zeno_min_gap=none\n"),
        }
        report.push_str(&format!("zeno_floor={}\n", fmt_f64(zeno.floor)));
        report.push_str(&format!("zeno_holds={}\n", zeno.holds()));
    }
    let spread_samples = sample_along(&trace, 200, |_, x| max_spread(x));
    if let Ok(fit) = fit_decay(&spread_samples) {
        report.push_str(&format!("spread_decay_rate={}\n", fmt_f64(fit.rate)));
    }
    if let Some(env) = &rule.envelope {
        if let Ok(c) = constants_for(l) {
            let bound = check_bound(&trace, &c, env, 200)
                .expect("trace dimension was checked against the graph");
            report.push_str(&format!("envelope_worst_ratio={}\n", fmt_f64(bound.worst_ratio)));
            match bound.hold_from {
                Some(t) => report.push_str(&format!("envelope_hold_from={}\n", fmt_f64(t))),
                None => report.push_str("envelope_hold_from=never\n"),
            }
            if let Ok(v0) = analysis::lyapunov(&c, &trace.initial) {
                let vt = analysis::lyapunov(&c, &trace.final_state).expect("same dimension");
                report.push_str(&format!("lyapunov_initial={}\n", fmt_f64(v0)));
                report.push_str(&format!("lyapunov_final={}\n", fmt_f64(vt)));
            }
        }
    }
    emit(args.out.as_deref(), &report)
}
