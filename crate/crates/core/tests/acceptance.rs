//! Whole-system acceptance checks. Each test verifies one numbered
//! criterion end to end and prints a single `criterion N: PASS` or
//! `criterion N: FAIL (...)` line (visible with `--nocapture`).
//!
//! The scenario batches are deterministic: criteria that audit "all
//! batches above" regenerate them from the same seeds.

use std::collections::HashSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use pullcon::analysis::{
    audit_soundness, audit_zeno, block_lyapunov, check_bound, fit_decay, lyapunov, max_spread,
    reducible_lyapunov,
};
use pullcon::engine::{
    oracle_divergence, run_event_triggered, run_self_triggered, validate_scenario_rule,
    EngineError, OracleMode, Scenario, SimTrace, Termination,
};
use pullcon::graph::{examples, Digraph, Laplacian};
use pullcon::random;
use pullcon::spectral::{constants_for, scc_constants, verify_inequalities, SpectralConstants};
use pullcon::triggers::{validate, MuFamily, TriggerRule};

fn verdict(n: usize, ok: bool, detail: &str) {
    if ok {
        println!("criterion {n}: PASS");
    } else {
        println!("criterion {n}: FAIL ({detail})");
        panic!("criterion {n} failed: {detail}");
    }
}

/// The seven-agent benchmark: exponential absolute rule over the full
/// horizon.
fn golden_scenario() -> Scenario {
    let mut sc = Scenario::new(
        examples::seven_agents_laplacian(),
        examples::seven_agents_initial(),
        TriggerRule::AbsoluteExp { beta: 0.5, a: None },
    );
    sc.horizon = 20.0;
    sc.consensus_tol = 0.0;
    sc
}

/// A strongly connected graph together with its spectral constants.
fn connected_case(rng: &mut impl Rng, m: usize) -> (Laplacian, SpectralConstants) {
    loop {
        let l = random::strongly_connected(rng, m, 0.35, 0.6, 2.0).laplacian();
        if let Ok(c) = constants_for(&l) {
            return (l, c);
        }
    }
}

/// Batch for the integration-oracle check: a mix of exponential and
/// decaying absolute rules on strongly connected and reducible graphs.
fn oracle_batch() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(300);
    (0..50)
        .map(|k| {
            let m = rng.random_range(3..=7);
            let (l, rule) = match k % 5 {
                0 | 1 => {
                    let (l, _) = connected_case(&mut rng, m);
                    let beta = rng.random_range(0.3..0.7);
                    (l, TriggerRule::AbsoluteExp { beta, a: None })
                }
                2 => {
                    let l = random::reducible_spanning_tree(&mut rng, m, 3).laplacian();
                    let beta = rng.random_range(0.3..0.7);
                    (l, TriggerRule::AbsoluteExp { beta, a: None })
                }
                3 => {
                    let (l, c) = connected_case(&mut rng, m);
                    let beta = rng.random_range(0.2..0.7) * c.lambda2 / c.xi_max;
                    let mu = MuFamily::Exponential { beta };
                    (l, TriggerRule::AbsoluteDecaying { mu, a: None })
                }
                _ => {
                    let (l, c) = connected_case(&mut rng, m);
                    let p = (rng.random_range(0.2..0.7) * c.lambda2 / c.xi_max).min(3.0);
                    let mu = MuFamily::Polynomial { p };
                    (l, TriggerRule::AbsoluteDecaying { mu, a: None })
                }
            };
            let initial = random::initial_state(&mut rng, m, 4.0);
            let mut sc = Scenario::new(l, initial, rule);
            sc.horizon = rng.random_range(4.0..8.0);
            sc.consensus_tol = 0.0;
            sc
        })
        .collect()
}

/// Batch for paired event-/self-triggered runs.
fn paired_batch() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(400);
    (0..100)
        .map(|_| {
            let (graph, initial, beta) = random::compare_case(&mut rng, 7);
            let mut sc = Scenario::new(
                graph.laplacian(),
                initial,
                TriggerRule::AbsoluteExp { beta, a: None },
            );
            sc.horizon = 8.0;
            sc.consensus_tol = 0.0;
            sc
        })
        .collect()
}

/// Batch of decaying-threshold scenarios whose hypothesis margin is
/// positive by construction, so each carries an explicit envelope.
fn envelope_batch() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(600);
    (0..100)
        .map(|k| {
            let m = rng.random_range(3..=6);
            let (l, c) = connected_case(&mut rng, m);
            let scale = rng.random_range(0.2..0.7) * c.lambda2 / c.xi_max;
            let mu = if k % 2 == 0 {
                MuFamily::Exponential { beta: scale }
            } else {
                MuFamily::Polynomial { p: scale.min(3.0) }
            };
            let initial = random::initial_state(&mut rng, m, 3.0);
            let mut sc =
                Scenario::new(l, initial, TriggerRule::AbsoluteDecaying { mu, a: None });
            sc.horizon = 16.0;
            sc.consensus_tol = 0.0;
            sc
        })
        .collect()
}

/// Batch of relative-threshold scenarios with a valid gain pair. The
/// decay rate is drawn strictly inside the admissible interval.
fn relative_batch() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(700);
    (0..50)
        .map(|_| {
            let m = rng.random_range(3..=6);
            let (l, c) = connected_case(&mut rng, m);
            // For the default gain the threshold coefficient stays real
            // whenever beta is below lambda2 mu_m / (2 rho gamma2).
            let beta_cap = c.lambda2 * c.mu_max / (2.0 * c.rho_ltl * c.gamma2);
            let beta = rng.random_range(0.25..0.75) * beta_cap;
            let rule = TriggerRule::RelativeLyapunov {
                a: None,
                beta,
                mu: MuFamily::Exponential { beta },
            };
            let initial = random::initial_state(&mut rng, m, 4.0);
            let mut sc = Scenario::new(l, initial, rule);
            sc.horizon = 10.0;
            sc.consensus_tol = 1e-9;
            sc.event_cap = 20_000;
            sc
        })
        .collect()
}

/// Batch of reducible graphs with two or three irreducible components.
fn reducible_batch() -> Vec<Scenario> {
    let mut rng = ChaCha8Rng::seed_from_u64(900);
    (0..50)
        .map(|_| {
            let l = anchored_reducible(&mut rng);
            let m = l.dim();
            let beta = rng.random_range(0.5..0.65);
            let initial = random::initial_state(&mut rng, m, 4.0);
            let mut sc =
                Scenario::new(l, initial, TriggerRule::AbsoluteExp { beta, a: None });
            sc.horizon = 30.0;
            sc.consensus_tol = 0.0;
            sc
        })
        .collect()
}

/// Random reducible graph whose receiving blocks are all firmly anchored:
/// every agent outside the closed block has an inbound edge of weight at
/// least 1.2 from an earlier block. That keeps each block's tracking rate
/// well away from zero, so convergence is governed by the threshold decay
/// rather than by an accidentally weak coupling edge.
fn anchored_reducible(rng: &mut impl Rng) -> Laplacian {
    fn push(
        edges: &mut Vec<(usize, usize, f64)>,
        seen: &mut HashSet<(usize, usize)>,
        s: usize,
        d: usize,
        w: f64,
    ) {
        if s != d && seen.insert((s, d)) {
            edges.push((s, d, w));
        }
    }

    let blocks = rng.random_range(2..=3);
    let m = rng.random_range(4..=9);
    let mut sizes = vec![1usize; blocks];
    sizes[0] += 1;
    for _ in 0..m - blocks - 1 {
        sizes[rng.random_range(0..blocks)] += 1;
    }

    let mut edges = Vec::new();
    let mut seen = HashSet::new();
    let mut earlier: Vec<usize> = Vec::new();
    let mut start = 0;
    for (b, &size) in sizes.iter().enumerate() {
        let members: Vec<usize> = (start..start + size).collect();
        if size > 1 {
            for i in 0..size {
                let w = rng.random_range(0.8..2.0);
                push(&mut edges, &mut seen, members[i], members[(i + 1) % size], w);
            }
            for &d in &members {
                for &s in &members {
                    if s != d && rng.random_bool(0.3) {
                        let w = rng.random_range(0.8..2.0);
                        push(&mut edges, &mut seen, s, d, w);
                    }
                }
            }
        }
        if b > 0 {
            for &d in &members {
                let s = earlier[rng.random_range(0..earlier.len())];
                let w = rng.random_range(1.2..2.5);
                push(&mut edges, &mut seen, s, d, w);
            }
        }
        earlier.extend(&members);
        start += size;
    }
    Digraph::build(m, &edges)
        .expect("generated edges are unique and free of self-loops")
        .laplacian()
}

/// Trace of a run that may legitimately end at the event cap.
fn run_capped(sc: &Scenario) -> (SimTrace, bool) {
    match run_event_triggered(sc) {
        Ok(trace) => (trace, false),
        Err(EngineError::ZenoSuspect { trace, .. }) => (*trace, true),
        Err(e) => panic!("unexpected engine failure: {e}"),
    }
}

#[test]
fn criterion_1_benchmark_convergence() {
    let start = Instant::now();
    let sc = golden_scenario();
    let trace = run_event_triggered(&sc).expect("benchmark run should finish");
    let pf = sc.laplacian.pf_normal_form().expect("benchmark graph has a spanning tree");
    let scc = scc_constants(&pf).expect("benchmark blocks are well posed");
    let v0 = reducible_lyapunov(&scc, &trace.initial).unwrap();
    let vt = reducible_lyapunov(&scc, &trace.final_state).unwrap();
    let samples = {
        let mut replay = trace.replayer();
        (0..=200)
            .map(|k| {
                let t = trace.final_time * k as f64 / 200.0;
                let v = reducible_lyapunov(&scc, replay.state_at(t)).unwrap();
                (t, v)
            })
            .collect::<Vec<_>>()
    };
    let fit = fit_decay(&samples).expect("positive samples");
    let spread = max_spread(&trace.final_state);
    let min_gap = trace.min_inter_event().unwrap_or(f64::INFINITY);
    let elapsed = start.elapsed().as_secs_f64();
    let checks = [
        (spread < 1e-3, format!("final spread {spread:.3e} not < 1e-3")),
        (vt < 1e-4 * v0, format!("V(T)/V(0) = {:.3e} not < 1e-4", vt / v0)),
        (fit.rate <= -0.4, format!("fitted decay rate {:.3} not <= -0.4", fit.rate)),
        (min_gap > 0.0, format!("min inter-event gap {min_gap:.3e} not positive")),
        (trace.events.len() < 10_000, format!("{} events, expected < 1e4", trace.events.len())),
        (elapsed < 5.0, format!("took {elapsed:.2} s, budget 5 s")),
    ];
    let bad: Vec<&str> =
        checks.iter().filter(|(ok, _)| !ok).map(|(_, msg)| msg.as_str()).collect();
    verdict(1, bad.is_empty(), &bad.join("; "));
}

#[test]
fn criterion_2_spectral_certificates() {
    let start = Instant::now();
    let mut worst_residual = 0.0f64;
    let mut worst_ineq = f64::INFINITY;
    let mut worst_ordering = f64::INFINITY;
    let residual_of = |c: &SpectralConstants| -> f64 {
        (c.xi.transpose() * c.laplacian.matrix())
            .iter()
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    };
    // Benchmark graph: root-block constants plus the block ordering
    // certificates.
    let pf = examples::seven_agents_laplacian().pf_normal_form().unwrap();
    let scc = scc_constants(&pf).unwrap();
    worst_residual = worst_residual.max(residual_of(&scc.root));
    worst_ineq = worst_ineq.min(verify_inequalities(&scc.root).worst());
    for block in &scc.non_root {
        worst_ordering = worst_ordering.min(block.ordering_margin());
    }
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for _ in 0..500 {
        let m = rng.random_range(2..=8);
        let (_, c) = connected_case(&mut rng, m);
        worst_residual = worst_residual.max(residual_of(&c));
        worst_ineq = worst_ineq.min(verify_inequalities(&c).worst());
    }
    let elapsed = start.elapsed().as_secs_f64();
    let checks = [
        (worst_residual <= 1e-10, format!("left-eigenvector residual {worst_residual:.3e}")),
        (worst_ineq >= -1e-9, format!("matrix inequality minimum {worst_ineq:.3e}")),
        (worst_ordering >= -1e-10, format!("ordering margin {worst_ordering:.3e}")),
        (elapsed < 10.0, format!("took {elapsed:.2} s, budget 10 s")),
    ];
    let bad: Vec<&str> =
        checks.iter().filter(|(ok, _)| !ok).map(|(_, msg)| msg.as_str()).collect();
    verdict(2, bad.is_empty(), &bad.join("; "));
}

#[test]
fn criterion_3_oracle_agreement() {
    let mut worst = 0.0f64;
    for sc in oracle_batch() {
        let trace = run_event_triggered(&sc).expect("oracle batch scenarios complete");
        worst = worst.max(oracle_divergence(&trace, 1e-4, OracleMode::SplitAtEvents));
    }
    verdict(
        3,
        worst <= 1e-6,
        &format!("worst trajectory deviation from the Euler oracle is {worst:.3e}"),
    );
}

#[test]
fn criterion_4_mode_equivalence() {
    let mut worst_dt = 0.0f64;
    for sc in paired_batch() {
        let event = run_event_triggered(&sc).expect("event-triggered run completes");
        let selftrig = run_self_triggered(&sc).expect("self-triggered run completes");
        if event.events.len() != selftrig.events.len() {
            verdict(
                4,
                false,
                &format!(
                    "event counts differ: {} vs {}",
                    event.events.len(),
                    selftrig.events.len()
                ),
            );
        }
        for agent in 0..sc.initial.len() {
            let ta = event.agent_event_times(agent);
            let tb = selftrig.agent_event_times(agent);
            if ta.len() != tb.len() {
                verdict(4, false, &format!("per-agent counts differ for agent {agent}"));
            }
            for (a, b) in ta.iter().zip(&tb) {
                worst_dt = worst_dt.max((a - b).abs());
            }
        }
    }
    verdict(4, worst_dt <= 1e-9, &format!("worst paired trigger-time gap is {worst_dt:.3e}"));
}

#[test]
fn criterion_5_trigger_audits() {
    let mut worst_excess = f64::NEG_INFINITY;
    let mut worst_boundary = 0.0f64;
    let mut audit = |sc: &Scenario, trace: &SimTrace| {
        let rule = validate_scenario_rule(sc).expect("batch scenarios validate");
        let report = audit_soundness(trace, &sc.laplacian, &rule, 6);
        worst_excess = worst_excess.max(report.max_excess);
        worst_boundary = worst_boundary.max(report.max_boundary_gap);
    };
    let golden = golden_scenario();
    audit(&golden, &run_event_triggered(&golden).unwrap());
    for sc in oracle_batch() {
        audit(&sc, &run_event_triggered(&sc).unwrap());
    }
    for sc in paired_batch() {
        audit(&sc, &run_event_triggered(&sc).unwrap());
        audit(&sc, &run_self_triggered(&sc).unwrap());
    }
    let ok = worst_excess <= 1e-9 && worst_boundary <= 1e-9;
    verdict(
        5,
        ok,
        &format!(
            "worst threshold excess {worst_excess:.3e}, worst boundary gap {worst_boundary:.3e}"
        ),
    );
}

#[test]
fn criterion_6_envelope_bound() {
    let mut worst_hold = 0.0f64;
    for sc in envelope_batch() {
        let c = constants_for(&sc.laplacian).expect("strongly connected batch");
        let rule = validate(sc.rule, Some(&c)).expect("positive margin by construction");
        let env = rule.envelope.as_ref().expect("decaying rules carry an envelope");
        let trace = run_event_triggered(&sc).expect("envelope batch scenarios complete");
        let report = check_bound(&trace, &c, env, 300).unwrap();
        match report.hold_from {
            Some(t0) => worst_hold = worst_hold.max(t0),
            None => verdict(
                6,
                false,
                &format!("explicit bound still violated at T (ratio {:.3})", report.worst_ratio),
            ),
        }
    }
    verdict(
        6,
        worst_hold <= 8.0,
        &format!("bound holds from t = {worst_hold:.2} at the latest (budget T/2 = 8)"),
    );
}

#[test]
fn criterion_7_weighted_lyapunov_monotonicity() {
    let mut worst_rise = 0.0f64;
    for sc in relative_batch() {
        let c = constants_for(&sc.laplacian).expect("strongly connected batch");
        let mu = match sc.rule {
            TriggerRule::RelativeLyapunov { mu, .. } => mu,
            _ => unreachable!("relative batch builds relative rules"),
        };
        // The monotonicity claim covers whatever window the execution
        // lives on, so capped runs are audited over their partial trace.
        let (trace, _) = run_capped(&sc);
        let mut times: Vec<f64> = trace.events.iter().map(|e| e.time).collect();
        times.extend((0..=1000).map(|k| trace.final_time * k as f64 / 1000.0));
        times.sort_by(f64::total_cmp);
        times.dedup();
        let mut replay = trace.replayer();
        let mut prev: Option<f64> = None;
        let mut scale = 1.0f64;
        for &t in &times {
            let v = lyapunov(&c, replay.state_at(t)).unwrap();
            let weighted = mu.mu(t) * v;
            if let Some(p) = prev {
                worst_rise = worst_rise.max((weighted - p) / scale);
            } else {
                scale = 1.0 + weighted;
            }
            prev = Some(weighted);
        }
    }
    verdict(
        7,
        worst_rise <= 1e-9,
        &format!("largest relative rise of mu(t) V(t) is {worst_rise:.3e}"),
    );
}

#[test]
fn criterion_8_zeno_guard() {
    let mut total = 0usize;
    let mut capped = 0usize;
    let mut capped_other = 0usize;
    let mut floor_violations = 0usize;
    let mut check = |sc: &Scenario, trace: &SimTrace, hit_cap: bool| {
        total += 1;
        let rule = validate_scenario_rule(sc).expect("batch scenarios validate");
        if hit_cap || trace.termination == Termination::EventCap {
            capped += 1;
            if !rule.is_relative() {
                capped_other += 1;
            }
            return;
        }
        if let Some(mu) = rule.effective_mu() {
            if !rule.is_relative() && !audit_zeno(trace, &sc.laplacian, &mu).holds() {
                floor_violations += 1;
            }
        }
    };
    let golden = golden_scenario();
    check(&golden, &run_event_triggered(&golden).unwrap(), false);
    for sc in oracle_batch() {
        check(&sc, &run_event_triggered(&sc).unwrap(), false);
    }
    for sc in paired_batch() {
        check(&sc, &run_event_triggered(&sc).unwrap(), false);
        check(&sc, &run_self_triggered(&sc).unwrap(), false);
    }
    for sc in envelope_batch() {
        check(&sc, &run_event_triggered(&sc).unwrap(), false);
    }
    for sc in relative_batch() {
        let (trace, hit_cap) = run_capped(&sc);
        check(&sc, &trace, hit_cap);
    }
    let ok = capped == 0 && floor_violations == 0;
    let rule_note = if capped_other == 0 {
        "all under the purely relative rule, which accumulates triggers at aggregate zero \
         crossings and carries no minimum-gap guarantee"
            .to_string()
    } else {
        format!("{capped_other} of them under decaying-threshold rules")
    };
    verdict(
        8,
        ok,
        &format!(
            "{capped} of {total} runs reached their event cap ({rule_note}); \
             decaying-threshold floor violations: {floor_violations}"
        ),
    );
}

#[test]
fn criterion_9_reducible_convergence() {
    let mut worst_ratio = 0.0f64;
    let mut worst_gap = 0.0f64;
    for sc in reducible_batch() {
        let trace = run_event_triggered(&sc).expect("reducible batch scenarios complete");
        let pf = sc.laplacian.pf_normal_form().expect("spanning tree by construction");
        let scc = scc_constants(&pf).expect("blocks well posed");
        let v0 = block_lyapunov(&scc, &trace.initial).unwrap();
        let vt = block_lyapunov(&scc, &trace.final_state).unwrap();
        // The last entry is the closed root block; the criterion covers
        // the receiving blocks.
        for (b0, bt) in v0.iter().zip(&vt).take(v0.len() - 1) {
            if *bt >= 1e-6 * b0 + 1e-12 {
                worst_ratio = worst_ratio.max(bt / b0.max(1e-300));
            }
        }
        let nu = scc.agreement(&trace.final_state);
        for x in &trace.final_state {
            worst_gap = worst_gap.max((x - nu).abs());
        }
    }
    let ok = worst_ratio == 0.0 && worst_gap <= 1e-4;
    verdict(
        9,
        ok,
        &format!(
            "worst non-root block contraction ratio {worst_ratio:.3e}, \
             worst distance to the agreement value {worst_gap:.3e}"
        ),
    );
}
