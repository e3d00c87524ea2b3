//! Seeded generators for test graphs, initial states and paired-run cases.
//!
//! Everything here is deterministic given the caller's RNG, so batches used
//! in tests and in `compare --batch` are reproducible from a seed.

use rand::seq::SliceRandom;
use rand::Rng;

use crate::graph::Digraph;

/// Random strongly connected digraph on `m` agents: a directed cycle
/// through a random permutation plus independent extra links with
/// probability `extra`. Weights are uniform in `[w_lo, w_hi)`.
pub fn strongly_connected(
    rng: &mut impl Rng,
    m: usize,
    extra: f64,
    w_lo: f64,
    w_hi: f64,
) -> Digraph {
    let mut grid = vec![vec![0.0f64; m]; m];
    if m > 1 {
        let mut order: Vec<usize> = (0..m).collect();
        order.shuffle(rng);
        for idx in 0..m {
            let src = order[idx];
            let dst = order[(idx + 1) % m];
            grid[dst][src] = rng.random_range(w_lo..w_hi);
        }
        for dst in 0..m {
            for src in 0..m {
                if src != dst && grid[dst][src] == 0.0 && rng.random_bool(extra) {
                    grid[dst][src] = rng.random_range(w_lo..w_hi);
                }
            }
        }
    }
    from_grid(&grid)
}

/// Random reducible graph with a directed spanning tree: between 2 and
/// `max_blocks` strongly connected blocks, each non-closed block pulled by
/// at least one later block, and agent labels scrambled.
pub fn reducible_spanning_tree(rng: &mut impl Rng, m: usize, max_blocks: usize) -> Digraph {
    assert!(m >= 2, "need at least two agents for a reducible graph");
    let k = rng.random_range(2..=max_blocks.clamp(2, m));
    let mut sizes = vec![1usize; k];
    for _ in 0..m - k {
        let b = rng.random_range(0..k);
        sizes[b] += 1;
    }
    let mut starts = vec![0usize];
    for s in &sizes {
        starts.push(starts.last().unwrap() + s);
    }
    let (w_lo, w_hi) = (0.5, 2.5);
    let mut grid = vec![vec![0.0f64; m]; m];
    for b in 0..k {
        let members: Vec<usize> = (starts[b]..starts[b + 1]).collect();
        if members.len() > 1 {
            let mut order = members.clone();
            order.shuffle(rng);
            for idx in 0..order.len() {
                let src = order[idx];
                let dst = order[(idx + 1) % order.len()];
                grid[dst][src] = rng.random_range(w_lo..w_hi);
            }
            for &dst in &members {
                for &src in &members {
                    if src != dst && grid[dst][src] == 0.0 && rng.random_bool(0.3) {
                        grid[dst][src] = rng.random_range(w_lo..w_hi);
                    }
                }
            }
        }
    }
    // Links only flow from later blocks to earlier ones, so the designed
    // blocks stay the strongly connected components. Every non-closed block
    // gets at least one such link, which yields the spanning tree.
    for b in 0..k - 1 {
        let q = rng.random_range(b + 1..k);
        let src = rng.random_range(starts[q]..starts[q + 1]);
        let dst = rng.random_range(starts[b]..starts[b + 1]);
        grid[dst][src] = rng.random_range(w_lo..w_hi);
        for dst in starts[b]..starts[b + 1] {
            for q in b + 1..k {
                for src in starts[q]..starts[q + 1] {
                    if grid[dst][src] == 0.0 && rng.random_bool(0.15) {
                        grid[dst][src] = rng.random_range(w_lo..w_hi);
                    }
                }
            }
        }
    }
    // Scramble labels so block structure is not aligned with agent order.
    let mut relabel: Vec<usize> = (0..m).collect();
    relabel.shuffle(rng);
    let mut scrambled = vec![vec![0.0f64; m]; m];
    for dst in 0..m {
        for src in 0..m {
            scrambled[relabel[dst]][relabel[src]] = grid[dst][src];
        }
    }
    from_grid(&scrambled)
}

/// Uniform initial states in `[-amplitude, amplitude)`.
pub fn initial_state(rng: &mut impl Rng, m: usize, amplitude: f64) -> Vec<f64> {
    (0..m).map(|_| rng.random_range(-amplitude..amplitude)).collect()
}

/// A case for paired event-/self-triggered runs: a graph (strongly
/// connected or reducible, even odds), an initial state and a decay rate
/// for the absolute exponential rule.
pub fn compare_case(rng: &mut impl Rng, max_agents: usize) -> (Digraph, Vec<f64>, f64) {
    let m = rng.random_range(3..=max_agents.max(3));
    let graph = if rng.random_bool(0.5) {
        strongly_connected(rng, m, 0.3, 0.5, 2.5)
    } else {
        reducible_spanning_tree(rng, m, 3)
    };
    let initial = initial_state(rng, m, 5.0);
    let beta = rng.random_range(0.2..0.8);
    (graph, initial, beta)
}

fn from_grid(grid: &[Vec<f64>]) -> Digraph {
    let m = grid.len();
    let mut edges = Vec::new();
    for (dst, row) in grid.iter().enumerate() {
        for (src, &w) in row.iter().enumerate() {
            if w > 0.0 {
                edges.push((src, dst, w));
            }
        }
    }
    Digraph::build(m, &edges).expect("generator produces valid edges")
}
