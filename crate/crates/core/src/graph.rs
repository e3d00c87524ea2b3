//! Weighted directed graphs and their Laplacians.
//!
//! Conventions. An edge `(src, dst, w)` is a link from `src` to `dst` with
//! weight `w > 0`, meaning `dst` can pull `src`'s state. The adjacency entry
//! is `a[(dst, src)] = w`, and the Laplacian is `L = D - A` with `D` the
//! diagonal of row sums of `A`. Every row of `L` sums to zero, the diagonal
//! is non-negative and off-diagonal entries are non-positive.
//!
//! For reducible graphs the strongly connected components can be ordered so
//! that `L` becomes block upper triangular: every block below the diagonal
//! is zero. The last block is then a closed component, one that receives no
//! links from the rest of the graph. When the graph contains a directed
//! spanning tree the closed component is unique and drives the final
//! agreement value. [`Laplacian::pf_normal_form`] computes this form;
//! [`PfForm::auxiliary_split`] separates a non-closed diagonal block into a
//! zero-row-sum part and the non-negative diagonal coupling produced by
//! links arriving from later blocks.

use nalgebra::DMatrix;
use std::cmp::Reverse;
use std::collections::BinaryHeap;
use thiserror::Error;

use crate::tol;

#[derive(Debug, Clone, PartialEq, Error)]
pub enum GraphError {
    #[error("graph needs at least one agent")]
    Empty,
    #[error("edge ({src}, {dst}) is a self-loop")]
    SelfLoop { src: usize, dst: usize },
    #[error("edge ({src}, {dst}) has non-positive weight {weight}")]
    NonpositiveWeight { src: usize, dst: usize, weight: f64 },
    #[error("edge ({src}, {dst}) appears more than once")]
    DuplicateEdge { src: usize, dst: usize },
    #[error("edge ({src}, {dst}) references an agent outside 0..{count}")]
    EdgeOutOfRange { src: usize, dst: usize, count: usize },
    #[error("matrix is {rows}x{cols}, expected square")]
    NotSquare { rows: usize, cols: usize },
    #[error("row {row} of the Laplacian sums to {sum:e}, expected zero")]
    NonzeroRowSum { row: usize, sum: f64 },
    #[error("Laplacian diagonal entry {index} is negative ({value})")]
    NegativeDiagonal { index: usize, value: f64 },
    #[error("Laplacian off-diagonal entry ({row}, {col}) is positive ({value})")]
    PositiveOffDiagonal { row: usize, col: usize, value: f64 },
    #[error("graph has no directed spanning tree")]
    NoSpanningTree,
    #[error("diagonal block {block} has no coupling to later blocks")]
    DecoupledBlock { block: usize },
}

/// A weighted digraph on agents `0..m`, stored as a dense adjacency matrix
/// with `a[(i, j)] > 0` iff there is a link from `j` to `i`.
#[derive(Debug, Clone, PartialEq)]
pub struct Digraph {
    adjacency: DMatrix<f64>,
}

impl Digraph {
    /// Builds a digraph from `(src, dst, weight)` triples.
    pub fn build(agent_count: usize, edges: &[(usize, usize, f64)]) -> Result<Self, GraphError> {
        if agent_count == 0 {
            return Err(GraphError::Empty);
        }
        let mut adjacency = DMatrix::zeros(agent_count, agent_count);
        for &(src, dst, weight) in edges {
            if src >= agent_count || dst >= agent_count {
                return Err(GraphError::EdgeOutOfRange { src, dst, count: agent_count });
            }
            if src == dst {
                return Err(GraphError::SelfLoop { src, dst });
            }
            if !(weight > 0.0) || !weight.is_finite() {
                return Err(GraphError::NonpositiveWeight { src, dst, weight });
            }
            if adjacency[(dst, src)] != 0.0 {
                return Err(GraphError::DuplicateEdge { src, dst });
            }
            adjacency[(dst, src)] = weight;
        }
        Ok(Self { adjacency })
    }

    pub fn agent_count(&self) -> usize {
        self.adjacency.nrows()
    }

    /// Weight of the link from `src` into `dst` (zero if absent).
    pub fn weight(&self, dst: usize, src: usize) -> f64 {
        self.adjacency[(dst, src)]
    }

    pub fn adjacency(&self) -> &DMatrix<f64> {
        &self.adjacency
    }

    /// Agents whose state `i` pulls: `j` with a link `j -> i`.
    pub fn in_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.agent_count()).filter(|&j| self.adjacency[(i, j)] > 0.0).collect()
    }

    /// Agents that pull `i`'s state: `j` with a link `i -> j`.
    pub fn out_neighbors(&self, i: usize) -> Vec<usize> {
        (0..self.agent_count()).filter(|&j| self.adjacency[(j, i)] > 0.0).collect()
    }

    /// `L = D - A` with `D` the diagonal of in-weight sums.
    pub fn laplacian(&self) -> Laplacian {
        let m = self.agent_count();
        let mut matrix = -self.adjacency.clone();
        for i in 0..m {
            matrix[(i, i)] = self.adjacency.row(i).sum();
        }
        Laplacian { matrix }
    }

    /// Strongly connected components, each sorted by agent id, ordered so
    /// that the permuted Laplacian is block upper triangular: if any link
    /// goes from component `q` into component `k` then `q > k`. Closed
    /// components end up last. Ties between unordered components are broken
    /// by the smallest agent id they contain.
    pub fn scc_decompose(&self) -> Vec<Vec<usize>> {
        let comps = self.tarjan();
        let m = self.agent_count();
        let mut comp_of = vec![0usize; m];
        for (c, members) in comps.iter().enumerate() {
            for &v in members {
                comp_of[v] = c;
            }
        }
        // Dependency edges: k -> q when component k receives a link from q.
        // A topological order of this DAG puts receivers first and closed
        // components last.
        let n = comps.len();
        let mut succ = vec![Vec::new(); n];
        let mut in_deg = vec![0usize; n];
        for i in 0..m {
            for j in 0..m {
                if self.adjacency[(i, j)] > 0.0 {
                    let (k, q) = (comp_of[i], comp_of[j]);
                    if k != q && !succ[k].contains(&q) {
                        succ[k].push(q);
                        in_deg[q] += 1;
                    }
                }
            }
        }
        let mut ready = BinaryHeap::new();
        for c in 0..n {
            if in_deg[c] == 0 {
                ready.push(Reverse((comps[c][0], c)));
            }
        }
        let mut order = Vec::with_capacity(n);
        while let Some(Reverse((_, c))) = ready.pop() {
            order.push(comps[c].clone());
            for &q in &succ[c] {
                in_deg[q] -= 1;
                if in_deg[q] == 0 {
                    ready.push(Reverse((comps[q][0], q)));
                }
            }
        }
        order
    }

    /// True iff some agent has a directed path to every other agent.
    /// Computed by direct reachability, independently of the component
    /// decomposition, so the two can cross-check each other.
    pub fn has_spanning_tree(&self) -> bool {
        let m = self.agent_count();
        (0..m).any(|root| self.reach_count(root) == m)
    }

    pub fn is_strongly_connected(&self) -> bool {
        let m = self.agent_count();
        (0..m).all(|root| self.reach_count(root) == m)
    }

    fn reach_count(&self, root: usize) -> usize {
        let m = self.agent_count();
        let mut seen = vec![false; m];
        let mut queue = vec![root];
        seen[root] = true;
        let mut count = 1;
        while let Some(v) = queue.pop() {
            for w in 0..m {
                if self.adjacency[(w, v)] > 0.0 && !seen[w] {
                    seen[w] = true;
                    count += 1;
                    queue.push(w);
                }
            }
        }
        count
    }

    fn tarjan(&self) -> Vec<Vec<usize>> {
        let m = self.agent_count();
        let mut state = TarjanState {
            graph: self,
            index: vec![usize::MAX; m],
            low: vec![0; m],
            on_stack: vec![false; m],
            stack: Vec::new(),
            next: 0,
            comps: Vec::new(),
        };
        for v in 0..m {
            if state.index[v] == usize::MAX {
                state.strongconnect(v);
            }
        }
        for comp in &mut state.comps {
            comp.sort_unstable();
        }
        state.comps
    }
}

struct TarjanState<'a> {
    graph: &'a Digraph,
    index: Vec<usize>,
    low: Vec<usize>,
    on_stack: Vec<bool>,
    stack: Vec<usize>,
    next: usize,
    comps: Vec<Vec<usize>>,
}

impl TarjanState<'_> {
    fn strongconnect(&mut self, v: usize) {
        self.index[v] = self.next;
        self.low[v] = self.next;
        self.next += 1;
        self.stack.push(v);
        self.on_stack[v] = true;
        for w in 0..self.graph.agent_count() {
            if self.graph.adjacency[(w, v)] <= 0.0 {
                continue;
            }
            if self.index[w] == usize::MAX {
                self.strongconnect(w);
                self.low[v] = self.low[v].min(self.low[w]);
            } else if self.on_stack[w] {
                self.low[v] = self.low[v].min(self.index[w]);
            }
        }
        if self.low[v] == self.index[v] {
            // v roots a component; pop it off the stack.
            let mut comp = Vec::new();
            loop {
                let w = self.stack.pop().expect("tarjan stack underflow");
                self.on_stack[w] = false;
                comp.push(w);
                if w == v {
                    break;
                }
            }
            self.comps.push(comp);
        }
    }
}

/// A graph Laplacian: zero row sums, non-negative diagonal, non-positive
/// off-diagonal entries.
#[derive(Debug, Clone, PartialEq)]
pub struct Laplacian {
    matrix: DMatrix<f64>,
}

impl Laplacian {
    /// Validates an explicit matrix as a Laplacian. Row sums may deviate
    /// from zero by [`tol::ROW_SUM`] scaled by the row magnitude.
    pub fn from_matrix(matrix: DMatrix<f64>) -> Result<Self, GraphError> {
        if matrix.nrows() != matrix.ncols() {
            return Err(GraphError::NotSquare { rows: matrix.nrows(), cols: matrix.ncols() });
        }
        if matrix.nrows() == 0 {
            return Err(GraphError::Empty);
        }
        let m = matrix.nrows();
        for i in 0..m {
            let scale = 1.0 + matrix.row(i).amax();
            let sum = matrix.row(i).sum();
            if sum.abs() > tol::ROW_SUM * scale {
                return Err(GraphError::NonzeroRowSum { row: i, sum });
            }
            if matrix[(i, i)] < -tol::ROW_SUM * scale {
                return Err(GraphError::NegativeDiagonal { index: i, value: matrix[(i, i)] });
            }
            for j in 0..m {
                if i != j && matrix[(i, j)] > tol::ROW_SUM * scale {
                    return Err(GraphError::PositiveOffDiagonal { row: i, col: j, value: matrix[(i, j)] });
                }
            }
        }
        Ok(Self { matrix })
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.matrix
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn entry(&self, i: usize, j: usize) -> f64 {
        self.matrix[(i, j)]
    }

    /// Recovers the digraph: `a[(i, j)] = -L[(i, j)]` off the diagonal.
    pub fn digraph(&self) -> Digraph {
        let m = self.dim();
        let mut adjacency = DMatrix::zeros(m, m);
        for i in 0..m {
            for j in 0..m {
                if i != j && self.matrix[(i, j)] < 0.0 {
                    adjacency[(i, j)] = -self.matrix[(i, j)];
                }
            }
        }
        Digraph { adjacency }
    }

    /// Permutes agents so the Laplacian is block upper triangular with one
    /// diagonal block per strongly connected component and the closed
    /// component last. Requires a directed spanning tree.
    pub fn pf_normal_form(&self) -> Result<PfForm, GraphError> {
        let graph = self.digraph();
        if !graph.has_spanning_tree() {
            return Err(GraphError::NoSpanningTree);
        }
        let blocks = graph.scc_decompose();
        let permutation: Vec<usize> = blocks.iter().flatten().copied().collect();
        let mut offsets = Vec::with_capacity(blocks.len() + 1);
        let mut acc = 0;
        for b in &blocks {
            offsets.push(acc);
            acc += b.len();
        }
        offsets.push(acc);
        let m = self.dim();
        let mut permuted = DMatrix::zeros(m, m);
        for r in 0..m {
            for c in 0..m {
                permuted[(r, c)] = self.matrix[(permutation[r], permutation[c])];
            }
        }
        Ok(PfForm { blocks, permutation, offsets, permuted })
    }
}

/// Block upper-triangular normal form of a Laplacian, produced by
/// [`Laplacian::pf_normal_form`].
#[derive(Debug, Clone)]
pub struct PfForm {
    blocks: Vec<Vec<usize>>,
    permutation: Vec<usize>,
    offsets: Vec<usize>,
    permuted: DMatrix<f64>,
}

/// Split of a non-closed diagonal block `B` into `B = balanced + diag(coupling)`,
/// where `balanced` has zero row sums and `coupling[i] >= 0` is the total
/// weight of links into agent `i` from later blocks.
#[derive(Debug, Clone)]
pub struct AuxiliarySplit {
    pub balanced: DMatrix<f64>,
    pub coupling: Vec<f64>,
}

impl PfForm {
    pub fn block_count(&self) -> usize {
        self.blocks.len()
    }

    /// `permutation[new] = original` agent id.
    pub fn permutation(&self) -> &[usize] {
        &self.permutation
    }

    /// Original agent ids of block `k`, ascending.
    pub fn block_agents(&self, k: usize) -> &[usize] {
        &self.blocks[k]
    }

    pub fn blocks(&self) -> &[Vec<usize>] {
        &self.blocks
    }

    pub fn block_sizes(&self) -> Vec<usize> {
        self.blocks.iter().map(Vec::len).collect()
    }

    /// The permuted Laplacian `P L P^T`.
    pub fn permuted(&self) -> &DMatrix<f64> {
        &self.permuted
    }

    pub fn is_irreducible(&self) -> bool {
        self.blocks.len() == 1
    }

    /// Copy of diagonal block `k`.
    pub fn diagonal_block(&self, k: usize) -> DMatrix<f64> {
        let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
        self.permuted.view((lo, lo), (hi - lo, hi - lo)).into_owned()
    }

    /// Per-row total weight of links arriving at block `k` from later
    /// blocks, read off the off-diagonal blocks.
    pub fn coupling_from_later(&self, k: usize) -> Vec<f64> {
        let (lo, hi) = (self.offsets[k], self.offsets[k + 1]);
        let m = self.permuted.nrows();
        (lo..hi)
            .map(|r| (hi..m).map(|c| -self.permuted[(r, c)]).sum())
            .collect()
    }

    /// Splits diagonal block `k` as `balanced + diag(coupling)`. Fails on a
    /// block with no coupling to later blocks (the closed component, or a
    /// graph without a spanning tree).
    pub fn auxiliary_split(&self, k: usize) -> Result<AuxiliarySplit, GraphError> {
        auxiliary_split(&self.diagonal_block(k)).map_err(|e| match e {
            GraphError::DecoupledBlock { .. } => GraphError::DecoupledBlock { block: k },
            other => other,
        })
    }
}

/// Splits a diagonal block of a block upper-triangular Laplacian into a
/// zero-row-sum part and the diagonal coupling `D`, with `B = balanced + diag(D)`
/// holding exactly. Because full Laplacian rows sum to zero, `D[i]` equals
/// the row sum of the block, which is the total in-weight from later blocks.
pub fn auxiliary_split(block: &DMatrix<f64>) -> Result<AuxiliarySplit, GraphError> {
    if block.nrows() != block.ncols() {
        return Err(GraphError::NotSquare { rows: block.nrows(), cols: block.ncols() });
    }
    let n = block.nrows();
    let mut balanced = block.clone();
    let mut coupling = vec![0.0; n];
    for i in 0..n {
        let off: f64 = (0..n).filter(|&p| p != i).map(|p| block[(i, p)]).sum();
        balanced[(i, i)] = -off;
        coupling[i] = block[(i, i)] - balanced[(i, i)];
    }
    let scale = 1.0 + block.amax();
    if coupling.iter().all(|&d| d <= tol::ROW_SUM * scale) {
        return Err(GraphError::DecoupledBlock { block: 0 });
    }
    Ok(AuxiliarySplit { balanced, coupling })
}

/// Built-in benchmark graphs.
pub mod examples {
    use super::{Digraph, Laplacian};
    use nalgebra::DMatrix;

    /// A reducible seven-agent benchmark: agents 0..4 form one strongly
    /// connected component pulled by the closed component 4..7.
    pub fn seven_agents() -> Digraph {
        seven_agents_laplacian().digraph()
    }

    pub fn seven_agents_laplacian() -> Laplacian {
        let rows: [[f64; 7]; 7] = [
            [12.0, 0.0, -5.0, -2.0, -5.0, 0.0, 0.0],
            [-3.0, 8.0, -3.0, 0.0, 0.0, 0.0, -2.0],
            [0.0, -4.0, 12.0, -3.0, 0.0, -5.0, 0.0],
            [0.0, 0.0, -6.0, 11.0, -1.0, -4.0, 0.0],
            [0.0, 0.0, 0.0, 0.0, 7.0, -2.0, -5.0],
            [0.0, 0.0, 0.0, 0.0, -5.0, 6.0, -1.0],
            [0.0, 0.0, 0.0, 0.0, 0.0, -8.0, 8.0],
        ];
        let flat: Vec<f64> = rows.iter().flatten().copied().collect();
        Laplacian::from_matrix(DMatrix::from_row_slice(7, 7, &flat)).expect("valid by construction")
    }

    /// Initial condition used alongside [`seven_agents`] in the integration
    /// tests and the bundled scenario files.
    pub fn seven_agents_initial() -> Vec<f64> {
        vec![2.192, -3.699, -2.982, 4.726, 3.575, 4.074, -3.424]
    }
}
