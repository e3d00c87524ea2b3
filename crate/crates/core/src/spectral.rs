//! Spectral constants of irreducible and reducible Laplacians.
//!
//! For an irreducible Laplacian `L` the positive left eigenvector `xi`
//! (`xi^T L = 0`, entries summing to one) defines
//!
//! ```text
//!     Xi = diag(xi),  R = (Xi L + L^T Xi) / 2,  U = Xi - xi xi^T
//! ```
//!
//! and the scalar constants the trigger thresholds are built from:
//! `lambda2` and `lambda_max` (extreme eigenvalues of `R` off the consensus
//! direction), `mu_max` (largest eigenvalue of `U`), `gamma2` and `rho_ltl`
//! (extreme eigenvalues of `L^T L` off the consensus direction). All these
//! matrices annihilate the all-ones vector, so the "second" eigenvalues are
//! obtained by deflating that direction with an orthonormal basis of its
//! complement, never by sorting eigenvalues and skipping an index.
//!
//! For a reducible Laplacian in block upper-triangular form, each non-closed
//! diagonal block `B_k` carries its own left eigenvector (of the zero-row-sum
//! part of the block) and the symmetrised coupling matrix
//! `Q_k = (Xi_k B_k + B_k^T Xi_k) / 2`, which is positive definite and
//! yields the per-block decay constant `rho2(Q_k)`.

use nalgebra::{DMatrix, DVector};
use thiserror::Error;

use crate::graph::{GraphError, Laplacian, PfForm};
use crate::tol;

#[derive(Debug, Error)]
pub enum SpectralError {
    #[error("zero eigenvalue of the Laplacian is repeated (second singular value {second:e}); graph is not irreducible")]
    RepeatedZero { second: f64 },
    #[error("left eigenvector entry for agent {agent} is not positive ({value:e}); graph is not irreducible")]
    NonPositiveEntry { agent: usize, value: f64 },
    #[error("left eigenvector residual {residual:e} exceeds {limit:e}")]
    Residual { residual: f64, limit: f64 },
    #[error("{name} = {value:e} is not separated from zero")]
    ZeroGap { name: &'static str, value: f64 },
    #[error("coupling matrix of block {block} is not positive definite (min eigenvalue {eig:e})")]
    NotPositiveDefinite { block: usize, eig: f64 },
    #[error("least-squares solve for the left eigenvector failed")]
    SolveFailed,
    #[error("block {block}: {source}")]
    Block {
        block: usize,
        #[source]
        source: Box<SpectralError>,
    },
    #[error(transparent)]
    Graph(#[from] GraphError),
}

fn in_block(block: usize, e: SpectralError) -> SpectralError {
    SpectralError::Block { block, source: Box::new(e) }
}

/// Positive left eigenvector of the zero eigenvalue, normalised to sum one.
///
/// Solved as the least-squares solution of the stacked system
/// `[L^T; 1^T] x = [0; 1]`, which is uniquely solvable exactly when zero is
/// a simple eigenvalue. Irreducibility is then certified by the residual
/// and the strict positivity of the entries.
pub fn left_eigenvector(l: &Laplacian) -> Result<DVector<f64>, SpectralError> {
    let m = l.dim();
    if m == 1 {
        return Ok(DVector::from_element(1, 1.0));
    }
    let scale = 1.0 + l.matrix().amax();
    let mut sv: Vec<f64> = l.matrix().clone().svd(false, false).singular_values.iter().copied().collect();
    sv.sort_by(|a, b| a.total_cmp(b));
    if sv[1] <= tol::ZERO_GAP * scale {
        return Err(SpectralError::RepeatedZero { second: sv[1] });
    }
    let mut stacked = DMatrix::zeros(m + 1, m);
    stacked.view_mut((0, 0), (m, m)).copy_from(&l.matrix().transpose());
    for c in 0..m {
        stacked[(m, c)] = 1.0;
    }
    let mut rhs = DVector::zeros(m + 1);
    rhs[m] = 1.0;
    let xi = stacked
        .svd(true, true)
        .solve(&rhs, 1e-14 * scale)
        .map_err(|_| SpectralError::SolveFailed)?;
    let mut xi = DVector::from_column_slice(xi.as_slice());
    let total = xi.sum();
    if !(total > 0.0) {
        return Err(SpectralError::SolveFailed);
    }
    xi /= total;
    for (agent, &v) in xi.iter().enumerate() {
        if v <= 1e-12 {
            return Err(SpectralError::NonPositiveEntry { agent, value: v });
        }
    }
    let residual = (xi.transpose() * l.matrix()).amax();
    if residual > tol::RESIDUAL * scale {
        return Err(SpectralError::Residual { residual, limit: tol::RESIDUAL * scale });
    }
    Ok(xi)
}

/// The matrices and eigenvalue constants derived from `(L, xi)`.
#[derive(Debug, Clone)]
pub struct SpectralConstants {
    pub laplacian: Laplacian,
    pub xi: DVector<f64>,
    pub xi_max: f64,
    pub r: DMatrix<f64>,
    pub u: DMatrix<f64>,
    pub ltl: DMatrix<f64>,
    /// Smallest eigenvalue of `R` orthogonal to the all-ones direction.
    pub lambda2: f64,
    /// Largest eigenvalue of `R`.
    pub lambda_max: f64,
    /// Largest eigenvalue of `U`.
    pub mu_max: f64,
    /// Smallest eigenvalue of `L^T L` orthogonal to the all-ones direction.
    pub gamma2: f64,
    /// Largest eigenvalue of `L^T L`.
    pub rho_ltl: f64,
}

/// Convenience: [`left_eigenvector`] followed by [`build_constants`].
pub fn constants_for(l: &Laplacian) -> Result<SpectralConstants, SpectralError> {
    let xi = left_eigenvector(l)?;
    build_constants(l, &xi)
}

pub fn build_constants(l: &Laplacian, xi: &DVector<f64>) -> Result<SpectralConstants, SpectralError> {
    let m = l.dim();
    let xi_max = xi.max();
    if m == 1 {
        return Ok(SpectralConstants {
            laplacian: l.clone(),
            xi: xi.clone(),
            xi_max,
            r: DMatrix::zeros(1, 1),
            u: DMatrix::zeros(1, 1),
            ltl: DMatrix::zeros(1, 1),
            lambda2: 0.0,
            lambda_max: 0.0,
            mu_max: 0.0,
            gamma2: 0.0,
            rho_ltl: 0.0,
        });
    }
    let x = DMatrix::from_diagonal(xi) * l.matrix();
    let r = (&x + x.transpose()) * 0.5;
    let u = DMatrix::from_diagonal(xi) - xi * xi.transpose();
    let ltl = l.matrix().transpose() * l.matrix();
    let (lambda2, lambda_max) = deflated_extremes(&r);
    let (_, mu_max) = deflated_extremes(&u);
    let (gamma2, rho_ltl) = deflated_extremes(&ltl);
    if lambda2 <= tol::ZERO_GAP {
        return Err(SpectralError::ZeroGap { name: "lambda2", value: lambda2 });
    }
    if gamma2 <= tol::ZERO_GAP {
        return Err(SpectralError::ZeroGap { name: "gamma2", value: gamma2 });
    }
    Ok(SpectralConstants {
        laplacian: l.clone(),
        xi: xi.clone(),
        xi_max,
        r,
        u,
        ltl,
        lambda2,
        lambda_max,
        mu_max,
        gamma2,
        rho_ltl,
    })
}

/// Smallest eigenvalues of the four matrix inequalities tying `R`, `U` and
/// `L^T L` together, after deflating the all-ones direction. Non-negative
/// values (up to slack) mean the inequality holds.
#[derive(Debug, Clone, Copy)]
pub struct InequalityReport {
    /// `R - (lambda2 / mu_max^2) U U >= 0`
    pub ru_min: f64,
    /// `L^T L - (gamma2 / mu_max^2) U U >= 0`
    pub uull_min: f64,
    /// `(lambda_max / gamma2) L^T L - R >= 0`
    pub rll_upper_min: f64,
    /// `R - (lambda2 / rho_ltl) L^T L >= 0`
    pub rll_lower_min: f64,
}

impl InequalityReport {
    pub fn worst(&self) -> f64 {
        self.ru_min.min(self.uull_min).min(self.rll_upper_min).min(self.rll_lower_min)
    }

    pub fn all_hold(&self, slack: f64) -> bool {
        self.worst() >= -slack
    }
}

pub fn verify_inequalities(c: &SpectralConstants) -> InequalityReport {
    let m = c.xi.len();
    if m == 1 {
        return InequalityReport { ru_min: 0.0, uull_min: 0.0, rll_upper_min: 0.0, rll_lower_min: 0.0 };
    }
    let uu = &c.u * &c.u;
    let ru = &c.r - &uu * (c.lambda2 / (c.mu_max * c.mu_max));
    let uull = &c.ltl - &uu * (c.gamma2 / (c.mu_max * c.mu_max));
    let rll_upper = &c.ltl * (c.lambda_max / c.gamma2) - &c.r;
    let rll_lower = &c.r - &c.ltl * (c.lambda2 / c.rho_ltl);
    InequalityReport {
        ru_min: deflated_extremes(&ru).0,
        uull_min: deflated_extremes(&uull).0,
        rll_upper_min: deflated_extremes(&rll_upper).0,
        rll_lower_min: deflated_extremes(&rll_lower).0,
    }
}

/// Per-block constants of a non-closed component.
#[derive(Debug, Clone)]
pub struct NonRootBlock {
    /// Original agent ids of the block, ascending.
    pub agents: Vec<usize>,
    /// Left eigenvector of the zero-row-sum part of the block.
    pub xi: DVector<f64>,
    /// Symmetrised block `(Xi B + B^T Xi) / 2`; positive definite.
    pub q: DMatrix<f64>,
    /// Smallest eigenvalue of `q`.
    pub rho2_q: f64,
    /// Largest entry of `xi`.
    pub rho_xi: f64,
    /// Diagonal coupling toward later blocks.
    pub coupling: DVector<f64>,
    /// Zero-row-sum part of the block.
    pub balanced: DMatrix<f64>,
}

impl NonRootBlock {
    /// Smallest eigenvalue of `(rho_xi / rho2_q) q - Xi`; non-negative (up
    /// to slack) certifies the per-block comparison used by the decay
    /// estimates.
    pub fn ordering_margin(&self) -> f64 {
        let scaled = &self.q * (self.rho_xi / self.rho2_q) - DMatrix::from_diagonal(&self.xi);
        sym_eigenvalues(&scaled).0
    }
}

/// Spectral data of a reducible Laplacian in normal form: one
/// [`NonRootBlock`] per non-closed component plus full constants of the
/// closed (root) component.
#[derive(Debug, Clone)]
pub struct SccConstants {
    pub pf: PfForm,
    pub non_root: Vec<NonRootBlock>,
    pub root: SpectralConstants,
    /// Original agent ids of the root block, ascending.
    pub root_agents: Vec<usize>,
}

impl SccConstants {
    /// The agreement value `nu = sum_p xi_root[p] * x[root agent p]`; under
    /// a consensus protocol on the closed component this is its invariant
    /// weighted average, and the whole network converges to its limit.
    pub fn agreement(&self, x_full: &[f64]) -> f64 {
        self.root_agents
            .iter()
            .zip(self.root.xi.iter())
            .map(|(&agent, &w)| w * x_full[agent])
            .sum()
    }
}

pub fn scc_constants(pf: &PfForm) -> Result<SccConstants, SpectralError> {
    let k = pf.block_count();
    let mut non_root = Vec::with_capacity(k - 1);
    for b in 0..k - 1 {
        let split = pf.auxiliary_split(b)?;
        let balanced_l = Laplacian::from_matrix(split.balanced.clone()).map_err(|e| in_block(b, e.into()))?;
        let xi = left_eigenvector(&balanced_l).map_err(|e| in_block(b, e))?;
        let block = pf.diagonal_block(b);
        let x = DMatrix::from_diagonal(&xi) * &block;
        let q = (&x + x.transpose()) * 0.5;
        let (rho2_q, _) = sym_eigenvalues(&q);
        if rho2_q <= 0.0 {
            return Err(SpectralError::NotPositiveDefinite { block: b, eig: rho2_q });
        }
        non_root.push(NonRootBlock {
            agents: pf.block_agents(b).to_vec(),
            rho_xi: xi.max(),
            xi,
            q,
            rho2_q,
            coupling: DVector::from_vec(split.coupling),
            balanced: split.balanced,
        });
    }
    let root_block = Laplacian::from_matrix(pf.diagonal_block(k - 1)).map_err(|e| in_block(k - 1, e.into()))?;
    let root = constants_for(&root_block).map_err(|e| in_block(k - 1, e))?;
    Ok(SccConstants {
        pf: pf.clone(),
        non_root,
        root,
        root_agents: pf.block_agents(k - 1).to_vec(),
    })
}

/// Orthonormal basis of the complement of the all-ones direction, as the
/// trailing columns of the Householder reflection exchanging `e_1` with
/// `1/sqrt(m)`.
fn ones_complement(m: usize) -> DMatrix<f64> {
    let u = DVector::from_element(m, 1.0 / (m as f64).sqrt());
    let mut v = u.clone();
    v[0] -= 1.0;
    let h = DMatrix::identity(m, m) - (&v * v.transpose()) * (2.0 / v.dot(&v));
    h.view((0, 1), (m, m - 1)).into_owned()
}

/// `(min, max)` eigenvalues of the symmetric `mat` restricted to the
/// complement of the all-ones direction.
fn deflated_extremes(mat: &DMatrix<f64>) -> (f64, f64) {
    let m = mat.nrows();
    if m == 1 {
        return (0.0, 0.0);
    }
    let b = ones_complement(m);
    let reduced = b.transpose() * mat * b;
    sym_eigenvalues(&reduced)
}

/// `(min, max)` eigenvalues of a symmetric matrix.
fn sym_eigenvalues(mat: &DMatrix<f64>) -> (f64, f64) {
    let sym = (mat + mat.transpose()) * 0.5;
    let eigs = sym.symmetric_eigenvalues();
    (eigs.min(), eigs.max())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::{examples, Digraph};
    use approx::assert_abs_diff_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn two_cycle_l() -> Laplacian {
        Digraph::build(2, &[(0, 1, 1.0), (1, 0, 1.0)]).unwrap().laplacian()
    }

    fn three_cycle_l() -> Laplacian {
        Digraph::build(3, &[(0, 1, 1.0), (1, 2, 1.0), (2, 0, 1.0)]).unwrap().laplacian()
    }

    #[test]
    fn left_eigenvector_two_cycle() {
        let xi = left_eigenvector(&two_cycle_l()).unwrap();
        assert_abs_diff_eq!(xi[0], 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(xi[1], 0.5, epsilon = 1e-12);
    }

    #[test]
    fn left_eigenvector_three_cycle_uniform() {
        let xi = left_eigenvector(&three_cycle_l()).unwrap();
        for i in 0..3 {
            assert_abs_diff_eq!(xi[i], 1.0 / 3.0, epsilon = 1e-12);
        }
    }

    /// Independent oracle for a 3x3 left null vector: the cross product of
    /// two columns of `L` is orthogonal to every column, hence a left null
    /// vector of `L`.
    fn null_by_cross(l: &Laplacian) -> [f64; 3] {
        let m = l.matrix();
        let c0 = [m[(0, 0)], m[(1, 0)], m[(2, 0)]];
        let c1 = [m[(0, 1)], m[(1, 1)], m[(2, 1)]];
        let n = [
            c0[1] * c1[2] - c0[2] * c1[1],
            c0[2] * c1[0] - c0[0] * c1[2],
            c0[0] * c1[1] - c0[1] * c1[0],
        ];
        let s = n[0] + n[1] + n[2];
        [n[0] / s, n[1] / s, n[2] / s]
    }

    #[test]
    fn left_eigenvector_seven_agent_root_block() {
        let pf = examples::seven_agents_laplacian().pf_normal_form().unwrap();
        let root = Laplacian::from_matrix(pf.diagonal_block(1)).unwrap();
        let xi = left_eigenvector(&root).unwrap();
        // Exact value by hand elimination: (5/16, 7/16, 4/16).
        assert_abs_diff_eq!(xi[0], 5.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xi[1], 7.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(xi[2], 4.0 / 16.0, epsilon = 1e-12);
        let oracle = null_by_cross(&root);
        for i in 0..3 {
            assert_abs_diff_eq!(xi[i], oracle[i], epsilon = 1e-12);
        }
    }

    #[test]
    fn left_eigenvector_rejects_reducible() {
        let err = left_eigenvector(&examples::seven_agents_laplacian()).unwrap_err();
        assert!(matches!(
            err,
            SpectralError::NonPositiveEntry { .. } | SpectralError::RepeatedZero { .. }
        ));
        let disjoint = Digraph::build(4, &[(0, 1, 1.0), (1, 0, 1.0), (2, 3, 1.0), (3, 2, 1.0)])
            .unwrap()
            .laplacian();
        assert!(matches!(
            left_eigenvector(&disjoint).unwrap_err(),
            SpectralError::RepeatedZero { .. }
        ));
    }

    #[test]
    fn constants_two_cycle_frozen() {
        let c = constants_for(&two_cycle_l()).unwrap();
        assert_abs_diff_eq!(c.lambda2, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.lambda_max, 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mu_max, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.gamma2, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rho_ltl, 4.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.xi_max, 0.5, epsilon = 1e-12);
    }

    /// Independent route to lambda2 for m = 3: the characteristic cubic of
    /// `R` factors as `lambda (lambda^2 - c1 lambda + c0)`; solve the
    /// quadratic explicitly.
    fn lambda2_by_charpoly(r: &DMatrix<f64>) -> f64 {
        let tr = r.trace();
        let tr2 = (r * r).trace();
        let c0 = (tr * tr - tr2) / 2.0;
        let disc = (tr * tr - 4.0 * c0).sqrt();
        (tr - disc) / 2.0
    }

    #[test]
    fn constants_three_cycle_with_charpoly_oracle() {
        let c = constants_for(&three_cycle_l()).unwrap();
        assert_abs_diff_eq!(c.lambda2, 0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(c.mu_max, 1.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.gamma2, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.rho_ltl, 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(c.lambda2, lambda2_by_charpoly(&c.r), epsilon = 1e-10);
    }

    #[test]
    fn r_and_u_annihilate_ones() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for _ in 0..50 {
            let m = rng.random_range(2..=8);
            let g = crate::random::strongly_connected(&mut rng, m, 0.3, 0.5, 2.5);
            let c = constants_for(&g.laplacian()).unwrap();
            let ones = DVector::from_element(m, 1.0);
            assert!((&c.r * &ones).amax() <= 1e-13 * (1.0 + c.r.amax()));
            assert!((&c.u * &ones).amax() <= 1e-13);
            let residual = (c.xi.transpose() * c.laplacian.matrix()).amax();
            assert!(residual <= 1e-10 * (1.0 + c.laplacian.matrix().amax()));
            assert!(c.lambda2 > 0.0 && c.gamma2 > 0.0 && c.mu_max > 0.0);
        }
    }

    #[test]
    fn inequalities_two_cycle_tight() {
        let c = constants_for(&two_cycle_l()).unwrap();
        let report = verify_inequalities(&c);
        assert!(report.all_hold(1e-12), "worst {}", report.worst());
    }

    #[test]
    fn inequalities_hold_on_random_graphs() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..100 {
            let m = rng.random_range(2..=8);
            let g = crate::random::strongly_connected(&mut rng, m, 0.35, 0.5, 3.0);
            let c = constants_for(&g.laplacian()).unwrap();
            let report = verify_inequalities(&c);
            assert!(report.all_hold(tol::PSD_SLACK), "worst {}", report.worst());
        }
    }

    #[test]
    fn inequalities_single_agent_vacuous() {
        let g = Digraph::build(1, &[]).unwrap();
        let c = constants_for(&g.laplacian()).unwrap();
        let report = verify_inequalities(&c);
        assert_eq!(report.worst(), 0.0);
    }

    #[test]
    fn scc_constants_seven_agents() {
        let pf = examples::seven_agents_laplacian().pf_normal_form().unwrap();
        let scc = scc_constants(&pf).unwrap();
        assert_eq!(scc.non_root.len(), 1);
        assert_eq!(scc.root_agents, vec![4, 5, 6]);
        assert_abs_diff_eq!(scc.root.xi[0], 5.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scc.root.xi[1], 7.0 / 16.0, epsilon = 1e-12);
        assert_abs_diff_eq!(scc.root.xi[2], 4.0 / 16.0, epsilon = 1e-12);
        let b = &scc.non_root[0];
        assert!(b.rho2_q > 0.0);
        assert!(b.ordering_margin() >= -tol::ORDERING_SLACK);
        // Q computed from the balanced part plus coupling agrees with the
        // direct symmetrisation of the block.
        let xi_d = DMatrix::from_diagonal(&b.xi);
        let x = &xi_d * &b.balanced;
        let r_tilde = (&x + x.transpose()) * 0.5;
        let q_alt = r_tilde + xi_d * DMatrix::from_diagonal(&b.coupling);
        assert!((&b.q - q_alt).amax() <= 1e-12);
    }

    #[test]
    fn scc_constants_irreducible_has_no_non_root() {
        let pf = three_cycle_l().pf_normal_form().unwrap();
        let scc = scc_constants(&pf).unwrap();
        assert!(scc.non_root.is_empty());
        assert_eq!(scc.root_agents, vec![0, 1, 2]);
    }

    #[test]
    fn scc_constants_singleton_non_root() {
        let g = Digraph::build(2, &[(1, 0, 3.5)]).unwrap();
        let pf = g.laplacian().pf_normal_form().unwrap();
        let scc = scc_constants(&pf).unwrap();
        assert_eq!(scc.non_root.len(), 1);
        let b = &scc.non_root[0];
        assert_eq!(b.q[(0, 0)], 3.5);
        assert_eq!(b.rho2_q, 3.5);
        assert_eq!(b.xi[0], 1.0);
    }

    #[test]
    fn agreement_value_weights_root_states() {
        let pf = examples::seven_agents_laplacian().pf_normal_form().unwrap();
        let scc = scc_constants(&pf).unwrap();
        let x = examples::seven_agents_initial();
        let nu = scc.agreement(&x);
        let expect = (5.0 * x[4] + 7.0 * x[5] + 4.0 * x[6]) / 16.0;
        assert_abs_diff_eq!(nu, expect, epsilon = 1e-12);
    }

    #[test]
    fn constants_are_deterministic() {
        let root = || {
            let pf = examples::seven_agents_laplacian().pf_normal_form().unwrap();
            Laplacian::from_matrix(pf.diagonal_block(1)).unwrap()
        };
        let a = constants_for(&root()).unwrap();
        let b = constants_for(&root()).unwrap();
        assert_eq!(a.lambda2.to_bits(), b.lambda2.to_bits());
        assert_eq!(a.xi, b.xi);
    }
}
