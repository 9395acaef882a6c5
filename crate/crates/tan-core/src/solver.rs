//! Univariate Gaussian Belief Propagation on a shared precision matrix with
//! multi-column observations.
//!
//! Synchronous (flooding) schedule: every directed message is recomputed from
//! the previous iteration's state. Precision messages depend only on `J`, so
//! one set is shared by all observation columns; information messages are
//! per column. Exclude-one sums are recovered by subtracting the reverse
//! message from the full per-node sum, which keeps one iteration at `O(E d)`.

use ndarray::Array2;

use crate::error::{Result, TanError};
use crate::graph::SparseSymmetricMatrix;

/// Solver knobs. `damping` is the weight kept on the old message:
/// `m <- (1 - damping) * m_new + damping * m_old`, so `damping = 0` applies
/// updates in full and the default `0.5` is an even blend.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    pub damping: f64,
    pub schedule: Schedule,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Schedule {
    #[default]
    Synchronous,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-6,
            max_iter: 1000,
            damping: 0.5,
            schedule: Schedule::Synchronous,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(TanError::Config(format!("tol must be positive, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(TanError::Config("max_iter must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.damping) {
            return Err(TanError::Config(format!(
                "damping must lie in [0, 1), got {}",
                self.damping
            )));
        }
        Ok(())
    }
}

/// Per-directed-edge message buffers plus per-node scratch sums. The
/// exclude-one quantities are recovered as `alpha_full - pi_rev` and
/// `beta_full - eta_rev`.
#[derive(Debug)]
pub struct MessageState {
    /// Precision messages, one per directed edge (shared across columns).
    pub pi: Vec<f64>,
    /// Information messages, `directed_edge * cols + col`.
    pub eta: Vec<f64>,
    /// Full per-node precision sums `J_ii + sum_k pi_{k->i}`.
    pub alpha_full: Vec<f64>,
    /// Full per-node information sums, `node * cols + col`.
    pub beta_full: Vec<f64>,
    cols: usize,
}

impl MessageState {
    fn new(directed: usize, nodes: usize, cols: usize) -> Self {
        Self {
            pi: vec![0.0; directed],
            eta: vec![0.0; directed * cols],
            alpha_full: vec![0.0; nodes],
            beta_full: vec![0.0; nodes * cols],
            cols,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SolveResult {
    /// Equilibrium means, node x column.
    pub mu: Array2<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Last max message change.
    pub final_delta: f64,
    /// Belief precisions, node x column (columns share one precision).
    pub belief_pi: Array2<f64>,
}

/// Algorithm: iterate damped synchronous message updates until the max
/// message change drops to `tol` or `max_iter` is hit; a non-converged state
/// returns the partial solution with `converged = false` rather than erroring.
pub fn gabp_solve(
    j: &SparseSymmetricMatrix,
    h: &Array2<f64>,
    cfg: &SolverConfig,
) -> Result<SolveResult> {
    cfg.validate()?;
    j.check_solver_ready()?;
    let n = j.node_count();
    if h.nrows() != n {
        return Err(TanError::InvalidInput(format!(
            "h has {} rows for a {n}-node matrix",
            h.nrows()
        )));
    }
    let d = h.ncols();
    if d == 0 {
        return Err(TanError::InvalidInput("h must have at least 1 column".into()));
    }
    if h.iter().any(|v| !v.is_finite()) {
        return Err(TanError::InvalidInput("h contains non-finite values".into()));
    }

    let edges = j.topology.edges();
    let directed = 2 * edges.len();
    let mut state = MessageState::new(directed, n, d);
    let mut new_pi = vec![0.0; directed];
    let mut new_eta = vec![0.0; directed * d];

    let keep_old = cfg.damping;
    let apply_new = 1.0 - cfg.damping;

    let mut iterations = 0;
    let mut converged = false;
    let mut delta = f64::INFINITY;

    while iterations < cfg.max_iter {
        iterations += 1;
        accumulate_full_sums(j, h, &mut state);

        // New messages from previous-iteration state.
        for (e, &(i, jn)) in edges.iter().enumerate() {
            let coupling = j.off_diagonal[e];
            for (from, to) in [(i, jn), (jn, i)] {
                let out_slot = j.topology.directed_id(e, from);
                let rev_slot = j.topology.directed_id(e, to);
                let alpha = state.alpha_full[from] - state.pi[rev_slot];
                if alpha <= 0.0 {
                    return Err(TanError::NumericBreakdown {
                        iteration: iterations,
                        edge: (from, to),
                        alpha,
                    });
                }
                new_pi[out_slot] = -coupling * coupling / alpha;
                let scale = -coupling / alpha;
                for c in 0..d {
                    let beta = state.beta_full[from * d + c] - state.eta[rev_slot * d + c];
                    new_eta[out_slot * d + c] = scale * beta;
                }
            }
        }

        // Damped update; delta is the max applied change across both message
        // kinds, all directed edges and all columns.
        delta = 0.0;
        for s in 0..directed {
            let next = apply_new * new_pi[s] + keep_old * state.pi[s];
            delta = delta.max((next - state.pi[s]).abs());
            state.pi[s] = next;
        }
        for s in 0..directed * d {
            let next = apply_new * new_eta[s] + keep_old * state.eta[s];
            delta = delta.max((next - state.eta[s]).abs());
            state.eta[s] = next;
        }

        if delta <= cfg.tol {
            converged = true;
            break;
        }
    }

    // Beliefs from the final message state.
    accumulate_full_sums(j, h, &mut state);
    let mut mu = Array2::zeros((n, d));
    let mut belief_pi = Array2::zeros((n, d));
    for i in 0..n {
        let pi_i = state.alpha_full[i];
        if pi_i <= 0.0 {
            return Err(TanError::NumericBreakdown {
                iteration: iterations,
                edge: (i, i),
                alpha: pi_i,
            });
        }
        for c in 0..d {
            mu[(i, c)] = state.beta_full[i * d + c] / pi_i;
            belief_pi[(i, c)] = pi_i;
        }
    }
    if delta == f64::INFINITY {
        delta = 0.0;
    }

    Ok(SolveResult {
        mu,
        iterations,
        converged,
        final_delta: delta,
        belief_pi,
    })
}

/// Per-node sums over incoming messages in fixed ascending-neighbor order.
fn accumulate_full_sums(j: &SparseSymmetricMatrix, h: &Array2<f64>, state: &mut MessageState) {
    let d = state.cols;
    for i in 0..j.node_count() {
        let mut alpha = j.diagonal[i];
        for c in 0..d {
            state.beta_full[i * d + c] = h[(i, c)];
        }
        for &(neighbor, edge_id) in j.topology.neighbors(i) {
            let incoming = j.topology.directed_id(edge_id, neighbor);
            alpha += state.pi[incoming];
            for c in 0..d {
                state.beta_full[i * d + c] += state.eta[incoming * d + c];
            }
        }
        state.alpha_full[i] = alpha;
    }
}

/// Max-norm of `J mu - h` across all columns; diagnostic for partial
/// convergence.
pub fn residual(j: &SparseSymmetricMatrix, mu: &Array2<f64>, h: &Array2<f64>) -> Result<f64> {
    let n = j.node_count();
    if mu.nrows() != n || h.nrows() != n || mu.ncols() != h.ncols() {
        return Err(TanError::InvalidInput(format!(
            "shape mismatch: J is {n}x{n}, mu {}x{}, h {}x{}",
            mu.nrows(),
            mu.ncols(),
            h.nrows(),
            h.ncols()
        )));
    }
    let d = mu.ncols();
    let mut x = vec![0.0; n];
    let mut y = vec![0.0; n];
    let mut worst = 0.0_f64;
    for c in 0..d {
        for i in 0..n {
            x[i] = mu[(i, c)];
        }
        j.matvec(&x, &mut y);
        for i in 0..n {
            worst = worst.max((y[i] - h[(i, c)]).abs());
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_topology;
    use ndarray::array;

    fn matrix(n: usize, edges: &[(usize, usize)], diag: &[f64], off: &[f64]) -> SparseSymmetricMatrix {
        let t = build_topology(n, edges).unwrap();
        SparseSymmetricMatrix::new(t, diag.to_vec(), off.to_vec()).unwrap()
    }

    #[test]
    fn decoupled_nodes_solve_in_one_iteration() {
        let j = matrix(2, &[], &[2.0, 4.0], &[]);
        let h = array![[2.0], [8.0]];
        let r = gabp_solve(&j, &h, &SolverConfig::default()).unwrap();
        assert_eq!(r.iterations, 1);
        assert!(r.converged);
        assert_eq!(r.final_delta, 0.0);
        assert_eq!(r.mu, array![[1.0], [2.0]]);
    }

    #[test]
    fn two_node_system_matches_dense_solution() {
        let j = matrix(2, &[(0, 1)], &[2.0, 2.0], &[1.0]);
        let h = array![[3.0], [3.0]];
        let r = gabp_solve(&j, &h, &SolverConfig::default()).unwrap();
        assert!(r.converged);
        assert!((r.mu[(0, 0)] - 1.0).abs() < 1e-6);
        assert!((r.mu[(1, 0)] - 1.0).abs() < 1e-6);
    }

    #[test]
    fn four_cycle_matches_dense_solution() {
        let j = matrix(4, &[(0, 1), (1, 2), (2, 3), (0, 3)], &[3.0; 4], &[1.0; 4]);
        let h = array![[1.0], [0.0], [0.0], [0.0]];
        let cfg = SolverConfig {
            tol: 1e-9,
            ..SolverConfig::default()
        };
        let r = gabp_solve(&j, &h, &cfg).unwrap();
        assert!(r.converged);
        // Dense solve of the same system via nalgebra.
        let dense = nalgebra::DMatrix::from_fn(4, 4, |a, b| j.to_dense()[a][b]);
        let rhs = nalgebra::DVector::from_vec(vec![1.0, 0.0, 0.0, 0.0]);
        let exact = dense.lu().solve(&rhs).unwrap();
        for i in 0..4 {
            assert!(
                (r.mu[(i, 0)] - exact[i]).abs() < 1e-6,
                "i={i} mu={} exact={} iters={}",
                r.mu[(i, 0)],
                exact[i],
                r.iterations
            );
        }
    }

    #[test]
    fn tree_is_exact_without_damping() {
        // Path 0-1-2-3, diameter 3.
        let j = matrix(4, &[(0, 1), (1, 2), (2, 3)], &[2.0; 4], &[-0.7, 0.4, 0.9]);
        let h = array![[1.0], [-2.0], [0.5], [3.0]];
        let cfg = SolverConfig {
            damping: 0.0,
            tol: 1e-12,
            ..SolverConfig::default()
        };
        let r = gabp_solve(&j, &h, &cfg).unwrap();
        assert!(r.converged);
        assert!(r.iterations <= 4, "iterations = {}", r.iterations);
        let dense = nalgebra::DMatrix::from_fn(4, 4, |a, b| j.to_dense()[a][b]);
        let rhs = nalgebra::DVector::from_vec(vec![1.0, -2.0, 0.5, 3.0]);
        let exact = dense.lu().solve(&rhs).unwrap();
        for i in 0..4 {
            assert!((r.mu[(i, 0)] - exact[i]).abs() < 1e-10);
        }
    }

    #[test]
    fn breakdown_reports_edge_and_iteration() {
        // Strongly non-walk-summable loopy graph: couplings dwarf diagonals.
        let j = matrix(3, &[(0, 1), (1, 2), (0, 2)], &[1.0; 3], &[2.0; 3]);
        let h = array![[1.0], [1.0], [1.0]];
        let err = gabp_solve(&j, &h, &SolverConfig { damping: 0.0, ..Default::default() });
        match err {
            Err(TanError::NumericBreakdown { .. }) => {}
            other => panic!("expected breakdown, got {other:?}"),
        }
    }

    #[test]
    fn non_finite_h_rejected() {
        let j = matrix(1, &[], &[1.0], &[]);
        let h = array![[f64::NAN]];
        assert!(gabp_solve(&j, &h, &SolverConfig::default()).is_err());
    }

    #[test]
    fn residual_of_exact_solution_is_zero() {
        let j = matrix(2, &[(0, 1)], &[2.0, 2.0], &[1.0]);
        let mu = array![[1.0], [1.0]];
        let h = array![[3.0], [3.0]];
        assert!(residual(&j, &mu, &h).unwrap() < 1e-12);
    }

    #[test]
    fn residual_of_zero_guess_is_max_h() {
        let j = matrix(2, &[(0, 1)], &[2.0, 2.0], &[1.0]);
        let mu = Array2::zeros((2, 1));
        let h = array![[3.0], [-7.0]];
        assert_eq!(residual(&j, &mu, &h).unwrap(), 7.0);
    }

    #[test]
    fn residual_shape_mismatch_rejected() {
        let j = matrix(2, &[(0, 1)], &[2.0, 2.0], &[1.0]);
        let mu = Array2::zeros((3, 1));
        let h = Array2::zeros((2, 1));
        assert!(residual(&j, &mu, &h).is_err());
    }
}
