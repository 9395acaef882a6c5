//! Implicit differentiation through the GaBP equilibrium.
//!
//! Forward: assemble `J` from the diagonal/off-diagonal input tensors and
//! solve `J mu = h`. Only `J`'s inputs, `mu`, and convergence metadata stay
//! on the tape; per-iteration messages are dropped, so retained memory is
//! `O(E + N d)` regardless of iteration count.
//!
//! Backward: solve `J g = dL/dmu` with the same solver and configuration,
//! then `dL/dh = g`, `dL/dJ_ij = -sum_cols (g_i mu_j + g_j mu_i)` for the one
//! stored parameter per undirected edge, and `dL/dJ_ii = -sum_cols g_i mu_i`.

use std::sync::Arc;

use ndarray::Array2;

use super::{Op, Tape, TensorId};
use crate::error::{Result, TanError};
use crate::graph::{GraphTopology, SparseSymmetricMatrix};
use crate::solver::{gabp_solve, residual, SolverConfig};

/// One forward or backward solve observed during recording.
#[derive(Debug, Clone)]
pub struct SolveTelemetry {
    /// Caller-supplied label, e.g. `layer0/head3`.
    pub scope: String,
    pub backward: bool,
    pub iterations: usize,
    pub converged: bool,
    pub final_delta: f64,
    pub residual: f64,
}

impl Tape {
    /// Records the GaBP equilibrium `mu = J^{-1} h` as one tape node.
    /// A non-converged forward solve is not an error: the partial solution
    /// is used and flagged in the telemetry, and the backward solve later
    /// runs on the same configuration regardless.
    pub fn gabp_fixed_point(
        &mut self,
        j_diag: TensorId,
        j_off: TensorId,
        h: TensorId,
        topology: &Arc<GraphTopology>,
        cfg: &SolverConfig,
        scope: &str,
    ) -> Result<TensorId> {
        let j = assemble(self, j_diag, j_off, topology)?;
        let hv = self.value(h);
        let solve = gabp_solve(&j, hv, cfg)?;
        let res = residual(&j, &solve.mu, hv)?;
        self.log_solve(SolveTelemetry {
            scope: scope.to_string(),
            backward: false,
            iterations: solve.iterations,
            converged: solve.converged,
            final_delta: solve.final_delta,
            residual: res,
        });
        let rg = self.requires(&[j_diag, j_off, h]);
        self.push(
            solve.mu,
            rg,
            Op::GabpFixedPoint {
                j_diag,
                j_off,
                h,
                topology: Arc::clone(topology),
                cfg: *cfg,
                scope: scope.to_string(),
            },
        )
    }
}

fn assemble(
    tape: &Tape,
    j_diag: TensorId,
    j_off: TensorId,
    topology: &Arc<GraphTopology>,
) -> Result<SparseSymmetricMatrix> {
    let dv = tape.value(j_diag);
    let ov = tape.value(j_off);
    if dv.ncols() != 1 || dv.nrows() != topology.node_count() {
        return Err(TanError::Tape(format!(
            "gabp_fixed_point diagonal must be {} x 1, got {}x{}",
            topology.node_count(),
            dv.nrows(),
            dv.ncols()
        )));
    }
    if ov.ncols() != 1 || ov.nrows() != topology.edge_count() {
        return Err(TanError::Tape(format!(
            "gabp_fixed_point off-diagonal must be {} x 1, got {}x{}",
            topology.edge_count(),
            ov.nrows(),
            ov.ncols()
        )));
    }
    SparseSymmetricMatrix::new(
        (**topology).clone(),
        dv.iter().cloned().collect(),
        ov.iter().cloned().collect(),
    )
}

pub(crate) fn backprop(
    tape: &mut Tape,
    id: TensorId,
    op: &Op,
    upstream: &Array2<f64>,
) -> Result<()> {
    let Op::GabpFixedPoint {
        j_diag,
        j_off,
        h,
        topology,
        cfg,
        scope,
        ..
    } = op
    else {
        unreachable!("non-implicit op routed to implicit backprop");
    };
    let (j_diag, j_off, h) = (*j_diag, *j_off, *h);
    let j = assemble(tape, j_diag, j_off, topology)?;

    // Same solver, same configuration as the forward pass.
    let solve = gabp_solve(&j, upstream, cfg)?;
    let res = residual(&j, &solve.mu, upstream)?;
    tape.log_solve(SolveTelemetry {
        scope: scope.clone(),
        backward: true,
        iterations: solve.iterations,
        converged: solve.converged,
        final_delta: solve.final_delta,
        residual: res,
    });
    let g = solve.mu;

    tape.accumulate_grad(h, &g);

    // The forward mu is exactly this node's cached value.
    let mu = tape.value(id).clone();

    let n = topology.node_count();
    let d = mu.ncols();
    let mut d_diag = Array2::zeros((n, 1));
    for i in 0..n {
        let mut acc = 0.0;
        for c in 0..d {
            acc += g[(i, c)] * mu[(i, c)];
        }
        d_diag[(i, 0)] = -acc;
    }
    let mut d_off = Array2::zeros((topology.edge_count(), 1));
    for (e, &(i, jn)) in topology.edges().iter().enumerate() {
        let mut acc = 0.0;
        for c in 0..d {
            acc += g[(i, c)] * mu[(jn, c)] + g[(jn, c)] * mu[(i, c)];
        }
        d_off[(e, 0)] = -acc;
    }
    tape.accumulate_grad(j_diag, &d_diag);
    tape.accumulate_grad(j_off, &d_off);
    Ok(())
}
