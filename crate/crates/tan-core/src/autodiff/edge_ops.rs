//! Per-edge similarity scores and precision-matrix assembly ops.
//!
//! Assembly ops emit a stacked `(N + E) x 1` tensor: diagonal entries first,
//! then one off-diagonal value per undirected edge in canonical edge order.
//! Callers split the stack with `slice_rows`.

use std::sync::Arc;

use ndarray::Array2;

use super::{Op, Tape, TensorId};
use crate::error::{Result, TanError};
use crate::graph::GraphTopology;

const COSINE_GUARD: f64 = 1e-12;

impl Tape {
    /// Per-edge cosine similarity of the endpoint rows of `s` (`N x d`).
    /// Zero vectors score 0 through the guarded denominator.
    pub fn cosine_edge_scores(
        &mut self,
        s: TensorId,
        topology: &Arc<GraphTopology>,
    ) -> Result<TensorId> {
        let sv = self.value(s);
        check_node_rows(sv, topology, "cosine_edge_scores")?;
        let mut value = Array2::zeros((topology.edge_count(), 1));
        for (e, &(i, j)) in topology.edges().iter().enumerate() {
            let (ri, rj) = (sv.row(i), sv.row(j));
            let dot: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| a * b).sum();
            let ni = ri.iter().map(|v| v * v).sum::<f64>().sqrt();
            let nj = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
            value[(e, 0)] = dot / (ni * nj + COSINE_GUARD);
        }
        let rg = self.tensor(s).requires_grad;
        self.push(
            value,
            rg,
            Op::CosineEdgeScores {
                s,
                topology: Arc::clone(topology),
            },
        )
    }

    /// Per-edge Gaussian kernel `exp(-||s_i - s_j||^2 / (2 bandwidth^2))`.
    pub fn gaussian_edge_scores(
        &mut self,
        s: TensorId,
        topology: &Arc<GraphTopology>,
        bandwidth: f64,
    ) -> Result<TensorId> {
        if !(bandwidth > 0.0) {
            return Err(TanError::Config(format!(
                "gaussian kernel bandwidth must be positive, got {bandwidth}"
            )));
        }
        let sv = self.value(s);
        check_node_rows(sv, topology, "gaussian_edge_scores")?;
        let inv = 1.0 / (2.0 * bandwidth * bandwidth);
        let mut value = Array2::zeros((topology.edge_count(), 1));
        for (e, &(i, j)) in topology.edges().iter().enumerate() {
            let d2: f64 = sv
                .row(i)
                .iter()
                .zip(sv.row(j).iter())
                .map(|(a, b)| (a - b) * (a - b))
                .sum();
            value[(e, 0)] = (-d2 * inv).exp();
        }
        let rg = self.tensor(s).requires_grad;
        self.push(
            value,
            rg,
            Op::GaussianEdgeScores {
                s,
                topology: Arc::clone(topology),
                bandwidth,
            },
        )
    }

    /// `2E x 2d` matrix with rows `[s_i | s_j]` (row `2e`) and `[s_j | s_i]`
    /// (row `2e + 1`); feeds an MLP similarity head whose two directed
    /// outputs are averaged by [`Tape::average_directed_pairs`].
    pub fn gather_edge_pairs(
        &mut self,
        s: TensorId,
        topology: &Arc<GraphTopology>,
    ) -> Result<TensorId> {
        let sv = self.value(s);
        check_node_rows(sv, topology, "gather_edge_pairs")?;
        let d = sv.ncols();
        let mut value = Array2::zeros((2 * topology.edge_count(), 2 * d));
        for (e, &(i, j)) in topology.edges().iter().enumerate() {
            for c in 0..d {
                value[(2 * e, c)] = sv[(i, c)];
                value[(2 * e, d + c)] = sv[(j, c)];
                value[(2 * e + 1, c)] = sv[(j, c)];
                value[(2 * e + 1, d + c)] = sv[(i, c)];
            }
        }
        let rg = self.tensor(s).requires_grad;
        self.push(
            value,
            rg,
            Op::GatherEdgePairs {
                s,
                topology: Arc::clone(topology),
            },
        )
    }

    /// Symmetrizes a directed `2E x 1` score column into `E x 1` by
    /// averaging the two orders of each edge.
    pub fn average_directed_pairs(&mut self, x: TensorId) -> Result<TensorId> {
        let xv = self.value(x);
        if xv.ncols() != 1 || xv.nrows() % 2 != 0 {
            return Err(TanError::Tape(format!(
                "average_directed_pairs expects 2E x 1, got {}x{}",
                xv.nrows(),
                xv.ncols()
            )));
        }
        let e = xv.nrows() / 2;
        let mut value = Array2::zeros((e, 1));
        for k in 0..e {
            value[(k, 0)] = 0.5 * (xv[(2 * k, 0)] + xv[(2 * k + 1, 0)]);
        }
        let rg = self.tensor(x).requires_grad;
        self.push(value, rg, Op::AverageDirectedPairs(x))
    }

    /// Pairwise-normal assembly. `b` is `E x 1` couplings, `p` is `N x 1`
    /// strictly positive self-precisions (`a_ij = p_i`, `c_ij = p_j`). When
    /// an edge violates `a c >= margin b^2` both self-precisions are rescaled
    /// multiplicatively until it holds with equality. Isolated nodes get a
    /// unit diagonal.
    pub fn pairwise_normal_assemble(
        &mut self,
        b: TensorId,
        p: TensorId,
        margin: f64,
        topology: &Arc<GraphTopology>,
    ) -> Result<TensorId> {
        if !(margin > 1.0) {
            return Err(TanError::Config(format!("margin must exceed 1, got {margin}")));
        }
        let bv = self.value(b);
        let pv = self.value(p);
        check_edge_col(bv, topology, "pairwise_normal_assemble b")?;
        check_node_col(pv, topology, "pairwise_normal_assemble p")?;
        if pv.iter().any(|&v| v <= 0.0) {
            return Err(TanError::InvalidInput(
                "pairwise normal self-precisions must be strictly positive".into(),
            ));
        }
        let n = topology.node_count();
        let e = topology.edge_count();
        let mut value = Array2::zeros((n + e, 1));
        for i in 0..n {
            if topology.degree(i) == 0 {
                value[(i, 0)] = 1.0;
            }
        }
        for (k, &(i, j)) in topology.edges().iter().enumerate() {
            let t = pn_scale(bv[(k, 0)], pv[(i, 0)], pv[(j, 0)], margin);
            value[(i, 0)] += pv[(i, 0)] * t;
            value[(j, 0)] += pv[(j, 0)] * t;
            value[(n + k, 0)] = bv[(k, 0)];
        }
        let rg = self.requires(&[b, p]);
        self.push(
            value,
            rg,
            Op::PairwiseNormalAssemble {
                b,
                p,
                margin,
                topology: Arc::clone(topology),
            },
        )
    }

    /// Diagonally dominant assembly: off-diagonals are the couplings, each
    /// diagonal is the incident absolute coupling sum plus a nonnegative
    /// confidence and a strictly positive slack.
    pub fn diag_dominant_assemble(
        &mut self,
        couplings: TensorId,
        confidence: TensorId,
        slack: f64,
        topology: &Arc<GraphTopology>,
    ) -> Result<TensorId> {
        if !(slack > 0.0) {
            return Err(TanError::Config(format!("slack must be positive, got {slack}")));
        }
        let cv = self.value(couplings);
        let fv = self.value(confidence);
        check_edge_col(cv, topology, "diag_dominant_assemble couplings")?;
        check_node_col(fv, topology, "diag_dominant_assemble confidence")?;
        let n = topology.node_count();
        let e = topology.edge_count();
        let mut value = Array2::zeros((n + e, 1));
        for i in 0..n {
            value[(i, 0)] = fv[(i, 0)] + slack;
        }
        for (k, &(i, j)) in topology.edges().iter().enumerate() {
            let c = cv[(k, 0)];
            value[(i, 0)] += c.abs();
            value[(j, 0)] += c.abs();
            value[(n + k, 0)] = c;
        }
        let rg = self.requires(&[couplings, confidence]);
        self.push(
            value,
            rg,
            Op::DiagDominantAssemble {
                couplings,
                confidence,
                topology: Arc::clone(topology),
            },
        )
    }

    /// Laplacian assembly: `J = (L + eps I) / (2 + eps)` from the normalized
    /// Laplacian of nonnegative edge weights, plus an optional nonnegative
    /// per-node diagonal bump scaled by the same `1 / (2 + eps)`. Zero-degree
    /// nodes become identity rows before the shift.
    pub fn laplacian_assemble(
        &mut self,
        weights: TensorId,
        bump: Option<TensorId>,
        epsilon_shift: f64,
        topology: &Arc<GraphTopology>,
    ) -> Result<TensorId> {
        if !(epsilon_shift > 0.0 && epsilon_shift < 1.0) {
            return Err(TanError::Config(format!(
                "epsilon_shift must lie in (0, 1), got {epsilon_shift}"
            )));
        }
        let wv = self.value(weights);
        check_edge_col(wv, topology, "laplacian_assemble weights")?;
        if wv.iter().any(|&v| v < 0.0) {
            return Err(TanError::InvalidInput("laplacian weights must be nonnegative".into()));
        }
        if let Some(bump) = bump {
            check_node_col(self.value(bump), topology, "laplacian_assemble bump")?;
        }
        let n = topology.node_count();
        let e = topology.edge_count();
        let scale = 1.0 / (2.0 + epsilon_shift);
        let degree = weighted_degrees(wv, topology);
        let mut value = Array2::zeros((n + e, 1));
        for i in 0..n {
            value[(i, 0)] = (1.0 + epsilon_shift) * scale;
            if let Some(bump) = bump {
                value[(i, 0)] += self.value(bump)[(i, 0)] * scale;
            }
        }
        for (k, &(i, j)) in topology.edges().iter().enumerate() {
            if degree[i] > 0.0 && degree[j] > 0.0 {
                value[(n + k, 0)] = -wv[(k, 0)] / (degree[i] * degree[j]).sqrt() * scale;
            }
        }
        let mut inputs = vec![weights];
        if let Some(b) = bump {
            inputs.push(b);
        }
        let rg = self.requires(&inputs);
        self.push(
            value,
            rg,
            Op::LaplacianAssemble {
                weights,
                bump,
                epsilon_shift,
                topology: Arc::clone(topology),
            },
        )
    }
}

/// Scale factor applied to both self-precisions of one edge so that
/// `(t a)(t c) >= margin b^2`.
fn pn_scale(b: f64, a: f64, c: f64, margin: f64) -> f64 {
    let need = margin * b * b;
    let prod = a * c;
    if prod >= need {
        1.0
    } else {
        (need / prod).sqrt()
    }
}

pub(crate) fn weighted_degrees(weights: &Array2<f64>, topology: &GraphTopology) -> Vec<f64> {
    let mut degree = vec![0.0; topology.node_count()];
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        degree[i] += weights[(k, 0)];
        degree[j] += weights[(k, 0)];
    }
    degree
}

pub(crate) fn backprop(tape: &mut Tape, op: &Op, upstream: &Array2<f64>) -> Result<()> {
    match op {
        Op::CosineEdgeScores { s, topology } => {
            let s = *s;
            let sv = tape.value(s).clone();
            let mut ds = Array2::zeros(sv.dim());
            for (e, &(i, j)) in topology.edges().iter().enumerate() {
                let up = upstream[(e, 0)];
                if up == 0.0 {
                    continue;
                }
                let (ri, rj) = (sv.row(i), sv.row(j));
                let dot: f64 = ri.iter().zip(rj.iter()).map(|(a, b)| a * b).sum();
                let ni = ri.iter().map(|v| v * v).sum::<f64>().sqrt();
                let nj = rj.iter().map(|v| v * v).sum::<f64>().sqrt();
                if ni == 0.0 || nj == 0.0 {
                    continue; // score pinned at 0 by the guard
                }
                let denom = ni * nj + COSINE_GUARD;
                for c in 0..sv.ncols() {
                    ds[(i, c)] += up * (rj[c] / denom - dot * nj * ri[c] / (denom * denom * ni));
                    ds[(j, c)] += up * (ri[c] / denom - dot * ni * rj[c] / (denom * denom * nj));
                }
            }
            tape.accumulate_grad(s, &ds);
        }
        Op::GaussianEdgeScores {
            s,
            topology,
            bandwidth,
        } => {
            let s = *s;
            let sv = tape.value(s).clone();
            let inv_b2 = 1.0 / (bandwidth * bandwidth);
            let mut ds = Array2::zeros(sv.dim());
            for (e, &(i, j)) in topology.edges().iter().enumerate() {
                let up = upstream[(e, 0)];
                if up == 0.0 {
                    continue;
                }
                let d2: f64 = sv
                    .row(i)
                    .iter()
                    .zip(sv.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                let w = (-d2 * 0.5 * inv_b2).exp();
                for c in 0..sv.ncols() {
                    let diff = sv[(i, c)] - sv[(j, c)];
                    ds[(i, c)] += up * w * (-diff * inv_b2);
                    ds[(j, c)] += up * w * (diff * inv_b2);
                }
            }
            tape.accumulate_grad(s, &ds);
        }
        Op::GatherEdgePairs { s, topology } => {
            let s = *s;
            let d = tape.value(s).ncols();
            let mut ds = Array2::zeros(tape.value(s).dim());
            for (e, &(i, j)) in topology.edges().iter().enumerate() {
                for c in 0..d {
                    ds[(i, c)] += upstream[(2 * e, c)] + upstream[(2 * e + 1, d + c)];
                    ds[(j, c)] += upstream[(2 * e, d + c)] + upstream[(2 * e + 1, c)];
                }
            }
            tape.accumulate_grad(s, &ds);
        }
        Op::AverageDirectedPairs(x) => {
            let x = *x;
            let mut dx = Array2::zeros(tape.value(x).dim());
            for k in 0..upstream.nrows() {
                dx[(2 * k, 0)] = 0.5 * upstream[(k, 0)];
                dx[(2 * k + 1, 0)] = 0.5 * upstream[(k, 0)];
            }
            tape.accumulate_grad(x, &dx);
        }
        Op::PairwiseNormalAssemble {
            b,
            p,
            margin,
            topology,
        } => {
            let (b, p) = (*b, *p);
            let bv = tape.value(b).clone();
            let pv = tape.value(p).clone();
            let n = topology.node_count();
            let mut db = Array2::zeros(bv.dim());
            let mut dp = Array2::zeros(pv.dim());
            for (k, &(i, j)) in topology.edges().iter().enumerate() {
                db[(k, 0)] += upstream[(n + k, 0)];
                let (be, pi, pj) = (bv[(k, 0)], pv[(i, 0)], pv[(j, 0)]);
                let t = pn_scale(be, pi, pj, *margin);
                let (ui, uj) = (upstream[(i, 0)], upstream[(j, 0)]);
                if t == 1.0 {
                    dp[(i, 0)] += ui;
                    dp[(j, 0)] += uj;
                } else {
                    // Clamped: a'_ij = sqrt(margin) |b| sqrt(p_i / p_j) and
                    // symmetrically for c'_ij.
                    dp[(i, 0)] += ui * 0.5 * t + uj * (-0.5) * t * pj / pi;
                    dp[(j, 0)] += uj * 0.5 * t + ui * (-0.5) * t * pi / pj;
                    let db_term = margin.sqrt() * be.signum();
                    db[(k, 0)] += ui * db_term * (pi / pj).sqrt() + uj * db_term * (pj / pi).sqrt();
                }
            }
            tape.accumulate_grad(b, &db);
            tape.accumulate_grad(p, &dp);
        }
        Op::DiagDominantAssemble {
            couplings,
            confidence,
            topology,
            ..
        } => {
            let (couplings, confidence) = (*couplings, *confidence);
            let cv = tape.value(couplings).clone();
            let n = topology.node_count();
            let mut dc = Array2::zeros(cv.dim());
            let mut df = Array2::zeros((n, 1));
            for i in 0..n {
                df[(i, 0)] = upstream[(i, 0)];
            }
            for (k, &(i, j)) in topology.edges().iter().enumerate() {
                let sign = if cv[(k, 0)] >= 0.0 { 1.0 } else { -1.0 };
                dc[(k, 0)] = upstream[(n + k, 0)] + sign * (upstream[(i, 0)] + upstream[(j, 0)]);
            }
            tape.accumulate_grad(couplings, &dc);
            tape.accumulate_grad(confidence, &df);
        }
        Op::LaplacianAssemble {
            weights,
            bump,
            epsilon_shift,
            topology,
        } => {
            let weights = *weights;
            let wv = tape.value(weights).clone();
            let n = topology.node_count();
            let scale = 1.0 / (2.0 + epsilon_shift);
            let degree = weighted_degrees(&wv, topology);

            if let Some(bid) = bump {
                let mut dbump = Array2::zeros((n, 1));
                for i in 0..n {
                    dbump[(i, 0)] = upstream[(i, 0)] * scale;
                }
                tape.accumulate_grad(*bid, &dbump);
            }

            // Off-diagonal e = (i, j): off_e = -w_e (d_i d_j)^{-1/2} scale.
            // First collect the degree-channel gradients, then scatter them
            // back to every incident weight.
            let mut gdeg = vec![0.0; n];
            let mut dw = Array2::zeros(wv.dim());
            for (k, &(i, j)) in topology.edges().iter().enumerate() {
                let up = upstream[(n + k, 0)];
                if degree[i] <= 0.0 || degree[j] <= 0.0 {
                    continue;
                }
                let inv_sqrt = 1.0 / (degree[i] * degree[j]).sqrt();
                dw[(k, 0)] += up * (-inv_sqrt * scale);
                let common = up * 0.5 * wv[(k, 0)] * inv_sqrt * scale;
                gdeg[i] += common / degree[i];
                gdeg[j] += common / degree[j];
            }
            for (k, &(i, j)) in topology.edges().iter().enumerate() {
                dw[(k, 0)] += gdeg[i] + gdeg[j];
            }
            tape.accumulate_grad(weights, &dw);
        }
        _ => unreachable!("non-edge op routed to edge backprop"),
    }
    Ok(())
}

fn check_node_rows(v: &Array2<f64>, topology: &GraphTopology, what: &str) -> Result<()> {
    if v.nrows() != topology.node_count() {
        return Err(TanError::Tape(format!(
            "{what}: expected {} node rows, got {}",
            topology.node_count(),
            v.nrows()
        )));
    }
    Ok(())
}

fn check_node_col(v: &Array2<f64>, topology: &GraphTopology, what: &str) -> Result<()> {
    if v.nrows() != topology.node_count() || v.ncols() != 1 {
        return Err(TanError::Tape(format!(
            "{what}: expected {} x 1, got {}x{}",
            topology.node_count(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}

fn check_edge_col(v: &Array2<f64>, topology: &GraphTopology, what: &str) -> Result<()> {
    if v.nrows() != topology.edge_count() || v.ncols() != 1 {
        return Err(TanError::Tape(format!(
            "{what}: expected {} x 1, got {}x{}",
            topology.edge_count(),
            v.nrows(),
            v.ncols()
        )));
    }
    Ok(())
}
