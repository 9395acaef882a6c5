//! Walk-summable precision matrix constructions: pairwise normal,
//! diagonally dominant, and Laplacian, each in a fixed and a learned
//! variant.
//!
//! Fixed variants are plain functions of the raw input features. Learned
//! variants record their parameter paths on the gradient tape through the
//! assembly ops in `autodiff`, so the implicit fixed-point node can push
//! gradients back into the similarity and node-head weights.

use std::sync::Arc;

use ndarray::Array2;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::error::{Result, TanError};
use crate::graph::{
    spectral_radius_abs_residual, GraphTopology, SparseSymmetricMatrix, WalkSummabilityReport,
};

/// Default pairwise-normal margin: `a c >= margin b^2` with margin > 1.
pub const DEFAULT_MARGIN: f64 = 1.1;
/// Default diagonal-dominance gap.
pub const DEFAULT_SLACK: f64 = 0.1;
/// Default Laplacian eigenvalue shift.
pub const DEFAULT_EPSILON_SHIFT: f64 = 0.02;
/// LeakyReLU negative slope used across the model.
pub const LEAKY_SLOPE: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Construction {
    PairwiseNormal,
    DiagDominant,
    Laplacian,
}

impl Construction {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "pairwise_normal" => Ok(Self::PairwiseNormal),
            "diag_dominant" => Ok(Self::DiagDominant),
            "laplacian" => Ok(Self::Laplacian),
            other => Err(TanError::Config(format!(
                "unknown construction `{other}` (expected pairwise_normal, diag_dominant or laplacian)"
            ))),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            Self::PairwiseNormal => "pairwise_normal",
            Self::DiagDominant => "diag_dominant",
            Self::Laplacian => "laplacian",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimilarityKind {
    Cosine,
    GaussianKernel,
    Mlp,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SimilarityConfig {
    pub kind: SimilarityKind,
    /// Gaussian kernel bandwidth.
    pub bandwidth: f64,
    /// Averaging of both directed orders; always applied for the MLP head.
    pub symmetrize: bool,
}

impl Default for SimilarityConfig {
    fn default() -> Self {
        Self {
            kind: SimilarityKind::Cosine,
            bandwidth: 1.0,
            symmetrize: true,
        }
    }
}

/// A validated precision matrix together with its construction metadata and
/// spectral report.
#[derive(Debug, Clone)]
pub struct PrecisionBuild {
    pub matrix: SparseSymmetricMatrix,
    pub construction: Construction,
    pub learned: bool,
    pub report: WalkSummabilityReport,
}

impl PrecisionBuild {
    pub fn validate(
        matrix: SparseSymmetricMatrix,
        construction: Construction,
        learned: bool,
    ) -> Result<Self> {
        matrix.check_solver_ready()?;
        let report = spectral_radius_abs_residual(&matrix, 1e-9, 10_000)?;
        Ok(Self {
            matrix,
            construction,
            learned,
            report,
        })
    }
}

// ---------------------------------------------------------------------------
// Fixed builders
// ---------------------------------------------------------------------------

/// Pairwise-normal assembly: `J_ij = b_ij`, `J_ii = sum of incident a_ij`
/// (`a` for the lower endpoint, `c` for the higher one). Edges violating
/// `a c >= margin b^2` get `b` clamped to `sign(b) sqrt(a c / margin)`.
/// Isolated nodes receive a unit diagonal.
pub fn build_pairwise_normal(
    topology: &GraphTopology,
    a: &[f64],
    b: &[f64],
    c: &[f64],
    margin: f64,
) -> Result<SparseSymmetricMatrix> {
    let e = topology.edge_count();
    if a.len() != e || b.len() != e || c.len() != e {
        return Err(TanError::InvalidInput(format!(
            "pairwise normal expects {e} values per edge array"
        )));
    }
    if !(margin > 1.0) {
        return Err(TanError::Config(format!("margin must exceed 1, got {margin}")));
    }
    if a.iter().chain(c.iter()).any(|&v| v <= 0.0) {
        return Err(TanError::InvalidInput(
            "pairwise normal a and c must be strictly positive".into(),
        ));
    }
    let n = topology.node_count();
    let mut diag = vec![0.0; n];
    let mut off = vec![0.0; e];
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        let limit = (a[k] * c[k] / margin).sqrt();
        off[k] = b[k].clamp(-limit, limit);
        diag[i] += a[k];
        diag[j] += c[k];
    }
    for (i, d) in diag.iter_mut().enumerate() {
        if topology.degree(i) == 0 {
            *d = 1.0;
        }
    }
    SparseSymmetricMatrix::new(topology.clone(), diag, off)
}

/// Diagonally dominant assembly: `J_ij` = coupling, `J_ii` = incident
/// absolute coupling sum + confidence + slack, strictly dominant by
/// construction.
pub fn build_diag_dominant(
    topology: &GraphTopology,
    couplings: &[f64],
    self_confidence: &[f64],
    slack: f64,
) -> Result<SparseSymmetricMatrix> {
    if couplings.len() != topology.edge_count() || self_confidence.len() != topology.node_count() {
        return Err(TanError::InvalidInput(
            "diag dominant expects one coupling per edge and one confidence per node".into(),
        ));
    }
    if !(slack > 0.0) {
        return Err(TanError::Config(format!("slack must be positive, got {slack}")));
    }
    if self_confidence.iter().any(|&v| v < 0.0) {
        return Err(TanError::InvalidInput("self confidence must be nonnegative".into()));
    }
    if couplings.iter().chain(self_confidence.iter()).any(|v| !v.is_finite()) {
        return Err(TanError::InvalidInput("non-finite diag dominant parameter".into()));
    }
    let mut diag: Vec<f64> = self_confidence.iter().map(|&v| v + slack).collect();
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        diag[i] += couplings[k].abs();
        diag[j] += couplings[k].abs();
    }
    SparseSymmetricMatrix::new(topology.clone(), diag, couplings.to_vec())
}

/// Laplacian assembly: `J = (L + eps I) / (2 + eps)` from the normalized
/// Laplacian of the given nonnegative weights, with an optional per-node
/// diagonal bump scaled by the same `1 / (2 + eps)`. Zero-degree nodes are
/// identity rows before the shift.
pub fn build_laplacian(
    topology: &GraphTopology,
    weights: &[f64],
    epsilon_shift: f64,
    diagonal_bump: Option<&[f64]>,
) -> Result<SparseSymmetricMatrix> {
    if weights.len() != topology.edge_count() {
        return Err(TanError::InvalidInput("laplacian expects one weight per edge".into()));
    }
    if weights.iter().any(|&v| v < 0.0) {
        return Err(TanError::InvalidInput("laplacian weights must be nonnegative".into()));
    }
    if !(epsilon_shift > 0.0 && epsilon_shift < 1.0) {
        return Err(TanError::Config(format!(
            "epsilon_shift must lie in (0, 1), got {epsilon_shift}"
        )));
    }
    if let Some(bump) = diagonal_bump {
        if bump.len() != topology.node_count() {
            return Err(TanError::InvalidInput("diagonal bump expects one value per node".into()));
        }
        if bump.iter().any(|&v| v < 0.0) {
            return Err(TanError::InvalidInput("diagonal bump must be nonnegative".into()));
        }
    }
    let n = topology.node_count();
    let scale = 1.0 / (2.0 + epsilon_shift);
    let mut degree = vec![0.0; n];
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        degree[i] += weights[k];
        degree[j] += weights[k];
    }
    let mut diag = vec![(1.0 + epsilon_shift) * scale; n];
    if let Some(bump) = diagonal_bump {
        for (d, &b) in diag.iter_mut().zip(bump) {
            *d += b * scale;
        }
    }
    let mut off = vec![0.0; topology.edge_count()];
    for (k, &(i, j)) in topology.edges().iter().enumerate() {
        if degree[i] > 0.0 && degree[j] > 0.0 {
            off[k] = -weights[k] / (degree[i] * degree[j]).sqrt() * scale;
        }
    }
    SparseSymmetricMatrix::new(topology.clone(), diag, off)
}

// ---------------------------------------------------------------------------
// Similarity scores (non-tape path)
// ---------------------------------------------------------------------------

/// Per-edge similarity scores of the rows of `s`. The MLP kind applies the
/// provided scalar head (`2 d_sim x 1`) to `[s_i | s_j]` and averages both
/// orders; cosine and Gaussian kernels are symmetric already.
pub fn similarity_scores(
    s: &Array2<f64>,
    topology: &GraphTopology,
    cfg: &SimilarityConfig,
    mlp_head: Option<&Array2<f64>>,
) -> Result<Vec<f64>> {
    if s.nrows() != topology.node_count() {
        return Err(TanError::InvalidInput(format!(
            "similarity embedding has {} rows for {} nodes",
            s.nrows(),
            topology.node_count()
        )));
    }
    if s.iter().any(|v| !v.is_finite()) {
        return Err(TanError::InvalidInput("similarity embedding must be finite".into()));
    }
    let d = s.ncols();
    let mut scores = Vec::with_capacity(topology.edge_count());
    match cfg.kind {
        SimilarityKind::Cosine => {
            for &(i, j) in topology.edges() {
                scores.push(cosine(&s.row(i).to_vec(), &s.row(j).to_vec()));
            }
        }
        SimilarityKind::GaussianKernel => {
            if !(cfg.bandwidth > 0.0) {
                return Err(TanError::Config(format!(
                    "gaussian kernel bandwidth must be positive, got {}",
                    cfg.bandwidth
                )));
            }
            let inv = 1.0 / (2.0 * cfg.bandwidth * cfg.bandwidth);
            for &(i, j) in topology.edges() {
                let d2: f64 = s
                    .row(i)
                    .iter()
                    .zip(s.row(j).iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum();
                scores.push((-d2 * inv).exp());
            }
        }
        SimilarityKind::Mlp => {
            let head = mlp_head.ok_or_else(|| {
                TanError::Config("mlp similarity requires a scalar head".into())
            })?;
            if head.nrows() != 2 * d || head.ncols() != 1 {
                return Err(TanError::Config(format!(
                    "mlp head must be {} x 1, got {}x{}",
                    2 * d,
                    head.nrows(),
                    head.ncols()
                )));
            }
            let apply = |first: usize, second: usize| -> f64 {
                let mut acc = 0.0;
                for c in 0..d {
                    acc += s[(first, c)] * head[(c, 0)] + s[(second, c)] * head[(d + c, 0)];
                }
                acc
            };
            for &(i, j) in topology.edges() {
                // Symmetrized: (J + J^T) / 2 over the two directed orders.
                scores.push(0.5 * (apply(i, j) + apply(j, i)));
            }
        }
    }
    Ok(scores)
}

pub(crate) fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    let na = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    dot / (na * nb + 1e-12)
}

// ---------------------------------------------------------------------------
// Fixed variants from raw features
// ---------------------------------------------------------------------------

/// The fixed (non-learned) variant of each construction, derived from raw
/// input features: pairwise normal uses unit self-precisions and cosine
/// couplings; diagonally dominant uses cosine couplings with zero
/// confidence; Laplacian uses the binary adjacency.
pub fn build_fixed(
    construction: Construction,
    features: &Array2<f64>,
    topology: &GraphTopology,
) -> Result<SparseSymmetricMatrix> {
    match construction {
        Construction::PairwiseNormal => {
            let cfg = SimilarityConfig::default();
            let b = similarity_scores(features, topology, &cfg, None)?;
            let ones = vec![1.0; topology.edge_count()];
            build_pairwise_normal(topology, &ones, &b, &ones, DEFAULT_MARGIN)
        }
        Construction::DiagDominant => {
            let cfg = SimilarityConfig::default();
            let couplings = similarity_scores(features, topology, &cfg, None)?;
            let conf = vec![0.0; topology.node_count()];
            build_diag_dominant(topology, &couplings, &conf, DEFAULT_SLACK)
        }
        Construction::Laplacian => {
            let weights = vec![1.0; topology.edge_count()];
            build_laplacian(topology, &weights, DEFAULT_EPSILON_SHIFT, None)
        }
    }
}

// ---------------------------------------------------------------------------
// Learned builds on the tape
// ---------------------------------------------------------------------------

/// Tape handles for a learned build's parameters. `w_sim` maps `d_model`
/// to the similarity embedding; `node_head` maps `d_model` to the
/// construction's per-node quantity (self-precision, confidence, or bump).
#[derive(Debug, Clone, Copy)]
pub struct LearnedParams {
    pub w_sim: TensorId,
    pub node_head: TensorId,
}

/// Records a learned precision build: `s = LeakyReLU(Z W_sim)`, per-edge
/// scores, then the construction's assembly. Returns the diagonal
/// (`N x 1`) and off-diagonal (`E x 1`) tensors feeding the fixed point.
pub fn record_learned_build(
    tape: &mut Tape,
    construction: Construction,
    z: TensorId,
    topology: &Arc<GraphTopology>,
    params: &LearnedParams,
    similarity: &SimilarityConfig,
) -> Result<(TensorId, TensorId)> {
    let n = topology.node_count();
    let e = topology.edge_count();
    let proj = tape.matmul(z, params.w_sim)?;
    let s = tape.leaky_relu(proj, LEAKY_SLOPE)?;
    let head_raw = tape.matmul(z, params.node_head)?;
    let node_values = tape.softplus(head_raw)?;
    let stacked = match construction {
        Construction::PairwiseNormal => {
            let b = tape.cosine_edge_scores(s, topology)?;
            tape.pairwise_normal_assemble(b, node_values, DEFAULT_MARGIN, topology)?
        }
        Construction::DiagDominant => {
            let couplings = tape.cosine_edge_scores(s, topology)?;
            tape.diag_dominant_assemble(couplings, node_values, DEFAULT_SLACK, topology)?
        }
        Construction::Laplacian => {
            let weights = tape.gaussian_edge_scores(s, topology, similarity.bandwidth)?;
            tape.laplacian_assemble(weights, Some(node_values), DEFAULT_EPSILON_SHIFT, topology)?
        }
    };
    let diag = tape.slice_rows(stacked, 0, n)?;
    let off = tape.slice_rows(stacked, n, e)?;
    Ok((diag, off))
}

/// One-shot learned build producing a validated [`PrecisionBuild`];
/// convenience for verification and analysis paths.
pub fn build_learned(
    construction: Construction,
    features: &Array2<f64>,
    topology: &Arc<GraphTopology>,
    w_sim: &Array2<f64>,
    node_head: &Array2<f64>,
    similarity: &SimilarityConfig,
) -> Result<PrecisionBuild> {
    let mut tape = Tape::new();
    let z = tape.constant(features.clone())?;
    let params = LearnedParams {
        w_sim: tape.constant(w_sim.clone())?,
        node_head: tape.constant(node_head.clone())?,
    };
    let (diag, off) = record_learned_build(
        &mut tape,
        construction,
        z,
        topology,
        &params,
        similarity,
    )?;
    let matrix = SparseSymmetricMatrix::new(
        (**topology).clone(),
        tape.value(diag).iter().cloned().collect(),
        tape.value(off).iter().cloned().collect(),
    )?;
    PrecisionBuild::validate(matrix, construction, true)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_topology;

    #[test]
    fn pairwise_normal_direct_assembly() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        let j = build_pairwise_normal(&t, &[2.0], &[1.0], &[2.0], 2.0).unwrap();
        assert_eq!(j.diagonal, vec![2.0, 2.0]);
        assert_eq!(j.off_diagonal, vec![1.0]);
    }

    #[test]
    fn pairwise_normal_clamps_violating_coupling() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        let j = build_pairwise_normal(&t, &[1.0], &[2.0], &[1.0], 2.0).unwrap();
        assert!((j.off_diagonal[0] - 0.5_f64.sqrt()).abs() < 1e-12);
        let report = spectral_radius_abs_residual(&j, 1e-10, 10_000).unwrap();
        assert!(report.spectral_radius < 1.0);
    }

    #[test]
    fn pairwise_normal_triangle_diagonal() {
        let t = build_topology(3, &[(0, 1), (1, 2), (0, 2)]).unwrap();
        let j = build_pairwise_normal(&t, &[1.0; 3], &[0.3; 3], &[1.0; 3], DEFAULT_MARGIN).unwrap();
        assert_eq!(j.diagonal, vec![2.0, 2.0, 2.0]);
        let report = spectral_radius_abs_residual(&j, 1e-10, 10_000).unwrap();
        assert!(report.spectral_radius < 1.0);
    }

    #[test]
    fn diag_dominant_path_assembly() {
        let t = build_topology(3, &[(0, 1), (1, 2)]).unwrap();
        let j = build_diag_dominant(&t, &[-1.0, -1.0], &[0.0; 3], 0.5).unwrap();
        assert_eq!(j.diagonal, vec![1.5, 2.5, 1.5]);
    }

    #[test]
    fn diag_dominant_edgeless() {
        let t = build_topology(2, &[]).unwrap();
        let j = build_diag_dominant(&t, &[], &[2.0, 3.0], 0.5).unwrap();
        assert_eq!(j.diagonal, vec![2.5, 3.5]);
    }

    #[test]
    fn laplacian_single_edge_closed_form() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        let j = build_laplacian(&t, &[1.0], 0.02, None).unwrap();
        assert!((j.diagonal[0] - 1.02 / 2.02).abs() < 1e-15);
        assert!((j.off_diagonal[0] - (-1.0 / 2.02)).abs() < 1e-15);
    }

    #[test]
    fn laplacian_edgeless_is_scaled_identity() {
        let t = build_topology(3, &[]).unwrap();
        let j = build_laplacian(&t, &[], 0.02, None).unwrap();
        for &d in &j.diagonal {
            assert!((d - 1.02 / 2.02).abs() < 1e-15);
        }
    }

    #[test]
    fn negative_weight_rejected() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        assert!(build_laplacian(&t, &[-0.5], 0.02, None).is_err());
    }

    #[test]
    fn cosine_identical_rows_score_one() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        let s = ndarray::array![[1.0, 0.0], [1.0, 0.0]];
        let scores = similarity_scores(&s, &t, &SimilarityConfig::default(), None).unwrap();
        assert!((scores[0] - 1.0).abs() < 1e-9);
    }

    #[test]
    fn mlp_scores_are_order_averaged() {
        let t = build_topology(2, &[(0, 1)]).unwrap();
        let s = ndarray::array![[1.0, 0.0], [0.0, 1.0]];
        // Asymmetric head: depends on the order of the concatenation.
        let head = ndarray::array![[1.0], [2.0], [3.0], [4.0]];
        let cfg = SimilarityConfig {
            kind: SimilarityKind::Mlp,
            ..SimilarityConfig::default()
        };
        let scores = similarity_scores(&s, &t, &cfg, Some(&head)).unwrap();
        // f(i,j) = 1*1 + 4*1 = 5; f(j,i) = 2*1 + 3*1 = 5 -> average 5.
        assert!((scores[0] - 5.0).abs() < 1e-12);
    }

    #[test]
    fn zero_similarity_gives_diagonal_dd_matrix() {
        let t = build_topology(3, &[(0, 1), (1, 2)]).unwrap();
        // Zero W_sim -> all-zero embedding -> cosine 0 per the guard.
        let topo = Arc::new(t);
        let x = ndarray::Array2::from_elem((3, 2), 1.0);
        let build = build_learned(
            Construction::DiagDominant,
            &x,
            &topo,
            &Array2::zeros((2, 2)),
            &Array2::zeros((2, 1)),
            &SimilarityConfig::default(),
        )
        .unwrap();
        for &off in &build.matrix.off_diagonal {
            assert_eq!(off, 0.0);
        }
        assert!(build.report.spectral_radius < 1.0);
    }
}
