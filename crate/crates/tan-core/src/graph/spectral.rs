//! Spectral diagnostics: walk-summability check and Fiedler ordering.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::SparseSymmetricMatrix;
use crate::error::{Result, TanError};

/// Outcome of the walk-summability check rho(|I - Jtilde|) < 1 on the
/// diagonally normalized precision matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct WalkSummabilityReport {
    /// Dominant eigenvalue magnitude of `|I - Jtilde|`.
    pub spectral_radius: f64,
    /// `D^{-1/2} J D^{-1/2}` scaling was applied.
    pub normalized: bool,
    pub iterations_used: usize,
    pub converged: bool,
}

impl WalkSummabilityReport {
    pub fn is_walk_summable(&self) -> bool {
        self.spectral_radius < 1.0
    }
}

/// Power iteration for the spectral radius of `R = |I - Jtilde|` with
/// `Jtilde = D^{-1/2} J D^{-1/2}`. `R` has zero diagonal and entries
/// `|J_ij| / sqrt(J_ii J_jj)`; it is entrywise nonnegative, so the dominant
/// eigenvalue is real and power iteration applies.
pub fn spectral_radius_abs_residual(
    j: &SparseSymmetricMatrix,
    tol: f64,
    max_iter: usize,
) -> Result<WalkSummabilityReport> {
    for (i, &d) in j.diagonal.iter().enumerate() {
        if d <= 0.0 || !d.is_finite() {
            return Err(TanError::Domain(format!(
                "J[{i},{i}] = {d}: diagonal must be strictly positive"
            )));
        }
    }
    let n = j.node_count();
    let edges = j.topology.edges();
    // |Jtilde| off-diagonals, reused every iteration.
    let r: Vec<f64> = edges
        .iter()
        .zip(&j.off_diagonal)
        .map(|(&(a, b), &v)| v.abs() / (j.diagonal[a] * j.diagonal[b]).sqrt())
        .collect();

    // Power iteration runs on R + I. R's spectrum can be symmetric (any
    // bipartite support graph has eigenvalues in +/- pairs), which makes
    // plain iteration stall on a mixture of the two extremes; the shift
    // makes 1 + rho the unique dominant eigenvalue by Perron-Frobenius.
    let mut v = vec![1.0 / (n as f64).sqrt(); n];
    let mut w = vec![0.0; n];
    let mut lambda = 0.0_f64;
    for iter in 1..=max_iter {
        w.copy_from_slice(&v);
        for (e, &(a, b)) in edges.iter().enumerate() {
            w[a] += r[e] * v[b];
            w[b] += r[e] * v[a];
        }
        let norm = w.iter().map(|x| x * x).sum::<f64>().sqrt();
        let rayleigh: f64 = v.iter().zip(&w).map(|(a, b)| a * b).sum();
        for (vi, wi) in v.iter_mut().zip(&w) {
            *vi = wi / norm;
        }
        let change = (rayleigh - lambda).abs();
        lambda = rayleigh;
        if change <= tol {
            return Ok(WalkSummabilityReport {
                spectral_radius: (lambda - 1.0).max(0.0),
                normalized: true,
                iterations_used: iter,
                converged: true,
            });
        }
    }
    Ok(WalkSummabilityReport {
        spectral_radius: (lambda - 1.0).max(0.0),
        normalized: true,
        iterations_used: max_iter,
        converged: false,
    })
}

/// Node permutation sorting by the eigenvector of the second-smallest
/// eigenvalue of the normalized Laplacian of `|J|`'s off-diagonal support.
/// Ties break by node id. Degenerate inputs (fewer than 2 nodes, no edges)
/// fall back to the identity permutation with a warning.
pub fn fiedler_order(j: &SparseSymmetricMatrix) -> (Vec<usize>, Option<String>) {
    let n = j.node_count();
    if n < 2 {
        return (
            (0..n).collect(),
            Some("fewer than 2 nodes; identity ordering".into()),
        );
    }
    let support: Vec<(usize, usize)> = j
        .topology
        .edges()
        .iter()
        .zip(&j.off_diagonal)
        .filter(|(_, &v)| v != 0.0)
        .map(|(&e, _)| e)
        .collect();
    if support.is_empty() {
        return (
            (0..n).collect(),
            Some("no off-diagonal support; identity ordering".into()),
        );
    }
    let mut degree = vec![0.0_f64; n];
    for &(a, b) in &support {
        degree[a] += 1.0;
        degree[b] += 1.0;
    }
    let inv_sqrt_deg: Vec<f64> = degree
        .iter()
        .map(|&d| if d > 0.0 { 1.0 / d.sqrt() } else { 0.0 })
        .collect();

    // M = 2I - L_norm; smallest eigenpairs of L become dominant ones of M.
    // Isolated nodes get an identity Laplacian row (M entry 1).
    let apply_m = |x: &[f64], y: &mut [f64]| {
        for i in 0..n {
            y[i] = if degree[i] > 0.0 { x[i] } else { x[i] };
        }
        for &(a, b) in &support {
            let w = inv_sqrt_deg[a] * inv_sqrt_deg[b];
            y[a] += w * x[b];
            y[b] += w * x[a];
        }
    };

    // Known top eigenvector of M on the non-isolated part: D^{1/2} * 1.
    let mut v1: Vec<f64> = degree.iter().map(|&d| d.sqrt()).collect();
    normalize(&mut v1);

    let mut rng = ChaCha8Rng::seed_from_u64(0x5EED);
    let mut x: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
    orthogonalize(&mut x, &v1);
    normalize(&mut x);
    let mut y = vec![0.0; n];
    for _ in 0..10_000 {
        apply_m(&x, &mut y);
        orthogonalize(&mut y, &v1);
        let norm = y.iter().map(|v| v * v).sum::<f64>().sqrt();
        if norm == 0.0 {
            break;
        }
        let mut delta = 0.0_f64;
        for (xi, yi) in x.iter_mut().zip(&y) {
            let next = yi / norm;
            delta = delta.max((next - *xi).abs().min((next + *xi).abs()));
            *xi = next;
        }
        if delta <= 1e-10 {
            break;
        }
    }

    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        x[a].partial_cmp(&x[b])
            .unwrap_or(std::cmp::Ordering::Equal)
            .then(a.cmp(&b))
    });
    (order, None)
}

fn normalize(v: &mut [f64]) {
    let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if norm > 0.0 {
        v.iter_mut().for_each(|x| *x /= norm);
    }
}

fn orthogonalize(v: &mut [f64], against: &[f64]) {
    let dot: f64 = v.iter().zip(against).map(|(a, b)| a * b).sum();
    for (vi, ai) in v.iter_mut().zip(against) {
        *vi -= dot * ai;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::graph::build_topology;

    fn matrix(n: usize, edges: &[(usize, usize)], diag: &[f64], off: &[f64]) -> SparseSymmetricMatrix {
        let t = build_topology(n, edges).unwrap();
        SparseSymmetricMatrix::new(t, diag.to_vec(), off.to_vec()).unwrap()
    }

    #[test]
    fn identity_has_zero_radius() {
        let j = matrix(3, &[], &[1.0, 1.0, 1.0], &[]);
        let rep = spectral_radius_abs_residual(&j, 1e-9, 10_000).unwrap();
        assert!(rep.spectral_radius < 1e-12, "{}", rep.spectral_radius);
        assert!(rep.converged);
    }

    #[test]
    fn two_node_radius_is_half() {
        let j = matrix(2, &[(0, 1)], &[2.0, 2.0], &[1.0]);
        let rep = spectral_radius_abs_residual(&j, 1e-12, 10_000).unwrap();
        assert!((rep.spectral_radius - 0.5).abs() < 1e-9, "{}", rep.spectral_radius);
    }

    #[test]
    fn nonpositive_diagonal_rejected() {
        let j = matrix(2, &[(0, 1)], &[2.0, 0.0], &[1.0]);
        assert!(spectral_radius_abs_residual(&j, 1e-9, 100).is_err());
    }

    #[test]
    fn fiedler_path_puts_middle_node_between_ends() {
        let j = matrix(3, &[(0, 1), (1, 2)], &[2.0, 2.0, 2.0], &[-0.5, -0.5]);
        let (order, warn) = fiedler_order(&j);
        assert!(warn.is_none());
        assert!(order == vec![0, 1, 2] || order == vec![2, 1, 0], "{order:?}");
    }

    #[test]
    fn fiedler_edgeless_is_identity_with_warning() {
        let j = matrix(3, &[], &[1.0, 1.0, 1.0], &[]);
        let (order, warn) = fiedler_order(&j);
        assert_eq!(order, vec![0, 1, 2]);
        assert!(warn.is_some());
    }

    #[test]
    fn fiedler_groups_disjoint_triangles() {
        let edges = [(0, 1), (1, 2), (0, 2), (3, 4), (4, 5), (3, 5)];
        let j = matrix(6, &edges, &[2.0; 6], &[-0.3; 6]);
        let (order, _) = fiedler_order(&j);
        let pos: Vec<usize> = (0..6).map(|n| order.iter().position(|&x| x == n).unwrap()).collect();
        let first: Vec<usize> = pos[0..3].to_vec();
        let (lo, hi) = (*first.iter().min().unwrap(), *first.iter().max().unwrap());
        assert!(hi - lo == 2, "triangle 0-1-2 not contiguous: {order:?}");
    }
}
