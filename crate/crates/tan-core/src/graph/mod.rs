//! Fixed-topology sparse symmetric matrices and graph utilities.
//!
//! A [`GraphTopology`] is an immutable undirected edge set with adjacency
//! indices. [`SparseSymmetricMatrix`] stores one value per undirected edge
//! plus a diagonal, which is exactly the shape of a Gaussian graphical model
//! precision matrix on a fixed graph. Directed message arrays elsewhere in
//! the workspace index `2*edge_id` for the canonical `i -> j` direction
//! (`i < j`) and `2*edge_id + 1` for `j -> i`.

mod format;
mod spectral;

pub use format::{read_matrix, read_vectors, write_matrix, write_vectors};
pub use spectral::{fiedler_order, spectral_radius_abs_residual, WalkSummabilityReport};

use crate::error::{Result, TanError};

/// Undirected graph with canonicalized edges and per-node adjacency index.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GraphTopology {
    node_count: usize,
    /// Canonical edges `(i, j)` with `i < j`, sorted lexicographically.
    edges: Vec<(usize, usize)>,
    /// Per node: `(neighbor, edge_id)` sorted ascending by neighbor.
    adjacency: Vec<Vec<(usize, usize)>>,
}

impl GraphTopology {
    pub fn node_count(&self) -> usize {
        self.node_count
    }

    pub fn edge_count(&self) -> usize {
        self.edges.len()
    }

    pub fn edges(&self) -> &[(usize, usize)] {
        &self.edges
    }

    /// Sorted `(neighbor, edge_id)` pairs incident to `node`.
    pub fn neighbors(&self, node: usize) -> &[(usize, usize)] {
        &self.adjacency[node]
    }

    pub fn degree(&self, node: usize) -> usize {
        self.adjacency[node].len()
    }

    /// Directed message slot for the `from -> to` direction of edge `edge_id`.
    pub fn directed_id(&self, edge_id: usize, from: usize) -> usize {
        let (i, _) = self.edges[edge_id];
        if from == i {
            2 * edge_id
        } else {
            2 * edge_id + 1
        }
    }
}

/// Drops self loops, collapses duplicates, canonicalizes pairs to `i < j`
/// and builds the adjacency index.
pub fn build_topology(node_count: usize, edge_list: &[(usize, usize)]) -> Result<GraphTopology> {
    if node_count == 0 {
        return Err(TanError::InvalidInput("node_count must be positive".into()));
    }
    for &(i, j) in edge_list {
        if i >= node_count || j >= node_count {
            return Err(TanError::InvalidInput(format!(
                "edge ({i}, {j}) out of range for {node_count} nodes"
            )));
        }
    }
    let mut edges: Vec<(usize, usize)> = edge_list
        .iter()
        .filter(|&&(i, j)| i != j)
        .map(|&(i, j)| if i < j { (i, j) } else { (j, i) })
        .collect();
    edges.sort_unstable();
    edges.dedup();

    let mut adjacency = vec![Vec::new(); node_count];
    for (edge_id, &(i, j)) in edges.iter().enumerate() {
        adjacency[i].push((j, edge_id));
        adjacency[j].push((i, edge_id));
    }
    for list in &mut adjacency {
        list.sort_unstable();
    }
    Ok(GraphTopology {
        node_count,
        edges,
        adjacency,
    })
}

/// Symmetric sparse matrix on a fixed topology: one value per undirected
/// edge plus a diagonal. Symmetry is structural, not checked numerically.
#[derive(Debug, Clone, PartialEq)]
pub struct SparseSymmetricMatrix {
    pub topology: GraphTopology,
    /// `J_ii` per node.
    pub diagonal: Vec<f64>,
    /// `J_ij = J_ji` per undirected edge, indexed by edge id.
    pub off_diagonal: Vec<f64>,
}

impl SparseSymmetricMatrix {
    pub fn new(topology: GraphTopology, diagonal: Vec<f64>, off_diagonal: Vec<f64>) -> Result<Self> {
        if diagonal.len() != topology.node_count() {
            return Err(TanError::InvalidInput(format!(
                "diagonal length {} != node count {}",
                diagonal.len(),
                topology.node_count()
            )));
        }
        if off_diagonal.len() != topology.edge_count() {
            return Err(TanError::InvalidInput(format!(
                "off-diagonal length {} != edge count {}",
                off_diagonal.len(),
                topology.edge_count()
            )));
        }
        Ok(Self {
            topology,
            diagonal,
            off_diagonal,
        })
    }

    pub fn node_count(&self) -> usize {
        self.topology.node_count()
    }

    /// Checks every diagonal entry is strictly positive and everything finite.
    pub fn check_solver_ready(&self) -> Result<()> {
        for (i, &d) in self.diagonal.iter().enumerate() {
            if !d.is_finite() {
                return Err(TanError::InvalidInput(format!("J[{i},{i}] = {d} is not finite")));
            }
            if d <= 0.0 {
                return Err(TanError::Domain(format!("J[{i},{i}] = {d} must be positive")));
            }
        }
        for (e, &v) in self.off_diagonal.iter().enumerate() {
            if !v.is_finite() {
                let (i, j) = self.topology.edges()[e];
                return Err(TanError::InvalidInput(format!("J[{i},{j}] = {v} is not finite")));
            }
        }
        Ok(())
    }

    /// Dense `y = J x` for one column, used by residual checks.
    pub fn matvec(&self, x: &[f64], y: &mut [f64]) {
        for (i, yi) in y.iter_mut().enumerate() {
            *yi = self.diagonal[i] * x[i];
        }
        for (e, &(i, j)) in self.topology.edges().iter().enumerate() {
            let v = self.off_diagonal[e];
            y[i] += v * x[j];
            y[j] += v * x[i];
        }
    }

    /// Materializes the dense matrix (tests and small analyses only).
    pub fn to_dense(&self) -> Vec<Vec<f64>> {
        let n = self.node_count();
        let mut m = vec![vec![0.0; n]; n];
        for i in 0..n {
            m[i][i] = self.diagonal[i];
        }
        for (e, &(i, j)) in self.topology.edges().iter().enumerate() {
            m[i][j] = self.off_diagonal[e];
            m[j][i] = self.off_diagonal[e];
        }
        m
    }
}
