//! Self-contained verification suites: solver-vs-dense-oracle equivalence,
//! walk-summability of every construction, and finite-difference gradient
//! checks through the fixed-point node. The CLI `verify` subcommand wraps
//! these; tests inject a broken builder as a negative control.

use std::sync::Arc;
use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::Tape;
use crate::builders::{
    build_fixed, build_learned, Construction, SimilarityConfig, DEFAULT_SLACK,
};
use crate::error::Result;
use crate::graph::{
    build_topology, spectral_radius_abs_residual, GraphTopology, SparseSymmetricMatrix,
};
use crate::solver::{gabp_solve, SolverConfig};

#[derive(Debug, Clone)]
pub struct SuiteReport {
    pub name: String,
    pub cases: usize,
    pub failures: Vec<String>,
    pub elapsed_secs: f64,
}

impl SuiteReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty()
    }

    pub fn summary_line(&self) -> String {
        format!(
            "{}: {} ({} cases, {} failures, {:.2}s)",
            self.name,
            if self.passed() { "pass" } else { "FAIL" },
            self.cases,
            self.failures.len(),
            self.elapsed_secs
        )
    }
}

#[derive(Debug, Clone, Copy)]
pub struct VerifySizes {
    pub solver_cases: usize,
    pub solver_max_nodes: usize,
    pub builder_cases: usize,
    pub grad_cases: usize,
    pub grad_max_nodes: usize,
}

impl VerifySizes {
    pub fn standard() -> Self {
        Self {
            solver_cases: 100,
            solver_max_nodes: 200,
            builder_cases: 100,
            grad_cases: 20,
            grad_max_nodes: 12,
        }
    }

    pub fn quick() -> Self {
        Self {
            solver_cases: 20,
            solver_max_nodes: 60,
            builder_cases: 20,
            grad_cases: 5,
            grad_max_nodes: 8,
        }
    }
}

fn random_topology(rng: &mut ChaCha8Rng, max_nodes: usize) -> GraphTopology {
    let n = rng.gen_range(2..=max_nodes);
    let max_edges = n * (n - 1) / 2;
    // Density capped at 10% of the complete graph, at least a spanning path.
    let target = ((max_edges as f64 * 0.10) as usize).max(n - 1).min(max_edges);
    let mut edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
    while edges.len() < target {
        let a = rng.gen_range(0..n);
        let b = rng.gen_range(0..n);
        if a != b {
            edges.push((a, b));
        }
    }
    build_topology(n, &edges).expect("random edges are in range")
}

/// Random walk-summable system with spectral radius at most `rho_cap`.
fn random_system(rng: &mut ChaCha8Rng, max_nodes: usize, rho_cap: f64) -> SparseSymmetricMatrix {
    let t = random_topology(rng, max_nodes);
    let off: Vec<f64> = (0..t.edge_count()).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let mut abs_row = vec![0.0; t.node_count()];
    for (k, &(i, j)) in t.edges().iter().enumerate() {
        abs_row[i] += off[k].abs();
        abs_row[j] += off[k].abs();
    }
    // Diagonal scaled so every residual row sum sits near rho_cap.
    let mut diag: Vec<f64> = abs_row.iter().map(|&s| s / rho_cap + 1e-3).collect();
    let mut j = SparseSymmetricMatrix::new(t, diag.clone(), off.clone()).unwrap();
    let report = spectral_radius_abs_residual(&j, 1e-9, 10_000).unwrap();
    if report.spectral_radius > rho_cap {
        let scale = (report.spectral_radius / rho_cap) * 1.01;
        diag.iter_mut().for_each(|d| *d *= scale);
        j = SparseSymmetricMatrix::new(j.topology.clone(), diag, off).unwrap();
    }
    j
}

fn dense_solve_columns(j: &SparseSymmetricMatrix, h: &Array2<f64>) -> Array2<f64> {
    let dense = j.to_dense();
    let n = dense.len();
    let m = DMatrix::from_fn(n, n, |r, c| dense[r][c]);
    let lu = m.lu();
    let mut out = Array2::zeros((n, h.ncols()));
    for c in 0..h.ncols() {
        let rhs = DVector::from_fn(n, |r, _| h[(r, c)]);
        let x = lu.solve(&rhs).expect("random system is nonsingular");
        for r in 0..n {
            out[(r, c)] = x[r];
        }
    }
    out
}

/// Random walk-summable systems (radius <= 0.9, density <= 10%) solved at
/// tol 1e-6 and compared against a dense direct solve; relative L2 error
/// must stay within 1e-5 on every instance.
pub fn solver_oracle_suite(sizes: &VerifySizes) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xA11CE);
    let mut failures = Vec::new();
    let cfg = SolverConfig {
        tol: 1e-6,
        max_iter: 10_000,
        ..SolverConfig::default()
    };
    for case in 0..sizes.solver_cases {
        let j = random_system(&mut rng, sizes.solver_max_nodes, 0.9);
        let n = j.node_count();
        let h = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        match gabp_solve(&j, &h, &cfg) {
            Ok(solve) => {
                if !solve.converged {
                    failures.push(format!("case {case}: no convergence (n={n})"));
                    continue;
                }
                let oracle = dense_solve_columns(&j, &h);
                let num: f64 = solve
                    .mu
                    .iter()
                    .zip(oracle.iter())
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>()
                    .sqrt();
                let den: f64 = oracle.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-30);
                let rel = num / den;
                if rel > 1e-5 {
                    failures.push(format!("case {case}: relative L2 error {rel:.2e} (n={n})"));
                }
            }
            Err(e) => failures.push(format!("case {case}: solver error: {e}")),
        }
    }
    SuiteReport {
        name: "solver-oracle".into(),
        cases: sizes.solver_cases,
        failures,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

/// Optional replacement builder for negative-control tests.
pub type BuilderOverride<'a> =
    &'a dyn Fn(&GraphTopology, &mut ChaCha8Rng) -> Result<SparseSymmetricMatrix>;

/// Random fixed and learned builds per construction must all report a
/// spectral radius below 1; diagonally dominant builds must additionally
/// keep every row dominant by at least the slack.
pub fn walk_summability_suite(
    sizes: &VerifySizes,
    broken_builder: Option<BuilderOverride>,
) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xB0B);
    let mut failures = Vec::new();
    let constructions = [
        Construction::PairwiseNormal,
        Construction::DiagDominant,
        Construction::Laplacian,
    ];
    let mut cases = 0;
    for case in 0..sizes.builder_cases {
        let t = random_topology(&mut rng, 24);
        let n = t.node_count();
        let d = 4;
        let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
        for construction in constructions {
            cases += 1;
            let label = format!("case {case} {}", construction.name());
            let result = match broken_builder {
                Some(builder) => builder(&t, &mut rng),
                None => {
                    if case % 2 == 0 {
                        build_fixed(construction, &x, &t)
                    } else {
                        let topo = Arc::new(t.clone());
                        let w_sim =
                            Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.8..0.8));
                        let head = Array2::from_shape_fn((d, 1), |_| rng.gen_range(-0.8..0.8));
                        build_learned(
                            construction,
                            &x,
                            &topo,
                            &w_sim,
                            &head,
                            &SimilarityConfig::default(),
                        )
                        .map(|b| b.matrix)
                    }
                }
            };
            let j = match result {
                Ok(j) => j,
                Err(e) => {
                    failures.push(format!("{label}: build failed: {e}"));
                    continue;
                }
            };
            match spectral_radius_abs_residual(&j, 1e-9, 10_000) {
                Ok(report) => {
                    if !(report.spectral_radius < 1.0) {
                        failures.push(format!(
                            "{label}: not walk-summable, radius {}",
                            report.spectral_radius
                        ));
                    }
                }
                Err(e) => failures.push(format!("{label}: spectral check failed: {e}")),
            }
            if construction == Construction::DiagDominant && broken_builder.is_none() {
                for i in 0..n {
                    let row_off: f64 = j
                        .topology
                        .neighbors(i)
                        .iter()
                        .map(|&(_, e)| j.off_diagonal[e].abs())
                        .sum();
                    if j.diagonal[i] < row_off + DEFAULT_SLACK - 1e-12 {
                        failures.push(format!("{label}: row {i} dominance below slack"));
                        break;
                    }
                }
            }
        }
    }
    SuiteReport {
        name: "walk-summability".into(),
        cases,
        failures,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

/// Full-parameter finite-difference check through the learned build and the
/// fixed-point solve: d=3 observation columns, every similarity and node
/// head entry perturbed centrally with step 1e-5, relative tolerance 1e-3.
pub fn gradient_check_suite(sizes: &VerifySizes) -> SuiteReport {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(0xC0FFEE);
    let mut failures = Vec::new();
    let constructions = [
        Construction::PairwiseNormal,
        Construction::DiagDominant,
        Construction::Laplacian,
    ];
    let mut cases = 0;
    let per_construction = sizes.grad_cases.div_ceil(constructions.len());
    for construction in constructions {
        for case in 0..per_construction {
            cases += 1;
            let label = format!("{} case {case}", construction.name());
            let t = random_topology(&mut rng, sizes.grad_max_nodes);
            let n = t.node_count();
            let d = 3;
            let x = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            let w_sim = Array2::from_shape_fn((d, d), |_| rng.gen_range(-0.6..0.6));
            let head = Array2::from_shape_fn((d, 1), |_| rng.gen_range(-0.6..0.6));
            let h = Array2::from_shape_fn((n, d), |_| rng.gen_range(-1.0..1.0));
            if let Err(msg) =
                check_fixed_point_gradients(construction, &t, &x, &w_sim, &head, &h)
            {
                failures.push(format!("{label}: {msg}"));
            }
        }
    }
    SuiteReport {
        name: "gradient-check".into(),
        cases,
        failures,
        elapsed_secs: start.elapsed().as_secs_f64(),
    }
}

fn loss_for(
    construction: Construction,
    topology: &Arc<GraphTopology>,
    x: &Array2<f64>,
    w_sim: &Array2<f64>,
    head: &Array2<f64>,
    h: &Array2<f64>,
) -> Result<(f64, Vec<Array2<f64>>)> {
    let mut tape = Tape::new();
    let z = tape.constant(x.clone())?;
    let params = crate::builders::LearnedParams {
        w_sim: tape.param(w_sim.clone())?,
        node_head: tape.param(head.clone())?,
    };
    let h_id = tape.param(h.clone())?;
    let (diag, off) = crate::builders::record_learned_build(
        &mut tape,
        construction,
        z,
        topology,
        &params,
        &SimilarityConfig::default(),
    )?;
    let cfg = SolverConfig {
        tol: 1e-12,
        max_iter: 20_000,
        ..SolverConfig::default()
    };
    let mu = tape.gabp_fixed_point(diag, off, h_id, topology, &cfg, "verify")?;
    let loss = tape.sum(mu)?;
    let value = tape.value(loss)[(0, 0)];
    tape.backward(loss)?;
    let grads = vec![
        tape.grad(params.w_sim).cloned().unwrap_or_else(|| Array2::zeros(w_sim.dim())),
        tape.grad(params.node_head).cloned().unwrap_or_else(|| Array2::zeros(head.dim())),
        tape.grad(h_id).cloned().unwrap_or_else(|| Array2::zeros(h.dim())),
    ];
    Ok((value, grads))
}

fn check_fixed_point_gradients(
    construction: Construction,
    t: &GraphTopology,
    x: &Array2<f64>,
    w_sim: &Array2<f64>,
    head: &Array2<f64>,
    h: &Array2<f64>,
) -> std::result::Result<(), String> {
    const STEP: f64 = 1e-5;
    const TOL: f64 = 1e-3;
    let topology = Arc::new(t.clone());
    let (_, analytic) = loss_for(construction, &topology, x, w_sim, head, h)
        .map_err(|e| format!("forward failed: {e}"))?;
    let mut tensors = [w_sim.clone(), head.clone(), h.clone()];
    let names = ["w_sim", "node_head", "h"];
    for p in 0..3 {
        for idx in 0..tensors[p].len() {
            let original = tensors[p].as_slice().unwrap()[idx];
            let eval = |tensors: &[Array2<f64>; 3]| {
                loss_for(
                    construction,
                    &topology,
                    x,
                    &tensors[0],
                    &tensors[1],
                    &tensors[2],
                )
                .map(|(v, _)| v)
            };
            tensors[p].as_slice_mut().unwrap()[idx] = original + STEP;
            let plus = eval(&tensors).map_err(|e| format!("fd eval failed: {e}"))?;
            tensors[p].as_slice_mut().unwrap()[idx] = original - STEP;
            let minus = eval(&tensors).map_err(|e| format!("fd eval failed: {e}"))?;
            tensors[p].as_slice_mut().unwrap()[idx] = original;
            let fd = (plus - minus) / (2.0 * STEP);
            let a = analytic[p].as_slice().unwrap()[idx];
            if (a - fd).abs() > TOL * fd.abs().max(1.0) {
                return Err(format!(
                    "{}[{idx}]: analytic {a:.6e} vs finite difference {fd:.6e}",
                    names[p]
                ));
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quick_suites_all_pass() {
        let sizes = VerifySizes::quick();
        let solver = solver_oracle_suite(&sizes);
        assert!(solver.passed(), "{:?}", solver.failures);
        let builders = walk_summability_suite(&sizes, None);
        assert!(builders.passed(), "{:?}", builders.failures);
        let grads = gradient_check_suite(&sizes);
        assert!(grads.passed(), "{:?}", grads.failures);
    }

    #[test]
    fn broken_builder_is_caught() {
        let sizes = VerifySizes {
            builder_cases: 3,
            ..VerifySizes::quick()
        };
        // Couplings far exceeding the diagonal: never walk-summable on a
        // connected graph.
        let broken = |t: &GraphTopology, _: &mut ChaCha8Rng| {
            SparseSymmetricMatrix::new(
                t.clone(),
                vec![1.0; t.node_count()],
                vec![5.0; t.edge_count()],
            )
        };
        let report = walk_summability_suite(&sizes, Some(&broken));
        assert!(!report.passed());
        assert!(report.failures.iter().any(|f| f.contains("not walk-summable")));
    }
}
