//! Acceptance suite. Each test prints one `criterion N: pass|FAIL|SKIP`
//! line. Benchmark-dataset criteria look for converted datasets under
//! `TAN_DATA_DIR` (default `<workspace>/data`); when the directory is
//! absent they run a synthetic desk-scale analogue where one exists and
//! skip the dataset-bound assertion loudly.

use std::path::PathBuf;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use tan_core::autodiff::Tape;
use tan_core::builders::{build_diag_dominant, Construction, DEFAULT_SLACK};
use tan_core::data::{edge_homophily, load_dataset, Dataset};
use tan_core::graph::{build_topology, GraphTopology};
use tan_core::solver::SolverConfig;
use tan_core::train::{iteration_trend, run_protocol, train_once, ExperimentConfig};
use tan_core::verify::{
    gradient_check_suite, solver_oracle_suite, walk_summability_suite, VerifySizes,
};

fn data_dir() -> Option<PathBuf> {
    let dir = std::env::var("TAN_DATA_DIR")
        .map(PathBuf::from)
        .unwrap_or_else(|_| {
            PathBuf::from(env!("CARGO_MANIFEST_DIR"))
                .join("../..")
                .join("data")
        });
    if dir.is_dir() {
        Some(dir)
    } else {
        None
    }
}

fn load_benchmark(name: &str) -> Option<Dataset> {
    let dir = data_dir()?.join(name);
    match load_dataset(&dir) {
        Ok(ds) => Some(ds),
        Err(e) => {
            eprintln!("  note: {name} present but failed to load: {e}");
            None
        }
    }
}

/// Two feature-separable clusters joined by a few bridges.
fn synthetic_clusters(nodes_per_cluster: usize, seed: u64) -> Dataset {
    let n = 2 * nodes_per_cluster;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut edges = Vec::new();
    for c in 0..2 {
        let base = c * nodes_per_cluster;
        for i in 0..nodes_per_cluster {
            edges.push((base + i, base + (i + 1) % nodes_per_cluster));
            if i % 3 == 0 {
                edges.push((base + i, base + (i + 2) % nodes_per_cluster));
            }
        }
    }
    edges.push((0, nodes_per_cluster));
    edges.push((nodes_per_cluster / 2, nodes_per_cluster + nodes_per_cluster / 2));
    let topology = build_topology(n, &edges).unwrap();
    let features = Array2::from_shape_fn((n, 4), |(i, c)| {
        let cluster = i / nodes_per_cluster;
        let signal = if c == cluster { 1.0 } else { 0.0 };
        signal + 0.15 * rng.gen_range(-1.0..1.0)
    });
    let labels: Vec<usize> = (0..n).map(|i| i / nodes_per_cluster).collect();
    Dataset {
        name: "synthetic".into(),
        topology,
        features,
        labels,
        num_classes: 2,
        split_ratios: [0.5, 0.25, 0.25],
    }
}

fn desk_config(construction: Construction, learned: bool, seeds: Vec<u64>) -> ExperimentConfig {
    ExperimentConfig {
        dataset_path: String::new(),
        construction,
        learned,
        seeds,
        learning_rate: 1e-2,
        weight_decay: 5e-4,
        dropout: 0.2,
        patience: Some(40),
        max_epochs: 40,
        solver: SolverConfig::default(),
        hidden: 8,
        heads: vec![2, 1],
    }
}

#[test]
fn criterion_1_solver_oracle_equivalence() {
    let start = Instant::now();
    let report = solver_oracle_suite(&VerifySizes::standard());
    let ok = report.passed() && start.elapsed().as_secs() <= 120;
    println!(
        "criterion 1: {} (solver vs dense oracle, {} cases, {:.1}s)",
        if ok { "pass" } else { "FAIL" },
        report.cases,
        report.elapsed_secs
    );
    assert!(report.passed(), "{:?}", report.failures);
    assert!(start.elapsed().as_secs() <= 120, "runtime budget exceeded");
}

#[test]
fn criterion_2_implicit_gradient_correctness() {
    let start = Instant::now();
    let report = gradient_check_suite(&VerifySizes::standard());
    let ok = report.passed() && start.elapsed().as_secs() <= 300;
    println!(
        "criterion 2: {} (implicit gradients vs finite differences, {} cases, {:.1}s)",
        if ok { "pass" } else { "FAIL" },
        report.cases,
        report.elapsed_secs
    );
    assert!(report.passed(), "{:?}", report.failures);
    assert!(start.elapsed().as_secs() <= 300, "runtime budget exceeded");
}

#[test]
fn criterion_3_walk_summability_by_construction() {
    let start = Instant::now();
    let report = walk_summability_suite(&VerifySizes::standard(), None);
    let ok = report.passed() && start.elapsed().as_secs() <= 120;
    println!(
        "criterion 3: {} (walk-summable builds, {} cases, {:.1}s)",
        if ok { "pass" } else { "FAIL" },
        report.cases,
        report.elapsed_secs
    );
    assert!(report.passed(), "{:?}", report.failures);
    assert!(start.elapsed().as_secs() <= 120, "runtime budget exceeded");
}

#[test]
fn criterion_4_benchmark_reproduction() {
    // (dataset, construction, learned, minimum mean test accuracy in %)
    let gates = [
        ("texas", Construction::DiagDominant, true, 75.0),
        ("wisconsin", Construction::Laplacian, false, 76.0),
        ("cornell", Construction::Laplacian, false, 74.0),
        ("cora", Construction::DiagDominant, false, 74.0),
    ];
    let mut all_pass = true;
    let mut ran_any = false;
    for (name, construction, learned, floor) in gates {
        let Some(dataset) = load_benchmark(name) else {
            println!("criterion 4: SKIP {name} (converted dataset not present)");
            continue;
        };
        ran_any = true;
        let mut cfg = ExperimentConfig {
            dataset_path: String::new(),
            construction,
            learned,
            seeds: (0..10).collect(),
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            dropout: 0.6,
            patience: None,
            max_epochs: 2000,
            solver: SolverConfig::default(),
            hidden: 64,
            heads: vec![8, 1],
        };
        cfg.patience = Some(cfg.effective_patience());
        let summary = run_protocol(&cfg, &dataset, None).expect("protocol runs");
        let mean_pct = summary.mean_test_acc * 100.0;
        let ok = mean_pct >= floor;
        all_pass &= ok;
        println!(
            "criterion 4: {} {name} mean {:.1}% (floor {floor}%, std {:.1})",
            if ok { "pass" } else { "FAIL" },
            mean_pct,
            summary.std_test_acc * 100.0
        );
    }
    // Desk-scale analogue always runs: the full pipeline must learn a
    // separable synthetic graph well above chance.
    let dataset = synthetic_clusters(12, 5);
    let cfg = desk_config(Construction::DiagDominant, true, (0..5).collect());
    let summary = run_protocol(&cfg, &dataset, None).expect("synthetic protocol runs");
    let ok = summary.mean_test_acc >= 0.9;
    println!(
        "criterion 4: {} synthetic analogue mean {:.2} (floor 0.90)",
        if ok { "pass" } else { "FAIL" },
        summary.mean_test_acc
    );
    assert!(ok, "synthetic mean {:.3}", summary.mean_test_acc);
    if ran_any {
        assert!(all_pass, "a benchmark gate failed");
    }
}

fn capped_forward_solves(record: &tan_core::train::RunRecord, cap: usize) -> usize {
    record
        .epochs
        .iter()
        .flat_map(|e| &e.solves)
        .filter(|s| !s.backward && !s.converged && s.iterations == cap)
        .count()
}

#[test]
fn criterion_5_convergence_iteration_envelope() {
    // Learned construction: at least 95% of forward solves converge within
    // 300 iterations at tol 1e-6.
    let dataset = synthetic_clusters(12, 7);
    let cfg = desk_config(Construction::DiagDominant, true, vec![0, 1]);
    let mut fwd_total = 0usize;
    let mut fwd_fast = 0usize;
    for &seed in &cfg.seeds {
        let record = train_once(&cfg, &dataset, seed).expect("learned run completes");
        for epoch in &record.epochs {
            for solve in epoch.solves.iter().filter(|s| !s.backward) {
                fwd_total += 1;
                if solve.converged && solve.iterations <= 300 {
                    fwd_fast += 1;
                }
            }
        }
    }
    let frac = fwd_fast as f64 / fwd_total as f64;
    let learned_ok = frac >= 0.95;
    println!(
        "criterion 5: {} learned solves within 300 iterations: {:.1}% of {}",
        if learned_ok { "pass" } else { "FAIL" },
        frac * 100.0,
        fwd_total
    );
    assert!(learned_ok, "{frac}");

    // Fixed Laplacian sits near the spectral boundary: training must
    // complete while forward solves hit the iteration cap unconverged.
    // The cap-1000 observation is a benchmark-scale effect, so the real
    // check runs only when a converted dataset is present.
    if let Some(dataset) = load_benchmark("wisconsin") {
        let mut cfg = desk_config(Construction::Laplacian, false, vec![0]);
        cfg.max_epochs = 10;
        cfg.patience = Some(10);
        cfg.hidden = 64;
        cfg.heads = vec![8, 1];
        let record = train_once(&cfg, &dataset, 0).expect("wisconsin fixed run completes");
        let unconverged = capped_forward_solves(&record, cfg.solver.max_iter);
        let ok = unconverged > 0;
        println!(
            "criterion 5: {} wisconsin fixed Laplacian hit the 1000-iteration cap unconverged in {unconverged} solves while training completed",
            if ok { "pass" } else { "FAIL" }
        );
        assert!(ok, "expected unconverged forward solves at the cap");
    } else {
        println!("criterion 5: SKIP wisconsin cap-1000 check (converted dataset not present); scaled analogue follows");
        // Desk-scale analogue: a complete bipartite graph pushes the fixed
        // Laplacian to its spectral ceiling (radius 2/2.02) and needs about
        // 650 iterations at tol 1e-6, so a proportionally reduced cap of 300
        // exercises the same partial-solution path during training.
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let (a, b) = (10usize, 10usize);
        let n = a + b;
        let mut edges = Vec::new();
        for i in 0..a {
            for j in 0..b {
                edges.push((i, a + j));
            }
        }
        let topology = build_topology(n, &edges).unwrap();
        let features = Array2::from_shape_fn((n, 4), |(i, c)| {
            let side = i / a;
            (if c == side { 1.0 } else { 0.0 }) + 0.1 * rng.gen_range(-1.0..1.0)
        });
        let bipartite = Dataset {
            name: "bipartite".into(),
            topology,
            features,
            labels: (0..n).map(|i| i / a).collect(),
            num_classes: 2,
            split_ratios: [0.5, 0.25, 0.25],
        };
        let mut cfg = desk_config(Construction::Laplacian, false, vec![0]);
        cfg.max_epochs = 3;
        cfg.patience = Some(3);
        cfg.solver.max_iter = 300;
        let record = train_once(&cfg, &bipartite, 0).expect("fixed Laplacian run completes");
        let unconverged = capped_forward_solves(&record, cfg.solver.max_iter);
        let ok = unconverged > 0;
        println!(
            "criterion 5: {} fixed Laplacian analogue hit the scaled cap unconverged in {unconverged} solves while training completed",
            if ok { "pass" } else { "FAIL" }
        );
        assert!(ok, "expected unconverged forward solves at the cap");
    }
}

#[test]
fn criterion_6_implicit_vs_unrolled_on_trees() {
    // On trees with full updates the solve is exact after diameter sweeps,
    // so a finite-difference derivative of the truncated iteration equals
    // the unrolled gradient; the implicit gradients must agree.
    let mut rng = ChaCha8Rng::seed_from_u64(0x7EE5);
    let mut worst: f64 = 0.0;
    for _ in 0..20 {
        let n = rng.gen_range(3..10);
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (rng.gen_range(0..i), i)).collect();
        let t = build_topology(n, &edges).unwrap();
        let couplings: Vec<f64> = (0..t.edge_count()).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let conf: Vec<f64> = (0..n).map(|_| rng.gen_range(0.0..1.0)).collect();
        let j = build_diag_dominant(&t, &couplings, &conf, DEFAULT_SLACK).unwrap();
        let h = Array2::from_shape_fn((n, 1), |_| rng.gen_range(-1.0..1.0));
        let cfg = SolverConfig {
            tol: 1e-14,
            max_iter: n + 2,
            damping: 0.0,
            ..SolverConfig::default()
        };
        let topo = Arc::new(t.clone());

        let run = |diag: &[f64], off: &[f64], hv: &Array2<f64>| -> (f64, Vec<f64>, Vec<f64>, Array2<f64>) {
            let mut tape = Tape::new();
            let d_id = tape
                .param(Array2::from_shape_fn((n, 1), |(i, _)| diag[i]))
                .unwrap();
            let o_id = tape
                .param(Array2::from_shape_fn((t.edge_count(), 1), |(e, _)| off[e]))
                .unwrap();
            let h_id = tape.param(hv.clone()).unwrap();
            let mu = tape.gabp_fixed_point(d_id, o_id, h_id, &topo, &cfg, "tree").unwrap();
            let loss = tape.sum(mu).unwrap();
            let value = tape.value(loss)[(0, 0)];
            tape.backward(loss).unwrap();
            (
                value,
                tape.grad(d_id).unwrap().iter().cloned().collect(),
                tape.grad(o_id).unwrap().iter().cloned().collect(),
                tape.grad(h_id).unwrap().clone(),
            )
        };
        let (_, g_diag, g_off, g_h) = run(&j.diagonal, &j.off_diagonal, &h);

        // Unrolled oracle: central finite differences over the truncated
        // iteration itself (same fixed iteration budget).
        let fd = |plus: f64, minus: f64| (plus - minus) / 2e-5;
        let value_of = |diag: &[f64], off: &[f64], hv: &Array2<f64>| -> f64 {
            let mut tape = Tape::new();
            let d_id = tape
                .constant(Array2::from_shape_fn((n, 1), |(i, _)| diag[i]))
                .unwrap();
            let o_id = tape
                .constant(Array2::from_shape_fn((t.edge_count(), 1), |(e, _)| off[e]))
                .unwrap();
            let h_id = tape.constant(hv.clone()).unwrap();
            let mu = tape.gabp_fixed_point(d_id, o_id, h_id, &topo, &cfg, "tree").unwrap();
            tape.value(mu).sum()
        };
        let mut check = |analytic: f64, fd_value: f64| {
            let rel = (analytic - fd_value).abs() / fd_value.abs().max(1.0);
            worst = worst.max(rel);
        };
        for i in 0..n {
            let mut d = j.diagonal.clone();
            d[i] += 1e-5;
            let plus = value_of(&d, &j.off_diagonal, &h);
            d[i] -= 2e-5;
            let minus = value_of(&d, &j.off_diagonal, &h);
            check(g_diag[i], fd(plus, minus));
        }
        for e in 0..t.edge_count() {
            let mut o = j.off_diagonal.clone();
            o[e] += 1e-5;
            let plus = value_of(&j.diagonal, &o, &h);
            o[e] -= 2e-5;
            let minus = value_of(&j.diagonal, &o, &h);
            check(g_off[e], fd(plus, minus));
        }
        for i in 0..n {
            let mut hp = h.clone();
            hp[(i, 0)] += 1e-5;
            let plus = value_of(&j.diagonal, &j.off_diagonal, &hp);
            hp[(i, 0)] -= 2e-5;
            let minus = value_of(&j.diagonal, &j.off_diagonal, &hp);
            check(g_h[(i, 0)], fd(plus, minus));
        }
    }
    let grads_ok = worst <= 1e-6;

    // Allocation contract: retained tape memory is independent of the
    // iteration budget.
    let t = build_topology(12, &(0..12).map(|i| (i, (i + 1) % 12)).collect::<Vec<_>>()).unwrap();
    let topo = Arc::new(t.clone());
    let couplings = vec![0.4; t.edge_count()];
    let conf = vec![0.5; 12];
    let j = build_diag_dominant(&t, &couplings, &conf, DEFAULT_SLACK).unwrap();
    let retained = |max_iter: usize| -> usize {
        let cfg = SolverConfig {
            tol: 1e-12,
            max_iter,
            ..SolverConfig::default()
        };
        let mut tape = Tape::new();
        let d = tape
            .param(Array2::from_shape_fn((12, 1), |(i, _)| j.diagonal[i]))
            .unwrap();
        let o = tape
            .param(Array2::from_shape_fn((t.edge_count(), 1), |(e, _)| j.off_diagonal[e]))
            .unwrap();
        let h = tape.param(Array2::from_elem((12, 2), 1.0)).unwrap();
        let mu = tape.gabp_fixed_point(d, o, h, &topo, &cfg, "mem").unwrap();
        let loss = tape.sum(mu).unwrap();
        tape.backward(loss).unwrap();
        tape.retained_floats()
    };
    let small = retained(10);
    let large = retained(10_000);
    let memory_ok = small == large;
    println!(
        "criterion 6: {} (worst gradient deviation {:.2e}; retained floats {} vs {} across iteration budgets)",
        if grads_ok && memory_ok { "pass" } else { "FAIL" },
        worst,
        small,
        large
    );
    assert!(grads_ok, "worst relative deviation {worst}");
    assert!(memory_ok, "retained memory grew with max_iter: {small} vs {large}");
}

#[test]
fn criterion_7_iteration_trend_report() {
    if let Some(dataset) = load_benchmark("wisconsin") {
        let mut cfg = ExperimentConfig {
            dataset_path: String::new(),
            construction: Construction::DiagDominant,
            learned: true,
            seeds: vec![0],
            learning_rate: 1e-3,
            weight_decay: 5e-4,
            dropout: 0.6,
            patience: Some(100),
            max_epochs: 2000,
            solver: SolverConfig::default(),
            hidden: 64,
            heads: vec![8, 1],
        };
        cfg.patience = Some(cfg.effective_patience());
        let record = train_once(&cfg, &dataset, 0).expect("wisconsin run");
        match iteration_trend(&record) {
            Some(trend) => println!(
                "criterion 7: pass wisconsin first-decile median {:.1}, last-decile median {:.1}, ratio {:.2} (report only)",
                trend.first_decile_median, trend.last_decile_median, trend.ratio
            ),
            None => println!("criterion 7: pass wisconsin run too short for a trend (reported)"),
        }
        return;
    }
    println!("criterion 7: SKIP wisconsin (converted dataset not present); synthetic trend follows");
    let dataset = synthetic_clusters(12, 9);
    let mut cfg = desk_config(Construction::DiagDominant, true, vec![0]);
    cfg.max_epochs = 30;
    cfg.patience = Some(30);
    let record = train_once(&cfg, &dataset, 0).expect("synthetic run");
    let trend = iteration_trend(&record).expect("30 epochs give a trend");
    println!(
        "criterion 7: pass synthetic first-decile median {:.1}, last-decile median {:.1}, ratio {:.2} (report only)",
        trend.first_decile_median, trend.last_decile_median, trend.ratio
    );
}

#[test]
fn criterion_8_homophily_matches_published_row() {
    let expected = [
        ("texas", 0.11),
        ("wisconsin", 0.21),
        ("cornell", 0.30),
        ("cora", 0.81),
        ("citeseer", 0.74),
        ("pubmed", 0.80),
    ];
    let mut checked = 0;
    let mut failures = Vec::new();
    for (name, value) in expected {
        let Some(dataset) = load_benchmark(name) else {
            println!("criterion 8: SKIP {name} (converted dataset not present)");
            continue;
        };
        checked += 1;
        let h = edge_homophily(&dataset).expect("benchmark has edges");
        if (h - value).abs() > 0.01 {
            failures.push(format!("{name}: homophily {h:.3}, expected {value:.2} +- 0.01"));
        } else {
            println!("criterion 8: pass {name} homophily {h:.3} (expected {value:.2})");
        }
    }
    if checked > 0 {
        assert!(failures.is_empty(), "{failures:?}");
    } else {
        // The measurement itself still has to work; a fully homophilous
        // synthetic graph pins the trivial end of the scale.
        let mut ds = synthetic_clusters(6, 3);
        ds.labels = vec![0; ds.topology.node_count()];
        let h = edge_homophily(&ds).unwrap();
        assert_eq!(h, 1.0);
        println!("criterion 8: pass synthetic single-label homophily 1.0 (benchmarks skipped)");
    }
}

/// Sanity check on the graph type used by the synthetic fixtures.
#[allow(dead_code)]
fn assert_connected(t: &GraphTopology) {
    let n = t.node_count();
    let mut seen = vec![false; n];
    let mut stack = vec![0usize];
    while let Some(i) = stack.pop() {
        if std::mem::replace(&mut seen[i], true) {
            continue;
        }
        for &(j, _) in t.neighbors(i) {
            if !seen[j] {
                stack.push(j);
            }
        }
    }
    assert!(seen.iter().all(|&s| s));
}
