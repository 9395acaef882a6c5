//! Command-line entry point: equilibrium solves on files, verification
//! suites, training runs, multi-seed sweeps, correlation analysis, and
//! dataset directory checks.
//!
//! Exit codes: 0 success, 1 invariant failure, 2 input error,
//! 3 non-convergence. `TAN_THREADS` caps worker parallelism.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};
use ndarray::Array2;

use tan_core::autodiff::{load_checkpoint, save_checkpoint, Tape};
use tan_core::builders::Construction;
use tan_core::data::{edge_homophily, load_dataset};
use tan_core::graph::{fiedler_order, read_matrix, read_vectors, write_vectors};
use tan_core::model::{forward_network, init_params, BoundParams, Mode};
use tan_core::solver::{gabp_solve, residual, SolverConfig};
use tan_core::train::{iteration_trend, run_protocol, train_once, ExperimentConfig};
use tan_core::verify::{
    gradient_check_suite, solver_oracle_suite, walk_summability_suite, VerifySizes,
};
use tan_core::TanError;

const EXIT_INVARIANT: u8 = 1;
const EXIT_INPUT: u8 = 2;
const EXIT_NO_CONVERGENCE: u8 = 3;

#[derive(Parser)]
#[command(name = "tan", version, about = "Sparse equilibrium attention toolkit")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args, Clone)]
struct SolverFlags {
    /// Message-change convergence tolerance.
    #[arg(long)]
    tol: Option<f64>,
    /// Iteration cap per solve.
    #[arg(long)]
    max_iter: Option<usize>,
    /// Weight kept on the old message in [0, 1).
    #[arg(long)]
    damping: Option<f64>,
}

impl SolverFlags {
    fn apply(&self, mut cfg: SolverConfig) -> SolverConfig {
        if let Some(tol) = self.tol {
            cfg.tol = tol;
        }
        if let Some(max_iter) = self.max_iter {
            cfg.max_iter = max_iter;
        }
        if let Some(damping) = self.damping {
            cfg.damping = damping;
        }
        cfg
    }
}

#[derive(Subcommand)]
enum Command {
    /// Solve J mu = h from matrix and observation files.
    Solve {
        /// Matrix file: `n m`, then m `i j value` lines, then n `i value` lines.
        matrix: PathBuf,
        /// Observation file: n whitespace-separated rows.
        observations: PathBuf,
        /// Output path for the solution rows.
        #[arg(long, default_value = "solution.txt")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Run the oracle-equivalence, walk-summability and gradient suites.
    Verify {
        /// Reduced sizes for a fast pass.
        #[arg(long)]
        quick: bool,
        /// Optional CSV report path.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Train one seed from an experiment config.
    Train {
        #[arg(long)]
        config: PathBuf,
        #[arg(long)]
        out: Option<PathBuf>,
        /// Seed override; defaults to the first seed in the config.
        #[arg(long)]
        seed: Option<u64>,
        /// Construction override: pairwise_normal, diag_dominant, laplacian.
        #[arg(long)]
        construction: Option<String>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Full multi-seed protocol with summary and per-epoch CSVs.
    Sweep {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, default_value = "sweep_out")]
        out: PathBuf,
        #[arg(long)]
        construction: Option<String>,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Export a head's correlation matrix and adjacency, spectrally ordered.
    Analyze {
        #[arg(long)]
        config: PathBuf,
        /// Checkpoint from `train`; absent means freshly initialized weights.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        layer: usize,
        #[arg(long, default_value_t = 0)]
        head: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "analysis_out")]
        out: PathBuf,
        #[command(flatten)]
        solver: SolverFlags,
    },
    /// Validate a converted dataset directory and print its statistics.
    ConvertCheck {
        dataset: PathBuf,
    },
}

fn main() -> ExitCode {
    if let Ok(threads) = std::env::var("TAN_THREADS") {
        match threads.parse::<usize>() {
            Ok(n) if n > 0 => {
                let _ = rayon::ThreadPoolBuilder::new().num_threads(n).build_global();
            }
            _ => {
                eprintln!("error: TAN_THREADS must be a positive integer, got `{threads}`");
                return ExitCode::from(EXIT_INPUT);
            }
        }
    }
    let cli = Cli::parse();
    let code = match cli.command {
        Command::Solve {
            matrix,
            observations,
            out,
            solver,
        } => cmd_solve(&matrix, &observations, &out, &solver),
        Command::Verify { quick, report } => cmd_verify(quick, report.as_deref()),
        Command::Train {
            config,
            out,
            seed,
            construction,
            solver,
        } => cmd_train(&config, out.as_deref(), seed, construction.as_deref(), &solver),
        Command::Sweep {
            config,
            out,
            construction,
            solver,
        } => cmd_sweep(&config, &out, construction.as_deref(), &solver),
        Command::Analyze {
            config,
            checkpoint,
            layer,
            head,
            seed,
            out,
            solver,
        } => cmd_analyze(&config, checkpoint.as_deref(), layer, head, seed, &out, &solver),
        Command::ConvertCheck { dataset } => cmd_convert_check(&dataset),
    };
    match code {
        Ok(code) => ExitCode::from(code),
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(classify(&e))
        }
    }
}

fn classify(e: &TanError) -> u8 {
    match e {
        TanError::Parse { .. }
        | TanError::InvalidInput(_)
        | TanError::Config(_)
        | TanError::Io(_)
        | TanError::Json(_) => EXIT_INPUT,
        _ => EXIT_INVARIANT,
    }
}

fn echo_config(path: &Path, value: &impl serde::Serialize) -> tan_core::Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    std::fs::write(path, serde_json::to_string_pretty(value)?)?;
    Ok(())
}

fn cmd_solve(
    matrix: &Path,
    observations: &Path,
    out: &Path,
    flags: &SolverFlags,
) -> tan_core::Result<u8> {
    let j = read_matrix(matrix)?;
    let rows = read_vectors(observations)?;
    let n = j.node_count();
    if rows.len() != n {
        return Err(TanError::InvalidInput(format!(
            "observations have {} rows for {n} nodes",
            rows.len()
        )));
    }
    let d = rows.first().map(|r| r.len()).unwrap_or(0);
    let h = Array2::from_shape_fn((n, d), |(r, c)| rows[r][c]);
    let cfg = flags.apply(SolverConfig::default());
    cfg.validate()?;
    let solve = gabp_solve(&j, &h, &cfg)?;
    let res = residual(&j, &solve.mu, &h)?;
    let mu_rows: Vec<Vec<f64>> = (0..n).map(|r| solve.mu.row(r).to_vec()).collect();
    write_vectors(out, &mu_rows)?;
    echo_config(&out.with_extension("config.json"), &cfg)?;
    println!(
        "{{\"iterations\": {}, \"converged\": {}, \"final_delta\": {:e}, \"residual\": {:e}}}",
        solve.iterations, solve.converged, solve.final_delta, res
    );
    Ok(if solve.converged { 0 } else { EXIT_NO_CONVERGENCE })
}

fn cmd_verify(quick: bool, report: Option<&Path>) -> tan_core::Result<u8> {
    let sizes = if quick {
        VerifySizes::quick()
    } else {
        VerifySizes::standard()
    };
    let reports = [
        solver_oracle_suite(&sizes),
        walk_summability_suite(&sizes, None),
        gradient_check_suite(&sizes),
    ];
    let mut csv = String::from("suite,cases,failures,elapsed_secs,status\n");
    let mut failed = false;
    for suite in &reports {
        println!("{}", suite.summary_line());
        for failure in &suite.failures {
            println!("  {failure}");
        }
        csv.push_str(&format!(
            "{},{},{},{:.3},{}\n",
            suite.name,
            suite.cases,
            suite.failures.len(),
            suite.elapsed_secs,
            if suite.passed() { "pass" } else { "fail" }
        ));
        failed |= !suite.passed();
    }
    if let Some(path) = report {
        std::fs::write(path, csv)?;
    }
    Ok(if failed { EXIT_INVARIANT } else { 0 })
}

fn load_config(
    path: &Path,
    construction: Option<&str>,
    flags: &SolverFlags,
) -> tan_core::Result<ExperimentConfig> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| TanError::InvalidInput(format!("{}: {e}", path.display())))?;
    let mut cfg: ExperimentConfig = serde_json::from_str(&text)?;
    if let Some(name) = construction {
        cfg.construction = Construction::parse(name)?;
    }
    cfg.solver = flags.apply(cfg.solver);
    cfg.validate()?;
    Ok(cfg)
}

fn cmd_train(
    config: &Path,
    out: Option<&Path>,
    seed: Option<u64>,
    construction: Option<&str>,
    flags: &SolverFlags,
) -> tan_core::Result<u8> {
    let cfg = load_config(config, construction, flags)?;
    let dataset = load_dataset(Path::new(&cfg.dataset_path))?;
    let seed = seed.unwrap_or(cfg.seeds[0]);
    let record = train_once(&cfg, &dataset, seed)?;
    println!(
        "seed {seed}: test accuracy {:.4}, best epoch {}, {} epochs, {:.1}s",
        record.test_acc, record.best_epoch, record.epochs_run, record.wall_time_secs
    );
    if let Some(trend) = iteration_trend(&record) {
        println!(
            "iteration trend: first-decile median {:.1}, last-decile median {:.1}, ratio {:.2}",
            trend.first_decile_median, trend.last_decile_median, trend.ratio
        );
    }
    if let Some(dir) = out {
        std::fs::create_dir_all(dir)?;
        save_checkpoint(&dir.join(format!("model_{seed}.ckpt")), &record.best_params)?;
        echo_config(&dir.join("resolved_config.json"), &cfg.resolved())?;
        std::fs::write(
            dir.join(format!("run_{seed}.json")),
            serde_json::to_string_pretty(&record)?,
        )?;
    }
    Ok(0)
}

fn cmd_sweep(
    config: &Path,
    out: &Path,
    construction: Option<&str>,
    flags: &SolverFlags,
) -> tan_core::Result<u8> {
    let cfg = load_config(config, construction, flags)?;
    let dataset = load_dataset(Path::new(&cfg.dataset_path))?;
    let summary = run_protocol(&cfg, &dataset, Some(out))?;
    println!(
        "{} seeds: mean test accuracy {:.4} +- {:.4} ({} failures)",
        cfg.seeds.len(),
        summary.mean_test_acc,
        summary.std_test_acc,
        summary.failures
    );
    Ok(0)
}

fn cmd_analyze(
    config: &Path,
    checkpoint: Option<&Path>,
    layer: usize,
    head: usize,
    seed: u64,
    out: &Path,
    flags: &SolverFlags,
) -> tan_core::Result<u8> {
    const MAX_ANALYZE_NODES: usize = 2000;
    let cfg = load_config(config, None, flags)?;
    let dataset = load_dataset(Path::new(&cfg.dataset_path))?;
    let n = dataset.topology.node_count();
    if n > MAX_ANALYZE_NODES {
        return Err(TanError::InvalidInput(format!(
            "{n} nodes exceed the analysis limit of {MAX_ANALYZE_NODES} (quadratic output)"
        )));
    }
    let model_cfg = cfg.model_config(dataset.features.ncols(), dataset.num_classes)?;
    if layer >= model_cfg.layers.len() || head >= model_cfg.layers[layer].heads.len() {
        return Err(TanError::InvalidInput(format!(
            "layer {layer} head {head} does not exist in this model"
        )));
    }
    let params = match checkpoint {
        Some(path) => load_checkpoint(path)?,
        None => init_params(&model_cfg, seed)?,
    };

    // Forward pass up to the requested layer to obtain its input features,
    // then rebuild the head's precision matrix exactly as the layer does.
    let topology = Arc::new(dataset.topology.clone());
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &params)?;
    let x = tape.constant(dataset.features.clone())?;
    forward_network(
        &mut tape,
        &model_cfg,
        &bound,
        x,
        &topology,
        &cfg.solver,
        Mode::Eval,
    )?;
    let scope = format!("layer{layer}/head{head}");
    let j = rebuild_head_matrix(&model_cfg, &params, &dataset, layer, head, &cfg)?;

    // Columns of J^{-1} via unit-vector solves, batched to bound memory.
    let solve_cfg = cfg.solver;
    let mut inverse = Array2::zeros((n, n));
    let mut any_unconverged = false;
    let batch = 64usize;
    let mut start = 0usize;
    while start < n {
        let width = batch.min(n - start);
        let mut rhs = Array2::zeros((n, width));
        for c in 0..width {
            rhs[(start + c, c)] = 1.0;
        }
        let solve = gabp_solve(&j, &rhs, &solve_cfg)?;
        any_unconverged |= !solve.converged;
        for c in 0..width {
            for r in 0..n {
                inverse[(r, start + c)] = solve.mu[(r, c)];
            }
        }
        start += width;
    }
    let mut corr = Array2::zeros((n, n));
    for i in 0..n {
        for k in 0..n {
            let denom = (inverse[(i, i)] * inverse[(k, k)]).sqrt();
            corr[(i, k)] = if denom > 0.0 { inverse[(i, k)] / denom } else { 0.0 };
        }
    }

    let (order, warning) = fiedler_order(&j);
    if let Some(w) = warning {
        eprintln!("warning: {w}");
    }
    std::fs::create_dir_all(out)?;
    let mut corr_csv = String::new();
    let mut adj_csv = String::new();
    let dense = j.to_dense();
    for &i in &order {
        let corr_row: Vec<String> = order.iter().map(|&k| format!("{:.6}", corr[(i, k)])).collect();
        corr_csv.push_str(&corr_row.join(","));
        corr_csv.push('\n');
        let adj_row: Vec<String> = order
            .iter()
            .map(|&k| {
                if i != k && dense[i][k] != 0.0 {
                    "1".to_string()
                } else {
                    "0".to_string()
                }
            })
            .collect();
        adj_csv.push_str(&adj_row.join(","));
        adj_csv.push('\n');
    }
    std::fs::write(out.join("correlation.csv"), corr_csv)?;
    std::fs::write(out.join("adjacency.csv"), adj_csv)?;
    std::fs::write(
        out.join("node_order.csv"),
        order
            .iter()
            .map(|i| i.to_string())
            .collect::<Vec<_>>()
            .join("\n")
            + "\n",
    )?;
    echo_config(&out.join("resolved_config.json"), &cfg.resolved())?;
    println!(
        "wrote {n}x{n} correlation and adjacency for {scope} to {}",
        out.display()
    );
    Ok(if any_unconverged { EXIT_NO_CONVERGENCE } else { 0 })
}

/// Rebuilds the precision matrix a given head would see: the network's
/// layer input is recomputed densely up to `layer`, then normalized and
/// passed through the head's builder.
fn rebuild_head_matrix(
    model_cfg: &tan_core::model::ModelConfig,
    params: &tan_core::model::ParamMap,
    dataset: &tan_core::data::Dataset,
    layer: usize,
    head: usize,
    cfg: &ExperimentConfig,
) -> tan_core::Result<tan_core::graph::SparseSymmetricMatrix> {
    use tan_core::model::{ffn_block, gabp_block};

    let topology = Arc::new(dataset.topology.clone());
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, params)?;
    let x0 = tape.constant(dataset.features.clone())?;
    let proj = tape.matmul(x0, bound.id("input_proj.w")?)?;
    let mut x = tape.add_bias_row(proj, bound.id("input_proj.b")?)?;
    for l in 0..layer {
        x = gabp_block(&mut tape, x, l, &model_cfg.layers[l], &bound, &topology, &cfg.solver)?;
        x = ffn_block(&mut tape, x, l, &bound)?;
    }
    let z = tape.layer_norm(
        x,
        bound.id(&format!("layer{layer}.ln1.gain"))?,
        bound.id(&format!("layer{layer}.ln1.bias"))?,
    )?;
    let head_cfg = &model_cfg.layers[layer].heads[head];
    if head_cfg.learned {
        let build = tan_core::builders::build_learned(
            head_cfg.construction,
            tape.value(z),
            &topology,
            &params[&format!("layer{layer}.head{head}.w_sim")],
            &params[&format!("layer{layer}.head{head}.node_head")],
            &head_cfg.similarity,
        )?;
        Ok(build.matrix)
    } else {
        tan_core::builders::build_fixed(head_cfg.construction, tape.value(z), &topology)
    }
}

fn cmd_convert_check(dir: &Path) -> tan_core::Result<u8> {
    let dataset = load_dataset(dir)?;
    let n = dataset.topology.node_count();
    let e = dataset.topology.edge_count();
    let homophily = if e > 0 {
        edge_homophily(&dataset)?
    } else {
        f64::NAN
    };
    println!(
        "{}: {} nodes, {} edges, {} classes, d_in {}, split ratios {:?}, homophily {:.3}",
        dataset.name,
        n,
        e,
        dataset.num_classes,
        dataset.features.ncols(),
        dataset.split_ratios,
        homophily
    );
    Ok(0)
}
