//! Training harness: Adam optimization with early stopping on validation
//! accuracy, the multi-seed protocol with CSV outputs, and iteration-count
//! telemetry aggregation.

use std::cell::Cell;
use std::collections::BTreeMap;
use std::path::Path;
use std::sync::Arc;
use std::time::Instant;

use ndarray::Array2;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{SolveTelemetry, Tape};
use crate::builders::Construction;
use crate::data::{random_split, Dataset, Split};
use crate::error::{Result, TanError};
use crate::model::{
    forward_network, init_params, masked_accuracy, BoundParams, HeadConfig, LayerConfig, Mode,
    ModelConfig, ParamMap,
};
use crate::solver::SolverConfig;

fn default_lr() -> f64 {
    1e-3
}
fn default_weight_decay() -> f64 {
    5e-4
}
fn default_dropout() -> f64 {
    0.6
}
fn default_max_epochs() -> usize {
    2000
}
fn default_hidden() -> usize {
    64
}
fn default_heads() -> Vec<usize> {
    vec![8, 1]
}
fn default_seeds() -> Vec<u64> {
    (0..10).collect()
}

/// Full description of one experiment. Every omitted field takes the
/// documented default; `resolved()` echoes the complete configuration so
/// the artifact next to the outputs has no implicit values.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset_path: String,
    pub construction: Construction,
    pub learned: bool,
    #[serde(default = "default_seeds")]
    pub seeds: Vec<u64>,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_weight_decay")]
    pub weight_decay: f64,
    #[serde(default = "default_dropout")]
    pub dropout: f64,
    /// Omitted: 100, or 200 for the fixed Laplacian configuration.
    #[serde(default)]
    pub patience: Option<usize>,
    #[serde(default = "default_max_epochs")]
    pub max_epochs: usize,
    #[serde(default)]
    pub solver: SolverConfig,
    #[serde(default = "default_hidden")]
    pub hidden: usize,
    #[serde(default = "default_heads")]
    pub heads: Vec<usize>,
}

impl ExperimentConfig {
    pub fn effective_patience(&self) -> usize {
        self.patience.unwrap_or({
            if self.construction == Construction::Laplacian && !self.learned {
                200
            } else {
                100
            }
        })
    }

    /// The same configuration with every default made explicit.
    pub fn resolved(&self) -> Self {
        Self {
            patience: Some(self.effective_patience()),
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.seeds.is_empty() {
            return Err(TanError::Config("at least one seed required".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(TanError::Config("learning_rate must be positive".into()));
        }
        if self.weight_decay < 0.0 {
            return Err(TanError::Config("weight_decay must be nonnegative".into()));
        }
        if self.max_epochs == 0 {
            return Err(TanError::Config("max_epochs must be at least 1".into()));
        }
        if self.heads.is_empty() {
            return Err(TanError::Config("heads list must be nonempty".into()));
        }
        for &h in &self.heads {
            if h == 0 || self.hidden % h != 0 {
                return Err(TanError::Config(format!(
                    "hidden {} must divide evenly into {h} heads",
                    self.hidden
                )));
            }
        }
        self.solver.validate()?;
        Ok(())
    }

    pub fn model_config(&self, d_in: usize, num_classes: usize) -> Result<ModelConfig> {
        self.validate()?;
        let layers = self
            .heads
            .iter()
            .map(|&count| LayerConfig {
                d_model: self.hidden,
                heads: vec![
                    HeadConfig {
                        d_latent: self.hidden / count,
                        construction: self.construction,
                        learned: self.learned,
                        similarity: Default::default(),
                    };
                    count
                ],
                ffn_hidden: 2 * self.hidden,
                dropout: self.dropout,
            })
            .collect();
        Ok(ModelConfig {
            d_in,
            d_model: self.hidden,
            num_classes,
            layers,
            dropout: self.dropout,
        })
    }
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

const BETA1: f64 = 0.9;
const BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Default)]
pub struct AdamState {
    pub step: usize,
    pub m: BTreeMap<String, Array2<f64>>,
    pub v: BTreeMap<String, Array2<f64>>,
}

/// One Adam step with classic L2 regularization: the decay term is added
/// to the gradient before the moment updates.
pub fn adam_step(
    params: &mut ParamMap,
    grads: &BTreeMap<String, Array2<f64>>,
    state: &mut AdamState,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    state.step += 1;
    let t = state.step as f64;
    let bc1 = 1.0 - BETA1.powf(t);
    let bc2 = 1.0 - BETA2.powf(t);
    for (name, value) in params.iter_mut() {
        let Some(grad) = grads.get(name) else {
            continue;
        };
        if grad.dim() != value.dim() {
            return Err(TanError::InvalidInput(format!(
                "gradient shape mismatch for `{name}`"
            )));
        }
        let m = state
            .m
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(value.dim()));
        let v = state
            .v
            .entry(name.clone())
            .or_insert_with(|| Array2::zeros(value.dim()));
        for ((p, g), (mi, vi)) in value
            .iter_mut()
            .zip(grad.iter())
            .zip(m.iter_mut().zip(v.iter_mut()))
        {
            let g = g + weight_decay * *p;
            *mi = BETA1 * *mi + (1.0 - BETA1) * g;
            *vi = BETA2 * *vi + (1.0 - BETA2) * g * g;
            let m_hat = *mi / bc1;
            let v_hat = *vi / bc2;
            *p -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Run records
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    /// Forward and backward solve telemetry of the training pass, one entry
    /// per layer/head solve.
    pub solves: Vec<SolveRecord>,
}

#[derive(Debug, Clone, Serialize)]
pub struct SolveRecord {
    pub scope: String,
    pub backward: bool,
    pub iterations: usize,
    pub converged: bool,
    pub residual: f64,
}

impl From<&SolveTelemetry> for SolveRecord {
    fn from(t: &SolveTelemetry) -> Self {
        Self {
            scope: t.scope.clone(),
            backward: t.backward,
            iterations: t.iterations,
            converged: t.converged,
            residual: t.residual,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct RunRecord {
    pub seed: u64,
    pub epochs: Vec<EpochRecord>,
    pub best_epoch: usize,
    pub epochs_run: usize,
    pub test_acc: f64,
    pub wall_time_secs: f64,
    /// How often the test mask was materialized; exactly 1 by contract.
    pub test_mask_reads: u32,
    /// Parameters at the best validation epoch, for checkpoint export.
    #[serde(skip)]
    pub best_params: ParamMap,
}

impl RunRecord {
    pub fn forward_iteration_series(&self) -> Vec<f64> {
        self.epochs
            .iter()
            .map(|e| {
                let fwd: Vec<usize> = e
                    .solves
                    .iter()
                    .filter(|s| !s.backward)
                    .map(|s| s.iterations)
                    .collect();
                if fwd.is_empty() {
                    0.0
                } else {
                    fwd.iter().sum::<usize>() as f64 / fwd.len() as f64
                }
            })
            .collect()
    }
}

/// Test-mask wrapper counting materializations.
struct CountedTestMask {
    mask: Vec<bool>,
    reads: Cell<u32>,
}

impl CountedTestMask {
    fn get(&self) -> &[bool] {
        self.reads.set(self.reads.get() + 1);
        &self.mask
    }
}

// ---------------------------------------------------------------------------
// Training
// ---------------------------------------------------------------------------

/// Trains once on the given dataset with the split drawn from `seed`.
/// Early stopping tracks validation accuracy (ties broken by lower
/// validation loss); the test set is evaluated exactly once, at the
/// parameters of the best validation epoch.
pub fn train_once(cfg: &ExperimentConfig, dataset: &Dataset, seed: u64) -> Result<RunRecord> {
    cfg.validate()?;
    let start = Instant::now();
    let split = random_split(dataset, seed);
    let n = dataset.topology.node_count();
    let train_mask: Vec<bool> = (0..n).map(|i| split.assignment[i] == Split::Train).collect();
    let val_mask: Vec<bool> = (0..n).map(|i| split.assignment[i] == Split::Val).collect();
    let test_mask = CountedTestMask {
        mask: (0..n).map(|i| split.assignment[i] == Split::Test).collect(),
        reads: Cell::new(0),
    };
    if !train_mask.iter().any(|&m| m) || !val_mask.iter().any(|&m| m) {
        return Err(TanError::InvalidInput(
            "split produced an empty train or validation mask".into(),
        ));
    }

    let model_cfg = cfg.model_config(dataset.features.ncols(), dataset.num_classes)?;
    let mut params = init_params(&model_cfg, seed)?;
    let mut adam = AdamState::default();
    let topology = Arc::new(dataset.topology.clone());
    let patience = cfg.effective_patience();

    let mut best: Option<(f64, f64, usize, ParamMap)> = None;
    let mut epochs = Vec::new();

    for epoch in 0..cfg.max_epochs {
        // Training pass.
        let mut tape = Tape::with_dropout_stream(seed, epoch as u64);
        let bound = BoundParams::bind(&mut tape, &params)?;
        let x = tape.constant(dataset.features.clone())?;
        let logits = forward_network(
            &mut tape,
            &model_cfg,
            &bound,
            x,
            &topology,
            &cfg.solver,
            Mode::Train,
        )?;
        let loss = tape.row_softmax_cross_entropy(logits, &dataset.labels, &train_mask)?;
        let train_loss = tape.value(loss)[(0, 0)];
        tape.backward(loss)?;
        let mut grads = BTreeMap::new();
        for (name, &id) in &bound.ids {
            if let Some(g) = tape.grad(id) {
                grads.insert(name.clone(), g.clone());
            }
        }
        let solves: Vec<SolveRecord> = tape.solve_log().iter().map(SolveRecord::from).collect();
        adam_step(&mut params, &grads, &mut adam, cfg.learning_rate, cfg.weight_decay)?;

        // Validation pass on the updated parameters.
        let mut eval_tape = Tape::new();
        let eval_bound = BoundParams::bind(&mut eval_tape, &params)?;
        let ex = eval_tape.constant(dataset.features.clone())?;
        let eval_logits = forward_network(
            &mut eval_tape,
            &model_cfg,
            &eval_bound,
            ex,
            &topology,
            &cfg.solver,
            Mode::Eval,
        )?;
        let val_loss_id =
            eval_tape.row_softmax_cross_entropy(eval_logits, &dataset.labels, &val_mask)?;
        let val_loss = eval_tape.value(val_loss_id)[(0, 0)];
        let val_acc = masked_accuracy(eval_tape.value(eval_logits), &dataset.labels, &val_mask);

        epochs.push(EpochRecord {
            epoch,
            train_loss,
            val_loss,
            val_acc,
            solves,
        });

        let improved = match &best {
            None => true,
            Some((acc, loss, _, _)) => val_acc > *acc || (val_acc == *acc && val_loss < *loss),
        };
        if improved {
            best = Some((val_acc, val_loss, epoch, params.clone()));
        }
        let best_epoch = best.as_ref().map(|b| b.2).unwrap_or(0);
        if epoch - best_epoch >= patience {
            break;
        }
    }

    let (_, _, best_epoch, best_params) = best.expect("at least one epoch ran");
    let epochs_run = epochs.len();

    // Single test evaluation at the best-validation parameters.
    let mut tape = Tape::new();
    let bound = BoundParams::bind(&mut tape, &best_params)?;
    let x = tape.constant(dataset.features.clone())?;
    let logits = forward_network(
        &mut tape,
        &model_cfg,
        &bound,
        x,
        &topology,
        &cfg.solver,
        Mode::Eval,
    )?;
    let test_acc = masked_accuracy(tape.value(logits), &dataset.labels, test_mask.get());

    Ok(RunRecord {
        seed,
        epochs,
        best_epoch,
        epochs_run,
        test_acc,
        wall_time_secs: start.elapsed().as_secs_f64(),
        test_mask_reads: test_mask.reads.get(),
        best_params,
    })
}

// ---------------------------------------------------------------------------
// Multi-seed protocol
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct ProtocolSummary {
    pub mean_test_acc: f64,
    /// Sample standard deviation over successful seeds; 0 for one seed.
    pub std_test_acc: f64,
    pub per_seed: Vec<SeedOutcome>,
    pub failures: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct SeedOutcome {
    pub seed: u64,
    pub test_acc: Option<f64>,
    pub epochs_run: usize,
    pub mean_iters_fwd: f64,
    pub mean_iters_bwd: f64,
    pub converged_fraction: f64,
    pub error: Option<String>,
}

fn solve_stats(record: &RunRecord) -> (f64, f64, f64) {
    let mut fwd = (0usize, 0usize);
    let mut bwd = (0usize, 0usize);
    let mut converged = 0usize;
    let mut total = 0usize;
    for epoch in &record.epochs {
        for s in &epoch.solves {
            total += 1;
            if s.converged {
                converged += 1;
            }
            if s.backward {
                bwd = (bwd.0 + s.iterations, bwd.1 + 1);
            } else {
                fwd = (fwd.0 + s.iterations, fwd.1 + 1);
            }
        }
    }
    let mean = |(sum, count): (usize, usize)| if count == 0 { 0.0 } else { sum as f64 / count as f64 };
    let frac = if total == 0 { 1.0 } else { converged as f64 / total as f64 };
    (mean(fwd), mean(bwd), frac)
}

/// Runs `train_once` per seed in parallel, aggregates mean +- sample std of
/// test accuracy over successes, and writes `summary.csv` plus
/// `epochs_<seed>.csv` files when `out_dir` is given. More than 20% failed
/// seeds fails the protocol.
pub fn run_protocol(
    cfg: &ExperimentConfig,
    dataset: &Dataset,
    out_dir: Option<&Path>,
) -> Result<ProtocolSummary> {
    cfg.validate()?;
    let results: Vec<(u64, Result<RunRecord>)> = cfg
        .seeds
        .par_iter()
        .map(|&seed| (seed, train_once(cfg, dataset, seed)))
        .collect();

    let mut per_seed = Vec::new();
    let mut accs = Vec::new();
    let mut failures = 0usize;
    for (seed, result) in &results {
        match result {
            Ok(record) => {
                let (fwd, bwd, frac) = solve_stats(record);
                accs.push(record.test_acc);
                per_seed.push(SeedOutcome {
                    seed: *seed,
                    test_acc: Some(record.test_acc),
                    epochs_run: record.epochs_run,
                    mean_iters_fwd: fwd,
                    mean_iters_bwd: bwd,
                    converged_fraction: frac,
                    error: None,
                });
            }
            Err(e) => {
                failures += 1;
                per_seed.push(SeedOutcome {
                    seed: *seed,
                    test_acc: None,
                    epochs_run: 0,
                    mean_iters_fwd: 0.0,
                    mean_iters_bwd: 0.0,
                    converged_fraction: 0.0,
                    error: Some(e.to_string()),
                });
            }
        }
    }

    if failures * 5 > cfg.seeds.len() {
        return Err(TanError::Domain(format!(
            "{failures} of {} seeds failed (over 20%)",
            cfg.seeds.len()
        )));
    }
    let mean = if accs.is_empty() {
        0.0
    } else {
        accs.iter().sum::<f64>() / accs.len() as f64
    };
    let std = if accs.len() < 2 {
        0.0
    } else {
        (accs.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (accs.len() - 1) as f64).sqrt()
    };

    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir)?;
        let mut csv = String::from(
            "seed,test_acc,epochs,mean_iters_fwd,mean_iters_bwd,converged_fraction,error\n",
        );
        for outcome in &per_seed {
            csv.push_str(&format!(
                "{},{},{},{:.3},{:.3},{:.4},{}\n",
                outcome.seed,
                outcome
                    .test_acc
                    .map(|a| format!("{a:.6}"))
                    .unwrap_or_default(),
                outcome.epochs_run,
                outcome.mean_iters_fwd,
                outcome.mean_iters_bwd,
                outcome.converged_fraction,
                outcome.error.clone().unwrap_or_default()
            ));
        }
        std::fs::write(dir.join("summary.csv"), csv)?;
        for (seed, result) in &results {
            if let Ok(record) = result {
                let mut csv = String::from(
                    "epoch,train_loss,val_loss,val_acc,fwd_iters_mean,fwd_converged,bwd_iters_mean,bwd_converged\n",
                );
                for e in &record.epochs {
                    let agg = |backward: bool| {
                        let sel: Vec<&SolveRecord> =
                            e.solves.iter().filter(|s| s.backward == backward).collect();
                        if sel.is_empty() {
                            (0.0, 1.0)
                        } else {
                            (
                                sel.iter().map(|s| s.iterations).sum::<usize>() as f64
                                    / sel.len() as f64,
                                sel.iter().filter(|s| s.converged).count() as f64
                                    / sel.len() as f64,
                            )
                        }
                    };
                    let (fi, fc) = agg(false);
                    let (bi, bc) = agg(true);
                    csv.push_str(&format!(
                        "{},{:.6},{:.6},{:.4},{:.2},{:.3},{:.2},{:.3}\n",
                        e.epoch, e.train_loss, e.val_loss, e.val_acc, fi, fc, bi, bc
                    ));
                }
                std::fs::write(dir.join(format!("epochs_{seed}.csv")), csv)?;
            }
        }
        std::fs::write(
            dir.join("resolved_config.json"),
            serde_json::to_string_pretty(&cfg.resolved())?,
        )?;
    }

    Ok(ProtocolSummary {
        mean_test_acc: mean,
        std_test_acc: std,
        per_seed,
        failures,
    })
}

// ---------------------------------------------------------------------------
// Iteration trend
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize)]
pub struct TrendSummary {
    pub first_decile_median: f64,
    pub last_decile_median: f64,
    /// first / last; above 1 means iterations decreased over training.
    pub ratio: f64,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Median forward iterations over the first and last deciles of epochs.
/// Needs at least 20 recorded epochs; informational, not an assertion.
pub fn iteration_trend(record: &RunRecord) -> Option<TrendSummary> {
    let series = record.forward_iteration_series();
    if series.len() < 20 {
        return None;
    }
    let decile = series.len() / 10;
    let mut first: Vec<f64> = series[..decile].to_vec();
    let mut last: Vec<f64> = series[series.len() - decile..].to_vec();
    let first_decile_median = median(&mut first);
    let last_decile_median = median(&mut last);
    let ratio = if last_decile_median == 0.0 {
        1.0
    } else {
        first_decile_median / last_decile_median
    };
    Some(TrendSummary {
        first_decile_median,
        last_decile_median,
        ratio,
    })
}
