//! Minimal reverse-mode gradient engine.
//!
//! One [`Tape`] per training run. Recording order is topological order;
//! [`Tape::backward`] traverses it exactly once in reverse. The engine only
//! carries the operations the model needs: dense elementary ops, per-edge
//! similarity and precision-assembly ops, and the implicit-differentiation
//! GaBP fixed-point node.

mod checkpoint;
mod edge_ops;
mod implicit;

pub use checkpoint::{load_checkpoint, save_checkpoint};
pub use implicit::SolveTelemetry;

use std::sync::Arc;

use ndarray::{s, Array2};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Result, TanError};
use crate::graph::GraphTopology;
use crate::solver::SolverConfig;

pub type TensorId = usize;

/// A recorded tensor: dense 2-D value plus an optional gradient buffer of
/// the same shape.
#[derive(Debug)]
pub struct Tensor {
    pub value: Array2<f64>,
    pub grad: Option<Array2<f64>>,
    pub requires_grad: bool,
    pub(crate) op: Op,
}

#[derive(Debug)]
pub(crate) enum Op {
    Leaf,
    MatMul(TensorId, TensorId),
    Add(TensorId, TensorId),
    /// Broadcast a `1 x cols` row vector over every row of `x`.
    AddBiasRow {
        x: TensorId,
        bias: TensorId,
    },
    Scale(TensorId, f64),
    LeakyRelu {
        x: TensorId,
        slope: f64,
    },
    Softplus(TensorId),
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Per-row `1 / sqrt(var + eps)`.
        inv_std: Vec<f64>,
        normalized: Array2<f64>,
    },
    Dropout {
        x: TensorId,
        /// Zeros and survivor scale baked in.
        mask: Array2<f64>,
    },
    ConcatCols(Vec<TensorId>),
    SliceCols {
        x: TensorId,
        start: usize,
    },
    SliceRows {
        x: TensorId,
        start: usize,
    },
    Sum(TensorId),
    SoftmaxXent {
        logits: TensorId,
        labels: Vec<usize>,
        mask: Vec<bool>,
        probs: Array2<f64>,
        masked_count: usize,
    },
    CosineEdgeScores {
        s: TensorId,
        topology: Arc<GraphTopology>,
    },
    GaussianEdgeScores {
        s: TensorId,
        topology: Arc<GraphTopology>,
        bandwidth: f64,
    },
    /// `2E x 2d` rows `[s_i | s_j]` for both directed orders of each edge.
    GatherEdgePairs {
        s: TensorId,
        topology: Arc<GraphTopology>,
    },
    /// `2E x 1 -> E x 1` averaging the two directed rows of each edge.
    AverageDirectedPairs(TensorId),
    PairwiseNormalAssemble {
        b: TensorId,
        p: TensorId,
        margin: f64,
        topology: Arc<GraphTopology>,
    },
    DiagDominantAssemble {
        couplings: TensorId,
        confidence: TensorId,
        topology: Arc<GraphTopology>,
    },
    LaplacianAssemble {
        weights: TensorId,
        bump: Option<TensorId>,
        epsilon_shift: f64,
        topology: Arc<GraphTopology>,
    },
    GabpFixedPoint {
        j_diag: TensorId,
        j_off: TensorId,
        h: TensorId,
        topology: Arc<GraphTopology>,
        cfg: SolverConfig,
        scope: String,
    },
}

/// Gradient tape. Recording and backward are single-threaded.
pub struct Tape {
    nodes: Vec<Tensor>,
    backward_done: bool,
    /// Counter-based dropout stream: (seed, epoch) fixed per tape, one
    /// substream per dropout instance in recording order.
    dropout_seed: u64,
    dropout_epoch: u64,
    dropout_counter: u64,
    solve_log: Vec<SolveTelemetry>,
}

impl Tape {
    pub fn new() -> Self {
        Self::with_dropout_stream(0, 0)
    }

    pub fn with_dropout_stream(seed: u64, epoch: u64) -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            dropout_seed: seed,
            dropout_epoch: epoch,
            dropout_counter: 0,
            solve_log: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: TensorId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    pub fn grad(&self, id: TensorId) -> Option<&Array2<f64>> {
        self.nodes[id].grad.as_ref()
    }

    pub fn tensor(&self, id: TensorId) -> &Tensor {
        &self.nodes[id]
    }

    pub fn solve_log(&self) -> &[SolveTelemetry] {
        &self.solve_log
    }

    /// Total floats retained by the tape: values, gradients, and every op
    /// cache. Used to assert that the fixed-point node keeps no
    /// per-iteration state (retained memory independent of `max_iter`).
    pub fn retained_floats(&self) -> usize {
        self.nodes
            .iter()
            .map(|node| {
                let cache = match &node.op {
                    Op::LayerNorm {
                        inv_std, normalized, ..
                    } => inv_std.len() + normalized.len(),
                    Op::Dropout { mask, .. } => mask.len(),
                    Op::SoftmaxXent { probs, .. } => probs.len(),
                    _ => 0,
                };
                node.value.len()
                    + node.grad.as_ref().map(|g| g.len()).unwrap_or(0)
                    + cache
            })
            .sum()
    }

    pub(crate) fn log_solve(&mut self, t: SolveTelemetry) {
        self.solve_log.push(t);
    }

    /// Trainable leaf.
    pub fn param(&mut self, value: Array2<f64>) -> Result<TensorId> {
        self.push(value, true, Op::Leaf)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Array2<f64>) -> Result<TensorId> {
        self.push(value, false, Op::Leaf)
    }

    fn requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&id| self.nodes[id].requires_grad)
    }

    pub(crate) fn push(
        &mut self,
        value: Array2<f64>,
        requires_grad: bool,
        op: Op,
    ) -> Result<TensorId> {
        if value.iter().any(|v| !v.is_finite()) {
            return Err(TanError::Tape(format!(
                "non-finite value produced by {}",
                op_name(&op)
            )));
        }
        self.nodes.push(Tensor {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Ok(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.ncols() != bv.nrows() {
            return Err(TanError::Tape(format!(
                "matmul shape mismatch: {}x{} . {}x{}",
                av.nrows(),
                av.ncols(),
                bv.nrows(),
                bv.ncols()
            )));
        }
        let value = av.dot(bv);
        let rg = self.requires(&[a, b]);
        self.push(value, rg, Op::MatMul(a, b))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (av, bv) = (&self.nodes[a].value, &self.nodes[b].value);
        if av.dim() != bv.dim() {
            return Err(TanError::Tape(format!(
                "add shape mismatch: {:?} vs {:?}",
                av.dim(),
                bv.dim()
            )));
        }
        let value = av + bv;
        let rg = self.requires(&[a, b]);
        self.push(value, rg, Op::Add(a, b))
    }

    pub fn add_bias_row(&mut self, x: TensorId, bias: TensorId) -> Result<TensorId> {
        let (xv, bv) = (&self.nodes[x].value, &self.nodes[bias].value);
        if bv.nrows() != 1 || bv.ncols() != xv.ncols() {
            return Err(TanError::Tape(format!(
                "add_bias_row expects 1x{} bias, got {}x{}",
                xv.ncols(),
                bv.nrows(),
                bv.ncols()
            )));
        }
        let value = xv + bv;
        let rg = self.requires(&[x, bias]);
        self.push(value, rg, Op::AddBiasRow { x, bias })
    }

    pub fn scale(&mut self, x: TensorId, factor: f64) -> Result<TensorId> {
        let value = &self.nodes[x].value * factor;
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Scale(x, factor))
    }

    pub fn leaky_relu(&mut self, x: TensorId, slope: f64) -> Result<TensorId> {
        let value = self.nodes[x].value.mapv(|v| if v >= 0.0 { v } else { slope * v });
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::LeakyRelu { x, slope })
    }

    pub fn softplus(&mut self, x: TensorId) -> Result<TensorId> {
        let value = self.nodes[x].value.mapv(|v| v.max(0.0) + (-v.abs()).exp().ln_1p());
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Softplus(x))
    }

    /// Row-wise normalization to zero mean / unit variance (variance + 1e-5),
    /// then per-feature gain and bias (both `1 x cols`).
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let xv = &self.nodes[x].value;
        let cols = xv.ncols();
        for (name, id) in [("gain", gain), ("bias", bias)] {
            let v = &self.nodes[id].value;
            if v.nrows() != 1 || v.ncols() != cols {
                return Err(TanError::Tape(format!(
                    "layer_norm {name} must be 1x{cols}, got {}x{}",
                    v.nrows(),
                    v.ncols()
                )));
            }
        }
        let mut normalized = Array2::zeros(xv.dim());
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for (r, row) in xv.rows().into_iter().enumerate() {
            let mean = row.mean().unwrap();
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + 1e-5).sqrt();
            inv_std.push(is);
            for (c, &v) in row.iter().enumerate() {
                normalized[(r, c)] = (v - mean) * is;
            }
        }
        let gv = &self.nodes[gain].value;
        let bv = &self.nodes[bias].value;
        let mut value = normalized.clone();
        for mut row in value.rows_mut() {
            for c in 0..cols {
                row[c] = row[c] * gv[(0, c)] + bv[(0, c)];
            }
        }
        let rg = self.requires(&[x, gain, bias]);
        self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            },
        )
    }

    /// Zeroes entries with probability `rate` at train time and scales
    /// survivors by `1/(1-rate)`; identity in eval mode or at rate 0.
    pub fn dropout(&mut self, x: TensorId, rate: f64, train: bool) -> Result<TensorId> {
        if !(0.0..1.0).contains(&rate) {
            return Err(TanError::Config(format!("dropout rate must lie in [0, 1), got {rate}")));
        }
        let instance = self.dropout_counter;
        self.dropout_counter += 1;
        let xv = &self.nodes[x].value;
        if !train || rate == 0.0 {
            let value = xv.clone();
            let mask = Array2::ones(xv.dim());
            let rg = self.requires(&[x]);
            return self.push(value, rg, Op::Dropout { x, mask });
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(
            self.dropout_seed,
            self.dropout_epoch,
            instance,
        ));
        let keep_scale = 1.0 / (1.0 - rate);
        let mask = Array2::from_shape_simple_fn(xv.dim(), || {
            if rng.gen::<f64>() < rate {
                0.0
            } else {
                keep_scale
            }
        });
        let value = xv * &mask;
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::Dropout { x, mask })
    }

    pub fn concat_columns(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(TanError::Tape("concat_columns needs at least one input".into()));
        }
        let rows = self.nodes[parts[0]].value.nrows();
        let total: usize = parts.iter().map(|&p| self.nodes[p].value.ncols()).sum();
        let mut value = Array2::zeros((rows, total));
        let mut offset = 0;
        for &p in parts {
            let pv = &self.nodes[p].value;
            if pv.nrows() != rows {
                return Err(TanError::Tape("concat_columns row mismatch".into()));
            }
            value.slice_mut(s![.., offset..offset + pv.ncols()]).assign(pv);
            offset += pv.ncols();
        }
        let rg = self.requires(parts);
        self.push(value, rg, Op::ConcatCols(parts.to_vec()))
    }

    pub fn slice_columns(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xv = &self.nodes[x].value;
        if start + len > xv.ncols() {
            return Err(TanError::Tape(format!(
                "slice_columns {start}..{} out of {} columns",
                start + len,
                xv.ncols()
            )));
        }
        let value = xv.slice(s![.., start..start + len]).to_owned();
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::SliceCols { x, start })
    }

    pub fn slice_rows(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let xv = &self.nodes[x].value;
        if start + len > xv.nrows() {
            return Err(TanError::Tape(format!(
                "slice_rows {start}..{} out of {} rows",
                start + len,
                xv.nrows()
            )));
        }
        let value = xv.slice(s![start..start + len, ..]).to_owned();
        let rg = self.requires(&[x]);
        self.push(value, rg, Op::SliceRows { x, start })
    }

    pub fn sum(&mut self, x: TensorId) -> Result<TensorId> {
        let total = self.nodes[x].value.sum();
        let rg = self.requires(&[x]);
        self.push(Array2::from_elem((1, 1), total), rg, Op::Sum(x))
    }

    /// Mean cross entropy over the masked (labeled) rows only. Returns a
    /// `1 x 1` loss tensor.
    pub fn row_softmax_cross_entropy(
        &mut self,
        logits: TensorId,
        labels: &[usize],
        mask: &[bool],
    ) -> Result<TensorId> {
        let lv = &self.nodes[logits].value;
        let (rows, classes) = lv.dim();
        if labels.len() != rows || mask.len() != rows {
            return Err(TanError::Tape(format!(
                "cross entropy expects {rows} labels and mask entries, got {} and {}",
                labels.len(),
                mask.len()
            )));
        }
        let masked_count = mask.iter().filter(|&&m| m).count();
        if masked_count == 0 {
            return Err(TanError::Tape("cross entropy mask selects no rows".into()));
        }
        let mut probs = Array2::zeros((rows, classes));
        let mut loss = 0.0;
        for r in 0..rows {
            let row = lv.row(r);
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for c in 0..classes {
                let e = (row[c] - max).exp();
                probs[(r, c)] = e;
                denom += e;
            }
            for c in 0..classes {
                probs[(r, c)] /= denom;
            }
            if mask[r] {
                if labels[r] >= classes {
                    return Err(TanError::Tape(format!(
                        "label {} out of range for {classes} classes",
                        labels[r]
                    )));
                }
                loss -= probs[(r, labels[r])].max(1e-300).ln();
            }
        }
        loss /= masked_count as f64;
        let rg = self.requires(&[logits]);
        self.push(
            Array2::from_elem((1, 1), loss),
            rg,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                probs,
                masked_count,
            },
        )
    }

    /// Seeds the loss gradient with 1 and accumulates into every
    /// `requires_grad` tensor. A tape can be traversed backward once.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.backward_done {
            return Err(TanError::Tape(
                "backward called twice without re-recording".into(),
            ));
        }
        if self.nodes[loss].value.dim() != (1, 1) {
            return Err(TanError::Tape(format!(
                "backward expects a 1x1 loss, got {:?}",
                self.nodes[loss].value.dim()
            )));
        }
        self.backward_done = true;
        self.nodes[loss].grad = Some(Array2::ones((1, 1)));
        for id in (0..self.nodes.len()).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.backprop_node(id)?;
        }
        Ok(())
    }

    pub(crate) fn accumulate_grad(&mut self, id: TensorId, delta: &Array2<f64>) {
        if !self.nodes[id].requires_grad {
            return;
        }
        match &mut self.nodes[id].grad {
            Some(g) => *g += delta,
            None => self.nodes[id].grad = Some(delta.clone()),
        }
    }

    fn backprop_node(&mut self, id: TensorId) -> Result<()> {
        let upstream = self.nodes[id].grad.clone().expect("checked by caller");
        // Move the op out so gradient accumulation can borrow the tape
        // mutably; restored below.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        let result = self.backprop_op(id, &op, &upstream);
        self.nodes[id].op = op;
        result
    }

    fn backprop_op(&mut self, id: TensorId, op: &Op, upstream: &Array2<f64>) -> Result<()> {
        let upstream = upstream.clone();
        match op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (a, b) = (*a, *b);
                let da = upstream.dot(&self.nodes[b].value.t());
                let db = self.nodes[a].value.t().dot(&upstream);
                self.accumulate_grad(a, &da);
                self.accumulate_grad(b, &db);
            }
            Op::Add(a, b) => {
                let (a, b) = (*a, *b);
                self.accumulate_grad(a, &upstream);
                self.accumulate_grad(b, &upstream);
            }
            Op::AddBiasRow { x, bias } => {
                let (x, bias) = (*x, *bias);
                self.accumulate_grad(x, &upstream);
                let db = upstream
                    .sum_axis(ndarray::Axis(0))
                    .insert_axis(ndarray::Axis(0));
                self.accumulate_grad(bias, &db);
            }
            Op::Scale(x, factor) => {
                let (x, factor) = (*x, *factor);
                let dx = &upstream * factor;
                self.accumulate_grad(x, &dx);
            }
            Op::LeakyRelu { x, slope } => {
                let (x, slope) = (*x, *slope);
                let mut dx = upstream.clone();
                for (d, &v) in dx.iter_mut().zip(self.nodes[x].value.iter()) {
                    if v < 0.0 {
                        *d *= slope;
                    }
                }
                self.accumulate_grad(x, &dx);
            }
            Op::Softplus(x) => {
                let x = *x;
                let mut dx = upstream.clone();
                for (d, &v) in dx.iter_mut().zip(self.nodes[x].value.iter()) {
                    *d *= 1.0 / (1.0 + (-v).exp());
                }
                self.accumulate_grad(x, &dx);
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                inv_std,
                normalized,
            } => {
                let (x, gain, bias) = (*x, *gain, *bias);
                let inv_std = inv_std.clone();
                let normalized = normalized.clone();
                let gv = self.nodes[gain].value.clone();
                let cols = normalized.ncols() as f64;

                let mut dgain = Array2::zeros((1, normalized.ncols()));
                let mut dbias = Array2::zeros((1, normalized.ncols()));
                let mut dx = Array2::zeros(normalized.dim());
                for r in 0..normalized.nrows() {
                    let mut mean_dn = 0.0;
                    let mut mean_dn_n = 0.0;
                    for c in 0..normalized.ncols() {
                        let up = upstream[(r, c)];
                        let n = normalized[(r, c)];
                        dgain[(0, c)] += up * n;
                        dbias[(0, c)] += up;
                        let dn = up * gv[(0, c)];
                        mean_dn += dn;
                        mean_dn_n += dn * n;
                    }
                    mean_dn /= cols;
                    mean_dn_n /= cols;
                    for c in 0..normalized.ncols() {
                        let dn = upstream[(r, c)] * gv[(0, c)];
                        dx[(r, c)] = inv_std[r] * (dn - mean_dn - normalized[(r, c)] * mean_dn_n);
                    }
                }
                self.accumulate_grad(x, &dx);
                self.accumulate_grad(gain, &dgain);
                self.accumulate_grad(bias, &dbias);
            }
            Op::Dropout { x, mask } => {
                let x = *x;
                let dx = &upstream * mask;
                self.accumulate_grad(x, &dx);
            }
            Op::ConcatCols(parts) => {
                let parts = parts.clone();
                let mut offset = 0;
                for p in parts {
                    let w = self.nodes[p].value.ncols();
                    let dp = upstream.slice(s![.., offset..offset + w]).to_owned();
                    self.accumulate_grad(p, &dp);
                    offset += w;
                }
            }
            Op::SliceCols { x, start } => {
                let (x, start) = (*x, *start);
                let mut dx = Array2::zeros(self.nodes[x].value.dim());
                dx.slice_mut(s![.., start..start + upstream.ncols()])
                    .assign(&upstream);
                self.accumulate_grad(x, &dx);
            }
            Op::SliceRows { x, start } => {
                let (x, start) = (*x, *start);
                let mut dx = Array2::zeros(self.nodes[x].value.dim());
                dx.slice_mut(s![start..start + upstream.nrows(), ..])
                    .assign(&upstream);
                self.accumulate_grad(x, &dx);
            }
            Op::Sum(x) => {
                let x = *x;
                let dx = Array2::from_elem(self.nodes[x].value.dim(), upstream[(0, 0)]);
                self.accumulate_grad(x, &dx);
            }
            Op::SoftmaxXent {
                logits,
                labels,
                mask,
                probs,
                masked_count,
            } => {
                let logits = *logits;
                let scale = upstream[(0, 0)] / *masked_count as f64;
                let mut dl = Array2::zeros(probs.dim());
                for r in 0..probs.nrows() {
                    if !mask[r] {
                        continue;
                    }
                    for c in 0..probs.ncols() {
                        let onehot = if c == labels[r] { 1.0 } else { 0.0 };
                        dl[(r, c)] = scale * (probs[(r, c)] - onehot);
                    }
                }
                self.accumulate_grad(logits, &dl);
            }
            Op::CosineEdgeScores { .. }
            | Op::GaussianEdgeScores { .. }
            | Op::GatherEdgePairs { .. }
            | Op::AverageDirectedPairs(..)
            | Op::PairwiseNormalAssemble { .. }
            | Op::DiagDominantAssemble { .. }
            | Op::LaplacianAssemble { .. } => {
                edge_ops::backprop(self, op, &upstream)?;
            }
            Op::GabpFixedPoint { .. } => {
                implicit::backprop(self, id, op, &upstream)?;
            }
        }
        Ok(())
    }
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::AddBiasRow { .. } => "add_bias_row",
        Op::Scale(..) => "scale",
        Op::LeakyRelu { .. } => "leaky_relu",
        Op::Softplus(..) => "softplus",
        Op::LayerNorm { .. } => "layer_norm",
        Op::Dropout { .. } => "dropout",
        Op::ConcatCols(..) => "concat_columns",
        Op::SliceCols { .. } => "slice_columns",
        Op::SliceRows { .. } => "slice_rows",
        Op::Sum(..) => "sum",
        Op::SoftmaxXent { .. } => "row_softmax_cross_entropy",
        Op::CosineEdgeScores { .. } => "cosine_edge_scores",
        Op::GaussianEdgeScores { .. } => "gaussian_edge_scores",
        Op::GatherEdgePairs { .. } => "gather_edge_pairs",
        Op::AverageDirectedPairs(..) => "average_directed_pairs",
        Op::PairwiseNormalAssemble { .. } => "pairwise_normal_assemble",
        Op::DiagDominantAssemble { .. } => "diag_dominant_assemble",
        Op::LaplacianAssemble { .. } => "laplacian_assemble",
        Op::GabpFixedPoint { .. } => "gabp_fixed_point",
    }
}

fn mix_seed(seed: u64, epoch: u64, instance: u64) -> u64 {
    // splitmix64 over the three counters.
    let mut z = seed
        .wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(epoch.wrapping_mul(0xBF58_476D_1CE4_E5B9))
        .wrapping_add(instance.wrapping_add(1));
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}
