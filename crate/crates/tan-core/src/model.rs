//! The attention network: layers combining a multi-head belief propagation
//! block with a node-wise feed-forward block, plus input projection and
//! classifier head.
//!
//! Per layer: `Z = LayerNorm1(X)`; each head projects observations
//! `h = LeakyReLU(Z W_obs)`, builds its precision matrix from `Z`, and runs
//! the equilibrium solve; the head outputs are normalized, activated,
//! concatenated, and projected back to `d_model`, with residuals around
//! both the solve block and the feed-forward block.

use std::collections::BTreeMap;
use std::sync::Arc;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, TensorId};
use crate::builders::{
    record_learned_build, Construction, LearnedParams, SimilarityConfig, LEAKY_SLOPE,
};
use crate::error::{Result, TanError};
use crate::graph::GraphTopology;
use crate::solver::SolverConfig;

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct HeadConfig {
    pub d_latent: usize,
    pub construction: Construction,
    pub learned: bool,
    pub similarity: SimilarityConfig,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct LayerConfig {
    pub d_model: usize,
    pub heads: Vec<HeadConfig>,
    pub ffn_hidden: usize,
    pub dropout: f64,
}

impl LayerConfig {
    pub fn validate(&self) -> Result<()> {
        if self.heads.is_empty() {
            return Err(TanError::Config("layer needs at least one head".into()));
        }
        let total: usize = self.heads.iter().map(|h| h.d_latent).sum();
        if total != self.d_model {
            return Err(TanError::Config(format!(
                "head widths sum to {total}, expected d_model {}",
                self.d_model
            )));
        }
        if self.heads.iter().any(|h| h.d_latent == 0) {
            return Err(TanError::Config("head d_latent must be at least 1".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d_in: usize,
    pub d_model: usize,
    pub num_classes: usize,
    pub layers: Vec<LayerConfig>,
    pub dropout: f64,
}

impl ModelConfig {
    /// The two-layer network used throughout: input projection to 64,
    /// 8 heads of width 8, then a single 64-wide head, classifier on top.
    pub fn standard(
        d_in: usize,
        num_classes: usize,
        construction: Construction,
        learned: bool,
    ) -> Self {
        let head = |d_latent| HeadConfig {
            d_latent,
            construction,
            learned,
            similarity: SimilarityConfig::default(),
        };
        let d_model = 64;
        Self {
            d_in,
            d_model,
            num_classes,
            layers: vec![
                LayerConfig {
                    d_model,
                    heads: vec![head(8); 8],
                    ffn_hidden: 2 * d_model,
                    dropout: 0.6,
                },
                LayerConfig {
                    d_model,
                    heads: vec![head(64)],
                    ffn_hidden: 2 * d_model,
                    dropout: 0.6,
                },
            ],
            dropout: 0.6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.d_in == 0 || self.d_model == 0 || self.num_classes == 0 {
            return Err(TanError::Config(
                "d_in, d_model and num_classes must be positive".into(),
            ));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(TanError::Config(format!(
                "dropout must lie in [0, 1), got {}",
                self.dropout
            )));
        }
        for layer in &self.layers {
            layer.validate()?;
            if layer.d_model != self.d_model {
                return Err(TanError::Config("all layers must share d_model".into()));
            }
        }
        Ok(())
    }
}

pub type ParamMap = BTreeMap<String, Array2<f64>>;

/// Uniform fan-in initialization for every weight matrix; biases and
/// normalization offsets zero, normalization gains one.
pub fn init_params(cfg: &ModelConfig, seed: u64) -> Result<ParamMap> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut params = ParamMap::new();
    let mut weight = |params: &mut ParamMap, name: String, rows: usize, cols: usize| {
        let bound = 1.0 / (rows as f64).sqrt();
        let w = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        params.insert(name, w);
    };
    weight(&mut params, "input_proj.w".into(), cfg.d_in, cfg.d_model);
    params.insert("input_proj.b".into(), Array2::zeros((1, cfg.d_model)));
    for (l, layer) in cfg.layers.iter().enumerate() {
        params.insert(format!("layer{l}.ln1.gain"), Array2::ones((1, layer.d_model)));
        params.insert(format!("layer{l}.ln1.bias"), Array2::zeros((1, layer.d_model)));
        for (k, head) in layer.heads.iter().enumerate() {
            let p = format!("layer{l}.head{k}");
            weight(&mut params, format!("{p}.w_obs"), layer.d_model, head.d_latent);
            if head.learned {
                // d_sim = d_latent keeps the parameter count per head flat.
                weight(&mut params, format!("{p}.w_sim"), layer.d_model, head.d_latent);
                weight(&mut params, format!("{p}.node_head"), layer.d_model, 1);
            }
            params.insert(format!("{p}.ln2.gain"), Array2::ones((1, head.d_latent)));
            params.insert(format!("{p}.ln2.bias"), Array2::zeros((1, head.d_latent)));
        }
        weight(&mut params, format!("layer{l}.w_proj"), layer.d_model, layer.d_model);
        params.insert(format!("layer{l}.ffn.ln.gain"), Array2::ones((1, layer.d_model)));
        params.insert(format!("layer{l}.ffn.ln.bias"), Array2::zeros((1, layer.d_model)));
        weight(&mut params, format!("layer{l}.ffn.w1"), layer.d_model, layer.ffn_hidden);
        params.insert(format!("layer{l}.ffn.b1"), Array2::zeros((1, layer.ffn_hidden)));
        weight(&mut params, format!("layer{l}.ffn.w2"), layer.ffn_hidden, layer.d_model);
        params.insert(format!("layer{l}.ffn.b2"), Array2::zeros((1, layer.d_model)));
    }
    weight(&mut params, "classifier.w".into(), cfg.d_model, cfg.num_classes);
    params.insert("classifier.b".into(), Array2::zeros((1, cfg.num_classes)));
    Ok(params)
}

/// Parameters registered on a tape, by name.
pub struct BoundParams {
    pub ids: BTreeMap<String, TensorId>,
}

impl BoundParams {
    pub fn bind(tape: &mut Tape, params: &ParamMap) -> Result<Self> {
        let mut ids = BTreeMap::new();
        for (name, value) in params {
            ids.insert(name.clone(), tape.param(value.clone())?);
        }
        Ok(Self { ids })
    }

    pub fn id(&self, name: &str) -> Result<TensorId> {
        self.ids
            .get(name)
            .copied()
            .ok_or_else(|| TanError::Tape(format!("unknown parameter `{name}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Multi-head equilibrium block with residual: `X + concat_k U^(k) W_proj`.
pub fn gabp_block(
    tape: &mut Tape,
    x: TensorId,
    layer_index: usize,
    layer: &LayerConfig,
    bound: &BoundParams,
    topology: &Arc<GraphTopology>,
    solver_cfg: &SolverConfig,
) -> Result<TensorId> {
    layer.validate()?;
    let l = layer_index;
    let z = tape.layer_norm(
        x,
        bound.id(&format!("layer{l}.ln1.gain"))?,
        bound.id(&format!("layer{l}.ln1.bias"))?,
    )?;
    let mut head_outputs = Vec::with_capacity(layer.heads.len());
    for (k, head) in layer.heads.iter().enumerate() {
        let annotate = |e: TanError| {
            TanError::Domain(format!("layer {l} head {k}: {e}"))
        };
        let p = format!("layer{l}.head{k}");
        let obs_raw = tape.matmul(z, bound.id(&format!("{p}.w_obs"))?)?;
        let h = tape.leaky_relu(obs_raw, LEAKY_SLOPE)?;
        let (diag, off) = if head.learned {
            let params = LearnedParams {
                w_sim: bound.id(&format!("{p}.w_sim"))?,
                node_head: bound.id(&format!("{p}.node_head"))?,
            };
            record_learned_build(tape, head.construction, z, topology, &params, &head.similarity)
                .map_err(annotate)?
        } else {
            fixed_precision(tape, head.construction, z, topology).map_err(annotate)?
        };
        let scope = format!("layer{l}/head{k}");
        let mu = tape
            .gabp_fixed_point(diag, off, h, topology, solver_cfg, &scope)
            .map_err(annotate)?;
        let normed = tape.layer_norm(
            mu,
            bound.id(&format!("{p}.ln2.gain"))?,
            bound.id(&format!("{p}.ln2.bias"))?,
        )?;
        head_outputs.push(tape.leaky_relu(normed, LEAKY_SLOPE)?);
    }
    let concat = tape.concat_columns(&head_outputs)?;
    let projected = tape.matmul(concat, bound.id(&format!("layer{l}.w_proj"))?)?;
    tape.add(x, projected)
}

/// The fixed (non-learned) precision path: cosine couplings of the current
/// features for the pairwise constructions, binary weights for the
/// Laplacian. Recorded through constants, so no gradient flows into `J`.
fn fixed_precision(
    tape: &mut Tape,
    construction: Construction,
    z: TensorId,
    topology: &Arc<GraphTopology>,
) -> Result<(TensorId, TensorId)> {
    let features = tape.value(z).clone();
    let j = crate::builders::build_fixed(construction, &features, topology)?;
    let n = topology.node_count();
    let e = topology.edge_count();
    let diag = tape.constant(Array2::from_shape_fn((n, 1), |(i, _)| j.diagonal[i]))?;
    let off = tape.constant(Array2::from_shape_fn((e, 1), |(k, _)| j.off_diagonal[k]))?;
    Ok((diag, off))
}

/// Node-wise feed-forward with residual:
/// `X + LeakyReLU(LayerNorm(X) W1 + b1) W2 + b2`.
pub fn ffn_block(
    tape: &mut Tape,
    x: TensorId,
    layer_index: usize,
    bound: &BoundParams,
) -> Result<TensorId> {
    let l = layer_index;
    let normed = tape.layer_norm(
        x,
        bound.id(&format!("layer{l}.ffn.ln.gain"))?,
        bound.id(&format!("layer{l}.ffn.ln.bias"))?,
    )?;
    let h1 = tape.matmul(normed, bound.id(&format!("layer{l}.ffn.w1"))?)?;
    let h1 = tape.add_bias_row(h1, bound.id(&format!("layer{l}.ffn.b1"))?)?;
    let h1 = tape.leaky_relu(h1, LEAKY_SLOPE)?;
    let h2 = tape.matmul(h1, bound.id(&format!("layer{l}.ffn.w2"))?)?;
    let h2 = tape.add_bias_row(h2, bound.id(&format!("layer{l}.ffn.b2"))?)?;
    tape.add(x, h2)
}

/// Full network: input dropout and projection, the configured layers with
/// dropout on each layer input, classifier logits for every node.
pub fn forward_network(
    tape: &mut Tape,
    cfg: &ModelConfig,
    bound: &BoundParams,
    x_raw: TensorId,
    topology: &Arc<GraphTopology>,
    solver_cfg: &SolverConfig,
    mode: Mode,
) -> Result<TensorId> {
    cfg.validate()?;
    let train = mode == Mode::Train;
    let dropped = tape.dropout(x_raw, cfg.dropout, train)?;
    let proj = tape.matmul(dropped, bound.id("input_proj.w")?)?;
    let mut x = tape.add_bias_row(proj, bound.id("input_proj.b")?)?;
    for (l, layer) in cfg.layers.iter().enumerate() {
        if l > 0 {
            x = tape.dropout(x, layer.dropout, train)?;
        }
        x = gabp_block(tape, x, l, layer, bound, topology, solver_cfg)?;
        x = ffn_block(tape, x, l, bound)?;
    }
    let logits = tape.matmul(x, bound.id("classifier.w")?)?;
    tape.add_bias_row(logits, bound.id("classifier.b")?)
}

/// Argmax accuracy of `logits` over the rows selected by `mask`.
pub fn masked_accuracy(logits: &Array2<f64>, labels: &[usize], mask: &[bool]) -> f64 {
    let mut correct = 0usize;
    let mut total = 0usize;
    for (r, (&label, &m)) in labels.iter().zip(mask).enumerate() {
        if !m {
            continue;
        }
        total += 1;
        let row = logits.row(r);
        let mut best = 0;
        for c in 1..row.len() {
            if row[c] > row[best] {
                best = c;
            }
        }
        if best == label {
            correct += 1;
        }
    }
    if total == 0 {
        0.0
    } else {
        correct as f64 / total as f64
    }
}
