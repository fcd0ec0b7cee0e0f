//! The edge-augmented graph-transformer noise predictor, its training loss
//! and exact reverse-mode gradients, a toy training loop, and the
//! closed-form oracle predictor used to verify the sampler.
//!
//! Layer structure: tokens for object nodes, link nodes, and both edge
//! families are linear encodings of the raw graph tensors plus a shared
//! timestamp embedding. Each of the stacked layers runs object-to-link
//! attention and then link-to-link attention; in both, per-pair value
//! vectors are built from the target token, source token, and edge token,
//! aggregated with masked softmax weights, and the link tokens and edge
//! tokens are updated through small perceptrons. Object tokens are never
//! updated. The output head maps the concatenated per-layer link tokens to
//! the six noise coordinates of each link row.

mod checkpoint;
mod tape;
mod train;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use train::{train, TrainConfig, TrainOutcome, TrainState};

use crate::diffusion::{DiffusionSchedule, NoisePredictor};
use crate::graph::{TroGraph, GEOM_EMBED_DIM};
use crate::pointcloud::OBJECT_FEATURE_DIM;
use crate::{Error, Result};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use tape::{Mat, NodeId, Tape};

/// Width of a raw object-node row: center, scale, geometry feature.
pub const OBJECT_RAW_DIM: usize = 3 + 1 + OBJECT_FEATURE_DIM;
/// Width of a raw link-node row: pose twist, geometry embedding.
pub const LINK_RAW_DIM: usize = 6 + GEOM_EMBED_DIM;
/// Variance floor inside row standardization.
const LAYER_NORM_EPS: f64 = 1e-8;

/// Shape hyperparameters of one model instance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    /// Token width; must be even for the sinusoidal timestamp embedding.
    pub d: usize,
    /// Number of stacked attention layers.
    pub layers: usize,
    /// Padded link-slot count the model is built for.
    pub l_pad: usize,
    /// Object patch count the model is built for.
    pub p: usize,
    /// Largest diffusion step the model accepts.
    pub t_max: usize,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.d < 2 || self.d % 2 != 0 {
            return Err(Error::invalid(format!(
                "token width must be even and at least 2, got {}",
                self.d
            )));
        }
        if self.layers == 0 || self.l_pad == 0 || self.p == 0 || self.t_max == 0 {
            return Err(Error::invalid(
                "layers, link slots, patch count, and step range must all be positive",
            ));
        }
        Ok(())
    }
}

/// One named tensor inside the flat parameter vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorSpec {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub offset: usize,
}

fn build_layout(config: &ModelConfig) -> Vec<TensorSpec> {
    let d = config.d;
    let mut layout = Vec::new();
    let mut offset = 0;
    let mut push = |name: String, rows: usize, cols: usize| {
        layout.push(TensorSpec { name, rows, cols, offset });
        offset += rows * cols;
    };
    push("enc_obj.w".into(), OBJECT_RAW_DIM, d);
    push("enc_obj.b".into(), 1, d);
    push("enc_link.w".into(), LINK_RAW_DIM, d);
    push("enc_link.b".into(), 1, d);
    push("enc_or.w".into(), 6, d);
    push("enc_or.b".into(), 1, d);
    push("enc_rr.w".into(), 6, d);
    push("enc_rr.b".into(), 1, d);
    push("time.w1".into(), d, d);
    push("time.b1".into(), 1, d);
    push("time.w2".into(), d, d);
    push("time.b2".into(), 1, d);
    for layer in 0..config.layers {
        for block in ["or", "rr"] {
            let base = format!("layer{layer}.{block}");
            push(format!("{base}.wq"), d, d);
            push(format!("{base}.wk"), d, d);
            push(format!("{base}.wv"), 3 * d, d);
            push(format!("{base}.node.w1"), d, 2 * d);
            push(format!("{base}.node.b1"), 1, 2 * d);
            push(format!("{base}.node.w2"), 2 * d, d);
            push(format!("{base}.node.b2"), 1, d);
            push(format!("{base}.edge.w1"), 2 * d, d);
            push(format!("{base}.edge.b1"), 1, d);
            push(format!("{base}.edge.w2"), d, d);
            push(format!("{base}.edge.b2"), 1, d);
        }
    }
    push("head.w".into(), config.layers * d, 6);
    push("head.b".into(), 1, 6);
    layout
}

/// The noise-prediction model: a config, a named-tensor layout, and one
/// flat parameter vector the layout indexes into.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserModel {
    config: ModelConfig,
    layout: Vec<TensorSpec>,
    params: Vec<f64>,
}

impl DenoiserModel {
    /// Fresh model with seeded normal weights scaled by `1/sqrt(fan_in)`
    /// and zero biases.
    pub fn init(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total = layout.iter().map(|t| t.rows * t.cols).sum();
        let mut params = vec![0.0; total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let normal = StandardNormal;
        for tensor in &layout {
            if tensor.name.ends_with(".b") || tensor.name.contains(".b") && tensor.rows == 1 {
                continue;
            }
            let scale = 1.0 / (tensor.rows as f64).sqrt();
            for i in 0..tensor.rows * tensor.cols {
                let x: f64 = normal.sample(&mut rng);
                params[tensor.offset + i] = x * scale;
            }
        }
        Ok(DenoiserModel { config, layout, params })
    }

    /// Rebuilds a model around an existing parameter vector.
    pub fn from_params(config: ModelConfig, params: Vec<f64>) -> Result<Self> {
        config.validate()?;
        let layout = build_layout(&config);
        let total: usize = layout.iter().map(|t| t.rows * t.cols).sum();
        if params.len() != total {
            return Err(Error::invalid(format!(
                "parameter vector has {} entries, layout needs {total}",
                params.len()
            )));
        }
        if !params.iter().all(|x| x.is_finite()) {
            return Err(Error::Numerical("parameter vector contains non-finite values".into()));
        }
        Ok(DenoiserModel { config, layout, params })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &[TensorSpec] {
        &self.layout
    }

    pub fn params(&self) -> &[f64] {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut [f64] {
        &mut self.params
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn tensor(&self, name: &str) -> Option<(&TensorSpec, &[f64])> {
        let spec = self.layout.iter().find(|t| t.name == name)?;
        Some((spec, &self.params[spec.offset..spec.offset + spec.rows * spec.cols]))
    }

    /// Predicted noise rows for a noisy graph at step `t`.
    pub fn forward(&self, graph: &TroGraph, t: usize) -> Result<Vec<[f64; 6]>> {
        let (tape, eps_pred, _) = self.build_tape(graph, t, false)?;
        let value = tape.value(eps_pred);
        let mut out = vec![[0.0; 6]; self.config.l_pad];
        for (j, row) in out.iter_mut().enumerate() {
            row.copy_from_slice(value.row(j));
        }
        Ok(out)
    }

    /// Loss and exact parameter gradients for one noisy graph and its true
    /// noise rows. Gradients come back flat, in layout order.
    pub fn backward(
        &self,
        graph: &TroGraph,
        t: usize,
        eps_true: &[[f64; 6]],
        gamma_p: f64,
        gamma_r: f64,
    ) -> Result<(f64, Vec<f64>)> {
        if eps_true.len() != self.config.l_pad {
            return Err(Error::invalid(format!(
                "{} true-noise rows for {} link slots",
                eps_true.len(),
                self.config.l_pad
            )));
        }
        let (mut tape, eps_pred, param_nodes) = self.build_tape(graph, t, true)?;
        let target = tape.constant(Mat::from_vec(
            self.config.l_pad,
            6,
            eps_true.iter().flatten().copied().collect(),
        ));
        let col_weights = [gamma_p, gamma_p, gamma_p, gamma_r, gamma_r, gamma_r];
        let loss_node = tape.sq_loss(eps_pred, target, &col_weights, &graph.link_nodes.mask);
        let loss = tape.value(loss_node).data[0];
        let grads = tape.backward(loss_node)?;
        let mut flat = vec![0.0; self.params.len()];
        for (tensor, node) in self.layout.iter().zip(&param_nodes) {
            // Parameters nothing depends on (the last layer's edge update
            // feeds no later computation) keep an exactly zero gradient.
            let Some(g) = grads[node.0].as_ref() else { continue };
            let dst = &mut flat[tensor.offset..tensor.offset + tensor.rows * tensor.cols];
            dst.copy_from_slice(&g.data);
            if dst.iter().any(|x| !x.is_finite()) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient in parameter {}",
                    tensor.name
                )));
            }
        }
        Ok((loss, flat))
    }

    /// Records the whole forward computation on a tape. With `with_grads`
    /// the parameters become gradient leaves (one node per layout tensor,
    /// in layout order); otherwise they are constants.
    fn build_tape(
        &self,
        graph: &TroGraph,
        t: usize,
        with_grads: bool,
    ) -> Result<(Tape, NodeId, Vec<NodeId>)> {
        let cfg = &self.config;
        let (l, p, d) = (cfg.l_pad, cfg.p, cfg.d);
        if graph.link_nodes.slot_count() != l || graph.object_nodes.patch_count() != p {
            return Err(Error::invalid(format!(
                "graph has {} link slots and {} patches, model wants {l} and {p}",
                graph.link_nodes.slot_count(),
                graph.object_nodes.patch_count()
            )));
        }
        if t == 0 || t > cfg.t_max {
            return Err(Error::invalid(format!(
                "step must lie in 1..={}, got {t}",
                cfg.t_max
            )));
        }
        let mask = &graph.link_nodes.mask;

        let mut tape = Tape::new();
        let mut param_nodes = Vec::with_capacity(self.layout.len());
        for tensor in &self.layout {
            let value = Mat::from_vec(
                tensor.rows,
                tensor.cols,
                self.params[tensor.offset..tensor.offset + tensor.rows * tensor.cols].to_vec(),
            );
            param_nodes.push(if with_grads { tape.param(value) } else { tape.constant(value) });
        }
        let pn = |name: &str| -> NodeId {
            let idx = self
                .layout
                .iter()
                .position(|t| t.name == name)
                .unwrap_or_else(|| panic!("unknown tensor {name}"));
            param_nodes[idx]
        };

        // Raw graph tensors.
        let mut obj_raw = Mat::zeros(p, OBJECT_RAW_DIM);
        for i in 0..p {
            let row = obj_raw.row_mut_slice(i);
            row[..3].copy_from_slice(&graph.object_nodes.centers[i]);
            row[3] = graph.object_nodes.scale;
            row[4..].copy_from_slice(&graph.object_nodes.features[i]);
        }
        let mut link_raw = Mat::zeros(l, LINK_RAW_DIM);
        for j in 0..l {
            let row = link_raw.row_mut_slice(j);
            row[..6].copy_from_slice(&graph.link_nodes.poses[j]);
            row[6..].copy_from_slice(&graph.link_nodes.geom_embed[j]);
        }
        let mut or_raw = Mat::zeros(l * p, 6);
        for j in 0..l {
            for i in 0..p {
                or_raw
                    .row_mut_slice(j * p + i)
                    .copy_from_slice(&graph.edges.object_link[i][j]);
            }
        }
        let mut rr_raw = Mat::zeros(l * l, 6);
        for j in 0..l {
            for k in 0..l {
                rr_raw
                    .row_mut_slice(j * l + k)
                    .copy_from_slice(&graph.edges.rr_ordered(j, k, l));
            }
        }
        let obj_raw = tape.constant(obj_raw);
        let link_raw = tape.constant(link_raw);
        let or_raw = tape.constant(or_raw);
        let rr_raw = tape.constant(rr_raw);

        // Timestamp embedding: sinusoidal code refined by a two-layer
        // perceptron, added to every token row.
        let sincos = tape.constant(Mat::from_vec(1, d, sinusoidal_embedding(t, d)));
        let th = tape.matmul(sincos, pn("time.w1"));
        let th = tape.add_bias_row(th, pn("time.b1"));
        let th = tape.silu(th);
        let th = tape.matmul(th, pn("time.w2"));
        let time_emb = tape.add_bias_row(th, pn("time.b2"));

        let encode = |tape: &mut Tape, raw: NodeId, w: NodeId, b: NodeId| {
            let z = tape.matmul(raw, w);
            let z = tape.add_bias_row(z, b);
            tape.add_bias_row(z, time_emb)
        };
        let z_obj = encode(&mut tape, obj_raw, pn("enc_obj.w"), pn("enc_obj.b"));
        let mut z_link = encode(&mut tape, link_raw, pn("enc_link.w"), pn("enc_link.b"));
        let mut z_or = encode(&mut tape, or_raw, pn("enc_or.w"), pn("enc_or.b"));
        let mut z_rr = encode(&mut tape, rr_raw, pn("enc_rr.w"), pn("enc_rr.b"));

        // All object patches are live attention sources; link sources obey
        // the row mask.
        let or_active = vec![true; l * p];
        let mut rr_active = vec![false; l * l];
        for j in 0..l {
            for k in 0..l {
                rr_active[j * l + k] = mask[k];
            }
        }

        let mut per_layer = Vec::with_capacity(cfg.layers);
        for layer in 0..cfg.layers {
            let or_base = format!("layer{layer}.or");
            let (x, e) = attention_block(
                &mut tape,
                BlockIo { x_tgt: z_link, x_src: z_obj, edges: z_or, block: p, active: &or_active },
                BlockParams::resolve(&or_base, &pn),
                d,
            );
            z_link = x;
            z_or = e;

            let rr_base = format!("layer{layer}.rr");
            let (x, e) = attention_block(
                &mut tape,
                BlockIo {
                    x_tgt: z_link,
                    x_src: z_link,
                    edges: z_rr,
                    block: l,
                    active: &rr_active,
                },
                BlockParams::resolve(&rr_base, &pn),
                d,
            );
            z_link = x;
            z_rr = e;
            per_layer.push(z_link);
        }

        let head_in = tape.concat_cols(&per_layer);
        let head = tape.matmul(head_in, pn("head.w"));
        let head = tape.add_bias_row(head, pn("head.b"));
        let eps_pred = tape.zero_rows(head, mask);
        Ok((tape, eps_pred, param_nodes))
    }
}

struct BlockIo<'a> {
    x_tgt: NodeId,
    x_src: NodeId,
    edges: NodeId,
    /// Sources per target; pair row order is target-major.
    block: usize,
    active: &'a [bool],
}

struct BlockParams {
    wq: NodeId,
    wk: NodeId,
    wv: NodeId,
    node_w1: NodeId,
    node_b1: NodeId,
    node_w2: NodeId,
    node_b2: NodeId,
    edge_w1: NodeId,
    edge_b1: NodeId,
    edge_w2: NodeId,
    edge_b2: NodeId,
}

impl BlockParams {
    fn resolve(base: &str, pn: &impl Fn(&str) -> NodeId) -> Self {
        BlockParams {
            wq: pn(&format!("{base}.wq")),
            wk: pn(&format!("{base}.wk")),
            wv: pn(&format!("{base}.wv")),
            node_w1: pn(&format!("{base}.node.w1")),
            node_b1: pn(&format!("{base}.node.b1")),
            node_w2: pn(&format!("{base}.node.w2")),
            node_b2: pn(&format!("{base}.node.b2")),
            edge_w1: pn(&format!("{base}.edge.w1")),
            edge_b1: pn(&format!("{base}.edge.b1")),
            edge_w2: pn(&format!("{base}.edge.w2")),
            edge_b2: pn(&format!("{base}.edge.b2")),
        }
    }
}

/// One attention block: masked softmax over per-pair scores, per-pair value
/// vectors from target, source, and edge tokens, then perceptron updates of
/// the target tokens (with a residual into the perceptron) and edge tokens.
fn attention_block(
    tape: &mut Tape,
    io: BlockIo<'_>,
    params: BlockParams,
    d: usize,
) -> (NodeId, NodeId) {
    let n_tgt = tape.value(io.x_tgt).rows;
    let xt_n = tape.layer_norm_rows(io.x_tgt, LAYER_NORM_EPS);
    let xs_n = tape.layer_norm_rows(io.x_src, LAYER_NORM_EPS);
    let e_n = tape.layer_norm_rows(io.edges, LAYER_NORM_EPS);

    let q = tape.matmul(xt_n, params.wq);
    let k = tape.matmul(xs_n, params.wk);
    let qp = tape.repeat_rows(q, io.block);
    let kp = tape.tile_rows(k, n_tgt);
    let qk = tape.mul_elem(qp, kp);
    let scores = tape.row_sums(qk);
    let scores = tape.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = tape.softmax_blocks(scores, io.block, io.active);

    let xt_rep = tape.repeat_rows(xt_n, io.block);
    let xs_tile = tape.tile_rows(xs_n, n_tgt);
    let v_in = tape.concat_cols(&[xt_rep, xs_tile, e_n]);
    let v = tape.matmul(v_in, params.wv);

    let weighted = tape.scale_rows(v, weights);
    let attn = tape.sum_row_blocks(weighted, io.block);

    let mid = tape.add(io.x_tgt, attn);
    let h = tape.matmul(mid, params.node_w1);
    let h = tape.add_bias_row(h, params.node_b1);
    let h = tape.silu(h);
    let h = tape.matmul(h, params.node_w2);
    let x_new = tape.add_bias_row(h, params.node_b2);

    let e_in = tape.concat_cols(&[v, io.edges]);
    let he = tape.matmul(e_in, params.edge_w1);
    let he = tape.add_bias_row(he, params.edge_b1);
    let he = tape.silu(he);
    let he = tape.matmul(he, params.edge_w2);
    let e_new = tape.add_bias_row(he, params.edge_b2);

    (x_new, e_new)
}

fn sinusoidal_embedding(t: usize, d: usize) -> Vec<f64> {
    let mut out = vec![0.0; d];
    let half = d / 2;
    for k in 0..half {
        let freq = (10_000.0f64).powf(-(k as f64) / half as f64);
        let arg = t as f64 * freq;
        out[2 * k] = arg.sin();
        out[2 * k + 1] = arg.cos();
    }
    out
}

impl Mat {
    fn row_mut_slice(&mut self, r: usize) -> &mut [f64] {
        let c = self.cols;
        &mut self.data[r * c..(r + 1) * c]
    }
}

impl NoisePredictor for DenoiserModel {
    fn predict_noise(&self, graph: &TroGraph, t: usize) -> Result<Vec<[f64; 6]>> {
        self.forward(graph, t)
    }
}

/// Noise-prediction loss for one graph: position and rotation columns
/// weighted separately, summed over unmasked rows.
pub fn noise_loss(
    eps_true: &[[f64; 6]],
    eps_pred: &[[f64; 6]],
    mask: &[bool],
    gamma_p: f64,
    gamma_r: f64,
) -> Result<f64> {
    if eps_true.len() != eps_pred.len() || eps_true.len() != mask.len() {
        return Err(Error::invalid(format!(
            "row counts disagree: {} true, {} predicted, {} mask",
            eps_true.len(),
            eps_pred.len(),
            mask.len()
        )));
    }
    if gamma_p < 0.0 || gamma_r < 0.0 {
        return Err(Error::invalid("loss weights must be non-negative"));
    }
    let mut acc = 0.0;
    for ((a, b), &keep) in eps_true.iter().zip(eps_pred).zip(mask) {
        if !keep {
            continue;
        }
        for c in 0..6 {
            let w = if c < 3 { gamma_p } else { gamma_r };
            let diff = a[c] - b[c];
            acc += w * diff * diff;
        }
    }
    Ok(acc)
}

/// The closed-form optimal noise predictor for a single-graph dataset:
/// `eps*(psi_t, t) = (psi_t - sqrt(abar_t) psi_0) / sqrt(1 - abar_t)`.
///
/// Plugged into the sampler it recovers `psi_0` exactly, which makes it the
/// reference the sampler is verified against, independently of training.
pub struct OracleDenoiser {
    psi0: Vec<[f64; 6]>,
    schedule: DiffusionSchedule,
}

impl OracleDenoiser {
    pub fn new(clean: &TroGraph, schedule: DiffusionSchedule) -> Self {
        OracleDenoiser { psi0: clean.link_nodes.poses.clone(), schedule }
    }
}

impl NoisePredictor for OracleDenoiser {
    fn predict_noise(&self, graph: &TroGraph, t: usize) -> Result<Vec<[f64; 6]>> {
        if t == 0 || t > self.schedule.t_count() {
            return Err(Error::invalid(format!(
                "oracle noise is undefined outside 1..={}, got {t}",
                self.schedule.t_count()
            )));
        }
        if graph.link_nodes.slot_count() != self.psi0.len() {
            return Err(Error::invalid(format!(
                "graph has {} link slots, oracle was built for {}",
                graph.link_nodes.slot_count(),
                self.psi0.len()
            )));
        }
        let a = self.schedule.alpha_bar(t);
        let signal = a.sqrt();
        let noise = (1.0 - a).sqrt();
        let mut out = vec![[0.0; 6]; self.psi0.len()];
        for j in 0..out.len() {
            if graph.link_nodes.mask[j] {
                for c in 0..6 {
                    out[j][c] =
                        (graph.link_nodes.poses[j][c] - signal * self.psi0[j][c]) / noise;
                }
            }
        }
        Ok(out)
    }
}
