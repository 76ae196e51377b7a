//! The propagation rules. Each cell is a free function over resolved
//! parameter handles so tests can drive it with hand-built parameters; the
//! [`Model`](super::Model) stack resolves named parameters and calls these.
//!
//! Shared shape conventions: `h` is `[num_nodes x d_in]`, the result is
//! `[num_nodes x d_out]`, edge lists come from the graph in declared type
//! order, and messages flow source -> target.

use crate::error::{Error, Result};
use crate::graph::{NormCounts, TypedGraph};
use crate::tensor::{recurrent_cell, RecurrentKind, RecurrentParams, Scalar, Tape, TensorId};

use super::{Activation, FilmMode};

/// A linear map with optional bias.
#[derive(Debug, Clone, Copy)]
pub struct LinearParams {
    pub weight: TensorId,
    pub bias: Option<TensorId>,
}

impl LinearParams {
    pub fn forward<F: Scalar>(&self, tape: &mut Tape<F>, x: TensorId) -> Result<TensorId> {
        let y = tape.matmul(x, self.weight)?;
        match self.bias {
            Some(b) => tape.add(y, b),
            None => Ok(y),
        }
    }
}

/// A multilayer perceptron; an empty layer list is the identity (test hook).
/// The activation sits between layers, the last layer stays linear.
#[derive(Debug, Clone)]
pub struct MlpParams {
    pub layers: Vec<LinearParams>,
    pub activation: Activation,
}

impl MlpParams {
    pub fn identity() -> Self {
        MlpParams {
            layers: Vec::new(),
            activation: Activation::Identity,
        }
    }
}

pub fn mlp_forward<F: Scalar>(tape: &mut Tape<F>, mlp: &MlpParams, x: TensorId) -> Result<TensorId> {
    let mut h = x;
    for (i, layer) in mlp.layers.iter().enumerate() {
        h = layer.forward(tape, h)?;
        if i + 1 < mlp.layers.len() {
            h = mlp.activation.apply(tape, h);
        }
    }
    Ok(h)
}

/// Per-type weights for one attention head.
#[derive(Debug, Clone)]
pub struct RgatHeadParams {
    /// `W_l` per edge type, `[d_in x head_dim]`.
    pub weights: Vec<TensorId>,
    /// Attention vector per edge type, `[2*head_dim x 1]`.
    pub alphas: Vec<TensorId>,
}

/// Per-type parameters of a FiLM layer.
#[derive(Debug, Clone)]
pub struct FilmTypeParams {
    /// Message weights `W_l`, `[d_in x d_out]`.
    pub weight: TensorId,
    /// Hypernet producing `(beta, gamma)` stacked as `[d_in x 2*d_out]`.
    pub hyper: LinearParams,
}

/// The post-aggregation chain for FiLM mode `before`.
#[derive(Debug, Clone)]
pub enum FilmPostParams {
    Identity,
    Tanh,
    Linear(LinearParams),
    LayerNorm { gain: TensorId, bias: TensorId },
}

fn sources(graph: &TypedGraph, l: usize) -> Vec<usize> {
    graph.edges[l].iter().map(|&(s, _)| s).collect()
}

fn targets(graph: &TypedGraph, l: usize) -> Vec<usize> {
    graph.edges[l].iter().map(|&(_, t)| t).collect()
}

fn zeros<F: Scalar>(tape: &mut Tape<F>, rows: usize, cols: usize) -> Result<TensorId> {
    tape.constant(vec![F::zero(); rows * cols], vec![rows, cols])
}

fn require_self_loops(graph: &TypedGraph, cell: &str) -> Result<()> {
    if !graph.has_self_loops() {
        return Err(Error::Graph(format!(
            "{cell} requires the SELF edge type; call augment_self_loops first"
        )));
    }
    Ok(())
}

/// Per-edge normalisation factors `1 / c_{target, l}`. Every existing edge has
/// a count of at least one, so the division is always defined.
fn inv_count_factors<F: Scalar>(graph: &TypedGraph, counts: &NormCounts, l: usize) -> Vec<F> {
    graph.edges[l]
        .iter()
        .map(|&(_, t)| F::c(1.0 / counts.get(t, l) as f64))
        .collect()
}

/// Sum per-type aggregated messages into `[n x d_out]`. The closure produces
/// the per-edge message matrix `[E_l x d_out]` for one type; `normalise`
/// divides each message by the target's incoming count of that type.
fn sum_typed_messages<F, M>(
    tape: &mut Tape<F>,
    graph: &TypedGraph,
    d_out: usize,
    normalise: Option<&NormCounts>,
    mut per_type: M,
) -> Result<TensorId>
where
    F: Scalar,
    M: FnMut(&mut Tape<F>, usize) -> Result<TensorId>,
{
    let n = graph.num_nodes;
    let mut acc: Option<TensorId> = None;
    for l in 0..graph.edge_types.len() {
        let mut msgs = per_type(tape, l)?;
        if let Some(counts) = normalise {
            let factors = inv_count_factors::<F>(graph, counts, l);
            msgs = tape.scale_rows(msgs, &factors)?;
        }
        let agg = tape.segment_sum(msgs, &targets(graph, l), n)?;
        acc = Some(match acc {
            Some(a) => tape.add(a, agg)?,
            None => agg,
        });
    }
    match acc {
        Some(a) => Ok(a),
        None => zeros(tape, n, d_out),
    }
}

/// Gated cell: aggregate `W_l h_u` over incoming edges, then combine with the
/// old state through a recurrent unit. Runs on the unaugmented graph.
#[allow(clippy::too_many_arguments)]
pub fn ggnn_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    aux: Option<TensorId>,
    graph: &TypedGraph,
    weights: &[TensorId],
    rec_kind: RecurrentKind,
    rec: &RecurrentParams,
) -> Result<(TensorId, Option<TensorId>)> {
    if graph.has_self_loops() {
        return Err(Error::Graph(
            "GGNN runs on the unaugmented graph; SELF loops would double-count node state".into(),
        ));
    }
    let d_out = tape.shape(h)[1];
    let msg = sum_typed_messages(tape, graph, d_out, None, |tape, l| {
        let wh = tape.matmul(h, weights[l])?;
        tape.gather_rows(wh, &sources(graph, l))
    })?;
    recurrent_cell(tape, rec_kind, h, aux, msg, rec)
}

/// Convolution: normalised per-type sums of `W_l h_u` under a non-linearity.
pub fn rgcn_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    counts: &NormCounts,
    weights: &[TensorId],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "R-GCN")?;
    let d_out = tape.shape(weights[0])[1];
    let agg = sum_typed_messages(tape, graph, d_out, Some(counts), |tape, l| {
        let wh = tape.matmul(h, weights[l])?;
        tape.gather_rows(wh, &sources(graph, l))
    })?;
    Ok(activation.apply(tape, agg))
}

/// Attention: per head, score every incoming edge with
/// `LeakyReLU(alpha_l . (W_l h_u || W_l h_v))`, softmax over each target's
/// incoming edges (all types pooled), and sum the weighted messages. Head
/// outputs are concatenated.
pub fn rgat_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    heads: &[RgatHeadParams],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "R-GAT")?;
    let n = graph.num_nodes;
    let mut head_outputs = Vec::with_capacity(heads.len());
    for head in heads {
        let mut msg_parts = Vec::new();
        let mut logit_parts = Vec::new();
        let mut pooled_targets = Vec::new();
        for l in 0..graph.edge_types.len() {
            let wh = tape.matmul(h, head.weights[l])?;
            let src_msgs = tape.gather_rows(wh, &sources(graph, l))?;
            let tgt_msgs = tape.gather_rows(wh, &targets(graph, l))?;
            let pair = tape.concat_cols(&[src_msgs, tgt_msgs])?;
            let scores = tape.matmul(pair, head.alphas[l])?;
            msg_parts.push(src_msgs);
            logit_parts.push(scores);
            pooled_targets.extend(targets(graph, l));
        }
        let msgs = tape.concat_rows(&msg_parts)?;
        let logits_col = tape.concat_rows(&logit_parts)?;
        let e = tape.shape(logits_col)[0];
        let logits = tape.reshape(logits_col, vec![e])?;
        let logits = tape.leaky_relu(logits);
        let att = tape.segment_softmax(logits, &pooled_targets, n)?;
        let weighted = tape.mul_col(msgs, att)?;
        let agg = tape.segment_sum(weighted, &pooled_targets, n)?;
        head_outputs.push(activation.apply(tape, agg));
    }
    if head_outputs.len() == 1 {
        Ok(head_outputs[0])
    } else {
        tape.concat_cols(&head_outputs)
    }
}

/// Isomorphism-style cell: unnormalised sums of per-type MLPs of the source
/// state. The `(1 + eps)` self-weighting lives inside the SELF-type MLP.
pub fn rgin_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    mlps: &[MlpParams],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "R-GIN")?;
    let d_out = match mlps.first().and_then(|m| m.layers.last()) {
        Some(last) => tape.shape(last.weight)[1],
        None => tape.shape(h)[1], // identity MLPs keep the input width
    };
    let agg = sum_typed_messages(tape, graph, d_out, None, |tape, l| {
        let m = mlp_forward(tape, &mlps[l], h)?;
        tape.gather_rows(m, &sources(graph, l))
    })?;
    Ok(activation.apply(tape, agg))
}

/// Messages from the concatenation of source and target state, normalised
/// like R-GCN. A single-linear-layer MLP gives GNN-MLP0, one hidden layer
/// gives GNN-MLP1.
pub fn gnn_mlp_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    counts: &NormCounts,
    mlps: &[MlpParams],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "GNN-MLP")?;
    let d_out = match mlps.first().and_then(|m| m.layers.last()) {
        Some(last) => tape.shape(last.weight)[1],
        None => tape.shape(h)[1],
    };
    let agg = sum_typed_messages(tape, graph, d_out, Some(counts), |tape, l| {
        let hs = tape.gather_rows(h, &sources(graph, l))?;
        let ht = tape.gather_rows(h, &targets(graph, l))?;
        let pair = tape.concat_cols(&[hs, ht])?;
        mlp_forward(tape, &mlps[l], pair)
    })?;
    Ok(activation.apply(tape, agg))
}

/// Hypernets per edge type for the dynamic convolution. With one entry the
/// update function is shared across chunks; `chunk_local` feeds each chunk's
/// hypernet only that chunk of the target state.
#[derive(Debug, Clone)]
pub struct RgdcnTypeParams {
    pub per_chunk: Vec<LinearParams>,
    pub chunk_local: bool,
}

/// Dynamic convolution: the per-edge linear transform of each chunk is
/// produced by a hypernet of the target representation.
pub fn rgdcn_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    chunks: usize,
    hypernets: &[RgdcnTypeParams],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "RGDCN")?;
    let n = graph.num_nodes;
    let d = tape.shape(h)[1];
    if chunks == 0 || d % chunks != 0 {
        return Err(Error::Config(format!(
            "RGDCN needs hidden size divisible by chunk count, got {d} / {chunks}"
        )));
    }
    let k = d / chunks;
    let mut chunk_outputs = Vec::with_capacity(chunks);
    for c in 0..chunks {
        let h_chunk = tape.slice_cols(h, c * k, k)?;
        let mut acc: Option<TensorId> = None;
        for (l, hyper) in hypernets.iter().enumerate() {
            let f = &hyper.per_chunk[c.min(hyper.per_chunk.len() - 1)];
            let f_in = if hyper.chunk_local { h_chunk } else { h };
            let mats = f.forward(tape, f_in)?; // [n x k*k]
            let edge_mats = tape.gather_rows(mats, &targets(graph, l))?;
            let edge_vecs = tape.gather_rows(h_chunk, &sources(graph, l))?;
            let msg = tape.rowwise_matvec(edge_mats, edge_vecs)?;
            let agg = tape.segment_sum(msg, &targets(graph, l), n)?;
            acc = Some(match acc {
                Some(a) => tape.add(a, agg)?,
                None => agg,
            });
        }
        let summed = match acc {
            Some(a) => a,
            None => zeros(tape, n, k)?,
        };
        chunk_outputs.push(activation.apply(tape, summed));
    }
    if chunk_outputs.len() == 1 {
        Ok(chunk_outputs[0])
    } else {
        tape.concat_cols(&chunk_outputs)
    }
}

/// Feature-wise linear modulation: the target node's representation computes
/// an element-wise affine transform `gamma . W_l h_u + beta` of each incoming
/// message. Mode `after` applies the non-linearity to the aggregated sum;
/// mode `before` applies it per message and finishes with the `post` chain.
pub fn gnn_film_layer<F: Scalar>(
    tape: &mut Tape<F>,
    h: TensorId,
    graph: &TypedGraph,
    types: &[FilmTypeParams],
    mode: FilmMode,
    post: &[FilmPostParams],
    activation: Activation,
) -> Result<TensorId> {
    require_self_loops(graph, "GNN-FiLM")?;
    let d_out = tape.shape(types[0].weight)[1];
    let agg = sum_typed_messages(tape, graph, d_out, None, |tape, l| {
        let p = &types[l];
        let wh = tape.matmul(h, p.weight)?;
        let gout = p.hyper.forward(tape, h)?; // [n x 2*d_out], (beta, gamma)
        let beta = tape.slice_cols(gout, 0, d_out)?;
        let gamma = tape.slice_cols(gout, d_out, d_out)?;
        let tgt = targets(graph, l);
        let gamma_e = tape.gather_rows(gamma, &tgt)?;
        let beta_e = tape.gather_rows(beta, &tgt)?;
        let msg_e = tape.gather_rows(wh, &sources(graph, l))?;
        let modulated = tape.mul(gamma_e, msg_e)?;
        let msg = tape.add(modulated, beta_e)?;
        match mode {
            FilmMode::After => Ok(msg),
            FilmMode::Before => Ok(activation.apply(tape, msg)),
        }
    })?;
    match mode {
        FilmMode::After => Ok(activation.apply(tape, agg)),
        FilmMode::Before => {
            let mut out = agg;
            for step in post {
                out = match step {
                    FilmPostParams::Identity => out,
                    FilmPostParams::Tanh => tape.tanh(out),
                    FilmPostParams::Linear(p) => p.forward(tape, out)?,
                    FilmPostParams::LayerNorm { gain, bias } => {
                        tape.layer_norm(out, *gain, *bias)?
                    }
                };
            }
            Ok(out)
        }
    }
}
