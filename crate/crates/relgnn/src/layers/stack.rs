//! Builds a stack of propagation steps from a [`StackConfig`] and owns the
//! canonical parameter naming used by checkpoints.

use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::graph::{augment_self_loops, norm_counts, NormCounts, TypedGraph, SELF_LOOP};
use crate::rng::StreamKey;
use crate::tensor::{
    recurrent_param_specs, BoundParams, Init, ParamSpec, ParameterStore, RecurrentParams, Tape,
    TensorId,
};

use super::cells::{
    self, FilmPostParams, FilmTypeParams, LinearParams, MlpParams, RgatHeadParams, RgdcnTypeParams,
};
use super::{Activation, CellKind, FilmMode, FilmPostOp, RgdcnTying, StackConfig};

/// A graph made ready for a specific model: self loops applied when the cell
/// keeps state through them, and incoming-edge counts precomputed.
#[derive(Debug, Clone)]
pub struct PreparedGraph {
    pub graph: TypedGraph,
    pub counts: NormCounts,
}

/// A configured stack: knows its parameter names and how to run a forward
/// pass; the parameter values themselves live in a [`ParameterStore`].
#[derive(Debug, Clone)]
pub struct Model {
    pub config: StackConfig,
    /// Edge-type vocabulary the model was built against, including SELF when
    /// the cell requires it. Incoming graphs must match exactly.
    pub edge_types: Vec<String>,
    pub feature_dim: usize,
    /// Input width of each propagation step.
    layer_inputs: Vec<usize>,
}

fn linear_specs(prefix: &str, d_in: usize, d_out: usize) -> Vec<ParamSpec> {
    vec![
        ParamSpec::new(format!("{prefix}/weight"), vec![d_in, d_out], Init::Glorot),
        ParamSpec::new(format!("{prefix}/bias"), vec![d_out], Init::Zeros),
    ]
}

fn resolve_linear(bound: &BoundParams, prefix: &str) -> Result<LinearParams> {
    Ok(LinearParams {
        weight: bound.id(&format!("{prefix}/weight"))?,
        bias: Some(bound.id(&format!("{prefix}/bias"))?),
    })
}

fn mlp_specs(prefix: &str, dims: &[usize]) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for i in 0..dims.len() - 1 {
        specs.extend(linear_specs(&format!("{prefix}/{i}"), dims[i], dims[i + 1]));
    }
    specs
}

fn resolve_mlp(
    bound: &BoundParams,
    prefix: &str,
    num_layers: usize,
    activation: Activation,
) -> Result<MlpParams> {
    let mut layers = Vec::with_capacity(num_layers);
    for i in 0..num_layers {
        layers.push(resolve_linear(bound, &format!("{prefix}/{i}"))?);
    }
    Ok(MlpParams { layers, activation })
}

impl Model {
    /// Validate the configuration against a dataset's feature width and edge
    /// vocabulary, appending the SELF type when the cell needs it.
    pub fn build(config: StackConfig, feature_dim: usize, dataset_edge_types: &[String]) -> Result<Model> {
        if config.num_layers == 0 {
            return Err(Error::Config("num_layers must be at least 1".into()));
        }
        if config.hidden_size == 0 {
            return Err(Error::Config("hidden_size must be positive".into()));
        }
        if !(config.input_dropout_keep_prob > 0.0 && config.input_dropout_keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "graph_layer_input_dropout_keep_prob must be in (0, 1], got {}",
                config.input_dropout_keep_prob
            )));
        }
        if config.dense_every == 0 || config.res_every == 0 {
            return Err(Error::Config("dense_layers and res_connection periods must be >= 1".into()));
        }
        let kind = config.cell.kind;
        let mut edge_types = dataset_edge_types.to_vec();
        if kind.needs_self_loop() && !edge_types.iter().any(|t| t == SELF_LOOP) {
            edge_types.push(SELF_LOOP.to_string());
        }
        if !kind.needs_self_loop() && edge_types.iter().any(|t| t == SELF_LOOP) {
            return Err(Error::Config(
                "GGNN runs on the unaugmented graph but the dataset declares SELF edges".into(),
            ));
        }

        let first_in = if config.input_projection {
            config.hidden_size
        } else {
            feature_dim
        };
        let mut layer_inputs = vec![config.hidden_size; config.num_layers];
        layer_inputs[0] = first_in;

        if matches!(kind, CellKind::Ggnn | CellKind::Rgdcn) && first_in != config.hidden_size {
            return Err(Error::Config(format!(
                "{} needs layer input == hidden size; enable input_projection or match dims ({first_in} vs {})",
                kind.as_str(),
                config.hidden_size
            )));
        }
        if config.res_every <= config.num_layers && first_in != config.hidden_size {
            return Err(Error::Config(
                "residual connection across a dimension change; enable input_projection".into(),
            ));
        }
        if kind == CellKind::Rgat && config.hidden_size % config.cell.num_heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} attention heads",
                config.hidden_size, config.cell.num_heads
            )));
        }
        if kind == CellKind::Rgdcn && config.hidden_size % config.cell.rgdcn_chunks != 0 {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} chunks",
                config.hidden_size, config.cell.rgdcn_chunks
            )));
        }
        if kind == CellKind::GnnFilm
            && config.cell.film_mode == FilmMode::After
            && !config.cell.film_post.is_empty()
            && config.cell.film_post != [FilmPostOp::Identity]
        {
            return Err(Error::Config(
                "film_post applies only to film_mode 'before'".into(),
            ));
        }

        Ok(Model {
            config,
            edge_types,
            feature_dim,
            layer_inputs,
        })
    }

    /// Declarations for every learnable tensor, in canonical order.
    pub fn param_specs(&self) -> Vec<ParamSpec> {
        let cfg = &self.config;
        let hidden = cfg.hidden_size;
        let mut specs = Vec::new();
        if cfg.input_projection {
            specs.extend(linear_specs("input_proj", self.feature_dim, hidden));
        }
        for (i, &d_in) in self.layer_inputs.iter().enumerate() {
            let lp = format!("layer{i}");
            match cfg.cell.kind {
                CellKind::Ggnn => {
                    for t in &self.edge_types {
                        specs.push(ParamSpec::new(
                            format!("{lp}/type_{t}/W"),
                            vec![d_in, hidden],
                            Init::Glorot,
                        ));
                    }
                    specs.extend(recurrent_param_specs(cfg.cell.rnn_cell, &format!("{lp}/cell"), hidden));
                }
                CellKind::Rgcn => {
                    for t in &self.edge_types {
                        specs.push(ParamSpec::new(
                            format!("{lp}/type_{t}/W"),
                            vec![d_in, hidden],
                            Init::Glorot,
                        ));
                    }
                }
                CellKind::Rgat => {
                    let head_dim = hidden / cfg.cell.num_heads;
                    for k in 0..cfg.cell.num_heads {
                        for t in &self.edge_types {
                            specs.push(ParamSpec::new(
                                format!("{lp}/head{k}/type_{t}/W"),
                                vec![d_in, head_dim],
                                Init::Glorot,
                            ));
                            specs.push(ParamSpec::new(
                                format!("{lp}/head{k}/type_{t}/alpha"),
                                vec![2 * head_dim, 1],
                                Init::Glorot,
                            ));
                        }
                    }
                }
                CellKind::Rgin => {
                    for t in &self.edge_types {
                        specs.extend(mlp_specs(&format!("{lp}/type_{t}/mlp"), &[d_in, hidden, hidden]));
                    }
                }
                CellKind::GnnMlp0 => {
                    for t in &self.edge_types {
                        specs.extend(mlp_specs(&format!("{lp}/type_{t}/mlp"), &[2 * d_in, hidden]));
                    }
                }
                CellKind::GnnMlp1 => {
                    for t in &self.edge_types {
                        specs.extend(mlp_specs(&format!("{lp}/type_{t}/mlp"), &[2 * d_in, hidden, hidden]));
                    }
                }
                CellKind::Rgdcn => {
                    let chunks = cfg.cell.rgdcn_chunks;
                    let k = hidden / chunks;
                    for t in &self.edge_types {
                        match cfg.cell.rgdcn_tying {
                            RgdcnTying::Shared => {
                                specs.extend(linear_specs(&format!("{lp}/type_{t}/f"), d_in, k * k));
                            }
                            RgdcnTying::PerChunk => {
                                for c in 0..chunks {
                                    specs.extend(linear_specs(
                                        &format!("{lp}/type_{t}/chunk{c}/f"),
                                        d_in,
                                        k * k,
                                    ));
                                }
                            }
                            RgdcnTying::ChunkLocal => {
                                for c in 0..chunks {
                                    specs.extend(linear_specs(
                                        &format!("{lp}/type_{t}/chunk{c}/f"),
                                        k,
                                        k * k,
                                    ));
                                }
                            }
                        }
                    }
                }
                CellKind::GnnFilm => {
                    for t in &self.edge_types {
                        specs.push(ParamSpec::new(
                            format!("{lp}/type_{t}/W"),
                            vec![d_in, hidden],
                            Init::Glorot,
                        ));
                        specs.push(ParamSpec::new(
                            format!("{lp}/type_{t}/film_g/weight"),
                            vec![d_in, 2 * hidden],
                            Init::Glorot,
                        ));
                        // beta half starts at zero, gamma half at one
                        specs.push(ParamSpec::new(
                            format!("{lp}/type_{t}/film_g/bias"),
                            vec![2 * hidden],
                            Init::HalfZeroHalfOne,
                        ));
                    }
                    if cfg.cell.film_mode == FilmMode::Before {
                        for (j, step) in cfg.cell.film_post.iter().enumerate() {
                            match step {
                                FilmPostOp::Linear => {
                                    specs.extend(linear_specs(&format!("{lp}/film_post/{j}"), hidden, hidden));
                                }
                                FilmPostOp::LayerNorm => {
                                    specs.push(ParamSpec::new(
                                        format!("{lp}/film_post/{j}/gain"),
                                        vec![hidden],
                                        Init::Ones,
                                    ));
                                    specs.push(ParamSpec::new(
                                        format!("{lp}/film_post/{j}/bias"),
                                        vec![hidden],
                                        Init::Zeros,
                                    ));
                                }
                                FilmPostOp::Identity | FilmPostOp::Tanh => {}
                            }
                        }
                    }
                }
            }
            if cfg.layer_norm {
                specs.push(ParamSpec::new(format!("{lp}/ln/gain"), vec![hidden], Init::Ones));
                specs.push(ParamSpec::new(format!("{lp}/ln/bias"), vec![hidden], Init::Zeros));
            }
            if (i + 1) % cfg.dense_every == 0 {
                specs.extend(linear_specs(&format!("{lp}/dense"), hidden, hidden));
            }
        }
        specs
    }

    /// Fresh Glorot/zeros-initialised store for this model.
    pub fn init_store(&self, stream: &StreamKey) -> Result<ParameterStore> {
        ParameterStore::from_specs(&self.param_specs(), &stream.child("init"))
    }

    /// Attach SELF loops when the cell wants them and precompute counts. The
    /// graph's vocabulary must end up matching the model's exactly.
    pub fn prepare(&self, graph: &TypedGraph) -> Result<PreparedGraph> {
        let kind = self.config.cell.kind;
        let graph = if kind.needs_self_loop() && !graph.has_self_loops() {
            augment_self_loops(graph)?
        } else {
            graph.clone()
        };
        if graph.edge_types != self.edge_types {
            return Err(Error::Graph(format!(
                "graph edge types {:?} do not match model vocabulary {:?}",
                graph.edge_types, self.edge_types
            )));
        }
        if graph.feature_dim != self.feature_dim {
            return Err(Error::Graph(format!(
                "graph feature dim {} does not match model feature dim {}",
                graph.feature_dim, self.feature_dim
            )));
        }
        let counts = norm_counts(&graph);
        Ok(PreparedGraph { graph, counts })
    }

    /// Run the stack: returns the final `[num_nodes x hidden]` representations.
    pub fn forward(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        prepared: &PreparedGraph,
        training: bool,
        dropout_rng: &mut ChaCha8Rng,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let graph = &prepared.graph;
        let n = graph.num_nodes;
        let mut h = tape.constant(graph.node_features.clone(), vec![n, self.feature_dim])?;
        if cfg.input_projection {
            h = resolve_linear(bound, "input_proj")?.forward(tape, h)?;
        }
        // The LSTM flavour of the gated cell threads its cell state through
        // consecutive propagation steps, starting from zero.
        let mut aux: Option<TensorId> = if cfg.cell.rnn_cell.needs_aux_state() && cfg.cell.kind == CellKind::Ggnn
        {
            Some(tape.constant(vec![0.0; n * cfg.hidden_size], vec![n, cfg.hidden_size])?)
        } else {
            None
        };

        let mut residual_anchor = h;
        for i in 0..cfg.num_layers {
            if i % cfg.res_every == 0 {
                residual_anchor = h;
            }
            h = tape.dropout(h, cfg.input_dropout_keep_prob, dropout_rng, training)?;
            h = self.forward_cell(tape, bound, i, h, &mut aux, prepared)?;
            if cfg.layer_norm {
                let gain = bound.id(&format!("layer{i}/ln/gain"))?;
                let bias = bound.id(&format!("layer{i}/ln/bias"))?;
                h = tape.layer_norm(h, gain, bias)?;
            }
            if (i + 1) % cfg.res_every == 0 {
                h = tape.add(h, residual_anchor)?;
            }
            if (i + 1) % cfg.dense_every == 0 {
                let dense = resolve_linear(bound, &format!("layer{i}/dense"))?;
                h = dense.forward(tape, h)?;
                h = cfg.activation.apply(tape, h);
            }
        }
        Ok(h)
    }

    fn forward_cell(
        &self,
        tape: &mut Tape<f64>,
        bound: &BoundParams,
        i: usize,
        h: TensorId,
        aux: &mut Option<TensorId>,
        prepared: &PreparedGraph,
    ) -> Result<TensorId> {
        let cfg = &self.config;
        let graph = &prepared.graph;
        let lp = format!("layer{i}");
        let act = cfg.activation;
        match cfg.cell.kind {
            CellKind::Ggnn => {
                let weights = self.type_weights(bound, &lp)?;
                let rec = RecurrentParams::resolve(cfg.cell.rnn_cell, &format!("{lp}/cell"), bound)?;
                let (out, new_aux) =
                    cells::ggnn_layer(tape, h, *aux, graph, &weights, cfg.cell.rnn_cell, &rec)?;
                *aux = new_aux;
                Ok(out)
            }
            CellKind::Rgcn => {
                let weights = self.type_weights(bound, &lp)?;
                cells::rgcn_layer(tape, h, graph, &prepared.counts, &weights, act)
            }
            CellKind::Rgat => {
                let mut heads = Vec::with_capacity(cfg.cell.num_heads);
                for k in 0..cfg.cell.num_heads {
                    let mut weights = Vec::new();
                    let mut alphas = Vec::new();
                    for t in &self.edge_types {
                        weights.push(bound.id(&format!("{lp}/head{k}/type_{t}/W"))?);
                        alphas.push(bound.id(&format!("{lp}/head{k}/type_{t}/alpha"))?);
                    }
                    heads.push(RgatHeadParams { weights, alphas });
                }
                cells::rgat_layer(tape, h, graph, &heads, act)
            }
            CellKind::Rgin => {
                let mlps = self.type_mlps(bound, &lp, 2)?;
                cells::rgin_layer(tape, h, graph, &mlps, act)
            }
            CellKind::GnnMlp0 => {
                let mlps = self.type_mlps(bound, &lp, 1)?;
                cells::gnn_mlp_layer(tape, h, graph, &prepared.counts, &mlps, act)
            }
            CellKind::GnnMlp1 => {
                let mlps = self.type_mlps(bound, &lp, 2)?;
                cells::gnn_mlp_layer(tape, h, graph, &prepared.counts, &mlps, act)
            }
            CellKind::Rgdcn => {
                let chunks = cfg.cell.rgdcn_chunks;
                let mut hypernets = Vec::new();
                for t in &self.edge_types {
                    let (per_chunk, chunk_local) = match cfg.cell.rgdcn_tying {
                        RgdcnTying::Shared => {
                            (vec![resolve_linear(bound, &format!("{lp}/type_{t}/f"))?], false)
                        }
                        RgdcnTying::PerChunk => {
                            let mut v = Vec::with_capacity(chunks);
                            for c in 0..chunks {
                                v.push(resolve_linear(bound, &format!("{lp}/type_{t}/chunk{c}/f"))?);
                            }
                            (v, false)
                        }
                        RgdcnTying::ChunkLocal => {
                            let mut v = Vec::with_capacity(chunks);
                            for c in 0..chunks {
                                v.push(resolve_linear(bound, &format!("{lp}/type_{t}/chunk{c}/f"))?);
                            }
                            (v, true)
                        }
                    };
                    hypernets.push(RgdcnTypeParams { per_chunk, chunk_local });
                }
                cells::rgdcn_layer(tape, h, graph, chunks, &hypernets, act)
            }
            CellKind::GnnFilm => {
                let mut types = Vec::new();
                for t in &self.edge_types {
                    types.push(FilmTypeParams {
                        weight: bound.id(&format!("{lp}/type_{t}/W"))?,
                        hyper: resolve_linear(bound, &format!("{lp}/type_{t}/film_g"))?,
                    });
                }
                let post = if cfg.cell.film_mode == FilmMode::Before {
                    let mut post = Vec::new();
                    for (j, step) in cfg.cell.film_post.iter().enumerate() {
                        post.push(match step {
                            FilmPostOp::Identity => FilmPostParams::Identity,
                            FilmPostOp::Tanh => FilmPostParams::Tanh,
                            FilmPostOp::Linear => FilmPostParams::Linear(resolve_linear(
                                bound,
                                &format!("{lp}/film_post/{j}"),
                            )?),
                            FilmPostOp::LayerNorm => FilmPostParams::LayerNorm {
                                gain: bound.id(&format!("{lp}/film_post/{j}/gain"))?,
                                bias: bound.id(&format!("{lp}/film_post/{j}/bias"))?,
                            },
                        });
                    }
                    post
                } else {
                    Vec::new()
                };
                cells::gnn_film_layer(tape, h, graph, &types, cfg.cell.film_mode, &post, act)
            }
        }
    }

    fn type_weights(&self, bound: &BoundParams, lp: &str) -> Result<Vec<TensorId>> {
        self.edge_types
            .iter()
            .map(|t| bound.id(&format!("{lp}/type_{t}/W")))
            .collect()
    }

    fn type_mlps(&self, bound: &BoundParams, lp: &str, num_layers: usize) -> Result<Vec<MlpParams>> {
        self.edge_types
            .iter()
            .map(|t| resolve_mlp(bound, &format!("{lp}/type_{t}/mlp"), num_layers, self.config.activation))
            .collect()
    }
}
