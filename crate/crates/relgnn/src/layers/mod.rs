//! One propagation step for each cell type, plus the stack builder applying
//! the structural knobs (input projection, dropout, layer norm, residual and
//! dense interleaves).

pub mod cells;
mod stack;

pub use cells::{
    ggnn_layer, gnn_film_layer, gnn_mlp_layer, mlp_forward, rgat_layer, rgcn_layer, rgdcn_layer,
    rgin_layer, FilmPostParams, FilmTypeParams, LinearParams, MlpParams, RgatHeadParams,
    RgdcnTypeParams,
};
pub use stack::{Model, PreparedGraph};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{RecurrentKind, Tape, TensorId};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum CellKind {
    Ggnn,
    Rgcn,
    Rgat,
    Rgin,
    GnnMlp0,
    GnnMlp1,
    Rgdcn,
    GnnFilm,
}

impl CellKind {
    pub const ALL: [CellKind; 8] = [
        CellKind::Ggnn,
        CellKind::Rgcn,
        CellKind::Rgat,
        CellKind::Rgin,
        CellKind::GnnMlp0,
        CellKind::GnnMlp1,
        CellKind::Rgdcn,
        CellKind::GnnFilm,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "GGNN" => Ok(CellKind::Ggnn),
            "RGCN" => Ok(CellKind::Rgcn),
            "RGAT" => Ok(CellKind::Rgat),
            "RGIN" => Ok(CellKind::Rgin),
            "GNN_MLP0" => Ok(CellKind::GnnMlp0),
            "GNN_MLP1" => Ok(CellKind::GnnMlp1),
            "RGDCN" => Ok(CellKind::Rgdcn),
            "GNN_FILM" => Ok(CellKind::GnnFilm),
            other => Err(Error::Config(format!(
                "unknown model kind '{other}' (expected GGNN, RGCN, RGAT, RGIN, GNN_MLP0, GNN_MLP1, RGDCN or GNN_FILM)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            CellKind::Ggnn => "GGNN",
            CellKind::Rgcn => "RGCN",
            CellKind::Rgat => "RGAT",
            CellKind::Rgin => "RGIN",
            CellKind::GnnMlp0 => "GNN_MLP0",
            CellKind::GnnMlp1 => "GNN_MLP1",
            CellKind::Rgdcn => "RGDCN",
            CellKind::GnnFilm => "GNN_FILM",
        }
    }

    /// Convolution-style cells keep per-node state through an explicit SELF
    /// edge type; the gated cell already feeds the old state to its recurrent
    /// unit, so augmenting it would double-count self state.
    pub fn needs_self_loop(&self) -> bool {
        !matches!(self, CellKind::Ggnn)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    LeakyRelu,
    Elu,
    Gelu,
    Tanh,
    /// Not part of the search vocabulary; used for reductions and hand-set
    /// parameter constructions.
    Identity,
}

impl Activation {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "relu" => Ok(Activation::Relu),
            "leaky_relu" => Ok(Activation::LeakyRelu),
            "elu" => Ok(Activation::Elu),
            "gelu" => Ok(Activation::Gelu),
            "tanh" => Ok(Activation::Tanh),
            "identity" => Ok(Activation::Identity),
            other => Err(Error::Config(format!(
                "unknown activation '{other}' (expected relu, leaky_relu, elu, gelu or tanh)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Activation::Relu => "relu",
            Activation::LeakyRelu => "leaky_relu",
            Activation::Elu => "elu",
            Activation::Gelu => "gelu",
            Activation::Tanh => "tanh",
            Activation::Identity => "identity",
        }
    }

    pub fn apply<F: crate::tensor::Scalar>(&self, tape: &mut Tape<F>, x: TensorId) -> TensorId {
        match self {
            Activation::Relu => tape.relu(x),
            Activation::LeakyRelu => tape.leaky_relu(x),
            Activation::Elu => tape.elu(x),
            Activation::Gelu => tape.gelu(x),
            Activation::Tanh => tape.tanh(x),
            Activation::Identity => x,
        }
    }
}

/// Where GNN-FiLM applies its non-linearity relative to message aggregation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmMode {
    /// sigma after summing modulated messages.
    After,
    /// sigma per message before the sum, followed by the post chain `l`.
    Before,
}

/// Steps of the configurable layer `l` applied after before-aggregation FiLM.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FilmPostOp {
    Identity,
    Tanh,
    Linear,
    LayerNorm,
}

impl FilmPostOp {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "identity" => Ok(FilmPostOp::Identity),
            "tanh" => Ok(FilmPostOp::Tanh),
            "linear" => Ok(FilmPostOp::Linear),
            "layer_norm" => Ok(FilmPostOp::LayerNorm),
            other => Err(Error::Config(format!(
                "unknown film_post step '{other}' (expected identity, tanh, linear or layer_norm)"
            ))),
        }
    }
}

/// How the dynamic-convolution hypernetworks are tied across chunks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RgdcnTying {
    /// Separate hypernet per chunk, fed the full node representation.
    PerChunk,
    /// One hypernet per edge type shared by all chunks.
    Shared,
    /// Separate hypernet per chunk, fed only that chunk of the representation.
    ChunkLocal,
}

impl RgdcnTying {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "per_chunk" => Ok(RgdcnTying::PerChunk),
            "shared" => Ok(RgdcnTying::Shared),
            "chunk_local" => Ok(RgdcnTying::ChunkLocal),
            other => Err(Error::Config(format!(
                "unknown rgdcn_tying '{other}' (expected per_chunk, shared or chunk_local)"
            ))),
        }
    }
}

/// Per-cell options. Only the fields relevant to `kind` are read.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellConfig {
    pub kind: CellKind,
    /// R-GAT: attention heads; hidden size must divide evenly.
    pub num_heads: usize,
    /// GGNN: recurrent unit flavour.
    pub rnn_cell: RecurrentKind,
    /// RGDCN: number of representation chunks.
    pub rgdcn_chunks: usize,
    pub rgdcn_tying: RgdcnTying,
    pub film_mode: FilmMode,
    /// Post chain for FiLM mode `before`.
    pub film_post: Vec<FilmPostOp>,
}

impl CellConfig {
    pub fn new(kind: CellKind) -> Self {
        CellConfig {
            kind,
            num_heads: 4,
            rnn_cell: RecurrentKind::Gru,
            rgdcn_chunks: 1,
            rgdcn_tying: RgdcnTying::PerChunk,
            film_mode: FilmMode::Before,
            film_post: vec![FilmPostOp::LayerNorm],
        }
    }
}

/// Structural knobs of the whole stack.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StackConfig {
    pub cell: CellConfig,
    pub num_layers: usize,
    pub hidden_size: usize,
    /// Linear map from input features to the hidden size before layer 0.
    pub input_projection: bool,
    /// Dropout keep probability applied before every propagation step.
    pub input_dropout_keep_prob: f64,
    /// Layer normalisation after each propagation step.
    pub layer_norm: bool,
    /// Insert a node-wise fully connected layer every this many steps
    /// (a period of 32 effectively turns this off).
    pub dense_every: usize,
    /// Residual connection every this many steps (32 effectively off).
    pub res_every: usize,
    pub activation: Activation,
}

impl StackConfig {
    pub fn new(kind: CellKind, num_layers: usize, hidden_size: usize) -> Self {
        StackConfig {
            cell: CellConfig::new(kind),
            num_layers,
            hidden_size,
            input_projection: true,
            input_dropout_keep_prob: 1.0,
            layer_norm: false,
            dense_every: 32,
            res_every: 32,
            activation: Activation::Relu,
        }
    }
}
