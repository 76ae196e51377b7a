//! Recurrent units composed from tape primitives. Used by the gated cell to
//! combine a node's state with its aggregated message.

use serde::{Deserialize, Serialize};

use super::params::{BoundParams, Init, ParamSpec};
use super::tape::{Tape, TensorId};
use super::Scalar;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RecurrentKind {
    Rnn,
    Gru,
    Lstm,
    /// Test support: new state = message, ignoring the old state entirely.
    PassThrough,
}

impl RecurrentKind {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "RNN" => Ok(RecurrentKind::Rnn),
            "GRU" => Ok(RecurrentKind::Gru),
            "LSTM" => Ok(RecurrentKind::Lstm),
            other => Err(Error::Config(format!(
                "unknown recurrent cell '{other}' (expected RNN, GRU or LSTM)"
            ))),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            RecurrentKind::Rnn => "RNN",
            RecurrentKind::Gru => "GRU",
            RecurrentKind::Lstm => "LSTM",
            RecurrentKind::PassThrough => "PASS_THROUGH",
        }
    }

    pub fn needs_aux_state(&self) -> bool {
        matches!(self, RecurrentKind::Lstm)
    }
}

/// Resolved tape ids of one cell's parameters, in spec order.
#[derive(Debug, Clone)]
pub struct RecurrentParams {
    /// (w, u, b) per gate: message weights, state weights, bias.
    gates: Vec<(TensorId, TensorId, TensorId)>,
}

const RNN_GATES: &[&str] = &["main"];
const GRU_GATES: &[&str] = &["update", "reset", "cand"];
const LSTM_GATES: &[&str] = &["input", "forget", "output", "cand"];

fn gate_names(kind: RecurrentKind) -> &'static [&'static str] {
    match kind {
        RecurrentKind::Rnn => RNN_GATES,
        RecurrentKind::Gru => GRU_GATES,
        RecurrentKind::Lstm => LSTM_GATES,
        RecurrentKind::PassThrough => &[],
    }
}

/// Parameter declarations for a cell of hidden size `dim`, names prefixed
/// with `prefix/`.
pub fn recurrent_param_specs(kind: RecurrentKind, prefix: &str, dim: usize) -> Vec<ParamSpec> {
    let mut specs = Vec::new();
    for gate in gate_names(kind) {
        specs.push(ParamSpec::new(format!("{prefix}/{gate}/w"), vec![dim, dim], Init::Glorot));
        specs.push(ParamSpec::new(format!("{prefix}/{gate}/u"), vec![dim, dim], Init::Glorot));
        specs.push(ParamSpec::new(format!("{prefix}/{gate}/b"), vec![dim], Init::Zeros));
    }
    specs
}

impl RecurrentParams {
    pub fn resolve(kind: RecurrentKind, prefix: &str, bound: &BoundParams) -> Result<Self> {
        let mut gates = Vec::new();
        for gate in gate_names(kind) {
            gates.push((
                bound.id(&format!("{prefix}/{gate}/w"))?,
                bound.id(&format!("{prefix}/{gate}/u"))?,
                bound.id(&format!("{prefix}/{gate}/b"))?,
            ));
        }
        Ok(RecurrentParams { gates })
    }
}

/// One cell update: combine `state` (and the LSTM cell state in `aux`) with
/// the aggregated `message`. Returns the new state and new aux state.
pub fn recurrent_cell<F: Scalar>(
    tape: &mut Tape<F>,
    kind: RecurrentKind,
    state: TensorId,
    aux: Option<TensorId>,
    message: TensorId,
    params: &RecurrentParams,
) -> Result<(TensorId, Option<TensorId>)> {
    // pre-activation m*W + h*U + b for gate `i`
    let gate = |tape: &mut Tape<F>, i: usize, h: TensorId| -> Result<TensorId> {
        let (w, u, b) = params.gates[i];
        let mw = tape.matmul(message, w)?;
        let hu = tape.matmul(h, u)?;
        let s = tape.add(mw, hu)?;
        tape.add(s, b)
    };

    match kind {
        RecurrentKind::PassThrough => Ok((message, None)),
        RecurrentKind::Rnn => {
            let pre = gate(tape, 0, state)?;
            Ok((tape.tanh(pre), None))
        }
        RecurrentKind::Gru => {
            // z = sigma(mWz + hUz + bz); saturated z keeps the old state
            let z_pre = gate(tape, 0, state)?;
            let z = tape.sigmoid(z_pre);
            let r_pre = gate(tape, 1, state)?;
            let r = tape.sigmoid(r_pre);
            let rh = tape.mul(r, state)?;
            let c_pre = gate(tape, 2, rh)?;
            let c = tape.tanh(c_pre);
            let zh = tape.mul(z, state)?;
            let ones = tape.constant(
                vec![F::one(); tape.numel(z)],
                tape.shape(z).to_vec(),
            )?;
            let one_minus_z = tape.sub(ones, z)?;
            let zc = tape.mul(one_minus_z, c)?;
            Ok((tape.add(zh, zc)?, None))
        }
        RecurrentKind::Lstm => {
            let cell = aux.ok_or_else(|| {
                Error::Config("LSTM requires an auxiliary cell-state tensor".into())
            })?;
            let i_pre = gate(tape, 0, state)?;
            let i = tape.sigmoid(i_pre);
            let f_pre = gate(tape, 1, state)?;
            let f = tape.sigmoid(f_pre);
            let o_pre = gate(tape, 2, state)?;
            let o = tape.sigmoid(o_pre);
            let j_pre = gate(tape, 3, state)?;
            let j = tape.tanh(j_pre);
            let fc = tape.mul(f, cell)?;
            let ij = tape.mul(i, j)?;
            let new_cell = tape.add(fc, ij)?;
            let tc = tape.tanh(new_cell);
            Ok((tape.mul(o, tc)?, Some(new_cell)))
        }
    }
}
