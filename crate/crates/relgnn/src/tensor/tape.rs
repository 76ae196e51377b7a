//! The computation tape.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::kernels;
use super::{Scalar, LAYER_NORM_EPS, LEAKY_RELU_SLOPE};
use crate::error::{Error, Result};

/// Handle to a tensor recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct TensorId(usize);

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum UnaryKind {
    Neg,
    Relu,
    LeakyRelu,
    Elu,
    Gelu,
    Tanh,
    Sigmoid,
    Softplus,
}

/// Which operand of a binary elementwise op is a broadcast row vector.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Broadcast {
    None,
    /// Left operand is a row vector broadcast over the right matrix's rows.
    Left,
    /// Right operand is a row vector broadcast over the left matrix's rows.
    Right,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum BinaryKind {
    Add,
    Sub,
    Mul,
}

#[derive(Debug)]
enum Op<F> {
    Leaf,
    Matmul {
        a: TensorId,
        b: TensorId,
    },
    Binary {
        kind: BinaryKind,
        a: TensorId,
        b: TensorId,
        bcast: Broadcast,
    },
    Unary {
        kind: UnaryKind,
        x: TensorId,
    },
    Scale {
        x: TensorId,
        factor: F,
    },
    SegmentSum {
        data: TensorId,
        ids: Vec<usize>,
    },
    SegmentSoftmax {
        logits: TensorId,
        ids: Vec<usize>,
    },
    LayerNorm {
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        /// Per-row 1/sqrt(var + eps), saved during forward.
        inv_std: Vec<F>,
    },
    Dropout {
        x: TensorId,
        /// Per-element multiplier: 0 for dropped, 1/keep_prob for kept.
        mask: Vec<F>,
    },
    GatherRows {
        x: TensorId,
        idx: Vec<usize>,
    },
    ConcatRows {
        parts: Vec<TensorId>,
    },
    ConcatCols {
        parts: Vec<TensorId>,
    },
    SliceCols {
        x: TensorId,
        start: usize,
        len: usize,
    },
    ScaleRows {
        x: TensorId,
        factors: Vec<F>,
    },
    MulCol {
        x: TensorId,
        w: TensorId,
    },
    RowwiseMatvec {
        mats: TensorId,
        vecs: TensorId,
        k: usize,
    },
    Sum {
        x: TensorId,
    },
    Mean {
        x: TensorId,
    },
    Reshape {
        x: TensorId,
    },
}

struct Node<F> {
    shape: Vec<usize>,
    values: Vec<F>,
    grad: Option<Vec<F>>,
    requires_grad: bool,
    op: Op<F>,
}

/// Append-only record of a forward computation; replayed in reverse by
/// [`Tape::backward`]. One tape per training step.
pub struct Tape<F: Scalar> {
    nodes: Vec<Node<F>>,
}

impl<F: Scalar> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Scalar> Tape<F> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ── Leaves ───────────────────────────────────────────────────────

    fn leaf(&mut self, values: Vec<F>, shape: Vec<usize>, requires_grad: bool) -> Result<TensorId> {
        let numel: usize = shape.iter().product();
        if numel != values.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                left: shape,
                right: vec![values.len()],
            });
        }
        Ok(self.push(shape, values, requires_grad, Op::Leaf))
    }

    /// A trainable leaf: participates in gradient computation.
    pub fn param(&mut self, values: Vec<F>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, true)
    }

    /// A non-trainable leaf (inputs, labels, fixed coefficients).
    pub fn constant(&mut self, values: Vec<F>, shape: Vec<usize>) -> Result<TensorId> {
        self.leaf(values, shape, false)
    }

    pub fn scalar(&mut self, v: F) -> TensorId {
        self.push(vec![1], vec![v], false, Op::Leaf)
    }

    // ── Accessors ────────────────────────────────────────────────────

    pub fn values(&self, id: TensorId) -> &[F] {
        &self.nodes[id.0].values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].shape
    }

    pub fn numel(&self, id: TensorId) -> usize {
        self.nodes[id.0].values.len()
    }

    /// Gradient of a tensor after [`Tape::backward`]; `None` if the tensor was
    /// not reached from the loss or does not require gradients.
    pub fn grad(&self, id: TensorId) -> Option<&[F]> {
        self.nodes[id.0].grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn push(&mut self, shape: Vec<usize>, values: Vec<F>, requires_grad: bool, op: Op<F>) -> TensorId {
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node {
            shape,
            values,
            grad: None,
            requires_grad,
            op,
        });
        id
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|&i| self.nodes[i.0].requires_grad)
    }

    fn dims2(&self, id: TensorId, op: &'static str) -> Result<(usize, usize)> {
        match self.nodes[id.0].shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            other => Err(Error::ShapeMismatch {
                op,
                left: other.to_vec(),
                right: vec![],
            }),
        }
    }

    // ── Forward operations ───────────────────────────────────────────

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.dims2(a, "matmul")?;
        let (kb, n) = self.dims2(b, "matmul")?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let values = kernels::matmul(self.values(a), self.values(b), m, ka, n);
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(vec![m, n], values, rg, Op::Matmul { a, b }))
    }

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Sub, a, b)
    }

    /// Hadamard product.
    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.binary(BinaryKind::Mul, a, b)
    }

    fn binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId) -> Result<TensorId> {
        let bcast = self.broadcast_kind(a, b)?;
        let (sa, sb) = (&self.nodes[a.0], &self.nodes[b.0]);
        let (shape, values) = {
            let f = |x: F, y: F| match kind {
                BinaryKind::Add => x + y,
                BinaryKind::Sub => x - y,
                BinaryKind::Mul => x * y,
            };
            match bcast {
                Broadcast::None => {
                    let vals: Vec<F> = sa
                        .values
                        .iter()
                        .zip(&sb.values)
                        .map(|(&x, &y)| f(x, y))
                        .collect();
                    (sa.shape.clone(), vals)
                }
                Broadcast::Right => {
                    let d = sb.values.len();
                    let vals: Vec<F> = sa
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, &x)| f(x, sb.values[i % d]))
                        .collect();
                    (sa.shape.clone(), vals)
                }
                Broadcast::Left => {
                    let d = sa.values.len();
                    let vals: Vec<F> = sb
                        .values
                        .iter()
                        .enumerate()
                        .map(|(i, &y)| f(sa.values[i % d], y))
                        .collect();
                    (sb.shape.clone(), vals)
                }
            }
        };
        let rg = self.any_requires(&[a, b]);
        Ok(self.push(shape, values, rg, Op::Binary { kind, a, b, bcast }))
    }

    /// Equal shapes, or one operand a row vector ([d] or [1,d]) broadcast over
    /// the rows of the other [n,d] matrix.
    fn broadcast_kind(&self, a: TensorId, b: TensorId) -> Result<Broadcast> {
        let sa = &self.nodes[a.0].shape;
        let sb = &self.nodes[b.0].shape;
        if sa == sb {
            return Ok(Broadcast::None);
        }
        let row_of = |s: &[usize]| match s {
            [d] => Some(*d),
            [1, d] => Some(*d),
            _ => None,
        };
        let cols_of = |s: &[usize]| match s {
            [_, d] => Some(*d),
            _ => None,
        };
        if let (Some(d), Some(c)) = (row_of(sb), cols_of(sa)) {
            if d == c {
                return Ok(Broadcast::Right);
            }
        }
        if let (Some(d), Some(c)) = (row_of(sa), cols_of(sb)) {
            if d == c {
                return Ok(Broadcast::Left);
            }
        }
        Err(Error::ShapeMismatch {
            op: "elementwise",
            left: sa.clone(),
            right: sb.clone(),
        })
    }

    pub fn neg(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Neg, x)
    }

    pub fn relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Relu, x)
    }

    pub fn leaky_relu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::LeakyRelu, x)
    }

    pub fn elu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Elu, x)
    }

    pub fn gelu(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Gelu, x)
    }

    pub fn tanh(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: TensorId) -> TensorId {
        self.unary(UnaryKind::Softplus, x)
    }

    fn unary(&mut self, kind: UnaryKind, x: TensorId) -> TensorId {
        let values: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .map(|&v| unary_forward(kind, v))
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, values, rg, Op::Unary { kind, x })
    }

    /// Name-dispatched elementwise entry point; `b` required for add/sub/mul.
    pub fn elementwise(&mut self, op_name: &str, a: TensorId, b: Option<TensorId>) -> Result<TensorId> {
        let need_b = |b: Option<TensorId>| b.ok_or_else(|| Error::UnknownOp(format!("{op_name} requires two operands")));
        match op_name {
            "add" => self.add(a, need_b(b)?),
            "sub" => self.sub(a, need_b(b)?),
            "mul" => self.mul(a, need_b(b)?),
            "relu" => Ok(self.relu(a)),
            "leaky_relu" => Ok(self.leaky_relu(a)),
            "elu" => Ok(self.elu(a)),
            "gelu" => Ok(self.gelu(a)),
            "tanh" => Ok(self.tanh(a)),
            "sigmoid" => Ok(self.sigmoid(a)),
            other => Err(Error::UnknownOp(other.to_string())),
        }
    }

    /// Multiply by a compile-time-known constant (not differentiated through).
    pub fn scale(&mut self, x: TensorId, factor: F) -> TensorId {
        let values: Vec<F> = self.nodes[x.0].values.iter().map(|&v| v * factor).collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        self.push(shape, values, rg, Op::Scale { x, factor })
    }

    /// Row `s` of the output is the sum of all `data` rows whose segment id is
    /// `s`; empty segments are zero rows.
    pub fn segment_sum(&mut self, data: TensorId, ids: &[usize], num_segments: usize) -> Result<TensorId> {
        let (e, d) = self.dims2(data, "segment_sum")?;
        if ids.len() != e {
            return Err(Error::ShapeMismatch {
                op: "segment_sum",
                left: vec![e, d],
                right: vec![ids.len()],
            });
        }
        for &s in ids {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange {
                    op: "segment_sum",
                    index: s,
                    size: num_segments,
                });
            }
        }
        let mut values = vec![F::zero(); num_segments * d];
        {
            let src = &self.nodes[data.0].values;
            for (row, &s) in ids.iter().enumerate() {
                let out = &mut values[s * d..(s + 1) * d];
                let inp = &src[row * d..(row + 1) * d];
                for j in 0..d {
                    out[j] = out[j] + inp[j];
                }
            }
        }
        let rg = self.nodes[data.0].requires_grad;
        Ok(self.push(
            vec![num_segments, d],
            values,
            rg,
            Op::SegmentSum {
                data,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Softmax within each segment of a 1-D logit vector, with per-segment max
    /// subtraction. Every segment in `[0, num_segments)` must be nonempty.
    pub fn segment_softmax(&mut self, logits: TensorId, ids: &[usize], num_segments: usize) -> Result<TensorId> {
        let e = match self.nodes[logits.0].shape.as_slice() {
            [e] => *e,
            other => {
                return Err(Error::ShapeMismatch {
                    op: "segment_softmax",
                    left: other.to_vec(),
                    right: vec![],
                })
            }
        };
        if ids.len() != e {
            return Err(Error::ShapeMismatch {
                op: "segment_softmax",
                left: vec![e],
                right: vec![ids.len()],
            });
        }
        let mut seen = vec![false; num_segments];
        for &s in ids {
            if s >= num_segments {
                return Err(Error::IndexOutOfRange {
                    op: "segment_softmax",
                    index: s,
                    size: num_segments,
                });
            }
            seen[s] = true;
        }
        if let Some(empty) = seen.iter().position(|&v| !v) {
            return Err(Error::EmptySegment { segment: empty });
        }

        let src = &self.nodes[logits.0].values;
        let mut seg_max = vec![F::neg_infinity(); num_segments];
        for (i, &s) in ids.iter().enumerate() {
            if src[i] > seg_max[s] {
                seg_max[s] = src[i];
            }
        }
        let mut exps: Vec<F> = Vec::with_capacity(e);
        let mut seg_sum = vec![F::zero(); num_segments];
        for (i, &s) in ids.iter().enumerate() {
            let v = (src[i] - seg_max[s]).exp();
            seg_sum[s] = seg_sum[s] + v;
            exps.push(v);
        }
        let values: Vec<F> = ids.iter().zip(&exps).map(|(&s, &v)| v / seg_sum[s]).collect();
        let rg = self.nodes[logits.0].requires_grad;
        Ok(self.push(
            vec![e],
            values,
            rg,
            Op::SegmentSoftmax {
                logits,
                ids: ids.to_vec(),
            },
        ))
    }

    /// Per-row normalisation: `(x - mean) / sqrt(var + eps) * gain + bias`.
    pub fn layer_norm(&mut self, x: TensorId, gain: TensorId, bias: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "layer_norm")?;
        for &v in &[gain, bias] {
            if self.numel(v) != d {
                return Err(Error::ShapeMismatch {
                    op: "layer_norm",
                    left: vec![n, d],
                    right: self.shape(v).to_vec(),
                });
            }
        }
        let eps = F::c(LAYER_NORM_EPS);
        let xd = &self.nodes[x.0].values;
        let gd = &self.nodes[gain.0].values;
        let bd = &self.nodes[bias.0].values;
        let mut values = vec![F::zero(); n * d];
        let mut inv_std = Vec::with_capacity(n);
        let denom = F::c(d as f64);
        for i in 0..n {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().fold(F::zero(), |s, &v| s + v) / denom;
            let var = row.iter().fold(F::zero(), |s, &v| s + (v - mean) * (v - mean)) / denom;
            let inv = (var + eps).sqrt().recip();
            inv_std.push(inv);
            let out = &mut values[i * d..(i + 1) * d];
            for j in 0..d {
                out[j] = (row[j] - mean) * inv * gd[j] + bd[j];
            }
        }
        let rg = self.any_requires(&[x, gain, bias]);
        Ok(self.push(vec![n, d], values, rg, Op::LayerNorm { x, gain, bias, inv_std }))
    }

    /// Inverted dropout: in training, zero each element with probability
    /// `1 - keep_prob` and scale survivors by `1/keep_prob`; in evaluation the
    /// identity.
    pub fn dropout(
        &mut self,
        x: TensorId,
        keep_prob: f64,
        rng: &mut ChaCha8Rng,
        training: bool,
    ) -> Result<TensorId> {
        if !(keep_prob > 0.0 && keep_prob <= 1.0) {
            return Err(Error::Config(format!(
                "dropout keep_prob must be in (0, 1], got {keep_prob}"
            )));
        }
        if !training || keep_prob == 1.0 {
            return Ok(self.reshape(x, self.shape(x).to_vec())?);
        }
        let inv = F::c(1.0 / keep_prob);
        let mask: Vec<F> = (0..self.numel(x))
            .map(|_| {
                if rng.gen::<f64>() < keep_prob {
                    inv
                } else {
                    F::zero()
                }
            })
            .collect();
        let values: Vec<F> = self.nodes[x.0]
            .values
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.nodes[x.0].shape.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(shape, values, rg, Op::Dropout { x, mask }))
    }

    /// out[i, :] = x[idx[i], :]
    pub fn gather_rows(&mut self, x: TensorId, idx: &[usize]) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        let mut values = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= n {
                return Err(Error::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    size: n,
                });
            }
            values.extend_from_slice(&self.nodes[x.0].values[i * d..(i + 1) * d]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![idx.len(), d],
            values,
            rg,
            Op::GatherRows { x, idx: idx.to_vec() },
        ))
    }

    /// Stack matrices with equal column counts on top of each other.
    pub fn concat_rows(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_rows of nothing");
        let (_, d) = self.dims2(parts[0], "concat_rows")?;
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_rows")?;
            if c != d {
                return Err(Error::ShapeMismatch {
                    op: "concat_rows",
                    left: vec![r, c],
                    right: vec![total, d],
                });
            }
            total += r;
        }
        let mut values = Vec::with_capacity(total * d);
        for &p in parts {
            values.extend_from_slice(&self.nodes[p.0].values);
        }
        let rg = self.any_requires(parts);
        Ok(self.push(vec![total, d], values, rg, Op::ConcatRows { parts: parts.to_vec() }))
    }

    /// Glue matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        assert!(!parts.is_empty(), "concat_cols of nothing");
        let (n, _) = self.dims2(parts[0], "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        let mut total = 0;
        for &p in parts {
            let (r, c) = self.dims2(p, "concat_cols")?;
            if r != n {
                return Err(Error::ShapeMismatch {
                    op: "concat_cols",
                    left: vec![r, c],
                    right: vec![n, total],
                });
            }
            widths.push(c);
            total += c;
        }
        let mut values = Vec::with_capacity(n * total);
        for i in 0..n {
            for (&p, &w) in parts.iter().zip(&widths) {
                values.extend_from_slice(&self.nodes[p.0].values[i * w..(i + 1) * w]);
            }
        }
        let rg = self.any_requires(parts);
        Ok(self.push(vec![n, total], values, rg, Op::ConcatCols { parts: parts.to_vec() }))
    }

    /// Columns `[start, start+len)` of a matrix.
    pub fn slice_cols(&mut self, x: TensorId, start: usize, len: usize) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "slice_cols")?;
        if start + len > d {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                size: d,
            });
        }
        let mut values = Vec::with_capacity(n * len);
        for i in 0..n {
            values.extend_from_slice(&self.nodes[x.0].values[i * d + start..i * d + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(vec![n, len], values, rg, Op::SliceCols { x, start, len }))
    }

    /// Multiply each row by a fixed (non-differentiated) factor; used for the
    /// `1/c_{v,l}` message normalisation.
    pub fn scale_rows(&mut self, x: TensorId, factors: &[F]) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "scale_rows")?;
        if factors.len() != n {
            return Err(Error::ShapeMismatch {
                op: "scale_rows",
                left: vec![n, d],
                right: vec![factors.len()],
            });
        }
        let mut values = Vec::with_capacity(n * d);
        for (i, &f) in factors.iter().enumerate() {
            values.extend(self.nodes[x.0].values[i * d..(i + 1) * d].iter().map(|&v| v * f));
        }
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(
            vec![n, d],
            values,
            rg,
            Op::ScaleRows { x, factors: factors.to_vec() },
        ))
    }

    /// Multiply row `i` of `x` by scalar `w[i]`, differentiable in both; used
    /// to apply attention weights to messages.
    pub fn mul_col(&mut self, x: TensorId, w: TensorId) -> Result<TensorId> {
        let (n, d) = self.dims2(x, "mul_col")?;
        if self.shape(w) != [n] {
            return Err(Error::ShapeMismatch {
                op: "mul_col",
                left: vec![n, d],
                right: self.shape(w).to_vec(),
            });
        }
        let wd = &self.nodes[w.0].values;
        let mut values = Vec::with_capacity(n * d);
        for i in 0..n {
            values.extend(self.nodes[x.0].values[i * d..(i + 1) * d].iter().map(|&v| v * wd[i]));
        }
        let rg = self.any_requires(&[x, w]);
        Ok(self.push(vec![n, d], values, rg, Op::MulCol { x, w }))
    }

    /// Per-row matrix-vector product: row `i` of `mats` is a `k×k` matrix in
    /// row-major order, applied to row `i` of `vecs`. Realises dynamically
    /// computed per-node message transforms.
    pub fn rowwise_matvec(&mut self, mats: TensorId, vecs: TensorId) -> Result<TensorId> {
        let (n, kk) = self.dims2(mats, "rowwise_matvec")?;
        let (nv, k) = self.dims2(vecs, "rowwise_matvec")?;
        if n != nv || kk != k * k {
            return Err(Error::ShapeMismatch {
                op: "rowwise_matvec",
                left: vec![n, kk],
                right: vec![nv, k],
            });
        }
        let md = &self.nodes[mats.0].values;
        let vd = &self.nodes[vecs.0].values;
        let mut values = vec![F::zero(); n * k];
        for r in 0..n {
            let mat = &md[r * kk..(r + 1) * kk];
            let vin = &vd[r * k..(r + 1) * k];
            let out = &mut values[r * k..(r + 1) * k];
            for i in 0..k {
                let mut s = F::zero();
                for j in 0..k {
                    s = s + mat[i * k + j] * vin[j];
                }
                out[i] = s;
            }
        }
        let rg = self.any_requires(&[mats, vecs]);
        Ok(self.push(vec![n, k], values, rg, Op::RowwiseMatvec { mats, vecs, k }))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum(&mut self, x: TensorId) -> TensorId {
        let s = self.nodes[x.0].values.iter().fold(F::zero(), |a, &v| a + v);
        let rg = self.nodes[x.0].requires_grad;
        self.push(vec![1], vec![s], rg, Op::Sum { x })
    }

    /// Mean of all elements, as a `[1]` tensor.
    pub fn mean(&mut self, x: TensorId) -> TensorId {
        let n = self.nodes[x.0].values.len();
        let s = self.nodes[x.0].values.iter().fold(F::zero(), |a, &v| a + v);
        let rg = self.nodes[x.0].requires_grad;
        let m = if n == 0 { F::zero() } else { s / F::c(n as f64) };
        self.push(vec![1], vec![m], rg, Op::Mean { x })
    }

    pub fn reshape(&mut self, x: TensorId, new_shape: Vec<usize>) -> Result<TensorId> {
        let numel: usize = new_shape.iter().product();
        if numel != self.numel(x) {
            return Err(Error::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: new_shape,
            });
        }
        let values = self.nodes[x.0].values.clone();
        let rg = self.nodes[x.0].requires_grad;
        Ok(self.push(new_shape, values, rg, Op::Reshape { x }))
    }

    // ── Backward ─────────────────────────────────────────────────────

    /// Reverse sweep from a scalar loss. Populates `grad` for every tensor
    /// reachable from the loss that requires gradients.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.numel(loss) != 1 {
            return Err(Error::NonScalarLoss {
                shape: self.shape(loss).to_vec(),
            });
        }
        if !self.nodes[loss.0].requires_grad {
            return Ok(()); // loss is constant wrt all parameters
        }
        self.ensure_grad(loss);
        self.nodes[loss.0].grad.as_mut().unwrap()[0] = F::one();

        for id in (0..=loss.0).rev() {
            if self.nodes[id].grad.is_none() || !self.nodes[id].requires_grad {
                continue;
            }
            self.step_backward(id);
        }
        Ok(())
    }

    fn ensure_grad(&mut self, id: TensorId) {
        if self.nodes[id.0].requires_grad && self.nodes[id.0].grad.is_none() {
            let n = self.nodes[id.0].values.len();
            self.nodes[id.0].grad = Some(vec![F::zero(); n]);
        }
    }

    /// Take the output gradient of `id` and push it to the op's inputs.
    fn step_backward(&mut self, id: usize) {
        let g = self.nodes[id].grad.clone().expect("grad present");
        // Move the op out to appease the borrow checker; restored below.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let (m, k) = (self.nodes[a.0].shape[0], self.nodes[a.0].shape[1]);
                let n = self.nodes[b.0].shape[1];
                if self.nodes[a.0].requires_grad {
                    self.ensure_grad(*a);
                    let bv = self.nodes[b.0].values.clone();
                    let ga = self.nodes[a.0].grad.as_mut().unwrap();
                    kernels::matmul_nt_acc(ga, &g, &bv, m, k, n);
                }
                if self.nodes[b.0].requires_grad {
                    self.ensure_grad(*b);
                    let av = self.nodes[a.0].values.clone();
                    let gb = self.nodes[b.0].grad.as_mut().unwrap();
                    kernels::matmul_tn_acc(gb, &av, &g, m, k, n);
                }
            }
            Op::Binary { kind, a, b, bcast } => self.backward_binary(*kind, *a, *b, *bcast, &g),
            Op::Unary { kind, x } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let xv = self.nodes[x.0].values.clone();
                    let yv = self.nodes[id].values.clone();
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * unary_derivative(*kind, xv[i], yv[i]);
                    }
                }
            }
            Op::Scale { x, factor } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * *factor;
                    }
                }
            }
            Op::SegmentSum { data, ids } => {
                if self.nodes[data.0].requires_grad {
                    self.ensure_grad(*data);
                    let d = self.nodes[data.0].shape[1];
                    let gd = self.nodes[data.0].grad.as_mut().unwrap();
                    for (row, &s) in ids.iter().enumerate() {
                        for j in 0..d {
                            gd[row * d + j] = gd[row * d + j] + g[s * d + j];
                        }
                    }
                }
            }
            Op::SegmentSoftmax { logits, ids } => {
                if self.nodes[logits.0].requires_grad {
                    self.ensure_grad(*logits);
                    let y = self.nodes[id].values.clone();
                    let num_segments = ids.iter().copied().max().map_or(0, |m| m + 1);
                    let mut seg_dot = vec![F::zero(); num_segments];
                    for (i, &s) in ids.iter().enumerate() {
                        seg_dot[s] = seg_dot[s] + g[i] * y[i];
                    }
                    let gl = self.nodes[logits.0].grad.as_mut().unwrap();
                    for (i, &s) in ids.iter().enumerate() {
                        gl[i] = gl[i] + y[i] * (g[i] - seg_dot[s]);
                    }
                }
            }
            Op::LayerNorm { x, gain, bias, inv_std } => {
                self.backward_layer_norm(*x, *gain, *bias, inv_std, &g)
            }
            Op::Dropout { x, mask } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i] * mask[i];
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let d = self.nodes[x.0].shape[1];
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for (row, &i) in idx.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] = gx[i * d + j] + g[row * d + j];
                        }
                    }
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.nodes[p.0].values.len();
                    if self.nodes[p.0].requires_grad {
                        self.ensure_grad(p);
                        let gp = self.nodes[p.0].grad.as_mut().unwrap();
                        for i in 0..len {
                            gp[i] = gp[i] + g[offset + i];
                        }
                    }
                    offset += len;
                }
            }
            Op::ConcatCols { parts } => {
                let n = self.nodes[id].shape[0];
                let total = self.nodes[id].shape[1];
                let mut start = 0;
                for &p in parts {
                    let w = self.nodes[p.0].shape[1];
                    if self.nodes[p.0].requires_grad {
                        self.ensure_grad(p);
                        let gp = self.nodes[p.0].grad.as_mut().unwrap();
                        for i in 0..n {
                            for j in 0..w {
                                gp[i * w + j] = gp[i * w + j] + g[i * total + start + j];
                            }
                        }
                    }
                    start += w;
                }
            }
            Op::SliceCols { x, start, len } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..n {
                        for j in 0..*len {
                            gx[i * d + start + j] = gx[i * d + start + j] + g[i * len + j];
                        }
                    }
                }
            }
            Op::ScaleRows { x, factors } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let d = self.nodes[x.0].shape[1];
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for (i, &f) in factors.iter().enumerate() {
                        for j in 0..d {
                            gx[i * d + j] = gx[i * d + j] + g[i * d + j] * f;
                        }
                    }
                }
            }
            Op::MulCol { x, w } => {
                let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let wv = self.nodes[w.0].values.clone();
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] = gx[i * d + j] + g[i * d + j] * wv[i];
                        }
                    }
                }
                if self.nodes[w.0].requires_grad {
                    self.ensure_grad(*w);
                    let xv = self.nodes[x.0].values.clone();
                    let gw = self.nodes[w.0].grad.as_mut().unwrap();
                    for i in 0..n {
                        let mut s = F::zero();
                        for j in 0..d {
                            s = s + g[i * d + j] * xv[i * d + j];
                        }
                        gw[i] = gw[i] + s;
                    }
                }
            }
            Op::RowwiseMatvec { mats, vecs, k } => {
                let k = *k;
                let n = self.nodes[vecs.0].shape[0];
                if self.nodes[mats.0].requires_grad {
                    self.ensure_grad(*mats);
                    let vv = self.nodes[vecs.0].values.clone();
                    let gm = self.nodes[mats.0].grad.as_mut().unwrap();
                    for r in 0..n {
                        for i in 0..k {
                            let gout = g[r * k + i];
                            for j in 0..k {
                                gm[r * k * k + i * k + j] =
                                    gm[r * k * k + i * k + j] + gout * vv[r * k + j];
                            }
                        }
                    }
                }
                if self.nodes[vecs.0].requires_grad {
                    self.ensure_grad(*vecs);
                    let mv = self.nodes[mats.0].values.clone();
                    let gv = self.nodes[vecs.0].grad.as_mut().unwrap();
                    for r in 0..n {
                        for j in 0..k {
                            let mut s = F::zero();
                            for i in 0..k {
                                s = s + g[r * k + i] * mv[r * k * k + i * k + j];
                            }
                            gv[r * k + j] = gv[r * k + j] + s;
                        }
                    }
                }
            }
            Op::Sum { x } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for v in gx.iter_mut() {
                        *v = *v + g[0];
                    }
                }
            }
            Op::Mean { x } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let n = self.nodes[x.0].values.len();
                    let scale = if n == 0 { F::zero() } else { g[0] / F::c(n as f64) };
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for v in gx.iter_mut() {
                        *v = *v + scale;
                    }
                }
            }
            Op::Reshape { x } => {
                if self.nodes[x.0].requires_grad {
                    self.ensure_grad(*x);
                    let gx = self.nodes[x.0].grad.as_mut().unwrap();
                    for i in 0..g.len() {
                        gx[i] = gx[i] + g[i];
                    }
                }
            }
        }
        self.nodes[id].op = op;
    }

    fn backward_binary(&mut self, kind: BinaryKind, a: TensorId, b: TensorId, bcast: Broadcast, g: &[F]) {
        let (full, row) = match bcast {
            Broadcast::None | Broadcast::Right => (a, b),
            Broadcast::Left => (b, a),
        };
        let d = self.nodes[row.0].values.len();

        // Gradient flowing to each operand position, before row reduction.
        // For Mul we need the other operand's (possibly broadcast) value.
        let full_vals = self.nodes[full.0].values.clone();
        let row_vals = self.nodes[row.0].values.clone();

        let grad_at = |target_is_full: bool, i: usize| -> F {
            let sign = match (kind, target_is_full, bcast) {
                (BinaryKind::Sub, true, Broadcast::Left) => -F::one(), // full == b
                (BinaryKind::Sub, false, Broadcast::Left) => F::one(), // row == a
                (BinaryKind::Sub, false, _) => -F::one(),              // row/b is subtrahend
                _ => F::one(),
            };
            match kind {
                BinaryKind::Add | BinaryKind::Sub => g[i] * sign,
                BinaryKind::Mul => {
                    if target_is_full {
                        g[i] * row_vals[i % d.max(1)]
                    } else {
                        g[i] * full_vals[i]
                    }
                }
            }
        };

        if bcast == Broadcast::None {
            if self.nodes[a.0].requires_grad {
                self.ensure_grad(a);
                let bv = self.nodes[b.0].values.clone();
                let ga = self.nodes[a.0].grad.as_mut().unwrap();
                for i in 0..g.len() {
                    ga[i] = ga[i]
                        + match kind {
                            BinaryKind::Add | BinaryKind::Sub => g[i],
                            BinaryKind::Mul => g[i] * bv[i],
                        };
                }
            }
            if self.nodes[b.0].requires_grad {
                self.ensure_grad(b);
                let av = self.nodes[a.0].values.clone();
                let gb = self.nodes[b.0].grad.as_mut().unwrap();
                for i in 0..g.len() {
                    gb[i] = gb[i]
                        + match kind {
                            BinaryKind::Add => g[i],
                            BinaryKind::Sub => -g[i],
                            BinaryKind::Mul => g[i] * av[i],
                        };
                }
            }
            return;
        }

        if self.nodes[full.0].requires_grad {
            self.ensure_grad(full);
            let gf = self.nodes[full.0].grad.as_mut().unwrap();
            for i in 0..g.len() {
                gf[i] = gf[i] + grad_at(true, i);
            }
        }
        if self.nodes[row.0].requires_grad {
            self.ensure_grad(row);
            let gr = self.nodes[row.0].grad.as_mut().unwrap();
            for i in 0..g.len() {
                gr[i % d] = gr[i % d] + grad_at(false, i);
            }
        }
    }

    fn backward_layer_norm(
        &mut self,
        x: TensorId,
        gain: TensorId,
        bias: TensorId,
        inv_std: &[F],
        g: &[F],
    ) {
        let (n, d) = (self.nodes[x.0].shape[0], self.nodes[x.0].shape[1]);
        let denom = F::c(d as f64);
        let xv = self.nodes[x.0].values.clone();
        let gv = self.nodes[gain.0].values.clone();
        let means: Vec<F> = (0..n)
            .map(|i| xv[i * d..(i + 1) * d].iter().fold(F::zero(), |s, &v| s + v) / denom)
            .collect();
        let xhat = |i: usize, j: usize| -> F { (xv[i * d + j] - means[i]) * inv_std[i] };

        if self.nodes[gain.0].requires_grad {
            self.ensure_grad(gain);
            let gg = self.nodes[gain.0].grad.as_mut().unwrap();
            for i in 0..n {
                for j in 0..d {
                    gg[j] = gg[j] + g[i * d + j] * xhat(i, j);
                }
            }
        }
        if self.nodes[bias.0].requires_grad {
            self.ensure_grad(bias);
            let gb = self.nodes[bias.0].grad.as_mut().unwrap();
            for i in 0..n {
                for j in 0..d {
                    gb[j] = gb[j] + g[i * d + j];
                }
            }
        }
        if self.nodes[x.0].requires_grad {
            self.ensure_grad(x);
            let gx = self.nodes[x.0].grad.as_mut().unwrap();
            for i in 0..n {
                let mut mean_h = F::zero();
                let mut mean_hx = F::zero();
                for j in 0..d {
                    let h = g[i * d + j] * gv[j];
                    mean_h = mean_h + h;
                    mean_hx = mean_hx + h * xhat(i, j);
                }
                mean_h = mean_h / denom;
                mean_hx = mean_hx / denom;
                for j in 0..d {
                    let h = g[i * d + j] * gv[j];
                    gx[i * d + j] = gx[i * d + j] + inv_std[i] * (h - mean_h - xhat(i, j) * mean_hx);
                }
            }
        }
    }
}

fn unary_forward<F: Scalar>(kind: UnaryKind, x: F) -> F {
    match kind {
        UnaryKind::Neg => -x,
        UnaryKind::Relu => {
            if x > F::zero() {
                x
            } else {
                F::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > F::zero() {
                x
            } else {
                F::c(LEAKY_RELU_SLOPE) * x
            }
        }
        UnaryKind::Elu => {
            if x > F::zero() {
                x
            } else {
                x.exp() - F::one()
            }
        }
        UnaryKind::Gelu => {
            // tanh approximation, deterministic closed-form backward
            let c = F::c(0.7978845608028654); // sqrt(2/pi)
            let inner = c * (x + F::c(0.044715) * x * x * x);
            F::c(0.5) * x * (F::one() + inner.tanh())
        }
        UnaryKind::Tanh => x.tanh(),
        UnaryKind::Sigmoid => {
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        }
        UnaryKind::Softplus => {
            // max(x,0) + ln(1 + exp(-|x|))
            let m = if x > F::zero() { x } else { F::zero() };
            m + (F::one() + (-x.abs()).exp()).ln()
        }
    }
}

fn unary_derivative<F: Scalar>(kind: UnaryKind, x: F, y: F) -> F {
    match kind {
        UnaryKind::Neg => -F::one(),
        UnaryKind::Relu => {
            if x > F::zero() {
                F::one()
            } else {
                F::zero()
            }
        }
        UnaryKind::LeakyRelu => {
            if x > F::zero() {
                F::one()
            } else {
                F::c(LEAKY_RELU_SLOPE)
            }
        }
        UnaryKind::Elu => {
            if x > F::zero() {
                F::one()
            } else {
                y + F::one() // alpha * exp(x)
            }
        }
        UnaryKind::Gelu => {
            let c = F::c(0.7978845608028654);
            let inner = c * (x + F::c(0.044715) * x * x * x);
            let t = inner.tanh();
            let sech2 = F::one() - t * t;
            F::c(0.5) * (F::one() + t)
                + F::c(0.5) * x * sech2 * c * (F::one() + F::c(3.0 * 0.044715) * x * x)
        }
        UnaryKind::Tanh => F::one() - y * y,
        UnaryKind::Sigmoid => y * (F::one() - y),
        UnaryKind::Softplus => {
            // sigmoid(x)
            if x >= F::zero() {
                F::one() / (F::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (F::one() + e)
            }
        }
    }
}
