//! Independent dense implementation of every cell: materialises per-type
//! dense adjacency count matrices and loops over nodes naively, with its own
//! matrix/ MLP / recurrent arithmetic. Shares nothing with the tape engine
//! except the parameter store and its naming scheme.

use relgnn::graph::TypedGraph;
use relgnn::layers::{Activation, CellKind, FilmMode, FilmPostOp, Model, RgdcnTying};
use relgnn::tensor::{ParameterStore, RecurrentKind};

type Matrix = (usize, usize, Vec<f64>); // rows, cols, row-major values

fn param(store: &ParameterStore, name: &str) -> Matrix {
    let t = store
        .get(name)
        .unwrap_or_else(|| panic!("oracle: missing parameter {name}"));
    match t.shape.as_slice() {
        [r, c] => (*r, *c, t.values.clone()),
        [n] => (1, *n, t.values.clone()),
        other => panic!("oracle: unexpected shape {other:?} for {name}"),
    }
}

/// y = x * W for a row vector x.
fn vec_mat(x: &[f64], w: &Matrix) -> Vec<f64> {
    let (rows, cols, data) = w;
    assert_eq!(x.len(), *rows, "vec_mat dims");
    let mut y = vec![0.0; *cols];
    for (i, &xi) in x.iter().enumerate() {
        for j in 0..*cols {
            y[j] += xi * data[i * cols + j];
        }
    }
    y
}

fn add_assign(acc: &mut [f64], x: &[f64]) {
    for (a, &b) in acc.iter_mut().zip(x) {
        *a += b;
    }
}

fn scale(x: &[f64], s: f64) -> Vec<f64> {
    x.iter().map(|&v| v * s).collect()
}

fn act(a: Activation, x: &[f64]) -> Vec<f64> {
    x.iter().map(|&v| act1(a, v)).collect()
}

fn act1(a: Activation, v: f64) -> f64 {
    match a {
        Activation::Relu => v.max(0.0),
        Activation::LeakyRelu => {
            if v > 0.0 {
                v
            } else {
                0.2 * v
            }
        }
        Activation::Elu => {
            if v > 0.0 {
                v
            } else {
                v.exp() - 1.0
            }
        }
        Activation::Gelu => {
            let c = (2.0 / std::f64::consts::PI).sqrt();
            0.5 * v * (1.0 + (c * (v + 0.044715 * v * v * v)).tanh())
        }
        Activation::Tanh => v.tanh(),
        Activation::Identity => v,
    }
}

fn sigmoid(v: f64) -> f64 {
    1.0 / (1.0 + (-v).exp())
}

/// Dense per-type adjacency: entry `[u][v]` counts edges u -> v of that type.
fn adjacency(graph: &TypedGraph) -> Vec<Vec<u32>> {
    let n = graph.num_nodes;
    graph
        .edges
        .iter()
        .map(|list| {
            let mut a = vec![0u32; n * n];
            for &(u, v) in list {
                a[u * n + v] += 1;
            }
            a
        })
        .collect()
}

fn row(h: &[f64], v: usize, d: usize) -> &[f64] {
    &h[v * d..(v + 1) * d]
}

fn mlp_apply(store: &ParameterStore, prefix: &str, activation: Activation, x: &[f64]) -> Vec<f64> {
    let mut h = x.to_vec();
    let mut i = 0;
    loop {
        let wname = format!("{prefix}/{i}/weight");
        if store.get(&wname).is_none() {
            break;
        }
        let w = param(store, &wname);
        let b = param(store, &format!("{prefix}/{i}/bias"));
        let mut y = vec_mat(&h, &w);
        add_assign(&mut y, &b.2);
        // activation between layers only
        if store.get(&format!("{prefix}/{}/weight", i + 1)).is_some() {
            y = act(activation, &y);
        }
        h = y;
        i += 1;
    }
    h
}

fn recurrent_apply(
    store: &ParameterStore,
    prefix: &str,
    kind: RecurrentKind,
    state: &[f64],
    aux: &[f64],
    msg: &[f64],
) -> (Vec<f64>, Vec<f64>) {
    let gate = |name: &str, h: &[f64]| -> Vec<f64> {
        let w = param(store, &format!("{prefix}/{name}/w"));
        let u = param(store, &format!("{prefix}/{name}/u"));
        let b = param(store, &format!("{prefix}/{name}/b"));
        let mut y = vec_mat(msg, &w);
        add_assign(&mut y, &vec_mat(h, &u));
        add_assign(&mut y, &b.2);
        y
    };
    match kind {
        RecurrentKind::PassThrough => (msg.to_vec(), aux.to_vec()),
        RecurrentKind::Rnn => (gate("main", state).iter().map(|&v| v.tanh()).collect(), aux.to_vec()),
        RecurrentKind::Gru => {
            let z: Vec<f64> = gate("update", state).iter().map(|&v| sigmoid(v)).collect();
            let r: Vec<f64> = gate("reset", state).iter().map(|&v| sigmoid(v)).collect();
            let rh: Vec<f64> = r.iter().zip(state).map(|(&a, &b)| a * b).collect();
            let c: Vec<f64> = gate("cand", &rh).iter().map(|&v| v.tanh()).collect();
            let out = z
                .iter()
                .zip(state)
                .zip(&c)
                .map(|((&zi, &hi), &ci)| zi * hi + (1.0 - zi) * ci)
                .collect();
            (out, aux.to_vec())
        }
        RecurrentKind::Lstm => {
            let i: Vec<f64> = gate("input", state).iter().map(|&v| sigmoid(v)).collect();
            let f: Vec<f64> = gate("forget", state).iter().map(|&v| sigmoid(v)).collect();
            let o: Vec<f64> = gate("output", state).iter().map(|&v| sigmoid(v)).collect();
            let j: Vec<f64> = gate("cand", state).iter().map(|&v| v.tanh()).collect();
            let new_cell: Vec<f64> = f
                .iter()
                .zip(aux)
                .zip(i.iter().zip(&j))
                .map(|((&fi, &ci), (&ii, &ji))| fi * ci + ii * ji)
                .collect();
            let out = o.iter().zip(&new_cell).map(|(&oi, &ci)| oi * ci.tanh()).collect();
            (out, new_cell)
        }
    }
}

/// One propagation step of `model`'s cell, computed densely. `layer` selects
/// the parameter prefix; `h` is the `[n x d_in]` input. For the gated cell,
/// `aux` carries the LSTM cell state (zeros to start).
pub fn cell_oracle(
    model: &Model,
    store: &ParameterStore,
    graph: &TypedGraph,
    layer: usize,
    h: &[f64],
    aux: &mut Vec<f64>,
) -> Vec<f64> {
    let cfg = &model.config;
    let n = graph.num_nodes;
    let d_in = if n == 0 { 0 } else { h.len() / n };
    let hidden = cfg.hidden_size;
    let sigma = cfg.activation;
    let lp = format!("layer{layer}");
    let adj = adjacency(graph);
    let num_types = graph.edge_types.len();

    // per-target per-type counts
    let count = |v: usize, l: usize| -> u32 { (0..n).map(|u| adj[l][u * n + v]).sum() };

    let mut out = vec![0.0; n * hidden];
    match cfg.cell.kind {
        CellKind::Rgcn => {
            let ws: Vec<Matrix> = graph
                .edge_types
                .iter()
                .map(|t| param(store, &format!("{lp}/type_{t}/W")))
                .collect();
            for v in 0..n {
                let mut acc = vec![0.0; hidden];
                for l in 0..num_types {
                    let c = count(v, l);
                    if c == 0 {
                        continue;
                    }
                    let mut type_sum = vec![0.0; hidden];
                    for u in 0..n {
                        let m = adj[l][u * n + v];
                        if m > 0 {
                            add_assign(&mut type_sum, &scale(&vec_mat(row(h, u, d_in), &ws[l]), m as f64));
                        }
                    }
                    add_assign(&mut acc, &scale(&type_sum, 1.0 / c as f64));
                }
                out[v * hidden..(v + 1) * hidden].copy_from_slice(&act(sigma, &acc));
            }
        }
        CellKind::Ggnn => {
            let ws: Vec<Matrix> = graph
                .edge_types
                .iter()
                .map(|t| param(store, &format!("{lp}/type_{t}/W")))
                .collect();
            let mut new_aux = vec![0.0; aux.len()];
            for v in 0..n {
                let mut msg = vec![0.0; hidden];
                for l in 0..num_types {
                    for u in 0..n {
                        let m = adj[l][u * n + v];
                        if m > 0 {
                            add_assign(&mut msg, &scale(&vec_mat(row(h, u, d_in), &ws[l]), m as f64));
                        }
                    }
                }
                let (hv, cv) = recurrent_apply(
                    store,
                    &format!("{lp}/cell"),
                    cfg.cell.rnn_cell,
                    row(h, v, d_in),
                    if aux.is_empty() { &[] } else { row(aux, v, hidden) },
                    &msg,
                );
                out[v * hidden..(v + 1) * hidden].copy_from_slice(&hv);
                if !aux.is_empty() {
                    new_aux[v * hidden..(v + 1) * hidden].copy_from_slice(&cv);
                }
            }
            *aux = new_aux;
        }
        CellKind::Rgat => {
            let heads = cfg.cell.num_heads;
            let head_dim = hidden / heads;
            for k in 0..heads {
                let ws: Vec<Matrix> = graph
                    .edge_types
                    .iter()
                    .map(|t| param(store, &format!("{lp}/head{k}/type_{t}/W")))
                    .collect();
                let alphas: Vec<Matrix> = graph
                    .edge_types
                    .iter()
                    .map(|t| param(store, &format!("{lp}/head{k}/type_{t}/alpha")))
                    .collect();
                for v in 0..n {
                    // collect incoming (type, source, multiplicity)
                    let mut entries: Vec<(usize, usize, u32)> = Vec::new();
                    for l in 0..num_types {
                        for u in 0..n {
                            let m = adj[l][u * n + v];
                            if m > 0 {
                                entries.push((l, u, m));
                            }
                        }
                    }
                    let mut denom = 0.0;
                    let mut weights = Vec::with_capacity(entries.len());
                    for &(l, u, m) in &entries {
                        let wu = vec_mat(row(h, u, d_in), &ws[l]);
                        let wv = vec_mat(row(h, v, d_in), &ws[l]);
                        let alpha = &alphas[l];
                        // alpha is stored [2*head_dim x 1]
                        let mut logit = 0.0;
                        for j in 0..head_dim {
                            logit += alpha.2[j] * wu[j];
                            logit += alpha.2[head_dim + j] * wv[j];
                        }
                        let e = act1(Activation::LeakyRelu, logit).exp();
                        denom += m as f64 * e;
                        weights.push(e);
                    }
                    let mut acc = vec![0.0; head_dim];
                    for (&(l, u, m), &e) in entries.iter().zip(&weights) {
                        let wu = vec_mat(row(h, u, d_in), &ws[l]);
                        add_assign(&mut acc, &scale(&wu, m as f64 * e / denom));
                    }
                    let acc = act(sigma, &acc);
                    out[v * hidden + k * head_dim..v * hidden + (k + 1) * head_dim].copy_from_slice(&acc);
                }
            }
        }
        CellKind::Rgin => {
            for v in 0..n {
                let mut acc = vec![0.0; hidden];
                for (l, t) in graph.edge_types.iter().enumerate() {
                    for u in 0..n {
                        let m = adj[l][u * n + v];
                        if m > 0 {
                            let msg = mlp_apply(store, &format!("{lp}/type_{t}/mlp"), sigma, row(h, u, d_in));
                            add_assign(&mut acc, &scale(&msg, m as f64));
                        }
                    }
                }
                out[v * hidden..(v + 1) * hidden].copy_from_slice(&act(sigma, &acc));
            }
        }
        CellKind::GnnMlp0 | CellKind::GnnMlp1 => {
            for v in 0..n {
                let mut acc = vec![0.0; hidden];
                for (l, t) in graph.edge_types.iter().enumerate() {
                    let c = count(v, l);
                    if c == 0 {
                        continue;
                    }
                    let mut type_sum = vec![0.0; hidden];
                    for u in 0..n {
                        let m = adj[l][u * n + v];
                        if m > 0 {
                            let mut pair = row(h, u, d_in).to_vec();
                            pair.extend_from_slice(row(h, v, d_in));
                            let msg = mlp_apply(store, &format!("{lp}/type_{t}/mlp"), sigma, &pair);
                            add_assign(&mut type_sum, &scale(&msg, m as f64));
                        }
                    }
                    add_assign(&mut acc, &scale(&type_sum, 1.0 / c as f64));
                }
                out[v * hidden..(v + 1) * hidden].copy_from_slice(&act(sigma, &acc));
            }
        }
        CellKind::Rgdcn => {
            let chunks = cfg.cell.rgdcn_chunks;
            let k_dim = hidden / chunks;
            for v in 0..n {
                for c in 0..chunks {
                    let mut acc = vec![0.0; k_dim];
                    for (l, t) in graph.edge_types.iter().enumerate() {
                        let f_prefix = match cfg.cell.rgdcn_tying {
                            RgdcnTying::Shared => format!("{lp}/type_{t}/f"),
                            _ => format!("{lp}/type_{t}/chunk{c}/f"),
                        };
                        let fw = param(store, &format!("{f_prefix}/weight"));
                        let fb = param(store, &format!("{f_prefix}/bias"));
                        let f_in: &[f64] = match cfg.cell.rgdcn_tying {
                            RgdcnTying::ChunkLocal => &row(h, v, d_in)[c * k_dim..(c + 1) * k_dim],
                            _ => row(h, v, d_in),
                        };
                        let mut mat = vec_mat(f_in, &fw);
                        add_assign(&mut mat, &fb.2); // row-major k x k
                        for u in 0..n {
                            let m = adj[l][u * n + v];
                            if m > 0 {
                                let hu_c = &row(h, u, d_in)[c * k_dim..(c + 1) * k_dim];
                                let mut msg = vec![0.0; k_dim];
                                for i in 0..k_dim {
                                    for j in 0..k_dim {
                                        msg[i] += mat[i * k_dim + j] * hu_c[j];
                                    }
                                }
                                add_assign(&mut acc, &scale(&msg, m as f64));
                            }
                        }
                    }
                    let acc = act(sigma, &acc);
                    out[v * hidden + c * k_dim..v * hidden + (c + 1) * k_dim].copy_from_slice(&acc);
                }
            }
        }
        CellKind::GnnFilm => {
            for v in 0..n {
                let mut acc = vec![0.0; hidden];
                for (l, t) in graph.edge_types.iter().enumerate() {
                    let w = param(store, &format!("{lp}/type_{t}/W"));
                    let gw = param(store, &format!("{lp}/type_{t}/film_g/weight"));
                    let gb = param(store, &format!("{lp}/type_{t}/film_g/bias"));
                    let mut g_out = vec_mat(row(h, v, d_in), &gw);
                    add_assign(&mut g_out, &gb.2);
                    let beta = &g_out[..hidden];
                    let gamma = &g_out[hidden..];
                    for u in 0..n {
                        let m = adj[l][u * n + v];
                        if m > 0 {
                            let wu = vec_mat(row(h, u, d_in), &w);
                            let modulated: Vec<f64> = wu
                                .iter()
                                .zip(gamma)
                                .zip(beta)
                                .map(|((&x, &g), &b)| g * x + b)
                                .collect();
                            let msg = match cfg.cell.film_mode {
                                FilmMode::After => modulated,
                                FilmMode::Before => act(sigma, &modulated),
                            };
                            add_assign(&mut acc, &scale(&msg, m as f64));
                        }
                    }
                }
                let final_v = match cfg.cell.film_mode {
                    FilmMode::After => act(sigma, &acc),
                    FilmMode::Before => {
                        let mut x = acc;
                        for (j, step) in cfg.cell.film_post.iter().enumerate() {
                            x = match step {
                                FilmPostOp::Identity => x,
                                FilmPostOp::Tanh => x.iter().map(|&v| v.tanh()).collect(),
                                FilmPostOp::Linear => {
                                    let w = param(store, &format!("{lp}/film_post/{j}/weight"));
                                    let b = param(store, &format!("{lp}/film_post/{j}/bias"));
                                    let mut y = vec_mat(&x, &w);
                                    add_assign(&mut y, &b.2);
                                    y
                                }
                                FilmPostOp::LayerNorm => {
                                    let gain = param(store, &format!("{lp}/film_post/{j}/gain"));
                                    let bias = param(store, &format!("{lp}/film_post/{j}/bias"));
                                    layer_norm_row(&x, &gain.2, &bias.2)
                                }
                            };
                        }
                        x
                    }
                };
                out[v * hidden..(v + 1) * hidden].copy_from_slice(&final_v);
            }
        }
    }
    out
}

fn layer_norm_row(x: &[f64], gain: &[f64], bias: &[f64]) -> Vec<f64> {
    let d = x.len() as f64;
    let mean = x.iter().sum::<f64>() / d;
    let var = x.iter().map(|&v| (v - mean) * (v - mean)).sum::<f64>() / d;
    let inv = 1.0 / (var + 1e-5).sqrt();
    x.iter()
        .zip(gain)
        .zip(bias)
        .map(|((&v, &g), &b)| (v - mean) * inv * g + b)
        .collect()
}
