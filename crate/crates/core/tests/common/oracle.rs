//! Plain-loop reference implementations over `Vec<Vec<f64>>` rows.

use d2stream::attention::{AttentionLayer, Projection, LAYER_NORM_EPS};
use d2stream::{ParamId, ParamStore, Tensor};

pub type Rows = Vec<Vec<f64>>;

pub fn rows(t: &Tensor, b: usize) -> Rows {
    let s = t.shape();
    let (l, d) = (s[1], s[2]);
    (0..l)
        .map(|i| t.data()[(b * l + i) * d..(b * l + i + 1) * d].to_vec())
        .collect()
}

pub fn proj(store: &ParamStore, p: &Projection, x: &Rows) -> Rows {
    let w = store.value(p.weight);
    let bias = store.value(p.bias).data();
    let (fi, fo) = (w.shape()[0], w.shape()[1]);
    x.iter()
        .map(|row| {
            (0..fo)
                .map(|j| bias[j] + (0..fi).map(|i| row[i] * w.data()[i * fo + j]).sum::<f64>())
                .collect()
        })
        .collect()
}

pub fn ln(store: &ParamStore, gamma: ParamId, beta: ParamId, x: &Rows) -> Rows {
    let g = store.value(gamma).data();
    let b = store.value(beta).data();
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(i, v)| g[i] * (v - mean) / (var + LAYER_NORM_EPS).sqrt() + b[i])
                .collect()
        })
        .collect()
}

pub fn gelu(v: f64) -> f64 {
    0.5 * v * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (v + 0.044715 * v.powi(3))).tanh())
}

/// Loops over heads and query positions with an explicit softmax.
pub fn attention_oracle(
    store: &ParamStore,
    layer: &AttentionLayer,
    x: &Rows,
    y: &Rows,
) -> (Rows, Vec<Rows>) {
    let h = layer.cfg.num_heads;
    let hd = layer.cfg.head_dim();
    let q = proj(store, &layer.heads.q, x);
    let k = proj(store, &layer.heads.k, y);
    let v = proj(store, &layer.heads.v, y);
    let mut ctx = vec![vec![0.0; h * hd]; x.len()];
    let mut weights = vec![vec![vec![0.0; y.len()]; x.len()]; h];
    for head in 0..h {
        let cols = head * hd..(head + 1) * hd;
        for i in 0..x.len() {
            let scores: Vec<f64> = (0..y.len())
                .map(|j| cols.clone().map(|c| q[i][c] * k[j][c]).sum::<f64>() / (hd as f64).sqrt())
                .collect();
            let m = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = scores.iter().map(|s| (s - m).exp()).sum();
            for j in 0..y.len() {
                let a = (scores[j] - m).exp() / z;
                weights[head][i][j] = a;
                for c in cols.clone() {
                    ctx[i][c] += a * v[j][c];
                }
            }
        }
    }
    (proj(store, &layer.heads.out, &ctx), weights)
}

pub fn add(a: &Rows, b: &Rows) -> Rows {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(p, q)| p + q).collect())
        .collect()
}

/// Z = LN(x + MHA(x, y, y)); out = LN(Z + MLP(Z)), step by step.
pub fn layer_oracle(store: &ParamStore, layer: &AttentionLayer, x: &Rows, y: &Rows) -> Rows {
    let (attended, _) = attention_oracle(store, layer, x, y);
    let z = ln(
        store,
        layer.norm1.gamma,
        layer.norm1.beta,
        &add(x, &attended),
    );
    let hidden: Rows = proj(store, &layer.mlp.fc1, &z)
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let m = proj(store, &layer.mlp.fc2, &hidden);
    ln(store, layer.norm2.gamma, layer.norm2.beta, &add(&z, &m))
}

pub fn max_diff(a: &Rows, b: &Rows) -> f64 {
    a.iter()
        .flatten()
        .zip(b.iter().flatten())
        .map(|(p, q)| (p - q).abs())
        .fold(0.0, f64::max)
}
