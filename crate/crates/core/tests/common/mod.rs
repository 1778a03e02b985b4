#![allow(dead_code)]

pub mod oracle;

use d2stream::{Graph, ParamStore, Tensor, Var};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(
        shape.to_vec(),
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect(),
    )
    .unwrap()
}

pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// Worst relative error between the analytic gradient of `f` at `x` and
/// central differences.
pub fn leaf_gradcheck(x: &Tensor, step: f64, f: &dyn Fn(&mut Graph<'_>, Var) -> Var) -> f64 {
    leaf_gradcheck_in(&ParamStore::new(), x, step, f)
}

/// As [`leaf_gradcheck`], with `f` free to read parameters from `store`.
pub fn leaf_gradcheck_in(
    store: &ParamStore,
    x: &Tensor,
    step: f64,
    f: &dyn Fn(&mut Graph<'_>, Var) -> Var,
) -> f64 {
    let analytic = {
        let mut g = Graph::new(store);
        let v = g.leaf(x.clone());
        let loss = f(&mut g, v);
        let grads = g.backward(loss).unwrap();
        grads
            .wrt(v)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(x.shape()))
    };
    let eval = |t: Tensor| {
        let mut g = Graph::new(store);
        let v = g.leaf(t);
        let loss = f(&mut g, v);
        g.value(loss).data()[0]
    };
    let mut worst: f64 = 0.0;
    for k in 0..x.len() {
        let mut p = x.clone();
        p.data_mut()[k] += step;
        let mut m = x.clone();
        m.data_mut()[k] -= step;
        let numeric = (eval(p) - eval(m)) / (2.0 * step);
        worst = worst.max(rel_err(analytic.data()[k], numeric));
    }
    worst
}

/// `sum(w * y)` for a fixed random weighting, so every output element
/// reaches the loss with a distinct coefficient.
pub fn weighted_sum(g: &mut Graph<'_>, y: Var, seed: u64) -> Var {
    let w = rand_tensor(g.shape(y), &mut rng(seed));
    let w = g.input(w);
    let prod = g.mul(y, w).unwrap();
    g.sum_all(prod)
}

pub fn naive_matmul(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            let mut acc = 0.0;
            for p in 0..k {
                acc += a[i * k + p] * b[p * n + j];
            }
            out[i * n + j] = acc;
        }
    }
    out
}

/// Overwrites every parameter with U(-0.5, 0.5) so zero-initialised biases
/// and unit norms do not hide mistakes.
pub fn randomize(store: &mut ParamStore, seed: u64) {
    let mut r = rng(seed);
    let ids: Vec<_> = store.ids().collect();
    for id in ids {
        for v in store.get_mut(id).value.data_mut() {
            *v = r.random_range(-0.5..0.5);
        }
    }
}
