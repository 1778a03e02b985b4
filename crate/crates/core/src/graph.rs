//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records one forward pass. Every operation appends a node
//! holding its output value plus whatever it needs for the backward rule.
//! [`Graph::backward`] walks the tape once in reverse and returns a
//! [`Gradients`] set that callers add into their [`ParamStore`] explicitly,
//! so the store itself stays borrowed immutably during the forward pass and
//! independent graphs can share one store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{check_perm, inverse_perm, permute_into, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;
const NORM_FLOOR: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Input,
    Leaf,
    Param(ParamId),
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
        // (a batch index, b batch index) for each output batch slice
        pairs: Vec<(usize, usize)>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Add {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        c: f64,
    },
    Gelu(Var),
    Sigmoid(Var),
    Tanh(Var),
    Softmax {
        x: Var,
        outer: usize,
        n: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape(Var),
    Concat {
        parts: Vec<Var>,
        widths: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Slice {
        x: Var,
        outer: usize,
        axis_len: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    SelectRows {
        x: Var,
        rows: Vec<usize>,
    },
    Repeat {
        x: Var,
        times: usize,
    },
    SumAll(Var),
    MeanAxis0 {
        x: Var,
        n: usize,
    },
    MaskedBce {
        x: Var,
        labels: Vec<f64>,
        mask: Vec<f64>,
        count: f64,
    },
    L2NormalizeRows {
        x: Var,
        norms: Vec<f64>,
    },
    DiagXent {
        x: Var,
        probs: Vec<f64>,
    },
    Unfold {
        x: Var,
        kernel: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// One recorded forward computation.
pub struct Graph<'s> {
    store: &'s ParamStore,
    nodes: Vec<Node>,
    param_nodes: HashMap<ParamId, Var>,
}

impl<'s> Graph<'s> {
    pub fn new(store: &'s ParamStore) -> Self {
        Graph {
            store,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
        }
    }

    pub fn store(&self) -> &'s ParamStore {
        self.store
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Constant input; no gradient flows into it.
    pub fn input(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Input, false)
    }

    /// Input whose gradient is reported by [`Gradients::wrt`].
    pub fn leaf(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// The node for a stored parameter. Repeated calls return the same node.
    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_nodes.get(&id) {
            return v;
        }
        let value = self.store.value(id).clone();
        let v = self.push(value, Op::Param(id), true);
        self.param_nodes.insert(id, v);
        v
    }

    /// Batched matrix product `[.., M, K] x [.., K, N] -> [.., M, N]`.
    /// Leading axes broadcast when equal or 1; missing leading axes count as 1.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(Error::dim("matmul", &sa, &sb));
        }
        let ba = &sa[..sa.len() - 2];
        let bb = &sb[..sb.len() - 2];
        let rank = ba.len().max(bb.len());
        let pad = |s: &[usize]| -> Vec<usize> {
            let mut p = vec![1; rank - s.len()];
            p.extend_from_slice(s);
            p
        };
        let (pa, pb) = (pad(ba), pad(bb));
        let mut out_batch = Vec::with_capacity(rank);
        for (&x, &y) in pa.iter().zip(&pb) {
            if x != y && x != 1 && y != 1 {
                return Err(Error::dim("matmul", &sa, &sb));
            }
            out_batch.push(x.max(y));
        }
        let nb: usize = out_batch.iter().product();
        let mut pairs = Vec::with_capacity(nb);
        let mut idx = vec![0usize; rank];
        for _ in 0..nb {
            let (mut ia, mut ib) = (0, 0);
            for ax in 0..rank {
                ia = ia * pa[ax] + if pa[ax] == 1 { 0 } else { idx[ax] };
                ib = ib * pb[ax] + if pb[ax] == 1 { 0 } else { idx[ax] };
            }
            pairs.push((ia, ib));
            for ax in (0..rank).rev() {
                idx[ax] += 1;
                if idx[ax] < out_batch[ax] {
                    break;
                }
                idx[ax] = 0;
            }
        }
        let da = self.data(a);
        let db = self.data(b);
        let mut out = vec![0.0; nb * m * n];
        for (o, &(ia, ib)) in pairs.iter().enumerate() {
            mm_acc(
                &da[ia * m * k..(ia + 1) * m * k],
                &db[ib * k * n..(ib + 1) * k * n],
                &mut out[o * m * n..(o + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = out_batch;
        shape.extend_from_slice(&[m, n]);
        let needs = self.ng(a) || self.ng(b);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            },
            needs,
        ))
    }

    /// Affine map over the last axis: `x . w + b`, `w: [D_in, D_out]`, `b: [D_out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sw = self.shape(w).to_vec();
        if sw.len() != 2 || sx[sx.len() - 1] != sw[0] {
            return Err(Error::dim("linear", &sx, &sw));
        }
        let (din, dout) = (sw[0], sw[1]);
        if let Some(b) = b {
            if self.shape(b) != [dout] {
                return Err(Error::dim("linear bias", self.shape(b), &[dout]));
            }
        }
        let rows = self.nodes[x.0].value.len() / din;
        let mut out = vec![0.0; rows * dout];
        if let Some(b) = b {
            let bd = self.data(b);
            for r in 0..rows {
                out[r * dout..(r + 1) * dout].copy_from_slice(bd);
            }
        }
        mm_acc(self.data(x), self.data(w), &mut out, rows, din, dout);
        let mut shape = sx;
        *shape.last_mut().unwrap() = dout;
        let needs = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Linear { x, w, b }, needs))
    }

    /// Elementwise sum. `b`'s shape must equal `a`'s or be a trailing suffix of
    /// it, in which case `b` is broadcast over the leading axes of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::dim("add", sa, sb));
        }
        let db = self.data(b);
        let nb = db.len();
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % nb])
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Add { a, b }, needs))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::dim("mul", self.shape(a), self.shape(b)));
        }
        let out: Vec<f64> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let needs = self.ng(a) || self.ng(b);
        Ok(self.push(value, Op::Mul { a, b }, needs))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        let needs = self.ng(x);
        self.push(value, Op::Scale { x, c }, needs)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[x.0].value;
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
    }

    /// GELU, tanh form.
    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| {
            0.5 * v * (1.0 + (GELU_C * (v + GELU_A * v * v * v)).tanh())
        });
        let needs = self.ng(x);
        self.push(value, Op::Gelu(x), needs)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let value = self.map(x, sigmoid);
        let needs = self.ng(x);
        self.push(value, Op::Sigmoid(x), needs)
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::tanh);
        let needs = self.ng(x);
        self.push(value, Op::Tanh(x), needs)
    }

    /// Softmax along `axis`, max-subtracted.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {shape:?}"
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let n = shape[axis];
        let inner: usize = shape[axis + 1..].iter().product();
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                softmax_strided(&mut out, base, n, inner);
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Softmax { x, outer, n, inner }, needs))
    }

    /// Normalizes each position over the last axis, then applies `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        if self.shape(gamma) != [d] || self.shape(beta) != [d] {
            return Err(Error::dim("layer_norm", &shape, self.shape(gamma)));
        }
        if eps <= 0.0 {
            return Err(Error::Contract(format!(
                "layer_norm eps must be > 0, got {eps}"
            )));
        }
        let xd = self.data(x);
        let g = self.data(gamma);
        let bt = self.data(beta);
        let rows = xd.len() / d;
        let mut xhat = vec![0.0; xd.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let is = 1.0 / (var + eps).sqrt();
            inv_std[r] = is;
            for j in 0..d {
                let h = (row[j] - mean) * is;
                xhat[r * d + j] = h;
                out[r * d + j] = g[j] * h + bt[j];
            }
        }
        let value = Tensor::new(shape, out)?;
        let needs = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            needs,
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        check_perm(perm, shape.len())?;
        let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
        let mut out = vec![0.0; self.data(x).len()];
        permute_into(self.data(x), &shape, perm, &mut out);
        let value = Tensor::new(out_shape, out)?;
        let needs = self.ng(x);
        Ok(self.push(
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
            needs,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        let needs = self.ng(x);
        Ok(self.push(value, Op::Reshape(x), needs))
    }

    /// Concatenation along `axis`; all other axes must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(
                *parts
                    .first()
                    .ok_or_else(|| Error::Contract("concat of nothing".into()))?,
            )
            .to_vec();
        if axis >= first.len() {
            return Err(Error::Contract(format!("concat axis {axis} out of range")));
        }
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != first.len()
                || s[..axis] != first[..axis]
                || s[axis + 1..] != first[axis + 1..]
            {
                return Err(Error::dim("concat", &first, s));
            }
            total += s[axis];
        }
        let outer: usize = first[..axis].iter().product();
        let inner: usize = first[axis + 1..].iter().product();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.data(p)[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        let needs = parts.iter().any(|&p| self.ng(p));
        let widths = parts.iter().map(|&p| self.shape(p)[axis]).collect();
        let value = Tensor::new(shape, out)?;
        Ok(self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                widths,
                outer,
                inner,
            },
            needs,
        ))
    }

    /// Range `[start, start+len)` along `axis`.
    pub fn slice(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() || len == 0 || start + len > shape[axis] {
            return Err(Error::Contract(format!(
                "slice axis {axis} [{start}, {}) invalid for shape {shape:?}",
                start + len
            )));
        }
        let outer: usize = shape[..axis].iter().product();
        let inner: usize = shape[axis + 1..].iter().product();
        let axis_len = shape[axis];
        let xd = self.data(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = (o * axis_len + start) * inner;
            out.extend_from_slice(&xd[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let needs = self.ng(x);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            },
            needs,
        ))
    }

    /// Gathers entries of axis 0; indices may repeat.
    pub fn select_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if rows.is_empty() || rows.iter().any(|&r| r >= shape[0]) {
            return Err(Error::Contract(format!(
                "row selection {rows:?} invalid for shape {shape:?}"
            )));
        }
        let inner: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut out = Vec::with_capacity(rows.len() * inner);
        for &r in rows {
            out.extend_from_slice(&xd[r * inner..(r + 1) * inner]);
        }
        let mut out_shape = shape;
        out_shape[0] = rows.len();
        let needs = self.ng(x);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.push(
            value,
            Op::SelectRows {
                x,
                rows: rows.to_vec(),
            },
            needs,
        ))
    }

    /// Stacks `times` copies of `x` along a new leading axis.
    pub fn repeat(&mut self, x: Var, times: usize) -> Result<Var> {
        if times == 0 {
            return Err(Error::Contract("repeat count must be >= 1".into()));
        }
        let mut shape = vec![times];
        shape.extend_from_slice(self.shape(x));
        let xd = self.data(x);
        let mut out = Vec::with_capacity(xd.len() * times);
        for _ in 0..times {
            out.extend_from_slice(xd);
        }
        let needs = self.ng(x);
        let value = Tensor::new(shape, out)?;
        Ok(self.push(value, Op::Repeat { x, times }, needs))
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().sum();
        let needs = self.ng(x);
        self.push(Tensor::scalar(s), Op::SumAll(x), needs)
    }

    /// Mean over axis 0.
    pub fn mean_axis0(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let n = shape[0];
        let inner: usize = shape[1..].iter().product();
        let xd = self.data(x);
        let mut out = vec![0.0; inner];
        for r in 0..n {
            for (o, v) in out.iter_mut().zip(&xd[r * inner..(r + 1) * inner]) {
                *o += v;
            }
        }
        for o in &mut out {
            *o /= n as f64;
        }
        let out_shape = if shape.len() > 1 {
            shape[1..].to_vec()
        } else {
            vec![1]
        };
        let needs = self.ng(x);
        let value = Tensor::new(out_shape, out).expect("mean shape");
        self.push(value, Op::MeanAxis0 { x, n }, needs)
    }

    /// Mean binary cross-entropy with logits over positions where `mask` is
    /// nonzero. An all-zero mask gives exactly 0.
    pub fn masked_bce(&mut self, logits: Var, labels: &[f64], mask: &[f64]) -> Result<Var> {
        let n = self.data(logits).len();
        if labels.len() != n || mask.len() != n {
            return Err(Error::dim(
                "masked_bce",
                self.shape(logits),
                &[labels.len(), mask.len()],
            ));
        }
        let count: f64 = mask.iter().sum();
        let mut total = 0.0;
        if count > 0.0 {
            for ((&x, &y), &m) in self.data(logits).iter().zip(labels).zip(mask) {
                if m != 0.0 {
                    total += m * bce_with_logit(x, y);
                }
            }
            total /= count;
        }
        let needs = self.ng(logits);
        Ok(self.push(
            Tensor::scalar(total),
            Op::MaskedBce {
                x: logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            needs,
        ))
    }

    /// Scales each last-axis vector to unit Euclidean norm.
    pub fn l2_normalize_rows(&mut self, x: Var) -> Var {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().unwrap();
        let xd = self.data(x);
        let rows = xd.len() / d;
        let mut norms = Vec::with_capacity(rows);
        let mut out = vec![0.0; xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let nrm = row
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                .sqrt()
                .max(NORM_FLOOR);
            norms.push(nrm);
            for j in 0..d {
                out[r * d + j] = row[j] / nrm;
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new(shape, out).expect("shape preserved");
        self.push(value, Op::L2NormalizeRows { x, norms }, needs)
    }

    /// For a square `[N, N]` logit matrix, the mean over rows of the softmax
    /// cross-entropy whose target is the diagonal entry.
    pub fn diag_cross_entropy(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || shape[0] != shape[1] {
            return Err(Error::dim(
                "diag_cross_entropy",
                &shape,
                &[shape[0], shape[0]],
            ));
        }
        let n = shape[0];
        let mut probs = self.data(x).to_vec();
        let mut total = 0.0;
        for i in 0..n {
            let row = &mut probs[i * n..(i + 1) * n];
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            total += lse - row[i];
            for v in row.iter_mut() {
                *v = (*v - lse).exp();
            }
        }
        let needs = self.ng(x);
        Ok(self.push(
            Tensor::scalar(total / n as f64),
            Op::DiagXent { x, probs },
            needs,
        ))
    }

    /// `[T, C] -> [T, kernel*C]`: each row holds the `kernel` neighbouring
    /// rows centred on it, zero-padded at the ends (odd kernels only).
    pub fn unfold_rows(&mut self, x: Var, kernel: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() != 2 || kernel % 2 == 0 {
            return Err(Error::Contract(format!(
                "unfold_rows needs a rank-2 input and odd kernel, got {shape:?} / {kernel}"
            )));
        }
        let (t_len, c) = (shape[0], shape[1]);
        let pad = kernel / 2;
        let xd = self.data(x);
        let mut out = vec![0.0; t_len * kernel * c];
        for t in 0..t_len {
            for j in 0..kernel {
                let src = t as isize + j as isize - pad as isize;
                if src >= 0 && (src as usize) < t_len {
                    let s = src as usize;
                    out[(t * kernel + j) * c..(t * kernel + j + 1) * c]
                        .copy_from_slice(&xd[s * c..(s + 1) * c]);
                }
            }
        }
        let needs = self.ng(x);
        let value = Tensor::new(vec![t_len, kernel * c], out)?;
        Ok(self.push(value, Op::Unfold { x, kernel }, needs))
    }

    /// Reverse sweep from a single-element `loss` node.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);
        let mut out = Gradients::default();
        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            self.backprop(i, g, &mut grads, &mut out);
        }
        out.params.sort_by_key(|(id, _)| *id);
        Ok(out)
    }

    fn backprop(
        &self,
        index: usize,
        g: Vec<f64>,
        grads: &mut [Option<Vec<f64>>],
        out: &mut Gradients,
    ) {
        // Accumulates `f`'s contribution into the gradient of `v`, if needed.
        macro_rules! acc {
            ($v:expr, |$buf:ident| $body:expr) => {{
                let v: Var = $v;
                if self.ng(v) {
                    let len = self.nodes[v.0].value.len();
                    let $buf = grads[v.0].get_or_insert_with(|| vec![0.0; len]);
                    $body;
                }
            }};
        }
        let node = &self.nodes[index];
        match &node.op {
            Op::Input => {}
            Op::Leaf => {
                let shape = node.value.shape().to_vec();
                out.leaves
                    .insert(Var(index), Tensor::new(shape, g).expect("leaf grad"));
            }
            Op::Param(id) => {
                let shape = node.value.shape().to_vec();
                out.params
                    .push((*id, Tensor::new(shape, g).expect("param grad")));
            }
            Op::MatMul {
                a,
                b,
                m,
                k,
                n,
                pairs,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc!(*a, |buf| for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    mm_bt_acc(
                        &g[o * m * n..(o + 1) * m * n],
                        &bd[ib * k * n..(ib + 1) * k * n],
                        &mut buf[ia * m * k..(ia + 1) * m * k],
                        m,
                        k,
                        n,
                    );
                });
                acc!(*b, |buf| for (o, &(ia, ib)) in pairs.iter().enumerate() {
                    mm_at_acc(
                        &ad[ia * m * k..(ia + 1) * m * k],
                        &g[o * m * n..(o + 1) * m * n],
                        &mut buf[ib * k * n..(ib + 1) * k * n],
                        m,
                        k,
                        n,
                    );
                });
            }
            Op::Linear { x, w, b } => {
                let sw = self.shape(*w);
                let (din, dout) = (sw[0], sw[1]);
                let rows = g.len() / dout;
                let xd = self.data(*x);
                let wd = self.data(*w);
                acc!(*x, |buf| mm_bt_acc(&g, wd, buf, rows, din, dout));
                acc!(*w, |buf| mm_at_acc(xd, &g, buf, rows, din, dout));
                if let Some(b) = b {
                    acc!(*b, |buf| for r in 0..rows {
                        for (o, v) in buf.iter_mut().zip(&g[r * dout..(r + 1) * dout]) {
                            *o += v;
                        }
                    });
                }
            }
            Op::Add { a, b } => {
                acc!(*a, |buf| add_into(buf, &g));
                acc!(*b, |buf| {
                    let nb = buf.len();
                    for (i, v) in g.iter().enumerate() {
                        buf[i % nb] += v;
                    }
                });
            }
            Op::Mul { a, b } => {
                let ad = self.data(*a);
                let bd = self.data(*b);
                acc!(*a, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * bd[i];
                });
                acc!(*b, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * ad[i];
                });
            }
            Op::Scale { x, c } => {
                acc!(*x, |buf| for (o, v) in buf.iter_mut().zip(&g) {
                    *o += c * v;
                });
            }
            Op::Gelu(x) => {
                let xd = self.data(*x);
                acc!(*x, |buf| for i in 0..g.len() {
                    let v = xd[i];
                    let t = (GELU_C * (v + GELU_A * v * v * v)).tanh();
                    let d = 0.5 * (1.0 + t)
                        + 0.5 * v * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * v * v);
                    buf[i] += g[i] * d;
                });
            }
            Op::Sigmoid(x) => {
                let y = node.value.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * y[i] * (1.0 - y[i]);
                });
            }
            Op::Tanh(x) => {
                let y = node.value.data();
                acc!(*x, |buf| for i in 0..g.len() {
                    buf[i] += g[i] * (1.0 - y[i] * y[i]);
                });
            }
            Op::Softmax { x, outer, n, inner } => {
                let y = node.value.data();
                let (outer, n, inner) = (*outer, *n, *inner);
                acc!(*x, |buf| for o in 0..outer {
                    for i in 0..inner {
                        let base = o * n * inner + i;
                        let dot: f64 = (0..n)
                            .map(|j| g[base + j * inner] * y[base + j * inner])
                            .sum();
                        for j in 0..n {
                            let p = base + j * inner;
                            buf[p] += y[p] * (g[p] - dot);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let gd = self.data(*gamma);
                let d = gd.len();
                let rows = g.len() / d;
                acc!(*gamma, |buf| for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j] * xhat[r * d + j];
                    }
                });
                acc!(*beta, |buf| for r in 0..rows {
                    for j in 0..d {
                        buf[j] += g[r * d + j];
                    }
                });
                acc!(*x, |buf| for r in 0..rows {
                    let off = r * d;
                    let mut mean_dh = 0.0;
                    let mut mean_dh_h = 0.0;
                    for j in 0..d {
                        let dh = g[off + j] * gd[j];
                        mean_dh += dh;
                        mean_dh_h += dh * xhat[off + j];
                    }
                    mean_dh /= d as f64;
                    mean_dh_h /= d as f64;
                    for j in 0..d {
                        let dh = g[off + j] * gd[j];
                        buf[off + j] += inv_std[r] * (dh - mean_dh - xhat[off + j] * mean_dh_h);
                    }
                });
            }
            Op::Permute { x, perm } => {
                let inv = inverse_perm(perm);
                let out_shape = node.value.shape();
                acc!(*x, |buf| {
                    let mut tmp = vec![0.0; g.len()];
                    permute_into(&g, out_shape, &inv, &mut tmp);
                    add_into(buf, &tmp);
                });
            }
            Op::Reshape(x) => {
                acc!(*x, |buf| add_into(buf, &g));
            }
            Op::Concat {
                parts,
                widths,
                outer,
                inner,
            } => {
                let total: usize = widths.iter().sum();
                let mut offset = 0;
                for (&p, &width) in parts.iter().zip(widths) {
                    let chunk = width * inner;
                    acc!(p, |buf| for o in 0..*outer {
                        let src = (o * total + offset) * inner;
                        add_into(&mut buf[o * chunk..(o + 1) * chunk], &g[src..src + chunk]);
                    });
                    offset += width;
                }
            }
            Op::Slice {
                x,
                outer,
                axis_len,
                start,
                len,
                inner,
            } => {
                acc!(*x, |buf| for o in 0..*outer {
                    let dst = (o * axis_len + start) * inner;
                    let src = o * len * inner;
                    add_into(&mut buf[dst..dst + len * inner], &g[src..src + len * inner]);
                });
            }
            Op::SelectRows { x, rows } => {
                let inner = g.len() / rows.len();
                acc!(*x, |buf| for (i, &r) in rows.iter().enumerate() {
                    add_into(
                        &mut buf[r * inner..(r + 1) * inner],
                        &g[i * inner..(i + 1) * inner],
                    );
                });
            }
            Op::Repeat { x, times } => {
                let inner = g.len() / times;
                acc!(*x, |buf| for t in 0..*times {
                    add_into(buf, &g[t * inner..(t + 1) * inner]);
                });
            }
            Op::SumAll(x) => {
                acc!(*x, |buf| for o in buf.iter_mut() {
                    *o += g[0];
                });
            }
            Op::MeanAxis0 { x, n } => {
                let inv = 1.0 / *n as f64;
                acc!(*x, |buf| {
                    let inner = g.len();
                    for r in 0..*n {
                        for j in 0..inner {
                            buf[r * inner + j] += g[j] * inv;
                        }
                    }
                });
            }
            Op::MaskedBce {
                x,
                labels,
                mask,
                count,
            } => {
                if *count > 0.0 {
                    let xd = self.data(*x);
                    let s = g[0] / count;
                    acc!(*x, |buf| for i in 0..xd.len() {
                        if mask[i] != 0.0 {
                            buf[i] += s * mask[i] * (sigmoid(xd[i]) - labels[i]);
                        }
                    });
                }
            }
            Op::L2NormalizeRows { x, norms } => {
                let y = node.value.data();
                let d = y.len() / norms.len();
                acc!(*x, |buf| for (r, nrm) in norms.iter().enumerate() {
                    let off = r * d;
                    let dot: f64 = (0..d).map(|j| g[off + j] * y[off + j]).sum();
                    for j in 0..d {
                        buf[off + j] += (g[off + j] - y[off + j] * dot) / nrm;
                    }
                });
            }
            Op::DiagXent { x, probs } => {
                let n = self.shape(*x)[0];
                let s = g[0] / n as f64;
                acc!(*x, |buf| for i in 0..n {
                    for j in 0..n {
                        let target = if i == j { 1.0 } else { 0.0 };
                        buf[i * n + j] += s * (probs[i * n + j] - target);
                    }
                });
            }
            Op::Unfold { x, kernel } => {
                let shape = self.shape(*x);
                let (t_len, c) = (shape[0], shape[1]);
                let pad = kernel / 2;
                acc!(*x, |buf| for t in 0..t_len {
                    for j in 0..*kernel {
                        let src = t as isize + j as isize - pad as isize;
                        if src >= 0 && (src as usize) < t_len {
                            let s = src as usize;
                            add_into(
                                &mut buf[s * c..(s + 1) * c],
                                &g[(t * kernel + j) * c..(t * kernel + j + 1) * c],
                            );
                        }
                    }
                });
            }
        }
    }
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Debug, Default, Clone)]
pub struct Gradients {
    params: Vec<(ParamId, Tensor)>,
    leaves: HashMap<Var, Tensor>,
}

impl Gradients {
    /// Gradient with respect to a [`Graph::leaf`], if it was reached.
    pub fn wrt(&self, v: Var) -> Option<&Tensor> {
        self.leaves.get(&v)
    }

    pub fn param(&self, id: ParamId) -> Option<&Tensor> {
        self.params.iter().find(|(p, _)| *p == id).map(|(_, g)| g)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.params.iter().map(|(id, g)| (*id, g))
    }

    /// Adds every parameter gradient into the matching `ParamTensor::grad`.
    pub fn accumulate_into(&self, store: &mut ParamStore) {
        self.accumulate_scaled(store, 1.0);
    }

    pub fn accumulate_scaled(&self, store: &mut ParamStore, factor: f64) {
        for (id, g) in &self.params {
            let p = store.get_mut(*id);
            for (o, v) in p.grad.data_mut().iter_mut().zip(g.data()) {
                *o += factor * v;
            }
        }
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `max(x,0) - x*y + ln(1 + exp(-|x|))`.
pub(crate) fn bce_with_logit(x: f64, y: f64) -> f64 {
    x.max(0.0) - x * y + (-x.abs()).exp().ln_1p()
}

fn softmax_strided(buf: &mut [f64], base: usize, n: usize, stride: usize) {
    let mut max = f64::NEG_INFINITY;
    for j in 0..n {
        max = max.max(buf[base + j * stride]);
    }
    let mut sum = 0.0;
    for j in 0..n {
        let p = base + j * stride;
        buf[p] = (buf[p] - max).exp();
        sum += buf[p];
    }
    for j in 0..n {
        buf[base + j * stride] /= sum;
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

/// `out[M,N] += a[M,K] . b[K,N]`
fn mm_acc(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
}

/// `out[M,K] += g[M,N] . b[K,N]^T`
fn mm_bt_acc(g: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let brow = &b[p * n..(p + 1) * n];
            out[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
        }
    }
}

/// `out[K,N] += a[M,K]^T . g[M,N]`
fn mm_at_acc(a: &[f64], g: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let grow = &g[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let orow = &mut out[p * n..(p + 1) * n];
            for (o, gv) in orow.iter_mut().zip(grow) {
                *o += av * gv;
            }
        }
    }
}
