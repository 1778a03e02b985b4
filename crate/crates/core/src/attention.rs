//! Self- and cross-attention interaction layers.
//!
//! Both layers use post-norm residual blocks:
//!
//! ```text
//! Z   = LN(X + MHA(X, Y, Y))
//! out = LN(Z + MLP(Z))
//! ```
//!
//! with `Y = X` for the self-attention layer. Inputs are `[B, L, D]`; attention
//! runs over `L` independently for every batch entry.

use rand::Rng;

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct AttentionConfig {
    pub model_dim: usize,
    pub num_heads: usize,
    pub mlp_hidden: usize,
}

impl AttentionConfig {
    /// `mlp_hidden` defaults to four times the model width.
    pub fn new(model_dim: usize, num_heads: usize) -> Result<Self> {
        let cfg = AttentionConfig {
            model_dim,
            num_heads,
            mlp_hidden: 4 * model_dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model_dim == 0 || self.num_heads == 0 || self.mlp_hidden == 0 {
            return Err(Error::Config(format!(
                "attention dims must be >= 1: {self:?}"
            )));
        }
        if self.model_dim % self.num_heads != 0 {
            return Err(Error::Config(format!(
                "model_dim {} not divisible by num_heads {}",
                self.model_dim, self.num_heads
            )));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.num_heads
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Projection {
    pub weight: ParamId,
    pub bias: ParamId,
}

impl Projection {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        fan_in: usize,
        fan_out: usize,
        rng: &mut R,
    ) -> Self {
        Projection {
            weight: store.add_weight(format!("{name}.weight"), fan_in, fan_out, rng),
            bias: store.add_zeros(format!("{name}.bias"), &[fan_out]),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let w = g.param(self.weight);
        let b = g.param(self.bias);
        g.linear(x, w, Some(b))
    }
}

#[derive(Clone, Copy, Debug)]
pub struct Norm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl Norm {
    pub fn new(store: &mut ParamStore, name: &str, dim: usize) -> Self {
        Norm {
            gamma: store.add_ones(format!("{name}.gamma"), &[dim]),
            beta: store.add_zeros(format!("{name}.beta"), &[dim]),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let gamma = g.param(self.gamma);
        let beta = g.param(self.beta);
        g.layer_norm(x, gamma, beta, LAYER_NORM_EPS)
    }
}

/// Two-layer GELU feed-forward network.
#[derive(Clone, Copy, Debug)]
pub struct Mlp {
    pub fc1: Projection,
    pub fc2: Projection,
}

impl Mlp {
    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}

/// Query/key/value/output projections of one multi-head attention block.
#[derive(Clone, Copy, Debug)]
pub struct MultiHead {
    pub q: Projection,
    pub k: Projection,
    pub v: Projection,
    pub out: Projection,
}

/// Result of a multi-head attention pass; `weights` is `[B, H, Lq, Lk]`.
#[derive(Clone, Copy, Debug)]
pub struct AttentionOutput {
    pub output: Var,
    pub weights: Var,
}

/// Attention layer shared by SAL and CAL: one multi-head block, an MLP and
/// two layer norms.
#[derive(Clone, Copy, Debug)]
pub struct AttentionLayer {
    pub cfg: AttentionConfig,
    pub heads: MultiHead,
    pub mlp: Mlp,
    pub norm1: Norm,
    pub norm2: Norm,
}

/// Self-attention interaction layer.
#[derive(Clone, Copy, Debug)]
pub struct SALayer(pub AttentionLayer);

/// Cross-attention interaction layer: queries from the first modality,
/// keys and values from the second.
#[derive(Clone, Copy, Debug)]
pub struct CALayer(pub AttentionLayer);

impl AttentionLayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.model_dim;
        let heads = MultiHead {
            q: Projection::new(store, &format!("{name}.attn.q"), d, d, rng),
            k: Projection::new(store, &format!("{name}.attn.k"), d, d, rng),
            v: Projection::new(store, &format!("{name}.attn.v"), d, d, rng),
            out: Projection::new(store, &format!("{name}.attn.out"), d, d, rng),
        };
        let mlp = Mlp {
            fc1: Projection::new(store, &format!("{name}.mlp.fc1"), d, cfg.mlp_hidden, rng),
            fc2: Projection::new(store, &format!("{name}.mlp.fc2"), cfg.mlp_hidden, d, rng),
        };
        Ok(AttentionLayer {
            cfg,
            heads,
            mlp,
            norm1: Norm::new(store, &format!("{name}.ln1"), d),
            norm2: Norm::new(store, &format!("{name}.ln2"), d),
        })
    }

    fn check(&self, g: &Graph<'_>, x: Var) -> Result<[usize; 3]> {
        let s = g.shape(x);
        if s.len() != 3 || s[2] != self.cfg.model_dim {
            return Err(Error::dim(
                "attention input",
                s,
                &[0, 0, self.cfg.model_dim],
            ));
        }
        Ok([s[0], s[1], s[2]])
    }

    /// Scaled dot-product multi-head attention of `query` over `context`.
    pub fn multi_head(
        &self,
        g: &mut Graph<'_>,
        query: Var,
        context: Var,
    ) -> Result<AttentionOutput> {
        let [b, lq, d] = self.check(g, query)?;
        let [bc, lk, _] = self.check(g, context)?;
        if b != bc {
            return Err(Error::dim(
                "attention batch",
                g.shape(query),
                g.shape(context),
            ));
        }
        let h = self.cfg.num_heads;
        let hd = self.cfg.head_dim();

        let q = self.heads.q.apply(g, query)?;
        let k = self.heads.k.apply(g, context)?;
        let v = self.heads.v.apply(g, context)?;

        let q = g.reshape(q, &[b, lq, h, hd])?;
        let q = g.permute(q, &[0, 2, 1, 3])?;
        let k = g.reshape(k, &[b, lk, h, hd])?;
        let kt = g.permute(k, &[0, 2, 3, 1])?;
        let v = g.reshape(v, &[b, lk, h, hd])?;
        let v = g.permute(v, &[0, 2, 1, 3])?;

        let scores = g.matmul(q, kt)?;
        let scores = g.scale(scores, 1.0 / (hd as f64).sqrt());
        let weights = g.softmax(scores, 3)?;
        let ctx = g.matmul(weights, v)?;
        let ctx = g.permute(ctx, &[0, 2, 1, 3])?;
        let ctx = g.reshape(ctx, &[b, lq, d])?;
        let output = self.heads.out.apply(g, ctx)?;
        Ok(AttentionOutput { output, weights })
    }

    /// `LN(Z + MLP(Z))` with `Z = LN(x + attended)`.
    fn residual_blocks(&self, g: &mut Graph<'_>, x: Var, attended: Var) -> Result<Var> {
        let z = g.add(x, attended)?;
        let z = self.norm1.apply(g, z)?;
        let m = self.mlp.apply(g, z)?;
        let out = g.add(z, m)?;
        self.norm2.apply(g, out)
    }
}

impl SALayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        AttentionLayer::new(store, name, cfg, rng).map(SALayer)
    }

    pub fn mhsa(&self, g: &mut Graph<'_>, x: Var) -> Result<AttentionOutput> {
        self.0.multi_head(g, x, x)
    }

    pub fn forward(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let attn = self.mhsa(g, x)?;
        self.0.residual_blocks(g, x, attn.output)
    }
}

impl CALayer {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        cfg: AttentionConfig,
        rng: &mut R,
    ) -> Result<Self> {
        AttentionLayer::new(store, name, cfg, rng).map(CALayer)
    }

    pub fn mhca(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<AttentionOutput> {
        self.0.multi_head(g, x, y)
    }

    /// Output length follows the query `x`.
    pub fn forward(&self, g: &mut Graph<'_>, x: Var, y: Var) -> Result<Var> {
        let attn = self.mhca(g, x, y)?;
        self.0.residual_blocks(g, x, attn.output)
    }
}
