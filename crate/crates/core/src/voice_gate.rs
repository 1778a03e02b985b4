//! Audio-only speech confidence and the score-correction rule built on it.
//!
//! For a main-model logit `s` and frame speech confidence `p`:
//!
//! ```text
//! alpha = min(p / (t_veto + eps), 1)   if p < t_veto
//!       = 1                            otherwise
//! s'    = s * ((1 - gamma) + gamma * alpha)   if s > t_main
//!       = s                                   otherwise
//! ```

use rand::Rng;

use crate::attention::Projection;
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GateParams {
    pub t_main: f64,
    pub t_veto: f64,
    pub gamma: f64,
    pub eps: f64,
}

impl Default for GateParams {
    fn default() -> Self {
        GateParams {
            t_main: 0.0,
            t_veto: 0.06,
            gamma: 0.8,
            eps: 1e-6,
        }
    }
}

impl GateParams {
    pub fn validate(&self) -> Result<()> {
        if !self.t_main.is_finite() {
            return Err(Error::Config(format!(
                "gate.t_main must be finite, got {}",
                self.t_main
            )));
        }
        if !(self.t_veto > 0.0 && self.t_veto < 1.0) {
            return Err(Error::Config(format!(
                "gate.t_veto must lie in (0,1), got {}",
                self.t_veto
            )));
        }
        if !(0.0..=1.0).contains(&self.gamma) {
            return Err(Error::Config(format!(
                "gate.gamma must lie in [0,1], got {}",
                self.gamma
            )));
        }
        if !(self.eps > 0.0) {
            return Err(Error::Config(format!(
                "gate.eps must be > 0, got {}",
                self.eps
            )));
        }
        Ok(())
    }
}

/// Scaling factor `alpha` for speech confidence `p_hat`.
pub fn gate_scale(p_hat: f64, gp: &GateParams) -> f64 {
    if p_hat < gp.t_veto {
        (p_hat / (gp.t_veto + gp.eps)).min(1.0)
    } else {
        1.0
    }
}

/// Multiplier applied to a score above `t_main`.
pub fn gate_multiplier(p_hat: f64, gp: &GateParams) -> f64 {
    (1.0 - gp.gamma) + gp.gamma * gate_scale(p_hat, gp)
}

pub fn gate_apply(s: f64, p_hat: f64, gp: &GateParams) -> f64 {
    if s > gp.t_main {
        s * gate_multiplier(p_hat, gp)
    } else {
        s
    }
}

/// Gates `[S, T]` scores with one confidence per frame shared by all speakers.
pub fn gate_batch(scores: &Tensor, p_hat: &Tensor, gp: &GateParams) -> Result<Tensor> {
    let s = scores.shape();
    if s.len() != 2 || p_hat.len() != s[1] {
        return Err(Error::dim("gate_batch", s, p_hat.shape()));
    }
    let t_len = s[1];
    let p = p_hat.data();
    let data = scores
        .data()
        .iter()
        .enumerate()
        .map(|(i, &v)| gate_apply(v, p[i % t_len], gp))
        .collect();
    Tensor::new(s.to_vec(), data)
}

const CONFIDENCE_FLOOR: f64 = 1e-12;

/// Hyperparameters of [`ConfidenceNet`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConfidenceConfig {
    pub input_dim: usize,
    pub conv_channels: usize,
    pub kernel: usize,
    pub lstm_hidden: usize,
}

impl ConfidenceConfig {
    pub fn new(input_dim: usize) -> Self {
        ConfidenceConfig {
            input_dim,
            conv_channels: 16,
            kernel: 3,
            lstm_hidden: 16,
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct LstmDirection {
    input: Projection,
    recurrent: crate::params::ParamId,
}

/// Two same-padded 1-D convolutions, one bidirectional LSTM layer and a
/// linear read-out, over `[T, input_dim]` audio frame features.
#[derive(Clone, Debug)]
pub struct ConfidenceNet {
    pub cfg: ConfidenceConfig,
    conv1: Projection,
    conv2: Projection,
    forward_dir: LstmDirection,
    backward_dir: LstmDirection,
    readout: Projection,
}

impl ConfidenceNet {
    pub fn new<R: Rng>(store: &mut ParamStore, cfg: ConfidenceConfig, rng: &mut R) -> Result<Self> {
        if cfg.input_dim == 0
            || cfg.conv_channels == 0
            || cfg.lstm_hidden == 0
            || cfg.kernel % 2 == 0
        {
            return Err(Error::Config(format!(
                "invalid confidence net config {cfg:?}"
            )));
        }
        let (c, k, h) = (cfg.conv_channels, cfg.kernel, cfg.lstm_hidden);
        let mut dir = |name: &str, store: &mut ParamStore| LstmDirection {
            input: Projection::new(store, &format!("gate.lstm_{name}.input"), c, 4 * h, rng),
            recurrent: store.add(
                format!("gate.lstm_{name}.recurrent"),
                Tensor::uniform(&[h, 4 * h], 1.0 / (h as f64).sqrt(), rng),
            ),
        };
        let forward_dir = dir("fwd", store);
        let backward_dir = dir("bwd", store);
        Ok(ConfidenceNet {
            cfg,
            conv1: Projection::new(store, "gate.conv1", k * cfg.input_dim, c, rng),
            conv2: Projection::new(store, "gate.conv2", k * c, c, rng),
            forward_dir,
            backward_dir,
            readout: Projection::new(store, "gate.readout", 2 * h, 1, rng),
        })
    }

    /// Speech logits, `[T]`.
    pub fn logits(&self, g: &mut Graph<'_>, frames: Var) -> Result<Var> {
        let shape = g.shape(frames).to_vec();
        if shape.len() != 2 || shape[1] != self.cfg.input_dim {
            return Err(Error::dim(
                "voice_confidence",
                &shape,
                &[0, self.cfg.input_dim],
            ));
        }
        let t_len = shape[0];
        let x = g.unfold_rows(frames, self.cfg.kernel)?;
        let x = self.conv1.apply(g, x)?;
        let x = g.gelu(x);
        let x = g.unfold_rows(x, self.cfg.kernel)?;
        let x = self.conv2.apply(g, x)?;
        let x = g.gelu(x);

        let fwd = self.run_direction(g, x, &self.forward_dir, false)?;
        let bwd = self.run_direction(g, x, &self.backward_dir, true)?;
        let both = g.concat(&[fwd, bwd], 1)?;
        let logits = self.readout.apply(g, both)?;
        g.reshape(logits, &[t_len])
    }

    fn run_direction(
        &self,
        g: &mut Graph<'_>,
        x: Var,
        dir: &LstmDirection,
        reverse: bool,
    ) -> Result<Var> {
        let t_len = g.shape(x)[0];
        let h = self.cfg.lstm_hidden;
        let projected = dir.input.apply(g, x)?;
        let recurrent = g.param(dir.recurrent);
        let mut hidden: Option<Var> = None;
        let mut cell: Option<Var> = None;
        let mut outputs = vec![None; t_len];
        let order: Vec<usize> = if reverse {
            (0..t_len).rev().collect()
        } else {
            (0..t_len).collect()
        };
        for t in order {
            let mut pre = g.slice(projected, 0, t, 1)?;
            if let Some(hp) = hidden {
                let rec = g.matmul(hp, recurrent)?;
                pre = g.add(pre, rec)?;
            }
            let i = g.slice(pre, 1, 0, h)?;
            let i = g.sigmoid(i);
            let f = g.slice(pre, 1, h, h)?;
            let f = g.sigmoid(f);
            let c_new = g.slice(pre, 1, 2 * h, h)?;
            let c_new = g.tanh(c_new);
            let o = g.slice(pre, 1, 3 * h, h)?;
            let o = g.sigmoid(o);
            let mut c = g.mul(i, c_new)?;
            if let Some(cp) = cell {
                let kept = g.mul(f, cp)?;
                c = g.add(c, kept)?;
            }
            let tc = g.tanh(c);
            let hn = g.mul(o, tc)?;
            outputs[t] = Some(hn);
            hidden = Some(hn);
            cell = Some(c);
        }
        let rows: Vec<Var> = outputs
            .into_iter()
            .map(|v| v.expect("every step ran"))
            .collect();
        g.concat(&rows, 0)
    }
}

/// Per-frame speech confidence strictly inside `(0, 1)`.
pub fn voice_confidence(
    store: &ParamStore,
    net: &ConfidenceNet,
    frames: &Tensor,
) -> Result<Tensor> {
    let mut g = Graph::new(store);
    let x = g.input(frames.clone());
    let logits = net.logits(&mut g, x)?;
    let p = g.sigmoid(logits);
    let data = g
        .value(p)
        .data()
        .iter()
        .map(|v| v.clamp(CONFIDENCE_FLOOR, 1.0 - CONFIDENCE_FLOOR))
        .collect();
    Tensor::new(g.shape(p).to_vec(), data)
}
