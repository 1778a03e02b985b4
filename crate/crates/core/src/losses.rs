//! Training objectives: masked frame-level cross-entropy on the fused, visual
//! and audio branches plus a frame-aligned audio-visual contrastive term.

use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::tensor::Tensor;

/// Frame labels and validity mask, both `[S, T]` with entries in `{0, 1}`.
#[derive(Clone, Debug, PartialEq)]
pub struct SupervisionBatch {
    pub labels: Tensor,
    pub mask: Tensor,
}

impl SupervisionBatch {
    pub fn new(labels: Tensor, mask: Tensor) -> Result<Self> {
        if labels.shape() != mask.shape() || labels.rank() != 2 {
            return Err(Error::dim("supervision", labels.shape(), mask.shape()));
        }
        Ok(SupervisionBatch { labels, mask })
    }

    pub fn speakers(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Scene-level target for the audio branch: 1 where any valid speaker is
    /// active. The mask marks frames with at least one valid slot.
    pub fn any_speech(&self) -> (Vec<f64>, Vec<f64>) {
        let (s, t) = (self.speakers(), self.frames());
        let mut target = vec![0.0; t];
        let mut mask = vec![0.0; t];
        for sp in 0..s {
            for f in 0..t {
                if self.mask.get(&[sp, f]) != 0.0 {
                    mask[f] = 1.0;
                    if self.labels.get(&[sp, f]) != 0.0 {
                        target[f] = 1.0;
                    }
                }
            }
        }
        (target, mask)
    }

    /// Frames where speaker `s` is labelled active and valid.
    pub fn active_frames(&self, speaker: usize) -> Vec<bool> {
        (0..self.frames())
            .map(|f| self.mask.get(&[speaker, f]) != 0.0 && self.labels.get(&[speaker, f]) != 0.0)
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub w_av: f64,
    pub w_v: f64,
    pub w_a: f64,
    pub w_con: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            w_av: 1.0,
            w_v: 0.5,
            w_a: 0.5,
            w_con: 0.3,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let all = [self.w_av, self.w_v, self.w_a, self.w_con];
        if all.iter().any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(Error::Config(format!(
                "loss weights must be finite and >= 0: {self:?}"
            )));
        }
        if all.iter().all(|&w| w == 0.0) {
            return Err(Error::Config("at least one loss weight must be > 0".into()));
        }
        Ok(())
    }

    pub fn scaled(&self, factor: f64) -> Self {
        LossWeights {
            w_av: self.w_av * factor,
            w_v: self.w_v * factor,
            w_a: self.w_a * factor,
            w_con: self.w_con * factor,
        }
    }
}

/// Mean BCE-with-logits over masked positions; 0 for an empty mask.
pub fn masked_bce(g: &mut Graph<'_>, logits: Var, labels: &Tensor, mask: &Tensor) -> Result<Var> {
    if labels.shape() != g.shape(logits) || mask.shape() != labels.shape() {
        return Err(Error::dim("masked_bce", g.shape(logits), labels.shape()));
    }
    g.masked_bce(logits, labels.data(), mask.data())
}

#[derive(Clone, Copy, Debug)]
pub struct Contrastive {
    pub loss: Var,
    /// Set when fewer than two active frames were available; `loss` is then 0.
    pub skipped: bool,
}

/// Symmetric InfoNCE over the active frames of one clip. Row `t` of each side
/// is the positive for row `t` of the other; the other active frames of the
/// clip are the negatives. Similarity is cosine divided by `temperature`.
pub fn contrastive_av(
    g: &mut Graph<'_>,
    audio: Var,
    visual: Var,
    active: &[bool],
    temperature: f64,
) -> Result<Contrastive> {
    if g.shape(audio) != g.shape(visual) || g.shape(audio).len() != 2 {
        return Err(Error::dim(
            "contrastive_av",
            g.shape(audio),
            g.shape(visual),
        ));
    }
    if active.len() != g.shape(audio)[0] {
        return Err(Error::dim(
            "contrastive_av mask",
            g.shape(audio),
            &[active.len()],
        ));
    }
    if !(temperature > 0.0) {
        return Err(Error::Contract(format!(
            "temperature must be > 0, got {temperature}"
        )));
    }
    let rows: Vec<usize> = active
        .iter()
        .enumerate()
        .filter_map(|(i, &a)| a.then_some(i))
        .collect();
    if rows.len() < 2 {
        let loss = g.input(Tensor::scalar(0.0));
        return Ok(Contrastive {
            loss,
            skipped: true,
        });
    }
    let a = g.select_rows(audio, &rows)?;
    let v = g.select_rows(visual, &rows)?;
    let a = g.l2_normalize_rows(a);
    let v = g.l2_normalize_rows(v);
    let vt = g.permute(v, &[1, 0])?;
    let sim = g.matmul(a, vt)?;
    let sim = g.scale(sim, 1.0 / temperature);
    let a_to_v = g.diag_cross_entropy(sim)?;
    let sim_t = g.permute(sim, &[1, 0])?;
    let v_to_a = g.diag_cross_entropy(sim_t)?;
    let both = g.add(a_to_v, v_to_a)?;
    Ok(Contrastive {
        loss: g.scale(both, 0.5),
        skipped: false,
    })
}

/// Logits of the three supervised branches.
#[derive(Clone, Copy, Debug)]
pub struct BranchLogits {
    /// `[S, T]`
    pub fused: Var,
    /// `[S, T]`
    pub visual: Var,
    /// `[T]`, scene-level any-speech.
    pub audio: Var,
}

#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub l_av: Var,
    pub l_v: Var,
    pub l_a: Var,
    pub l_con: Var,
}

impl LossTerms {
    /// The unweighted terms `[l_av, l_v, l_a, l_con]`.
    pub fn parts(&self) -> [Var; 4] {
        [self.l_av, self.l_v, self.l_a, self.l_con]
    }
}

/// `w_av*L_av + w_v*L_v + w_a*L_a + w_con*L_con`.
pub fn total_loss(
    g: &mut Graph<'_>,
    batch: &SupervisionBatch,
    logits: &BranchLogits,
    contrastive: Var,
    w: &LossWeights,
) -> Result<LossTerms> {
    let l_av = masked_bce(g, logits.fused, &batch.labels, &batch.mask)?;
    let l_v = masked_bce(g, logits.visual, &batch.labels, &batch.mask)?;
    let (target, mask) = batch.any_speech();
    let l_a = g.masked_bce(logits.audio, &target, &mask)?;
    let terms = [
        g.scale(l_av, w.w_av),
        g.scale(l_v, w.w_v),
        g.scale(l_a, w.w_a),
        g.scale(contrastive, w.w_con),
    ];
    let mut total = terms[0];
    for &t in &terms[1..] {
        total = g.add(total, t)?;
    }
    Ok(LossTerms {
        total,
        l_av,
        l_v,
        l_a,
        l_con: contrastive,
    })
}
