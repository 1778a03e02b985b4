//! Decoupled speaker/temporal interaction on the fused `[S, T, 2C]` features.
//!
//! Each round runs the two streams independently, then lets each stream
//! cross-attend to the other:
//!
//! ```text
//! f_sub  = SAL_s(perm(x_sub) + E)   attention over speakers, frames in batch
//! f_time = SAL_t(x_time)            attention over frames, speakers in batch
//! f~time = CAL(f_time, f_sub)       attention over frames, speakers in batch
//! f~sub  = CAL(f_sub, f_time)
//! ```
//!
//! Round `r+1` consumes `(f~time, f~sub)` of round `r`; both start from
//! `f_av`. The speaker embedding is added once, on the first round input.
//! After the last round `f_dual = f~time + f~sub` goes through a linear head
//! producing one raw logit per `(speaker, frame)`.

use rand::Rng;

use crate::attention::{AttentionConfig, CALayer, Projection, SALayer};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::{ParamId, ParamStore};

/// Learnable per-slot speaker embedding, `[S_max, 2C]`.
#[derive(Clone, Copy, Debug)]
pub struct SpeakerEmbedding {
    pub table: ParamId,
    pub max_speakers: usize,
}

impl SpeakerEmbedding {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        max_speakers: usize,
        dim: usize,
        rng: &mut R,
    ) -> Self {
        let bound = 1.0 / (dim as f64).sqrt();
        let table = store.add(
            format!("{name}.table"),
            crate::tensor::Tensor::uniform(&[max_speakers, dim], bound, rng),
        );
        SpeakerEmbedding {
            table,
            max_speakers,
        }
    }
}

/// Layers of one interaction round. A `None` stream is the identity.
#[derive(Clone, Copy, Debug)]
pub struct InteractionRound {
    pub speaker_sal: Option<SALayer>,
    pub temporal_sal: Option<SALayer>,
    /// Temporal stream queries the speaker stream.
    pub cal_time: CALayer,
    /// Speaker stream queries the temporal stream.
    pub cal_sub: CALayer,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct StreamToggles {
    pub speaker: bool,
    pub temporal: bool,
}

impl Default for StreamToggles {
    fn default() -> Self {
        StreamToggles {
            speaker: true,
            temporal: true,
        }
    }
}

#[derive(Clone, Debug)]
pub struct DualStreamStack {
    pub embedding: SpeakerEmbedding,
    pub rounds: Vec<InteractionRound>,
    pub head: Projection,
}

impl DualStreamStack {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        cfg: AttentionConfig,
        rounds: usize,
        max_speakers: usize,
        toggles: StreamToggles,
        rng: &mut R,
    ) -> Result<Self> {
        if rounds == 0 {
            return Err(Error::Config("dual-stream rounds must be >= 1".into()));
        }
        if max_speakers == 0 {
            return Err(Error::Config("max_speakers must be >= 1".into()));
        }
        let d = cfg.model_dim;
        let embedding =
            SpeakerEmbedding::new(store, "dual.speaker_embedding", max_speakers, d, rng);
        let mut layers = Vec::with_capacity(rounds);
        for r in 0..rounds {
            let speaker_sal = if toggles.speaker {
                Some(SALayer::new(
                    store,
                    &format!("dual.round{r}.speaker_sal"),
                    cfg,
                    rng,
                )?)
            } else {
                None
            };
            let temporal_sal = if toggles.temporal {
                Some(SALayer::new(
                    store,
                    &format!("dual.round{r}.temporal_sal"),
                    cfg,
                    rng,
                )?)
            } else {
                None
            };
            layers.push(InteractionRound {
                speaker_sal,
                temporal_sal,
                cal_time: CALayer::new(store, &format!("dual.round{r}.cal_time"), cfg, rng)?,
                cal_sub: CALayer::new(store, &format!("dual.round{r}.cal_sub"), cfg, rng)?,
            });
        }
        let head = Projection::new(store, "dual.head", d, 1, rng);
        Ok(DualStreamStack {
            embedding,
            rounds: layers,
            head,
        })
    }
}

/// Attention across speakers within each frame. With `embedding`, rows
/// `[0, S)` of the table are added before the layer.
pub fn speaker_stream(
    g: &mut Graph<'_>,
    x: Var,
    embedding: Option<&SpeakerEmbedding>,
    sal: &SALayer,
) -> Result<Var> {
    let s = g.shape(x)[0];
    let per_frame = g.permute(x, &[1, 0, 2])?;
    let input = match embedding {
        Some(emb) => {
            if s > emb.max_speakers {
                return Err(Error::Capacity {
                    what: "speaker embedding",
                    requested: s,
                    available: emb.max_speakers,
                });
            }
            let table = g.param(emb.table);
            let rows = g.slice(table, 0, 0, s)?;
            g.add(per_frame, rows)?
        }
        None => per_frame,
    };
    let out = sal.forward(g, input)?;
    g.permute(out, &[1, 0, 2])
}

/// Attention across frames for each speaker.
pub fn temporal_stream(g: &mut Graph<'_>, x: Var, sal: &SALayer) -> Result<Var> {
    sal.forward(g, x)
}

/// Mutual cross-attention between the streams, over frames with speakers in
/// the batch axis. Returns `(f~time, f~sub)`.
pub fn cross_interact(
    g: &mut Graph<'_>,
    f_time: Var,
    f_sub: Var,
    cal_time: &CALayer,
    cal_sub: &CALayer,
) -> Result<(Var, Var)> {
    if g.shape(f_time) != g.shape(f_sub) {
        return Err(Error::dim(
            "cross_interact",
            g.shape(f_time),
            g.shape(f_sub),
        ));
    }
    let time = cal_time.forward(g, f_time, f_sub)?;
    let sub = cal_sub.forward(g, f_sub, f_time)?;
    Ok((time, sub))
}

#[derive(Clone, Copy, Debug)]
pub struct DualOutput {
    pub f_dual: Var,
    /// Raw logits, `[S, T]`.
    pub scores: Var,
}

pub fn dual_forward(g: &mut Graph<'_>, f_av: Var, stack: &DualStreamStack) -> Result<DualOutput> {
    let shape = g.shape(f_av).to_vec();
    if shape.len() != 3 {
        return Err(Error::dim("dual_forward", &shape, &[0, 0, 0]));
    }
    let (s, t) = (shape[0], shape[1]);
    if s > stack.embedding.max_speakers {
        return Err(Error::Capacity {
            what: "speaker embedding",
            requested: s,
            available: stack.embedding.max_speakers,
        });
    }
    let mut time_in = f_av;
    let mut sub_in = f_av;
    for (r, round) in stack.rounds.iter().enumerate() {
        let f_sub = match &round.speaker_sal {
            Some(sal) => {
                let emb = (r == 0).then_some(&stack.embedding);
                speaker_stream(g, sub_in, emb, sal)?
            }
            None => sub_in,
        };
        let f_time = match &round.temporal_sal {
            Some(sal) => temporal_stream(g, time_in, sal)?,
            None => time_in,
        };
        let (t_out, s_out) = cross_interact(g, f_time, f_sub, &round.cal_time, &round.cal_sub)?;
        time_in = t_out;
        sub_in = s_out;
    }
    let f_dual = g.add(time_in, sub_in)?;
    let logits = stack.head.apply(g, f_dual)?;
    let scores = g.reshape(logits, &[s, t])?;
    Ok(DualOutput { f_dual, scores })
}
