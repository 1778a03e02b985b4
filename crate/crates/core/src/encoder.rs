//! Frame-level visual and audio encoders and bidirectional cross-modal fusion.
//!
//! The encoders are small pointwise networks (`flatten -> linear -> GELU ->
//! linear`) that turn each face crop, or each group of four spectrogram
//! steps, into one `C`-channel frame embedding. They never mix frames.

use rand::Rng;

use crate::attention::{CALayer, Projection};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::params::ParamStore;
use crate::tensor::{AxisRole, Tensor};

/// Audio steps per video frame.
pub const AUDIO_STEPS_PER_FRAME: usize = 4;

/// Face-track crops, `[S, T, H, W, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualClip(Tensor);

impl VisualClip {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 5 || s[4] != 1 {
            return Err(Error::dim("visual clip", s, &[0, 0, 0, 0, 1]));
        }
        if !values.is_finite() {
            return Err(Error::Contract(
                "visual clip holds non-finite values".into(),
            ));
        }
        Ok(VisualClip(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn speakers(&self) -> usize {
        self.0.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[1]
    }

    pub fn pixels(&self) -> usize {
        self.0.shape()[2] * self.0.shape()[3]
    }
}

/// Spectrogram at four steps per frame, `[4T, M]`.
#[derive(Clone, Debug, PartialEq)]
pub struct AudioClip(Tensor);

impl AudioClip {
    pub fn new(values: Tensor) -> Result<Self> {
        let s = values.shape();
        if s.len() != 2 {
            return Err(Error::dim("audio clip", s, &[0, 0]));
        }
        if s[0] % AUDIO_STEPS_PER_FRAME != 0 {
            return Err(Error::Contract(format!(
                "audio length {} is not a multiple of {AUDIO_STEPS_PER_FRAME}",
                s[0]
            )));
        }
        if !values.is_finite() {
            return Err(Error::Contract("audio clip holds non-finite values".into()));
        }
        Ok(AudioClip(values))
    }

    pub fn tensor(&self) -> &Tensor {
        &self.0
    }

    pub fn frames(&self) -> usize {
        self.0.shape()[0] / AUDIO_STEPS_PER_FRAME
    }

    pub fn bins(&self) -> usize {
        self.0.shape()[1]
    }

    /// Mean of each consecutive group of four steps: `[T, M]`.
    pub fn pooled(&self) -> Tensor {
        let (t_len, m) = (self.frames(), self.bins());
        let src = self.0.data();
        let mut out = vec![0.0; t_len * m];
        for t in 0..t_len {
            for j in 0..AUDIO_STEPS_PER_FRAME {
                let row = &src[(t * AUDIO_STEPS_PER_FRAME + j) * m..][..m];
                for (o, v) in out[t * m..(t + 1) * m].iter_mut().zip(row) {
                    *o += v;
                }
            }
        }
        for o in &mut out {
            *o /= AUDIO_STEPS_PER_FRAME as f64;
        }
        Tensor::new(vec![t_len, m], out)
            .and_then(|t| t.with_roles(vec![AxisRole::Time, AxisRole::Channel]))
            .expect("pooled audio shape")
    }
}

/// `flatten -> linear -> GELU -> linear`, applied to the last axis.
#[derive(Clone, Copy, Debug)]
pub struct PointwiseEncoder {
    pub fc1: Projection,
    pub fc2: Projection,
}

impl PointwiseEncoder {
    pub fn new<R: Rng>(
        store: &mut ParamStore,
        name: &str,
        input: usize,
        hidden: usize,
        output: usize,
        rng: &mut R,
    ) -> Self {
        PointwiseEncoder {
            fc1: Projection::new(store, &format!("{name}.fc1"), input, hidden, rng),
            fc2: Projection::new(store, &format!("{name}.fc2"), hidden, output, rng),
        }
    }

    pub fn apply(&self, g: &mut Graph<'_>, x: Var) -> Result<Var> {
        let h = self.fc1.apply(g, x)?;
        let h = g.gelu(h);
        self.fc2.apply(g, h)
    }
}

/// `[S, T, H, W, 1] -> [S, T, C]`, one embedding per crop.
pub fn encode_visual(g: &mut Graph<'_>, enc: &PointwiseEncoder, clip: &VisualClip) -> Result<Var> {
    let (s, t) = (clip.speakers(), clip.frames());
    let flat = clip.tensor().reshape(&[s, t, clip.pixels()])?;
    let x = g.input(flat);
    enc.apply(g, x)
}

/// `[4T, M] -> [T, C]` frame embeddings before speaker replication.
pub fn encode_audio_frames(
    g: &mut Graph<'_>,
    enc: &PointwiseEncoder,
    clip: &AudioClip,
) -> Result<Var> {
    let x = g.input(clip.pooled());
    enc.apply(g, x)
}

/// `[4T, M] -> [S, T, C]`: frame embeddings replicated across `speakers`.
pub fn encode_audio(
    g: &mut Graph<'_>,
    enc: &PointwiseEncoder,
    clip: &AudioClip,
    speakers: usize,
) -> Result<Var> {
    let frames = encode_audio_frames(g, enc, clip)?;
    g.repeat(frames, speakers)
}

/// Branch outputs of the fusion step, all `[S, T, C]` except `f_av`.
#[derive(Clone, Copy, Debug)]
pub struct FusedFeatures {
    pub f_v: Var,
    pub f_a: Var,
    pub f_a_tilde: Var,
    pub f_v_tilde: Var,
    /// `[S, T, 2C]`, audio channels first.
    pub f_av: Var,
}

/// Bidirectional cross-modal attention over time, one batch entry per speaker,
/// followed by channel concatenation `f~a || f~v`.
pub fn fuse(
    g: &mut Graph<'_>,
    f_v: Var,
    f_a: Var,
    cal_av: &CALayer,
    cal_va: &CALayer,
) -> Result<FusedFeatures> {
    if g.shape(f_v) != g.shape(f_a) || g.shape(f_v).len() != 3 {
        return Err(Error::dim("fuse", g.shape(f_v), g.shape(f_a)));
    }
    let f_a_tilde = cal_av.forward(g, f_a, f_v)?;
    let f_v_tilde = cal_va.forward(g, f_v, f_a)?;
    let f_av = g.concat(&[f_a_tilde, f_v_tilde], 2)?;
    Ok(FusedFeatures {
        f_v,
        f_a,
        f_a_tilde,
        f_v_tilde,
        f_av,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn audio_length_must_divide_by_four() {
        let err = AudioClip::new(Tensor::zeros(&[6, 3])).unwrap_err();
        assert!(matches!(err, Error::Contract(_)));
        assert!(AudioClip::new(Tensor::zeros(&[8, 3])).is_ok());
    }

    #[test]
    fn visual_clip_requires_single_channel() {
        assert!(VisualClip::new(Tensor::zeros(&[1, 2, 3, 3, 2])).is_err());
        assert!(VisualClip::new(Tensor::zeros(&[1, 2, 3, 3, 1])).is_ok());
    }

    #[test]
    fn pooling_averages_groups_of_four() {
        let data: Vec<f64> = (0..8).map(f64::from).collect();
        let clip = AudioClip::new(Tensor::new(vec![8, 1], data).unwrap()).unwrap();
        assert_eq!(clip.pooled().data(), &[1.5, 5.5]);
    }
}
