//! The full detector: encoders, cross-modal fusion, dual-stream interaction,
//! scoring head and the auxiliary branch heads used for supervision.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::attention::{AttentionConfig, CALayer, Projection};
use crate::data::Scenario;
use crate::dual_stream::{dual_forward, DualStreamStack, StreamToggles};
use crate::encoder::{
    encode_audio_frames, encode_visual, fuse, AudioClip, FusedFeatures, PointwiseEncoder,
    VisualClip,
};
use crate::error::{Error, Result};
use crate::graph::{Graph, Var};
use crate::losses::{
    contrastive_av, total_loss, BranchLogits, LossTerms, LossWeights, SupervisionBatch,
};
use crate::params::ParamStore;
use crate::tensor::Tensor;
use crate::voice_gate::{ConfidenceConfig, ConfidenceNet};

#[derive(Clone, Debug, PartialEq)]
pub struct ModelConfig {
    /// Per-modality channel count `C`; the fused width is `2C`.
    pub channels: usize,
    pub heads: usize,
    pub rounds: usize,
    pub max_speakers: usize,
    pub encoder_hidden: usize,
    /// MLP hidden width as a multiple of the layer width.
    pub mlp_ratio: usize,
    pub speaker_stream: bool,
    pub temporal_stream: bool,
    pub height: usize,
    pub width: usize,
    pub mel_bins: usize,
    pub init_seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            channels: 16,
            heads: 4,
            rounds: 2,
            max_speakers: 4,
            encoder_hidden: 32,
            mlp_ratio: 4,
            speaker_stream: true,
            temporal_stream: true,
            height: 8,
            width: 8,
            mel_bins: 13,
            init_seed: 0,
        }
    }
}

impl ModelConfig {
    /// The small configuration used for finite-difference checks.
    pub fn tiny() -> Self {
        ModelConfig {
            channels: 8,
            heads: 2,
            rounds: 2,
            max_speakers: 2,
            encoder_hidden: 8,
            mlp_ratio: 2,
            height: 4,
            width: 4,
            mel_bins: 5,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("channels", self.channels),
            ("heads", self.heads),
            ("max_speakers", self.max_speakers),
            ("encoder_hidden", self.encoder_hidden),
            ("mlp_ratio", self.mlp_ratio),
            ("height", self.height),
            ("width", self.width),
            ("mel_bins", self.mel_bins),
        ] {
            if v == 0 {
                return Err(Error::Config(format!("model.{name} must be >= 1")));
            }
        }
        if !(1..=3).contains(&self.rounds) {
            return Err(Error::Config(format!(
                "model.rounds must be 1..=3, got {}",
                self.rounds
            )));
        }
        self.attention(self.channels)?;
        self.attention(2 * self.channels)?;
        Ok(())
    }

    fn attention(&self, dim: usize) -> Result<AttentionConfig> {
        let cfg = AttentionConfig {
            model_dim: dim,
            num_heads: self.heads,
            mlp_hidden: self.mlp_ratio * dim,
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Clone, Debug)]
pub struct Detector {
    pub cfg: ModelConfig,
    pub store: ParamStore,
    pub visual_encoder: PointwiseEncoder,
    pub audio_encoder: PointwiseEncoder,
    /// Audio queries visual.
    pub cal_av: CALayer,
    /// Visual queries audio.
    pub cal_va: CALayer,
    pub dual: DualStreamStack,
    pub visual_head: Projection,
    pub audio_head: Projection,
}

/// Graph handles produced by one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardOutput {
    pub fused: FusedFeatures,
    /// `[T, C]` audio embeddings before speaker replication.
    pub audio_frames: Var,
    pub logits: BranchLogits,
}

impl Detector {
    pub fn new(cfg: ModelConfig) -> Result<Self> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.init_seed);
        let mut store = ParamStore::new();
        let c = cfg.channels;
        let visual_encoder = PointwiseEncoder::new(
            &mut store,
            "encoder.visual",
            cfg.height * cfg.width,
            cfg.encoder_hidden,
            c,
            &mut rng,
        );
        let audio_encoder = PointwiseEncoder::new(
            &mut store,
            "encoder.audio",
            cfg.mel_bins,
            cfg.encoder_hidden,
            c,
            &mut rng,
        );
        let fusion_cfg = cfg.attention(c)?;
        let cal_av = CALayer::new(&mut store, "fusion.cal_av", fusion_cfg, &mut rng)?;
        let cal_va = CALayer::new(&mut store, "fusion.cal_va", fusion_cfg, &mut rng)?;
        let dual = DualStreamStack::new(
            &mut store,
            cfg.attention(2 * c)?,
            cfg.rounds,
            cfg.max_speakers,
            StreamToggles {
                speaker: cfg.speaker_stream,
                temporal: cfg.temporal_stream,
            },
            &mut rng,
        )?;
        let visual_head = Projection::new(&mut store, "head.visual", c, 1, &mut rng);
        let audio_head = Projection::new(&mut store, "head.audio", c, 1, &mut rng);
        Ok(Detector {
            cfg,
            store,
            visual_encoder,
            audio_encoder,
            cal_av,
            cal_va,
            dual,
            visual_head,
            audio_head,
        })
    }

    fn check_inputs(&self, visual: &VisualClip, audio: &AudioClip) -> Result<()> {
        let v = visual.tensor().shape();
        if v[2] != self.cfg.height || v[3] != self.cfg.width || audio.bins() != self.cfg.mel_bins {
            return Err(Error::Config(format!(
                "model expects {}x{} crops and {} mel bins, scene has {}x{} and {}",
                self.cfg.height,
                self.cfg.width,
                self.cfg.mel_bins,
                v[2],
                v[3],
                audio.bins()
            )));
        }
        if visual.frames() != audio.frames() {
            return Err(Error::dim("scene frames", v, audio.tensor().shape()));
        }
        if visual.speakers() > self.cfg.max_speakers {
            return Err(Error::Capacity {
                what: "speaker embedding",
                requested: visual.speakers(),
                available: self.cfg.max_speakers,
            });
        }
        Ok(())
    }

    pub fn forward<'s>(
        &'s self,
        g: &mut Graph<'s>,
        visual: &VisualClip,
        audio: &AudioClip,
    ) -> Result<ForwardOutput> {
        self.check_inputs(visual, audio)?;
        let (s, t) = (visual.speakers(), visual.frames());
        let f_v = encode_visual(g, &self.visual_encoder, visual)?;
        let audio_frames = encode_audio_frames(g, &self.audio_encoder, audio)?;
        let f_a = g.repeat(audio_frames, s)?;
        let fused = fuse(g, f_v, f_a, &self.cal_av, &self.cal_va)?;
        let dual = dual_forward(g, fused.f_av, &self.dual)?;

        let v_logits = self.visual_head.apply(g, fused.f_v_tilde)?;
        let visual_logits = g.reshape(v_logits, &[s, t])?;
        let a_logits = self.audio_head.apply(g, fused.f_a_tilde)?;
        let a_logits = g.reshape(a_logits, &[s, t])?;
        let audio_logits = g.mean_axis0(a_logits);

        Ok(ForwardOutput {
            fused,
            audio_frames,
            logits: BranchLogits {
                fused: dual.scores,
                visual: visual_logits,
                audio: audio_logits,
            },
        })
    }

    /// Training objective for one scene.
    pub fn loss<'s>(
        &'s self,
        g: &mut Graph<'s>,
        scene: &Scenario,
        weights: &LossWeights,
        temperature: f64,
    ) -> Result<LossTerms> {
        let out = self.forward(g, &scene.visual, &scene.audio)?;
        let batch = SupervisionBatch::new(scene.labels.clone(), scene.mask.clone())?;
        let (s, t) = (batch.speakers(), batch.frames());
        let c = self.cfg.channels;
        let mut terms = Vec::new();
        for sp in 0..s {
            let active = batch.active_frames(sp);
            if active.iter().filter(|&&a| a).count() < 2 {
                continue;
            }
            let v = g.slice(out.fused.f_v, 0, sp, 1)?;
            let v = g.reshape(v, &[t, c])?;
            let con = contrastive_av(g, out.audio_frames, v, &active, temperature)?;
            terms.push(con.loss);
        }
        let contrastive = match terms.split_first() {
            None => g.input(Tensor::scalar(0.0)),
            Some((&first, rest)) => {
                let mut acc = first;
                for &t in rest {
                    acc = g.add(acc, t)?;
                }
                g.scale(acc, 1.0 / terms.len() as f64)
            }
        };
        total_loss(g, &batch, &out.logits, contrastive, weights)
    }

    /// Fused-branch logits `[S, T]` without recording gradients for later use.
    pub fn predict(&self, visual: &VisualClip, audio: &AudioClip) -> Result<Tensor> {
        let mut g = Graph::new(&self.store);
        let out = self.forward(&mut g, visual, audio)?;
        Ok(g.value(out.logits.fused).clone())
    }
}

/// The separately trained speech-confidence branch.
#[derive(Clone, Debug)]
pub struct VoiceGateModel {
    pub store: ParamStore,
    pub net: ConfidenceNet,
}

impl VoiceGateModel {
    pub fn new(mel_bins: usize, seed: u64) -> Result<Self> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x6A7E_0000);
        let mut store = ParamStore::new();
        let net = ConfidenceNet::new(&mut store, ConfidenceConfig::new(mel_bins), &mut rng)?;
        Ok(VoiceGateModel { store, net })
    }

    /// Any-speech BCE for one scene.
    pub fn loss<'s>(&'s self, g: &mut Graph<'s>, scene: &Scenario) -> Result<Var> {
        let x = g.input(scene.audio.pooled());
        let logits = self.net.logits(g, x)?;
        let target: Vec<f64> = scene
            .any_speech()
            .into_iter()
            .map(|b| if b { 1.0 } else { 0.0 })
            .collect();
        let mask = vec![1.0; target.len()];
        g.masked_bce(logits, &target, &mask)
    }

    pub fn confidence(&self, audio: &AudioClip) -> Result<Tensor> {
        crate::voice_gate::voice_confidence(&self.store, &self.net, &audio.pooled())
    }
}
