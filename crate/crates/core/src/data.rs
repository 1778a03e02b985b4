//! Seeded synthetic multi-speaker audio-visual scenarios.
//!
//! Every speaker follows a two-state speaking Markov chain. While speaking,
//! the lower-centre "mouth" region of their face crop oscillates and their
//! voice signature is added to the shared spectrogram. Distractor episodes
//! (laughing, chewing) move the mouth the same way but contribute no audio.
//!
//! Scene `i` of a corpus draws from its own generator seeded by
//! `scene_seed(seed, i)`, so a scene never depends on the others.

use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::binio::{Reader, Writer};
use crate::encoder::{AudioClip, VisualClip, AUDIO_STEPS_PER_FRAME};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const CORPUS_MAGIC: &[u8; 6] = b"D2SYN1";
const CORPUS_FAMILY: &[u8] = b"D2SYN";

#[derive(Clone, Debug, PartialEq)]
pub struct GenConfig {
    pub seed: u64,
    pub speakers: usize,
    pub frames: usize,
    pub height: usize,
    pub width: usize,
    pub mel_bins: usize,
    /// P(speaking at t+1 | speaking at t).
    pub p_stay_on: f64,
    /// P(speaking at t+1 | silent at t).
    pub p_turn_on: f64,
    /// P(a distractor episode starts on a silent frame).
    pub distractor_rate: f64,
    /// P(a distractor episode continues).
    pub distractor_stay: f64,
    pub noise_std: f64,
    pub max_concurrent: usize,
    /// P(a speaker may start despite `max_concurrent` already being active).
    pub overlap_prob: f64,
    pub signature_amp: f64,
    pub motion_amp: f64,
}

impl Default for GenConfig {
    fn default() -> Self {
        GenConfig {
            seed: 0,
            speakers: 3,
            frames: 16,
            height: 8,
            width: 8,
            mel_bins: 13,
            p_stay_on: 0.9,
            p_turn_on: 0.08,
            distractor_rate: 0.08,
            distractor_stay: 0.75,
            noise_std: 0.3,
            max_concurrent: 1,
            overlap_prob: 0.05,
            signature_amp: 1.0,
            motion_amp: 1.0,
        }
    }
}

impl GenConfig {
    pub fn validate(&self) -> Result<()> {
        let probs = [
            ("p_stay_on", self.p_stay_on),
            ("p_turn_on", self.p_turn_on),
            ("distractor_rate", self.distractor_rate),
            ("distractor_stay", self.distractor_stay),
            ("overlap_prob", self.overlap_prob),
        ];
        for (name, p) in probs {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::Config(format!(
                    "data.{name} must lie in [0,1], got {p}"
                )));
            }
        }
        let dims = [
            ("speakers", self.speakers),
            ("frames", self.frames),
            ("height", self.height),
            ("width", self.width),
            ("mel_bins", self.mel_bins),
            ("max_concurrent", self.max_concurrent),
        ];
        for (name, d) in dims {
            if d == 0 {
                return Err(Error::Config(format!("data.{name} must be >= 1")));
            }
        }
        for (name, v) in [
            ("noise_std", self.noise_std),
            ("signature_amp", self.signature_amp),
            ("motion_amp", self.motion_amp),
        ] {
            if !(v.is_finite() && v >= 0.0) {
                return Err(Error::Config(format!(
                    "data.{name} must be finite and >= 0, got {v}"
                )));
            }
        }
        Ok(())
    }

    /// Long-run speaking rate of an unconstrained speaker chain.
    pub fn stationary_rate(&self) -> f64 {
        let leave = 1.0 - self.p_stay_on;
        if self.p_turn_on + leave == 0.0 {
            return 0.0;
        }
        self.p_turn_on / (self.p_turn_on + leave)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Scenario {
    pub scene_id: String,
    pub visual: VisualClip,
    pub audio: AudioClip,
    /// `[S, T]`, 1 where the speaker is talking.
    pub labels: Tensor,
    /// `[S, T]`, 1 where the slot and frame are valid.
    pub mask: Tensor,
    /// `[S, T]`, 1 on mouth motion without speech.
    pub distractor: Tensor,
}

impl Scenario {
    pub fn speakers(&self) -> usize {
        self.labels.shape()[0]
    }

    pub fn frames(&self) -> usize {
        self.labels.shape()[1]
    }

    /// Frame-level any-speaker-active target.
    pub fn any_speech(&self) -> Vec<bool> {
        let (s, t) = (self.speakers(), self.frames());
        (0..t)
            .map(|f| {
                (0..s).any(|sp| self.labels.get(&[sp, f]) != 0.0 && self.mask.get(&[sp, f]) != 0.0)
            })
            .collect()
    }

    fn validate(&self) -> Result<()> {
        let (s, t) = (self.speakers(), self.frames());
        let grid = [s, t];
        for (name, g) in [("mask", &self.mask), ("distractor", &self.distractor)] {
            if g.shape() != grid {
                return Err(Error::Contract(format!(
                    "{name} shape {:?} != {grid:?}",
                    g.shape()
                )));
            }
        }
        if self.visual.speakers() != s || self.visual.frames() != t || self.audio.frames() != t {
            return Err(Error::Contract(format!(
                "scene {} has inconsistent clip shapes",
                self.scene_id
            )));
        }
        Ok(())
    }
}

/// Mixes a corpus seed and scene index into an independent scene seed.
pub fn scene_seed(seed: u64, index: u64) -> u64 {
    // splitmix64 finaliser over the pair
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn generate(cfg: &GenConfig, n_scenes: usize) -> Result<Vec<Scenario>> {
    cfg.validate()?;
    (0..n_scenes).map(|i| generate_scene(cfg, i)).collect()
}

pub fn generate_scene(cfg: &GenConfig, index: usize) -> Result<Scenario> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(scene_seed(cfg.seed, index as u64));
    let (s, t, h, w, m) = (
        cfg.speakers,
        cfg.frames,
        cfg.height,
        cfg.width,
        cfg.mel_bins,
    );

    let speaking = speaking_states(cfg, &mut rng);
    let distract = distractor_states(cfg, &speaking, &mut rng);

    let noise = Normal::new(0.0, cfg.noise_std.max(f64::MIN_POSITIVE)).expect("valid std");
    let sample_noise = |rng: &mut ChaCha8Rng| {
        if cfg.noise_std == 0.0 {
            0.0
        } else {
            noise.sample(rng)
        }
    };

    // visual
    let (mouth_rows, mouth_cols) = mouth_region(h, w);
    let mut visual = vec![0.0; s * t * h * w];
    let mut articulation = vec![vec![0.0; t]; s];
    for sp in 0..s {
        let face: Vec<f64> = (0..h * w).map(|_| rng.random_range(-0.5..0.5)).collect();
        let talk_freq = rng.random_range(TALK_FREQ);
        let talk_phase = rng.random_range(0.0..2.0 * PI);
        let fidget_freq = rng.random_range(FIDGET_FREQ);
        let fidget_phase = rng.random_range(0.0..2.0 * PI);
        for f in 0..t {
            let cycle = if speaking[sp][f] {
                mouth_cycle(talk_freq, talk_phase, f)
            } else if distract[sp][f] {
                mouth_cycle(fidget_freq, fidget_phase, f)
            } else {
                0.0
            };
            articulation[sp][f] = cycle;
            let opening = cfg.motion_amp * cycle;
            let base = (sp * t + f) * h * w;
            for y in 0..h {
                for x in 0..w {
                    let mouth = mouth_rows.contains(&y) && mouth_cols.contains(&x);
                    let v = face[y * w + x] + if mouth { opening } else { 0.0 };
                    visual[base + y * w + x] = v + sample_noise(&mut rng);
                }
            }
        }
    }

    // audio
    let signatures: Vec<Vec<f64>> = (0..s).map(|_| voice_signature(cfg, &mut rng)).collect();
    let steps = AUDIO_STEPS_PER_FRAME * t;
    let mut audio = vec![0.0; steps * m];
    for step in 0..steps {
        let f = step / AUDIO_STEPS_PER_FRAME;
        for bin in 0..m {
            let mut v = 0.0;
            for sp in 0..s {
                if speaking[sp][f] {
                    v += signatures[sp][bin] * voice_level(articulation[sp][f]);
                }
            }
            audio[step * m + bin] = v + sample_noise(&mut rng);
        }
    }

    let grid = |pred: &dyn Fn(usize, usize) -> bool| {
        let data = (0..s * t)
            .map(|i| if pred(i / t, i % t) { 1.0 } else { 0.0 })
            .collect();
        Tensor::new(vec![s, t], data).expect("grid shape")
    };
    Ok(Scenario {
        scene_id: format!("scene-{:016x}-{index:05}", cfg.seed),
        visual: VisualClip::new(Tensor::new(vec![s, t, h, w, 1], visual)?)?,
        audio: AudioClip::new(Tensor::new(vec![steps, m], audio)?)?,
        labels: grid(&|sp, f| speaking[sp][f]),
        mask: Tensor::full(&[s, t], 1.0),
        distractor: grid(&|sp, f| distract[sp][f]),
    })
}

/// Rows and columns of the mouth patch: lower third, middle half.
pub fn mouth_region(h: usize, w: usize) -> (std::ops::Range<usize>, std::ops::Range<usize>) {
    let r0 = ((2 * h) / 3).min(h - 1);
    let c0 = w / 4;
    let c1 = (w - w / 4).max(c0 + 1);
    (r0..h, c0..c1)
}

// Angular frequencies in radians per frame. Articulation is faster than the
// chewing or laughing motion of distractor episodes.
const TALK_FREQ: std::ops::Range<f64> = 1.6..2.6;
const FIDGET_FREQ: std::ops::Range<f64> = 0.4..0.9;

/// Mouth opening in `[0, 1]`.
fn mouth_cycle(freq: f64, phase: f64, f: usize) -> f64 {
    0.5 + 0.5 * (freq * f as f64 + phase).sin()
}

/// Loudness of a voice relative to its signature. Wider mouth, louder frame.
fn voice_level(opening: f64) -> f64 {
    VOICE_FLOOR + (1.0 - VOICE_FLOOR) * opening
}

const VOICE_FLOOR: f64 = 0.4;

fn voice_signature(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let m = cfg.mel_bins;
    let centre = rng.random_range(0.0..m as f64);
    let width = rng.random_range(1.5..3.0);
    (0..m)
        .map(|b| {
            let d = b as f64 - centre;
            cfg.signature_amp * (-(d * d) / (2.0 * width * width)).exp()
        })
        .collect()
}

fn speaking_states(cfg: &GenConfig, rng: &mut ChaCha8Rng) -> Vec<Vec<bool>> {
    let (s, t) = (cfg.speakers, cfg.frames);
    let pi = cfg.stationary_rate();
    let mut states = vec![vec![false; t]; s];
    let mut order: Vec<usize> = (0..s).collect();
    for f in 0..t {
        let mut active = 0;
        let mut starters = Vec::new();
        for sp in 0..s {
            let on = if f == 0 {
                rng.random_bool(pi)
            } else if states[sp][f - 1] {
                rng.random_bool(cfg.p_stay_on)
            } else {
                rng.random_bool(cfg.p_turn_on)
            };
            let continuing = f > 0 && states[sp][f - 1];
            if on && continuing {
                states[sp][f] = true;
                active += 1;
            } else if on {
                starters.push(sp);
            }
        }
        order.clear();
        order.extend(starters);
        order.shuffle(rng);
        for &sp in &order {
            if active < cfg.max_concurrent || rng.random_bool(cfg.overlap_prob) {
                states[sp][f] = true;
                active += 1;
            }
        }
    }
    states
}

fn distractor_states(
    cfg: &GenConfig,
    speaking: &[Vec<bool>],
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<bool>> {
    speaking
        .iter()
        .map(|row| {
            let mut prev = false;
            row.iter()
                .map(|&talking| {
                    let on = !talking
                        && if prev {
                            rng.random_bool(cfg.distractor_stay)
                        } else {
                            rng.random_bool(cfg.distractor_rate)
                        };
                    prev = on;
                    on
                })
                .collect()
        })
        .collect()
}

pub fn encode_corpus(scenes: &[Scenario]) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CORPUS_MAGIC);
    w.u32(scenes.len());
    for sc in scenes {
        w.str(&sc.scene_id);
        let v = sc.visual.tensor().shape();
        w.u32(v[0]);
        w.u32(v[1]);
        w.u32(v[2]);
        w.u32(v[3]);
        w.u32(sc.audio.bins());
        w.f64s(sc.visual.tensor().data());
        w.f64s(sc.audio.tensor().data());
        for grid in [&sc.labels, &sc.mask, &sc.distractor] {
            let packed: Vec<u8> = grid.data().iter().map(|&v| u8::from(v != 0.0)).collect();
            w.bytes(&packed);
        }
    }
    w.buf
}

pub fn decode_corpus(bytes: &[u8]) -> Result<Vec<Scenario>> {
    if bytes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut r = Reader::new(bytes);
    r.magic(CORPUS_MAGIC, CORPUS_FAMILY)?;
    let count = r.u32("scene count")?;
    if count == 0 {
        return Err(Error::EmptyCorpus);
    }
    let mut scenes = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let start = r.offset;
        let scene_id = r.str("scene id")?;
        let s = r.u32("S")?;
        let t = r.u32("T")?;
        let h = r.u32("H")?;
        let w = r.u32("W")?;
        let m = r.u32("M")?;
        if [s, t, h, w, m].contains(&0) {
            return Err(Error::Format {
                offset: start,
                message: format!("scene {scene_id} has a zero dimension"),
            });
        }
        let visual = r.f64s(s * t * h * w, "visual tensor")?;
        let audio = r.f64s(AUDIO_STEPS_PER_FRAME * t * m, "audio tensor")?;
        let mut grids = Vec::with_capacity(3);
        for what in ["labels", "mask", "distractor"] {
            let at = r.offset;
            let raw = r.take(s * t, what)?;
            if let Some(bad) = raw.iter().position(|&b| b > 1) {
                return Err(Error::Format {
                    offset: at + bad,
                    message: format!("{what} byte {} is not 0 or 1", raw[bad]),
                });
            }
            grids.push(Tensor::new(
                vec![s, t],
                raw.iter().map(|&b| f64::from(b)).collect(),
            )?);
        }
        let distractor = grids.pop().expect("three grids");
        let mask = grids.pop().expect("three grids");
        let labels = grids.pop().expect("three grids");
        let id = scene_id.clone();
        let wrap = |e: Error| Error::Format {
            offset: start,
            message: format!("scene {id}: {e}"),
        };
        let sc = Scenario {
            visual: VisualClip::new(Tensor::new(vec![s, t, h, w, 1], visual)?).map_err(wrap)?,
            audio: AudioClip::new(Tensor::new(vec![AUDIO_STEPS_PER_FRAME * t, m], audio)?)
                .map_err(wrap)?,
            scene_id,
            labels,
            mask,
            distractor,
        };
        sc.validate().map_err(wrap)?;
        scenes.push(sc);
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{} trailing bytes after last scene", r.remaining()),
        });
    }
    Ok(scenes)
}

pub fn write_corpus(scenes: &[Scenario], path: &Path) -> Result<()> {
    std::fs::write(path, encode_corpus(scenes)).map_err(|e| Error::io(path, e))
}

pub fn read_corpus(path: &Path) -> Result<Vec<Scenario>> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_corpus(&bytes)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn invalid_probability_is_config_error() {
        let cfg = GenConfig {
            p_stay_on: 1.2,
            ..Default::default()
        };
        assert!(matches!(generate(&cfg, 1), Err(Error::Config(_))));
    }

    #[test]
    fn labels_respect_invariants() {
        let cfg = GenConfig::default();
        for sc in generate(&cfg, 40).unwrap() {
            for sp in 0..sc.speakers() {
                for f in 0..sc.frames() {
                    let l = sc.labels.get(&[sp, f]);
                    let d = sc.distractor.get(&[sp, f]);
                    assert!(l == 0.0 || sc.mask.get(&[sp, f]) == 1.0);
                    assert!(d == 0.0 || l == 0.0);
                }
            }
        }
    }

    #[test]
    fn concurrency_cap_holds_without_overlap() {
        let cfg = GenConfig {
            overlap_prob: 0.0,
            p_turn_on: 0.4,
            ..Default::default()
        };
        for sc in generate(&cfg, 30).unwrap() {
            for f in 0..sc.frames() {
                let active: f64 = (0..sc.speakers()).map(|s| sc.labels.get(&[s, f])).sum();
                assert!(active <= cfg.max_concurrent as f64);
            }
        }
    }

    #[test]
    fn scene_seeds_differ() {
        let a: Vec<u64> = (0..100).map(|i| scene_seed(7, i)).collect();
        let mut b = a.clone();
        b.sort_unstable();
        b.dedup();
        assert_eq!(a.len(), b.len());
        assert_ne!(scene_seed(7, 0), scene_seed(8, 0));
    }

    #[test]
    fn bad_grid_byte_is_rejected() {
        let cfg = GenConfig {
            speakers: 1,
            frames: 2,
            height: 2,
            width: 2,
            mel_bins: 2,
            ..Default::default()
        };
        let mut bytes = encode_corpus(&generate(&cfg, 1).unwrap());
        let n = bytes.len();
        bytes[n - 1] = 7;
        let err = decode_corpus(&bytes).unwrap_err();
        assert!(
            matches!(err, Error::Format { offset, .. } if offset == n - 1),
            "{err}"
        );
    }
}
