//! `D2CKPT1` named-tensor checkpoint container.
//!
//! Layout (little-endian):
//!
//! ```text
//! "D2CKPT1"
//! u32 len, model config as `key = value` text
//! u32 tensor count
//! per tensor: u32 name len, name, u32 rank, u32 dims[rank], f64 data[prod(dims)]
//! ```
//!
//! Detector parameters and voice gate parameters share the container; the
//! gate's names all start with `gate.`.

use std::path::Path;

use crate::binio::{Reader, Writer};
use crate::error::{Error, Result};
use crate::model::{Detector, ModelConfig, VoiceGateModel};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 7] = b"D2CKPT1";
const CHECKPOINT_FAMILY: &[u8] = b"D2CKPT";
const GATE_PREFIX: &str = "gate.";

fn model_config_text(cfg: &ModelConfig) -> String {
    let on = |b: bool| if b { "on" } else { "off" };
    format!(
        "channels = {}\nheads = {}\nrounds = {}\nmax_speakers = {}\nencoder_hidden = {}\n\
         mlp_ratio = {}\nspeaker_stream = {}\ntemporal_stream = {}\nheight = {}\nwidth = {}\n\
         mel_bins = {}\ninit_seed = {}\n",
        cfg.channels,
        cfg.heads,
        cfg.rounds,
        cfg.max_speakers,
        cfg.encoder_hidden,
        cfg.mlp_ratio,
        on(cfg.speaker_stream),
        on(cfg.temporal_stream),
        cfg.height,
        cfg.width,
        cfg.mel_bins,
        cfg.init_seed
    )
}

fn parse_model_config(text: &str) -> Result<ModelConfig> {
    let mut cfg = ModelConfig::default();
    for line in text.lines().filter(|l| !l.trim().is_empty()) {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("checkpoint config line '{line}'")))?;
        let (k, v) = (k.trim(), v.trim());
        let num = || -> Result<usize> {
            v.parse()
                .map_err(|_| Error::Config(format!("checkpoint config {k} = '{v}'")))
        };
        match k {
            "channels" => cfg.channels = num()?,
            "heads" => cfg.heads = num()?,
            "rounds" => cfg.rounds = num()?,
            "max_speakers" => cfg.max_speakers = num()?,
            "encoder_hidden" => cfg.encoder_hidden = num()?,
            "mlp_ratio" => cfg.mlp_ratio = num()?,
            "speaker_stream" => cfg.speaker_stream = v == "on",
            "temporal_stream" => cfg.temporal_stream = v == "on",
            "height" => cfg.height = num()?,
            "width" => cfg.width = num()?,
            "mel_bins" => cfg.mel_bins = num()?,
            "init_seed" => {
                cfg.init_seed = v
                    .parse()
                    .map_err(|_| Error::Config(format!("checkpoint config init_seed = '{v}'")))?
            }
            _ => {
                return Err(Error::Config(format!(
                    "unknown checkpoint config key '{k}'"
                )))
            }
        }
    }
    cfg.validate()?;
    Ok(cfg)
}

pub fn encode_checkpoint(detector: &Detector, gate: &VoiceGateModel) -> Vec<u8> {
    let mut w = Writer::new();
    w.bytes(CHECKPOINT_MAGIC);
    w.str(&model_config_text(&detector.cfg));
    let tensors: Vec<(String, Tensor)> = detector
        .store
        .named_values()
        .into_iter()
        .chain(gate.store.named_values())
        .collect();
    w.u32(tensors.len());
    for (name, t) in &tensors {
        w.str(name);
        w.u32(t.rank());
        for &d in t.shape() {
            w.u32(d);
        }
        w.f64s(t.data());
    }
    w.buf
}

pub fn decode_checkpoint(bytes: &[u8]) -> Result<(Detector, VoiceGateModel)> {
    let mut r = Reader::new(bytes);
    r.magic(CHECKPOINT_MAGIC, CHECKPOINT_FAMILY)?;
    let cfg_at = r.offset;
    let cfg_text = r.str("model config")?;
    let cfg = parse_model_config(&cfg_text).map_err(|e| Error::Format {
        offset: cfg_at,
        message: e.to_string(),
    })?;
    let count = r.u32("tensor count")?;
    let mut detector_tensors = Vec::new();
    let mut gate_tensors = Vec::new();
    for _ in 0..count {
        let at = r.offset;
        let name = r.str("tensor name")?;
        let rank = r.u32("rank")?;
        let dims = (0..rank)
            .map(|_| r.u32("dimension"))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = dims.iter().product();
        let data = r.f64s(n, "tensor data")?;
        let t = Tensor::new(dims, data).map_err(|e| Error::Format {
            offset: at,
            message: format!("tensor {name}: {e}"),
        })?;
        if name.starts_with(GATE_PREFIX) {
            gate_tensors.push((name, t));
        } else {
            detector_tensors.push((name, t));
        }
    }
    if r.remaining() != 0 {
        return Err(Error::Format {
            offset: r.offset,
            message: format!("{} trailing bytes", r.remaining()),
        });
    }
    let mut detector = Detector::new(cfg.clone())?;
    detector.store.load_named(&detector_tensors)?;
    let mut gate = VoiceGateModel::new(cfg.mel_bins, cfg.init_seed)?;
    gate.store.load_named(&gate_tensors)?;
    Ok((detector, gate))
}

pub fn save_checkpoint(detector: &Detector, gate: &VoiceGateModel, path: &Path) -> Result<()> {
    std::fs::write(path, encode_checkpoint(detector, gate)).map_err(|e| Error::io(path, e))
}

pub fn load_checkpoint(path: &Path) -> Result<(Detector, VoiceGateModel)> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_checkpoint(&bytes)
}
