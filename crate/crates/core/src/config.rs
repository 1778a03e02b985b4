//! Flat `key = value` run configuration.
//!
//! Lines may carry `#` comments. Unknown keys are rejected, and every value
//! is checked against its module's invariants once the whole file is read.

use std::path::{Path, PathBuf};

use crate::data::GenConfig;
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::TrainConfig;
use crate::voice_gate::GateParams;

#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub data: GenConfig,
    pub scenes: usize,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub gate: GateParams,
    pub eval_threshold: f64,
    pub corpus: PathBuf,
    pub eval_corpus: PathBuf,
    pub model_path: PathBuf,
    pub predictions: PathBuf,
    pub metrics: PathBuf,
    pub train_log: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 7,
            data: GenConfig::default(),
            scenes: 200,
            model: ModelConfig::default(),
            train: TrainConfig::default(),
            gate: GateParams::default(),
            eval_threshold: 0.0,
            corpus: "corpus.d2syn".into(),
            eval_corpus: "heldout.d2syn".into(),
            model_path: "model.d2ckpt".into(),
            predictions: "predictions.csv".into(),
            metrics: "metrics.txt".into(),
            train_log: "train_log.csv".into(),
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("{key}: cannot parse '{value}'")))
}

fn parse_switch(key: &str, value: &str) -> Result<bool> {
    match value {
        "on" | "true" | "1" => Ok(true),
        "off" | "false" | "0" => Ok(false),
        _ => Err(Error::Config(format!(
            "{key}: expected on/off, got '{value}'"
        ))),
    }
}

fn switch(v: bool) -> String {
    if v { "on" } else { "off" }.to_string()
}

impl RunConfig {
    /// Generator settings with the run seed applied.
    pub fn gen_config(&self) -> GenConfig {
        GenConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    /// Detector settings with input dims taken from the data settings.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            height: self.data.height,
            width: self.data.width,
            mel_bins: self.data.mel_bins,
            init_seed: self.seed,
            ..self.model.clone()
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            shuffle_seed: self.seed,
            ..self.train.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.gen_config().validate()?;
        self.model_config().validate()?;
        self.train_config().validate()?;
        self.gate.validate()?;
        if self.data.speakers > self.model.max_speakers {
            return Err(Error::Config(format!(
                "data.speakers ({}) exceeds model.max_speakers ({})",
                self.data.speakers, self.model.max_speakers
            )));
        }
        if !self.eval_threshold.is_finite() {
            return Err(Error::Config("eval.threshold must be finite".into()));
        }
        Ok(())
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        match key {
            "seed" => self.seed = parse(key, v)?,
            "data.scenes" => self.scenes = parse(key, v)?,
            "data.speakers" => self.data.speakers = parse(key, v)?,
            "data.frames" => self.data.frames = parse(key, v)?,
            "data.height" => self.data.height = parse(key, v)?,
            "data.width" => self.data.width = parse(key, v)?,
            "data.mel_bins" => self.data.mel_bins = parse(key, v)?,
            "data.p_stay_on" => self.data.p_stay_on = parse(key, v)?,
            "data.p_turn_on" => self.data.p_turn_on = parse(key, v)?,
            "data.distractor_rate" => self.data.distractor_rate = parse(key, v)?,
            "data.distractor_stay" => self.data.distractor_stay = parse(key, v)?,
            "data.noise_std" => self.data.noise_std = parse(key, v)?,
            "data.max_concurrent" => self.data.max_concurrent = parse(key, v)?,
            "data.overlap_prob" => self.data.overlap_prob = parse(key, v)?,
            "data.signature_amp" => self.data.signature_amp = parse(key, v)?,
            "data.motion_amp" => self.data.motion_amp = parse(key, v)?,
            "model.channels" => self.model.channels = parse(key, v)?,
            "model.heads" => self.model.heads = parse(key, v)?,
            "model.rounds" => self.model.rounds = parse(key, v)?,
            "model.max_speakers" => self.model.max_speakers = parse(key, v)?,
            "model.encoder_hidden" => self.model.encoder_hidden = parse(key, v)?,
            "model.mlp_ratio" => self.model.mlp_ratio = parse(key, v)?,
            "model.speaker_stream" => self.model.speaker_stream = parse_switch(key, v)?,
            "model.temporal_stream" => self.model.temporal_stream = parse_switch(key, v)?,
            "loss.w_av" => self.train.weights.w_av = parse(key, v)?,
            "loss.w_v" => self.train.weights.w_v = parse(key, v)?,
            "loss.w_a" => self.train.weights.w_a = parse(key, v)?,
            "loss.w_con" => self.train.weights.w_con = parse(key, v)?,
            "loss.temperature" => self.train.temperature = parse(key, v)?,
            "optim.lr" => self.train.optim.lr = parse(key, v)?,
            "optim.momentum" => self.train.optim.momentum = parse(key, v)?,
            "optim.clip" => self.train.optim.clip = parse(key, v)?,
            "optim.batch_size" => self.train.batch_size = parse(key, v)?,
            "optim.cosine" => self.train.cosine = parse_switch(key, v)?,
            "optim.gate_lr" => self.train.gate_optim.lr = parse(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.gate_epochs" => self.train.gate_epochs = parse(key, v)?,
            "gate.t_main" => self.gate.t_main = parse(key, v)?,
            "gate.t_veto" => self.gate.t_veto = parse(key, v)?,
            "gate.gamma" => self.gate.gamma = parse(key, v)?,
            "gate.eps" => self.gate.eps = parse(key, v)?,
            "eval.threshold" => self.eval_threshold = parse(key, v)?,
            "paths.corpus" => self.corpus = v.into(),
            "paths.eval_corpus" => self.eval_corpus = v.into(),
            "paths.model" => self.model_path = v.into(),
            "paths.predictions" => self.predictions = v.into(),
            "paths.metrics" => self.metrics = v.into(),
            "paths.train_log" => self.train_log = v.into(),
            _ => return Err(Error::Config(format!("unknown key '{key}'"))),
        }
        Ok(())
    }

    /// Every key with its current value, in a fixed order.
    pub fn entries(&self) -> Vec<(&'static str, String)> {
        let d = &self.data;
        let m = &self.model;
        let t = &self.train;
        let g = &self.gate;
        let p = |p: &Path| p.display().to_string();
        vec![
            ("seed", self.seed.to_string()),
            ("data.scenes", self.scenes.to_string()),
            ("data.speakers", d.speakers.to_string()),
            ("data.frames", d.frames.to_string()),
            ("data.height", d.height.to_string()),
            ("data.width", d.width.to_string()),
            ("data.mel_bins", d.mel_bins.to_string()),
            ("data.p_stay_on", d.p_stay_on.to_string()),
            ("data.p_turn_on", d.p_turn_on.to_string()),
            ("data.distractor_rate", d.distractor_rate.to_string()),
            ("data.distractor_stay", d.distractor_stay.to_string()),
            ("data.noise_std", d.noise_std.to_string()),
            ("data.max_concurrent", d.max_concurrent.to_string()),
            ("data.overlap_prob", d.overlap_prob.to_string()),
            ("data.signature_amp", d.signature_amp.to_string()),
            ("data.motion_amp", d.motion_amp.to_string()),
            ("model.channels", m.channels.to_string()),
            ("model.heads", m.heads.to_string()),
            ("model.rounds", m.rounds.to_string()),
            ("model.max_speakers", m.max_speakers.to_string()),
            ("model.encoder_hidden", m.encoder_hidden.to_string()),
            ("model.mlp_ratio", m.mlp_ratio.to_string()),
            ("model.speaker_stream", switch(m.speaker_stream)),
            ("model.temporal_stream", switch(m.temporal_stream)),
            ("loss.w_av", t.weights.w_av.to_string()),
            ("loss.w_v", t.weights.w_v.to_string()),
            ("loss.w_a", t.weights.w_a.to_string()),
            ("loss.w_con", t.weights.w_con.to_string()),
            ("loss.temperature", t.temperature.to_string()),
            ("optim.lr", t.optim.lr.to_string()),
            ("optim.momentum", t.optim.momentum.to_string()),
            ("optim.clip", t.optim.clip.to_string()),
            ("optim.batch_size", t.batch_size.to_string()),
            ("optim.cosine", switch(t.cosine)),
            ("optim.gate_lr", t.gate_optim.lr.to_string()),
            ("train.epochs", t.epochs.to_string()),
            ("train.gate_epochs", t.gate_epochs.to_string()),
            ("gate.t_main", g.t_main.to_string()),
            ("gate.t_veto", g.t_veto.to_string()),
            ("gate.gamma", g.gamma.to_string()),
            ("gate.eps", g.eps.to_string()),
            ("eval.threshold", self.eval_threshold.to_string()),
            ("paths.corpus", p(&self.corpus)),
            ("paths.eval_corpus", p(&self.eval_corpus)),
            ("paths.model", p(&self.model_path)),
            ("paths.predictions", p(&self.predictions)),
            ("paths.metrics", p(&self.metrics)),
            ("paths.train_log", p(&self.train_log)),
        ]
    }

    pub fn to_text(&self) -> String {
        self.entries()
            .into_iter()
            .map(|(k, v)| format!("{k} = {v}\n"))
            .collect()
    }

    /// Applies `key = value` lines on top of `self`, then validates.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected 'key = value', found '{raw}'"),
            })?;
            self.set(k.trim(), v).map_err(|e| match e {
                Error::Config(msg) => Error::Config(format!("line {}: {msg}", i + 1)),
                other => other,
            })?;
        }
        self.validate()
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        cfg.apply_text(text)?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_text(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_validate() {
        RunConfig::default().validate().unwrap();
    }

    #[test]
    fn dump_and_reload_is_identity() {
        let mut cfg = RunConfig::default();
        cfg.set("gate.gamma", "0.5").unwrap();
        cfg.set("model.speaker_stream", "off").unwrap();
        cfg.set("data.noise_std", "0.125").unwrap();
        let again = RunConfig::from_text(&cfg.to_text()).unwrap();
        assert_eq!(again, cfg);
    }

    #[test]
    fn every_entry_key_is_settable() {
        let cfg = RunConfig::default();
        let mut other = RunConfig::default();
        for (k, v) in cfg.entries() {
            other.set(k, &v).unwrap();
        }
        assert_eq!(other, cfg);
    }

    #[test]
    fn unknown_key_rejected() {
        let err = RunConfig::from_text("gate.t_veto = 0.06\nmodel.colour = red\n").unwrap_err();
        assert!(
            err.to_string().contains("unknown key 'model.colour'"),
            "{err}"
        );
    }

    #[test]
    fn comments_and_blank_lines_ignored() {
        let cfg = RunConfig::from_text("# header\n\n gate.gamma = 0.25 # inline\n").unwrap();
        assert_eq!(cfg.gate.gamma, 0.25);
    }

    #[test]
    fn invalid_values_rejected_at_load() {
        assert!(RunConfig::from_text("gate.t_veto = 1.5").is_err());
        assert!(RunConfig::from_text("model.heads = 5").is_err());
        assert!(RunConfig::from_text("data.p_turn_on = -0.1").is_err());
        assert!(RunConfig::from_text("model.rounds = x").is_err());
    }
}
