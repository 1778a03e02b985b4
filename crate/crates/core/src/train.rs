//! Minibatch training loops for the detector and the voice gate.

use std::ops::ControlFlow;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::graph::Graph;
use crate::losses::LossWeights;
use crate::model::{Detector, VoiceGateModel};
use crate::optim::{Sgd, SgdConfig};
use crate::params::ParamStore;

#[derive(Clone, Debug, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optim: SgdConfig,
    /// Anneal the detector learning rate to zero along a half cosine.
    pub cosine: bool,
    pub weights: LossWeights,
    pub temperature: f64,
    pub shuffle_seed: u64,
    pub gate_epochs: usize,
    pub gate_optim: SgdConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 8,
            optim: SgdConfig::default(),
            cosine: true,
            weights: LossWeights::default(),
            temperature: 0.07,
            shuffle_seed: 0,
            gate_epochs: 20,
            gate_optim: SgdConfig {
                lr: 0.1,
                momentum: 0.9,
                clip: 5.0,
            },
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 {
            return Err(Error::Config("optim.batch_size must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::Config(format!(
                "loss.temperature must be > 0, got {}",
                self.temperature
            )));
        }
        self.optim.validate()?;
        self.gate_optim.validate()?;
        self.weights.validate()
    }
}

/// Scene-averaged loss terms of one epoch, measured before each step.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub total: f64,
    pub l_av: f64,
    pub l_v: f64,
    pub l_a: f64,
    pub l_con: f64,
}

impl EpochLog {
    pub const CSV_HEADER: &'static str = "epoch,total,l_av,l_v,l_a,l_con";

    pub fn csv_line(&self) -> String {
        format!(
            "{},{:.9},{:.9},{:.9},{:.9},{:.9}",
            self.epoch, self.total, self.l_av, self.l_v, self.l_a, self.l_con
        )
    }
}

fn epoch_order(n: usize, seed: u64, epoch: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9));
    order.shuffle(&mut rng);
    order
}

/// Detector learning rate used throughout `epoch`.
pub fn epoch_lr(cfg: &TrainConfig, epoch: usize) -> f64 {
    if !cfg.cosine || cfg.epochs == 0 {
        return cfg.optim.lr;
    }
    let progress = epoch as f64 / cfg.epochs as f64;
    0.5 * cfg.optim.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Name of the first parameter holding a non-finite value or gradient.
pub fn first_non_finite(store: &ParamStore) -> Option<String> {
    store
        .iter()
        .find(|(_, p)| !p.grad.is_finite() || !p.value.is_finite())
        .map(|(_, p)| p.name.clone())
}

/// Trains `model` in place. `on_epoch` sees each finished epoch and may stop
/// training early by returning `ControlFlow::Break`.
pub fn train_detector<F>(
    model: &mut Detector,
    scenes: &[Scenario],
    cfg: &TrainConfig,
    mut on_epoch: F,
) -> Result<Vec<EpochLog>>
where
    F: FnMut(&EpochLog, &Detector) -> ControlFlow<()>,
{
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Sgd::new(cfg.optim, &model.store);
    let mut logs = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        opt.cfg.lr = epoch_lr(cfg, epoch);
        let mut log = EpochLog {
            epoch,
            ..Default::default()
        };
        for batch in epoch_order(scenes.len(), cfg.shuffle_seed, epoch).chunks(cfg.batch_size) {
            model.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut g = Graph::new(&model.store);
                let terms = model.loss(&mut g, &scenes[i], &cfg.weights, cfg.temperature)?;
                let total = g.value(terms.total).data()[0];
                if !total.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite loss at epoch {epoch} on scene {}; first bad parameter: {}",
                        scenes[i].scene_id,
                        first_non_finite(&model.store).unwrap_or_else(|| "none".into())
                    )));
                }
                log.total += total;
                log.l_av += g.value(terms.l_av).data()[0];
                log.l_v += g.value(terms.l_v).data()[0];
                log.l_a += g.value(terms.l_a).data()[0];
                log.l_con += g.value(terms.l_con).data()[0];
                grads.push(g.backward(terms.total)?);
            }
            for gr in &grads {
                gr.accumulate_scaled(&mut model.store, scale);
            }
            if let Some(name) = first_non_finite(&model.store) {
                return Err(Error::Numerical(format!(
                    "non-finite gradient at epoch {epoch} in parameter {name}"
                )));
            }
            opt.step(&mut model.store);
        }
        let n = scenes.len() as f64;
        log.total /= n;
        log.l_av /= n;
        log.l_v /= n;
        log.l_a /= n;
        log.l_con /= n;
        logs.push(log);
        if on_epoch(&log, model).is_break() {
            break;
        }
    }
    Ok(logs)
}

/// Trains the speech-confidence branch on any-speech frame labels. Returns the
/// mean loss of each epoch.
pub fn train_gate(
    gate: &mut VoiceGateModel,
    scenes: &[Scenario],
    cfg: &TrainConfig,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    if scenes.is_empty() {
        return Err(Error::EmptyCorpus);
    }
    let mut opt = Sgd::new(cfg.gate_optim, &gate.store);
    let mut losses = Vec::with_capacity(cfg.gate_epochs);
    for epoch in 0..cfg.gate_epochs {
        let mut sum = 0.0;
        for batch in
            epoch_order(scenes.len(), cfg.shuffle_seed ^ 0x6A7E, epoch).chunks(cfg.batch_size)
        {
            gate.store.zero_grads();
            let scale = 1.0 / batch.len() as f64;
            let mut grads = Vec::with_capacity(batch.len());
            for &i in batch {
                let mut g = Graph::new(&gate.store);
                let loss = gate.loss(&mut g, &scenes[i])?;
                let v = g.value(loss).data()[0];
                if !v.is_finite() {
                    return Err(Error::Numerical(format!(
                        "non-finite voice gate loss at epoch {epoch}; first bad parameter: {}",
                        first_non_finite(&gate.store).unwrap_or_else(|| "none".into())
                    )));
                }
                sum += v;
                grads.push(g.backward(loss)?);
            }
            for gr in &grads {
                gr.accumulate_scaled(&mut gate.store, scale);
            }
            opt.step(&mut gate.store);
        }
        losses.push(sum / scenes.len() as f64);
    }
    Ok(losses)
}
