//! Central finite-difference verification of the analytic gradients of the
//! small detector and the speech-confidence network.

use std::collections::BTreeMap;

use crate::data::{generate_scene, GenConfig, Scenario};
use crate::error::Result;
use crate::graph::{Gradients, Graph};
use crate::losses::LossWeights;
use crate::model::{Detector, ModelConfig, VoiceGateModel};
use crate::params::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct GradcheckConfig {
    pub step: f64,
    /// Denominator floor of the relative error, so that two vanishing
    /// gradients do not report a large ratio of rounding noise.
    pub floor: f64,
    pub seed: u64,
    /// Parameters whose name starts with this prefix get their analytic
    /// gradient deliberately corrupted.
    pub corrupt: Option<String>,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        GradcheckConfig {
            step: 1e-4,
            floor: 1e-6,
            seed: 0,
            corrupt: None,
        }
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

#[derive(Clone, Debug, PartialEq)]
pub struct ModuleError {
    pub module: String,
    pub worst: f64,
    pub worst_param: String,
    pub checked: usize,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct GradcheckReport {
    pub modules: Vec<ModuleError>,
}

impl GradcheckReport {
    pub fn max_error(&self) -> f64 {
        self.modules.iter().map(|m| m.worst).fold(0.0, f64::max)
    }

    pub fn checked(&self) -> usize {
        self.modules.iter().map(|m| m.checked).sum()
    }

    /// The module with the largest error.
    pub fn worst(&self) -> Option<&ModuleError> {
        self.modules
            .iter()
            .max_by(|a, b| a.worst.total_cmp(&b.worst))
    }

    pub fn render(&self) -> String {
        let mut out = String::from("module,worst_rel_err,worst_param,checked\n");
        for m in &self.modules {
            out.push_str(&format!(
                "{},{:.3e},{},{}\n",
                m.module, m.worst, m.worst_param, m.checked
            ));
        }
        out
    }
}

/// First two dotted components of a parameter name.
pub fn module_of(name: &str) -> String {
    name.split('.').take(2).collect::<Vec<_>>().join(".")
}

/// A model plus the scalar objectives to check. Every objective is read off
/// the same perturbed forward pass.
trait Case {
    fn store(&self) -> &ParamStore;
    fn store_mut(&mut self) -> &mut ParamStore;
    fn loss_values(&self) -> Result<Vec<f64>>;
    fn gradients(&self) -> Result<Vec<Gradients>>;
}

struct DetectorCase {
    model: Detector,
    scene: Scenario,
    weights: LossWeights,
}

const TEMPERATURE: f64 = 0.07;

impl Case for DetectorCase {
    fn store(&self) -> &ParamStore {
        &self.model.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.model.store
    }
    fn loss_values(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.model.store);
        let terms = self
            .model
            .loss(&mut g, &self.scene, &self.weights, TEMPERATURE)?;
        Ok(terms
            .parts()
            .iter()
            .map(|&v| g.value(v).data()[0])
            .collect())
    }
    fn gradients(&self) -> Result<Vec<Gradients>> {
        let mut g = Graph::new(&self.model.store);
        let terms = self
            .model
            .loss(&mut g, &self.scene, &self.weights, TEMPERATURE)?;
        terms.parts().iter().map(|&v| g.backward(v)).collect()
    }
}

struct GateCase {
    gate: VoiceGateModel,
    scene: Scenario,
}

impl Case for GateCase {
    fn store(&self) -> &ParamStore {
        &self.gate.store
    }
    fn store_mut(&mut self) -> &mut ParamStore {
        &mut self.gate.store
    }
    fn loss_values(&self) -> Result<Vec<f64>> {
        let mut g = Graph::new(&self.gate.store);
        let loss = self.gate.loss(&mut g, &self.scene)?;
        Ok(vec![g.value(loss).data()[0]])
    }
    fn gradients(&self) -> Result<Vec<Gradients>> {
        let mut g = Graph::new(&self.gate.store);
        let loss = self.gate.loss(&mut g, &self.scene)?;
        Ok(vec![g.backward(loss)?])
    }
}

fn check_case(
    case: &mut dyn Case,
    cfg: &GradcheckConfig,
    out: &mut BTreeMap<String, ModuleError>,
) -> Result<()> {
    let grads = case.gradients()?;
    let ids: Vec<_> = case.store().ids().collect();
    for id in ids {
        let name = case.store().get(id).name.clone();
        let n = case.store().get(id).value.len();
        let analytic: Vec<Vec<f64>> = grads
            .iter()
            .map(|gr| match gr.param(id) {
                Some(t) => t.data().to_vec(),
                None => vec![0.0; n],
            })
            .collect();
        let corrupt = cfg.corrupt.as_deref().is_some_and(|p| name.starts_with(p));
        let entry = out.entry(module_of(&name)).or_insert_with(|| ModuleError {
            module: module_of(&name),
            worst: 0.0,
            worst_param: String::new(),
            checked: 0,
        });
        for k in 0..n {
            let orig = case.store().get(id).value.data()[k];
            case.store_mut().get_mut(id).value.data_mut()[k] = orig + cfg.step;
            let plus = case.loss_values()?;
            case.store_mut().get_mut(id).value.data_mut()[k] = orig - cfg.step;
            let minus = case.loss_values()?;
            case.store_mut().get_mut(id).value.data_mut()[k] = orig;
            entry.checked += 1;
            for (term, a) in analytic.iter().enumerate() {
                let numeric = (plus[term] - minus[term]) / (2.0 * cfg.step);
                let mut a = a[k];
                if corrupt {
                    a = 1.1 * a + 1e-3;
                }
                let err = relative_error(a, numeric, cfg.floor);
                if err > entry.worst || entry.worst_param.is_empty() {
                    entry.worst = err.max(entry.worst);
                    entry.worst_param = format!("{name}[{k}]");
                }
            }
        }
    }
    Ok(())
}

/// A two-speaker, three-frame scene whose labels give every speaker two
/// active frames so the contrastive term contributes.
pub fn gradcheck_scene(seed: u64) -> Result<Scenario> {
    let tiny = ModelConfig::tiny();
    let gen = GenConfig {
        seed,
        speakers: 2,
        frames: 3,
        height: tiny.height,
        width: tiny.width,
        mel_bins: tiny.mel_bins,
        ..Default::default()
    };
    let mut scene = generate_scene(&gen, 0)?;
    scene.labels = Tensor::new(vec![2, 3], vec![1.0, 1.0, 0.0, 0.0, 1.0, 1.0])?;
    scene.mask = Tensor::full(&[2, 3], 1.0);
    Ok(scene)
}

/// Checks every scalar parameter of the small detector and of the speech
/// confidence network.
pub fn run_gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let scene = gradcheck_scene(cfg.seed)?;
    let model_cfg = ModelConfig {
        init_seed: cfg.seed,
        ..ModelConfig::tiny()
    };
    let mut modules = BTreeMap::new();
    let mut detector = DetectorCase {
        model: Detector::new(model_cfg.clone())?,
        scene: scene.clone(),
        weights: LossWeights::default(),
    };
    check_case(&mut detector, cfg, &mut modules)?;
    let mut gate = GateCase {
        gate: VoiceGateModel::new(model_cfg.mel_bins, cfg.seed)?,
        scene,
    };
    check_case(&mut gate, cfg, &mut modules)?;
    Ok(GradcheckReport {
        modules: modules.into_values().collect(),
    })
}
