//! Command-line front end: `gen-data`, `train`, `eval`, `gradcheck`.
//!
//! Exit codes: 0 success, 1 usage or configuration error, 2 data or format
//! error, 3 numerical failure.

use std::fmt::Write as _;
use std::ops::ControlFlow;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checkpoint::{load_checkpoint, save_checkpoint};
use crate::config::RunConfig;
use crate::data::{generate, read_corpus, write_corpus};
use crate::error::{Error, Result};
use crate::eval::{
    average_precision, distractor_cells, f1_per_speaker, false_positive_count, predict,
    write_predictions, MetricsReport, PredictionRecord,
};
use crate::gradcheck::{run_gradcheck, GradcheckConfig};
use crate::model::{Detector, VoiceGateModel};
use crate::train::{train_detector, train_gate, EpochLog};
use crate::voice_gate::gate_apply;

/// Largest relative gradient error the `gradcheck` command accepts.
pub const GRADCHECK_TOLERANCE: f64 = 1e-3;

#[derive(Parser, Debug)]
#[command(
    name = "d2stream",
    version,
    about = "Audio-visual active speaker detection on synthetic scenes"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct ConfigArgs {
    /// `key = value` configuration file.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Override a single key, e.g. `--set gate.gamma=0.5`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub overrides: Vec<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    On,
    Off,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic corpus.
    GenData {
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        scenes: Option<usize>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Train the detector and the voice gate, then write a checkpoint.
    Train {
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        log: Option<PathBuf>,
        /// Held-out corpus checked after every epoch when `--stop-at-ap` is set.
        #[arg(long)]
        heldout: Option<PathBuf>,
        /// Stop once held-out AP reaches this value.
        #[arg(long, requires = "heldout")]
        stop_at_ap: Option<f64>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Score a corpus and report metrics.
    Eval {
        #[arg(long)]
        model: Option<PathBuf>,
        #[arg(long)]
        corpus: Option<PathBuf>,
        #[arg(long, value_enum, default_value = "on")]
        gate: Switch,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
        #[command(flatten)]
        cfg: ConfigArgs,
    },
    /// Compare analytic and finite-difference gradients.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// Corrupt the analytic gradient of parameters with this name prefix.
        #[arg(long)]
        corrupt: Option<String>,
    },
}

pub fn exit_code(err: &Error) -> i32 {
    match err {
        Error::Config(_) | Error::Parse { .. } => 1,
        Error::Numerical(_) => 3,
        _ => 2,
    }
}

fn load_config(args: &ConfigArgs) -> Result<RunConfig> {
    let mut cfg = match &args.config {
        Some(path) => RunConfig::load(path)?,
        None => RunConfig::default(),
    };
    for item in &args.overrides {
        let (k, v) = item
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got '{item}'")))?;
        cfg.set(k.trim(), v)?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn write_text(path: &std::path::Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn held_out_ap(detector: &Detector, scenes: &[crate::data::Scenario]) -> Result<f64> {
    average_precision(&predict(detector, None, None, scenes)?)
}

/// Runs one parsed command, writing human-readable output to `out`.
pub fn run(cli: Cli, out: &mut dyn std::io::Write) -> Result<()> {
    let io = |e: std::io::Error| Error::io("<stdout>", e);
    match cli.command {
        Command::GenData {
            seed,
            scenes,
            out: path,
            cfg,
        } => {
            let mut cfg = load_config(&cfg)?;
            if let Some(s) = seed {
                cfg.seed = s;
            }
            if let Some(n) = scenes {
                cfg.scenes = n;
            }
            if cfg.scenes == 0 {
                return Err(Error::Config("--scenes must be >= 1".into()));
            }
            let path = path.unwrap_or(cfg.corpus.clone());
            let corpus = generate(&cfg.gen_config(), cfg.scenes)?;
            write_corpus(&corpus, &path)?;
            writeln!(out, "wrote {} scenes to {}", corpus.len(), path.display()).map_err(io)?;
            let (mut cells, mut speaking, mut distracting) = (0.0, 0.0, 0.0);
            for sc in &corpus {
                cells += sc.mask.data().iter().sum::<f64>();
                speaking += sc.labels.data().iter().sum::<f64>();
                distracting += sc.distractor.data().iter().sum::<f64>();
            }
            writeln!(
                out,
                "speaking rate {:.4}, distractor rate {:.4} over {cells} cells",
                speaking / cells,
                distracting / cells
            )
            .map_err(io)?;
        }
        Command::Train {
            corpus,
            model,
            log,
            heldout,
            stop_at_ap,
            cfg,
        } => {
            let cfg = load_config(&cfg)?;
            for line in cfg.to_text().lines() {
                writeln!(out, "# {line}").map_err(io)?;
            }
            let scenes = read_corpus(&corpus.unwrap_or(cfg.corpus.clone()))?;
            let heldout = heldout.map(|p| read_corpus(&p)).transpose()?;
            let mut detector = Detector::new(cfg.model_config())?;
            let train_cfg = cfg.train_config();
            let mut csv = format!("{}\n", EpochLog::CSV_HEADER);
            writeln!(out, "{}", EpochLog::CSV_HEADER).map_err(io)?;
            let mut failure = None;
            train_detector(&mut detector, &scenes, &train_cfg, |log, det| {
                let line = log.csv_line();
                csv.push_str(&line);
                csv.push('\n');
                let _ = writeln!(out, "{line}");
                if let (Some(target), Some(h)) = (stop_at_ap, heldout.as_deref()) {
                    match held_out_ap(det, h) {
                        Ok(ap) => {
                            let _ = writeln!(out, "# held-out ap {ap:.6}");
                            if ap >= target {
                                return ControlFlow::Break(());
                            }
                        }
                        Err(e) => {
                            failure = Some(e);
                            return ControlFlow::Break(());
                        }
                    }
                }
                ControlFlow::Continue(())
            })?;
            if let Some(e) = failure {
                return Err(e);
            }
            write_text(&log.unwrap_or(cfg.train_log.clone()), &csv)?;
            let mut gate = VoiceGateModel::new(cfg.data.mel_bins, cfg.seed)?;
            let gate_losses = train_gate(&mut gate, &scenes, &train_cfg)?;
            if let Some(last) = gate_losses.last() {
                writeln!(out, "# voice gate loss {last:.6}").map_err(io)?;
            }
            let path = model.unwrap_or(cfg.model_path.clone());
            save_checkpoint(&detector, &gate, &path)?;
            writeln!(out, "# wrote checkpoint {}", path.display()).map_err(io)?;
        }
        Command::Eval {
            model,
            corpus,
            gate,
            out: pred_path,
            metrics,
            cfg,
        } => {
            let cfg = load_config(&cfg)?;
            let (detector, voice) = load_checkpoint(&model.unwrap_or(cfg.model_path.clone()))?;
            let scenes = read_corpus(&corpus.unwrap_or(cfg.eval_corpus.clone()))?;
            let report = evaluate(&detector, &voice, &scenes, &cfg, gate == Switch::On)?;
            write_predictions(&report.1, &pred_path.unwrap_or(cfg.predictions.clone()))?;
            let text = report.0.render();
            write_text(&metrics.unwrap_or(cfg.metrics.clone()), &text)?;
            out.write_all(text.as_bytes()).map_err(io)?;
        }
        Command::Gradcheck { seed, corrupt } => {
            let report = run_gradcheck(&GradcheckConfig {
                seed,
                corrupt,
                ..Default::default()
            })?;
            out.write_all(report.render().as_bytes()).map_err(io)?;
            let worst = report.worst().cloned();
            if let Some(w) = worst.filter(|w| w.worst > GRADCHECK_TOLERANCE) {
                return Err(Error::Numerical(format!(
                    "gradient mismatch in module {}: relative error {:.3e} at {} exceeds {GRADCHECK_TOLERANCE:e}",
                    w.module, w.worst, w.worst_param
                )));
            }
            writeln!(
                out,
                "max relative error {:.3e} over {} parameters",
                report.max_error(),
                report.checked()
            )
            .map_err(io)?;
        }
    }
    Ok(())
}

/// Metrics for `scenes` plus the emitted prediction records (gated or not).
pub fn evaluate(
    detector: &Detector,
    voice: &VoiceGateModel,
    scenes: &[crate::data::Scenario],
    cfg: &RunConfig,
    gated: bool,
) -> Result<(MetricsReport, Vec<PredictionRecord>)> {
    let ungated = predict(detector, Some(voice), None, scenes)?;
    let with_gate: Vec<PredictionRecord> = ungated
        .iter()
        .map(|r| PredictionRecord {
            score: gate_apply(r.score, r.p_voice, &cfg.gate),
            ..r.clone()
        })
        .collect();
    let thr = cfg.eval_threshold;
    let distractors = distractor_cells(scenes);
    let chosen = if gated { &with_gate } else { &ungated };

    let mut m = MetricsReport::default();
    m.push("gate", if gated { "on" } else { "off" });
    m.push("cells", chosen.len());
    m.push_f64("ap", average_precision(chosen)?);
    m.push_f64("ap_ungated", average_precision(&ungated)?);
    m.push_f64("ap_gated", average_precision(&with_gate)?);
    m.push_f64("threshold", thr);
    for (sp, f) in f1_per_speaker(chosen, thr) {
        m.push_f64(format!("f1.speaker{sp}"), f.f1);
        m.push_f64(format!("precision.speaker{sp}"), f.precision);
        m.push_f64(format!("recall.speaker{sp}"), f.recall);
    }
    m.push("fp", false_positive_count(chosen, thr, None));
    m.push("distractor_cells", distractors.len());
    m.push(
        "fp_distractor_ungated",
        false_positive_count(&ungated, thr, Some(&distractors)),
    );
    m.push(
        "fp_distractor_gated",
        false_positive_count(&with_gate, thr, Some(&distractors)),
    );
    Ok((m, chosen.clone()))
}

/// Parses `args` and runs the command; returns the process exit code.
pub fn main_with_args<I, T>(
    args: I,
    out: &mut dyn std::io::Write,
    err: &mut dyn std::io::Write,
) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(cli) => cli,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let mut msg = String::new();
            let _ = write!(msg, "{}", e.render());
            if code == 0 {
                let _ = out.write_all(msg.as_bytes());
            } else {
                let _ = err.write_all(msg.as_bytes());
            }
            return code;
        }
    };
    match run(cli, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            exit_code(&e)
        }
    }
}
