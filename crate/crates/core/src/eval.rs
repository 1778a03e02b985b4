//! Ranking and detection metrics over scored `(scene, speaker, frame)` cells,
//! plus the prediction CSV format.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use crate::data::Scenario;
use crate::error::{Error, Result};
use crate::model::{Detector, VoiceGateModel};
use crate::voice_gate::{gate_batch, GateParams};

#[derive(Clone, Debug, PartialEq)]
pub struct PredictionRecord {
    pub scene_id: String,
    pub speaker_idx: usize,
    pub frame_idx: usize,
    pub score: f64,
    pub p_voice: f64,
    pub label: u8,
}

pub type CellKey = (String, usize, usize);

impl PredictionRecord {
    pub fn key(&self) -> CellKey {
        (self.scene_id.clone(), self.speaker_idx, self.frame_idx)
    }

    fn key_ref(&self) -> (&str, usize, usize) {
        (&self.scene_id, self.speaker_idx, self.frame_idx)
    }
}

/// Descending score, then ascending `(scene, speaker, frame)`.
pub fn rank_order(a: &PredictionRecord, b: &PredictionRecord) -> Ordering {
    b.score
        .total_cmp(&a.score)
        .then_with(|| a.key_ref().cmp(&b.key_ref()))
}

/// Precision averaged over the rank of every positive.
pub fn average_precision(records: &[PredictionRecord]) -> Result<f64> {
    let positives = records.iter().filter(|r| r.label == 1).count();
    if positives == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive",
        ));
    }
    let mut sorted: Vec<&PredictionRecord> = records.iter().collect();
    sorted.sort_by(|a, b| rank_order(a, b));
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (rank, r) in sorted.iter().enumerate() {
        if r.label == 1 {
            hits += 1;
            sum += hits as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / positives as f64)
}

#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct F1Score {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// F1 of `score > threshold` against the labels, per speaker slot.
/// Vanishing denominators give 0.
pub fn f1_per_speaker(records: &[PredictionRecord], threshold: f64) -> BTreeMap<usize, F1Score> {
    let mut counts: BTreeMap<usize, (usize, usize, usize)> = BTreeMap::new();
    for r in records {
        let c = counts.entry(r.speaker_idx).or_default();
        let predicted = r.score > threshold;
        match (predicted, r.label == 1) {
            (true, true) => c.0 += 1,
            (true, false) => c.1 += 1,
            (false, true) => c.2 += 1,
            (false, false) => {}
        }
    }
    counts
        .into_iter()
        .map(|(sp, (tp, fp, fn_))| {
            let precision = ratio(tp, tp + fp);
            let recall = ratio(tp, tp + fn_);
            let f1 = if precision + recall == 0.0 {
                0.0
            } else {
                2.0 * precision * recall / (precision + recall)
            };
            (
                sp,
                F1Score {
                    precision,
                    recall,
                    f1,
                },
            )
        })
        .collect()
}

/// Label-0 records scoring above `threshold`, optionally only those whose
/// cell is in `distractors`.
pub fn false_positive_count(
    records: &[PredictionRecord],
    threshold: f64,
    distractors: Option<&HashSet<CellKey>>,
) -> usize {
    records
        .iter()
        .filter(|r| r.label == 0 && r.score > threshold)
        .filter(|r| distractors.is_none_or(|d| d.contains(&r.key())))
        .count()
}

/// Cells annotated as distractors across `scenes`.
pub fn distractor_cells(scenes: &[Scenario]) -> HashSet<CellKey> {
    let mut out = HashSet::new();
    for sc in scenes {
        for s in 0..sc.speakers() {
            for t in 0..sc.frames() {
                if sc.distractor.get(&[s, t]) != 0.0 && sc.mask.get(&[s, t]) != 0.0 {
                    out.insert((sc.scene_id.clone(), s, t));
                }
            }
        }
    }
    out
}

/// Scores every valid cell of `scenes`. `p_voice` comes from the gate model
/// when given (1 otherwise); `gate` additionally applies the correction rule.
pub fn predict(
    detector: &Detector,
    voice: Option<&VoiceGateModel>,
    gate: Option<&GateParams>,
    scenes: &[Scenario],
) -> Result<Vec<PredictionRecord>> {
    if gate.is_some() && voice.is_none() {
        return Err(Error::Contract("gating requires a voice gate model".into()));
    }
    let mut records = Vec::new();
    for sc in scenes {
        let raw = detector.predict(&sc.visual, &sc.audio)?;
        let p = match voice {
            Some(v) => v.confidence(&sc.audio)?,
            None => crate::tensor::Tensor::full(&[sc.frames()], 1.0),
        };
        let scores = match gate {
            Some(gp) => gate_batch(&raw, &p, gp)?,
            None => raw,
        };
        for s in 0..sc.speakers() {
            for t in 0..sc.frames() {
                if sc.mask.get(&[s, t]) == 0.0 {
                    continue;
                }
                records.push(PredictionRecord {
                    scene_id: sc.scene_id.clone(),
                    speaker_idx: s,
                    frame_idx: t,
                    score: scores.get(&[s, t]),
                    p_voice: p.data()[t],
                    label: u8::from(sc.labels.get(&[s, t]) != 0.0),
                });
            }
        }
    }
    Ok(records)
}

pub const CSV_HEADER: &str = "scene_id,speaker_idx,frame_idx,score,p_voice,label";
const COLUMNS: [&str; 6] = [
    "scene_id",
    "speaker_idx",
    "frame_idx",
    "score",
    "p_voice",
    "label",
];

pub fn predictions_to_csv(records: &[PredictionRecord]) -> String {
    let mut out = String::with_capacity(64 * (records.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(
            out,
            "{},{},{},{:.9},{:.9},{}",
            r.scene_id, r.speaker_idx, r.frame_idx, r.score, r.p_voice, r.label
        );
    }
    out
}

pub fn predictions_from_csv(text: &str) -> Result<Vec<PredictionRecord>> {
    let mut lines = text.lines().enumerate();
    let (_, header) = lines.next().ok_or(Error::Parse {
        line: 1,
        message: "missing header".into(),
    })?;
    let names: Vec<&str> = header.split(',').map(str::trim).collect();
    let mut index = [0usize; 6];
    for (slot, col) in index.iter_mut().zip(COLUMNS) {
        *slot = names
            .iter()
            .position(|n| *n == col)
            .ok_or_else(|| Error::Parse {
                line: 1,
                message: format!("missing column '{col}'"),
            })?;
    }
    let mut out = Vec::new();
    for (i, line) in lines {
        let lineno = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != names.len() {
            return Err(Error::Parse {
                line: lineno,
                message: format!("expected {} fields, found {}", names.len(), fields.len()),
            });
        }
        let field = |k: usize| fields[index[k]].trim();
        let bad = |k: usize| Error::Parse {
            line: lineno,
            message: format!("invalid {} '{}'", COLUMNS[k], fields[index[k]]),
        };
        let label: u8 = field(5).parse().map_err(|_| bad(5))?;
        if label > 1 {
            return Err(bad(5));
        }
        out.push(PredictionRecord {
            scene_id: field(0).to_string(),
            speaker_idx: field(1).parse().map_err(|_| bad(1))?,
            frame_idx: field(2).parse().map_err(|_| bad(2))?,
            score: field(3).parse().map_err(|_| bad(3))?,
            p_voice: field(4).parse().map_err(|_| bad(4))?,
            label,
        });
    }
    Ok(out)
}

pub fn write_predictions(records: &[PredictionRecord], path: &Path) -> Result<()> {
    std::fs::write(path, predictions_to_csv(records)).map_err(|e| Error::io(path, e))
}

pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    predictions_from_csv(&text)
}

/// Ordered `key=value` metrics report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct MetricsReport {
    entries: Vec<(String, String)>,
}

impl MetricsReport {
    pub fn push(&mut self, key: impl Into<String>, value: impl ToString) {
        self.entries.push((key.into(), value.to_string()));
    }

    pub fn push_f64(&mut self, key: impl Into<String>, value: f64) {
        self.push(key, format!("{value:.9}"));
    }

    pub fn get(&self, key: &str) -> Option<&str> {
        self.entries
            .iter()
            .find(|(k, _)| k == key)
            .map(|(_, v)| v.as_str())
    }

    pub fn render(&self) -> String {
        self.entries
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect()
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                message: format!("expected key=value, found '{line}'"),
            })?;
            entries.push((k.to_string(), v.to_string()));
        }
        Ok(MetricsReport { entries })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn rec(score: f64, label: u8) -> PredictionRecord {
        PredictionRecord {
            scene_id: "s".into(),
            speaker_idx: 0,
            frame_idx: 0,
            score,
            p_voice: 1.0,
            label,
        }
    }

    #[test]
    fn zero_positives_is_undefined() {
        assert!(matches!(
            average_precision(&[rec(0.1, 0)]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn missing_column_is_named() {
        let err = predictions_from_csv("scene_id,speaker_idx,frame_idx,score,label\n").unwrap_err();
        assert!(err.to_string().contains("p_voice"), "{err}");
    }

    #[test]
    fn malformed_row_reports_line() {
        let text = format!("{CSV_HEADER}\na,0,0,0.5,0.5,1\na,0,x,0.5,0.5,1\n");
        match predictions_from_csv(&text) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn false_positive_counts() {
        let records = [rec(0.5, 0), rec(-0.5, 0), rec(2.0, 1)];
        assert_eq!(false_positive_count(&records, 0.0, None), 1);
        assert_eq!(false_positive_count(&records, 10.0, None), 0);
        assert_eq!(false_positive_count(&records, -1e300, None), 2);
        let empty = HashSet::new();
        assert_eq!(false_positive_count(&records, 0.0, Some(&empty)), 0);
    }

    #[test]
    fn report_round_trips() {
        let mut r = MetricsReport::default();
        r.push_f64("ap", 0.5);
        r.push("fp", 3);
        assert_eq!(MetricsReport::parse(&r.render()).unwrap(), r);
        assert_eq!(r.get("fp"), Some("3"));
    }
}
