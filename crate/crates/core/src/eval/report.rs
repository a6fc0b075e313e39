use std::collections::{BTreeMap, HashSet};
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{
    box_iou, check_tau, exact_match, hit, index_predictions, ratio, read_predictions, read_samples,
    token_f1, EvalError, GroundingSample, Prediction,
};

pub const DEFAULT_TAUS: [f64; 3] = [0.2, 0.5, 0.7];

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TauScore {
    pub tau: f64,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupReport {
    pub count: usize,
    pub element_accuracy: f64,
    pub iou_at: Vec<TauScore>,
    /// Number of samples with ground-truth text.
    pub ocr_count: usize,
    pub em_score: Option<f64>,
    pub f1_score: Option<f64>,
}

impl GroupReport {
    pub fn iou(&self, tau: f64) -> Option<f64> {
        self.iou_at.iter().find(|t| t.tau == tau).map(|t| t.accuracy)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    #[serde(flatten)]
    pub overall: GroupReport,
    /// Keyed `"platform/kind"`.
    pub groups: BTreeMap<String, GroupReport>,
    /// Samples whose prediction was a point; scored 0 for every IoU@τ.
    pub point_only: Vec<String>,
    /// Samples with no prediction; scored as misses.
    pub missing_predictions: Vec<String>,
    /// Prediction ids with no matching sample; ignored.
    pub unmatched_predictions: Vec<String>,
}

#[derive(Debug, Clone, Default)]
struct Tally {
    count: usize,
    hits: usize,
    iou_hits: Vec<usize>,
    ocr: usize,
    em: f64,
    f1: f64,
}

impl Tally {
    fn new(taus: usize) -> Self {
        Tally {
            iou_hits: vec![0; taus],
            ..Tally::default()
        }
    }

    fn add(&mut self, pred: Option<&Prediction>, sample: &GroundingSample, taus: &[f64]) {
        self.count += 1;
        self.hits += hit(pred, sample) as usize;
        if let Some(v) = box_iou(pred, sample) {
            for (slot, tau) in self.iou_hits.iter_mut().zip(taus) {
                *slot += (v >= *tau) as usize;
            }
        }
        if let Some(gt) = &sample.gt_text {
            self.ocr += 1;
            if let Some(text) = pred.and_then(|p| p.pred_text.as_deref()) {
                self.em += exact_match(text, gt);
                self.f1 += token_f1(text, gt);
            }
        }
    }

    fn finish(&self, taus: &[f64]) -> GroupReport {
        let mean = |sum: f64| (self.ocr > 0).then(|| sum / self.ocr as f64);
        GroupReport {
            count: self.count,
            element_accuracy: ratio(self.hits, self.count),
            iou_at: taus
                .iter()
                .zip(&self.iou_hits)
                .map(|(tau, h)| TauScore {
                    tau: *tau,
                    accuracy: ratio(*h, self.count),
                })
                .collect(),
            ocr_count: self.ocr,
            em_score: mean(self.em),
            f1_score: mean(self.f1),
        }
    }
}

/// Scores `preds` against `samples` overall and per (platform, kind).
/// Samples are visited in sample-id order so the result does not depend on
/// input order.
pub fn evaluate(
    preds: &[Prediction],
    samples: &[GroundingSample],
    taus: &[f64],
) -> Result<MetricsReport, EvalError> {
    if samples.is_empty() {
        return Err(EvalError::Empty("no samples"));
    }
    if preds.is_empty() {
        return Err(EvalError::Empty("no predictions"));
    }
    for tau in taus {
        check_tau(*tau)?;
    }
    let mut ordered: Vec<&GroundingSample> = samples.iter().collect();
    ordered.sort_by(|a, b| a.sample_id.cmp(&b.sample_id));
    if let Some(w) = ordered.windows(2).find(|w| w[0].sample_id == w[1].sample_id) {
        return Err(EvalError::DuplicateSample(w[0].sample_id.clone()));
    }
    let idx = index_predictions(preds)?;
    let known: HashSet<&str> = samples.iter().map(|s| s.sample_id.as_str()).collect();
    let mut unmatched: Vec<String> = preds
        .iter()
        .filter(|p| !known.contains(p.sample_id.as_str()))
        .map(|p| p.sample_id.clone())
        .collect();
    unmatched.sort();
    if unmatched.len() == preds.len() {
        return Err(EvalError::NoOverlap { unmatched });
    }
    if !unmatched.is_empty() {
        log::warn!("{} prediction(s) match no sample", unmatched.len());
    }

    let mut overall = Tally::new(taus.len());
    let mut groups: BTreeMap<String, Tally> = BTreeMap::new();
    let mut point_only = Vec::new();
    let mut missing = Vec::new();
    for s in ordered {
        let pred = idx.get(s.sample_id.as_str()).copied();
        match pred.map(|p| p.geometry) {
            None => missing.push(s.sample_id.clone()),
            Some(Some(super::Geometry::Point(_))) => point_only.push(s.sample_id.clone()),
            _ => {}
        }
        overall.add(pred, s, taus);
        groups
            .entry(format!("{}/{}", s.platform, s.kind))
            .or_insert_with(|| Tally::new(taus.len()))
            .add(pred, s, taus);
    }
    Ok(MetricsReport {
        overall: overall.finish(taus),
        groups: groups.into_iter().map(|(k, t)| (k, t.finish(taus))).collect(),
        point_only,
        missing_predictions: missing,
        unmatched_predictions: unmatched,
    })
}

pub fn evaluate_run(pred_file: &Path, sample_file: &Path, taus: &[f64]) -> Result<MetricsReport, EvalError> {
    let preds = read_predictions(pred_file)?;
    let samples = read_samples(sample_file)?;
    evaluate(&preds, &samples, taus)
}

fn pct(v: Option<f64>) -> String {
    v.map_or_else(|| "-".to_string(), |v| format!("{:.2}", v * 100.0))
}

impl MetricsReport {
    /// Fixed-width table, one row per group then the overall row, values in
    /// percent.
    pub fn table(&self) -> String {
        let width = self
            .groups
            .keys()
            .map(String::len)
            .chain(["Group".len(), "overall".len()])
            .max()
            .unwrap_or(0);
        let mut out = String::new();
        let _ = write!(out, "{:<width$} {:>5}", "Group", "N");
        for t in &self.overall.iou_at {
            let _ = write!(out, " {:>8}", format!("IoU@{}", t.tau));
        }
        let _ = writeln!(out, " {:>8} {:>8} {:>8}", "ElemAcc", "EM", "F1");
        let row = |out: &mut String, name: &str, g: &GroupReport| {
            let _ = write!(out, "{name:<width$} {:>5}", g.count);
            for t in &g.iou_at {
                let _ = write!(out, " {:>8}", pct(Some(t.accuracy)));
            }
            let _ = writeln!(
                out,
                " {:>8} {:>8} {:>8}",
                pct(Some(g.element_accuracy)),
                pct(g.em_score),
                pct(g.f1_score)
            );
        };
        for (name, g) in &self.groups {
            row(&mut out, name, g);
        }
        row(&mut out, "overall", &self.overall);
        out
    }
}
