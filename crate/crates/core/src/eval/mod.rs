//! Grounding and OCR scoring: element accuracy, IoU@τ, exact match and
//! token F1, with per-(platform, kind) breakdowns.

mod report;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::dataset::ElementKind;
use crate::geometry::{self, BBox, Point};
use crate::jsonl::JsonlError;

pub use report::{evaluate, evaluate_run, GroupReport, MetricsReport, TauScore, DEFAULT_TAUS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Platform {
    Mobile,
    Desktop,
    Web,
}

impl Platform {
    pub fn as_str(self) -> &'static str {
        match self {
            Platform::Mobile => "mobile",
            Platform::Desktop => "desktop",
            Platform::Web => "web",
        }
    }
}

impl fmt::Display for Platform {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroundingSample {
    pub sample_id: String,
    pub image_id: String,
    pub instruction: String,
    pub gt_bbox: BBox,
    pub platform: Platform,
    pub kind: ElementKind,
    /// Present for OCR samples only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_text: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Geometry {
    Point(Point),
    BBox(BBox),
}

impl Geometry {
    /// The click point a prediction stands for: a box contributes its center.
    pub fn as_point(&self) -> Point {
        match self {
            Geometry::Point(p) => *p,
            Geometry::BBox(b) => geometry::center(b),
        }
    }
}

/// Wire form: `{sample_id, point: [x, y] | bbox: [x1, y1, x2, y2], pred_text}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PredictionWire", into = "PredictionWire")]
pub struct Prediction {
    pub sample_id: String,
    pub geometry: Option<Geometry>,
    pub pred_text: Option<String>,
}

#[derive(Serialize, Deserialize)]
struct PredictionWire {
    sample_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    point: Option<Point>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    bbox: Option<BBox>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pred_text: Option<String>,
}

impl TryFrom<PredictionWire> for Prediction {
    type Error = String;

    fn try_from(w: PredictionWire) -> Result<Self, String> {
        let geometry = match (w.point, w.bbox) {
            (Some(_), Some(_)) => {
                return Err(format!("prediction {} has both point and bbox", w.sample_id));
            }
            (Some(p), None) => Some(Geometry::Point(p)),
            (None, Some(b)) => Some(Geometry::BBox(b)),
            (None, None) => None,
        };
        Ok(Prediction {
            sample_id: w.sample_id,
            geometry,
            pred_text: w.pred_text,
        })
    }
}

impl From<Prediction> for PredictionWire {
    fn from(p: Prediction) -> Self {
        let (point, bbox) = match p.geometry {
            Some(Geometry::Point(pt)) => (Some(pt), None),
            Some(Geometry::BBox(b)) => (None, Some(b)),
            None => (None, None),
        };
        PredictionWire {
            sample_id: p.sample_id,
            point,
            bbox,
            pred_text: p.pred_text,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum EvalError {
    #[error("duplicate prediction for sample {0}")]
    DuplicatePrediction(String),
    #[error("duplicate sample id {0}")]
    DuplicateSample(String),
    #[error("IoU threshold {0} outside (0, 1]")]
    Tau(f64),
    #[error("{0}")]
    Empty(&'static str),
    #[error("no prediction matches any sample ({} unmatched)", unmatched.len())]
    NoOverlap { unmatched: Vec<String> },
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
}

/// Predictions indexed by sample id.
pub(crate) fn index_predictions(preds: &[Prediction]) -> Result<HashMap<&str, &Prediction>, EvalError> {
    let mut out = HashMap::with_capacity(preds.len());
    for p in preds {
        if out.insert(p.sample_id.as_str(), p).is_some() {
            return Err(EvalError::DuplicatePrediction(p.sample_id.clone()));
        }
    }
    Ok(out)
}

fn check_tau(tau: f64) -> Result<(), EvalError> {
    if tau > 0.0 && tau <= 1.0 {
        Ok(())
    } else {
        Err(EvalError::Tau(tau))
    }
}

pub(crate) fn hit(pred: Option<&Prediction>, sample: &GroundingSample) -> bool {
    pred.and_then(|p| p.geometry)
        .is_some_and(|g| geometry::point_in(&sample.gt_bbox, &g.as_point()))
}

/// IoU for box predictions; None for point-only or missing geometry.
pub(crate) fn box_iou(pred: Option<&Prediction>, sample: &GroundingSample) -> Option<f64> {
    match pred.and_then(|p| p.geometry) {
        Some(Geometry::BBox(b)) => Some(geometry::iou(&b, &sample.gt_bbox)),
        _ => None,
    }
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Fraction of samples whose prediction point (or box center) lies inside the
/// ground-truth box. Samples without a prediction are misses.
pub fn element_accuracy(preds: &[Prediction], samples: &[GroundingSample]) -> Result<f64, EvalError> {
    let idx = index_predictions(preds)?;
    let hits = samples
        .iter()
        .filter(|s| hit(idx.get(s.sample_id.as_str()).copied(), s))
        .count();
    Ok(ratio(hits, samples.len()))
}

/// Fraction of samples whose predicted box reaches IoU ≥ `tau`. Point
/// predictions never count.
pub fn iou_at(preds: &[Prediction], samples: &[GroundingSample], tau: f64) -> Result<f64, EvalError> {
    check_tau(tau)?;
    let idx = index_predictions(preds)?;
    let hits = samples
        .iter()
        .filter(|s| box_iou(idx.get(s.sample_id.as_str()).copied(), s).is_some_and(|v| v >= tau))
        .count();
    Ok(ratio(hits, samples.len()))
}

/// Trim, collapse internal whitespace, lowercase. Punctuation is kept.
pub fn normalize_text(s: &str) -> String {
    s.split_whitespace()
        .map(str::to_lowercase)
        .collect::<Vec<_>>()
        .join(" ")
}

pub fn exact_match(pred: &str, gt: &str) -> f64 {
    if normalize_text(pred) == normalize_text(gt) {
        1.0
    } else {
        0.0
    }
}

/// Token-multiset F1 over whitespace tokens of the normalized strings.
pub fn token_f1(pred: &str, gt: &str) -> f64 {
    let p = normalize_text(pred);
    let g = normalize_text(gt);
    let p: Vec<&str> = p.split(' ').filter(|t| !t.is_empty()).collect();
    let g: Vec<&str> = g.split(' ').filter(|t| !t.is_empty()).collect();
    if p.is_empty() || g.is_empty() {
        return if p.is_empty() && g.is_empty() { 1.0 } else { 0.0 };
    }
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for t in &g {
        *counts.entry(t).or_insert(0) += 1;
    }
    let mut common = 0;
    for t in &p {
        if let Some(c) = counts.get_mut(t) {
            if *c > 0 {
                *c -= 1;
                common += 1;
            }
        }
    }
    if common == 0 {
        return 0.0;
    }
    let precision = common as f64 / p.len() as f64;
    let recall = common as f64 / g.len() as f64;
    2.0 * precision * recall / (precision + recall)
}

fn text_metric(
    preds: &[Prediction],
    samples: &[GroundingSample],
    score: fn(&str, &str) -> f64,
) -> Result<Option<f64>, EvalError> {
    let idx = index_predictions(preds)?;
    let mut total = 0.0;
    let mut n = 0;
    for s in samples {
        let Some(gt) = &s.gt_text else { continue };
        n += 1;
        if let Some(text) = idx.get(s.sample_id.as_str()).and_then(|p| p.pred_text.as_deref()) {
            total += score(text, gt);
        }
    }
    Ok((n > 0).then(|| total / n as f64))
}

/// Mean exact match over samples that carry `gt_text`; None when none do.
pub fn em_score(preds: &[Prediction], samples: &[GroundingSample]) -> Result<Option<f64>, EvalError> {
    text_metric(preds, samples, exact_match)
}

/// Mean token F1 over samples that carry `gt_text`; None when none do.
pub fn f1_score(preds: &[Prediction], samples: &[GroundingSample]) -> Result<Option<f64>, EvalError> {
    text_metric(preds, samples, token_f1)
}

pub fn read_predictions(path: &Path) -> Result<Vec<Prediction>, EvalError> {
    Ok(crate::jsonl::read_file(path)?)
}

pub fn read_samples(path: &Path) -> Result<Vec<GroundingSample>, EvalError> {
    Ok(crate::jsonl::read_file(path)?)
}
