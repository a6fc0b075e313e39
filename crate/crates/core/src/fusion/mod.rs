//! Fusion of OCR text boxes and icon/widget boxes into interactive elements.
//!
//! Text boxes are judged one at a time, in input order:
//!
//! 1. wider than `max_text_width_fraction` of the image: dropped;
//! 2. contained (with `containment_eps` slack) in an icon: dropped as a
//!    standalone element, its string attached to the smallest containing icon;
//! 3. IoU with some icon at or above `iou_keep_threshold`: kept as a text
//!    element with the OCR geometry;
//! 4. otherwise dropped as non-interactive.
//!
//! Every icon that survives duplicate suppression is emitted.

mod backend;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{ElementKind, UiElement};
use crate::geometry::{contains, iou, BBox, DEFAULT_CONTAINMENT_EPS};

pub use backend::{DetectorBackend, ImageFormatTag, RemoteDetector, ScreenImage, StubDetector};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextDetection {
    pub bbox: BBox,
    pub text: String,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IconDetection {
    pub bbox: BBox,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RawDetections {
    pub text_boxes: Vec<TextDetection>,
    pub icon_boxes: Vec<IconDetection>,
    pub image_width: u32,
    pub image_height: u32,
}

#[derive(Debug, Clone, PartialEq, Error)]
pub enum FusionError {
    #[error("{what} #{index} lies outside the {width}x{height} image")]
    OutOfBounds {
        what: &'static str,
        index: usize,
        width: u32,
        height: u32,
    },
    #[error("{what} #{index} has confidence {value} outside [0, 1]")]
    Confidence {
        what: &'static str,
        index: usize,
        value: f64,
    },
    #[error("invalid fusion config: {0}")]
    Config(String),
}

impl RawDetections {
    pub fn validate(&self) -> Result<(), FusionError> {
        let (w, h) = (self.image_width, self.image_height);
        let check = |what, index, bbox: &BBox, conf: f64| {
            if !bbox.within_image(w as f64, h as f64) {
                return Err(FusionError::OutOfBounds {
                    what,
                    index,
                    width: w,
                    height: h,
                });
            }
            if !(0.0..=1.0).contains(&conf) {
                return Err(FusionError::Confidence {
                    what,
                    index,
                    value: conf,
                });
            }
            Ok(())
        };
        for (i, t) in self.text_boxes.iter().enumerate() {
            check("text box", i, &t.bbox, t.confidence)?;
        }
        for (i, ic) in self.icon_boxes.iter().enumerate() {
            check("icon box", i, &ic.bbox, ic.confidence)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FusionConfig {
    pub iou_keep_threshold: f64,
    pub containment_eps: f64,
    pub max_text_width_fraction: f64,
    pub icon_nms_iou: f64,
}

impl Default for FusionConfig {
    fn default() -> Self {
        FusionConfig {
            iou_keep_threshold: 0.7,
            containment_eps: DEFAULT_CONTAINMENT_EPS,
            max_text_width_fraction: 0.6,
            icon_nms_iou: 0.9,
        }
    }
}

impl FusionConfig {
    pub fn validate(&self) -> Result<(), FusionError> {
        let unit = |name: &str, v: f64| {
            if v > 0.0 && v <= 1.0 {
                Ok(())
            } else {
                Err(FusionError::Config(format!("{name} = {v} must lie in (0, 1]")))
            }
        };
        unit("iou_keep_threshold", self.iou_keep_threshold)?;
        unit("max_text_width_fraction", self.max_text_width_fraction)?;
        unit("icon_nms_iou", self.icon_nms_iou)?;
        if !(self.containment_eps >= 0.0 && self.containment_eps.is_finite()) {
            return Err(FusionError::Config(format!(
                "containment_eps = {} must be finite and >= 0",
                self.containment_eps
            )));
        }
        Ok(())
    }
}

/// Greedy suppression of duplicate icons: visiting boxes by descending
/// confidence (earlier index first on ties), a box is kept unless it overlaps
/// an already kept box with IoU >= `icon_nms_iou`. Survivors keep input order.
pub fn dedupe_icons(icons: &[IconDetection], config: &FusionConfig) -> Vec<IconDetection> {
    let mut order: Vec<usize> = (0..icons.len()).collect();
    order.sort_by(|&a, &b| {
        icons[b]
            .confidence
            .total_cmp(&icons[a].confidence)
            .then(a.cmp(&b))
    });
    let mut kept: Vec<usize> = Vec::with_capacity(icons.len());
    for idx in order {
        let dup = kept
            .iter()
            .any(|&k| iou(&icons[k].bbox, &icons[idx].bbox) >= config.icon_nms_iou);
        if !dup {
            kept.push(idx);
        }
    }
    kept.sort_unstable();
    kept.into_iter().map(|i| icons[i].clone()).collect()
}

/// Fuses raw detections into elements (icons first, then texts, each in input
/// order). Mark ids are left at 0. Callers should run
/// [`RawDetections::validate`] first; fusion itself never fails.
pub fn fuse(raw: &RawDetections, config: &FusionConfig) -> Vec<UiElement> {
    let icons = dedupe_icons(&raw.icon_boxes, config);
    let max_width = config.max_text_width_fraction * raw.image_width as f64;

    let mut attached: Vec<Vec<usize>> = vec![Vec::new(); icons.len()];
    let mut kept_texts = Vec::new();
    for (ti, t) in raw.text_boxes.iter().enumerate() {
        if t.bbox.width() > max_width {
            continue;
        }
        let host = icons
            .iter()
            .enumerate()
            .filter(|(_, ic)| contains(&ic.bbox, &t.bbox, config.containment_eps))
            .min_by(|(ia, a), (ib, b)| a.bbox.area().total_cmp(&b.bbox.area()).then(ia.cmp(ib)))
            .map(|(i, _)| i);
        if let Some(host) = host {
            attached[host].push(ti);
            continue;
        }
        let best = icons
            .iter()
            .map(|ic| iou(&ic.bbox, &t.bbox))
            .fold(0.0f64, f64::max);
        if !icons.is_empty() && best >= config.iou_keep_threshold {
            kept_texts.push(ti);
        }
    }

    let mut out = Vec::with_capacity(icons.len() + kept_texts.len());
    for (icon, mut texts) in icons.iter().zip(attached) {
        texts.sort_by(|&a, &b| {
            let (ba, bb) = (&raw.text_boxes[a].bbox, &raw.text_boxes[b].bbox);
            ba.y1()
                .total_cmp(&bb.y1())
                .then(ba.x1().total_cmp(&bb.x1()))
                .then(a.cmp(&b))
        });
        let joined = texts
            .iter()
            .map(|&i| raw.text_boxes[i].text.trim())
            .filter(|s| !s.is_empty())
            .collect::<Vec<_>>()
            .join(" ");
        out.push(UiElement {
            mark_id: 0,
            bbox: icon.bbox,
            kind: ElementKind::IconWidget,
            embedded_text: (!joined.is_empty()).then_some(joined),
            caption: None,
            source_confidence: icon.confidence,
        });
    }
    for ti in kept_texts {
        let t = &raw.text_boxes[ti];
        let text = t.text.trim();
        out.push(UiElement {
            mark_id: 0,
            bbox: t.bbox,
            kind: ElementKind::Text,
            embedded_text: (!text.is_empty()).then(|| text.to_string()),
            caption: None,
            source_confidence: t.confidence,
        });
    }
    out
}
