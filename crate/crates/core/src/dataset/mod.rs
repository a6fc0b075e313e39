//! Record schema for annotated desktop screenshots, plus storage, splitting
//! and corpus statistics.
//!
//! Field names in this module are a compatibility contract for the on-disk
//! line-delimited format; do not rename them.

mod io;
mod split;
mod stats;
mod store;

use std::collections::HashSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::geometry::BBox;

pub use io::{read_records, read_records_from, write_records, write_records_to};
pub use split::{make_benchmark_split, SplitError};
pub use stats::{compute_stats, StatsAccumulator, StatsReport, DEFAULT_HEATMAP_GRID};
pub use store::{DatasetStore, StoreError};

pub const SCHEMA_VERSION: &str = "1";

/// Closed vocabulary of element types a caption can name.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum UiType {
    Button,
    Icon,
    Input,
    Dropdown,
    Checkbox,
    Link,
    Tab,
    Menu,
    Slider,
    #[serde(other)]
    Other,
}

impl UiType {
    pub const ALL: [UiType; 10] = [
        UiType::Button,
        UiType::Icon,
        UiType::Input,
        UiType::Dropdown,
        UiType::Checkbox,
        UiType::Link,
        UiType::Tab,
        UiType::Menu,
        UiType::Slider,
        UiType::Other,
    ];

    pub fn as_str(&self) -> &'static str {
        match self {
            UiType::Button => "button",
            UiType::Icon => "icon",
            UiType::Input => "input",
            UiType::Dropdown => "dropdown",
            UiType::Checkbox => "checkbox",
            UiType::Link => "link",
            UiType::Tab => "tab",
            UiType::Menu => "menu",
            UiType::Slider => "slider",
            UiType::Other => "other",
        }
    }

    /// Case-insensitive lookup of a single vocabulary word. `other` is not a
    /// word that can be matched; it is only the fallback.
    pub fn from_word(word: &str) -> Option<UiType> {
        let lower = word.to_ascii_lowercase();
        UiType::ALL[..9].iter().copied().find(|t| t.as_str() == lower)
    }
}

impl fmt::Display for UiType {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ElementKind {
    Text,
    IconWidget,
}

impl ElementKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ElementKind::Text => "text",
            ElementKind::IconWidget => "icon_widget",
        }
    }
}

impl fmt::Display for ElementKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Os {
    Windows,
    Macos,
    Linux,
    #[serde(other)]
    Unknown,
}

impl Os {
    pub fn as_str(&self) -> &'static str {
        match self {
            Os::Windows => "windows",
            Os::Macos => "macos",
            Os::Linux => "linux",
            Os::Unknown => "unknown",
        }
    }
}

impl fmt::Display for Os {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Structured region caption. `raw` keeps the captioner output verbatim.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RegionCaption {
    pub ui_type: UiType,
    pub text: Option<String>,
    pub attributes: Vec<String>,
    pub raw: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UiElement {
    /// Set-of-mark id; 0 until marks are assigned.
    pub mark_id: u32,
    pub bbox: BBox,
    pub kind: ElementKind,
    pub embedded_text: Option<String>,
    pub caption: Option<RegionCaption>,
    pub source_confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScreenshotRecord {
    pub image_id: String,
    pub image_path: String,
    pub width: u32,
    pub height: u32,
    pub os: Os,
    pub source: String,
    pub elements: Vec<UiElement>,
}

impl ScreenshotRecord {
    /// Majority element kind; ties and empty records count as icon/widget.
    pub fn dominant_kind(&self) -> ElementKind {
        let texts = self
            .elements
            .iter()
            .filter(|e| e.kind == ElementKind::Text)
            .count();
        if texts * 2 > self.elements.len() {
            ElementKind::Text
        } else {
            ElementKind::IconWidget
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Index entry for one record. Carries the stratification keys so that
/// splitting does not need to load the records themselves.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordRef {
    pub image_id: String,
    pub shard: String,
    pub os: Os,
    pub dominant_kind: ElementKind,
    pub element_count: usize,
}

impl RecordRef {
    pub fn for_record(record: &ScreenshotRecord, shard: impl Into<String>) -> Self {
        RecordRef {
            image_id: record.image_id.clone(),
            shard: shard.into(),
            os: record.os,
            dominant_kind: record.dominant_kind(),
            element_count: record.elements.len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub schema_version: String,
    pub records: Vec<RecordRef>,
    pub split_labels: std::collections::BTreeMap<String, Split>,
}

impl Default for DatasetManifest {
    fn default() -> Self {
        DatasetManifest {
            schema_version: SCHEMA_VERSION.to_string(),
            records: Vec::new(),
            split_labels: Default::default(),
        }
    }
}

impl DatasetManifest {
    pub fn ids_in(&self, split: Split) -> Vec<&str> {
        self.records
            .iter()
            .filter(|r| self.split_labels.get(&r.image_id) == Some(&split))
            .map(|r| r.image_id.as_str())
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct RecordLimits {
    pub max_elements: usize,
}

impl Default for RecordLimits {
    fn default() -> Self {
        RecordLimits { max_elements: 64 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Violation {
    EmptyImageId,
    ZeroDimensions,
    TooManyElements { count: usize, cap: usize },
    BBoxOutOfBounds { mark_id: u32 },
    DuplicateMarkId { mark_id: u32 },
    UnassignedMarkId { index: usize },
    ConfidenceOutOfRange { mark_id: u32 },
    EmptyRawCaption { mark_id: u32 },
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Violation::EmptyImageId => write!(f, "empty image_id"),
            Violation::ZeroDimensions => write!(f, "image dimensions must be positive"),
            Violation::TooManyElements { count, cap } => {
                write!(f, "too many elements: {count} > {cap}")
            }
            Violation::BBoxOutOfBounds { mark_id } => {
                write!(f, "bbox out of bounds (mark_id {mark_id})")
            }
            Violation::DuplicateMarkId { mark_id } => write!(f, "duplicate mark_id {mark_id}"),
            Violation::UnassignedMarkId { index } => {
                write!(f, "mark_id must be positive (element {index})")
            }
            Violation::ConfidenceOutOfRange { mark_id } => {
                write!(f, "source_confidence outside [0, 1] (mark_id {mark_id})")
            }
            Violation::EmptyRawCaption { mark_id } => {
                write!(f, "empty raw caption (mark_id {mark_id})")
            }
        }
    }
}

/// Collects every invariant violation in `record`. An empty list means valid.
pub fn validate_record(record: &ScreenshotRecord, limits: &RecordLimits) -> Vec<Violation> {
    let mut out = Vec::new();
    if record.image_id.trim().is_empty() {
        out.push(Violation::EmptyImageId);
    }
    if record.width == 0 || record.height == 0 {
        out.push(Violation::ZeroDimensions);
    }
    if record.elements.len() > limits.max_elements {
        out.push(Violation::TooManyElements {
            count: record.elements.len(),
            cap: limits.max_elements,
        });
    }
    let mut seen = HashSet::new();
    for (index, el) in record.elements.iter().enumerate() {
        if el.mark_id == 0 {
            out.push(Violation::UnassignedMarkId { index });
        } else if !seen.insert(el.mark_id) {
            out.push(Violation::DuplicateMarkId { mark_id: el.mark_id });
        }
        if !el.bbox.within_image(record.width as f64, record.height as f64) {
            out.push(Violation::BBoxOutOfBounds { mark_id: el.mark_id });
        }
        if !(0.0..=1.0).contains(&el.source_confidence) {
            out.push(Violation::ConfidenceOutOfRange { mark_id: el.mark_id });
        }
        if let Some(c) = &el.caption {
            if c.raw.trim().is_empty() {
                out.push(Violation::EmptyRawCaption { mark_id: el.mark_id });
            }
        }
    }
    out
}
