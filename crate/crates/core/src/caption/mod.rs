//! Region captioning for marked elements: backend calls with per-id retry,
//! parsing into structured captions, and per-record quality checks.

mod backend;
mod parse;
mod prompt;

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::backend::BackendError;
use crate::dataset::{ElementKind, ScreenshotRecord};
use crate::geometry::BBox;

pub use backend::{CaptionerBackend, RemoteCaptioner, StubCaptioner};
pub use parse::parse_caption;
pub use prompt::{PromptTemplate, PromptTemplates, DEFAULT_TEMPLATE_ID};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MarkedRegion {
    pub mark_id: u32,
    pub bbox: BBox,
    pub kind: ElementKind,
}

#[derive(Debug, Clone)]
pub struct CaptionRequest {
    pub image_id: String,
    /// PNG-encoded screenshot with marks rendered.
    pub marked_image: Vec<u8>,
    pub width: u32,
    pub height: u32,
    pub elements: Vec<MarkedRegion>,
    pub prompt_template_id: String,
}

impl CaptionRequest {
    /// Mark ids must be exactly `1..=n` and every box must fit the image.
    pub fn validate(&self) -> Result<(), CaptionError> {
        let ids: BTreeSet<u32> = self.elements.iter().map(|e| e.mark_id).collect();
        let n = self.elements.len() as u32;
        if ids.len() != self.elements.len() || ids.iter().copied().ne(1..=n) {
            return Err(CaptionError::InvalidRequest(format!(
                "mark ids {:?} are not 1..={n}",
                self.elements.iter().map(|e| e.mark_id).collect::<Vec<_>>()
            )));
        }
        for e in &self.elements {
            if !e.bbox.within_image(self.width as f64, self.height as f64) {
                return Err(CaptionError::InvalidRequest(format!(
                    "mark {} lies outside the {}x{} image",
                    e.mark_id, self.width, self.height
                )));
            }
        }
        Ok(())
    }

    fn restricted_to(&self, ids: &BTreeSet<u32>) -> CaptionRequest {
        CaptionRequest {
            elements: self
                .elements
                .iter()
                .filter(|e| ids.contains(&e.mark_id))
                .cloned()
                .collect(),
            image_id: self.image_id.clone(),
            marked_image: self.marked_image.clone(),
            width: self.width,
            height: self.height,
            prompt_template_id: self.prompt_template_id.clone(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionResponse {
    pub entries: BTreeMap<u32, String>,
    pub backend_id: String,
    pub latency_ms: u64,
}

#[derive(Debug, Error)]
pub enum CaptionError {
    #[error(transparent)]
    Backend(#[from] BackendError),
    #[error("captions still missing for marks {missing:?} after {attempts} attempts")]
    Incomplete { missing: Vec<u32>, attempts: u32 },
    #[error("invalid caption request: {0}")]
    InvalidRequest(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct RetryPolicy {
    /// Total backend calls per request, the first one included.
    pub max_attempts: u32,
}

impl Default for RetryPolicy {
    fn default() -> Self {
        RetryPolicy { max_attempts: 3 }
    }
}

/// Captions every mark in `request`. After the first call only the marks
/// still missing (absent or blank) are re-requested.
pub fn caption_elements(
    request: &CaptionRequest,
    backend: &dyn CaptionerBackend,
    retry: &RetryPolicy,
) -> Result<CaptionResponse, CaptionError> {
    request.validate()?;
    let mut missing: BTreeSet<u32> = request.elements.iter().map(|e| e.mark_id).collect();
    let mut entries = BTreeMap::new();
    let mut latency_ms = 0;
    let mut attempts = 0;
    while !missing.is_empty() && attempts < retry.max_attempts.max(1) {
        attempts += 1;
        let sub = if attempts == 1 {
            request.clone()
        } else {
            request.restricted_to(&missing)
        };
        let resp = backend.caption(&sub)?;
        latency_ms += resp.latency_ms;
        for (id, text) in resp.entries {
            if missing.contains(&id) && !text.trim().is_empty() {
                missing.remove(&id);
                entries.insert(id, text);
            }
        }
        if !missing.is_empty() {
            log::debug!(
                "{}: attempt {attempts} left marks {:?} uncaptioned",
                request.image_id,
                missing
            );
        }
    }
    if !missing.is_empty() {
        return Err(CaptionError::Incomplete {
            missing: missing.into_iter().collect(),
            attempts,
        });
    }
    Ok(CaptionResponse {
        entries,
        backend_id: backend.id().to_string(),
        latency_ms,
    })
}

/// Captions a batch, keeping at most `backend.max_in_flight()` requests in
/// flight. Results come back in input order.
pub fn caption_batch(
    requests: &[CaptionRequest],
    backend: &dyn CaptionerBackend,
    retry: &RetryPolicy,
) -> Vec<Result<CaptionResponse, CaptionError>> {
    let width = backend.max_in_flight().clamp(1, 16);
    let mut out = Vec::with_capacity(requests.len());
    for chunk in requests.chunks(width) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|req| s.spawn(move || caption_elements(req, backend, retry)))
                .collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("caption worker panicked")));
        });
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionLimits {
    pub min_chars: usize,
    pub max_chars: usize,
}

impl Default for CaptionLimits {
    fn default() -> Self {
        CaptionLimits {
            min_chars: 5,
            max_chars: 120,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Error,
    Warning,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "issue", rename_all = "snake_case")]
pub enum CaptionIssueKind {
    Missing,
    Empty,
    TooShort { chars: usize },
    TooLong { chars: usize },
    Duplicate { first_mark_id: u32 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionIssue {
    pub mark_id: u32,
    pub severity: Severity,
    #[serde(flatten)]
    pub kind: CaptionIssueKind,
}

impl fmt::Display for CaptionIssue {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "mark {}: ", self.mark_id)?;
        match &self.kind {
            CaptionIssueKind::Missing => write!(f, "missing caption"),
            CaptionIssueKind::Empty => write!(f, "empty caption"),
            CaptionIssueKind::TooShort { chars } => write!(f, "too short ({chars} chars)"),
            CaptionIssueKind::TooLong { chars } => write!(f, "too long ({chars} chars)"),
            CaptionIssueKind::Duplicate { first_mark_id } => {
                write!(f, "duplicate caption (same as mark {first_mark_id})")
            }
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct CaptionValidation {
    pub issues: Vec<CaptionIssue>,
}

impl CaptionValidation {
    /// True when there are no errors; warnings are allowed.
    pub fn is_ok(&self) -> bool {
        self.issues.iter().all(|i| i.severity == Severity::Warning)
    }

    pub fn errors(&self) -> impl Iterator<Item = &CaptionIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Error)
    }

    pub fn warnings(&self) -> impl Iterator<Item = &CaptionIssue> {
        self.issues.iter().filter(|i| i.severity == Severity::Warning)
    }
}

pub fn validate_captions(record: &ScreenshotRecord, limits: &CaptionLimits) -> CaptionValidation {
    let mut issues = Vec::new();
    let mut first_seen: HashMap<&str, u32> = HashMap::new();
    for el in &record.elements {
        let Some(caption) = &el.caption else {
            issues.push(CaptionIssue {
                mark_id: el.mark_id,
                severity: Severity::Error,
                kind: CaptionIssueKind::Missing,
            });
            continue;
        };
        let trimmed = caption.raw.trim();
        let chars = trimmed.chars().count();
        let kind = if chars == 0 {
            Some(CaptionIssueKind::Empty)
        } else if chars < limits.min_chars {
            Some(CaptionIssueKind::TooShort { chars })
        } else if chars > limits.max_chars {
            Some(CaptionIssueKind::TooLong { chars })
        } else {
            None
        };
        if let Some(kind) = kind {
            issues.push(CaptionIssue {
                mark_id: el.mark_id,
                severity: Severity::Error,
                kind,
            });
        }
        if chars > 0 {
            if let Some(&first) = first_seen.get(trimmed) {
                issues.push(CaptionIssue {
                    mark_id: el.mark_id,
                    severity: Severity::Warning,
                    kind: CaptionIssueKind::Duplicate {
                        first_mark_id: first,
                    },
                });
            } else {
                first_seen.insert(trimmed, el.mark_id);
            }
        }
    }
    CaptionValidation { issues }
}
