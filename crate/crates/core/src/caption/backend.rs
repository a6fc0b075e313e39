use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{CaptionRequest, CaptionResponse, MarkedRegion, PromptTemplates};
use crate::backend::{BackendError, HttpEndpoint};

pub trait CaptionerBackend: Send + Sync {
    fn id(&self) -> &str;

    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse, BackendError>;

    /// Concurrent requests the backend accepts.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// One line of a caption fixture or remote response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CaptionEntry {
    pub mark_id: u32,
    pub caption: String,
}

#[derive(Debug, Deserialize)]
struct FixtureLine {
    image_id: String,
    mark_id: u32,
    caption: String,
}

const COLORS: &[&str] = &["Blue", "Gray", "White", "Green", "Red", "Dark", "Orange", "Black"];
const TYPES: &[&str] = &[
    "button", "button", "button", "icon", "input", "dropdown", "checkbox", "link", "tab", "menu",
    "slider",
];
const LABELS: &[&str] = &[
    "Save", "Open", "Cancel", "Search", "Settings", "File", "Edit", "Help", "Close", "Share",
    "Print", "Back",
];

/// Deterministic captioner for tests and offline runs. Captions come from a
/// fixture when one covers `(image_id, mark_id)` and are otherwise generated
/// from a hash of that pair.
#[derive(Debug, Clone, Default)]
pub struct StubCaptioner {
    fixtures: HashMap<String, BTreeMap<u32, String>>,
}

impl StubCaptioner {
    /// Loads a line-delimited fixture of `{image_id, mark_id, caption}`.
    pub fn from_fixture(path: &Path) -> Result<Self, BackendError> {
        let lines: Vec<FixtureLine> = crate::jsonl::read_file(path)
            .map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))?;
        let mut fixtures: HashMap<String, BTreeMap<u32, String>> = HashMap::new();
        for l in lines {
            fixtures.entry(l.image_id).or_default().insert(l.mark_id, l.caption);
        }
        Ok(StubCaptioner { fixtures })
    }

    pub fn caption_for(&self, image_id: &str, mark_id: u32) -> String {
        if let Some(c) = self.fixtures.get(image_id).and_then(|m| m.get(&mark_id)) {
            return c.clone();
        }
        let digest = Sha256::digest(format!("{image_id}\u{0}{mark_id}").as_bytes());
        let pick = |i: usize, list: &[&'static str]| list[digest[i] as usize % list.len()];
        let (color, kind, label) = (pick(0, COLORS), pick(1, TYPES), pick(2, LABELS));
        match digest[3] % 3 {
            0 => format!("{color} {kind} labeled '{label}'"),
            1 => format!("{color} {kind} with text '{label}'"),
            _ => format!("{color} {kind}"),
        }
    }
}

impl CaptionerBackend for StubCaptioner {
    fn id(&self) -> &str {
        "stub"
    }

    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        Ok(CaptionResponse {
            entries: request
                .elements
                .iter()
                .map(|e| (e.mark_id, self.caption_for(&request.image_id, e.mark_id)))
                .collect(),
            backend_id: "stub".into(),
            latency_ms: 0,
        })
    }

    fn max_in_flight(&self) -> usize {
        8
    }
}

#[derive(Serialize)]
struct RemoteRequest<'a> {
    image_id: &'a str,
    image_format: &'static str,
    image_b64: String,
    width: u32,
    height: u32,
    template_id: &'a str,
    prompt: String,
    elements: &'a [MarkedRegion],
}

#[derive(Deserialize)]
struct RemoteResponse {
    #[serde(default)]
    backend_id: Option<String>,
    captions: Vec<CaptionEntry>,
}

/// Captioning model served over HTTP. Sends the marked PNG (base64), the
/// element list and the rendered prompt as JSON; expects
/// `{"captions": [{"mark_id": .., "caption": ..}, ..]}` back.
#[derive(Debug, Clone)]
pub struct RemoteCaptioner {
    id: String,
    endpoint: HttpEndpoint,
    templates: PromptTemplates,
    max_in_flight: usize,
}

impl RemoteCaptioner {
    pub fn new(
        url: impl Into<String>,
        timeout: Duration,
        templates: PromptTemplates,
        max_in_flight: usize,
    ) -> Self {
        let endpoint = HttpEndpoint::new(url, timeout);
        RemoteCaptioner {
            id: format!("remote:{}", endpoint.url()),
            endpoint,
            templates,
            max_in_flight: max_in_flight.max(1),
        }
    }
}

impl CaptionerBackend for RemoteCaptioner {
    fn id(&self) -> &str {
        &self.id
    }

    fn caption(&self, request: &CaptionRequest) -> Result<CaptionResponse, BackendError> {
        let prompt = self
            .templates
            .render(request)
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let body = serde_json::to_vec(&RemoteRequest {
            image_id: &request.image_id,
            image_format: "png",
            image_b64: base64::engine::general_purpose::STANDARD.encode(&request.marked_image),
            width: request.width,
            height: request.height,
            template_id: &request.prompt_template_id,
            prompt,
            elements: &request.elements,
        })
        .map_err(|e| BackendError::Protocol(e.to_string()))?;
        let started = Instant::now();
        let resp: RemoteResponse = self
            .endpoint
            .post(&body, &[("Content-Type", "application/json")])?;
        Ok(CaptionResponse {
            entries: resp
                .captions
                .into_iter()
                .map(|c| (c.mark_id, c.caption))
                .collect(),
            backend_id: resp.backend_id.unwrap_or_else(|| self.id.clone()),
            latency_ms: started.elapsed().as_millis() as u64,
        })
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
