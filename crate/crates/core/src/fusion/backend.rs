use std::path::{Path, PathBuf};
use std::time::Duration;

use serde::{Deserialize, Serialize};

use super::RawDetections;
use crate::backend::{BackendError, HttpEndpoint};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ImageFormatTag {
    Png,
    Jpeg,
}

impl ImageFormatTag {
    pub fn from_path(path: &Path) -> Option<Self> {
        match path.extension()?.to_str()?.to_ascii_lowercase().as_str() {
            "png" => Some(ImageFormatTag::Png),
            "jpg" | "jpeg" => Some(ImageFormatTag::Jpeg),
            _ => None,
        }
    }

    pub fn from_bytes(bytes: &[u8]) -> Option<Self> {
        match image::guess_format(bytes).ok()? {
            image::ImageFormat::Png => Some(ImageFormatTag::Png),
            image::ImageFormat::Jpeg => Some(ImageFormatTag::Jpeg),
            _ => None,
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            ImageFormatTag::Png => "png",
            ImageFormatTag::Jpeg => "jpeg",
        }
    }

    pub fn mime(&self) -> &'static str {
        match self {
            ImageFormatTag::Png => "image/png",
            ImageFormatTag::Jpeg => "image/jpeg",
        }
    }
}

/// An encoded screenshot handed to a detector.
#[derive(Debug, Clone)]
pub struct ScreenImage {
    pub image_id: String,
    pub format: ImageFormatTag,
    pub bytes: Vec<u8>,
}

/// Source of raw text and icon detections. `detect` must not modify the image.
pub trait DetectorBackend: Send + Sync {
    fn detect(&self, image: &ScreenImage) -> Result<RawDetections, BackendError>;

    /// Concurrent `detect` calls the backend tolerates.
    fn max_in_flight(&self) -> usize {
        1
    }
}

/// Replays canned detections from `<dir>/<image_id>.json`.
#[derive(Debug, Clone)]
pub struct StubDetector {
    dir: PathBuf,
}

impl StubDetector {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StubDetector { dir: dir.into() }
    }
}

impl DetectorBackend for StubDetector {
    fn detect(&self, image: &ScreenImage) -> Result<RawDetections, BackendError> {
        let path = self.dir.join(format!("{}.json", image.image_id));
        if !path.exists() {
            return Err(BackendError::MissingFixture(path.display().to_string()));
        }
        let text = std::fs::read_to_string(&path)?;
        serde_json::from_str(&text).map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))
    }

    fn max_in_flight(&self) -> usize {
        usize::MAX
    }
}

/// Detector service reached over HTTP. The request body is the encoded
/// image with `Content-Type`, `X-Image-Id` and `X-Image-Format` headers; the
/// response body is a JSON `RawDetections`.
#[derive(Debug, Clone)]
pub struct RemoteDetector {
    endpoint: HttpEndpoint,
    max_in_flight: usize,
}

impl RemoteDetector {
    pub fn new(url: impl Into<String>, timeout: Duration, max_in_flight: usize) -> Self {
        RemoteDetector {
            endpoint: HttpEndpoint::new(url, timeout),
            max_in_flight: max_in_flight.max(1),
        }
    }
}

impl DetectorBackend for RemoteDetector {
    fn detect(&self, image: &ScreenImage) -> Result<RawDetections, BackendError> {
        let raw: RawDetections = self.endpoint.post(
            &image.bytes,
            &[
                ("Content-Type", image.format.mime()),
                ("X-Image-Id", &image.image_id),
                ("X-Image-Format", image.format.as_str()),
            ],
        )?;
        raw.validate()
            .map_err(|e| BackendError::Protocol(e.to_string()))?;
        Ok(raw)
    }

    fn max_in_flight(&self) -> usize {
        self.max_in_flight
    }
}
