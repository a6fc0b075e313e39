use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DataPool, ImageClass, ModelVersion};
use crate::backend::BackendError;

/// An image offered for classification.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ImageRef {
    pub image_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<String>,
}

impl ImageRef {
    pub fn id(image_id: impl Into<String>) -> Self {
        ImageRef {
            image_id: image_id.into(),
            path: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Scored {
    pub class: ImageClass,
    pub confidence: f64,
}

/// Three-way screen classifier. `classify` and `evaluate` must be
/// deterministic for a given model version.
pub trait ClassifierBackend: Send + Sync {
    /// Trains on `pool` and publishes the result as `version`.
    fn train(&mut self, pool: &DataPool, version: ModelVersion) -> Result<(), BackendError>;

    /// One `Scored` per input image, in input order.
    fn classify(&self, version: ModelVersion, images: &[ImageRef]) -> Result<Vec<Scored>, BackendError>;

    /// Overall accuracy on the labeled holdout.
    fn evaluate(
        &self,
        version: ModelVersion,
        holdout: &BTreeMap<String, ImageClass>,
    ) -> Result<f64, BackendError>;

    fn max_in_flight(&self) -> usize {
        1
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct VersionScript {
    #[serde(default)]
    pub labels: BTreeMap<String, Scored>,
    #[serde(default)]
    pub accuracy: Option<f64>,
}

/// Fixture format for [`ScriptedClassifier`]:
///
/// ```json
/// {"labels": {"img-1": {"class": "valid", "confidence": 0.93}},
///  "versions": {"2": {"accuracy": 0.8, "labels": {"img-1": {"class": "invalid", "confidence": 0.7}}}}}
/// ```
///
/// Version-specific labels override the base `labels`.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ClassifierScript {
    #[serde(default)]
    pub labels: BTreeMap<String, Scored>,
    #[serde(default)]
    pub versions: BTreeMap<u32, VersionScript>,
}

/// Replays a [`ClassifierScript`]. Unscripted images are an error.
#[derive(Debug, Clone, Default)]
pub struct ScriptedClassifier {
    script: ClassifierScript,
    trained: Vec<ModelVersion>,
}

impl ScriptedClassifier {
    pub fn new(script: ClassifierScript) -> Self {
        ScriptedClassifier {
            script,
            trained: Vec::new(),
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, BackendError> {
        let raw = std::fs::read_to_string(path)?;
        let script = serde_json::from_str(&raw)
            .map_err(|e| BackendError::Protocol(format!("{}: {e}", path.display())))?;
        Ok(Self::new(script))
    }

    /// Scripts holdout accuracy for consecutive versions starting at `first`.
    pub fn with_accuracy_sequence(mut self, first: ModelVersion, accuracies: &[f64]) -> Self {
        for (i, acc) in accuracies.iter().enumerate() {
            self.script
                .versions
                .entry(first.0 + i as u32)
                .or_default()
                .accuracy = Some(*acc);
        }
        self
    }

    pub fn trained_versions(&self) -> &[ModelVersion] {
        &self.trained
    }

    fn lookup(&self, version: ModelVersion, image_id: &str) -> Option<Scored> {
        self.script
            .versions
            .get(&version.0)
            .and_then(|v| v.labels.get(image_id))
            .or_else(|| self.script.labels.get(image_id))
            .copied()
    }
}

impl ClassifierBackend for ScriptedClassifier {
    fn train(&mut self, _pool: &DataPool, version: ModelVersion) -> Result<(), BackendError> {
        self.trained.push(version);
        Ok(())
    }

    fn classify(&self, version: ModelVersion, images: &[ImageRef]) -> Result<Vec<Scored>, BackendError> {
        images
            .iter()
            .map(|img| {
                self.lookup(version, &img.image_id).ok_or_else(|| {
                    BackendError::MissingFixture(format!("{} under model {}", img.image_id, version.0))
                })
            })
            .collect()
    }

    fn evaluate(
        &self,
        version: ModelVersion,
        holdout: &BTreeMap<String, ImageClass>,
    ) -> Result<f64, BackendError> {
        if let Some(acc) = self.script.versions.get(&version.0).and_then(|v| v.accuracy) {
            return Ok(acc);
        }
        if holdout.is_empty() {
            return Ok(0.0);
        }
        let correct = holdout
            .iter()
            .filter(|(id, class)| self.lookup(version, id).is_some_and(|s| s.class == **class))
            .count();
        Ok(correct as f64 / holdout.len() as f64)
    }

    fn max_in_flight(&self) -> usize {
        4
    }
}
