//! Building blocks for turning raw desktop screenshots into captioned GUI
//! grounding data and scoring models against it.
pub mod backend;
pub mod caption;
pub mod dataset;
pub mod eval;
pub mod fusion;
pub mod geometry;
pub mod jsonl;
pub mod orchestrator;
pub mod pipeline;
pub mod sampler;

pub use backend::BackendError;
pub use caption::{CaptionLimits, CaptionerBackend, RetryPolicy};
pub use dataset::{ElementKind, Os, RegionCaption, ScreenshotRecord, UiElement, UiType};
pub use eval::{GroundingSample, MetricsReport, Prediction};
pub use fusion::{DetectorBackend, FusionConfig, RawDetections};
pub use geometry::{BBox, Point};
pub use orchestrator::{ClassifierBackend, ImageClass, OrchestratorConfig, Thresholds, Verdict};
pub use sampler::{DistanceReference, MarkStyle, SamplerConfig};
