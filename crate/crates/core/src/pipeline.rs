//! Per-image annotation and captioning drivers built from the stage modules.
//!
//! Annotation: detect → fuse → sample → assign marks → render.
//! Captioning: render marks from the stored record → caption → parse →
//! validate. Marks are re-rendered rather than stored, so a record plus its
//! source image is all captioning needs.

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::backend::BackendError;
use crate::caption::{
    caption_batch, parse_caption, validate_captions, CaptionError, CaptionLimits, CaptionRequest,
    CaptionResponse, CaptionValidation, CaptionerBackend, MarkedRegion, RetryPolicy, DEFAULT_TEMPLATE_ID,
};
use crate::dataset::{Os, ScreenshotRecord};
use crate::fusion::{fuse, DetectorBackend, FusionConfig, FusionError, ImageFormatTag, ScreenImage};
use crate::sampler::{
    assign_marks, render_marks_encoded, sample_elements, MarkStyle, RenderError, SampleError, SamplerConfig,
};

#[derive(Debug, Error)]
pub enum StageError {
    #[error("detector: {0}")]
    Detect(#[from] BackendError),
    #[error(transparent)]
    Fusion(#[from] FusionError),
    #[error(transparent)]
    Sample(#[from] SampleError),
    #[error(transparent)]
    Render(#[from] RenderError),
    #[error(transparent)]
    Caption(#[from] CaptionError),
    #[error("unsupported image format")]
    Format,
    #[error("detections are for a {detected_w}x{detected_h} image, actual size is {width}x{height}")]
    SizeMismatch {
        detected_w: u32,
        detected_h: u32,
        width: u32,
        height: u32,
    },
}

#[derive(Debug, Error)]
#[error("{image_id}: {source}")]
pub struct PipelineError {
    pub image_id: String,
    #[source]
    pub source: StageError,
}

fn at(image_id: &str) -> impl Fn(StageError) -> PipelineError + '_ {
    move |source| PipelineError {
        image_id: image_id.to_string(),
        source,
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default)]
pub struct AnnotateConfig {
    pub fusion: FusionConfig,
    /// `rng_seed` is the run seed; each image derives its own from it.
    pub sampler: SamplerConfig,
    pub style: MarkStyle,
}

/// One screenshot to annotate.
#[derive(Debug, Clone)]
pub struct AnnotateInput {
    pub image_id: String,
    /// Stored verbatim in the record.
    pub image_path: String,
    pub os: Os,
    pub source: String,
    pub bytes: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct Annotated {
    pub record: ScreenshotRecord,
    /// PNG with the sampled elements' marks drawn.
    pub marked_png: Vec<u8>,
}

/// Sampling seed for one image: the first eight bytes of
/// SHA-256(run seed, little-endian ‖ image id).
pub fn image_seed(run_seed: u64, image_id: &str) -> u64 {
    let mut h = Sha256::new();
    h.update(run_seed.to_le_bytes());
    h.update(image_id.as_bytes());
    let d = h.finalize();
    u64::from_le_bytes(d[..8].try_into().expect("digest is 32 bytes"))
}

fn dimensions(bytes: &[u8]) -> Result<(u32, u32), StageError> {
    let format = match ImageFormatTag::from_bytes(bytes).ok_or(StageError::Format)? {
        ImageFormatTag::Png => image::ImageFormat::Png,
        ImageFormatTag::Jpeg => image::ImageFormat::Jpeg,
    };
    image::ImageReader::with_format(std::io::Cursor::new(bytes), format)
        .into_dimensions()
        .map_err(|e| RenderError::Decode(e.to_string()).into())
}

pub fn annotate_image(
    input: &AnnotateInput,
    detector: &dyn DetectorBackend,
    config: &AnnotateConfig,
) -> Result<Annotated, PipelineError> {
    let err = at(&input.image_id);
    let (width, height) = dimensions(&input.bytes).map_err(&err)?;
    let format = ImageFormatTag::from_bytes(&input.bytes).ok_or(StageError::Format).map_err(&err)?;
    let raw = detector
        .detect(&ScreenImage {
            image_id: input.image_id.clone(),
            format,
            bytes: input.bytes.clone(),
        })
        .map_err(|e| err(e.into()))?;
    if (raw.image_width, raw.image_height) != (width, height) {
        return Err(err(StageError::SizeMismatch {
            detected_w: raw.image_width,
            detected_h: raw.image_height,
            width,
            height,
        }));
    }
    raw.validate().map_err(|e| err(e.into()))?;
    let fused = fuse(&raw, &config.fusion);

    let elements = if fused.is_empty() {
        log::warn!("{}: no interactive elements after fusion", input.image_id);
        Vec::new()
    } else {
        let sampler = SamplerConfig {
            rng_seed: image_seed(config.sampler.rng_seed, &input.image_id),
            ..config.sampler
        };
        let picked = sample_elements(&fused, &sampler).map_err(|e| err(e.into()))?;
        assign_marks(&picked).map_err(|e| err(e.into()))?.apply(&fused)
    };
    let marks: Vec<_> = elements.iter().map(|e| (e.mark_id, e.bbox)).collect();
    let marked_png = render_marks_encoded(&input.bytes, &marks, &config.style).map_err(|e| err(e.into()))?;
    Ok(Annotated {
        record: ScreenshotRecord {
            image_id: input.image_id.clone(),
            image_path: input.image_path.clone(),
            width,
            height,
            os: input.os,
            source: input.source.clone(),
            elements,
        },
        marked_png,
    })
}

/// Annotates every input, keeping at most `detector.max_in_flight()` images
/// in progress. Results are in input order.
pub fn annotate_batch(
    inputs: &[AnnotateInput],
    detector: &dyn DetectorBackend,
    config: &AnnotateConfig,
) -> Vec<Result<Annotated, PipelineError>> {
    let lanes = detector.max_in_flight().clamp(1, 16);
    let mut out = Vec::with_capacity(inputs.len());
    for chunk in inputs.chunks(lanes) {
        std::thread::scope(|s| {
            let handles: Vec<_> = chunk
                .iter()
                .map(|i| s.spawn(move || annotate_image(i, detector, config)))
                .collect();
            out.extend(handles.into_iter().map(|h| h.join().expect("annotate worker panicked")));
        });
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CaptionConfig {
    pub style: MarkStyle,
    pub retry: RetryPolicy,
    pub limits: CaptionLimits,
    pub template_id: String,
}

impl Default for CaptionConfig {
    fn default() -> Self {
        CaptionConfig {
            style: MarkStyle::default(),
            retry: RetryPolicy::default(),
            limits: CaptionLimits::default(),
            template_id: DEFAULT_TEMPLATE_ID.to_string(),
        }
    }
}

pub fn caption_request(
    record: &ScreenshotRecord,
    image_bytes: &[u8],
    config: &CaptionConfig,
) -> Result<CaptionRequest, PipelineError> {
    let marks: Vec<_> = record.elements.iter().map(|e| (e.mark_id, e.bbox)).collect();
    let marked_image =
        render_marks_encoded(image_bytes, &marks, &config.style).map_err(|e| at(&record.image_id)(e.into()))?;
    Ok(CaptionRequest {
        image_id: record.image_id.clone(),
        marked_image,
        width: record.width,
        height: record.height,
        elements: record
            .elements
            .iter()
            .map(|e| MarkedRegion {
                mark_id: e.mark_id,
                bbox: e.bbox,
                kind: e.kind,
            })
            .collect(),
        prompt_template_id: config.template_id.clone(),
    })
}

/// Copies each raw caption into its element, parsed.
pub fn apply_captions(record: &ScreenshotRecord, response: &CaptionResponse) -> ScreenshotRecord {
    let mut out = record.clone();
    for e in &mut out.elements {
        e.caption = response.entries.get(&e.mark_id).map(|raw| parse_caption(raw));
    }
    out
}

#[derive(Debug, Clone)]
pub struct Captioned {
    pub record: ScreenshotRecord,
    pub validation: CaptionValidation,
    pub backend_id: String,
}

/// Captions a batch of records whose source images are supplied alongside.
pub fn caption_records(
    items: &[(ScreenshotRecord, Vec<u8>)],
    backend: &dyn CaptionerBackend,
    config: &CaptionConfig,
) -> Vec<Result<Captioned, PipelineError>> {
    let mut out: Vec<Option<Result<Captioned, PipelineError>>> = Vec::with_capacity(items.len());
    let mut requests = Vec::new();
    let mut slots = Vec::new();
    for (i, (record, bytes)) in items.iter().enumerate() {
        match caption_request(record, bytes, config) {
            Ok(r) => {
                requests.push(r);
                slots.push(i);
                out.push(None);
            }
            Err(e) => out.push(Some(Err(e))),
        }
    }
    for (slot, resp) in slots.into_iter().zip(caption_batch(&requests, backend, &config.retry)) {
        let record = &items[slot].0;
        out[slot] = Some(match resp {
            Ok(resp) => {
                let record = apply_captions(record, &resp);
                let validation = validate_captions(&record, &config.limits);
                Ok(Captioned {
                    record,
                    validation,
                    backend_id: resp.backend_id,
                })
            }
            Err(e) => Err(at(&record.image_id)(e.into())),
        });
    }
    out.into_iter().map(|r| r.expect("every slot filled")).collect()
}
