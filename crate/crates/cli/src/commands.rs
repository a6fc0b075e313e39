use std::collections::{BTreeMap, HashMap};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use anyhow::{anyhow, bail, Context};
use clap::{Parser, Subcommand};
use serde::Deserialize;
use serde_json::json;

use deskmark_core::caption::{CaptionerBackend, PromptTemplates, RemoteCaptioner, RetryPolicy, StubCaptioner};
use deskmark_core::dataset::{compute_stats, make_benchmark_split, DatasetStore, Os, Split};
use deskmark_core::eval::{evaluate_run, DEFAULT_TAUS};
use deskmark_core::fusion::{DetectorBackend, ImageFormatTag, RemoteDetector, StubDetector};
use deskmark_core::jsonl;
use deskmark_core::orchestrator::{
    ClassifierBackend, ImageClass, ImageRef, Orchestrator, ScriptedClassifier, SeedSets, Verdict,
};
use deskmark_core::pipeline::{annotate_batch, caption_records, AnnotateConfig, AnnotateInput, CaptionConfig};

use crate::config::{self, FlagOverrides, PipelineConfig, Profile};
use crate::error::{CliError, StageContext};
use crate::lock::RunLock;

#[derive(Debug, Parser)]
#[command(name = "deskmark", version, about = "GUI screenshot annotation pipeline")]
pub struct Cli {
    /// TOML configuration file.
    #[arg(long, global = true, env = "DESKMARK_CONFIG")]
    pub config: Option<PathBuf>,
    /// Run seed; overrides the config file and environment.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    #[arg(long, global = true, value_enum)]
    pub profile: Option<Profile>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Source filtering: seed, review rounds, bulk filtering.
    Filter {
        #[command(subcommand)]
        action: FilterAction,
    },
    /// Detect, fuse, sample and mark a directory of screenshots.
    Annotate {
        /// Directory of .png/.jpg screenshots.
        #[arg(long)]
        input: PathBuf,
        /// Dataset root; defaults to paths.dataset_root.
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Caption the marked elements of stored records.
    Caption {
        /// Dataset root; defaults to paths.dataset_root.
        #[arg(long)]
        input: Option<PathBuf>,
        /// Re-caption records that already have captions.
        #[arg(long)]
        force: bool,
    },
    /// Label records train/eval with a stratified split.
    Split {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        eval_size: Option<usize>,
    },
    /// Corpus statistics as JSON.
    Stats {
        #[arg(long)]
        input: Option<PathBuf>,
        #[arg(long)]
        output: Option<PathBuf>,
    },
    /// Score grounding/OCR predictions.
    Eval {
        /// Prediction file.
        #[arg(long)]
        input: PathBuf,
        /// Ground-truth sample file.
        #[arg(long)]
        samples: PathBuf,
        /// Also write the JSON report here.
        #[arg(long)]
        output: Option<PathBuf>,
        #[arg(long, value_delimiter = ',')]
        tau: Vec<f64>,
    },
    /// Serve the review API.
    Serve {
        /// Overrides service.bind.
        #[arg(long)]
        bind: Option<String>,
    },
}

#[derive(Debug, Subcommand)]
pub enum FilterAction {
    /// Stage 1: line-delimited `{image_id, class}` seed labels.
    Seed {
        #[arg(long)]
        input: PathBuf,
    },
    /// Stage 2: classify a batch and queue confident items for review.
    Ingest {
        /// Image directory or line-delimited `{image_id, path}` file.
        #[arg(long)]
        input: PathBuf,
    },
    /// Record line-delimited verdicts without going through the service.
    Verdicts {
        #[arg(long)]
        input: PathBuf,
    },
    /// Stage 2: absorb the round's verdicts, retrain, maybe freeze.
    Absorb,
    /// Stage 3: keep valid screens with the frozen model.
    Bulk {
        #[arg(long)]
        input: PathBuf,
    },
    Status,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Filter { .. } => "filter",
            Command::Annotate { .. } => "annotate",
            Command::Caption { .. } => "caption",
            Command::Split { .. } => "split",
            Command::Stats { .. } => "stats",
            Command::Eval { .. } => "eval",
            Command::Serve { .. } => "serve",
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

/// Loads configuration for `cli` from its file, `vars` and flags.
pub fn resolve_config(cli: &Cli, vars: &[(String, String)]) -> Result<PipelineConfig, CliError> {
    let flags = FlagOverrides {
        seed: cli.seed,
        profile: cli.profile,
    };
    config::load(cli.config.as_deref(), vars, &flags).map_err(CliError::Config)
}

pub fn run(cli: &Cli, cfg: &PipelineConfig, out: &mut dyn Write) -> Result<(), CliError> {
    match &cli.command {
        Command::Filter { action } => filter(cfg, action, out),
        Command::Annotate { input, output } => annotate(cfg, input, output.as_deref(), out),
        Command::Caption { input, force } => caption(cfg, input.as_deref(), *force, out),
        Command::Split { input, eval_size } => split(cfg, input.as_deref(), *eval_size, out),
        Command::Stats { input, output } => stats(cfg, input.as_deref(), output.as_deref(), out),
        Command::Eval {
            input,
            samples,
            output,
            tau,
        } => eval(cfg, input, samples, output.as_deref(), tau, out),
        Command::Serve { bind } => crate::service::run(cfg, bind.as_deref()),
    }
}

fn emit(out: &mut dyn Write, value: serde_json::Value) -> Result<(), CliError> {
    writeln!(out, "{value}").stage()
}

fn write_json(path: &Path, value: &serde_json::Value) -> Result<(), CliError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).stage()?;
    }
    let mut text = serde_json::to_string_pretty(value).stage()?;
    text.push('\n');
    std::fs::write(path, text)
        .with_context(|| format!("writing {}", path.display()))
        .stage()
}

fn with_meta(cfg: &PipelineConfig, kind: &str, body: impl serde::Serialize) -> Result<serde_json::Value, CliError> {
    let mut v = serde_json::to_value(body).stage()?;
    let obj = v
        .as_object_mut()
        .ok_or_else(|| CliError::Stage(anyhow!("report is not an object")))?;
    obj.insert("_meta".into(), serde_json::to_value(cfg.artifact_meta(kind)).stage()?);
    Ok(v)
}

fn dataset_lock(root: &Path, command: &str) -> Result<RunLock, CliError> {
    RunLock::acquire(&root.join(".deskmark.lock"), command).stage()
}

pub fn journal_lock(cfg: &PipelineConfig, command: &str) -> Result<RunLock, CliError> {
    RunLock::acquire(&cfg.paths.journal.with_extension("lock"), command).stage()
}

pub fn classifier(cfg: &PipelineConfig) -> Result<Box<dyn ClassifierBackend>, CliError> {
    Ok(match &cfg.paths.classifier_script {
        Some(p) => Box::new(ScriptedClassifier::from_file(p).stage()?),
        None => Box::new(ScriptedClassifier::default()),
    })
}

pub fn open_orchestrator(cfg: &PipelineConfig) -> Result<Orchestrator, CliError> {
    Ok(Orchestrator::open(&cfg.paths.journal, cfg.orchestrator_config(), classifier(cfg)?)
        .stage()?
        .with_intake(cfg.paths.intake.clone()))
}

#[derive(Deserialize)]
struct SeedLine {
    image_id: String,
    class: ImageClass,
}

fn is_image(path: &Path) -> bool {
    path.extension()
        .and_then(|e| e.to_str())
        .is_some_and(|e| matches!(e.to_ascii_lowercase().as_str(), "png" | "jpg" | "jpeg"))
}

/// Image files in `dir`, sorted by name, as (image_id, path).
fn list_images(dir: &Path) -> anyhow::Result<Vec<(String, PathBuf)>> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && is_image(p))
        .collect();
    files.sort();
    let mut seen = HashMap::new();
    let mut out = Vec::with_capacity(files.len());
    for f in files {
        let id = f
            .file_stem()
            .and_then(|s| s.to_str())
            .ok_or_else(|| anyhow!("non-UTF-8 file name {}", f.display()))?
            .to_string();
        if let Some(prev) = seen.insert(id.clone(), f.clone()) {
            bail!("{} and {} share image id {id}", prev.display(), f.display());
        }
        out.push((id, f));
    }
    Ok(out)
}

fn image_refs(input: &Path) -> anyhow::Result<Vec<ImageRef>> {
    if input.is_dir() {
        Ok(list_images(input)?
            .into_iter()
            .map(|(image_id, p)| ImageRef {
                image_id,
                path: Some(p.display().to_string()),
            })
            .collect())
    } else {
        Ok(jsonl::read_file(input)?)
    }
}

fn filter(cfg: &PipelineConfig, action: &FilterAction, out: &mut dyn Write) -> Result<(), CliError> {
    let _lock = journal_lock(cfg, "filter")?;
    let mut orch = open_orchestrator(cfg)?;
    match action {
        FilterAction::Seed { input } => {
            let lines: Vec<SeedLine> = jsonl::read_file(input).stage()?;
            let mut seeds = SeedSets::new();
            for l in lines {
                seeds.entry(l.class).or_default().push(l.image_id);
            }
            orch.stage1_seed(&seeds).stage()?;
        }
        FilterAction::Ingest { input } => {
            let refs = image_refs(input).stage()?;
            let report = orch.stage2_ingest_batch(&refs).stage()?;
            emit(out, json!({"retained": report.retained.len(), "dropped": report.dropped.len(), "skipped": report.skipped.len()}))?;
        }
        FilterAction::Verdicts { input } => {
            let verdicts: Vec<Verdict> = jsonl::read_file(input).stage()?;
            let now = now_ms();
            for v in verdicts {
                orch.submit_verdict(v, now).stage()?;
            }
        }
        FilterAction::Absorb => {
            let report = orch.stage2_absorb_verdicts_and_retrain().stage()?;
            emit(out, serde_json::to_value(report).stage()?)?;
        }
        FilterAction::Bulk { input } => {
            let refs = image_refs(input).stage()?;
            let report = orch.stage3_bulk_filter(&refs).stage()?;
            emit(out, json!({"kept": report.kept.len(), "dropped": report.dropped.len()}))?;
        }
        FilterAction::Status => {}
    }
    emit(out, orch.status())
}

fn detector(cfg: &PipelineConfig, input: &Path) -> Box<dyn DetectorBackend> {
    let b = &cfg.backends;
    if b.detector == "stub" {
        let dir = cfg.paths.detections.clone().unwrap_or_else(|| input.join("detections"));
        Box::new(StubDetector::new(dir))
    } else {
        Box::new(RemoteDetector::new(
            b.detector.clone(),
            Duration::from_millis(b.timeout_ms),
            b.max_in_flight,
        ))
    }
}

fn captioner(cfg: &PipelineConfig) -> Result<Box<dyn CaptionerBackend>, CliError> {
    let b = &cfg.backends;
    if b.captioner == "stub" {
        return Ok(match &cfg.paths.caption_fixture {
            Some(p) => Box::new(StubCaptioner::from_fixture(p).stage()?),
            None => Box::new(StubCaptioner::default()),
        });
    }
    let templates = match &cfg.paths.prompt_templates {
        Some(p) => PromptTemplates::load(p).stage()?,
        None => PromptTemplates::default(),
    };
    if !templates.contains(&cfg.caption.template_id) {
        return Err(CliError::Config(anyhow!("unknown prompt template {}", cfg.caption.template_id)));
    }
    Ok(Box::new(RemoteCaptioner::new(
        b.captioner.clone(),
        Duration::from_millis(b.timeout_ms),
        templates,
        b.max_in_flight,
    )))
}

#[derive(Deserialize)]
struct SourceLine {
    image_id: String,
    #[serde(default)]
    os: Option<Os>,
    #[serde(default)]
    source: Option<String>,
}

fn annotate(cfg: &PipelineConfig, input: &Path, output: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let root = output.unwrap_or(&cfg.paths.dataset_root);
    let images = list_images(input).stage()?;
    if images.is_empty() {
        return Err(CliError::Stage(anyhow!("no .png/.jpg files in {}", input.display())));
    }
    let sources_path = input.join("sources.jsonl");
    let sources: HashMap<String, SourceLine> = if sources_path.exists() {
        jsonl::read_file::<SourceLine>(&sources_path)
            .stage()?
            .into_iter()
            .map(|s| (s.image_id.clone(), s))
            .collect()
    } else {
        HashMap::new()
    };

    std::fs::create_dir_all(root).stage()?;
    let _lock = dataset_lock(root, "annotate")?;
    let mut store = DatasetStore::open(root).stage()?.with_meta(cfg.artifact_meta("records"));
    if let Some((id, _)) = images
        .iter()
        .find(|(id, _)| store.manifest().records.iter().any(|r| &r.image_id == id))
    {
        return Err(CliError::Stage(anyhow!("image {id} is already in {}", root.display())));
    }

    let mut inputs = Vec::with_capacity(images.len());
    for (id, path) in &images {
        let bytes = std::fs::read(path).with_context(|| format!("reading {}", path.display())).stage()?;
        let file_name = path.file_name().and_then(|n| n.to_str()).unwrap_or(id);
        let src = sources.get(id);
        inputs.push(AnnotateInput {
            image_id: id.clone(),
            image_path: format!("images/{file_name}"),
            os: src.and_then(|s| s.os).unwrap_or(Os::Unknown),
            source: src.and_then(|s| s.source.clone()).unwrap_or_else(|| "local".into()),
            bytes,
        });
    }
    let annotate_cfg = AnnotateConfig {
        fusion: cfg.fusion,
        sampler: cfg.sampler_config(),
        style: cfg.style.clone(),
    };
    let det = detector(cfg, input);
    let mut done = Vec::with_capacity(inputs.len());
    let mut failures = Vec::new();
    for r in annotate_batch(&inputs, det.as_ref(), &annotate_cfg) {
        match r {
            Ok(a) => done.push(a),
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Stage(anyhow!("annotation failed: {}", failures.join("; "))));
    }

    let marked_dir = root.join("marked");
    std::fs::create_dir_all(&marked_dir).stage()?;
    for (a, input) in done.iter().zip(&inputs) {
        std::fs::write(root.join(&input.image_path), &input.bytes).stage()?;
        std::fs::write(marked_dir.join(format!("{}.png", a.record.image_id)), &a.marked_png).stage()?;
    }
    let records: Vec<_> = done.into_iter().map(|a| a.record).collect();
    let elements: usize = records.iter().map(|r| r.elements.len()).sum();
    store.put_records(&records).stage()?;
    emit(out, json!({"command": "annotate", "records": records.len(), "elements": elements}))
}

fn caption(cfg: &PipelineConfig, input: Option<&Path>, force: bool, out: &mut dyn Write) -> Result<(), CliError> {
    let root = input.unwrap_or(&cfg.paths.dataset_root);
    let _lock = dataset_lock(root, "caption")?;
    let mut store = DatasetStore::open(root).stage()?.with_meta(cfg.artifact_meta("records"));
    let backend = captioner(cfg)?;
    let todo: Vec<_> = store
        .records()
        .stage()?
        .into_iter()
        .filter(|r| force || r.elements.iter().any(|e| e.caption.is_none()))
        .collect();
    let mut items = Vec::with_capacity(todo.len());
    for r in todo {
        let path = store.resolve_image(&r);
        let bytes = std::fs::read(&path)
            .with_context(|| format!("reading {}", path.display()))
            .stage()?;
        items.push((r, bytes));
    }
    let caption_cfg = CaptionConfig {
        style: cfg.style.clone(),
        retry: RetryPolicy {
            max_attempts: cfg.caption.max_attempts,
        },
        limits: cfg.caption_limits(),
        template_id: cfg.caption.template_id.clone(),
    };
    let mut updated = Vec::with_capacity(items.len());
    let mut failures = Vec::new();
    let mut warnings = 0;
    for r in caption_records(&items, backend.as_ref(), &caption_cfg) {
        match r {
            Ok(c) => {
                for w in c.validation.warnings() {
                    log::warn!("{}: {w}", c.record.image_id);
                    warnings += 1;
                }
                let errors: Vec<String> = c.validation.errors().map(ToString::to_string).collect();
                if errors.is_empty() {
                    updated.push(c.record);
                } else {
                    failures.push(format!("{}: {}", c.record.image_id, errors.join(", ")));
                }
            }
            Err(e) => failures.push(e.to_string()),
        }
    }
    if !failures.is_empty() {
        return Err(CliError::Stage(anyhow!("captioning failed: {}", failures.join("; "))));
    }
    store.update_records(&updated).stage()?;
    emit(out, json!({"command": "caption", "captioned": updated.len(), "warnings": warnings}))
}

fn split(cfg: &PipelineConfig, input: Option<&Path>, eval_size: Option<usize>, out: &mut dyn Write) -> Result<(), CliError> {
    let root = input.unwrap_or(&cfg.paths.dataset_root);
    let _lock = dataset_lock(root, "split")?;
    let mut store = DatasetStore::open(root).stage()?;
    let eval_size = eval_size.unwrap_or(cfg.split.eval_size);
    let manifest = make_benchmark_split(store.manifest(), eval_size, cfg.seed).stage()?;
    let mut per_os: BTreeMap<String, usize> = BTreeMap::new();
    for r in &manifest.records {
        if manifest.split_labels.get(&r.image_id) == Some(&Split::Eval) {
            *per_os.entry(r.os.to_string()).or_insert(0) += 1;
        }
    }
    let eval = manifest.ids_in(Split::Eval).len();
    let train = manifest.ids_in(Split::Train).len();
    store.set_manifest(manifest).stage()?;
    emit(out, json!({"command": "split", "eval": eval, "train": train, "eval_per_os": per_os}))
}

fn stats(cfg: &PipelineConfig, input: Option<&Path>, output: Option<&Path>, out: &mut dyn Write) -> Result<(), CliError> {
    let root = input.unwrap_or(&cfg.paths.dataset_root);
    let store = DatasetStore::open(root).stage()?;
    let report = compute_stats(&store.records().stage()?, cfg.stats.heatmap_grid);
    let value = with_meta(cfg, "stats", report)?;
    match output {
        Some(p) => write_json(p, &value),
        None => emit(out, value),
    }
}

fn eval(
    cfg: &PipelineConfig,
    preds: &Path,
    samples: &Path,
    output: Option<&Path>,
    tau: &[f64],
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let taus = if tau.is_empty() { DEFAULT_TAUS.to_vec() } else { tau.to_vec() };
    if let Some(bad) = taus.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
        return Err(CliError::Config(anyhow!("--tau {bad} outside (0, 1]")));
    }
    let report = evaluate_run(preds, samples, &taus).stage()?;
    if !report.unmatched_predictions.is_empty() {
        log::warn!("unmatched prediction ids: {}", report.unmatched_predictions.join(", "));
    }
    write!(out, "{}", report.table()).stage()?;
    if let Some(p) = output {
        write_json(p, &with_meta(cfg, "metrics", &report)?)?;
    }
    Ok(())
}

/// Content type for an image file, sniffed from its bytes.
pub fn image_mime(bytes: &[u8]) -> &'static str {
    ImageFormatTag::from_bytes(bytes).map_or("application/octet-stream", |f| f.mime())
}
