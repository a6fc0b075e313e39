//! Pipeline configuration.
//!
//! Resolution order, later wins: profile defaults, the TOML file, then
//! `DESKMARK_<SECTION>__<KEY>` environment variables (`DESKMARK_SEED` for
//! top-level keys), then command-line flags.

use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use deskmark_core::caption::{CaptionLimits, RetryPolicy, DEFAULT_TEMPLATE_ID};
use deskmark_core::dataset::DEFAULT_HEATMAP_GRID;
use deskmark_core::fusion::FusionConfig;
use deskmark_core::jsonl::ArtifactMeta;
use deskmark_core::orchestrator::{OrchestratorConfig, Thresholds, DEFAULT_LEASE_MS};
use deskmark_core::sampler::{DistanceReference, MarkStyle, SamplerConfig};

pub const ENV_PREFIX: &str = "DESKMARK_";

/// Variables under the prefix that are not config overrides.
const RESERVED_VARS: [&str; 2] = ["DESKMARK_CONFIG", "DESKMARK_LOG"];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Profile {
    Test,
    Full,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PathsConfig {
    pub dataset_root: PathBuf,
    pub journal: PathBuf,
    /// Stage 3 output: one `{image_id, model_version}` line per kept image.
    pub intake: PathBuf,
    /// Stub detector fixtures, `<image_id>.json` each.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detections: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub caption_fixture: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub classifier_script: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub prompt_templates: Option<PathBuf>,
    /// Where the review service looks for candidate images that are not yet
    /// in the dataset.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub review_images: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            dataset_root: "data".into(),
            journal: "data/journal.jsonl".into(),
            intake: "data/intake.jsonl".into(),
            detections: None,
            caption_fixture: None,
            classifier_script: None,
            prompt_templates: None,
            review_images: None,
        }
    }
}

/// Sampler settings minus the seed, which comes from the top-level `seed`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerSection {
    pub min_cycles: u32,
    pub max_cycles: u32,
    pub farthest_pool: usize,
    pub reference: DistanceReference,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CaptionSection {
    pub min_chars: usize,
    pub max_chars: usize,
    pub max_attempts: u32,
    pub template_id: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OrchestratorSection {
    pub retain_conf: f64,
    pub final_conf: f64,
    pub freeze_accuracy: f64,
    pub batch_size: usize,
    pub min_seed_per_class: usize,
    pub holdout_fraction: f64,
    pub lease_timeout_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BackendsConfig {
    /// `"stub"` or an `http://` URL.
    pub detector: String,
    /// `"stub"` or an `http://` URL.
    pub captioner: String,
    pub timeout_ms: u64,
    pub max_in_flight: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ServiceConfig {
    pub bind: String,
    /// When set, requests must carry `Authorization: Bearer <token>`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reviewer_token: Option<String>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SplitSection {
    pub eval_size: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StatsSection {
    pub heatmap_grid: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    pub profile: Profile,
    pub seed: u64,
    pub paths: PathsConfig,
    pub fusion: FusionConfig,
    pub sampler: SamplerSection,
    pub style: MarkStyle,
    pub caption: CaptionSection,
    pub orchestrator: OrchestratorSection,
    pub backends: BackendsConfig,
    pub service: ServiceConfig,
    pub split: SplitSection,
    pub stats: StatsSection,
}

impl PipelineConfig {
    pub fn for_profile(profile: Profile) -> Self {
        let orch = match profile {
            Profile::Full => OrchestratorConfig::default(),
            Profile::Test => OrchestratorConfig::test_profile(),
        };
        let sampler = SamplerConfig::default();
        let limits = CaptionLimits::default();
        PipelineConfig {
            profile,
            seed: 0,
            paths: PathsConfig::default(),
            fusion: FusionConfig::default(),
            sampler: SamplerSection {
                min_cycles: sampler.min_cycles,
                max_cycles: sampler.max_cycles,
                farthest_pool: sampler.farthest_pool,
                reference: sampler.reference,
            },
            style: MarkStyle::default(),
            caption: CaptionSection {
                min_chars: limits.min_chars,
                max_chars: limits.max_chars,
                max_attempts: RetryPolicy::default().max_attempts,
                template_id: DEFAULT_TEMPLATE_ID.into(),
            },
            orchestrator: OrchestratorSection {
                retain_conf: orch.thresholds.retain_conf,
                final_conf: orch.thresholds.final_conf,
                freeze_accuracy: orch.thresholds.freeze_accuracy,
                batch_size: orch.thresholds.batch_size,
                min_seed_per_class: orch.min_seed_per_class,
                holdout_fraction: orch.holdout_fraction,
                lease_timeout_ms: DEFAULT_LEASE_MS,
            },
            backends: BackendsConfig {
                detector: "stub".into(),
                captioner: "stub".into(),
                timeout_ms: 30_000,
                max_in_flight: 4,
            },
            service: ServiceConfig {
                bind: "127.0.0.1:8080".into(),
                reviewer_token: None,
            },
            split: SplitSection {
                eval_size: match profile {
                    Profile::Full => 5000,
                    Profile::Test => 30,
                },
            },
            stats: StatsSection {
                heatmap_grid: DEFAULT_HEATMAP_GRID,
            },
        }
    }

    pub fn sampler_config(&self) -> SamplerConfig {
        SamplerConfig {
            min_cycles: self.sampler.min_cycles,
            max_cycles: self.sampler.max_cycles,
            farthest_pool: self.sampler.farthest_pool,
            reference: self.sampler.reference,
            rng_seed: self.seed,
        }
    }

    pub fn caption_limits(&self) -> CaptionLimits {
        CaptionLimits {
            min_chars: self.caption.min_chars,
            max_chars: self.caption.max_chars,
        }
    }

    pub fn orchestrator_config(&self) -> OrchestratorConfig {
        let o = &self.orchestrator;
        OrchestratorConfig {
            thresholds: Thresholds {
                retain_conf: o.retain_conf,
                final_conf: o.final_conf,
                freeze_accuracy: o.freeze_accuracy,
                batch_size: o.batch_size,
            },
            min_seed_per_class: o.min_seed_per_class,
            holdout_fraction: o.holdout_fraction,
            seed: self.seed,
            lease_timeout_ms: o.lease_timeout_ms,
        }
    }

    pub fn validate(&self) -> anyhow::Result<()> {
        self.fusion.validate().map_err(|e| anyhow!("{e}"))?;
        self.sampler_config().validate().map_err(|e| anyhow!("{e}"))?;
        self.orchestrator_config().validate().map_err(|e| anyhow!("{e}"))?;
        let c = &self.caption;
        if c.min_chars > c.max_chars {
            bail!("caption.min_chars {} > caption.max_chars {}", c.min_chars, c.max_chars);
        }
        if c.max_attempts == 0 {
            bail!("caption.max_attempts must be >= 1");
        }
        if self.style.palette.is_empty() {
            bail!("style.palette must not be empty");
        }
        if self.style.reference_height == 0 {
            bail!("style.reference_height must be positive");
        }
        if self.stats.heatmap_grid == 0 {
            bail!("stats.heatmap_grid must be positive");
        }
        if self.backends.max_in_flight == 0 || self.backends.timeout_ms == 0 {
            bail!("backends.max_in_flight and backends.timeout_ms must be positive");
        }
        for (name, value) in [("detector", &self.backends.detector), ("captioner", &self.backends.captioner)] {
            if value != "stub" && !value.starts_with("http://") {
                bail!("backends.{name} must be \"stub\" or an http:// URL, got {value:?}");
            }
        }
        let p = &self.paths;
        for (name, path) in [
            ("paths.detections", &p.detections),
            ("paths.caption_fixture", &p.caption_fixture),
            ("paths.classifier_script", &p.classifier_script),
            ("paths.prompt_templates", &p.prompt_templates),
            ("paths.review_images", &p.review_images),
        ] {
            if let Some(path) = path {
                if !path.exists() {
                    bail!("{name} {} does not exist", path.display());
                }
            }
        }
        Ok(())
    }

    /// Hex SHA-256 prefix over everything that affects outputs. Paths and
    /// service settings are left out so the same run in another directory
    /// hashes the same.
    pub fn hash(&self) -> String {
        let mut v = serde_json::to_value(self).expect("config serializes");
        if let Some(obj) = v.as_object_mut() {
            obj.remove("paths");
            obj.remove("service");
        }
        let digest = Sha256::digest(v.to_string().as_bytes());
        digest[..8].iter().map(|b| format!("{b:02x}")).collect()
    }

    pub fn artifact_meta(&self, kind: &str) -> ArtifactMeta {
        ArtifactMeta {
            tool: format!("deskmark {}", env!("CARGO_PKG_VERSION")),
            kind: kind.into(),
            seed: self.seed,
            config_hash: self.hash(),
        }
    }
}

/// Command-line values that override everything else.
#[derive(Debug, Clone, Default)]
pub struct FlagOverrides {
    pub seed: Option<u64>,
    pub profile: Option<Profile>,
}

fn merge(base: &mut toml::Value, over: toml::Value) {
    match (base, over) {
        (toml::Value::Table(b), toml::Value::Table(o)) => {
            for (k, v) in o {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

/// Parses an environment value as a TOML literal, falling back to a string.
fn env_value(raw: &str) -> toml::Value {
    format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()))
}

fn env_overrides(vars: &[(String, String)]) -> anyhow::Result<toml::Value> {
    let mut out = toml::Table::new();
    for (key, raw) in vars {
        if RESERVED_VARS.contains(&key.as_str()) {
            continue;
        }
        let Some(rest) = key.strip_prefix(ENV_PREFIX) else { continue };
        let path: Vec<String> = rest.split("__").map(str::to_lowercase).collect();
        if path.iter().any(String::is_empty) || path.len() > 2 {
            bail!("malformed override variable {key}");
        }
        let value = env_value(raw);
        match path.as_slice() {
            [k] => {
                out.insert(k.clone(), value);
            }
            [section, k] => {
                let entry = out
                    .entry(section.clone())
                    .or_insert_with(|| toml::Value::Table(toml::Table::new()));
                entry
                    .as_table_mut()
                    .ok_or_else(|| anyhow!("{key} conflicts with a top-level override"))?
                    .insert(k.clone(), value);
            }
            _ => unreachable!(),
        }
    }
    Ok(toml::Value::Table(out))
}

/// Relative paths in a config file are resolved against the file's directory.
fn anchor_paths(cfg: &mut PipelineConfig, base: &Path) {
    let fix = |p: &mut PathBuf| {
        if p.is_relative() {
            *p = base.join(&*p);
        }
    };
    let paths = &mut cfg.paths;
    fix(&mut paths.dataset_root);
    fix(&mut paths.journal);
    fix(&mut paths.intake);
    for p in [
        &mut paths.detections,
        &mut paths.caption_fixture,
        &mut paths.classifier_script,
        &mut paths.prompt_templates,
        &mut paths.review_images,
    ]
    .into_iter()
    .flatten()
    {
        fix(p);
    }
}

/// Loads and validates the configuration. `vars` is the process environment
/// (only `DESKMARK_*` entries are looked at).
pub fn load(
    file: Option<&Path>,
    vars: &[(String, String)],
    flags: &FlagOverrides,
) -> anyhow::Result<PipelineConfig> {
    let file_value = match file {
        Some(path) => {
            let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
            let table: toml::Table = toml::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
            toml::Value::Table(table)
        }
        None => toml::Value::Table(toml::Table::new()),
    };
    let env = env_overrides(vars)?;

    // The profile picks the defaults, so settle it first.
    let pick = |v: &toml::Value| v.get("profile").cloned();
    let profile = match flags.profile {
        Some(p) => p,
        None => match pick(&env).or_else(|| pick(&file_value)) {
            Some(v) => v.try_into::<Profile>().context("profile must be \"test\" or \"full\"")?,
            None => Profile::Test,
        },
    };

    let mut value = toml::Value::try_from(PipelineConfig::for_profile(profile)).context("encoding defaults")?;
    merge(&mut value, file_value);
    merge(&mut value, env);
    let table = value.as_table_mut().expect("config is a table");
    table.insert("profile".into(), toml::Value::try_from(profile)?);
    if let Some(seed) = flags.seed {
        let seed = i64::try_from(seed).map_err(|_| anyhow!("seed {seed} exceeds {}", i64::MAX))?;
        table.insert("seed".into(), toml::Value::Integer(seed));
    }
    let mut cfg: PipelineConfig = value.try_into().context("invalid configuration")?;
    if let Some(base) = file.and_then(Path::parent) {
        anchor_paths(&mut cfg, base);
    }
    cfg.validate()?;
    Ok(cfg)
}

/// `DESKMARK_*` variables from the process environment.
pub fn process_env() -> Vec<(String, String)> {
    std::env::vars().filter(|(k, _)| k.starts_with(ENV_PREFIX)).collect()
}
