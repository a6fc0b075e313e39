//! Three-stage source filtering: seed a classifier, iterate with human review
//! until it is accurate enough to freeze, then bulk-filter with the frozen
//! model. Every state change is an [`Event`] appended to a journal, and the
//! in-memory [`OrchestratorState`] is a fold over those events.

mod classifier;
mod journal;
mod queue;

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs::OpenOptions;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backend::BackendError;

pub use classifier::{ClassifierBackend, ClassifierScript, ImageRef, Scored, ScriptedClassifier, VersionScript};
pub use journal::{read_journal, ClassifiedImage, Event, Journal, LabeledImage};
pub use queue::{Lease, LeaseCheck, LeaseTable, DEFAULT_LEASE_MS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ImageClass {
    Unrelated,
    Invalid,
    Valid,
}

impl ImageClass {
    pub const ALL: [ImageClass; 3] = [ImageClass::Unrelated, ImageClass::Invalid, ImageClass::Valid];

    pub fn as_str(self) -> &'static str {
        match self {
            ImageClass::Unrelated => "unrelated",
            ImageClass::Invalid => "invalid",
            ImageClass::Valid => "valid",
        }
    }
}

impl fmt::Display for ImageClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for ImageClass {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        ImageClass::ALL
            .into_iter()
            .find(|c| c.as_str() == s)
            .ok_or_else(|| format!("unknown image class {s:?}"))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ModelVersion(pub u32);

impl fmt::Display for ModelVersion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "v{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Seed,
    HumanVerified,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PoolEntry {
    pub class: ImageClass,
    pub provenance: Provenance,
    /// Round the entry was added in; 0 for seed data.
    pub round: u32,
}

/// Labeled training data plus a holdout that is never trained on.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct DataPool {
    pub entries: BTreeMap<String, PoolEntry>,
    pub holdout: BTreeMap<String, ImageClass>,
}

impl DataPool {
    pub fn class_counts(&self) -> BTreeMap<ImageClass, usize> {
        let mut out = BTreeMap::new();
        for e in self.entries.values() {
            *out.entry(e.class).or_insert(0) += 1;
        }
        out
    }

    pub fn contains(&self, image_id: &str) -> bool {
        self.entries.contains_key(image_id) || self.holdout.contains_key(image_id)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "decision", rename_all = "lowercase")]
pub enum Decision {
    Accept,
    Reject,
    Relabel { class: ImageClass },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Verdict {
    pub image_id: String,
    #[serde(flatten)]
    pub decision: Decision,
    pub reviewer_id: String,
    /// Client-supplied, milliseconds since the epoch.
    #[serde(default)]
    pub timestamp: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "phase", rename_all = "snake_case")]
pub enum Phase {
    Seeding,
    Iterating { round: u32 },
    Frozen { model_version: ModelVersion },
    BulkFiltering { model_version: ModelVersion },
}

impl Phase {
    pub fn rank(self) -> u8 {
        match self {
            Phase::Seeding => 0,
            Phase::Iterating { .. } => 1,
            Phase::Frozen { .. } => 2,
            Phase::BulkFiltering { .. } => 3,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Phase::Seeding => "seeding",
            Phase::Iterating { .. } => "iterating",
            Phase::Frozen { .. } => "frozen",
            Phase::BulkFiltering { .. } => "bulk_filtering",
        }
    }
}

impl fmt::Display for Phase {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Phase::Seeding => f.write_str("seeding"),
            Phase::Iterating { round } => write!(f, "iterating(round {round})"),
            Phase::Frozen { model_version } => write!(f, "frozen({model_version})"),
            Phase::BulkFiltering { model_version } => write!(f, "bulk_filtering({model_version})"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Thresholds {
    /// Stage 2 keeps items for review when confidence is strictly above this.
    pub retain_conf: f64,
    /// Stage 3 keeps valid screens with confidence at or above this.
    pub final_conf: f64,
    /// The classifier freezes when holdout accuracy is strictly above this.
    pub freeze_accuracy: f64,
    pub batch_size: usize,
}

impl Default for Thresholds {
    fn default() -> Self {
        Thresholds {
            retain_conf: 0.8,
            final_conf: 0.9,
            freeze_accuracy: 0.95,
            batch_size: 5000,
        }
    }
}

impl Thresholds {
    pub fn validate(&self) -> Result<(), String> {
        for (name, v) in [
            ("retain_conf", self.retain_conf),
            ("final_conf", self.final_conf),
            ("freeze_accuracy", self.freeze_accuracy),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(format!("{name} must be in [0, 1], got {v}"));
            }
        }
        if self.batch_size == 0 {
            return Err("batch_size must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OrchestratorConfig {
    pub thresholds: Thresholds,
    pub min_seed_per_class: usize,
    pub holdout_fraction: f64,
    pub seed: u64,
    pub lease_timeout_ms: u64,
}

impl Default for OrchestratorConfig {
    fn default() -> Self {
        OrchestratorConfig {
            thresholds: Thresholds::default(),
            min_seed_per_class: 5000,
            holdout_fraction: 0.1,
            seed: 0,
            lease_timeout_ms: DEFAULT_LEASE_MS,
        }
    }
}

impl OrchestratorConfig {
    /// Same rules at desk scale.
    pub fn test_profile() -> Self {
        OrchestratorConfig {
            thresholds: Thresholds {
                batch_size: 50,
                ..Thresholds::default()
            },
            min_seed_per_class: 10,
            ..OrchestratorConfig::default()
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        self.thresholds.validate()?;
        if !(0.0..1.0).contains(&self.holdout_fraction) {
            return Err(format!("holdout_fraction must be in [0, 1), got {}", self.holdout_fraction));
        }
        if self.lease_timeout_ms == 0 {
            return Err("lease_timeout_ms must be positive".into());
        }
        Ok(())
    }
}

#[derive(Debug, thiserror::Error)]
pub enum OrchestratorError {
    #[error("journal i/o: {0}")]
    Io(#[from] std::io::Error),
    #[error("journal line {line}: {message}")]
    Journal { line: usize, message: String },
    #[error("{op} is not allowed in phase {phase}")]
    WrongPhase { op: &'static str, phase: Phase },
    #[error("class {class} has {count} seed images, minimum is {min}")]
    ClassBelowMinimum { class: ImageClass, count: usize, min: usize },
    #[error("image {0} appears more than once in the seed sets")]
    DuplicateSeed(String),
    #[error("batch of {size} exceeds batch_size {max}")]
    BatchTooLarge { size: usize, max: usize },
    #[error("{} review item(s) still undecided", ids.len())]
    Outstanding { ids: Vec<String> },
    #[error("unknown image {0}")]
    UnknownImage(String),
    #[error("verdict for {image_id} in round {round} already recorded")]
    Conflict { image_id: String, round: u32 },
    #[error("{image_id} is leased to {reviewer_id}")]
    Locked {
        image_id: String,
        reviewer_id: String,
        expires_at_ms: u64,
    },
    #[error("classifier backend: {0}")]
    Backend(#[from] BackendError),
    #[error("journal was started with a different configuration: {0}")]
    ConfigMismatch(String),
    #[error("invalid orchestrator config: {0}")]
    Config(String),
}

/// An item awaiting (or holding) a review verdict in the current round.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReviewItem {
    pub image_id: String,
    pub round: u32,
    pub predicted_class: ImageClass,
    pub confidence: f64,
    pub seq: u64,
    pub verdict: Option<Verdict>,
}

/// What `queue_next` hands to a reviewer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueItemView {
    pub image_id: String,
    pub round: u32,
    pub predicted_class: ImageClass,
    pub confidence: f64,
    pub lease_expires_at_ms: u64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditCounts {
    pub ingested: usize,
    pub retained: usize,
    pub dropped: usize,
    pub accepted: usize,
    pub relabeled: usize,
    pub rejected: usize,
    pub bulk_seen: usize,
    pub bulk_kept: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct OrchestratorState {
    pub phase: Phase,
    pub phase_history: Vec<Phase>,
    pub thresholds: Thresholds,
    pub model_version: Option<ModelVersion>,
    pub pool: DataPool,
    /// Current round's review items, keyed by image id.
    pub review: BTreeMap<String, ReviewItem>,
    /// Every (image_id, round) that has a recorded verdict.
    pub decided: BTreeSet<(String, u32)>,
    pub accuracy_history: Vec<(ModelVersion, f64)>,
    /// Images admitted to annotation, in admission order.
    pub intake: Vec<String>,
    pub audit: AuditCounts,
    next_seq: u64,
}

impl Default for OrchestratorState {
    fn default() -> Self {
        OrchestratorState {
            phase: Phase::Seeding,
            phase_history: vec![Phase::Seeding],
            thresholds: Thresholds::default(),
            model_version: None,
            pool: DataPool::default(),
            review: BTreeMap::new(),
            decided: BTreeSet::new(),
            accuracy_history: Vec::new(),
            intake: Vec::new(),
            audit: AuditCounts::default(),
            next_seq: 0,
        }
    }
}

impl OrchestratorState {
    pub fn replay<'a>(events: impl IntoIterator<Item = &'a Event>) -> Self {
        let mut s = OrchestratorState::default();
        for e in events {
            s.apply(e);
        }
        s
    }

    pub fn apply(&mut self, event: &Event) {
        match event {
            Event::RunStarted { thresholds, .. } => self.thresholds = *thresholds,
            Event::Seeded { training, holdout } => {
                for l in training {
                    self.pool.entries.insert(
                        l.image_id.clone(),
                        PoolEntry {
                            class: l.class,
                            provenance: Provenance::Seed,
                            round: 0,
                        },
                    );
                }
                for l in holdout {
                    self.pool.holdout.insert(l.image_id.clone(), l.class);
                }
            }
            Event::Trained { model_version, .. } => self.model_version = Some(*model_version),
            Event::Evaluated {
                model_version,
                accuracy,
                ..
            } => self.accuracy_history.push((*model_version, *accuracy)),
            Event::BatchIngested { round, results, .. } => {
                for r in results {
                    self.audit.ingested += 1;
                    if !r.passed {
                        self.audit.dropped += 1;
                        continue;
                    }
                    self.audit.retained += 1;
                    self.review.insert(
                        r.image_id.clone(),
                        ReviewItem {
                            image_id: r.image_id.clone(),
                            round: *round,
                            predicted_class: r.class,
                            confidence: r.confidence,
                            seq: self.next_seq,
                            verdict: None,
                        },
                    );
                    self.next_seq += 1;
                }
            }
            Event::VerdictRecorded { round, verdict } => {
                self.decided.insert((verdict.image_id.clone(), *round));
                if let Some(item) = self.review.get_mut(&verdict.image_id) {
                    item.verdict = Some(verdict.clone());
                }
            }
            Event::PoolUpdated {
                round,
                image_id,
                class,
                provenance,
                ..
            } => {
                self.pool.entries.insert(
                    image_id.clone(),
                    PoolEntry {
                        class: *class,
                        provenance: *provenance,
                        round: *round,
                    },
                );
            }
            Event::RetrainSkipped { .. } => {}
            Event::RoundClosed {
                accepted,
                relabeled,
                rejected,
                ..
            } => {
                self.audit.accepted += accepted;
                self.audit.relabeled += relabeled;
                self.audit.rejected += rejected;
                self.review.clear();
            }
            Event::PhaseChanged { to, .. } => {
                self.phase = *to;
                self.phase_history.push(*to);
            }
            Event::BulkFiltered { results, .. } => {
                for r in results {
                    self.audit.bulk_seen += 1;
                    if r.passed {
                        self.audit.bulk_kept += 1;
                        self.intake.push(r.image_id.clone());
                    }
                }
            }
        }
    }

    pub fn round(&self) -> Option<u32> {
        match self.phase {
            Phase::Iterating { round } => Some(round),
            _ => None,
        }
    }

    pub fn pending(&self) -> impl Iterator<Item = &ReviewItem> {
        let mut items: Vec<&ReviewItem> = self.review.values().filter(|i| i.verdict.is_none()).collect();
        items.sort_by_key(|i| i.seq);
        items.into_iter()
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct IngestReport {
    pub retained: Vec<String>,
    pub dropped: Vec<String>,
    /// Already labeled or already queued; not classified again.
    pub skipped: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RoundReport {
    pub round: u32,
    pub accepted: usize,
    pub relabeled: usize,
    pub rejected: usize,
    /// None when nothing new reached the pool and retraining was skipped.
    pub accuracy: Option<f64>,
    pub phase: Phase,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct BulkReport {
    pub kept: Vec<String>,
    pub dropped: Vec<String>,
}

/// Three labeled seed sets.
pub type SeedSets = BTreeMap<ImageClass, Vec<String>>;

#[derive(Serialize)]
struct IntakeLine<'a> {
    image_id: &'a str,
    model_version: ModelVersion,
}

/// Single-writer driver. Backend calls happen before any event is written,
/// so a failed call leaves the journal untouched.
pub struct Orchestrator {
    config: OrchestratorConfig,
    backend: Box<dyn ClassifierBackend>,
    journal: Journal,
    state: OrchestratorState,
    leases: LeaseTable,
    intake_path: Option<PathBuf>,
}

impl fmt::Debug for Orchestrator {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Orchestrator")
            .field("journal", &self.journal)
            .field("phase", &self.state.phase)
            .finish()
    }
}

impl Orchestrator {
    /// Opens a run. An existing journal is replayed and must have been started
    /// with the same configuration; an empty one gets a `RunStarted` event.
    pub fn open(
        journal_path: &Path,
        config: OrchestratorConfig,
        backend: Box<dyn ClassifierBackend>,
    ) -> Result<Self, OrchestratorError> {
        config.validate().map_err(OrchestratorError::Config)?;
        let (journal, events) = Journal::open(journal_path)?;
        let mut orch = Orchestrator {
            leases: LeaseTable::new(config.lease_timeout_ms),
            state: OrchestratorState::replay(&events),
            config,
            backend,
            journal,
            intake_path: None,
        };
        match events.first() {
            None => {
                let started = orch.run_started();
                orch.commit(vec![started])?;
            }
            Some(first) => {
                let expected = orch.run_started();
                if *first != expected {
                    return Err(OrchestratorError::ConfigMismatch(format!(
                        "journal has {}, config gives {}",
                        serde_json::to_string(first).unwrap_or_default(),
                        serde_json::to_string(&expected).unwrap_or_default()
                    )));
                }
                log::info!(
                    "replayed {} journal events, phase {}",
                    events.len(),
                    orch.state.phase
                );
            }
        }
        Ok(orch)
    }

    /// Kept stage 3 images are also appended to this line-delimited file.
    pub fn with_intake(mut self, path: impl Into<PathBuf>) -> Self {
        self.intake_path = Some(path.into());
        self
    }

    fn run_started(&self) -> Event {
        Event::RunStarted {
            thresholds: self.config.thresholds,
            min_seed_per_class: self.config.min_seed_per_class,
            holdout_fraction: self.config.holdout_fraction,
            seed: self.config.seed,
        }
    }

    fn commit(&mut self, events: Vec<Event>) -> Result<(), OrchestratorError> {
        for e in &events {
            self.journal.append(e)?;
            self.state.apply(e);
        }
        Ok(())
    }

    pub fn state(&self) -> &OrchestratorState {
        &self.state
    }

    pub fn config(&self) -> &OrchestratorConfig {
        &self.config
    }

    pub fn journal_path(&self) -> &Path {
        self.journal.path()
    }

    pub fn backend(&self) -> &dyn ClassifierBackend {
        self.backend.as_ref()
    }

    fn wrong_phase(&self, op: &'static str) -> OrchestratorError {
        OrchestratorError::WrongPhase {
            op,
            phase: self.state.phase,
        }
    }

    fn next_version(&self) -> ModelVersion {
        ModelVersion(self.state.model_version.map_or(1, |v| v.0 + 1))
    }

    /// Populates the pool, carves out the holdout and trains the first model.
    pub fn stage1_seed(&mut self, seeds: &SeedSets) -> Result<&OrchestratorState, OrchestratorError> {
        if self.state.phase != Phase::Seeding {
            return Err(self.wrong_phase("stage1_seed"));
        }
        let min = self.config.min_seed_per_class;
        let mut seen = BTreeSet::new();
        for class in ImageClass::ALL {
            let ids = seeds.get(&class).map(Vec::as_slice).unwrap_or(&[]);
            if ids.len() < min || ids.is_empty() {
                return Err(OrchestratorError::ClassBelowMinimum {
                    class,
                    count: ids.len(),
                    min,
                });
            }
            for id in ids {
                if !seen.insert(id.as_str()) {
                    return Err(OrchestratorError::DuplicateSeed(id.clone()));
                }
            }
        }

        let mut training = Vec::new();
        let mut holdout = Vec::new();
        for (ci, class) in ImageClass::ALL.into_iter().enumerate() {
            let mut ids = seeds[&class].clone();
            ids.sort();
            let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ ((ci as u64 + 1) << 56));
            ids.shuffle(&mut rng);
            let n_hold = (ids.len() as f64 * self.config.holdout_fraction).round() as usize;
            let n_hold = n_hold.min(ids.len() - 1);
            let mut held: Vec<_> = ids[..n_hold].to_vec();
            let mut rest: Vec<_> = ids[n_hold..].to_vec();
            held.sort();
            rest.sort();
            holdout.extend(held.into_iter().map(|image_id| LabeledImage { image_id, class }));
            training.extend(rest.into_iter().map(|image_id| LabeledImage { image_id, class }));
        }

        let seeded = Event::Seeded { training, holdout };
        let mut scratch = self.state.clone();
        scratch.apply(&seeded);
        let version = self.next_version();
        self.backend.train(&scratch.pool, version)?;
        self.commit(vec![
            seeded,
            Event::Trained {
                model_version: version,
                round: 0,
            },
            Event::PhaseChanged {
                from: Phase::Seeding,
                to: Phase::Iterating { round: 1 },
            },
        ])?;
        Ok(&self.state)
    }

    fn classify_parallel(
        &self,
        version: ModelVersion,
        images: &[ImageRef],
    ) -> Result<Vec<Scored>, OrchestratorError> {
        if images.is_empty() {
            return Ok(Vec::new());
        }
        let lanes = self.backend.max_in_flight().clamp(1, 16);
        let chunk = images.len().div_ceil(lanes);
        let backend = self.backend.as_ref();
        let parts: Vec<Result<Vec<Scored>, BackendError>> = std::thread::scope(|s| {
            let handles: Vec<_> = images
                .chunks(chunk)
                .map(|c| s.spawn(move || backend.classify(version, c)))
                .collect();
            handles
                .into_iter()
                .map(|h| h.join().unwrap_or_else(|_| Err(BackendError::Protocol("classifier panicked".into()))))
                .collect()
        });
        let mut out = Vec::with_capacity(images.len());
        for p in parts {
            out.extend(p?);
        }
        if out.len() != images.len() {
            return Err(BackendError::Protocol(format!(
                "classifier returned {} results for {} images",
                out.len(),
                images.len()
            ))
            .into());
        }
        if let Some(bad) = out.iter().find(|s| !(0.0..=1.0).contains(&s.confidence)) {
            return Err(BackendError::Protocol(format!("confidence {} outside [0, 1]", bad.confidence)).into());
        }
        Ok(out)
    }

    /// Classifies a batch and queues every item whose confidence is strictly
    /// above `retain_conf`, whatever its predicted class.
    pub fn stage2_ingest_batch(&mut self, images: &[ImageRef]) -> Result<IngestReport, OrchestratorError> {
        let Phase::Iterating { round } = self.state.phase else {
            return Err(self.wrong_phase("stage2_ingest_batch"));
        };
        let max = self.config.thresholds.batch_size;
        if images.len() > max {
            return Err(OrchestratorError::BatchTooLarge {
                size: images.len(),
                max,
            });
        }
        let mut report = IngestReport::default();
        let mut fresh = Vec::new();
        let mut seen = BTreeSet::new();
        for img in images {
            if self.state.pool.contains(&img.image_id)
                || self.state.review.contains_key(&img.image_id)
                || !seen.insert(img.image_id.as_str())
            {
                report.skipped.push(img.image_id.clone());
            } else {
                fresh.push(img.clone());
            }
        }
        if !report.skipped.is_empty() {
            log::warn!("round {round}: skipped {} already-known image(s)", report.skipped.len());
        }
        let version = self.state.model_version.unwrap_or(ModelVersion(1));
        let scores = self.classify_parallel(version, &fresh)?;
        let retain = self.config.thresholds.retain_conf;
        let results: Vec<ClassifiedImage> = fresh
            .iter()
            .zip(&scores)
            .map(|(img, s)| ClassifiedImage {
                image_id: img.image_id.clone(),
                class: s.class,
                confidence: s.confidence,
                passed: s.confidence > retain,
            })
            .collect();
        for r in &results {
            if r.passed {
                report.retained.push(r.image_id.clone());
            } else {
                log::debug!("round {round}: dropped {} ({} at {})", r.image_id, r.class, r.confidence);
                report.dropped.push(r.image_id.clone());
            }
        }
        self.commit(vec![Event::BatchIngested {
            round,
            model_version: version,
            results,
        }])?;
        Ok(report)
    }

    /// Leases the oldest available undecided item to `reviewer_id`. A reviewer
    /// already holding a live lease gets the same item back.
    pub fn queue_next(&mut self, reviewer_id: &str, now_ms: u64) -> Option<QueueItemView> {
        self.round()?;
        let held = self
            .leases
            .held_by(reviewer_id, now_ms)
            .map(|(id, l)| (id.to_string(), l.clone()));
        let (item, lease) = {
            let mut pending = self.state.pending();
            match held.and_then(|(id, l)| pending.find(|i| i.image_id == id).map(|i| (i.clone(), Some(l)))) {
                Some(found) => found,
                None => (
                    self.state
                        .pending()
                        .find(|i| self.leases.is_available(&i.image_id, now_ms))?
                        .clone(),
                    None,
                ),
            }
        };
        let lease = lease.unwrap_or_else(|| self.leases.grant(&item.image_id, reviewer_id, now_ms));
        Some(QueueItemView {
            image_id: item.image_id,
            round: item.round,
            predicted_class: item.predicted_class,
            confidence: item.confidence,
            lease_expires_at_ms: lease.expires_at_ms,
        })
    }

    fn round(&self) -> Option<u32> {
        self.state.round()
    }

    /// Records a verdict for the current round. Allowed when the item is
    /// unleased, leased to the submitter, or its lease has lapsed.
    pub fn submit_verdict(&mut self, verdict: Verdict, now_ms: u64) -> Result<u32, OrchestratorError> {
        let id = verdict.image_id.clone();
        let Some(item) = self.state.review.get(&id) else {
            if let Some((_, round)) = self.state.decided.iter().rev().find(|(i, _)| *i == id) {
                return Err(OrchestratorError::Conflict { image_id: id, round: *round });
            }
            return Err(OrchestratorError::UnknownImage(id));
        };
        let round = item.round;
        if item.verdict.is_some() || self.state.decided.contains(&(id.clone(), round)) {
            return Err(OrchestratorError::Conflict { image_id: id, round });
        }
        if let LeaseCheck::HeldByOther(lease) = self.leases.check(&id, &verdict.reviewer_id, now_ms) {
            return Err(OrchestratorError::Locked {
                image_id: id,
                reviewer_id: lease.reviewer_id,
                expires_at_ms: lease.expires_at_ms,
            });
        }
        self.commit(vec![Event::VerdictRecorded { round, verdict }])?;
        self.leases.release(&id);
        Ok(round)
    }

    /// Closes the current round: verified items join the pool, the model is
    /// retrained and scored on the holdout, and the run either freezes or
    /// moves to the next round.
    pub fn stage2_absorb_verdicts_and_retrain(&mut self) -> Result<RoundReport, OrchestratorError> {
        let Phase::Iterating { round } = self.state.phase else {
            return Err(self.wrong_phase("stage2_absorb_verdicts_and_retrain"));
        };
        let outstanding: Vec<String> = self.state.pending().map(|i| i.image_id.clone()).collect();
        if !outstanding.is_empty() {
            return Err(OrchestratorError::Outstanding { ids: outstanding });
        }

        let mut items: Vec<&ReviewItem> = self.state.review.values().collect();
        items.sort_by_key(|i| i.seq);
        let (mut accepted, mut relabeled, mut rejected) = (0, 0, 0);
        let mut events = Vec::new();
        for item in items {
            let Some(v) = &item.verdict else { continue };
            let class = match v.decision {
                Decision::Reject => {
                    rejected += 1;
                    continue;
                }
                Decision::Accept => {
                    accepted += 1;
                    item.predicted_class
                }
                Decision::Relabel { class } => {
                    relabeled += 1;
                    class
                }
            };
            if self.state.pool.holdout.contains_key(&item.image_id) {
                log::warn!("{} is in the holdout; not adding it to training", item.image_id);
                continue;
            }
            let previous = self.state.pool.entries.get(&item.image_id).map(|e| e.class);
            match (previous, &v.decision) {
                (Some(p), _) if p == class => continue,
                (Some(p), Decision::Accept) => {
                    log::warn!("{} accepted as {class} but pool has {p}; keeping {p}", item.image_id);
                    continue;
                }
                _ => {}
            }
            events.push(Event::PoolUpdated {
                round,
                image_id: item.image_id.clone(),
                class,
                provenance: Provenance::HumanVerified,
                previous,
            });
        }

        let mut accuracy = None;
        let mut next = Phase::Iterating { round: round + 1 };
        if events.is_empty() {
            log::warn!("round {round}: no verified additions, retraining skipped");
            events.push(Event::RetrainSkipped { round });
        } else {
            let mut scratch = self.state.clone();
            for e in &events {
                scratch.apply(e);
            }
            let version = self.next_version();
            self.backend.train(&scratch.pool, version)?;
            let acc = self.backend.evaluate(version, &scratch.pool.holdout)?;
            if !(0.0..=1.0).contains(&acc) {
                return Err(BackendError::Protocol(format!("accuracy {acc} outside [0, 1]")).into());
            }
            events.push(Event::Trained {
                model_version: version,
                round,
            });
            events.push(Event::Evaluated {
                model_version: version,
                round,
                accuracy: acc,
            });
            accuracy = Some(acc);
            if acc > self.config.thresholds.freeze_accuracy {
                next = Phase::Frozen { model_version: version };
            }
        }
        events.push(Event::RoundClosed {
            round,
            accepted,
            relabeled,
            rejected,
        });
        events.push(Event::PhaseChanged {
            from: self.state.phase,
            to: next,
        });
        self.commit(events)?;
        self.leases.clear();
        Ok(RoundReport {
            round,
            accepted,
            relabeled,
            rejected,
            accuracy,
            phase: next,
        })
    }

    /// Classifies with the frozen model and keeps valid screens whose
    /// confidence is at least `final_conf`.
    pub fn stage3_bulk_filter(&mut self, images: &[ImageRef]) -> Result<BulkReport, OrchestratorError> {
        let version = match self.state.phase {
            Phase::Frozen { model_version } | Phase::BulkFiltering { model_version } => model_version,
            _ => return Err(self.wrong_phase("stage3_bulk_filter")),
        };
        let scores = self.classify_parallel(version, images)?;
        let keep = self.config.thresholds.final_conf;
        let results: Vec<ClassifiedImage> = images
            .iter()
            .zip(&scores)
            .map(|(img, s)| ClassifiedImage {
                image_id: img.image_id.clone(),
                class: s.class,
                confidence: s.confidence,
                passed: s.class == ImageClass::Valid && s.confidence >= keep,
            })
            .collect();
        let mut report = BulkReport::default();
        for r in &results {
            if r.passed {
                report.kept.push(r.image_id.clone());
            } else {
                report.dropped.push(r.image_id.clone());
            }
        }
        let mut events = Vec::new();
        if let Phase::Frozen { .. } = self.state.phase {
            events.push(Event::PhaseChanged {
                from: self.state.phase,
                to: Phase::BulkFiltering { model_version: version },
            });
        }
        events.push(Event::BulkFiltered {
            model_version: version,
            results,
        });
        self.commit(events)?;
        if let Some(path) = &self.intake_path {
            if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
                std::fs::create_dir_all(parent)?;
            }
            let mut f = OpenOptions::new().create(true).append(true).open(path)?;
            for id in &report.kept {
                crate::jsonl::append_line(
                    &mut f,
                    &IntakeLine {
                        image_id: id,
                        model_version: version,
                    },
                )?;
            }
        }
        Ok(report)
    }

    /// Snapshot for the review service, e.g.
    /// `{"phase":"iterating","round":2,"model_version":2,...}`.
    pub fn status(&self) -> serde_json::Value {
        let s = &self.state;
        let mut v = serde_json::to_value(s.phase).unwrap_or_default();
        let obj = v.as_object_mut().expect("phase serializes as an object");
        let pending = s.pending().count();
        obj.insert("model_version".into(), serde_json::json!(s.model_version));
        obj.insert("pool_size".into(), serde_json::json!(s.pool.entries.len()));
        obj.insert("holdout_size".into(), serde_json::json!(s.pool.holdout.len()));
        obj.insert(
            "queue".into(),
            serde_json::json!({"pending": pending, "decided": s.review.len() - pending}),
        );
        obj.insert(
            "accuracy_history".into(),
            serde_json::json!(s
                .accuracy_history
                .iter()
                .map(|(v, a)| serde_json::json!({"model_version": v, "accuracy": a}))
                .collect::<Vec<_>>()),
        );
        obj.insert("intake".into(), serde_json::json!(s.intake.len()));
        obj.insert("audit".into(), serde_json::json!(s.audit));
        v
    }
}
