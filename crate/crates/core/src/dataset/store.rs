//! On-disk dataset directory:
//!
//! ```text
//! <root>/manifest.jsonl     schema line, then one index entry per record
//! <root>/records/*.jsonl    record shards
//! <root>/images/            image payloads referenced by image_path
//! ```
//!
//! Writes go through `&mut self`; wrap the store in a lock to share it.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fs::File;
use std::io::{BufRead, BufReader};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use super::{
    read_records, validate_record, DatasetManifest, RecordLimits, RecordRef, ScreenshotRecord,
    Split, SCHEMA_VERSION,
};
use crate::jsonl::{self, ArtifactMeta, JsonlError};

#[derive(Debug, Error)]
pub enum StoreError {
    #[error(transparent)]
    Jsonl(#[from] JsonlError),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("image_id {0} already present in the store")]
    DuplicateImageId(String),
    #[error("image_id {0} is not in the store")]
    UnknownImageId(String),
    #[error("record {image_id} is invalid: {violations}")]
    InvalidRecord { image_id: String, violations: String },
    #[error("unsupported schema version {0}")]
    SchemaVersion(String),
    #[error("manifest is malformed at line {line}: {message}")]
    Manifest { line: usize, message: String },
}

#[derive(Serialize, Deserialize)]
struct SchemaLine {
    schema_version: String,
}

#[derive(Serialize, Deserialize)]
struct IndexLine {
    #[serde(flatten)]
    entry: RecordRef,
    split: Option<Split>,
}

pub struct DatasetStore {
    root: PathBuf,
    manifest: DatasetManifest,
    limits: RecordLimits,
    meta: Option<ArtifactMeta>,
}

impl DatasetStore {
    pub fn open(root: impl Into<PathBuf>) -> Result<Self, StoreError> {
        let root = root.into();
        std::fs::create_dir_all(root.join("records"))?;
        std::fs::create_dir_all(root.join("images"))?;
        let manifest_path = root.join("manifest.jsonl");
        let manifest = if manifest_path.exists() {
            load_manifest(&manifest_path)?
        } else {
            DatasetManifest::default()
        };
        Ok(DatasetStore {
            root,
            manifest,
            limits: RecordLimits::default(),
            meta: None,
        })
    }

    pub fn with_limits(mut self, limits: RecordLimits) -> Self {
        self.limits = limits;
        self
    }

    /// Header line written at the top of every shard this handle writes.
    pub fn with_meta(mut self, meta: ArtifactMeta) -> Self {
        self.meta = Some(meta);
        self
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn images_dir(&self) -> PathBuf {
        self.root.join("images")
    }

    pub fn manifest(&self) -> &DatasetManifest {
        &self.manifest
    }

    pub fn len(&self) -> usize {
        self.manifest.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.manifest.records.is_empty()
    }

    /// Validates and appends `records` as a new shard. Nothing is written if
    /// any record is invalid or already present.
    pub fn put_records(&mut self, records: &[ScreenshotRecord]) -> Result<usize, StoreError> {
        if records.is_empty() {
            return Ok(0);
        }
        let mut known: HashSet<&str> = self
            .manifest
            .records
            .iter()
            .map(|r| r.image_id.as_str())
            .collect();
        for r in records {
            if !known.insert(&r.image_id) {
                return Err(StoreError::DuplicateImageId(r.image_id.clone()));
            }
            self.check(r)?;
        }
        let shard = self.next_shard_name();
        jsonl::write_file(&self.root.join(&shard), self.meta.as_ref(), records)?;
        self.manifest
            .records
            .extend(records.iter().map(|r| RecordRef::for_record(r, shard.clone())));
        self.save_manifest()?;
        Ok(records.len())
    }

    /// Rewrites existing records in place, shard by shard. Nothing is written
    /// if any record is unknown or invalid.
    pub fn update_records(&mut self, records: &[ScreenshotRecord]) -> Result<usize, StoreError> {
        let mut by_shard: BTreeMap<String, HashMap<&str, &ScreenshotRecord>> = BTreeMap::new();
        for r in records {
            let entry = self
                .manifest
                .records
                .iter()
                .find(|e| e.image_id == r.image_id)
                .ok_or_else(|| StoreError::UnknownImageId(r.image_id.clone()))?;
            self.check(r)?;
            by_shard
                .entry(entry.shard.clone())
                .or_default()
                .insert(&r.image_id, r);
        }
        for (shard, updates) in &by_shard {
            let path = self.root.join(shard);
            let merged: Vec<ScreenshotRecord> = read_records(&path)?
                .into_iter()
                .map(|old| updates.get(old.image_id.as_str()).map_or(old, |new| (*new).clone()))
                .collect();
            let tmp = path.with_extension("jsonl.tmp");
            jsonl::write_file(&tmp, self.meta.as_ref(), &merged)?;
            std::fs::rename(tmp, &path)?;
            for entry in self.manifest.records.iter_mut().filter(|e| &e.shard == shard) {
                if let Some(new) = updates.get(entry.image_id.as_str()) {
                    *entry = RecordRef::for_record(new, shard.clone());
                }
            }
        }
        self.save_manifest()?;
        Ok(records.len())
    }

    fn check(&self, r: &ScreenshotRecord) -> Result<(), StoreError> {
        let violations = validate_record(r, &self.limits);
        if violations.is_empty() {
            return Ok(());
        }
        Err(StoreError::InvalidRecord {
            image_id: r.image_id.clone(),
            violations: violations
                .iter()
                .map(ToString::to_string)
                .collect::<Vec<_>>()
                .join("; "),
        })
    }

    /// Replaces the split labels, e.g. after `make_benchmark_split`.
    pub fn set_manifest(&mut self, manifest: DatasetManifest) -> Result<(), StoreError> {
        self.manifest = manifest;
        self.save_manifest()
    }

    pub fn get(&self, image_id: &str) -> Result<Option<ScreenshotRecord>, StoreError> {
        let Some(entry) = self.manifest.records.iter().find(|r| r.image_id == image_id) else {
            return Ok(None);
        };
        let shard = read_records(&self.root.join(&entry.shard))?;
        Ok(shard.into_iter().find(|r| r.image_id == image_id))
    }

    /// All records in manifest order.
    pub fn records(&self) -> Result<Vec<ScreenshotRecord>, StoreError> {
        let mut shards: HashMap<&str, HashMap<String, ScreenshotRecord>> = HashMap::new();
        for entry in &self.manifest.records {
            if !shards.contains_key(entry.shard.as_str()) {
                let recs = read_records(&self.root.join(&entry.shard))?;
                shards.insert(
                    &entry.shard,
                    recs.into_iter().map(|r| (r.image_id.clone(), r)).collect(),
                );
            }
        }
        Ok(self
            .manifest
            .records
            .iter()
            .filter_map(|e| shards.get_mut(e.shard.as_str())?.remove(&e.image_id))
            .collect())
    }

    /// Resolves a record's image_path against the store root.
    pub fn resolve_image(&self, record: &ScreenshotRecord) -> PathBuf {
        let p = Path::new(&record.image_path);
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.root.join(p)
        }
    }

    fn next_shard_name(&self) -> String {
        let used: HashSet<&str> = self.manifest.records.iter().map(|r| r.shard.as_str()).collect();
        let mut n = used.len();
        loop {
            let name = format!("records/shard-{n:04}.jsonl");
            if !used.contains(name.as_str()) && !self.root.join(&name).exists() {
                return name;
            }
            n += 1;
        }
    }

    fn save_manifest(&self) -> Result<(), StoreError> {
        let mut lines = Vec::with_capacity(self.manifest.records.len() + 1);
        lines.push(serde_json::to_value(SchemaLine {
            schema_version: self.manifest.schema_version.clone(),
        })
        .map_err(JsonlError::from)?);
        for entry in &self.manifest.records {
            lines.push(
                serde_json::to_value(IndexLine {
                    entry: entry.clone(),
                    split: self.manifest.split_labels.get(&entry.image_id).copied(),
                })
                .map_err(JsonlError::from)?,
            );
        }
        let tmp = self.root.join("manifest.jsonl.tmp");
        jsonl::write_file(&tmp, None, &lines)?;
        std::fs::rename(tmp, self.root.join("manifest.jsonl"))?;
        Ok(())
    }
}

fn load_manifest(path: &Path) -> Result<DatasetManifest, StoreError> {
    let reader = BufReader::new(File::open(path)?);
    let mut manifest = DatasetManifest {
        schema_version: String::new(),
        records: Vec::new(),
        split_labels: BTreeMap::new(),
    };
    for (idx, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let bad = |e: serde_json::Error| StoreError::Manifest {
            line: idx + 1,
            message: e.to_string(),
        };
        if idx == 0 {
            let schema: SchemaLine = serde_json::from_str(&line).map_err(bad)?;
            if schema.schema_version != SCHEMA_VERSION {
                return Err(StoreError::SchemaVersion(schema.schema_version));
            }
            manifest.schema_version = schema.schema_version;
            continue;
        }
        let entry: IndexLine = serde_json::from_str(&line).map_err(bad)?;
        if let Some(split) = entry.split {
            manifest.split_labels.insert(entry.entry.image_id.clone(), split);
        }
        manifest.records.push(entry.entry);
    }
    Ok(manifest)
}
