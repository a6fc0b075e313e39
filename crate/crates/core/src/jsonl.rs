//! Line-delimited JSON helpers shared by every on-disk format in the crate.
//!
//! Files may start with a single metadata line of the form
//! `{"_meta": {...}}`; readers skip it and writers can emit it.

use std::fs::File;
use std::io::{self, BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: io::Error,
    },
    #[error("malformed record at line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("serialization failed: {0}")]
    Encode(#[from] serde_json::Error),
}

impl JsonlError {
    fn io(path: &Path, source: io::Error) -> Self {
        JsonlError::Io {
            path: path.display().to_string(),
            source,
        }
    }

    /// 1-based line number for malformed-record errors.
    pub fn line(&self) -> Option<usize> {
        match self {
            JsonlError::Malformed { line, .. } => Some(*line),
            _ => None,
        }
    }
}

/// Provenance stamped on the first line of emitted artifacts.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArtifactMeta {
    pub tool: String,
    pub kind: String,
    pub seed: u64,
    pub config_hash: String,
}

#[derive(Serialize, Deserialize)]
struct MetaLine {
    #[serde(rename = "_meta")]
    meta: ArtifactMeta,
}

fn meta_of(line: &str) -> Option<ArtifactMeta> {
    if !line.trim_start().starts_with("{\"_meta\"") {
        return None;
    }
    serde_json::from_str::<MetaLine>(line).ok().map(|m| m.meta)
}

/// Serializes `items` one per line. Returns the number of items written.
pub fn write_lines<T: Serialize, W: Write>(
    mut out: W,
    meta: Option<&ArtifactMeta>,
    items: &[T],
) -> Result<usize, JsonlError> {
    let mut buf = Vec::new();
    if let Some(meta) = meta {
        serde_json::to_writer(&mut buf, &MetaLine { meta: meta.clone() })?;
        buf.push(b'\n');
    }
    for item in items {
        serde_json::to_writer(&mut buf, item)?;
        buf.push(b'\n');
    }
    out.write_all(&buf).map_err(|e| JsonlError::Io {
        path: "<writer>".into(),
        source: e,
    })?;
    Ok(items.len())
}

/// Parses one item per non-blank line, skipping a leading metadata line.
pub fn read_lines<T: DeserializeOwned, R: BufRead>(input: R) -> Result<Vec<T>, JsonlError> {
    Ok(read_lines_with_meta(input)?.1)
}

pub fn read_lines_with_meta<T: DeserializeOwned, R: BufRead>(
    input: R,
) -> Result<(Option<ArtifactMeta>, Vec<T>), JsonlError> {
    let mut meta = None;
    let mut items = Vec::new();
    for (idx, line) in input.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|e| JsonlError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        if line.trim().is_empty() {
            continue;
        }
        if idx == 0 {
            if let Some(m) = meta_of(&line) {
                meta = Some(m);
                continue;
            }
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonlError::Malformed {
            line: line_no,
            message: e.to_string(),
        })?;
        items.push(item);
    }
    Ok((meta, items))
}

pub fn write_file<T: Serialize>(
    path: &Path,
    meta: Option<&ArtifactMeta>,
    items: &[T],
) -> Result<usize, JsonlError> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent).map_err(|e| JsonlError::io(parent, e))?;
    }
    let file = File::create(path).map_err(|e| JsonlError::io(path, e))?;
    let mut out = BufWriter::new(file);
    let n = write_lines(&mut out, meta, items)?;
    out.flush().map_err(|e| JsonlError::io(path, e))?;
    Ok(n)
}

pub fn read_file<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|e| JsonlError::io(path, e))?;
    read_lines(BufReader::new(file))
}

/// Appends one line and flushes it. Used by append-only journals.
pub fn append_line<T: Serialize>(file: &mut File, item: &T) -> io::Result<()> {
    let mut line = serde_json::to_vec(item).map_err(io::Error::other)?;
    line.push(b'\n');
    file.write_all(&line)?;
    file.flush()
}
