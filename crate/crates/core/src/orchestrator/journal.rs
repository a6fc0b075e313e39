//! Append-only event journal. One JSON event per line, tagged by `event`.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{ImageClass, ModelVersion, OrchestratorError, Phase, Provenance, Thresholds, Verdict};
use crate::jsonl;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledImage {
    pub image_id: String,
    pub class: ImageClass,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifiedImage {
    pub image_id: String,
    pub class: ImageClass,
    pub confidence: f64,
    /// Stage 2: retained for review. Stage 3: kept for annotation.
    pub passed: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    RunStarted {
        thresholds: Thresholds,
        min_seed_per_class: usize,
        holdout_fraction: f64,
        seed: u64,
    },
    Seeded {
        training: Vec<LabeledImage>,
        holdout: Vec<LabeledImage>,
    },
    Trained {
        model_version: ModelVersion,
        round: u32,
    },
    Evaluated {
        model_version: ModelVersion,
        round: u32,
        accuracy: f64,
    },
    BatchIngested {
        round: u32,
        model_version: ModelVersion,
        results: Vec<ClassifiedImage>,
    },
    VerdictRecorded {
        round: u32,
        verdict: Verdict,
    },
    PoolUpdated {
        round: u32,
        image_id: String,
        class: ImageClass,
        provenance: Provenance,
        previous: Option<ImageClass>,
    },
    RetrainSkipped {
        round: u32,
    },
    RoundClosed {
        round: u32,
        accepted: usize,
        relabeled: usize,
        rejected: usize,
    },
    PhaseChanged {
        from: Phase,
        to: Phase,
    },
    BulkFiltered {
        model_version: ModelVersion,
        results: Vec<ClassifiedImage>,
    },
}

pub struct Journal {
    path: PathBuf,
    file: File,
}

impl std::fmt::Debug for Journal {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Journal").field("path", &self.path).finish()
    }
}

impl Journal {
    /// Opens (or creates) a journal and returns the events already in it.
    ///
    /// A final line without a trailing newline that fails to parse is a torn
    /// write from a crash: it is cut off and reading continues. Any other
    /// malformed line is an error.
    pub fn open(path: &Path) -> Result<(Journal, Vec<Event>), OrchestratorError> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new()
            .create(true)
            .read(true)
            .append(true)
            .open(path)?;
        let mut events = Vec::new();
        let mut offset = 0u64;
        let mut torn_at = None;
        let mut missing_newline = false;
        {
            let mut reader = BufReader::new(&mut file);
            let mut line_no = 0;
            let mut buf = String::new();
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf)?;
                if n == 0 {
                    break;
                }
                line_no += 1;
                let complete = buf.ends_with('\n');
                if buf.trim().is_empty() {
                    offset += n as u64;
                    continue;
                }
                match (serde_json::from_str::<Event>(buf.trim_end()), complete) {
                    (Ok(ev), true) => events.push(ev),
                    (Ok(ev), false) => {
                        events.push(ev);
                        missing_newline = true;
                    }
                    (Err(_), false) => {
                        torn_at = Some(offset);
                        break;
                    }
                    (Err(e), true) => {
                        return Err(OrchestratorError::Journal {
                            line: line_no,
                            message: e.to_string(),
                        })
                    }
                }
                offset += n as u64;
            }
        }
        if let Some(at) = torn_at {
            log::warn!("{}: dropping torn final journal line at byte {at}", path.display());
            file.set_len(at)?;
            file.seek(SeekFrom::End(0))?;
        } else if missing_newline {
            file.write_all(b"\n")?;
        }
        Ok((
            Journal {
                path: path.to_path_buf(),
                file,
            },
            events,
        ))
    }

    pub fn append(&mut self, event: &Event) -> Result<(), OrchestratorError> {
        jsonl::append_line(&mut self.file, event)?;
        Ok(())
    }

    pub fn path(&self) -> &Path {
        &self.path
    }
}

/// Reads every event from a journal file without opening it for writing.
pub fn read_journal(path: &Path) -> Result<Vec<Event>, OrchestratorError> {
    jsonl::read_file(path).map_err(|e| OrchestratorError::Journal {
        line: e.line().unwrap_or(0),
        message: e.to_string(),
    })
}
