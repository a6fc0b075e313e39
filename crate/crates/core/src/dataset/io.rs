use std::io::{BufRead, Write};
use std::path::Path;

use super::ScreenshotRecord;
use crate::jsonl::{self, ArtifactMeta, JsonlError};

/// Writes one record per line. Returns the number of records written.
pub fn write_records(records: &[ScreenshotRecord], path: &Path) -> Result<usize, JsonlError> {
    jsonl::write_file(path, None, records)
}

pub fn write_records_to<W: Write>(
    out: W,
    meta: Option<&ArtifactMeta>,
    records: &[ScreenshotRecord],
) -> Result<usize, JsonlError> {
    jsonl::write_lines(out, meta, records)
}

pub fn read_records(path: &Path) -> Result<Vec<ScreenshotRecord>, JsonlError> {
    jsonl::read_file(path)
}

pub fn read_records_from<R: BufRead>(input: R) -> Result<Vec<ScreenshotRecord>, JsonlError> {
    jsonl::read_lines(input)
}
