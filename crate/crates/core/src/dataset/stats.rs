use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{ScreenshotRecord, UiType};
use crate::geometry::center;

pub const DEFAULT_HEATMAP_GRID: usize = 64;

/// Corpus statistics. Caption lengths are measured in characters of the raw
/// caption.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StatsReport {
    pub record_count: usize,
    pub element_count: usize,
    pub caption_count: usize,
    pub mean_caption_length: f64,
    pub caption_length_histogram: BTreeMap<usize, usize>,
    pub ui_type_distribution: BTreeMap<UiType, f64>,
    /// Keyed by `"<os>/<kind>"`.
    pub per_os_kind_counts: BTreeMap<String, usize>,
    pub heatmap_grid: usize,
    /// Row-major, `spatial_heatmap[row][col]`, rows top to bottom.
    pub spatial_heatmap: Vec<Vec<f64>>,
}

/// Mergeable partial statistics, so records can be folded in any grouping.
#[derive(Debug, Clone, PartialEq)]
pub struct StatsAccumulator {
    grid: usize,
    records: usize,
    elements: usize,
    caption_chars: u64,
    lengths: BTreeMap<usize, usize>,
    types: BTreeMap<UiType, usize>,
    os_kind: BTreeMap<String, usize>,
    cells: Vec<u64>,
}

impl StatsAccumulator {
    pub fn new(grid: usize) -> Self {
        let grid = grid.max(1);
        StatsAccumulator {
            grid,
            records: 0,
            elements: 0,
            caption_chars: 0,
            lengths: BTreeMap::new(),
            types: BTreeMap::new(),
            os_kind: BTreeMap::new(),
            cells: vec![0; grid * grid],
        }
    }

    pub fn add(&mut self, record: &ScreenshotRecord) {
        self.records += 1;
        let (w, h) = (record.width.max(1) as f64, record.height.max(1) as f64);
        for el in &record.elements {
            self.elements += 1;
            *self
                .os_kind
                .entry(format!("{}/{}", record.os, el.kind))
                .or_default() += 1;
            if let Some(c) = &el.caption {
                let len = c.raw.chars().count();
                self.caption_chars += len as u64;
                *self.lengths.entry(len).or_default() += 1;
                *self.types.entry(c.ui_type).or_default() += 1;
            }
            let p = center(&el.bbox);
            let col = cell_index(p.x() / w, self.grid);
            let row = cell_index(p.y() / h, self.grid);
            self.cells[row * self.grid + col] += 1;
        }
    }

    /// Combines two partials. Both must use the same grid size.
    pub fn merge(mut self, other: StatsAccumulator) -> StatsAccumulator {
        assert_eq!(self.grid, other.grid, "heatmap grids differ");
        self.records += other.records;
        self.elements += other.elements;
        self.caption_chars += other.caption_chars;
        for (k, v) in other.lengths {
            *self.lengths.entry(k).or_default() += v;
        }
        for (k, v) in other.types {
            *self.types.entry(k).or_default() += v;
        }
        for (k, v) in other.os_kind {
            *self.os_kind.entry(k).or_default() += v;
        }
        for (a, b) in self.cells.iter_mut().zip(other.cells) {
            *a += b;
        }
        self
    }

    pub fn finish(self) -> StatsReport {
        let captions: usize = self.lengths.values().sum();
        let mean = if captions == 0 {
            0.0
        } else {
            self.caption_chars as f64 / captions as f64
        };
        let ui_type_distribution = self
            .types
            .iter()
            .map(|(t, n)| (*t, *n as f64 / captions as f64))
            .collect();
        let spatial_heatmap = self
            .cells
            .chunks(self.grid)
            .map(|row| {
                row.iter()
                    .map(|&n| {
                        if self.elements == 0 {
                            0.0
                        } else {
                            n as f64 / self.elements as f64
                        }
                    })
                    .collect()
            })
            .collect();
        StatsReport {
            record_count: self.records,
            element_count: self.elements,
            caption_count: captions,
            mean_caption_length: mean,
            caption_length_histogram: self.lengths,
            ui_type_distribution,
            per_os_kind_counts: self.os_kind,
            heatmap_grid: self.grid,
            spatial_heatmap,
        }
    }
}

fn cell_index(normalized: f64, grid: usize) -> usize {
    ((normalized * grid as f64).floor().max(0.0) as usize).min(grid - 1)
}

pub fn compute_stats(records: &[ScreenshotRecord], heatmap_grid: usize) -> StatsReport {
    records
        .iter()
        .fold(StatsAccumulator::new(heatmap_grid), |mut acc, r| {
            acc.add(r);
            acc
        })
        .finish()
}
