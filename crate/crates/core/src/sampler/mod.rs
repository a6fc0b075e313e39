//! Spatially spread sampling of UI elements and set-of-mark id assignment.
//!
//! A random element is picked first. Each following cycle ranks the
//! unselected elements by center distance from a reference (by default the
//! nearest already-picked element) and draws uniformly among the
//! `farthest_pool` farthest. The number of cycles is drawn uniformly from
//! `min_cycles..=max_cycles`.

mod render;

use std::collections::HashSet;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::UiElement;
use crate::geometry::{center, euclidean, Point};

pub use render::{
    badge_rect, badge_size, outline_rect, render_marks, render_marks_encoded, MarkStyle, PixelRect,
    RenderError,
};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SampleError {
    #[error("cannot sample from an empty element list")]
    Empty,
    #[error("invalid sampler config: {0}")]
    Config(String),
    #[error("element index {0} selected more than once")]
    Duplicate(usize),
}

/// What a candidate's distance is measured from in each cycle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DistanceReference {
    /// The closest element selected so far.
    #[default]
    NearestSelected,
    /// Only the most recently selected element. Picks tend to bounce between
    /// two far regions, so coverage is worse than uniform sampling.
    LastSelected,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub min_cycles: u32,
    pub max_cycles: u32,
    pub farthest_pool: usize,
    pub reference: DistanceReference,
    pub rng_seed: u64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig {
            min_cycles: 5,
            max_cycles: 8,
            farthest_pool: 5,
            reference: DistanceReference::default(),
            rng_seed: 0,
        }
    }
}

impl SamplerConfig {
    pub fn validate(&self) -> Result<(), SampleError> {
        if self.min_cycles > self.max_cycles {
            return Err(SampleError::Config(format!(
                "min_cycles {} > max_cycles {}",
                self.min_cycles, self.max_cycles
            )));
        }
        if self.farthest_pool == 0 {
            return Err(SampleError::Config("farthest_pool must be >= 1".into()));
        }
        Ok(())
    }
}

/// Samples element indices using a generator seeded from `config.rng_seed`.
pub fn sample_elements(elements: &[UiElement], config: &SamplerConfig) -> Result<Vec<usize>, SampleError> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed);
    sample_elements_with(elements, config, &mut rng)
}

pub fn sample_elements_with<R: Rng + ?Sized>(
    elements: &[UiElement],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>, SampleError> {
    let centers: Vec<Point> = elements.iter().map(|e| center(&e.bbox)).collect();
    sample_points(&centers, config, rng)
}

/// Same procedure over bare points; returns indices in selection order.
pub fn sample_points<R: Rng + ?Sized>(
    points: &[Point],
    config: &SamplerConfig,
    rng: &mut R,
) -> Result<Vec<usize>, SampleError> {
    config.validate()?;
    if points.is_empty() {
        return Err(SampleError::Empty);
    }
    let start = rng.random_range(0..points.len());
    let cycles = rng.random_range(config.min_cycles..=config.max_cycles) as usize;

    let mut selected = vec![start];
    let mut taken = vec![false; points.len()];
    taken[start] = true;
    // Distance of every point from the reference, kept current per cycle.
    let mut dist: Vec<f64> = points.iter().map(|p| euclidean(&points[start], p)).collect();
    let mut candidates: Vec<(f64, usize)> = Vec::with_capacity(points.len());
    for _ in 0..cycles {
        candidates.clear();
        candidates.extend((0..points.len()).filter(|i| !taken[*i]).map(|i| (dist[i], i)));
        if candidates.is_empty() {
            break;
        }
        candidates.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let pool = config.farthest_pool.min(candidates.len());
        let (_, pick) = candidates[rng.random_range(0..pool)];
        taken[pick] = true;
        selected.push(pick);
        for (d, p) in dist.iter_mut().zip(points) {
            let from_pick = euclidean(&points[pick], p);
            *d = match config.reference {
                DistanceReference::NearestSelected => d.min(from_pick),
                DistanceReference::LastSelected => from_pick,
            };
        }
    }
    Ok(selected)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Mark {
    pub mark_id: u32,
    pub index: usize,
}

/// Mark ids `1..=n` in selection order.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkedSet {
    pub marks: Vec<Mark>,
}

impl MarkedSet {
    pub fn len(&self) -> usize {
        self.marks.len()
    }

    pub fn is_empty(&self) -> bool {
        self.marks.is_empty()
    }

    /// The selected elements, in mark order, with their ids filled in.
    pub fn apply(&self, elements: &[UiElement]) -> Vec<UiElement> {
        self.marks
            .iter()
            .map(|m| {
                let mut e = elements[m.index].clone();
                e.mark_id = m.mark_id;
                e
            })
            .collect()
    }
}

pub fn assign_marks(selection: &[usize]) -> Result<MarkedSet, SampleError> {
    if selection.is_empty() {
        return Err(SampleError::Empty);
    }
    let mut seen = HashSet::with_capacity(selection.len());
    for &i in selection {
        if !seen.insert(i) {
            return Err(SampleError::Duplicate(i));
        }
    }
    Ok(MarkedSet {
        marks: selection
            .iter()
            .zip(1u32..)
            .map(|(&index, mark_id)| Mark { mark_id, index })
            .collect(),
    })
}
