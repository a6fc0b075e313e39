use std::collections::{BTreeMap, HashSet};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use super::{DatasetManifest, ElementKind, Os, Split};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SplitError {
    #[error("manifest has no records")]
    EmptyManifest,
    #[error("eval size {requested} exceeds corpus size {available}")]
    EvalTooLarge { requested: usize, available: usize },
    #[error("image_id {0} appears more than once in the manifest")]
    DuplicateImageId(String),
}

/// Labels exactly `eval_size` records as eval and the rest as train.
///
/// Records are stratified by `(os, dominant element kind)`. Each stratum
/// receives `floor(eval_size * n_s / N)` slots; the leftover slots go to the
/// strata with the largest remainders, with ties ordered by the seed. Members
/// of a stratum are drawn by a seeded shuffle.
pub fn make_benchmark_split(
    manifest: &DatasetManifest,
    eval_size: usize,
    seed: u64,
) -> Result<DatasetManifest, SplitError> {
    let total = manifest.records.len();
    if total == 0 {
        return Err(SplitError::EmptyManifest);
    }
    if eval_size > total {
        return Err(SplitError::EvalTooLarge {
            requested: eval_size,
            available: total,
        });
    }
    let mut seen = HashSet::with_capacity(total);
    for r in &manifest.records {
        if !seen.insert(r.image_id.as_str()) {
            return Err(SplitError::DuplicateImageId(r.image_id.clone()));
        }
    }

    let mut strata: BTreeMap<(Os, ElementKind), Vec<usize>> = BTreeMap::new();
    for (idx, r) in manifest.records.iter().enumerate() {
        strata.entry((r.os, r.dominant_kind)).or_default().push(idx);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut quotas: Vec<usize> = Vec::with_capacity(strata.len());
    let mut remainders: Vec<(usize, u64, usize)> = Vec::with_capacity(strata.len());
    for (pos, members) in strata.values().enumerate() {
        let scaled = eval_size * members.len();
        quotas.push(scaled / total);
        remainders.push((scaled % total, rng.random::<u64>(), pos));
    }
    let assigned: usize = quotas.iter().sum();
    remainders.sort_by(|a, b| b.0.cmp(&a.0).then(a.1.cmp(&b.1)));
    for &(_, _, pos) in remainders.iter().take(eval_size - assigned) {
        quotas[pos] += 1;
    }

    let mut out = manifest.clone();
    out.split_labels = manifest
        .records
        .iter()
        .map(|r| (r.image_id.clone(), Split::Train))
        .collect();
    for (members, quota) in strata.into_values().zip(quotas) {
        let mut members = members;
        members.shuffle(&mut rng);
        for idx in members.into_iter().take(quota) {
            out.split_labels
                .insert(manifest.records[idx].image_id.clone(), Split::Eval);
        }
    }
    Ok(out)
}
