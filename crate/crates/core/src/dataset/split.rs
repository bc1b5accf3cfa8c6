use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::{DatasetManifest, Label, Origin, Split};
use crate::error::{Error, Result};

/// Validation/test proportions; must sum to one.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SplitRatio {
    pub validation: f64,
    pub test: f64,
}

impl SplitRatio {
    pub fn new(validation: f64, test: f64) -> Result<Self> {
        if !(validation.is_finite() && test.is_finite())
            || validation < 0.0
            || test < 0.0
            || (validation + test - 1.0).abs() > 1e-9
        {
            return Err(Error::invalid(format!(
                "split ratio ({validation}, {test}) must be non-negative and sum to 1"
            )));
        }
        Ok(Self { validation, test })
    }

    /// Records of one class that go to validation; halves round up.
    fn validation_share(&self, n: usize) -> usize {
        ((n as f64 * self.validation + 1e-9) + 0.5).floor().min(n as f64) as usize
    }
}

/// Reassigns the validation/test pool (every record tagged `val` or `test`)
/// into the two partitions, stratified by label.
///
/// Augmented records travel with their original, so the assignment unit is
/// an image family. Per class the validation side receives
/// `round(n_class * ratio.validation)` records, with halves going to
/// validation; an exact family subset is chosen after a seeded shuffle.
pub fn split(manifest: &DatasetManifest, ratio: SplitRatio, seed: u64) -> Result<DatasetManifest> {
    let pool: Vec<usize> = manifest
        .records()
        .iter()
        .enumerate()
        .filter(|(_, r)| r.split.in_eval_pool())
        .map(|(i, _)| i)
        .collect();
    if pool.is_empty() {
        return Err(Error::invalid("validation/test pool is empty"));
    }

    // family root -> member indices; BTreeMap keeps the pre-shuffle order fixed
    let mut families: BTreeMap<Label, BTreeMap<&str, Vec<usize>>> = BTreeMap::new();
    for &i in &pool {
        let r = &manifest.records()[i];
        families
            .entry(r.label)
            .or_default()
            .entry(manifest.root_of(&r.id))
            .or_default()
            .push(i);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut assignment = vec![None; manifest.len()];
    for (_, fams) in families {
        let mut fams: Vec<Vec<usize>> = fams.into_values().collect();
        fams.shuffle(&mut rng);
        let total: usize = fams.iter().map(Vec::len).sum();
        let target = ratio.validation_share(total);
        let chosen = pick_subset(&fams.iter().map(Vec::len).collect::<Vec<_>>(), target);
        for (fi, members) in fams.iter().enumerate() {
            let tag = if chosen[fi] { Split::Val } else { Split::Test };
            for &i in members {
                assignment[i] = Some(tag);
            }
        }
    }

    let records = manifest
        .records()
        .iter()
        .zip(assignment)
        .map(|(r, tag)| {
            let mut r = r.clone();
            if let Some(tag) = tag {
                r.split = tag;
            }
            r
        })
        .collect();
    DatasetManifest::new(records)
}

/// Chooses items whose sizes sum to `target`, or to the closest reachable
/// sum below it. Earlier items are preferred.
fn pick_subset(sizes: &[usize], target: usize) -> Vec<bool> {
    // via[s] = index of the item that first made sum s reachable
    let mut via: Vec<Option<usize>> = vec![None; target + 1];
    let mut reachable = vec![false; target + 1];
    reachable[0] = true;
    for (i, &size) in sizes.iter().enumerate() {
        if size == 0 || size > target {
            continue;
        }
        for s in (size..=target).rev() {
            if reachable[s - size] && !reachable[s] {
                reachable[s] = true;
                via[s] = Some(i);
            }
        }
    }
    let mut s = (0..=target).rev().find(|&s| reachable[s]).unwrap_or(0);
    let mut chosen = vec![false; sizes.len()];
    while s > 0 {
        let i = via[s].expect("reachable sums record their item");
        chosen[i] = true;
        s -= sizes[i];
    }
    chosen
}

/// Drops augmented records from the validation/test pool, for evaluating
/// on original images only.
pub fn originals_only_pool(manifest: &DatasetManifest) -> Result<DatasetManifest> {
    DatasetManifest::new(
        manifest
            .records()
            .iter()
            .filter(|r| !(r.split.in_eval_pool() && r.origin == Origin::Augmented))
            .cloned()
            .collect(),
    )
}
