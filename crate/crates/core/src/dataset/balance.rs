use std::collections::{HashMap, HashSet};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use super::augment::{augment, TransformBounds, TransformDescriptor};
use super::{DatasetManifest, ImageStore, Label, ManifestRecord, Origin, Split};
use crate::error::{Error, Result};
use crate::imaging::ScreeningImage;
use crate::locator::sha256_hex;

/// Appends augmented minority-class records to `split` until both classes
/// have the same count there.
///
/// Parents are the minority originals in manifest order, cycled
/// round-robin; each child gets one transform drawn from a ChaCha stream
/// seeded with `seed`. Rendered children are written to `store` as PNG under
/// `augmented/<split>/`.
pub fn balance(
    manifest: &DatasetManifest,
    split: Split,
    seed: u64,
    store: &mut dyn ImageStore,
) -> Result<DatasetManifest> {
    let counts = manifest.counts(split);
    let (minority, deficit) = if counts.monkeypox < counts.others {
        (Label::Monkeypox, counts.others - counts.monkeypox)
    } else {
        (Label::Others, counts.monkeypox - counts.others)
    };
    if counts.get(minority) == 0 {
        return Err(Error::CannotBalance {
            split: split.to_string(),
            reason: format!("no {minority} records to augment"),
        });
    }
    if deficit == 0 {
        return Ok(manifest.clone());
    }

    let minority_records: Vec<&ManifestRecord> = manifest
        .in_split(split)
        .filter(|r| r.label == minority)
        .collect();
    let originals: Vec<&ManifestRecord> = minority_records
        .iter()
        .copied()
        .filter(|r| r.origin == Origin::Original)
        .collect();
    let parents = if originals.is_empty() {
        minority_records
    } else {
        originals
    };
    add_children(manifest, &parents, deficit, seed, store)
}

/// Appends `per_record` augmented children of each listed record. Children
/// inherit label and split from their parent.
pub fn augment_records(
    manifest: &DatasetManifest,
    ids: &[String],
    per_record: usize,
    seed: u64,
    store: &mut dyn ImageStore,
) -> Result<DatasetManifest> {
    let parents = ids
        .iter()
        .map(|id| {
            manifest
                .get(id)
                .ok_or_else(|| Error::invalid(format!("no record with id {id}")))
        })
        .collect::<Result<Vec<_>>>()?;
    if parents.is_empty() || per_record == 0 {
        return Ok(manifest.clone());
    }
    add_children(manifest, &parents, parents.len() * per_record, seed, store)
}

/// Renders `count` children, cycling over `parents` round-robin.
fn add_children(
    manifest: &DatasetManifest,
    parents: &[&ManifestRecord],
    count: usize,
    seed: u64,
    store: &mut dyn ImageStore,
) -> Result<DatasetManifest> {

    let bounds = TransformBounds::default();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut taken: HashSet<String> = manifest.records().iter().map(|r| r.id.clone()).collect();
    let mut next_suffix: HashMap<&str, usize> = HashMap::new();
    let mut plan = Vec::with_capacity(count);
    for i in 0..count {
        let parent = parents[i % parents.len()];
        let transform = TransformDescriptor::sample(&mut rng, &bounds);
        let counter = next_suffix.entry(parent.id.as_str()).or_insert(0);
        let id = loop {
            let candidate = format!("{}.aug{}", parent.id, counter);
            *counter += 1;
            if taken.insert(candidate.clone()) {
                break candidate;
            }
        };
        plan.push((parent, id, transform));
    }

    let mut decoded: HashMap<&str, ScreeningImage> = HashMap::new();
    for (parent, _, _) in &plan {
        if !decoded.contains_key(parent.id.as_str()) {
            let bytes = store
                .read(&parent.path)
                .map_err(|e| Error::io(&parent.path, e))?;
            decoded.insert(&parent.id, ScreeningImage::decode(&bytes, &parent.id)?);
        }
    }

    let rendered: Vec<Vec<u8>> = plan
        .par_iter()
        .map(|(parent, id, transform)| {
            augment(&decoded[parent.id.as_str()], transform)?
                .with_source_id(id.clone())
                .encode_png()
        })
        .collect::<Result<_>>()?;

    let mut records = manifest.records().to_vec();
    for ((parent, id, transform), png) in plan.into_iter().zip(rendered) {
        let path = format!("augmented/{}/{id}.png", parent.split);
        store.write(&path, &png).map_err(|e| Error::io(&path, e))?;
        records.push(ManifestRecord {
            id,
            path,
            label: parent.label,
            split: parent.split,
            origin: Origin::Augmented,
            parent_id: Some(parent.id.clone()),
            transform: Some(transform),
            source_tag: parent.source_tag.clone(),
            checksum: sha256_hex(&png),
        });
    }
    DatasetManifest::new(records)
}

#[cfg(test)]
mod tests {
    use super::super::test_support::originals;
    use super::super::MemoryStore;
    use super::*;

    fn pool(store: &mut MemoryStore, mp: usize, others: usize) -> DatasetManifest {
        let mut recs = originals(store, "mp", Label::Monkeypox, Split::Val, mp);
        recs.extend(originals(store, "ot", Label::Others, Split::Val, others));
        DatasetManifest::new(recs).unwrap()
    }

    #[test]
    fn evens_out_the_eval_pool() {
        let mut store = MemoryStore::default();
        let m = pool(&mut store, 132, 180);
        let out = balance(&m, Split::Val, 7, &mut store).unwrap();
        let added: Vec<_> = out.records().iter().filter(|r| r.is_augmented()).collect();
        assert_eq!(added.len(), 48);
        assert!(added.iter().all(|r| r.label == Label::Monkeypox));
        assert_eq!(out.counts(Split::Val).monkeypox, 180);
        assert_eq!(out.counts(Split::Val).others, 180);
        for r in added {
            assert!(store.read(&r.path).is_ok());
        }
    }

    #[test]
    fn cycles_parents_round_robin() {
        let mut store = MemoryStore::default();
        let m = pool(&mut store, 3, 10);
        let out = balance(&m, Split::Val, 1, &mut store).unwrap();
        let mut per_parent: HashMap<&str, usize> = HashMap::new();
        for r in out.records().iter().filter(|r| r.is_augmented()) {
            *per_parent.entry(r.parent_id.as_deref().unwrap()).or_default() += 1;
        }
        // 7 children over 3 parents: 3, 2, 2
        assert_eq!(per_parent["mp0000"], 3);
        assert_eq!(per_parent["mp0001"], 2);
        assert_eq!(per_parent["mp0002"], 2);
        assert_eq!(out.counts(Split::Val).monkeypox, 10);
    }

    #[test]
    fn balanced_split_is_untouched() {
        let mut store = MemoryStore::default();
        let m = pool(&mut store, 4, 4);
        assert_eq!(balance(&m, Split::Val, 0, &mut store).unwrap(), m);
    }

    #[test]
    fn empty_minority_cannot_balance() {
        let mut store = MemoryStore::default();
        let m = pool(&mut store, 0, 5);
        assert!(matches!(
            balance(&m, Split::Val, 0, &mut store),
            Err(Error::CannotBalance { .. })
        ));
    }

    #[test]
    fn seeded_runs_are_identical() {
        let mut s1 = MemoryStore::default();
        let m = pool(&mut s1, 5, 9);
        let mut s2 = s1.clone();
        let a = balance(&m, Split::Val, 42, &mut s1).unwrap();
        let b = balance(&m, Split::Val, 42, &mut s2).unwrap();
        assert_eq!(a, b);
        let c = balance(&m, Split::Val, 43, &mut s2).unwrap();
        assert_ne!(a, c);
    }
}
