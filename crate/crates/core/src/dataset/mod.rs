//! Dataset construction: manifests with augmentation lineage, geometric
//! augmentation, class balancing, stratified validation/test splitting and
//! assembly of the original-only external test set.
//!
//! Manifests are line-delimited JSON, one [`ManifestRecord`] per line.
//! Every record produced by augmentation points at its parent and shares the
//! parent's label and split, so a split can never leak an image family.

mod audit;
mod augment;
mod balance;
mod split;
mod store;

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::ScreeningImage;
use crate::locator::sha256_hex;

pub use audit::{audit, AuditReport, ReferenceFigure};
pub use augment::{augment, augment_within, TransformBounds, TransformDescriptor, TransformParams};
pub use balance::{augment_records, balance};
pub use split::{originals_only_pool, split, SplitRatio};
pub use store::{FsStore, ImageStore, MemoryStore};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Label {
    Monkeypox,
    Others,
}

impl Label {
    pub const ALL: [Label; 2] = [Label::Monkeypox, Label::Others];

    /// Position of this class in the classifier's probability pair.
    pub fn index(self) -> usize {
        match self {
            Label::Monkeypox => 0,
            Label::Others => 1,
        }
    }

    pub fn from_index(i: usize) -> Option<Label> {
        Label::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Label::Monkeypox => "monkeypox",
            Label::Others => "others",
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Val,
    Test,
    External,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
            Split::External => "external",
        }
    }

    pub fn parse(s: &str) -> Result<Split> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            "external" => Ok(Split::External),
            other => Err(Error::invalid(format!("unknown split {other:?}"))),
        }
    }

    /// Whether records with this tag belong to the validation/test pool.
    pub fn in_eval_pool(self) -> bool {
        matches!(self, Split::Val | Split::Test)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Origin {
    Original,
    Augmented,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub path: String,
    pub label: Label,
    pub split: Split,
    pub origin: Origin,
    #[serde(default)]
    pub parent_id: Option<String>,
    #[serde(default)]
    pub transform: Option<TransformDescriptor>,
    #[serde(default)]
    pub source_tag: String,
    #[serde(default)]
    pub checksum: String,
}

impl ManifestRecord {
    pub fn original(
        id: impl Into<String>,
        path: impl Into<String>,
        label: Label,
        split: Split,
    ) -> Self {
        Self {
            id: id.into(),
            path: path.into(),
            label,
            split,
            origin: Origin::Original,
            parent_id: None,
            transform: None,
            source_tag: String::new(),
            checksum: String::new(),
        }
    }

    pub fn with_source_tag(mut self, tag: impl Into<String>) -> Self {
        self.source_tag = tag.into();
        self
    }

    pub fn with_checksum(mut self, checksum: impl Into<String>) -> Self {
        self.checksum = checksum.into();
        self
    }

    pub fn is_augmented(&self) -> bool {
        self.origin == Origin::Augmented
    }

    /// Reads and decodes this record's image; the image is tagged with the
    /// record id.
    pub fn load_image(&self, store: &dyn ImageStore) -> Result<ScreeningImage> {
        let bytes = store.read(&self.path).map_err(|e| Error::Decode {
            source_id: self.id.clone(),
            detail: format!("cannot read {}: {e}", self.path),
        })?;
        ScreeningImage::decode(&bytes, &self.id)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LabelCounts {
    pub monkeypox: usize,
    pub others: usize,
}

impl LabelCounts {
    pub fn get(&self, label: Label) -> usize {
        match label {
            Label::Monkeypox => self.monkeypox,
            Label::Others => self.others,
        }
    }

    fn bump(&mut self, label: Label) {
        match label {
            Label::Monkeypox => self.monkeypox += 1,
            Label::Others => self.others += 1,
        }
    }

    pub fn total(&self) -> usize {
        self.monkeypox + self.others
    }
}

/// A validated set of records: unique ids, resolvable parents, consistent
/// lineage.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DatasetManifest {
    records: Vec<ManifestRecord>,
    index: HashMap<String, usize>,
}

/// Outcome of [`ingest`].
#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    /// Groups of record ids whose files hash identically.
    pub duplicate_checksums: Vec<Vec<String>>,
}

impl DatasetManifest {
    pub fn new(records: Vec<ManifestRecord>) -> Result<Self> {
        let issues = structural_issues(&records);
        if !issues.is_empty() {
            return Err(Error::Manifest(issues.join("; ")));
        }
        Ok(Self::new_unchecked(records))
    }

    fn new_unchecked(records: Vec<ManifestRecord>) -> Self {
        let index = records
            .iter()
            .enumerate()
            .map(|(i, r)| (r.id.clone(), i))
            .collect();
        Self { records, index }
    }

    pub fn empty() -> Self {
        Self::default()
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn into_records(self) -> Vec<ManifestRecord> {
        self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn get(&self, id: &str) -> Option<&ManifestRecord> {
        self.index.get(id).map(|&i| &self.records[i])
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestRecord> {
        self.records.iter().filter(move |r| r.split == split)
    }

    /// Id of the original at the top of a record's augmentation chain.
    pub fn root_of<'a>(&'a self, id: &'a str) -> &'a str {
        let mut current = id;
        while let Some(parent) = self.get(current).and_then(|r| r.parent_id.as_deref()) {
            current = parent;
        }
        current
    }

    /// Per-split, per-label tallies.
    pub fn class_counts(&self) -> BTreeMap<Split, LabelCounts> {
        let mut out: BTreeMap<Split, LabelCounts> = BTreeMap::new();
        for r in &self.records {
            out.entry(r.split).or_default().bump(r.label);
        }
        out
    }

    pub fn counts(&self, split: Split) -> LabelCounts {
        self.class_counts().get(&split).copied().unwrap_or_default()
    }

    pub fn read_jsonl(reader: impl BufRead) -> Result<Vec<ManifestRecord>> {
        let mut out = Vec::new();
        for (lineno, line) in reader.lines().enumerate() {
            let line = line.map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
            if line.trim().is_empty() {
                continue;
            }
            let record: ManifestRecord = serde_json::from_str(&line)
                .map_err(|e| Error::Manifest(format!("line {}: {e}", lineno + 1)))?;
            out.push(record);
        }
        Ok(out)
    }

    pub fn write_jsonl(&self, mut writer: impl Write) -> Result<()> {
        for r in &self.records {
            serde_json::to_writer(&mut writer, r)?;
            writer
                .write_all(b"\n")
                .map_err(|e| Error::io("<manifest>", e))?;
        }
        Ok(())
    }

    pub fn to_jsonl(&self) -> String {
        let mut buf = Vec::new();
        self.write_jsonl(&mut buf).expect("writing to a Vec cannot fail");
        String::from_utf8(buf).expect("serde_json emits UTF-8")
    }

    /// Loads and validates a manifest file (no file-content checks).
    pub fn load(path: &Path) -> Result<Self> {
        let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
        Self::new(Self::read_jsonl(std::io::BufReader::new(file))?)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
        std::fs::write(path, self.to_jsonl()).map_err(|e| Error::io(path, e))
    }

    /// SHA-256 of the serialized manifest; identifies the dataset a model
    /// was trained on.
    pub fn checksum(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }
}

/// Lineage and uniqueness problems, one message per offending record.
fn structural_issues(records: &[ManifestRecord]) -> Vec<String> {
    let mut issues = Vec::new();
    let mut by_id: HashMap<&str, &ManifestRecord> = HashMap::new();
    for r in records {
        if r.id.is_empty() {
            issues.push(format!("record with path {:?} has an empty id", r.path));
        }
        if by_id.insert(r.id.as_str(), r).is_some() {
            issues.push(format!("{}: duplicate id", r.id));
        }
    }
    for r in records {
        let augmented = r.origin == Origin::Augmented;
        if augmented != r.parent_id.is_some() || augmented != r.transform.is_some() {
            issues.push(format!(
                "{}: origin, parent_id and transform disagree (augmented records need both, originals neither)",
                r.id
            ));
        }
        if let Some(pid) = &r.parent_id {
            match by_id.get(pid.as_str()) {
                None => issues.push(format!("{}: parent {pid} not found", r.id)),
                Some(parent) => {
                    if parent.split != r.split {
                        issues.push(format!(
                            "{}: split {} differs from parent {pid} split {}",
                            r.id, r.split, parent.split
                        ));
                    }
                    if parent.label != r.label {
                        issues.push(format!(
                            "{}: label {} differs from parent {pid} label {}",
                            r.id, r.label, parent.label
                        ));
                    }
                }
            }
        }
    }
    // parent cycles
    for r in records {
        let mut seen = 0usize;
        let mut cur = r.parent_id.as_deref();
        while let Some(pid) = cur {
            seen += 1;
            if seen > records.len() {
                issues.push(format!("{}: parent chain contains a cycle", r.id));
                break;
            }
            cur = by_id.get(pid).and_then(|p| p.parent_id.as_deref());
        }
    }
    issues
}

/// Validates a record stream against its image files.
///
/// Every record must resolve to a decodable PNG/JPEG in `store`; empty
/// checksums are filled in, non-empty ones must match the file. Identical
/// file contents are reported, not rejected.
pub fn ingest(
    records: impl IntoIterator<Item = ManifestRecord>,
    store: &dyn ImageStore,
) -> Result<Ingested> {
    let mut records: Vec<ManifestRecord> = records.into_iter().collect();
    let mut issues = structural_issues(&records);
    for r in &mut records {
        let bytes = match store.read(&r.path) {
            Ok(b) => b,
            Err(e) => {
                issues.push(format!("{}: missing file {}: {e}", r.id, r.path));
                continue;
            }
        };
        if let Err(e) = ScreeningImage::decode(&bytes, &r.id) {
            issues.push(format!("{}: {e}", r.id));
            continue;
        }
        let digest = sha256_hex(&bytes);
        if r.checksum.is_empty() {
            r.checksum = digest;
        } else if !r.checksum.eq_ignore_ascii_case(&digest) {
            issues.push(format!(
                "{}: checksum mismatch (manifest {}, file {digest})",
                r.id, r.checksum
            ));
        }
    }
    if !issues.is_empty() {
        return Err(Error::Ingest(issues));
    }
    let duplicate_checksums = duplicate_checksum_groups(&records);
    for group in &duplicate_checksums {
        tracing::warn!(ids = ?group, "identical image content under several ids");
    }
    Ok(Ingested {
        manifest: DatasetManifest::new_unchecked(records),
        duplicate_checksums,
    })
}

pub(crate) fn duplicate_checksum_groups(records: &[ManifestRecord]) -> Vec<Vec<String>> {
    let mut groups: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    for r in records.iter().filter(|r| !r.checksum.is_empty()) {
        groups.entry(&r.checksum).or_default().push(r.id.clone());
    }
    groups.into_values().filter(|g| g.len() > 1).collect()
}

/// Builds the external test set from general-scene negatives and original
/// monkeypox images. Augmented records are refused.
pub fn assemble_external(
    negatives: Vec<ManifestRecord>,
    positives: Vec<ManifestRecord>,
) -> Result<DatasetManifest> {
    let mut issues = Vec::new();
    let mut check = |r: &ManifestRecord, expected: Label| {
        if r.origin != Origin::Original || r.parent_id.is_some() || r.transform.is_some() {
            issues.push(format!("{}: external set accepts original images only", r.id));
        }
        if r.label != expected {
            issues.push(format!("{}: expected label {expected}, got {}", r.id, r.label));
        }
    };
    negatives.iter().for_each(|r| check(r, Label::Others));
    positives.iter().for_each(|r| check(r, Label::Monkeypox));
    if !issues.is_empty() {
        return Err(Error::Manifest(issues.join("; ")));
    }
    let records = negatives
        .into_iter()
        .chain(positives)
        .map(|mut r| {
            r.split = Split::External;
            r
        })
        .collect();
    DatasetManifest::new(records)
}
