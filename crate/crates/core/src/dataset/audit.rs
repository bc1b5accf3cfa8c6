use std::collections::{BTreeMap, HashMap};
use std::fmt;

use serde::Serialize;

use super::{duplicate_checksum_groups, structural_issues, LabelCounts, ManifestRecord, Origin, Split};

/// A count the dataset was built to reproduce. Shown next to the observed
/// value for reference only; the builder trusts its inputs.
#[derive(Debug, Clone, Serialize)]
pub struct ReferenceFigure {
    pub description: &'static str,
    pub reference: usize,
    pub observed: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct AuditReport {
    pub counts: BTreeMap<Split, LabelCounts>,
    pub augmented: BTreeMap<Split, usize>,
    /// Records whose split differs from their parent's.
    pub leakage: Vec<String>,
    /// Every other lineage or uniqueness problem.
    pub issues: Vec<String>,
    pub duplicate_checksums: Vec<Vec<String>>,
    pub references: Vec<ReferenceFigure>,
}

impl AuditReport {
    pub fn is_clean(&self) -> bool {
        self.leakage.is_empty() && self.issues.is_empty()
    }
}

/// Audits raw records, which need not form a valid manifest.
pub fn audit(records: &[ManifestRecord]) -> AuditReport {
    let mut counts: BTreeMap<Split, LabelCounts> = BTreeMap::new();
    let mut augmented: BTreeMap<Split, usize> = BTreeMap::new();
    for r in records {
        counts.entry(r.split).or_default().bump(r.label);
        if r.origin == Origin::Augmented {
            *augmented.entry(r.split).or_default() += 1;
        }
    }

    let by_id: HashMap<&str, &ManifestRecord> = records.iter().map(|r| (r.id.as_str(), r)).collect();
    let leakage = records
        .iter()
        .filter_map(|r| {
            let parent = by_id.get(r.parent_id.as_deref()?)?;
            (parent.split != r.split).then(|| {
                format!("{} ({}) derives from {} ({})", r.id, r.split, parent.id, parent.split)
            })
        })
        .collect();
    let issues = structural_issues(records)
        .into_iter()
        .filter(|m| !m.contains("differs from parent") || m.contains("label"))
        .collect();

    let get = |s: Split| counts.get(&s).copied().unwrap_or_default();
    let originals = |s: Split, want: Option<super::Label>| {
        records
            .iter()
            .filter(|r| r.split == s && r.origin == Origin::Original && want.is_none_or(|l| r.label == l))
            .count()
    };
    let pool = get(Split::Val).total() + get(Split::Test).total();
    let pool_originals = originals(Split::Val, None) + originals(Split::Test, None);
    let pool_mp_originals = originals(Split::Val, Some(super::Label::Monkeypox))
        + originals(Split::Test, Some(super::Label::Monkeypox));
    let references = vec![
        ReferenceFigure {
            description: "validation/test originals",
            reference: 312,
            observed: pool_originals,
        },
        ReferenceFigure {
            description: "validation/test monkeypox originals",
            reference: 132,
            observed: pool_mp_originals,
        },
        ReferenceFigure {
            description: "validation/test augmented (balancing)",
            reference: 48,
            observed: augmented.get(&Split::Val).copied().unwrap_or(0)
                + augmented.get(&Split::Test).copied().unwrap_or(0),
        },
        ReferenceFigure {
            description: "validation/test pool",
            reference: 360,
            observed: pool,
        },
        ReferenceFigure {
            description: "validation",
            reference: 234,
            observed: get(Split::Val).total(),
        },
        ReferenceFigure {
            description: "test",
            reference: 126,
            observed: get(Split::Test).total(),
        },
        ReferenceFigure {
            description: "training total",
            reference: 4932,
            observed: get(Split::Train).total(),
        },
        ReferenceFigure {
            description: "training monkeypox",
            reference: 1818,
            observed: get(Split::Train).monkeypox,
        },
        ReferenceFigure {
            description: "training others",
            reference: 2466,
            observed: get(Split::Train).others,
        },
        ReferenceFigure {
            description: "external set",
            reference: 332,
            observed: get(Split::External).total(),
        },
    ];

    AuditReport {
        counts,
        augmented,
        leakage,
        issues,
        duplicate_checksums: duplicate_checksum_groups(records),
        references,
    }
}

impl fmt::Display for AuditReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "{:<10} {:>10} {:>8} {:>8} {:>10}", "split", "monkeypox", "others", "total", "augmented")?;
        for (split, c) in &self.counts {
            writeln!(
                f,
                "{:<10} {:>10} {:>8} {:>8} {:>10}",
                split.as_str(),
                c.monkeypox,
                c.others,
                c.total(),
                self.augmented.get(split).copied().unwrap_or(0)
            )?;
        }
        if self.leakage.is_empty() {
            writeln!(f, "leakage: none")?;
        } else {
            writeln!(f, "leakage: {} record(s)", self.leakage.len())?;
            for l in &self.leakage {
                writeln!(f, "  {l}")?;
            }
        }
        for issue in &self.issues {
            writeln!(f, "issue: {issue}")?;
        }
        if !self.duplicate_checksums.is_empty() {
            writeln!(f, "duplicate content: {} group(s)", self.duplicate_checksums.len())?;
        }
        writeln!(f, "reference counts (informational, inputs are authoritative):")?;
        for r in &self.references {
            let mark = if r.reference == r.observed { "=" } else { "≠" };
            writeln!(f, "  {:<40} {:>6} {mark} {:>6}", r.description, r.observed, r.reference)?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::super::{Label, TransformDescriptor};
    use super::*;

    #[test]
    fn reports_leakage_without_validating() {
        let p = ManifestRecord::original("p", "p.png", Label::Monkeypox, Split::Val);
        let mut c = p.clone();
        c.id = "c".into();
        c.origin = Origin::Augmented;
        c.parent_id = Some("p".into());
        c.transform = Some(TransformDescriptor::rotation(1.0, 0));
        c.split = Split::Test;
        let report = audit(&[p, c]);
        assert_eq!(report.leakage.len(), 1);
        assert!(report.issues.is_empty());
        assert!(!report.is_clean());
        let text = report.to_string();
        assert!(text.contains("leakage: 1"));
        assert!(text.contains("reference counts"));
    }
}
