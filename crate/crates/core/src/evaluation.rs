//! Support-weighted precision/recall/F1 and the stage ablation grid.

use std::fmt;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::classifier::{ClassificationResult, Model};
use crate::dataset::{DatasetManifest, ImageStore, Label};
use crate::error::{Error, Result};
use crate::imaging::ScreeningImage;
use crate::pipeline::{ablation_configs, PipelineConfig, Screener};

/// Binary confusion counts, indexed `[actual][predicted]` by label index.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn from_pairs(pairs: impl IntoIterator<Item = (Label, Label)>) -> Self {
        let mut cm = Self::default();
        for (actual, predicted) in pairs {
            cm.record(actual, predicted);
        }
        cm
    }

    pub fn record(&mut self, actual: Label, predicted: Label) {
        self.counts[actual.index()][predicted.index()] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    pub fn true_positives(&self, c: Label) -> u64 {
        self.counts[c.index()][c.index()]
    }

    pub fn false_positives(&self, c: Label) -> u64 {
        let o = 1 - c.index();
        self.counts[o][c.index()]
    }

    pub fn false_negatives(&self, c: Label) -> u64 {
        let o = 1 - c.index();
        self.counts[c.index()][o]
    }

    pub fn support(&self, c: Label) -> u64 {
        self.counts[c.index()].iter().sum()
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for a in 0..2 {
            for p in 0..2 {
                self.counts[a][p] += other.counts[a][p];
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub label: Label,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvaluationSkip {
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub weighted_precision: f64,
    pub weighted_recall: f64,
    pub weighted_f1: f64,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub n_evaluated: u64,
    pub confusion: ConfusionMatrix,
    #[serde(default)]
    pub skipped: Vec<EvaluationSkip>,
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Per-class metrics averaged with weights `support / N`. A class whose
/// precision, recall or F1 has a zero denominator scores 0 on it.
pub fn weighted_metrics(cm: &ConfusionMatrix) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::Evaluation("confusion matrix is empty".into()));
    }
    let per_class: Vec<ClassMetrics> = Label::ALL
        .iter()
        .map(|&c| {
            let tp = cm.true_positives(c);
            let precision = ratio(tp, tp + cm.false_positives(c));
            let recall = ratio(tp, cm.support(c));
            let f1 = if precision + recall > 0.0 {
                2.0 * precision * recall / (precision + recall)
            } else {
                0.0
            };
            ClassMetrics {
                label: c,
                precision,
                recall,
                f1,
                support: cm.support(c),
            }
        })
        .collect();
    let weighted = |f: fn(&ClassMetrics) -> f64| {
        per_class
            .iter()
            .map(|m| m.support as f64 / n as f64 * f(m))
            .sum::<f64>()
    };
    Ok(MetricsReport {
        weighted_precision: weighted(|m| m.precision),
        weighted_recall: weighted(|m| m.recall),
        weighted_f1: weighted(|m| m.f1),
        accuracy: cm.correct() as f64 / n as f64,
        per_class,
        n_evaluated: n,
        confusion: *cm,
        skipped: Vec::new(),
    })
}

impl fmt::Display for MetricsReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "evaluated {} images ({} skipped)", self.n_evaluated, self.skipped.len())?;
        writeln!(f, "{:<12} {:>9} {:>9} {:>9} {:>8}", "class", "precision", "recall", "f1", "support")?;
        for m in &self.per_class {
            writeln!(
                f,
                "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
                m.label.as_str(),
                m.precision,
                m.recall,
                m.f1,
                m.support
            )?;
        }
        writeln!(
            f,
            "{:<12} {:>9.4} {:>9.4} {:>9.4} {:>8}",
            "weighted", self.weighted_precision, self.weighted_recall, self.weighted_f1, self.n_evaluated
        )?;
        write!(f, "accuracy {:.4}", self.accuracy)?;
        for s in &self.skipped {
            write!(f, "\nskipped {}: {}", s.id, s.reason)?;
        }
        Ok(())
    }
}

/// Anything that maps an image to a classification.
pub trait ImageClassifier: Send + Sync {
    fn model_version(&self) -> &str;
    fn classify(&self, image: &ScreeningImage) -> Result<ClassificationResult>;
}

impl ImageClassifier for Screener {
    fn model_version(&self) -> &str {
        self.model().model_version()
    }

    fn classify(&self, image: &ScreeningImage) -> Result<ClassificationResult> {
        self.screen(image)
    }
}

impl ImageClassifier for Model {
    fn model_version(&self) -> &str {
        Model::model_version(self)
    }

    fn classify(&self, image: &ScreeningImage) -> Result<ClassificationResult> {
        self.predict(image)
    }
}

enum Outcome {
    Scored(Label, Label),
    Skipped(EvaluationSkip),
}

/// Screens every record once. Records whose image cannot be read or
/// decoded are listed as skipped and left out of the counts; a classifier
/// error aborts the evaluation.
pub fn evaluate(
    classifier: &dyn ImageClassifier,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
) -> Result<MetricsReport> {
    if manifest.is_empty() {
        return Err(Error::Evaluation("manifest has no records".into()));
    }
    let outcomes = manifest
        .records()
        .par_iter()
        .map(|r| {
            let image = match r.load_image(store) {
                Ok(img) => img,
                Err(e) => {
                    return Ok(Outcome::Skipped(EvaluationSkip {
                        id: r.id.clone(),
                        reason: e.to_string(),
                    }))
                }
            };
            let result = classifier.classify(&image)?;
            Ok(Outcome::Scored(r.label, result.label))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut cm = ConfusionMatrix::default();
    let mut skipped = Vec::new();
    for o in outcomes {
        match o {
            Outcome::Scored(a, p) => cm.record(a, p),
            Outcome::Skipped(s) => skipped.push(s),
        }
    }
    if cm.total() == 0 {
        return Err(Error::Evaluation(format!(
            "no record could be evaluated ({} skipped)",
            skipped.len()
        )));
    }
    let mut report = weighted_metrics(&cm)?;
    report.skipped = skipped;
    Ok(report)
}

/// One ablation row to evaluate: a model reference (resolved by the
/// caller's factory) under a stage configuration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRun {
    pub model: String,
    pub config: PipelineConfig,
}

/// The nine-row grid: `alternate` with every stage off, then `primary`
/// under each of [`ablation_configs`].
pub fn standard_runs(primary: &str, alternate: &str) -> Vec<AblationRun> {
    std::iter::once(AblationRun {
        model: alternate.to_string(),
        config: PipelineConfig::classifier_only(),
    })
    .chain(ablation_configs().into_iter().map(|config| AblationRun {
        model: primary.to_string(),
        config,
    }))
    .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub model: String,
    pub model_version: Option<String>,
    pub restoration: bool,
    pub background_removal: bool,
    pub skin_segmentation: bool,
    pub accuracy: Option<f64>,
    pub n_evaluated: u64,
    pub skipped: usize,
    pub error: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub dataset_id: String,
    pub rows: Vec<AblationRow>,
}

impl AblationReport {
    /// Row with the highest accuracy; earlier rows win ties.
    pub fn best(&self) -> Option<&AblationRow> {
        self.rows
            .iter()
            .filter(|r| r.accuracy.is_some())
            .fold(None, |best: Option<&AblationRow>, r| match best {
                Some(b) if b.accuracy >= r.accuracy => Some(b),
                _ => Some(r),
            })
    }
}

impl fmt::Display for AblationReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let dot = |on: bool| if on { "*" } else { " " };
        writeln!(f, "dataset {}", self.dataset_id)?;
        writeln!(
            f,
            "{:<24} {:^11} {:^10} {:^9} {:>10}",
            "model", "restoration", "background", "skin seg", "accuracy %"
        )?;
        for r in &self.rows {
            let acc = match (&r.accuracy, &r.error) {
                (Some(a), _) => format!("{:.2}", a * 100.0),
                (None, Some(e)) => format!("error: {e}"),
                (None, None) => "-".into(),
            };
            writeln!(
                f,
                "{:<24} {:^11} {:^10} {:^9} {:>10}",
                r.model,
                dot(r.restoration),
                dot(r.background_removal),
                dot(r.skin_segmentation),
                acc
            )?;
        }
        Ok(())
    }
}

/// Evaluates each run on `manifest`. Rows run in parallel; a run whose
/// classifier cannot be built or evaluated gets an error marker instead of
/// an accuracy. Output order follows `runs`.
pub fn run_ablation<F>(
    runs: &[AblationRun],
    build: F,
    manifest: &DatasetManifest,
    store: &dyn ImageStore,
) -> Result<AblationReport>
where
    F: Fn(&AblationRun) -> Result<Arc<dyn ImageClassifier>> + Sync,
{
    if manifest.is_empty() {
        return Err(Error::Evaluation("manifest has no records".into()));
    }
    let rows = runs
        .par_iter()
        .map(|run| {
            let (r, b, s) = run.config.toggles();
            let mut row = AblationRow {
                model: run.model.clone(),
                model_version: None,
                restoration: r,
                background_removal: b,
                skin_segmentation: s,
                accuracy: None,
                n_evaluated: 0,
                skipped: 0,
                error: None,
            };
            let outcome = build(run).and_then(|c| {
                row.model_version = Some(c.model_version().to_string());
                evaluate(c.as_ref(), manifest, store)
            });
            match outcome {
                Ok(report) => {
                    row.accuracy = Some(report.accuracy);
                    row.n_evaluated = report.n_evaluated;
                    row.skipped = report.skipped.len();
                }
                Err(e) => row.error = Some(e.to_string()),
            }
            row
        })
        .collect();
    Ok(AblationReport {
        dataset_id: manifest.checksum(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cm(tp0: u64, fn0: u64, fp0: u64, tp1: u64) -> ConfusionMatrix {
        // rows are actual: [monkeypox -> (mp, others)], [others -> (mp, others)]
        ConfusionMatrix {
            counts: [[tp0, fn0], [fp0, tp1]],
        }
    }

    #[test]
    fn balanced_ten_ten_example() {
        let r = weighted_metrics(&cm(8, 2, 1, 9)).unwrap();
        // precision: mp 8/9, others 9/11; recall 0.8, 0.9
        let p = 0.5 * (8.0 / 9.0) + 0.5 * (9.0 / 11.0);
        assert!((r.weighted_precision - p).abs() < 1e-12);
        assert!((r.weighted_precision - 0.8535).abs() < 1e-4);
        assert!((r.weighted_recall - 0.85).abs() < 1e-12);
        let f_mp = 2.0 * (8.0 / 9.0) * 0.8 / (8.0 / 9.0 + 0.8);
        let f_ot = 2.0 * (9.0 / 11.0) * 0.9 / (9.0 / 11.0 + 0.9);
        assert!((r.weighted_f1 - 0.5 * (f_mp + f_ot)).abs() < 1e-12);
        assert!((r.weighted_f1 - 0.8496).abs() < 1e-4);
    }

    #[test]
    fn perfect_and_all_wrong() {
        let r = weighted_metrics(&cm(5, 0, 0, 7)).unwrap();
        assert_eq!((r.weighted_precision, r.weighted_recall, r.weighted_f1, r.accuracy), (1.0, 1.0, 1.0, 1.0));
        let r = weighted_metrics(&cm(0, 5, 7, 0)).unwrap();
        assert_eq!((r.weighted_precision, r.weighted_recall, r.weighted_f1, r.accuracy), (0.0, 0.0, 0.0, 0.0));
    }

    #[test]
    fn empty_matrix_is_an_error() {
        assert!(weighted_metrics(&ConfusionMatrix::default()).is_err());
    }

    #[test]
    fn standard_runs_have_nine_rows() {
        let runs = standard_runs("new", "old");
        assert_eq!(runs.len(), 9);
        assert_eq!(runs[0].model, "old");
        assert_eq!(runs[0].config.toggles(), (false, false, false));
        assert_eq!(runs[1].config.toggles(), (false, false, false));
        assert_eq!(runs[6].config.toggles(), (false, true, true));
        assert_eq!(runs[8].config.toggles(), (true, true, true));
    }
}
