//! Confusion matrices, per-class recall, total accuracy and UAR, and their
//! aggregation over cross-validation folds.

use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::label::{Label, LABELS, NUM_CLASSES};

/// Counts indexed `[true][predicted]` in label order.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_CLASSES]; NUM_CLASSES],
}

impl ConfusionMatrix {
    pub fn from_pairs(truth: &[Label], predicted: &[Label]) -> Result<Self> {
        if truth.len() != predicted.len() {
            return Err(Error::LengthMismatch {
                left: truth.len(),
                right: predicted.len(),
            });
        }
        let mut m = ConfusionMatrix::default();
        for (t, p) in truth.iter().zip(predicted) {
            m.add(*t, *p);
        }
        Ok(m)
    }

    pub fn add(&mut self, truth: Label, predicted: Label) {
        self.counts[truth.index()][predicted.index()] += 1;
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) {
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn support(&self, label: Label) -> u64 {
        self.counts[label.index()].iter().sum()
    }

    pub fn correct(&self) -> u64 {
        (0..NUM_CLASSES).map(|i| self.counts[i][i]).sum()
    }

    /// Recall in percent, `None` when the class has no test samples.
    pub fn recall(&self, label: Label) -> Option<f64> {
        let n = self.support(label);
        (n > 0).then(|| 100.0 * self.counts[label.index()][label.index()] as f64 / n as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("true\\pred,R,P,B,I,F\n");
        for l in LABELS {
            s.push_str(l.code());
            for c in self.counts[l.index()] {
                let _ = write!(s, ",{}", c);
            }
            s.push('\n');
        }
        s
    }
}

/// Metrics of one system on one test set. Percentages throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub system: String,
    pub fold_id: Option<u32>,
    /// Per-class recall; `null` for classes absent from the test set.
    pub recall: [Option<f64>; NUM_CLASSES],
    pub total_accuracy: f64,
    /// Mean of the defined per-class recalls.
    pub uar: f64,
    pub confusion: ConfusionMatrix,
    pub warnings: Vec<String>,
}

impl EvalReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }

    pub fn save_json(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json() + "\n").map_err(|e| Error::io(path, e))
    }
}

pub fn compute_metrics(confusion: &ConfusionMatrix, system: &str, fold_id: Option<u32>) -> Result<EvalReport> {
    let total = confusion.total();
    if total == 0 {
        return Err(Error::EmptyMatrix);
    }
    let recall = LABELS.map(|l| confusion.recall(l));
    let defined: Vec<f64> = recall.iter().flatten().copied().collect();
    let warnings = LABELS
        .iter()
        .filter(|l| recall[l.index()].is_none())
        .map(|l| format!("class {} has no test samples; recall undefined and left out of UAR", l))
        .collect();
    Ok(EvalReport {
        system: system.to_string(),
        fold_id,
        recall,
        total_accuracy: 100.0 * confusion.correct() as f64 / total as f64,
        uar: defined.iter().sum::<f64>() / defined.len() as f64,
        confusion: *confusion,
        warnings,
    })
}

/// Mean and sample standard deviation of a metric across folds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Spread {
    pub mean: f64,
    pub std: f64,
    pub n: usize,
}

impl Spread {
    fn of(values: &[f64]) -> Option<Spread> {
        if values.is_empty() {
            return None;
        }
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Some(Spread { mean, std, n })
    }
}

/// Cross-validation summary of one system.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AggregateReport {
    pub system: String,
    pub folds: usize,
    /// Fold-mean recall per class over the folds where it is defined.
    pub recall: [Option<Spread>; NUM_CLASSES],
    pub total_accuracy: Spread,
    pub uar: Spread,
    /// UAR recomputed as the mean of the fold-mean class recalls.
    pub uar_of_mean_recalls: f64,
    /// Sum of the per-fold confusion matrices.
    pub pooled_confusion: ConfusionMatrix,
    pub pooled_total_accuracy: f64,
    pub pooled_uar: f64,
    pub warnings: Vec<String>,
}

/// Averages fold reports of a single system. `expected` is the number of folds
/// the protocol defines.
pub fn aggregate(reports: &[EvalReport], expected: usize) -> Result<AggregateReport> {
    if reports.len() != expected {
        return Err(Error::CountMismatch {
            expected,
            found: reports.len(),
        });
    }
    let first = reports.first().ok_or(Error::EmptyList)?;
    if let Some(r) = reports.iter().find(|r| r.system != first.system) {
        return Err(Error::SystemMismatch(first.system.clone(), r.system.clone()));
    }
    let mut pooled = ConfusionMatrix::default();
    let mut warnings = Vec::new();
    for r in reports {
        pooled.merge(&r.confusion);
        for w in &r.warnings {
            warnings.push(match r.fold_id {
                Some(f) => format!("fold {}: {}", f, w),
                None => w.clone(),
            });
        }
    }
    let recall = LABELS.map(|l| {
        let v: Vec<f64> = reports.iter().filter_map(|r| r.recall[l.index()]).collect();
        Spread::of(&v)
    });
    let ta: Vec<f64> = reports.iter().map(|r| r.total_accuracy).collect();
    let uar: Vec<f64> = reports.iter().map(|r| r.uar).collect();
    let mean_recalls: Vec<f64> = recall.iter().flatten().map(|s| s.mean).collect();
    let pooled_report = compute_metrics(&pooled, &first.system, None)?;
    Ok(AggregateReport {
        system: first.system.clone(),
        folds: reports.len(),
        recall,
        total_accuracy: Spread::of(&ta).expect("non-empty"),
        uar: Spread::of(&uar).expect("non-empty"),
        uar_of_mean_recalls: mean_recalls.iter().sum::<f64>() / mean_recalls.len() as f64,
        pooled_confusion: pooled,
        pooled_total_accuracy: pooled_report.total_accuracy,
        pooled_uar: pooled_report.uar,
        warnings,
    })
}

/// Markdown results table with one row per system, fold means to two decimals.
pub fn render_report(systems: &[AggregateReport]) -> String {
    let mut s = String::from("| Model | R | P | B | I | F | TA | UAR(%) |\n");
    s.push_str("|---|---|---|---|---|---|---|---|\n");
    for a in systems {
        let _ = write!(s, "| {} |", a.system);
        for r in &a.recall {
            match r {
                Some(sp) => {
                    let _ = write!(s, " {:.2} |", sp.mean);
                }
                None => s.push_str(" n/a |"),
            }
        }
        let _ = writeln!(s, " {:.2} | {:.2} |", a.total_accuracy.mean, a.uar.mean);
    }
    s
}

#[cfg(test)]
mod tests {
    use super::*;
    use Label::*;

    fn confusion_with_recalls(hits: [u64; 5], support: [u64; 5]) -> ConfusionMatrix {
        let mut m = ConfusionMatrix::default();
        for i in 0..5 {
            m.counts[i][i] = hits[i];
            m.counts[i][(i + 1) % 5] = support[i] - hits[i];
        }
        m
    }

    #[test]
    fn uar_is_mean_of_recalls() {
        let m = confusion_with_recalls([10, 5, 0, 5, 10], [10; 5]);
        let r = compute_metrics(&m, "x", None).unwrap();
        assert_eq!(r.recall, [Some(100.0), Some(50.0), Some(0.0), Some(50.0), Some(100.0)]);
        assert!((r.uar - 60.0).abs() < 1e-12);
        assert!((r.total_accuracy - 60.0).abs() < 1e-12);
    }

    #[test]
    fn total_accuracy_is_prior_weighted_recall() {
        let support = [7, 13, 2, 31, 97];
        let m = confusion_with_recalls([3, 9, 1, 30, 50], support);
        let r = compute_metrics(&m, "x", None).unwrap();
        let n: u64 = support.iter().sum();
        let weighted: f64 = (0..5)
            .map(|i| support[i] as f64 / n as f64 * r.recall[i].unwrap())
            .sum();
        assert!((r.total_accuracy - weighted).abs() < 1e-12);
    }

    #[test]
    fn missing_class_is_flagged() {
        let m = ConfusionMatrix::from_pairs(&[Fluent, Fluent, Block], &[Fluent, Block, Block]).unwrap();
        let r = compute_metrics(&m, "x", Some(3)).unwrap();
        assert_eq!(r.recall[Repetition.index()], None);
        assert_eq!(r.warnings.len(), 3);
        assert!((r.uar - 75.0).abs() < 1e-12);
    }

    #[test]
    fn empty_confusion_is_an_error() {
        assert!(matches!(
            compute_metrics(&ConfusionMatrix::default(), "x", None),
            Err(Error::EmptyMatrix)
        ));
        assert!(ConfusionMatrix::from_pairs(&[Fluent], &[]).is_err());
    }

    fn fold_report(system: &str, fold: u32, uar_pct: u64) -> EvalReport {
        let m = confusion_with_recalls([uar_pct; 5], [100; 5]);
        compute_metrics(&m, system, Some(fold)).unwrap()
    }

    #[test]
    fn aggregation_over_folds() {
        let reports: Vec<EvalReport> = (0..10).map(|i| fold_report("gnb", i + 1, 50 + 2 * i as u64)).collect();
        let a = aggregate(&reports, 10).unwrap();
        assert!((a.uar.mean - 59.0).abs() < 1e-12);
        assert!((a.uar_of_mean_recalls - 59.0).abs() < 1e-12);
        assert!((a.pooled_uar - 59.0).abs() < 1e-12);
        assert_eq!(a.pooled_confusion.total(), 5000);
        assert!(matches!(aggregate(&reports[..9], 10), Err(Error::CountMismatch { .. })));
        let mut mixed = reports.clone();
        mixed[4].system = "knn".into();
        assert!(matches!(aggregate(&mixed, 10), Err(Error::SystemMismatch(..))));
    }

    #[test]
    fn rendered_table() {
        let a = aggregate(&[fold_report("W2V2 L11 + KNN", 1, 40)], 1).unwrap();
        let t = render_report(&[a]);
        assert!(t.starts_with("| Model | R | P | B | I | F | TA | UAR(%) |\n"));
        assert!(t.contains("| W2V2 L11 + KNN | 40.00 | 40.00 | 40.00 | 40.00 | 40.00 | 40.00 | 40.00 |"));
    }

    #[test]
    fn confusion_csv_and_json() {
        let m = ConfusionMatrix::from_pairs(&[Repetition, Fluent], &[Fluent, Fluent]).unwrap();
        let csv = m.to_csv();
        assert!(csv.starts_with("true\\pred,R,P,B,I,F\nR,0,0,0,0,1\n"));
        let r = compute_metrics(&m, "s", Some(1)).unwrap();
        let back: EvalReport = serde_json::from_str(&r.to_json()).unwrap();
        assert_eq!(back, r);
    }
}
