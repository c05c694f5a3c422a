//! Confusion matrix and the OA / AA / Kappa summary.

use std::collections::BTreeMap;

use serde::Serialize;

use crate::error::{Error, Result};

/// Rows are ground truth, columns are predictions.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ConfusionMatrix {
    classes: usize,
    counts: Vec<u64>,
    class_names: Vec<String>,
}

impl ConfusionMatrix {
    pub fn new(classes: usize) -> Self {
        Self::with_names((0..classes).map(|i| format!("class_{}", i + 1)).collect())
    }

    pub fn with_names(class_names: Vec<String>) -> Self {
        let n = class_names.len();
        ConfusionMatrix {
            classes: n,
            counts: vec![0; n * n],
            class_names,
        }
    }

    /// Builds from a row-major `N×N` table.
    pub fn from_counts(rows: &[Vec<u64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return Err(Error::Dimension("confusion matrix must be square".into()));
        }
        let mut cm = Self::new(n);
        cm.counts = rows.concat();
        Ok(cm)
    }

    pub fn from_pairs(classes: usize, labels: &[usize], predictions: &[usize]) -> Result<Self> {
        if labels.len() != predictions.len() {
            return Err(Error::Dimension(format!(
                "{} labels vs {} predictions",
                labels.len(),
                predictions.len()
            )));
        }
        let mut cm = Self::new(classes);
        for (&y, &p) in labels.iter().zip(predictions) {
            cm.record(y, p)?;
        }
        Ok(cm)
    }

    pub fn record(&mut self, label: usize, prediction: usize) -> Result<()> {
        for v in [label, prediction] {
            if v >= self.classes {
                return Err(Error::Label {
                    label: v,
                    classes: self.classes,
                });
            }
        }
        self.counts[label * self.classes + prediction] += 1;
        Ok(())
    }

    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<()> {
        if other.classes != self.classes {
            return Err(Error::Dimension(format!(
                "cannot merge {0}×{0} into {1}×{1} confusion matrix",
                other.classes, self.classes
            )));
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn class_names(&self) -> &[String] {
        &self.class_names
    }

    pub fn get(&self, label: usize, prediction: usize) -> u64 {
        self.counts[label * self.classes + prediction]
    }

    pub fn rows(&self) -> Vec<Vec<u64>> {
        self.counts.chunks(self.classes.max(1)).map(<[u64]>::to_vec).collect()
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn metrics(&self) -> Result<Metrics> {
        let n = self.classes;
        let total = self.total();
        if total == 0 {
            return Err(Error::EmptyEvaluation);
        }
        let tf = total as f64;
        let row: Vec<u64> = (0..n).map(|i| (0..n).map(|j| self.get(i, j)).sum()).collect();
        let col: Vec<u64> = (0..n).map(|j| (0..n).map(|i| self.get(i, j)).sum()).collect();
        let trace: u64 = (0..n).map(|i| self.get(i, i)).sum();

        let recall: Vec<Option<f64>> = (0..n)
            .map(|i| (row[i] > 0).then(|| self.get(i, i) as f64 / row[i] as f64))
            .collect();
        let defined: Vec<f64> = recall.iter().flatten().copied().collect();
        let aa = defined.iter().sum::<f64>() / defined.len() as f64;

        let oa = trace as f64 / tf;
        let pe = row.iter().zip(&col).map(|(&r, &c)| r as f64 * c as f64).sum::<f64>() / (tf * tf);
        let (kappa, degenerate) = if pe == 1.0 {
            (if oa == 1.0 { 1.0 } else { 0.0 }, true)
        } else {
            ((oa - pe) / (1.0 - pe), false)
        };
        Ok(Metrics {
            oa,
            aa,
            kappa,
            expected_agreement: pe,
            kappa_degenerate: degenerate,
            per_class_recall: recall,
            skipped_classes: (0..n).filter(|&i| row[i] == 0).collect(),
            total,
        })
    }

    /// Key-sorted JSON document with the summary, per-class recalls and raw counts.
    pub fn report(&self) -> Result<serde_json::Value> {
        let m = self.metrics()?;
        let mut recalls = BTreeMap::new();
        for (name, r) in self.class_names.iter().zip(&m.per_class_recall) {
            recalls.insert(name.clone(), *r);
        }
        let skipped: Vec<&str> = m.skipped_classes.iter().map(|&i| self.class_names[i].as_str()).collect();
        // serde_json's default map is a BTreeMap, so keys come out sorted.
        Ok(serde_json::json!({
            "aa": m.aa,
            "class_names": self.class_names,
            "confusion": self.rows(),
            "kappa": m.kappa,
            "kappa_degenerate": m.kappa_degenerate,
            "oa": m.oa,
            "per_class_recall": recalls,
            "skipped_classes": skipped,
            "total": m.total,
        }))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Metrics {
    pub oa: f64,
    /// Mean recall over classes present in the ground truth.
    pub aa: f64,
    pub kappa: f64,
    pub expected_agreement: f64,
    /// Set when chance agreement is 1 and Kappa was assigned by convention.
    pub kappa_degenerate: bool,
    /// `None` for classes with no ground-truth samples.
    pub per_class_recall: Vec<Option<f64>>,
    pub skipped_classes: Vec<usize>,
    pub total: u64,
}
