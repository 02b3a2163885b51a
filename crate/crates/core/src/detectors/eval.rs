//! Detector evaluation: confusion matrix, rates and per-attack breakdown.

use std::collections::BTreeMap;
use std::fmt::Write;

use serde::{Deserialize, Serialize};

use super::DetectorModel;
use crate::error::DetectorError;
use crate::features::FeatureVector;

/// A feature row with its ground truth.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledRow {
    pub image_id: String,
    pub features: FeatureVector,
    pub is_adversarial: bool,
    /// Attack family for adversarial rows, `"normal"` otherwise.
    pub family: String,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Confusion {
    pub true_negative: usize,
    pub false_positive: usize,
    pub false_negative: usize,
    pub true_positive: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.true_negative + self.false_positive + self.false_negative + self.true_positive
    }

    pub fn correct(&self) -> usize {
        self.true_negative + self.true_positive
    }

    fn record(&mut self, truth: bool, predicted: bool) {
        match (truth, predicted) {
            (false, false) => self.true_negative += 1,
            (false, true) => self.false_positive += 1,
            (true, false) => self.false_negative += 1,
            (true, true) => self.true_positive += 1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FamilyStats {
    pub count: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub detector: String,
    pub feature_kind: String,
    pub subset_id: String,
    pub split: String,
    pub count: usize,
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub false_positive_rate: f64,
    pub confusion: Confusion,
    pub per_family: BTreeMap<String, FamilyStats>,
}

fn ratio(num: usize, den: usize) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub fn evaluate(model: &DetectorModel, rows: &[LabeledRow], split: &str) -> Result<EvalReport, DetectorError> {
    if rows.is_empty() {
        return Err(DetectorError::EmptySplit);
    }
    let mut confusion = Confusion::default();
    let mut families: BTreeMap<String, (usize, usize)> = BTreeMap::new();
    for row in rows {
        let predicted = model.predict(&row.features)?.is_adversarial();
        confusion.record(row.is_adversarial, predicted);
        let entry = families.entry(row.family.clone()).or_default();
        entry.0 += 1;
        entry.1 += usize::from(predicted == row.is_adversarial);
    }
    let c = confusion;
    Ok(EvalReport {
        detector: model.kind.name().to_string(),
        feature_kind: model.feature_kind.name().to_string(),
        subset_id: model.subset_id.clone(),
        split: split.to_string(),
        count: c.total(),
        accuracy: ratio(c.correct(), c.total()),
        precision: ratio(c.true_positive, c.true_positive + c.false_positive),
        recall: ratio(c.true_positive, c.true_positive + c.false_negative),
        false_positive_rate: ratio(c.false_positive, c.false_positive + c.true_negative),
        confusion: c,
        per_family: families
            .into_iter()
            .map(|(k, (count, correct))| (k, FamilyStats { count, correct, accuracy: ratio(correct, count) }))
            .collect(),
    })
}

impl EvalReport {
    /// Aligned plain-text rendering.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "detector {} on {} features ({}), split {}: n={}",
            self.detector, self.feature_kind, self.subset_id, self.split, self.count
        );
        let _ = writeln!(s, "  accuracy   {:>8.4}", self.accuracy);
        let _ = writeln!(s, "  precision  {:>8.4}", self.precision);
        let _ = writeln!(s, "  recall     {:>8.4}", self.recall);
        let _ = writeln!(s, "  fpr        {:>8.4}", self.false_positive_rate);
        let c = &self.confusion;
        let _ = writeln!(s, "  confusion  tn={} fp={} fn={} tp={}", c.true_negative, c.false_positive, c.false_negative, c.true_positive);
        let _ = writeln!(s, "  {:<14} {:>6} {:>8} {:>9}", "family", "count", "correct", "accuracy");
        for (name, f) in &self.per_family {
            let _ = writeln!(s, "  {:<14} {:>6} {:>8} {:>9.4}", name, f.count, f.correct, f.accuracy);
        }
        s
    }
}
