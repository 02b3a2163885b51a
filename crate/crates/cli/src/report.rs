//! Stored reports and the summary renderer.
//!
//! Every stage report is written three ways: a JSON envelope carrying the
//! provenance, an aligned text table and a CSV table.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use advdetect_core::attacks::{AttackFamily, AttackMode};
use advdetect_core::dataset::{GenerationReport, Manifest, PairResult, Split};
use advdetect_core::desk_model::Accuracy;
use advdetect_core::detectors::EvalReport;
use advdetect_core::pipeline::{check_same_version, CorrectionReport, EffectsReport, Provenance};

use crate::failure::Failure;

pub const SUMMARY_TEXT: &str = "summary.txt";
pub const SUMMARY_DETECTION_CSV: &str = "summary-detection.csv";

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ReportFile {
    pub kind: String,
    pub provenance: Provenance,
    pub body: serde_json::Value,
}

impl ReportFile {
    pub fn new<T: Serialize>(kind: &str, provenance: Provenance, body: &T) -> Result<Self, Failure> {
        let body = serde_json::to_value(body).map_err(|e| Failure::invalid(format!("report body: {e}")))?;
        Ok(Self { kind: kind.to_string(), provenance, body })
    }

    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("serializes");
        s.push('\n');
        s
    }

    fn body<T: for<'de> Deserialize<'de>>(&self, file: &str) -> Result<T, Failure> {
        serde_json::from_value(self.body.clone()).map_err(|e| Failure::invalid(format!("{file}: {e}")))
    }
}

fn csv_string(header: &[&str], rows: impl IntoIterator<Item = Vec<String>>) -> String {
    let mut out = header.join(",");
    out.push('\n');
    for r in rows {
        out.push_str(&r.join(","));
        out.push('\n');
    }
    out
}

fn pct(x: f64) -> String {
    format!("{:.2}", 100.0 * x)
}

// -------------------------------------------------------- desk model

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DeskTraining {
    pub model: String,
    /// Train, validation and test image counts.
    pub counts: [usize; 3],
    pub epoch_losses: Vec<f64>,
    pub train: Accuracy,
    pub validation: Accuracy,
    pub test: Accuracy,
}

impl DeskTraining {
    pub fn to_text(&self) -> String {
        let mut s = format!("desk model {}\n{:<12} {:>8} {:>8} {:>8}\n", self.model, "set", "images", "top-1 %", "top-5 %");
        for (name, a) in [("train", &self.train), ("validation", &self.validation), ("test", &self.test)] {
            let _ = writeln!(s, "{name:<12} {:>8} {:>8} {:>8}", a.count, pct(a.top1), pct(a.top5));
        }
        if let Some(last) = self.epoch_losses.last() {
            let _ = writeln!(s, "final epoch loss {last:.4} after {} epochs", self.epoch_losses.len());
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let rows = [("train", &self.train), ("validation", &self.validation), ("test", &self.test)]
            .into_iter()
            .map(|(n, a)| vec![n.to_string(), a.count.to_string(), pct(a.top1), pct(a.top5)]);
        csv_string(&["set", "images", "top1_pct", "top5_pct"], rows)
    }
}

// ----------------------------------------------------------- dataset

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GenerationRow {
    pub family: AttackFamily,
    pub mode: AttackMode,
    pub attempted: usize,
    pub kept: usize,
    pub unsuccessful: usize,
    pub lost_in_persistence: usize,
    pub failed: usize,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Failed {
    pub base_id: String,
    pub family: AttackFamily,
    pub mode: AttackMode,
    pub message: String,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Generation {
    pub rows: Vec<GenerationRow>,
    pub failures: Vec<Failed>,
    /// Normal and adversarial entries per split.
    pub splits: BTreeMap<String, [usize; 2]>,
}

impl Generation {
    pub fn from_report(report: &GenerationReport, manifest: &Manifest) -> Self {
        let mut rows: BTreeMap<(AttackFamily, AttackMode), GenerationRow> = BTreeMap::new();
        let mut failures = Vec::new();
        for o in &report.outcomes {
            let row = rows.entry((o.family, o.mode)).or_insert(GenerationRow {
                family: o.family,
                mode: o.mode,
                attempted: 0,
                kept: 0,
                unsuccessful: 0,
                lost_in_persistence: 0,
                failed: 0,
            });
            row.attempted += 1;
            match &o.result {
                PairResult::Kept(_) => row.kept += 1,
                PairResult::Unsuccessful => row.unsuccessful += 1,
                PairResult::LostInPersistence => row.lost_in_persistence += 1,
                PairResult::Failed(message) => {
                    row.failed += 1;
                    failures.push(Failed { base_id: o.base_id.clone(), family: o.family, mode: o.mode, message: message.clone() });
                }
            }
        }
        let mut splits = BTreeMap::new();
        for split in Split::ALL {
            let (mut normal, mut adv) = (0, 0);
            for e in manifest.in_split(split) {
                if e.is_adversarial() {
                    adv += 1;
                } else {
                    normal += 1;
                }
            }
            splits.insert(split.name().to_string(), [normal, adv]);
        }
        Self { rows: rows.into_values().collect(), failures, splits }
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "adversarial generation\n{:<10} {:<13} {:>9} {:>6} {:>7} {:>6} {:>7} {:>8}\n",
            "attack", "mode", "attempted", "kept", "unsucc", "lost", "failed", "kept %"
        );
        for r in &self.rows {
            let rate = if r.attempted == 0 { 0.0 } else { r.kept as f64 / r.attempted as f64 };
            let _ = writeln!(
                s,
                "{:<10} {:<13} {:>9} {:>6} {:>7} {:>6} {:>7} {:>8}",
                r.family.name(),
                r.mode.name(),
                r.attempted,
                r.kept,
                r.unsuccessful,
                r.lost_in_persistence,
                r.failed,
                pct(rate)
            );
        }
        let _ = writeln!(s, "{:<10} {:>8} {:>12}", "split", "normal", "adversarial");
        for (name, [n, a]) in &self.splits {
            let _ = writeln!(s, "{name:<10} {n:>8} {a:>12}");
        }
        for f in self.failures.iter().take(5) {
            let _ = writeln!(s, "failed {} {} {}: {}", f.base_id, f.family.name(), f.mode.name(), f.message);
        }
        s
    }

    pub fn to_csv(&self) -> String {
        let rows = self.rows.iter().map(|r| {
            vec![
                r.family.name().to_string(),
                r.mode.name().to_string(),
                r.attempted.to_string(),
                r.kept.to_string(),
                r.unsuccessful.to_string(),
                r.lost_in_persistence.to_string(),
                r.failed.to_string(),
            ]
        });
        csv_string(&["attack", "mode", "attempted", "kept", "unsuccessful", "lost_in_persistence", "failed"], rows)
    }
}

// -------------------------------------------------------- detection

pub fn eval_csv(reports: &[EvalReport]) -> String {
    let rows = reports.iter().map(|r| {
        vec![
            r.detector.clone(),
            r.feature_kind.clone(),
            r.subset_id.clone(),
            r.split.clone(),
            r.count.to_string(),
            pct(r.accuracy),
            pct(r.precision),
            pct(r.recall),
            pct(r.false_positive_rate),
        ]
    });
    csv_string(
        &["detector", "feature", "subset", "split", "images", "accuracy_pct", "precision_pct", "recall_pct", "fpr_pct"],
        rows,
    )
}

/// Detection accuracy laid out with one row per detector and feature and
/// one column per subset.
fn detection_table(reports: &[EvalReport]) -> String {
    let mut subsets: Vec<&str> = reports.iter().map(|r| r.subset_id.as_str()).collect();
    subsets.sort_unstable();
    subsets.dedup();
    let mut cells: BTreeMap<(String, String, String), BTreeMap<&str, f64>> = BTreeMap::new();
    for r in reports {
        cells
            .entry((r.detector.clone(), r.feature_kind.clone(), r.split.clone()))
            .or_default()
            .insert(r.subset_id.as_str(), r.accuracy);
    }
    let mut s = format!("detection accuracy (%)\n{:<8} {:<8} {:<6}", "detector", "feature", "split");
    for sub in &subsets {
        let _ = write!(s, " {sub:>13}");
    }
    s.push('\n');
    for ((det, feat, split), row) in &cells {
        let _ = write!(s, "{det:<8} {feat:<8} {split:<6}");
        for sub in &subsets {
            let _ = match row.get(sub) {
                Some(a) => write!(s, " {:>13}", pct(*a)),
                None => write!(s, " {:>13}", "-"),
            };
        }
        s.push('\n');
    }
    s
}

// ----------------------------------------------------------- summary

/// Renders every stored report in `dir`; refuses reports from different
/// tool versions.
pub fn render(dir: &Path) -> Result<(), Failure> {
    if !dir.is_dir() {
        return Err(Failure::missing(format!("report directory {} does not exist", dir.display())));
    }
    let mut paths: Vec<_> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Failure::missing(format!("no reports in {}", dir.display())));
    }
    let mut files = Vec::new();
    for p in &paths {
        let name = p.file_name().unwrap_or_default().to_string_lossy().into_owned();
        let file: ReportFile = serde_json::from_str(&fs::read_to_string(p)?)
            .map_err(|e| Failure::invalid(format!("{name}: not a report: {e}")))?;
        files.push((name, file));
    }
    check_same_version(files.iter().map(|(n, f)| (n.as_str(), &f.provenance)))?;

    let mut text = String::new();
    let mut evaluations = Vec::new();
    for (name, f) in &files {
        match f.kind.as_str() {
            "desk-training" => text.push_str(&f.body::<DeskTraining>(name)?.to_text()),
            "dataset" => text.push_str(&f.body::<Generation>(name)?.to_text()),
            "effects" => text.push_str(&f.body::<EffectsReport>(name)?.to_text()),
            "correction" => text.push_str(&f.body::<CorrectionReport>(name)?.to_text()),
            "evaluation" => {
                evaluations.push(f.body::<EvalReport>(name)?);
                continue;
            }
            other => return Err(Failure::invalid(format!("{name}: unknown report kind `{other}`"))),
        }
        text.push('\n');
    }
    if !evaluations.is_empty() {
        text.push_str(&detection_table(&evaluations));
        fs::write(dir.join(SUMMARY_DETECTION_CSV), eval_csv(&evaluations))?;
    }
    let _ = writeln!(text, "tool {}", files[0].1.provenance.tool_version);
    fs::write(dir.join(SUMMARY_TEXT), &text)?;
    print!("{text}");
    Ok(())
}
