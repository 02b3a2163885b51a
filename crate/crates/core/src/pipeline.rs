//! Pipeline stages on top of the library: dataset build, label traces,
//! feature tables, operation-effect counts, detector runs and correction
//! rates, plus their on-disk formats.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::AttackConfig;
use crate::binio::sha256_hex;
use crate::correction::{correct_labels, correction_rate, CorrectionResult, MatchRule};
use crate::dataset::{
    assign_splits, generate_adversarial, load_entry_image, select_normal, write_image_file, GenerationReport,
    Manifest, ManifestEntry, ManifestHeader, Origin, Split,
};
use crate::detectors::LabeledRow;
use crate::error::{CorrectionError, FeatureError, PipelineError};
use crate::features::{feature, trace, FeatureKind, FeatureVector, LabelTrace, OperationSubset};
use crate::gateway::{top5_correct, Classifier};
use crate::image::Image;
use crate::ops::{self, Operation, OperationSuite};
use crate::synth;

/// Where an artifact came from. Embedded in every file the pipeline writes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub tool_version: String,
    pub codec_id: String,
    pub suite_version: String,
    pub backend_id: String,
    pub manifest_digest: String,
    pub config_digest: String,
    pub seeds: BTreeMap<String, u64>,
}

impl Provenance {
    pub fn for_manifest(manifest: &Manifest, backend_id: &str, config_digest: &str) -> Self {
        Self {
            tool_version: crate::TOOL_VERSION.to_string(),
            codec_id: ops::CODEC_ID.to_string(),
            suite_version: ops::SUITE_VERSION.to_string(),
            backend_id: backend_id.to_string(),
            manifest_digest: manifest.digest(),
            config_digest: config_digest.to_string(),
            seeds: manifest.header.seeds.clone(),
        }
    }
}

/// Digest of any serializable configuration.
pub fn config_digest<T: Serialize>(config: &T) -> String {
    sha256_hex(&serde_json::to_vec(config).expect("config serializes"))[..16].to_string()
}

// ------------------------------------------------------------ build

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetPlan {
    /// Synthetic pool stream; keep it apart from the model's training seeds.
    pub pool_seed: u64,
    pub pool_size: usize,
    pub normal_count: usize,
    pub select_seed: u64,
    pub attacks: Vec<AttackConfig>,
    pub split_seed: u64,
    pub ratios: [f64; 3],
}

impl DatasetPlan {
    pub fn seeds(&self) -> BTreeMap<String, u64> {
        let mut seeds = BTreeMap::from([
            ("pool".to_string(), self.pool_seed),
            ("select".to_string(), self.select_seed),
            ("split".to_string(), self.split_seed),
        ]);
        for (i, a) in self.attacks.iter().enumerate() {
            seeds.insert(format!("attack{i}"), a.seed);
        }
        seeds
    }
}

#[derive(Debug)]
pub struct BuildOutput {
    pub manifest: Manifest,
    pub generation: GenerationReport,
}

/// Quantizes to 8 bits so the stored lossless file equals the attacked image.
fn quantized(img: &Image) -> Image {
    Image::from_rgb8(img.width(), img.height(), &img.to_rgb8()).expect("same dimensions")
}

/// Builds a dataset from the bundled synthetic pool: selects normals, runs
/// every attack, keeps persisted adversarials, splits by base image, and
/// writes images plus the manifest next to `manifest_path`.
pub fn build_dataset(manifest_path: &Path, plan: &DatasetPlan, backend: &dyn Classifier) -> Result<BuildOutput, PipelineError> {
    let root = manifest_dir(manifest_path);
    let pool: Vec<synth::LabeledImage> = synth::generate(plan.pool_seed, 0, plan.pool_size)
        .into_iter()
        .map(|mut s| {
            s.image = quantized(&s.image);
            s
        })
        .collect();
    let selected = select_normal(&pool, backend, plan.normal_count, plan.select_seed)?;
    let generation = generate_adversarial(&selected, backend, &plan.attacks);

    let backend_id = backend.id().to_string();
    let mut entries = Vec::new();
    for s in &selected {
        let png = ops::encode_png(&s.image.image)?;
        let path = format!("images/normal/{}.png", s.image.id);
        let sha256 = write_image_file(&root, &path, &png)?;
        let post = backend.classify_top5(&ops::decode_image(&png)?)?;
        entries.push(ManifestEntry {
            image_id: s.image.id.clone(),
            base_id: s.image.id.clone(),
            path,
            label: s.image.label,
            backend_id: backend_id.clone(),
            origin: Origin::Normal,
            original_top5: s.top5.clone(),
            post_save_top5: post,
            split: None,
            sha256,
        });
    }
    for r in generation.kept() {
        let path = format!("images/adversarial/{}.jpg", r.image_id);
        let sha256 = write_image_file(&root, &path, &r.jpeg)?;
        entries.push(ManifestEntry {
            image_id: r.image_id.clone(),
            base_id: r.base_id.clone(),
            path,
            label: r.label,
            backend_id: backend_id.clone(),
            origin: Origin::Attack { family: r.family, mode: r.mode, config_digest: r.config_digest.clone() },
            original_top5: r.original_top5.clone(),
            post_save_top5: r.post_save_top5.clone(),
            split: None,
            sha256,
        });
    }
    assign_splits(&mut entries, plan.ratios, plan.split_seed)?;
    let header = ManifestHeader::new(backend, plan.seeds(), config_digest(plan), plan.attacks.clone());
    let manifest = Manifest { header, entries };
    manifest.save(manifest_path)?;
    Ok(BuildOutput { manifest, generation })
}

pub fn manifest_dir(manifest_path: &Path) -> std::path::PathBuf {
    manifest_path
        .parent()
        .filter(|p| !p.as_os_str().is_empty())
        .map(Path::to_path_buf)
        .unwrap_or_else(|| ".".into())
}

/// Adds imported adversarials to a manifest. They join their base's split.
pub fn add_imported(
    manifest_path: &Path,
    manifest: &mut Manifest,
    report: &crate::dataset::ImportReport,
    backend_id: &str,
) -> Result<usize, PipelineError> {
    let root = manifest_dir(manifest_path);
    for imp in &report.accepted {
        let path = format!("images/imported/{}.{}", imp.image_id, imp.extension);
        let sha256 = write_image_file(&root, &path, &imp.bytes)?;
        let split = manifest.get(&imp.record.original_id).and_then(|b| b.split);
        manifest.entries.push(ManifestEntry {
            image_id: imp.image_id.clone(),
            base_id: imp.record.original_id.clone(),
            path,
            label: imp.label,
            backend_id: backend_id.to_string(),
            origin: Origin::Imported { attack: imp.record.attack.clone(), mode: imp.record.mode },
            original_top5: imp.original_top5.clone(),
            post_save_top5: imp.top5.clone(),
            split,
            sha256,
        });
    }
    manifest.save(manifest_path)?;
    Ok(report.accepted.len())
}

// ----------------------------------------------------------- traces

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceFile {
    pub provenance: Provenance,
    pub traces: Vec<LabelTrace>,
}

/// Traces every manifest entry from its stored bytes, in manifest order.
pub fn compute_traces(
    manifest_path: &Path,
    manifest: &Manifest,
    backend: &dyn Classifier,
    suite: &OperationSuite,
) -> Result<Vec<LabelTrace>, PipelineError> {
    let root = manifest_dir(manifest_path);
    manifest
        .entries
        .par_iter()
        .map(|e| {
            let img = load_entry_image(&root, e)?;
            Ok(trace(&e.image_id, &img, backend, suite)?)
        })
        .collect()
}

impl TraceFile {
    /// Provenance line, then one trace per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.provenance).expect("serializes");
        out.push('\n');
        for t in &self.traces {
            out.push_str(&serde_json::to_string(t).expect("serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, PipelineError> {
        let bad = |e: serde_json::Error| PipelineError::Format(format!("trace file: {e}"));
        let mut lines = text.lines().filter(|l| !l.is_empty());
        let provenance = serde_json::from_str(lines.next().ok_or_else(|| PipelineError::Format("empty trace file".into()))?)
            .map_err(bad)?;
        let traces = lines.map(|l| serde_json::from_str(l).map_err(bad)).collect::<Result<_, _>>()?;
        Ok(Self { provenance, traces })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(fs::write(path, self.to_jsonl())?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn get(&self, image_id: &str) -> Option<&LabelTrace> {
        self.traces.iter().find(|t| t.image_id == image_id)
    }
}

fn traces_by_id(traces: &[LabelTrace]) -> BTreeMap<&str, &LabelTrace> {
    traces.iter().map(|t| (t.image_id.as_str(), t)).collect()
}

// --------------------------------------------------------- features

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureRow {
    pub image_id: String,
    pub split: Option<Split>,
    pub is_adversarial: bool,
    /// Attack family, or `normal`.
    pub family: String,
    pub backend_id: String,
    pub features: FeatureVector,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FeatureTable {
    pub provenance: Provenance,
    pub kind: FeatureKind,
    pub subset_id: String,
    pub rows: Vec<FeatureRow>,
}

#[derive(Serialize, Deserialize)]
struct TableHeader {
    kind: FeatureKind,
    subset_id: String,
    #[serde(flatten)]
    provenance: Provenance,
}

const FIXED_COLUMNS: [&str; 6] = ["image_id", "split", "is_adversarial", "attack_family", "backend_id", "subset_id"];

/// One feature row per manifest entry that has a trace.
pub fn features_from_traces(
    manifest: &Manifest,
    traces: &[LabelTrace],
    subset: &OperationSubset,
    kind: FeatureKind,
    provenance: Provenance,
) -> Result<FeatureTable, PipelineError> {
    let by_id = traces_by_id(traces);
    let mut rows = Vec::with_capacity(manifest.entries.len());
    for e in &manifest.entries {
        let t = by_id
            .get(e.image_id.as_str())
            .ok_or_else(|| PipelineError::Format(format!("no trace for {}", e.image_id)))?;
        rows.push(FeatureRow {
            image_id: e.image_id.clone(),
            split: e.split,
            is_adversarial: e.is_adversarial(),
            family: e.origin.family_name(),
            backend_id: t.backend_id.clone(),
            features: feature(t, subset, kind)?,
        });
    }
    Ok(FeatureTable { provenance, kind, subset_id: subset.id.clone(), rows })
}

impl FeatureTable {
    /// `#`-prefixed provenance line, header row, then one row per image.
    pub fn to_csv(&self) -> String {
        let header = TableHeader { kind: self.kind, subset_id: self.subset_id.clone(), provenance: self.provenance.clone() };
        let mut out = format!("# {}\n", serde_json::to_string(&header).expect("serializes"));
        let dim = self.rows.first().map_or(0, |r| r.features.values.len());
        let mut w = csv::Writer::from_writer(Vec::new());
        let cols: Vec<String> = FIXED_COLUMNS.iter().map(|s| s.to_string()).chain((0..dim).map(|k| format!("f{k}"))).collect();
        w.write_record(&cols).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![
                r.image_id.clone(),
                r.split.map_or(String::new(), |s| s.name().to_string()),
                u8::from(r.is_adversarial).to_string(),
                r.family.clone(),
                r.backend_id.clone(),
                r.features.subset_id.clone(),
            ];
            rec.extend(r.features.values.iter().map(u32::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        out.push_str(&String::from_utf8(w.into_inner().expect("flushed")).expect("utf-8"));
        out
    }

    pub fn from_csv(text: &str) -> Result<Self, PipelineError> {
        let bad = |m: String| PipelineError::Feature(FeatureError::Format(m));
        let first = text.lines().next().unwrap_or_default();
        let json = first.strip_prefix("# ").ok_or_else(|| bad("missing provenance line".into()))?;
        let header: TableHeader = serde_json::from_str(json).map_err(|e| bad(e.to_string()))?;
        let mut r = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
        let cols = r.headers().map_err(|e| bad(e.to_string()))?.clone();
        if cols.len() < FIXED_COLUMNS.len() || cols.iter().zip(FIXED_COLUMNS).any(|(a, b)| a != b) {
            return Err(bad("unexpected header row".into()));
        }
        let mut rows = Vec::new();
        for rec in r.records() {
            let rec = rec.map_err(|e| bad(e.to_string()))?;
            let split = match &rec[1] {
                "" => None,
                s => Some(Split::parse(s).ok_or_else(|| bad(format!("unknown split {s}")))?),
            };
            let values = rec
                .iter()
                .skip(FIXED_COLUMNS.len())
                .map(|v| v.parse::<u32>().map_err(|e| bad(format!("{}: {e}", &rec[0]))))
                .collect::<Result<Vec<_>, _>>()?;
            rows.push(FeatureRow {
                image_id: rec[0].to_string(),
                split,
                is_adversarial: &rec[2] == "1",
                family: rec[3].to_string(),
                backend_id: rec[4].to_string(),
                features: FeatureVector {
                    kind: header.kind,
                    values,
                    subset_id: rec[5].to_string(),
                    backend_id: rec[4].to_string(),
                },
            });
        }
        Ok(Self { provenance: header.provenance, kind: header.kind, subset_id: header.subset_id, rows })
    }

    pub fn save(&self, path: &Path) -> Result<(), PipelineError> {
        Ok(fs::write(path, self.to_csv())?)
    }

    pub fn load(path: &Path) -> Result<Self, PipelineError> {
        Self::from_csv(&fs::read_to_string(path)?)
    }

    pub fn split_rows(&self, split: Split) -> Vec<LabeledRow> {
        self.rows
            .iter()
            .filter(|r| r.split == Some(split))
            .map(|r| LabeledRow {
                image_id: r.image_id.clone(),
                features: r.features.clone(),
                is_adversarial: r.is_adversarial,
                family: r.family.clone(),
            })
            .collect()
    }
}

/// Equal numbers of normal and adversarial rows: the larger class is
/// subsampled (seeded). Row order is preserved.
pub fn balanced(rows: &[LabeledRow], seed: u64) -> Vec<LabeledRow> {
    let adv: Vec<usize> = (0..rows.len()).filter(|&i| rows[i].is_adversarial).collect();
    let norm: Vec<usize> = (0..rows.len()).filter(|&i| !rows[i].is_adversarial).collect();
    let k = adv.len().min(norm.len());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep: Vec<usize> = [adv, norm]
        .into_iter()
        .flat_map(|class| sample(&mut rng, class.len(), k).into_iter().map(|j| class[j]).collect::<Vec<_>>())
        .collect();
    keep.sort_unstable();
    keep.into_iter().map(|i| rows[i].clone()).collect()
}

// ---------------------------------------------------------- effects

/// Counts of top-5 misclassified images per image group and operation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsReport {
    pub provenance: Provenance,
    /// `Original` followed by one column per operation.
    pub columns: Vec<String>,
    pub rows: Vec<EffectsRow>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EffectsRow {
    pub group: String,
    pub images: usize,
    pub misclassified: Vec<usize>,
}

/// The canonical suite followed by extra JPEG qualities.
pub fn suite_with_extra_jpeg(extra: &[u8]) -> OperationSuite {
    let base = OperationSuite::canonical();
    let ops = base.iter().map(|s| s.op).chain(extra.iter().map(|&quality| Operation::Jpeg { quality }));
    OperationSuite::from_operations(ops)
}

/// An image counts as misclassified when its ground truth is outside the
/// top five.
pub fn measure_effects(
    manifest_path: &Path,
    manifest: &Manifest,
    backend: &dyn Classifier,
    suite: &OperationSuite,
    provenance: Provenance,
) -> Result<EffectsReport, PipelineError> {
    let traces = compute_traces(manifest_path, manifest, backend, suite)?;
    let mut groups: BTreeMap<String, EffectsRow> = BTreeMap::new();
    for (e, t) in manifest.entries.iter().zip(&traces) {
        let g = e.origin.family_name();
        let row = groups.entry(g.clone()).or_insert_with(|| EffectsRow {
            group: g,
            images: 0,
            misclassified: vec![0; suite.len() + 1],
        });
        row.images += 1;
        for (k, top5) in std::iter::once(&t.base).chain(&t.post).enumerate() {
            row.misclassified[k] += usize::from(!top5_correct(top5, e.label));
        }
    }
    let mut rows: Vec<EffectsRow> = groups.into_values().collect();
    // normal images first, attack families after
    rows.sort_by_key(|r| (r.group != "normal", r.group.clone()));
    let columns = std::iter::once("Original".to_string()).chain(suite.iter().map(|s| s.op.to_string())).collect();
    Ok(EffectsReport { provenance, columns, rows })
}

impl EffectsReport {
    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        let mut head = vec!["group".to_string(), "images".to_string()];
        head.extend(self.columns.iter().cloned());
        w.write_record(&head).expect("in-memory write");
        for r in &self.rows {
            let mut rec = vec![r.group.clone(), r.images.to_string()];
            rec.extend(r.misclassified.iter().map(usize::to_string));
            w.write_record(&rec).expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flushed")).expect("utf-8")
    }

    /// Operations as rows, groups as columns, so the wide suite stays readable.
    pub fn to_text(&self) -> String {
        let mut s = String::from("top-5 misclassified images per operation\n");
        let _ = write!(s, "{:<14}", "operation");
        for r in &self.rows {
            let _ = write!(s, " {:>12}", format!("{}({})", r.group, r.images));
        }
        s.push('\n');
        for (k, col) in self.columns.iter().enumerate() {
            let _ = write!(s, "{col:<14}");
            for r in &self.rows {
                let _ = write!(s, " {:>12}", r.misclassified[k]);
            }
            s.push('\n');
        }
        s
    }
}

// --------------------------------------------------------- correction

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionRow {
    pub subset_id: String,
    pub adversarial_images: usize,
    /// Percentage of adversarial images whose pre-attack top-1 is restored.
    pub adversarial_rate: f64,
    pub normal_images: usize,
    /// Percentage of normal images whose own top-1 survives correction.
    pub normal_retention: f64,
    /// Images whose vote saw fewer than five distinct labels.
    pub short_votes: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorrectionReport {
    pub provenance: Provenance,
    pub rule: MatchRule,
    pub split: Option<Split>,
    pub rows: Vec<CorrectionRow>,
}

/// Correction rates per subset. References are the original (pre-attack)
/// labels for adversarial entries and the entry's own labels for normals.
pub fn correction_report(
    manifest: &Manifest,
    traces: &[LabelTrace],
    subsets: &[OperationSubset],
    rule: MatchRule,
    split: Option<Split>,
    provenance: Provenance,
) -> Result<CorrectionReport, PipelineError> {
    let by_id = traces_by_id(traces);
    let entries: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| split.is_none() || e.split == split).collect();
    let mut rows = Vec::new();
    for subset in subsets {
        let (mut adv, mut adv_ref, mut norm, mut norm_ref) = (vec![], vec![], vec![], vec![]);
        let mut short_votes = 0;
        for e in &entries {
            let t = by_id
                .get(e.image_id.as_str())
                .ok_or_else(|| PipelineError::Format(format!("no trace for {}", e.image_id)))?;
            let result: CorrectionResult = match correct_labels(t, subset) {
                Ok(r) => r,
                Err(CorrectionError::FewerThanFiveLabels { partial }) => {
                    short_votes += 1;
                    partial
                }
                Err(CorrectionError::Feature(f)) => return Err(f.into()),
                Err(e) => return Err(PipelineError::Format(e.to_string())),
            };
            if e.is_adversarial() {
                adv.push(result);
                adv_ref.push(e.original_top5.clone());
            } else {
                norm.push(result);
                norm_ref.push(e.original_top5.clone());
            }
        }
        rows.push(CorrectionRow {
            subset_id: subset.id.clone(),
            adversarial_images: adv.len(),
            adversarial_rate: correction_rate(&adv, &adv_ref, rule),
            normal_images: norm.len(),
            normal_retention: correction_rate(&norm, &norm_ref, rule),
            short_votes,
        });
    }
    Ok(CorrectionReport { provenance, rule, split, rows })
}

impl CorrectionReport {
    pub fn row(&self, subset_id: &str) -> Option<&CorrectionRow> {
        self.rows.iter().find(|r| r.subset_id == subset_id)
    }

    pub fn to_csv(&self) -> String {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["subset", "adversarial_images", "adversarial_rate", "normal_images", "normal_retention", "short_votes"])
            .expect("in-memory write");
        for r in &self.rows {
            w.write_record([
                r.subset_id.clone(),
                r.adversarial_images.to_string(),
                format!("{:.2}", r.adversarial_rate),
                r.normal_images.to_string(),
                format!("{:.2}", r.normal_retention),
                r.short_votes.to_string(),
            ])
            .expect("in-memory write");
        }
        String::from_utf8(w.into_inner().expect("flushed")).expect("utf-8")
    }

    pub fn to_text(&self) -> String {
        let mut s = format!(
            "label correction ({}, split {})\n{:<14} {:>10} {:>10} {:>10} {:>10}\n",
            self.rule.name(),
            self.split.map_or("all", Split::name),
            "subset",
            "adv n",
            "adv %",
            "normal n",
            "normal %"
        );
        for r in &self.rows {
            let _ = writeln!(
                s,
                "{:<14} {:>10} {:>10.2} {:>10} {:>10.2}",
                r.subset_id, r.adversarial_images, r.adversarial_rate, r.normal_images, r.normal_retention
            );
        }
        s
    }
}

/// Refuses inputs written by different tool versions.
pub fn check_same_version<'a>(items: impl IntoIterator<Item = (&'a str, &'a Provenance)>) -> Result<(), PipelineError> {
    let mut expected: Option<&str> = None;
    for (what, p) in items {
        match expected {
            None => expected = Some(&p.tool_version),
            Some(v) if v != p.tool_version => {
                return Err(PipelineError::VersionMismatch {
                    what: what.to_string(),
                    expected: v.to_string(),
                    found: p.tool_version.clone(),
                })
            }
            Some(_) => {}
        }
    }
    Ok(())
}

