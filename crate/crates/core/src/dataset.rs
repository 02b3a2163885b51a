//! Dataset manifest and the generation procedure: pick correctly classified
//! normal images, attack them, keep only adversarials that survive a JPEG
//! quality-100 save, split by base image, and ingest external adversarials.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::attacks::{persist_and_reclassify, run_attack, AttackConfig, AttackFamily, AttackMode, PerturbationNorms};
use crate::binio::{sha256, sha256_hex};
use crate::error::DatasetError;
use crate::gateway::{top5_correct, Classifier, Top5};
use crate::image::Image;
use crate::ops;
use crate::synth::LabeledImage;

pub const MANIFEST_FORMAT: &str = "advdetect-manifest";
pub const MANIFEST_VERSION: u32 = 1;
/// Sidecar file listing externally generated adversarial images.
pub const SIDECAR_NAME: &str = "metadata.jsonl";
pub const DEFAULT_RATIOS: [f64; 3] = [7.0, 1.5, 1.5];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub format: String,
    pub version: u32,
    pub tool_version: String,
    pub codec_id: String,
    pub suite_version: String,
    pub backend_id: String,
    pub backend_protocol: String,
    pub seeds: BTreeMap<String, u64>,
    /// Digest of the build configuration that produced the manifest.
    pub config_digest: String,
    pub attack_configs: Vec<AttackConfig>,
}

impl ManifestHeader {
    pub fn new(backend: &dyn Classifier, seeds: BTreeMap<String, u64>, config_digest: String, attack_configs: Vec<AttackConfig>) -> Self {
        Self {
            format: MANIFEST_FORMAT.to_string(),
            version: MANIFEST_VERSION,
            tool_version: crate::TOOL_VERSION.to_string(),
            codec_id: ops::CODEC_ID.to_string(),
            suite_version: ops::SUITE_VERSION.to_string(),
            backend_id: backend.id().to_string(),
            backend_protocol: backend.protocol_version(),
            seeds,
            config_digest,
            attack_configs,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum Origin {
    Normal,
    Attack { family: AttackFamily, mode: AttackMode, config_digest: String },
    Imported { attack: String, mode: AttackMode },
}

impl Origin {
    pub fn is_adversarial(&self) -> bool {
        !matches!(self, Origin::Normal)
    }

    /// Group name used for per-family statistics.
    pub fn family_name(&self) -> String {
        match self {
            Origin::Normal => "normal".to_string(),
            Origin::Attack { family, .. } => family.name().to_string(),
            Origin::Imported { attack, .. } => format!("imported:{attack}"),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Eval,
}

impl Split {
    pub const ALL: [Split; 3] = [Split::Train, Split::Dev, Split::Eval];

    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Dev => "dev",
            Split::Eval => "eval",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|x| x.name() == s)
    }
}

impl fmt::Display for Split {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub image_id: String,
    /// The normal image this entry derives from; its own id for normals.
    pub base_id: String,
    /// Relative to the manifest's directory, `/`-separated.
    pub path: String,
    pub label: u32,
    pub backend_id: String,
    pub origin: Origin,
    /// Labels of the base image before any attack.
    pub original_top5: Top5,
    /// Labels of the stored file as reloaded from disk.
    pub post_save_top5: Top5,
    pub split: Option<Split>,
    pub sha256: String,
}

impl ManifestEntry {
    pub fn is_adversarial(&self) -> bool {
        self.origin.is_adversarial()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Manifest {
    pub header: ManifestHeader,
    pub entries: Vec<ManifestEntry>,
}

impl Manifest {
    /// Header line followed by one entry per line.
    pub fn to_jsonl(&self) -> String {
        let mut out = serde_json::to_string(&self.header).expect("header serializes");
        out.push('\n');
        for e in &self.entries {
            out.push_str(&serde_json::to_string(e).expect("entry serializes"));
            out.push('\n');
        }
        out
    }

    pub fn from_jsonl(text: &str) -> Result<Self, DatasetError> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let first = lines.next().ok_or_else(|| DatasetError::Format("empty manifest".into()))?;
        let header: ManifestHeader =
            serde_json::from_str(first).map_err(|e| DatasetError::Format(format!("header: {e}")))?;
        if header.format != MANIFEST_FORMAT || header.version != MANIFEST_VERSION {
            return Err(DatasetError::Format(format!(
                "unsupported manifest {} v{}",
                header.format, header.version
            )));
        }
        let entries = lines
            .enumerate()
            .map(|(i, l)| {
                serde_json::from_str(l).map_err(|e| DatasetError::Format(format!("entry {}: {e}", i + 1)))
            })
            .collect::<Result<Vec<ManifestEntry>, _>>()?;
        let mut seen = BTreeSet::new();
        if let Some(dup) = entries.iter().find(|e| !seen.insert(e.image_id.as_str())) {
            return Err(DatasetError::Format(format!("duplicate image id {}", dup.image_id)));
        }
        Ok(Self { header, entries })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DatasetError> {
        Ok(fs::write(path, self.to_jsonl())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DatasetError> {
        Self::from_jsonl(&fs::read_to_string(path)?)
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.to_jsonl().as_bytes())
    }

    pub fn get(&self, image_id: &str) -> Option<&ManifestEntry> {
        self.entries.iter().find(|e| e.image_id == image_id)
    }

    pub fn in_split(&self, split: Split) -> impl Iterator<Item = &ManifestEntry> {
        self.entries.iter().filter(move |e| e.split == Some(split))
    }

    /// Every entry whose base id lands in more than one split.
    pub fn split_conflicts(&self) -> Vec<String> {
        let mut seen: BTreeMap<&str, BTreeSet<Option<Split>>> = BTreeMap::new();
        for e in &self.entries {
            seen.entry(&e.base_id).or_default().insert(e.split);
        }
        seen.into_iter().filter(|(_, s)| s.len() > 1).map(|(b, _)| b.to_string()).collect()
    }
}

/// The adversarial keep rule: the original top-1 must be gone from the
/// stored image's top five.
pub fn still_adversarial(original_top1: u32, post: &Top5) -> bool {
    !post.contains(original_top1)
}

// ---------------------------------------------------------------- files

pub fn resolve(root: &Path, entry: &ManifestEntry) -> PathBuf {
    root.join(&entry.path)
}

/// Writes `bytes` under `root` and returns the content digest.
pub fn write_image_file(root: &Path, rel: &str, bytes: &[u8]) -> Result<String, DatasetError> {
    let path = root.join(rel);
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir)?;
    }
    fs::write(&path, bytes)?;
    Ok(sha256_hex(bytes))
}

/// Reads an entry's file, checking its stored digest.
pub fn load_entry_image(root: &Path, entry: &ManifestEntry) -> Result<Image, DatasetError> {
    let bytes = fs::read(resolve(root, entry))?;
    if sha256_hex(&bytes) != entry.sha256 {
        return Err(DatasetError::DigestMismatch(entry.image_id.clone()));
    }
    Ok(ops::decode_image(&bytes)?)
}

/// Re-classifies an entry from its stored bytes. Adversarial entries must
/// still exclude the original top-1; normal entries must still contain the
/// ground truth.
pub fn verify_entry(root: &Path, entry: &ManifestEntry, backend: &dyn Classifier) -> Result<bool, DatasetError> {
    let img = load_entry_image(root, entry)?;
    let top5 = backend.classify_top5(&img)?;
    Ok(if entry.is_adversarial() {
        still_adversarial(entry.original_top5.top1(), &top5)
    } else {
        top5_correct(&top5, entry.label)
    })
}

// ------------------------------------------------------------ selection

#[derive(Debug, Clone, PartialEq)]
pub struct SelectedImage {
    pub image: LabeledImage,
    pub top5: Top5,
}

/// Seeded uniform choice of `count` images whose ground truth is in the
/// backend's top five. The result keeps pool order.
pub fn select_normal(
    pool: &[LabeledImage],
    backend: &dyn Classifier,
    count: usize,
    seed: u64,
) -> Result<Vec<SelectedImage>, DatasetError> {
    if count == 0 {
        return Ok(Vec::new());
    }
    let labels = pool
        .par_iter()
        .map(|s| backend.classify_top5(&s.image))
        .collect::<Result<Vec<_>, _>>()?;
    let eligible: Vec<usize> = (0..pool.len()).filter(|&i| top5_correct(&labels[i], pool[i].label)).collect();
    if eligible.len() < count {
        return Err(DatasetError::InsufficientCorrectImages { needed: count, available: eligible.len() });
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut picked: Vec<usize> = sample(&mut rng, eligible.len(), count).into_iter().map(|k| eligible[k]).collect();
    picked.sort_unstable();
    Ok(picked
        .into_iter()
        .map(|i| SelectedImage { image: pool[i].clone(), top5: labels[i].clone() })
        .collect())
}

// ----------------------------------------------------------- generation

#[derive(Debug, Clone, PartialEq)]
pub struct AdversarialRecord {
    pub image_id: String,
    pub base_id: String,
    pub label: u32,
    pub family: AttackFamily,
    pub mode: AttackMode,
    /// Digest of the configured attack, before the per-image seed.
    pub config_digest: String,
    pub iterations_used: usize,
    pub norms: PerturbationNorms,
    pub original_top5: Top5,
    pub pre_save_top5: Top5,
    pub post_save_top5: Top5,
    /// The quality-100 JPEG exactly as stored.
    pub jpeg: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PairResult {
    Kept(Box<AdversarialRecord>),
    /// The attack did not meet its criterion within budget.
    Unsuccessful,
    /// Succeeded in memory but not after the save and reload.
    LostInPersistence,
    Failed(String),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairOutcome {
    pub base_id: String,
    pub family: AttackFamily,
    pub mode: AttackMode,
    pub result: PairResult,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct GenerationReport {
    pub outcomes: Vec<PairOutcome>,
}

impl GenerationReport {
    pub fn kept(&self) -> impl Iterator<Item = &AdversarialRecord> {
        self.outcomes.iter().filter_map(|o| match &o.result {
            PairResult::Kept(r) => Some(r.as_ref()),
            _ => None,
        })
    }

    pub fn attempted(&self) -> usize {
        self.outcomes.len()
    }

    pub fn failures(&self) -> impl Iterator<Item = &PairOutcome> {
        self.outcomes.iter().filter(|o| matches!(o.result, PairResult::Failed(_)))
    }

    /// Kept count over attempts for one family and mode.
    pub fn persisted_rate(&self, family: AttackFamily, mode: AttackMode) -> Option<f64> {
        let group: Vec<_> = self.outcomes.iter().filter(|o| o.family == family && o.mode == mode).collect();
        if group.is_empty() {
            return None;
        }
        let kept = group.iter().filter(|o| matches!(o.result, PairResult::Kept(_))).count();
        Some(kept as f64 / group.len() as f64)
    }
}

/// Per-image attack seed derived from the configured seed and the base id,
/// so results do not depend on scheduling or selection order.
pub fn pair_seed(config_seed: u64, base_id: &str) -> u64 {
    let d = sha256(base_id.as_bytes());
    config_seed ^ u64::from_le_bytes(d[..8].try_into().expect("8 bytes"))
}

pub fn adversarial_id(base_id: &str, cfg: &AttackConfig) -> String {
    let mode = match cfg.mode {
        AttackMode::Targeted => "t",
        AttackMode::NonTargeted => "nt",
    };
    format!("{base_id}.{}-{mode}-{}", cfg.family.name(), &cfg.digest()[..8])
}

fn attack_pair(img: &SelectedImage, cfg: &AttackConfig, backend: &dyn Classifier) -> PairResult {
    let mut seeded = cfg.clone();
    seeded.seed = pair_seed(cfg.seed, &img.image.id);
    let outcome = match run_attack(&seeded, backend, &img.image.image) {
        Ok(o) => o,
        Err(e) => return PairResult::Failed(e.to_string()),
    };
    let Some(adv) = outcome.adversarial.as_ref().filter(|_| outcome.success) else {
        return PairResult::Unsuccessful;
    };
    let persisted = match persist_and_reclassify(adv, backend) {
        Ok(p) => p,
        Err(e) => return PairResult::Failed(e.to_string()),
    };
    let original_top1 = outcome.original_top5.top1();
    if !(outcome.criterion.holds(&persisted.top5) && still_adversarial(original_top1, &persisted.top5)) {
        return PairResult::LostInPersistence;
    }
    PairResult::Kept(Box::new(AdversarialRecord {
        image_id: adversarial_id(&img.image.id, cfg),
        base_id: img.image.id.clone(),
        label: img.image.label,
        family: cfg.family,
        mode: cfg.mode,
        config_digest: cfg.digest(),
        iterations_used: outcome.iterations_used,
        norms: outcome.norms,
        original_top5: outcome.original_top5,
        pre_save_top5: outcome.final_top5,
        post_save_top5: persisted.top5,
        jpeg: persisted.jpeg,
    }))
}

/// Runs every configured attack on every selected image. Individual failures
/// are recorded and never abort the batch. Outcomes are image-major, in
/// input order.
pub fn generate_adversarial(
    selected: &[SelectedImage],
    backend: &dyn Classifier,
    configs: &[AttackConfig],
) -> GenerationReport {
    let pairs: Vec<(&SelectedImage, &AttackConfig)> =
        selected.iter().flat_map(|s| configs.iter().map(move |c| (s, c))).collect();
    let outcomes = pairs
        .par_iter()
        .map(|&(img, cfg)| PairOutcome {
            base_id: img.image.id.clone(),
            family: cfg.family,
            mode: cfg.mode,
            result: attack_pair(img, cfg, backend),
        })
        .collect();
    GenerationReport { outcomes }
}

// ---------------------------------------------------------------- split

/// Base images per split: `round(n r_train)`, `round(n r_dev)`, remainder.
pub fn split_quotas(bases: usize, ratios: [f64; 3]) -> Result<[usize; 3], DatasetError> {
    let total: f64 = ratios.iter().sum();
    let infeasible = DatasetError::RatioInfeasible { bases };
    if !(total > 0.0) || ratios.iter().any(|r| !(*r > 0.0)) {
        return Err(infeasible);
    }
    let n = bases as f64;
    let train = (n * ratios[0] / total).round() as usize;
    let dev = (n * ratios[1] / total).round() as usize;
    if train == 0 || dev == 0 || train + dev >= bases {
        return Err(infeasible);
    }
    Ok([train, dev, bases - train - dev])
}

/// Assigns every entry a split so that all entries sharing a base id land
/// together. Bases are placed greedily (largest groups first, seeded order
/// within a size) into the split that keeps each origin family closest to
/// its proportional share.
pub fn assign_splits(entries: &mut [ManifestEntry], ratios: [f64; 3], seed: u64) -> Result<[usize; 3], DatasetError> {
    let mut groups: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    for (i, e) in entries.iter().enumerate() {
        groups.entry(e.base_id.clone()).or_default().push(i);
    }
    let quotas = split_quotas(groups.len(), ratios)?;
    let n = groups.len() as f64;

    let mut families: BTreeMap<String, usize> = BTreeMap::new();
    for e in entries.iter() {
        *families.entry(e.origin.family_name()).or_default() += 1;
    }
    let fam_index: BTreeMap<&str, usize> = families.keys().enumerate().map(|(i, k)| (k.as_str(), i)).collect();
    let targets: Vec<[f64; 3]> = families
        .values()
        .map(|&t| [0, 1, 2].map(|s| t as f64 * quotas[s] as f64 / n))
        .collect();

    let mut order: Vec<(String, Vec<usize>)> = groups.into_iter().collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    order.sort_by_key(|(_, members)| std::cmp::Reverse(members.len()));

    let mut filled = [0usize; 3];
    let mut counts = vec![[0usize; 3]; families.len()];
    for (_, members) in &order {
        let mut add = vec![0usize; families.len()];
        for &i in members {
            add[fam_index[entries[i].origin.family_name().as_str()]] += 1;
        }
        let cost = |s: usize| -> f64 {
            add.iter()
                .enumerate()
                .filter(|(_, &a)| a > 0)
                .map(|(f, &a)| {
                    let after = (counts[f][s] + a) as f64 - targets[f][s];
                    let before = counts[f][s] as f64 - targets[f][s];
                    after * after - before * before
                })
                .sum()
        };
        let best = (0..3)
            .filter(|&s| filled[s] < quotas[s])
            .min_by(|&a, &b| {
                cost(a).total_cmp(&cost(b)).then_with(|| {
                    // emptier split first, measured against its quota
                    let fa = filled[a] as f64 / quotas[a] as f64;
                    let fb = filled[b] as f64 / quotas[b] as f64;
                    fa.total_cmp(&fb)
                })
            })
            .expect("quotas sum to the number of bases");
        filled[best] += 1;
        for (f, &a) in add.iter().enumerate() {
            counts[f][best] += a;
        }
        for &i in members {
            entries[i].split = Some(Split::ALL[best]);
        }
    }
    Ok(quotas)
}

// --------------------------------------------------------------- import

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SidecarRecord {
    /// File name inside the import directory.
    pub file: String,
    /// Image id of the normal manifest entry the attack started from.
    pub original_id: String,
    pub attack: String,
    pub mode: AttackMode,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ImportedImage {
    pub record: SidecarRecord,
    pub image_id: String,
    pub bytes: Vec<u8>,
    pub extension: String,
    pub label: u32,
    pub original_top5: Top5,
    pub top5: Top5,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Skipped {
    pub file: String,
    pub reason: String,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct ImportReport {
    pub accepted: Vec<ImportedImage>,
    pub skipped: Vec<Skipped>,
}

fn image_extension(path: &Path) -> Option<String> {
    let ext = path.extension()?.to_str()?.to_ascii_lowercase();
    matches!(ext.as_str(), "png" | "jpg" | "jpeg").then_some(ext)
}

/// Ingests adversarial images produced elsewhere. Each must name a normal
/// entry of `manifest` as its original and must pass the same keep rule as
/// generated attacks; anything else is skipped with a reason.
pub fn import_external(dir: &Path, manifest: &Manifest, backend: &dyn Classifier) -> Result<ImportReport, DatasetError> {
    let mut files: Vec<PathBuf> = fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.is_file() && image_extension(p).is_some())
        .collect();
    files.sort();
    let sidecar = dir.join(SIDECAR_NAME);
    if !sidecar.exists() {
        if files.is_empty() {
            return Ok(ImportReport::default());
        }
        return Err(DatasetError::MetadataMissing(format!("{} not found", sidecar.display())));
    }
    let mut records = Vec::new();
    for (n, line) in fs::read_to_string(&sidecar)?.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: SidecarRecord = serde_json::from_str(line)
            .map_err(|e| DatasetError::MetadataMissing(format!("{SIDECAR_NAME} line {}: {e}", n + 1)))?;
        records.push(rec);
    }

    let mut report = ImportReport::default();
    let listed: BTreeSet<&str> = records.iter().map(|r| r.file.as_str()).collect();
    for f in &files {
        let name = f.file_name().and_then(|n| n.to_str()).unwrap_or_default();
        if !listed.contains(name) {
            report.skipped.push(Skipped { file: name.to_string(), reason: "no metadata record".into() });
        }
    }
    let mut taken: BTreeSet<String> = manifest.entries.iter().map(|e| e.image_id.clone()).collect();
    for rec in records {
        let skip = |reason: String| Skipped { file: rec.file.clone(), reason };
        let path = dir.join(&rec.file);
        let Some(extension) = image_extension(&path) else {
            report.skipped.push(skip("not a png or jpeg file".into()));
            continue;
        };
        let Some(base) = manifest.get(&rec.original_id).filter(|e| !e.is_adversarial()) else {
            report.skipped.push(skip(format!("original {} is not a normal manifest entry", rec.original_id)));
            continue;
        };
        let bytes = match fs::read(&path) {
            Ok(b) => b,
            Err(e) => {
                report.skipped.push(skip(format!("unreadable: {e}")));
                continue;
            }
        };
        let img = match ops::decode_image(&bytes) {
            Ok(i) => i,
            Err(e) => {
                report.skipped.push(skip(format!("undecodable: {e}")));
                continue;
            }
        };
        let top5 = backend.classify_top5(&img)?;
        if !still_adversarial(base.original_top5.top1(), &top5) {
            report.skipped.push(skip("verification failed: original top-1 still in top-5".into()));
            continue;
        }
        let stem = Path::new(&rec.file).file_stem().and_then(|s| s.to_str()).unwrap_or("image");
        let image_id = format!("{}.import-{stem}", base.image_id);
        if !taken.insert(image_id.clone()) {
            report.skipped.push(skip(format!("duplicate image id {image_id}")));
            continue;
        }
        report.accepted.push(ImportedImage {
            label: base.label,
            original_top5: base.original_top5.clone(),
            record: rec,
            image_id,
            bytes,
            extension,
            top5,
        });
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(id: &str, base: &str, origin: Origin) -> ManifestEntry {
        ManifestEntry {
            image_id: id.into(),
            base_id: base.into(),
            path: format!("images/{id}.png"),
            label: 0,
            backend_id: "b".into(),
            origin,
            original_top5: Top5::from_labels([0, 1, 2, 3, 4]),
            post_save_top5: Top5::from_labels([0, 1, 2, 3, 4]),
            split: None,
            sha256: String::new(),
        }
    }

    #[test]
    fn quotas_follow_rounding_rule() {
        assert_eq!(split_quotas(20, DEFAULT_RATIOS).unwrap(), [14, 3, 3]);
        assert_eq!(split_quotas(100, DEFAULT_RATIOS).unwrap(), [70, 15, 15]);
        assert_eq!(split_quotas(7, DEFAULT_RATIOS).unwrap(), [5, 1, 1]);
        assert!(matches!(split_quotas(2, DEFAULT_RATIOS), Err(DatasetError::RatioInfeasible { bases: 2 })));
    }

    #[test]
    fn derivatives_follow_their_base() {
        let bim = Origin::Attack { family: AttackFamily::Bim, mode: AttackMode::NonTargeted, config_digest: "d".into() };
        let mut es = Vec::new();
        for b in 0..20 {
            let base = format!("n{b}");
            es.push(entry(&base, &base, Origin::Normal));
            if b % 2 == 0 {
                es.push(entry(&format!("{base}.bim"), &base, bim.clone()));
            }
        }
        let quotas = assign_splits(&mut es, DEFAULT_RATIOS, 4).unwrap();
        assert_eq!(quotas, [14, 3, 3]);
        for e in &es {
            let base = es.iter().find(|x| x.image_id == e.base_id).unwrap();
            assert_eq!(e.split, base.split);
        }
    }

    #[test]
    fn manifest_text_roundtrip() {
        let header = ManifestHeader {
            format: MANIFEST_FORMAT.into(),
            version: MANIFEST_VERSION,
            tool_version: crate::TOOL_VERSION.into(),
            codec_id: ops::CODEC_ID.into(),
            suite_version: ops::SUITE_VERSION.into(),
            backend_id: "b".into(),
            backend_protocol: "p".into(),
            seeds: BTreeMap::from([("pool".to_string(), 1)]),
            config_digest: "c".into(),
            attack_configs: vec![AttackConfig::new(AttackFamily::Pgd, AttackMode::NonTargeted)],
        };
        let mut e = entry("x", "x", Origin::Normal);
        e.original_top5 = Top5::new([3, 1, 2, 0, 4], [0.7, 0.1 + 0.2, 1e-300, 0.0, 0.0]).unwrap();
        let m = Manifest { header, entries: vec![e] };
        let back = Manifest::from_jsonl(&m.to_jsonl()).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.to_jsonl(), m.to_jsonl());
    }

    #[test]
    fn duplicate_ids_rejected() {
        let header = serde_json::json!({
            "format": MANIFEST_FORMAT, "version": 1, "tool_version": "t", "codec_id": "c",
            "suite_version": "s", "backend_id": "b", "backend_protocol": "p", "seeds": {},
            "config_digest": "d", "attack_configs": []
        });
        let e = serde_json::to_string(&entry("x", "x", Origin::Normal)).unwrap();
        let text = format!("{header}\n{e}\n{e}\n");
        assert!(matches!(Manifest::from_jsonl(&text), Err(DatasetError::Format(_))));
    }
}
