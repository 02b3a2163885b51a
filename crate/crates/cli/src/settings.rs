//! Options from flags and an optional TOML config file. Config keys use the
//! long flag names; a flag given on the command line wins.

use std::path::{Path, PathBuf};

use clap::Args;
use serde::Deserialize;

use advdetect_core::detectors::DetectorKind;
use advdetect_core::features::{FeatureKind, SubsetId};
use advdetect_core::pipeline::manifest_dir;

use crate::failure::Failure;

#[derive(Debug, Clone, Default, Args, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
pub struct Opts {
    /// TOML file with defaults for any long option below.
    #[arg(long, global = true)]
    #[serde(skip)]
    pub config: Option<PathBuf>,

    /// Dataset manifest; images live next to it.
    #[arg(long, global = true)]
    pub manifest: Option<PathBuf>,
    /// `desk` or `exec:<path>`.
    #[arg(long, global = true)]
    pub backend: Option<String>,
    /// Extra argument for an exec backend; repeatable.
    #[arg(long = "backend-arg", global = true, allow_hyphen_values = true)]
    #[serde(default)]
    pub backend_arg: Vec<String>,
    /// Desk model file.
    #[arg(long, global = true)]
    pub model: Option<PathBuf>,
    /// jpeg, scaling, blur, rotation, jpeg+scaling or all.
    #[arg(long, global = true)]
    pub subset: Option<String>,
    /// count or diff.
    #[arg(long, global = true)]
    pub feature: Option<String>,
    /// lda, svm, mlp or forest.
    #[arg(long, global = true)]
    pub detector: Option<String>,
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Parallel workers; defaults to the number of cores.
    #[arg(long, global = true)]
    pub workers: Option<usize>,
    /// L-infinity attack budget in intensity units.
    #[arg(long, global = true)]
    pub epsilon: Option<f64>,
    /// Attack step size in intensity units.
    #[arg(long, global = true)]
    pub steps: Option<f64>,
    #[arg(long = "max-iter", global = true)]
    pub max_iter: Option<usize>,
    #[arg(long = "report-dir", global = true)]
    pub report_dir: Option<PathBuf>,
    /// Rerun a stage even when its inputs are unchanged.
    #[arg(long, global = true)]
    #[serde(default)]
    pub force: bool,

    /// Attacks to run, comma separated, each `family[:mode]`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub attacks: Option<Vec<String>>,
    /// Default mode for attacks without one.
    #[arg(long, global = true)]
    pub mode: Option<String>,
    /// Synthetic pool size to select normal images from.
    #[arg(long = "pool-size", global = true)]
    pub pool_size: Option<usize>,
    /// Normal images to select.
    #[arg(long, global = true)]
    pub count: Option<usize>,
    /// Directory of external adversarial images with a metadata.jsonl sidecar.
    #[arg(long = "import-dir", global = true)]
    pub import_dir: Option<PathBuf>,
    #[arg(long = "train-count", global = true)]
    pub train_count: Option<usize>,
    #[arg(long = "val-count", global = true)]
    pub val_count: Option<usize>,
    #[arg(long = "test-count", global = true)]
    pub test_count: Option<usize>,
    #[arg(long, global = true)]
    pub epochs: Option<usize>,
    /// Extra JPEG qualities appended to the suite for effect measurement.
    #[arg(long = "extra-jpeg", global = true, value_delimiter = ',')]
    pub extra_jpeg: Option<Vec<u8>>,
    /// Feature file; defaults to one named after feature and subset.
    #[arg(long, global = true)]
    pub features: Option<PathBuf>,
    /// Trace cache.
    #[arg(long, global = true)]
    pub traces: Option<PathBuf>,
    /// Detector model file.
    #[arg(long = "detector-file", global = true)]
    pub detector_file: Option<PathBuf>,
    /// train, dev, eval or all.
    #[arg(long, global = true)]
    pub split: Option<String>,
    /// Subsample the larger class so both classes are equally represented.
    #[arg(long, global = true)]
    #[serde(default)]
    pub balanced: bool,
    /// top1-in-top5, top1-match or exact-tuple.
    #[arg(long, global = true)]
    pub rule: Option<String>,
}

/// Loads the config file, if any, and fills every option not set by a flag.
pub fn resolve(flags: Opts) -> Result<Opts, Failure> {
    let Some(path) = flags.config.clone() else {
        return Ok(flags);
    };
    if !path.exists() {
        return Err(Failure::missing(format!("config file {} does not exist", path.display())));
    }
    let text = std::fs::read_to_string(&path)?;
    let file: Opts = toml::from_str(&text).map_err(|e| Failure::invalid(format!("config file {}: {e}", path.display())))?;
    Ok(flags.or(file))
}

macro_rules! merge {
    ($a:ident, $b:ident; $($field:ident),*) => {
        Opts {
            config: $a.config,
            backend_arg: if $a.backend_arg.is_empty() { $b.backend_arg } else { $a.backend_arg },
            force: $a.force || $b.force,
            balanced: $a.balanced || $b.balanced,
            $($field: $a.$field.or($b.$field),)*
        }
    };
}

impl Opts {
    fn or(self, file: Opts) -> Opts {
        merge!(self, file; manifest, backend, model, subset, feature, detector, seed, workers, epsilon, steps,
            max_iter, report_dir, attacks, mode, pool_size, count, import_dir, train_count, val_count, test_count,
            epochs, extra_jpeg, features, traces, detector_file, split, rule)
    }

    pub fn manifest(&self) -> PathBuf {
        self.manifest.clone().unwrap_or_else(|| PathBuf::from("dataset/manifest.jsonl"))
    }

    fn data_dir(&self) -> PathBuf {
        manifest_dir(&self.manifest())
    }

    pub fn backend(&self) -> String {
        self.backend.clone().unwrap_or_else(|| "desk".into())
    }

    pub fn model(&self) -> PathBuf {
        self.model.clone().unwrap_or_else(|| PathBuf::from("desk.addm"))
    }

    pub fn subset(&self) -> String {
        self.subset.clone().unwrap_or_else(|| "all".into())
    }

    pub fn feature(&self) -> String {
        self.feature.clone().unwrap_or_else(|| "diff".into())
    }

    pub fn detector(&self) -> String {
        self.detector.clone().unwrap_or_else(|| "lda".into())
    }

    pub fn seed(&self) -> u64 {
        self.seed.unwrap_or(0)
    }

    pub fn workers(&self) -> usize {
        self.workers
            .filter(|&n| n > 0)
            .unwrap_or_else(|| std::thread::available_parallelism().map_or(1, |n| n.get()))
    }

    pub fn epsilon(&self) -> f64 {
        self.epsilon.unwrap_or(8.0 / 255.0)
    }

    pub fn steps(&self) -> f64 {
        self.steps.unwrap_or(2.0 / 255.0)
    }

    pub fn max_iter(&self) -> usize {
        self.max_iter.unwrap_or(20)
    }

    pub fn report_dir(&self) -> PathBuf {
        self.report_dir.clone().unwrap_or_else(|| PathBuf::from("reports"))
    }

    pub fn attacks(&self) -> Vec<String> {
        self.attacks.clone().unwrap_or_else(|| vec!["bim".into(), "pgd".into()])
    }

    pub fn mode(&self) -> String {
        self.mode.clone().unwrap_or_else(|| "non-targeted".into())
    }

    pub fn pool_size(&self) -> usize {
        self.pool_size.unwrap_or(400)
    }

    pub fn count(&self) -> usize {
        self.count.unwrap_or(100)
    }

    pub fn train_count(&self) -> usize {
        self.train_count.unwrap_or(4000)
    }

    pub fn val_count(&self) -> usize {
        self.val_count.unwrap_or(1000)
    }

    pub fn test_count(&self) -> usize {
        self.test_count.unwrap_or(1000)
    }

    pub fn epochs(&self) -> usize {
        self.epochs.unwrap_or(20)
    }

    pub fn extra_jpeg(&self) -> Vec<u8> {
        self.extra_jpeg.clone().unwrap_or_default()
    }

    pub fn features(&self, kind: FeatureKind, subset: SubsetId) -> PathBuf {
        self.features
            .clone()
            .unwrap_or_else(|| self.data_dir().join(format!("features-{}-{}.csv", kind.name(), file_safe(subset.name()))))
    }

    pub fn traces(&self) -> PathBuf {
        self.traces.clone().unwrap_or_else(|| self.data_dir().join("traces.jsonl"))
    }

    pub fn detector_file(&self, kind: DetectorKind, feature: FeatureKind, subset_id: &str) -> PathBuf {
        self.detector_file.clone().unwrap_or_else(|| {
            Path::new(&self.data_dir())
                .join("detectors")
                .join(format!("{}-{}-{}.addt", kind.name(), feature.name(), file_safe(subset_id)))
        })
    }

    pub fn split(&self) -> String {
        self.split.clone().unwrap_or_else(|| "eval".into())
    }

    pub fn rule(&self) -> String {
        self.rule.clone().unwrap_or_else(|| "top1-in-top5".into())
    }
}

fn file_safe(name: &str) -> String {
    name.replace('+', "-")
}
