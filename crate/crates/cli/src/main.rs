//! `advdetect`: batch front end for the detection and correction pipeline.
//!
//! Every stage reads and writes declared files only. Exit status is 0 on
//! success, 2 for a missing input, 3 for a validation failure, 4 when the
//! classifier backend fails and 1 for other I/O errors.

mod failure;
mod report;
mod settings;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Parser, Subcommand};
use serde::Serialize;

use advdetect_core::attacks::{AttackConfig, AttackFamily, AttackMode};
use advdetect_core::binio::sha256_hex;
use advdetect_core::correction::MatchRule;
use advdetect_core::dataset::{import_external, Manifest, Split, DEFAULT_RATIOS};
use advdetect_core::desk_model::{self, DeskModel, TrainConfig};
use advdetect_core::detectors::{evaluate, train_detector, DetectorConfig, DetectorKind, DetectorModel};
use advdetect_core::features::{FeatureKind, LabelTrace, SubsetId};
use advdetect_core::gateway::ExecBackend;
use advdetect_core::ops::{CODEC_ID, SUITE_VERSION};
use advdetect_core::pipeline::{
    self, add_imported, balanced, build_dataset, compute_traces, config_digest, correction_report, features_from_traces,
    measure_effects, suite_with_extra_jpeg, DatasetPlan, FeatureTable, Provenance, TraceFile,
};
use advdetect_core::{canonical_suite, synth, Classifier, TOOL_VERSION};

use failure::Failure;
use report::ReportFile;
use settings::Opts;

#[derive(Debug, Parser)]
#[command(name = "advdetect", version, about = "Adversarial image detection and correction from top-5 label stability")]
struct Cli {
    #[command(flatten)]
    opts: Opts,
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Clone, Copy, Subcommand)]
enum Command {
    /// Train the bundled desk-scale classifier on synthetic images.
    TrainDeskModel,
    /// Select normals, run attacks, split, and write the manifest.
    BuildDataset,
    /// Count top-5 misclassifications per image group and operation.
    MeasureEffects,
    /// Trace every manifest image through the suite and write features.
    ExtractFeatures,
    /// Fit a detector on the train split of a feature file.
    TrainDetector,
    /// Score a trained detector on one split.
    EvaluateDetector,
    /// Label correction rates per operation subset.
    Correct,
    /// Render summary tables from stored reports.
    Report,
    /// Print the codec, suite and tool versions.
    CodecInfo,
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) if matches!(e.kind(), clap::error::ErrorKind::DisplayHelp | clap::error::ErrorKind::DisplayVersion) => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            eprint!("{e}");
            return ExitCode::from(failure::VALIDATION);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn run(cli: Cli) -> Result<(), Failure> {
    let opts = settings::resolve(cli.opts)?;
    if cli.command.uses_workers() {
        rayon::ThreadPoolBuilder::new()
            .num_threads(opts.workers())
            .build_global()
            .map_err(|e| Failure::invalid(format!("worker pool: {e}")))?;
    }
    let ctx = Ctx { opts };
    match cli.command {
        Command::TrainDeskModel => ctx.train_desk_model(),
        Command::BuildDataset => ctx.build_dataset(),
        Command::MeasureEffects => ctx.measure_effects(),
        Command::ExtractFeatures => ctx.extract_features().map(|_| ()),
        Command::TrainDetector => ctx.train_detector(),
        Command::EvaluateDetector => ctx.evaluate_detector(),
        Command::Correct => ctx.correct(),
        Command::Report => report::render(&ctx.opts.report_dir()),
        Command::CodecInfo => {
            codec_info();
            Ok(())
        }
    }
}

impl Command {
    fn uses_workers(self) -> bool {
        !matches!(self, Command::Report | Command::CodecInfo)
    }
}

fn codec_info() {
    println!("tool:  {TOOL_VERSION}");
    println!("codec: {CODEC_ID}");
    println!("suite: {SUITE_VERSION}");
    for (i, spec) in canonical_suite().iter().enumerate() {
        println!("  {i:>2} {}", spec.op);
    }
}

// ------------------------------------------------------------- stamps

/// A stage output is current when its stamp holds the digest of the inputs
/// and options that produced it.
fn stamp_path(output: &Path) -> PathBuf {
    let mut name = output.file_name().unwrap_or_default().to_os_string();
    name.push(".stamp");
    output.with_file_name(name)
}

fn is_current(outputs: &[&Path], digest: &str) -> bool {
    outputs.iter().all(|p| p.exists())
        && fs::read_to_string(stamp_path(outputs[0])).is_ok_and(|s| s.trim() == digest)
}

fn write_stamp(output: &Path, digest: &str) -> Result<(), Failure> {
    Ok(fs::write(stamp_path(output), format!("{digest}\n"))?)
}

fn file_digest(path: &Path) -> Result<String, Failure> {
    if !path.exists() {
        return Err(Failure::missing(format!("{} does not exist", path.display())));
    }
    Ok(sha256_hex(&fs::read(path)?))
}

fn stage_digest<T: Serialize>(stage: &str, inputs: &T) -> String {
    config_digest(&(stage, TOOL_VERSION, inputs))
}

fn ensure_parent(path: &Path) -> Result<(), Failure> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    Ok(())
}

// ------------------------------------------------------------ backend

/// Identity of the configured backend for digests: the model file hash for
/// the desk model, the program and arguments for an external one.
#[derive(Debug, Serialize)]
enum BackendKey {
    Desk { model_sha256: String },
    Exec { program: String, args: Vec<String> },
}

struct Ctx {
    opts: Opts,
}

impl Ctx {
    fn backend_key(&self) -> Result<BackendKey, Failure> {
        match self.opts.backend().as_str() {
            "desk" => Ok(BackendKey::Desk { model_sha256: file_digest(&self.opts.model())? }),
            other => match other.strip_prefix("exec:") {
                Some(program) => Ok(BackendKey::Exec { program: program.to_string(), args: self.opts.backend_arg.clone() }),
                None => Err(Failure::invalid(format!("unknown backend `{other}`; expected desk or exec:<path>"))),
            },
        }
    }

    fn open_backend(&self) -> Result<Box<dyn Classifier>, Failure> {
        match self.backend_key()? {
            BackendKey::Desk { .. } => Ok(Box::new(DeskModel::load(self.opts.model())?)),
            BackendKey::Exec { program, args } => {
                if !Path::new(&program).exists() {
                    return Err(Failure::missing(format!("backend program {program} does not exist")));
                }
                Ok(Box::new(ExecBackend::spawn(&program, &args, self.opts.workers())?))
            }
        }
    }

    fn load_manifest(&self) -> Result<(PathBuf, Manifest), Failure> {
        let path = self.opts.manifest();
        if !path.exists() {
            return Err(Failure::missing(format!("manifest {} does not exist", path.display())));
        }
        let manifest = Manifest::load(&path)?;
        Ok((path, manifest))
    }

    fn subset(&self) -> Result<SubsetId, Failure> {
        Ok(SubsetId::parse(&self.opts.subset())?)
    }

    fn feature_kind(&self) -> Result<FeatureKind, Failure> {
        let name = self.opts.feature();
        FeatureKind::parse(&name).ok_or_else(|| Failure::invalid(format!("unknown feature `{name}`; expected count or diff")))
    }

    fn detector_kind(&self) -> Result<DetectorKind, Failure> {
        let name = self.opts.detector();
        DetectorKind::parse(&name)
            .ok_or_else(|| Failure::invalid(format!("unknown detector `{name}`; expected lda, svm, mlp or forest")))
    }

    fn split(&self) -> Result<Option<Split>, Failure> {
        match self.opts.split().as_str() {
            "all" => Ok(None),
            s => Split::parse(s)
                .map(Some)
                .ok_or_else(|| Failure::invalid(format!("unknown split `{s}`; expected train, dev, eval or all"))),
        }
    }

    fn write_report<T: Serialize>(&self, name: &str, kind: &str, provenance: &Provenance, body: &T, text: &str, csv: &str) -> Result<(), Failure> {
        let dir = self.opts.report_dir();
        fs::create_dir_all(&dir)?;
        let file = ReportFile::new(kind, provenance.clone(), body)?;
        fs::write(dir.join(format!("{name}.json")), file.to_json())?;
        fs::write(dir.join(format!("{name}.txt")), text)?;
        fs::write(dir.join(format!("{name}.csv")), csv)?;
        print!("{text}");
        Ok(())
    }

    // ------------------------------------------------------- stages

    fn train_desk_model(&self) -> Result<(), Failure> {
        let seed = self.opts.seed();
        let out = self.opts.model();
        let config = TrainConfig { epochs: self.opts.epochs(), seed: seed + 1, ..TrainConfig::default() };
        let seeds = BTreeMap::from([
            ("init".to_string(), config.seed),
            ("train".to_string(), seed + 1),
            ("validation".to_string(), seed + 2),
            ("test".to_string(), seed + 4),
        ]);
        let counts = (self.opts.train_count(), self.opts.val_count(), self.opts.test_count());
        let digest = stage_digest("train-desk-model", &(&config, &seeds, counts));
        if !self.opts.force && is_current(&[&out], &digest) {
            println!("{} is up to date", out.display());
            return Ok(());
        }
        let train_set = synth::generate(seeds["train"], 0, counts.0);
        let validation = synth::generate(seeds["validation"], 0, counts.1);
        let test = synth::generate(seeds["test"], 0, counts.2);
        let (mut model, report) = desk_model::train(&train_set, &validation, &config)?;
        let test_accuracy = model.accuracy(&test)?;

        let provenance = Provenance {
            tool_version: TOOL_VERSION.to_string(),
            codec_id: CODEC_ID.to_string(),
            suite_version: SUITE_VERSION.to_string(),
            backend_id: model.id().to_string(),
            manifest_digest: String::new(),
            config_digest: config_digest(&config),
            seeds,
        };
        model.set_provenance(serde_json::to_string(&provenance).expect("serializes"));
        ensure_parent(&out)?;
        model.save(&out)?;

        let validation_accuracy = report.validation.clone().unwrap_or_default();
        let body = report::DeskTraining {
            model: out.display().to_string(),
            counts: [counts.0, counts.1, counts.2],
            epoch_losses: report.epoch_losses.clone(),
            train: report.train.clone(),
            validation: validation_accuracy,
            test: test_accuracy,
        };
        self.write_report("desk-training", "desk-training", &provenance, &body, &body.to_text(), &body.to_csv())?;
        write_stamp(&out, &digest)
    }

    fn attack_configs(&self) -> Result<Vec<AttackConfig>, Failure> {
        let default_mode = parse_mode(&self.opts.mode())?;
        let (epsilon, step, iterations) = (self.opts.epsilon(), self.opts.steps(), self.opts.max_iter());
        let mut configs = Vec::new();
        for (i, item) in self.opts.attacks().iter().filter(|a| !a.is_empty()).enumerate() {
            let (family, mode) = match item.split_once(':') {
                Some((f, m)) => (f, parse_mode(m)?),
                None => (item.as_str(), default_mode),
            };
            let family = AttackFamily::parse(family).ok_or_else(|| Failure::invalid(format!("unknown attack `{family}`")))?;
            let mut cfg = AttackConfig::new(family, mode);
            cfg.epsilon = epsilon;
            cfg.step_size = step;
            cfg.max_iterations = iterations;
            cfg.seed = self.opts.seed() + 11 + i as u64;
            cfg.validate()?;
            configs.push(cfg);
        }
        Ok(configs)
    }

    fn build_dataset(&self) -> Result<(), Failure> {
        let manifest_path = self.opts.manifest();
        let seed = self.opts.seed();
        let plan = DatasetPlan {
            pool_seed: seed + 3,
            pool_size: self.opts.pool_size(),
            normal_count: self.opts.count(),
            select_seed: seed + 5,
            attacks: self.attack_configs()?,
            split_seed: seed + 7,
            ratios: DEFAULT_RATIOS,
        };
        let key = self.backend_key()?;
        let digest = stage_digest("build-dataset", &(&plan, &key));
        let backend = self.open_backend()?;
        if !self.opts.force && is_current(&[&manifest_path], &digest) {
            println!("{} is up to date", manifest_path.display());
        } else {
            ensure_parent(&manifest_path)?;
            let built = build_dataset(&manifest_path, &plan, backend.as_ref())?;
            let provenance = Provenance::for_manifest(&built.manifest, backend.id(), &config_digest(&plan));
            let body = report::Generation::from_report(&built.generation, &built.manifest);
            self.write_report("dataset", "dataset", &provenance, &body, &body.to_text(), &body.to_csv())?;
            write_stamp(&manifest_path, &digest)?;
        }

        if let Some(dir) = &self.opts.import_dir {
            if !dir.is_dir() {
                return Err(Failure::missing(format!("import directory {} does not exist", dir.display())));
            }
            let mut manifest = Manifest::load(&manifest_path)?;
            let imported = import_external(dir, &manifest, backend.as_ref())?;
            for s in &imported.skipped {
                eprintln!("skipped {}: {}", s.file, s.reason);
            }
            let added = add_imported(&manifest_path, &mut manifest, &imported, backend.id())?;
            println!("imported {added} images, skipped {}", imported.skipped.len());
            // the manifest changed, so downstream stamps no longer match
            write_stamp(&manifest_path, &digest)?;
        }
        Ok(())
    }

    fn measure_effects(&self) -> Result<(), Failure> {
        let (manifest_path, manifest) = self.load_manifest()?;
        let backend = self.open_backend()?;
        let extra = self.opts.extra_jpeg();
        let suite = suite_with_extra_jpeg(&extra);
        let provenance = Provenance::for_manifest(&manifest, backend.id(), &config_digest(&extra));
        let report = measure_effects(&manifest_path, &manifest, backend.as_ref(), &suite, provenance.clone())?;
        self.write_report("effects", "effects", &provenance, &report, &report.to_text(), &report.to_csv())
    }

    /// Traces for every manifest entry under the canonical suite, cached next
    /// to the manifest.
    fn traces(&self, manifest_path: &Path, manifest: &Manifest) -> Result<(Vec<LabelTrace>, Provenance), Failure> {
        let key = self.backend_key()?;
        let digest = stage_digest("traces", &(manifest.digest(), &key, SUITE_VERSION));
        let path = self.opts.traces();
        if !self.opts.force && is_current(&[&path], &digest) {
            let file = TraceFile::load(&path)?;
            return Ok((file.traces, file.provenance));
        }
        let backend = self.open_backend()?;
        let traces = compute_traces(manifest_path, manifest, backend.as_ref(), &canonical_suite())?;
        let provenance = Provenance::for_manifest(manifest, backend.id(), &config_digest(&key));
        ensure_parent(&path)?;
        TraceFile { provenance: provenance.clone(), traces: traces.clone() }.save(&path)?;
        write_stamp(&path, &digest)?;
        Ok((traces, provenance))
    }

    fn extract_features(&self) -> Result<PathBuf, Failure> {
        let (manifest_path, manifest) = self.load_manifest()?;
        let kind = self.feature_kind()?;
        let subset = self.subset()?;
        let out = self.opts.features(kind, subset);
        let key = self.backend_key()?;
        let digest = stage_digest("extract-features", &(manifest.digest(), &key, kind.name(), subset.name()));
        if !self.opts.force && is_current(&[&out, &self.opts.traces()], &digest) {
            println!("{} is up to date", out.display());
            return Ok(out);
        }
        let (traces, trace_provenance) = self.traces(&manifest_path, &manifest)?;
        let settings = (kind.name(), subset.name());
        let provenance = Provenance { config_digest: config_digest(&settings), ..trace_provenance };
        let table = features_from_traces(&manifest, &traces, &subset.canonical(), kind, provenance)?;
        ensure_parent(&out)?;
        table.save(&out)?;
        write_stamp(&out, &digest)?;
        println!("wrote {} rows to {}", table.rows.len(), out.display());
        Ok(out)
    }

    fn load_features(&self) -> Result<(PathBuf, FeatureTable), Failure> {
        let kind = self.feature_kind()?;
        let subset = self.subset()?;
        let path = self.opts.features(kind, subset);
        if !path.exists() {
            return Err(Failure::missing(format!("feature file {} does not exist", path.display())));
        }
        let table = FeatureTable::load(&path)?;
        if table.kind != kind || table.subset_id != subset.name() {
            return Err(Failure::invalid(format!(
                "{} holds {}/{} features, expected {}/{}",
                path.display(),
                table.kind.name(),
                table.subset_id,
                kind.name(),
                subset.name()
            )));
        }
        Ok((path, table))
    }

    fn detector_config(&self) -> DetectorConfig {
        DetectorConfig { seed: self.opts.seed(), ..DetectorConfig::default() }
    }

    fn train_detector(&self) -> Result<(), Failure> {
        let (feature_path, table) = self.load_features()?;
        let kind = self.detector_kind()?;
        let out = self.opts.detector_file(kind, table.kind, &table.subset_id);
        let config = self.detector_config();
        let digest = stage_digest("train-detector", &(file_digest(&feature_path)?, kind.name(), &config));
        if !self.opts.force && is_current(&[&out], &digest) {
            println!("{} is up to date", out.display());
            return Ok(());
        }
        let rows = table.split_rows(Split::Train);
        let features: Vec<_> = rows.iter().map(|r| r.features.clone()).collect();
        let labels: Vec<bool> = rows.iter().map(|r| r.is_adversarial).collect();
        let mut model = train_detector(kind, &features, &labels, &config)?;
        let provenance = Provenance { config_digest: config_digest(&config), ..table.provenance.clone() };
        model.provenance = serde_json::to_string(&provenance).expect("serializes");
        ensure_parent(&out)?;
        model.save(&out)?;
        write_stamp(&out, &digest)?;
        println!("trained {} on {} rows, wrote {}", kind.name(), rows.len(), out.display());
        Ok(())
    }

    fn evaluate_detector(&self) -> Result<(), Failure> {
        let (_, table) = self.load_features()?;
        let kind = self.detector_kind()?;
        let path = self.opts.detector_file(kind, table.kind, &table.subset_id);
        if !path.exists() {
            return Err(Failure::missing(format!("detector {} does not exist", path.display())));
        }
        let model = DetectorModel::load(&path)?;
        let split = self.split()?;
        let mut rows = match split {
            Some(s) => table.split_rows(s),
            None => Split::ALL.into_iter().flat_map(|s| table.split_rows(s)).collect(),
        };
        if self.opts.balanced {
            rows = balanced(&rows, self.opts.seed() + 9);
        }
        let split_name = split.map_or("all", Split::name);
        let report = evaluate(&model, &rows, split_name)?;
        let provenance: Provenance = serde_json::from_str(&model.provenance)
            .map_err(|e| Failure::invalid(format!("detector {} has no usable provenance: {e}", path.display())))?;
        pipeline::check_same_version([("features", &table.provenance), ("detector", &provenance)])?;
        let name = format!("eval-{}-{}-{}-{}", kind.name(), table.kind.name(), table.subset_id, split_name);
        let csv = report::eval_csv(std::slice::from_ref(&report));
        self.write_report(&name, "evaluation", &provenance, &report, &report.to_text(), &csv)
    }

    fn correct(&self) -> Result<(), Failure> {
        let (manifest_path, manifest) = self.load_manifest()?;
        let rule = parse_rule(&self.opts.rule())?;
        let split = self.split()?;
        let subsets: Vec<_> = match &self.opts.subset {
            Some(_) => vec![self.subset()?.canonical()],
            None => SubsetId::ALL.iter().map(|s| s.canonical()).collect(),
        };
        let (traces, provenance) = self.traces(&manifest_path, &manifest)?;
        let provenance = Provenance { config_digest: config_digest(&(rule, split)), ..provenance };
        let report = correction_report(&manifest, &traces, &subsets, rule, split, provenance.clone())?;
        self.write_report("correction", "correction", &provenance, &report, &report.to_text(), &report.to_csv())
    }
}

fn parse_mode(s: &str) -> Result<AttackMode, Failure> {
    match s {
        "targeted" | "t" => Ok(AttackMode::Targeted),
        "non-targeted" | "nt" => Ok(AttackMode::NonTargeted),
        other => Err(Failure::invalid(format!("unknown attack mode `{other}`; expected targeted or non-targeted"))),
    }
}

fn parse_rule(s: &str) -> Result<MatchRule, Failure> {
    serde_json::from_value(serde_json::Value::String(s.to_string()))
        .map_err(|_| Failure::invalid(format!("unknown rule `{s}`; expected top1-in-top5, top1-match or exact-tuple")))
}
