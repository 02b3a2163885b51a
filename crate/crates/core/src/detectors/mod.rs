//! Binary detectors (normal vs adversarial) over stability features.
//!
//! Every detector standardizes its inputs with a z-score fitted on the
//! training rows, then applies one of four classifiers: shrinkage LDA, a
//! linear hinge-loss SVM, a one-hidden-layer MLP, or a shallow random forest.

mod eval;
mod forest;
mod lda;
mod mlp;
mod svm;

use std::fmt;
use std::path::Path;

use ndarray::{Array1, Array2};
use serde::{Deserialize, Serialize};

use crate::binio::{Reader, Writer};
use crate::error::DetectorError;
use crate::features::{FeatureKind, FeatureVector};

pub use eval::{evaluate, Confusion, EvalReport, FamilyStats, LabeledRow};
pub use forest::MaxFeatures;

const MAGIC: &[u8; 4] = b"ADDT";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DetectorKind {
    Lda,
    Svm,
    Mlp,
    Forest,
}

impl DetectorKind {
    pub const ALL: [DetectorKind; 4] = [DetectorKind::Lda, DetectorKind::Svm, DetectorKind::Mlp, DetectorKind::Forest];

    pub fn name(self) -> &'static str {
        match self {
            DetectorKind::Lda => "lda",
            DetectorKind::Svm => "svm",
            DetectorKind::Mlp => "mlp",
            DetectorKind::Forest => "forest",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|k| k.name() == s)
    }

    fn tag(self) -> u8 {
        self as u8
    }

    fn from_tag(t: u8) -> Option<Self> {
        Self::ALL.get(t as usize).copied()
    }
}

impl fmt::Display for DetectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Verdict {
    Normal,
    Adversarial,
}

impl Verdict {
    pub fn is_adversarial(self) -> bool {
        self == Verdict::Adversarial
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectorConfig {
    /// Weight each row by the inverse frequency of its class.
    pub class_weighted: bool,
    pub lda_shrinkage: f64,
    pub svm_lambda: f64,
    pub svm_epochs: usize,
    pub mlp_hidden: usize,
    pub mlp_epochs: usize,
    pub mlp_learning_rate: f64,
    pub mlp_l2: f64,
    pub forest_trees: usize,
    pub forest_max_depth: usize,
    pub forest_bootstrap: bool,
    pub forest_max_features: MaxFeatures,
    pub seed: u64,
}

impl Default for DetectorConfig {
    fn default() -> Self {
        Self {
            class_weighted: true,
            lda_shrinkage: 0.1,
            svm_lambda: 1e-3,
            svm_epochs: 30,
            mlp_hidden: 100,
            mlp_epochs: 40,
            mlp_learning_rate: 0.01,
            mlp_l2: 1e-4,
            forest_trees: 100,
            forest_max_depth: 2,
            forest_bootstrap: true,
            forest_max_features: MaxFeatures::Sqrt,
            seed: 0,
        }
    }
}

/// Per-feature z-score. Constant features get scale 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
}

impl Standardizer {
    pub fn fit(rows: &[Vec<f64>]) -> Self {
        let d = rows[0].len();
        let n = rows.len() as f64;
        let mut mean = vec![0.0; d];
        for r in rows {
            for (m, v) in mean.iter_mut().zip(r) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= n);
        let mut var = vec![0.0; d];
        for r in rows {
            for k in 0..d {
                var[k] += (r[k] - mean[k]).powi(2);
            }
        }
        let scale = var
            .into_iter()
            .map(|v| {
                let s = (v / n).sqrt();
                if s > 1e-12 {
                    s
                } else {
                    1.0
                }
            })
            .collect();
        Self { mean, scale }
    }

    pub fn apply(&self, x: &[f64]) -> Vec<f64> {
        x.iter()
            .zip(&self.mean)
            .zip(&self.scale)
            .map(|((v, m), s)| (v - m) / s)
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
enum Params {
    Linear { weights: Vec<f64>, bias: f64 },
    Mlp(mlp::Mlp),
    Forest(Vec<forest::Tree>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DetectorModel {
    pub kind: DetectorKind,
    pub feature_kind: FeatureKind,
    pub subset_id: String,
    pub dim: usize,
    pub seed: u64,
    pub standardizer: Standardizer,
    /// JSON describing how the model was produced.
    pub provenance: String,
    /// SVM only: objective of the kept averaged iterate after each epoch.
    pub training_history: Vec<f64>,
    params: Params,
}

fn class_weights(labels: &[bool], enabled: bool) -> Vec<f64> {
    let n = labels.len() as f64;
    let pos = labels.iter().filter(|&&y| y).count() as f64;
    let neg = n - pos;
    labels
        .iter()
        .map(|&y| match (enabled, y) {
            (false, _) => 1.0,
            (true, true) => n / (2.0 * pos),
            (true, false) => n / (2.0 * neg),
        })
        .collect()
}

fn check_rows(rows: &[FeatureVector]) -> Result<(FeatureKind, String, usize), DetectorError> {
    let first = rows.first().ok_or(DetectorError::NoRows)?;
    for r in rows {
        if r.kind != first.kind || r.subset_id != first.subset_id || r.values.len() != first.values.len() {
            return Err(DetectorError::FeatureMismatch(format!(
                "rows mix {}/{} and {}/{}",
                first.kind.name(),
                first.subset_id,
                r.kind.name(),
                r.subset_id
            )));
        }
    }
    Ok((first.kind, first.subset_id.clone(), first.values.len()))
}

/// Trains a detector; `labels[i]` is true when row `i` is adversarial.
pub fn train_detector(
    kind: DetectorKind,
    rows: &[FeatureVector],
    labels: &[bool],
    config: &DetectorConfig,
) -> Result<DetectorModel, DetectorError> {
    let (feature_kind, subset_id, dim) = check_rows(rows)?;
    assert_eq!(rows.len(), labels.len(), "one label per row");
    if labels.iter().all(|&y| y) || labels.iter().all(|&y| !y) {
        return Err(DetectorError::ClassMissing);
    }
    let raw: Vec<Vec<f64>> = rows
        .iter()
        .map(|r| r.values.iter().map(|&v| f64::from(v)).collect())
        .collect();
    let standardizer = Standardizer::fit(&raw);
    let z: Vec<Vec<f64>> = raw.iter().map(|r| standardizer.apply(r)).collect();
    let weights = class_weights(labels, config.class_weighted);
    let seed = config.seed;
    let mut training_history = Vec::new();

    let params = match kind {
        DetectorKind::Lda => {
            let (weights, bias) = lda::fit(&z, labels, &weights, config.lda_shrinkage)?;
            Params::Linear { weights, bias }
        }
        DetectorKind::Svm => {
            let fit = svm::fit(&z, labels, &weights, config.svm_lambda, config.svm_epochs, seed);
            training_history = fit.history;
            Params::Linear { weights: fit.weights, bias: fit.bias }
        }
        DetectorKind::Mlp => {
            let settings = mlp::MlpSettings {
                hidden: config.mlp_hidden,
                epochs: config.mlp_epochs,
                learning_rate: config.mlp_learning_rate,
                momentum: 0.9,
                batch_size: 32,
                l2: config.mlp_l2,
            };
            Params::Mlp(mlp::fit(&z, labels, &weights, &settings, seed))
        }
        DetectorKind::Forest => {
            let settings = forest::ForestSettings {
                trees: config.forest_trees,
                max_depth: config.forest_max_depth,
                bootstrap: config.forest_bootstrap,
                max_features: config.forest_max_features,
            };
            Params::Forest(forest::fit(&z, labels, &weights, &settings, seed))
        }
    };

    Ok(DetectorModel {
        kind,
        feature_kind,
        subset_id,
        dim,
        seed,
        standardizer,
        provenance: String::new(),
        training_history,
        params,
    })
}

impl DetectorModel {
    fn check(&self, f: &FeatureVector) -> Result<(), DetectorError> {
        if f.kind != self.feature_kind || f.subset_id != self.subset_id || f.values.len() != self.dim {
            return Err(DetectorError::FeatureMismatch(format!(
                "model expects {}/{} with {} values, got {}/{} with {}",
                self.feature_kind.name(),
                self.subset_id,
                self.dim,
                f.kind.name(),
                f.subset_id,
                f.values.len()
            )));
        }
        Ok(())
    }

    /// Signed score; positive means adversarial. For the forest this is the
    /// adversarial vote share minus one half.
    pub fn decision_value(&self, f: &FeatureVector) -> Result<f64, DetectorError> {
        self.check(f)?;
        let raw: Vec<f64> = f.values.iter().map(|&v| f64::from(v)).collect();
        let z = self.standardizer.apply(&raw);
        Ok(match &self.params {
            Params::Linear { weights, bias } => weights.iter().zip(&z).map(|(w, x)| w * x).sum::<f64>() + bias,
            Params::Mlp(m) => m.logit(&z),
            Params::Forest(trees) => forest::vote(trees, &z).1 - 0.5,
        })
    }

    pub fn predict(&self, f: &FeatureVector) -> Result<Verdict, DetectorError> {
        let adversarial = match &self.params {
            Params::Forest(trees) => {
                self.check(f)?;
                let raw: Vec<f64> = f.values.iter().map(|&v| f64::from(v)).collect();
                forest::vote(trees, &self.standardizer.apply(&raw)).0
            }
            _ => self.decision_value(f)? > 0.0,
        };
        Ok(if adversarial { Verdict::Adversarial } else { Verdict::Normal })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, FORMAT_VERSION);
        w.u8(self.kind.tag());
        w.str(self.feature_kind.name());
        w.str(&self.subset_id);
        w.u32(self.dim as u32);
        w.u64(self.seed);
        w.str(&self.provenance);
        w.f64s(&self.standardizer.mean);
        w.f64s(&self.standardizer.scale);
        w.u32(self.training_history.len() as u32);
        w.f64s(&self.training_history);
        match &self.params {
            Params::Linear { weights, bias } => {
                w.f64s(weights);
                w.f64(*bias);
            }
            Params::Mlp(m) => {
                w.u32(m.b1.len() as u32);
                w.f64s(m.w1.as_slice().expect("standard layout"));
                w.f64s(m.b1.as_slice().expect("standard layout"));
                w.f64s(m.w2.as_slice().expect("standard layout"));
                w.f64(m.b2);
            }
            Params::Forest(trees) => {
                w.u32(trees.len() as u32);
                for t in trees {
                    w.u32(t.nodes.len() as u32);
                    for n in &t.nodes {
                        match *n {
                            forest::Node::Split { feature, threshold, left, right } => {
                                w.u8(1);
                                w.u32(feature as u32);
                                w.f64(threshold);
                                w.u32(left as u32);
                                w.u32(right as u32);
                            }
                            forest::Node::Leaf { adversarial, adversarial_share } => {
                                w.u8(0);
                                w.u8(u8::from(adversarial));
                                w.f64(adversarial_share);
                            }
                        }
                    }
                }
            }
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, DetectorError> {
        let fmt = DetectorError::Format;
        let (mut r, version) = Reader::open(bytes, MAGIC).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(DetectorError::Format(format!("unsupported version {version}")));
        }
        let kind = DetectorKind::from_tag(r.u8().map_err(fmt)?)
            .ok_or_else(|| DetectorError::Format("unknown detector kind".into()))?;
        let feature_kind = FeatureKind::parse(&r.str().map_err(fmt)?)
            .ok_or_else(|| DetectorError::Format("unknown feature kind".into()))?;
        let subset_id = r.str().map_err(fmt)?;
        let dim = r.u32().map_err(fmt)? as usize;
        let seed = r.u64().map_err(fmt)?;
        let provenance = r.str().map_err(fmt)?;
        let mean = r.f64s(dim).map_err(fmt)?;
        let scale = r.f64s(dim).map_err(fmt)?;
        if scale.iter().any(|&s| !(s > 0.0)) {
            return Err(DetectorError::Format("non-positive standardization scale".into()));
        }
        let hist_len = r.u32().map_err(fmt)? as usize;
        let training_history = r.f64s(hist_len).map_err(fmt)?;
        let params = match kind {
            DetectorKind::Lda | DetectorKind::Svm => Params::Linear {
                weights: r.f64s(dim).map_err(fmt)?,
                bias: r.f64().map_err(fmt)?,
            },
            DetectorKind::Mlp => {
                let h = r.u32().map_err(fmt)? as usize;
                let w1 = Array2::from_shape_vec((h, dim), r.f64s(h * dim).map_err(fmt)?)
                    .map_err(|e| DetectorError::Format(e.to_string()))?;
                let b1 = Array1::from(r.f64s(h).map_err(fmt)?);
                let w2 = Array1::from(r.f64s(h).map_err(fmt)?);
                let b2 = r.f64().map_err(fmt)?;
                Params::Mlp(mlp::Mlp { w1, b1, w2, b2 })
            }
            DetectorKind::Forest => {
                let n_trees = r.u32().map_err(fmt)? as usize;
                let mut trees = Vec::with_capacity(n_trees);
                for _ in 0..n_trees {
                    let n_nodes = r.u32().map_err(fmt)? as usize;
                    let mut nodes = Vec::with_capacity(n_nodes);
                    for _ in 0..n_nodes {
                        let node = match r.u8().map_err(fmt)? {
                            1 => forest::Node::Split {
                                feature: r.u32().map_err(fmt)? as usize,
                                threshold: r.f64().map_err(fmt)?,
                                left: r.u32().map_err(fmt)? as usize,
                                right: r.u32().map_err(fmt)? as usize,
                            },
                            0 => forest::Node::Leaf {
                                adversarial: r.u8().map_err(fmt)? != 0,
                                adversarial_share: r.f64().map_err(fmt)?,
                            },
                            t => return Err(DetectorError::Format(format!("bad node tag {t}"))),
                        };
                        nodes.push(node);
                    }
                    let in_range = nodes.iter().all(|n| match *n {
                        forest::Node::Split { feature, left, right, .. } => {
                            feature < dim && left < n_nodes && right < n_nodes
                        }
                        forest::Node::Leaf { .. } => true,
                    });
                    if !in_range || nodes.is_empty() {
                        return Err(DetectorError::Format("malformed tree".into()));
                    }
                    trees.push(forest::Tree { nodes });
                }
                Params::Forest(trees)
            }
        };
        r.expect_end().map_err(fmt)?;
        Ok(Self {
            kind,
            feature_kind,
            subset_id,
            dim,
            seed,
            standardizer: Standardizer { mean, scale },
            provenance,
            training_history,
            params,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), DetectorError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, DetectorError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

#[doc(hidden)]
pub mod oracle_support {
    //! Internals exposed for independent oracle tests.
    pub use super::forest::gini;
    pub use super::svm::objective as svm_objective;
}
