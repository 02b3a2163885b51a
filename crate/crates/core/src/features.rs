//! Label traces and the two stability features derived from them.
//!
//! For base labels `L = (a, b, c, d, e)` and post-operation labels
//! `L_i = (a_i, ..., e_i)`, the counting feature holds, per position, how many
//! selected operations left the base label in place; the differences
//! feature holds one change flag per operation and position.

use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::FeatureError;
use crate::gateway::{Classifier, Top5};
use crate::image::Image;
use crate::ops::{Family, OperationSuite};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabelTrace {
    pub image_id: String,
    pub backend_id: String,
    pub base: Top5,
    /// One entry per suite operation, in suite order.
    pub post: Vec<Top5>,
}

/// Classifies `img`, then every operation of `suite` applied to `img`.
pub fn trace(
    image_id: &str,
    img: &Image,
    backend: &dyn Classifier,
    suite: &OperationSuite,
) -> Result<LabelTrace, FeatureError> {
    let base = backend.classify_top5(img).map_err(FeatureError::Base)?;
    let post = suite
        .iter()
        .map(|spec| {
            let out = spec
                .op
                .apply(img)
                .map_err(|source| FeatureError::Operation { index: spec.index, source })?;
            backend
                .classify_top5(&out)
                .map_err(|source| FeatureError::Classify { index: spec.index, source })
        })
        .collect::<Result<_, _>>()?;
    Ok(LabelTrace {
        image_id: image_id.to_string(),
        backend_id: backend.id().to_string(),
        base,
        post,
    })
}

/// Named operation subsets mirroring the detector evaluation columns.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SubsetId {
    Jpeg,
    Scaling,
    Blur,
    Rotation,
    JpegScaling,
    All,
}

impl SubsetId {
    pub const ALL: [SubsetId; 6] = [
        SubsetId::Jpeg,
        SubsetId::Scaling,
        SubsetId::Blur,
        SubsetId::Rotation,
        SubsetId::JpegScaling,
        SubsetId::All,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SubsetId::Jpeg => "jpeg",
            SubsetId::Scaling => "scaling",
            SubsetId::Blur => "blur",
            SubsetId::Rotation => "rotation",
            SubsetId::JpegScaling => "jpeg+scaling",
            SubsetId::All => "all",
        }
    }

    pub fn parse(s: &str) -> Result<Self, FeatureError> {
        Self::ALL
            .into_iter()
            .find(|id| id.name() == s)
            .ok_or_else(|| FeatureError::UnknownSubset(s.to_string()))
    }

    fn families(self) -> &'static [Family] {
        match self {
            SubsetId::Jpeg => &[Family::JpegCompress],
            SubsetId::Scaling => &[Family::Scale],
            SubsetId::Blur => &[Family::GaussianBlur],
            SubsetId::Rotation => &[Family::Rotate],
            SubsetId::JpegScaling => &[Family::JpegCompress, Family::Scale],
            SubsetId::All => &[Family::JpegCompress, Family::GaussianBlur, Family::Rotate, Family::Scale],
        }
    }

    /// Resolves the subset against a suite.
    pub fn resolve(self, suite: &OperationSuite) -> OperationSubset {
        let mut positions: Vec<usize> = self
            .families()
            .iter()
            .flat_map(|&f| suite.positions_of(f))
            .collect();
        positions.sort_unstable();
        OperationSubset { id: self.name().to_string(), positions }
    }

    pub fn canonical(self) -> OperationSubset {
        self.resolve(&OperationSuite::canonical())
    }
}

impl fmt::Display for SubsetId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A set of zero-based suite positions with a display id.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct OperationSubset {
    pub id: String,
    pub positions: Vec<usize>,
}

impl OperationSubset {
    pub fn new(id: impl Into<String>, positions: Vec<usize>) -> Self {
        Self { id: id.into(), positions }
    }

    pub fn len(&self) -> usize {
        self.positions.len()
    }

    pub fn is_empty(&self) -> bool {
        self.positions.is_empty()
    }

    /// Post-operation tuples selected by this subset.
    pub fn select<'a>(&self, t: &'a LabelTrace) -> Result<Vec<&'a Top5>, FeatureError> {
        if self.positions.is_empty() {
            return Err(FeatureError::EmptySubset);
        }
        self.positions
            .iter()
            .map(|&p| {
                t.post.get(p).ok_or_else(|| FeatureError::SubsetOutOfRange {
                    subset: self.id.clone(),
                    position: p,
                    len: t.post.len(),
                })
            })
            .collect()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum FeatureKind {
    Counting,
    Differences,
    Concatenated,
}

impl FeatureKind {
    pub fn name(self) -> &'static str {
        match self {
            FeatureKind::Counting => "count",
            FeatureKind::Differences => "diff",
            FeatureKind::Concatenated => "count+diff",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [FeatureKind::Counting, FeatureKind::Differences, FeatureKind::Concatenated]
            .into_iter()
            .find(|k| k.name() == s)
    }

    pub fn dimension(self, subset_len: usize) -> usize {
        match self {
            FeatureKind::Counting => 5,
            FeatureKind::Differences => 5 * subset_len,
            FeatureKind::Concatenated => 5 + 5 * subset_len,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FeatureVector {
    pub kind: FeatureKind,
    pub values: Vec<u32>,
    pub subset_id: String,
    pub backend_id: String,
}

/// Per-position survival counts `(C(a), C(b), C(c), C(d), C(e))`.
pub fn counting_feature(t: &LabelTrace, subset: &OperationSubset) -> Result<FeatureVector, FeatureError> {
    let mut counts = [0u32; 5];
    for post in subset.select(t)? {
        for (pos, count) in counts.iter_mut().enumerate() {
            *count += u32::from(post.labels[pos] == t.base.labels[pos]);
        }
    }
    Ok(FeatureVector {
        kind: FeatureKind::Counting,
        values: counts.to_vec(),
        subset_id: subset.id.clone(),
        backend_id: t.backend_id.clone(),
    })
}

/// Concatenated change flags, five per selected operation.
pub fn differences_feature(t: &LabelTrace, subset: &OperationSubset) -> Result<FeatureVector, FeatureError> {
    let values = subset
        .select(t)?
        .into_iter()
        .flat_map(|post| (0..5).map(move |pos| u32::from(post.labels[pos] != t.base.labels[pos])))
        .collect();
    Ok(FeatureVector {
        kind: FeatureKind::Differences,
        values,
        subset_id: subset.id.clone(),
        backend_id: t.backend_id.clone(),
    })
}

pub fn feature(t: &LabelTrace, subset: &OperationSubset, kind: FeatureKind) -> Result<FeatureVector, FeatureError> {
    match kind {
        FeatureKind::Counting => counting_feature(t, subset),
        FeatureKind::Differences => differences_feature(t, subset),
        FeatureKind::Concatenated => {
            let mut v = counting_feature(t, subset)?;
            v.values.extend(differences_feature(t, subset)?.values);
            v.kind = FeatureKind::Concatenated;
            Ok(v)
        }
    }
}
