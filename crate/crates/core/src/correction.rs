//! Label correction by frequency voting over post-operation top-5 tuples.
//!
//! Every label occurrence in every selected `L_i` (any position) is one vote;
//! the base tuple does not vote. The five most voted labels, in descending
//! vote order, form the corrected top-5. Equal votes prefer the label with
//! the lower mean position, then the lower label id.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::CorrectionError;
use crate::features::{LabelTrace, OperationSubset};
use crate::gateway::Top5;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CorrectionResult {
    /// Up to five labels, most voted first.
    pub labels: Vec<u32>,
    /// Vote count of each entry of `labels`.
    pub votes: Vec<u32>,
    pub subset_id: String,
}

#[derive(Default, Clone, Copy)]
struct Tally {
    votes: u32,
    position_sum: u64,
}

/// Ranks labels by votes over arbitrary label tuples. Returns every observed
/// label in rank order.
pub fn rank_votes<'a>(tuples: impl IntoIterator<Item = &'a [u32]>) -> Vec<(u32, u32)> {
    let mut tally: BTreeMap<u32, Tally> = BTreeMap::new();
    for tuple in tuples {
        for (pos, &label) in tuple.iter().enumerate() {
            let t = tally.entry(label).or_default();
            t.votes += 1;
            t.position_sum += pos as u64;
        }
    }
    let mut ranked: Vec<(u32, Tally)> = tally.into_iter().collect();
    // mean positions compared by cross-multiplication to stay exact
    ranked.sort_by(|(la, a), (lb, b)| {
        b.votes
            .cmp(&a.votes)
            .then_with(|| {
                (a.position_sum * u64::from(b.votes)).cmp(&(b.position_sum * u64::from(a.votes)))
            })
            .then(la.cmp(lb))
    });
    ranked.into_iter().map(|(l, t)| (l, t.votes)).collect()
}

pub fn correct_labels(t: &LabelTrace, subset: &OperationSubset) -> Result<CorrectionResult, CorrectionError> {
    if subset.is_empty() {
        return Err(CorrectionError::EmptySubset);
    }
    let selected = subset.select(t)?;
    let ranked = rank_votes(selected.iter().map(|p| &p.labels[..]));
    let (labels, votes): (Vec<u32>, Vec<u32>) = ranked.into_iter().take(5).unzip();
    let result = CorrectionResult { labels, votes, subset_id: subset.id.clone() };
    if result.labels.len() < 5 {
        return Err(CorrectionError::FewerThanFiveLabels { partial: result });
    }
    Ok(result)
}

/// How a corrected result is matched against its reference labels.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MatchRule {
    /// The reference top-1 appears among the corrected five.
    #[default]
    Top1InTop5,
    /// The corrected top-1 equals the reference top-1.
    Top1Match,
    /// The corrected tuple equals the reference tuple, in order.
    ExactTuple,
}

impl MatchRule {
    pub fn name(self) -> &'static str {
        match self {
            MatchRule::Top1InTop5 => "top1-in-top5",
            MatchRule::Top1Match => "top1-match",
            MatchRule::ExactTuple => "exact-tuple",
        }
    }

    pub fn matches(self, result: &CorrectionResult, reference: &Top5) -> bool {
        match self {
            MatchRule::Top1InTop5 => result.labels.contains(&reference.top1()),
            MatchRule::Top1Match => result.labels.first() == Some(&reference.top1()),
            MatchRule::ExactTuple => result.labels[..] == reference.labels[..],
        }
    }
}

/// Percentage (0 to 100) of results matching their reference. Empty input
/// yields 0.
pub fn correction_rate(results: &[CorrectionResult], references: &[Top5], rule: MatchRule) -> f64 {
    assert_eq!(results.len(), references.len(), "one reference per result");
    if results.is_empty() {
        return 0.0;
    }
    let hits = results
        .iter()
        .zip(references)
        .filter(|(r, refs)| rule.matches(r, refs))
        .count();
    100.0 * hits as f64 / results.len() as f64
}
