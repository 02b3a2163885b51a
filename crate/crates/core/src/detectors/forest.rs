//! Random forest of shallow Gini trees with bootstrap rows and per-node
//! feature subsampling. Ties vote adversarial.

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

#[derive(Debug, Clone, PartialEq)]
pub(crate) enum Node {
    Split { feature: usize, threshold: f64, left: usize, right: usize },
    Leaf { adversarial: bool, adversarial_share: f64 },
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Tree {
    pub nodes: Vec<Node>,
}

impl Tree {
    pub fn predict(&self, x: &[f64]) -> bool {
        let mut i = 0;
        loop {
            match self.nodes[i] {
                Node::Split { feature, threshold, left, right } => {
                    i = if x[feature] <= threshold { left } else { right };
                }
                Node::Leaf { adversarial, .. } => return adversarial,
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MaxFeatures {
    Sqrt,
    All,
}

pub(crate) struct ForestSettings {
    pub trees: usize,
    pub max_depth: usize,
    pub bootstrap: bool,
    pub max_features: MaxFeatures,
}

/// Weighted Gini impurity of a node with class masses `(normal, adversarial)`.
pub fn gini(m0: f64, m1: f64) -> f64 {
    let total = m0 + m1;
    if total <= 0.0 {
        return 0.0;
    }
    let (p0, p1) = (m0 / total, m1 / total);
    1.0 - p0 * p0 - p1 * p1
}

/// Best split `(feature, threshold, weighted child impurity)` over the
/// candidate features; thresholds are midpoints between consecutive distinct
/// values. The first strictly better candidate wins.
pub(crate) fn best_split(
    rows: &[Vec<f64>],
    labels: &[bool],
    mass: &[f64],
    members: &[usize],
    candidates: &[usize],
) -> Option<(usize, f64, f64)> {
    let (mut t0, mut t1) = (0.0, 0.0);
    for &i in members {
        if labels[i] {
            t1 += mass[i];
        } else {
            t0 += mass[i];
        }
    }
    let mut best: Option<(usize, f64, f64)> = None;
    let mut sorted = members.to_vec();
    for &f in candidates {
        sorted.sort_by(|&a, &b| rows[a][f].total_cmp(&rows[b][f]).then(a.cmp(&b)));
        let (mut l0, mut l1) = (0.0, 0.0);
        for k in 0..sorted.len() - 1 {
            let i = sorted[k];
            if labels[i] {
                l1 += mass[i];
            } else {
                l0 += mass[i];
            }
            let (v, next) = (rows[i][f], rows[sorted[k + 1]][f]);
            if v == next {
                continue;
            }
            let (r0, r1) = (t0 - l0, t1 - l1);
            let impurity = (l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1);
            if best.is_none_or(|(_, _, b)| impurity < b) {
                best = Some((f, (v + next) / 2.0, impurity));
            }
        }
    }
    best
}

fn leaf(labels: &[bool], mass: &[f64], members: &[usize]) -> Node {
    let (mut m0, mut m1) = (0.0, 0.0);
    for &i in members {
        if labels[i] {
            m1 += mass[i];
        } else {
            m0 += mass[i];
        }
    }
    let total = m0 + m1;
    Node::Leaf {
        adversarial: m1 >= m0,
        adversarial_share: if total > 0.0 { m1 / total } else { 0.5 },
    }
}

fn grow(
    rows: &[Vec<f64>],
    labels: &[bool],
    mass: &[f64],
    members: Vec<usize>,
    depth: usize,
    s: &ForestSettings,
    rng: &mut ChaCha8Rng,
    nodes: &mut Vec<Node>,
) -> usize {
    let id = nodes.len();
    nodes.push(leaf(labels, mass, &members));
    let pure = members.iter().all(|&i| labels[i]) || members.iter().all(|&i| !labels[i]);
    if depth >= s.max_depth || pure || members.len() < 2 {
        return id;
    }
    let d = rows[0].len();
    let candidates: Vec<usize> = match s.max_features {
        MaxFeatures::All => (0..d).collect(),
        MaxFeatures::Sqrt => {
            let k = ((d as f64).sqrt().round() as usize).clamp(1, d);
            let mut c = sample(rng, d, k).into_vec();
            c.sort_unstable();
            c
        }
    };
    let Some((feature, threshold, _)) = best_split(rows, labels, mass, &members, &candidates) else {
        return id;
    };
    let (l, r): (Vec<usize>, Vec<usize>) = members.iter().partition(|&&i| rows[i][feature] <= threshold);
    let left = grow(rows, labels, mass, l, depth + 1, s, rng, nodes);
    let right = grow(rows, labels, mass, r, depth + 1, s, rng, nodes);
    nodes[id] = Node::Split { feature, threshold, left, right };
    id
}

/// Seed of tree `k`: master seed advanced by a fixed stride.
pub(crate) fn tree_seed(master: u64, k: usize) -> u64 {
    master.wrapping_add((k as u64 + 1).wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

pub(crate) fn fit(rows: &[Vec<f64>], labels: &[bool], weights: &[f64], s: &ForestSettings, seed: u64) -> Vec<Tree> {
    let n = rows.len();
    (0..s.trees)
        .map(|k| {
            let mut rng = ChaCha8Rng::seed_from_u64(tree_seed(seed, k));
            let mut counts = vec![0.0; n];
            if s.bootstrap {
                for _ in 0..n {
                    counts[rng.random_range(0..n)] += 1.0;
                }
            } else {
                counts.iter_mut().for_each(|c| *c = 1.0);
            }
            let mass: Vec<f64> = counts.iter().zip(weights).map(|(c, w)| c * w).collect();
            let members: Vec<usize> = (0..n).filter(|&i| counts[i] > 0.0).collect();
            let mut nodes = Vec::new();
            grow(rows, labels, &mass, members, 0, s, &mut rng, &mut nodes);
            Tree { nodes }
        })
        .collect()
}

/// Majority vote; ties go to adversarial.
pub(crate) fn vote(trees: &[Tree], x: &[f64]) -> (bool, f64) {
    let yes = trees.iter().filter(|t| t.predict(x)).count();
    let share = yes as f64 / trees.len().max(1) as f64;
    (2 * yes >= trees.len(), share)
}
