//! Linear SVM: L2-regularized hinge loss minimized by stochastic
//! subgradient steps (Pegasos schedule) with iterate averaging.
//!
//! A constant 1 is appended to every row so the bias is learned as an
//! ordinary (regularized) weight.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn margin(w: &[f64], x: &[f64]) -> f64 {
    let d = x.len();
    dot(&w[..d], x) + w[d]
}

/// Regularized, class-weighted hinge objective.
pub fn objective(w: &[f64], rows: &[Vec<f64>], labels: &[bool], weights: &[f64], lambda: f64) -> f64 {
    let total: f64 = weights.iter().sum();
    let hinge: f64 = rows
        .iter()
        .zip(labels)
        .zip(weights)
        .map(|((x, &y), &c)| {
            let y = if y { 1.0 } else { -1.0 };
            c * (1.0 - y * margin(w, x)).max(0.0)
        })
        .sum();
    0.5 * lambda * dot(w, w) + hinge / total
}

pub(crate) struct SvmFit {
    pub weights: Vec<f64>,
    pub bias: f64,
    /// Objective of the kept averaged iterate after each epoch.
    pub history: Vec<f64>,
}

pub(crate) fn fit(
    rows: &[Vec<f64>],
    labels: &[bool],
    weights: &[f64],
    lambda: f64,
    epochs: usize,
    seed: u64,
) -> SvmFit {
    let d = rows[0].len();
    let mut w = vec![0.0; d + 1];
    let mut avg = vec![0.0; d + 1];
    let mut order: Vec<usize> = (0..rows.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mean_weight = weights.iter().sum::<f64>() / weights.len() as f64;
    let radius = 1.0 / lambda.sqrt();
    let mut history = Vec::with_capacity(epochs);
    let mut best: Option<(Vec<f64>, f64)> = None;
    let mut t = 0usize;
    for _ in 0..epochs {
        order.shuffle(&mut rng);
        for &i in &order {
            t += 1;
            let eta = 1.0 / (lambda * t as f64);
            let y = if labels[i] { 1.0 } else { -1.0 };
            let c = weights[i] / mean_weight;
            let active = y * margin(&w, &rows[i]) < 1.0;
            let shrink = 1.0 - eta * lambda;
            w.iter_mut().for_each(|v| *v *= shrink);
            if active {
                for (v, x) in w.iter_mut().zip(&rows[i]) {
                    *v += eta * c * y * x;
                }
                w[d] += eta * c * y;
            }
            let norm = dot(&w, &w).sqrt();
            if norm > radius {
                w.iter_mut().for_each(|v| *v *= radius / norm);
            }
            let k = 1.0 / t as f64;
            for (a, v) in avg.iter_mut().zip(&w) {
                *a += (v - *a) * k;
            }
        }
        // an epoch whose average scores worse than the kept one is not adopted
        let score = objective(&avg, rows, labels, weights, lambda);
        if best.as_ref().is_none_or(|(_, b)| score <= *b) {
            best = Some((avg.clone(), score));
        }
        history.push(best.as_ref().map_or(score, |(_, b)| *b));
    }
    let kept = best.map_or(avg, |(w, _)| w);
    SvmFit { bias: kept[d], weights: kept[..d].to_vec(), history }
}
