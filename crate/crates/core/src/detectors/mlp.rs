//! One-hidden-layer perceptron with a logistic output, trained by minibatch
//! SGD with momentum on class-weighted binary cross-entropy.

use ndarray::{Array1, Array2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct Mlp {
    pub w1: Array2<f64>,
    pub b1: Array1<f64>,
    pub w2: Array1<f64>,
    pub b2: f64,
}

pub(crate) struct MlpSettings {
    pub hidden: usize,
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub l2: f64,
}

fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

impl Mlp {
    /// Logit of the adversarial class.
    pub fn logit(&self, x: &[f64]) -> f64 {
        let x = ndarray::ArrayView1::from(x);
        let h = (self.w1.dot(&x) + &self.b1).mapv(|v| v.max(0.0));
        self.w2.dot(&h) + self.b2
    }
}

pub(crate) fn fit(rows: &[Vec<f64>], labels: &[bool], weights: &[f64], s: &MlpSettings, seed: u64) -> Mlp {
    let d = rows[0].len();
    let n = rows.len();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let init1 = Normal::new(0.0, (2.0 / d as f64).sqrt()).expect("finite");
    let init2 = Normal::new(0.0, (1.0 / s.hidden as f64).sqrt()).expect("finite");
    let mut m = Mlp {
        w1: Array2::from_shape_simple_fn((s.hidden, d), || init1.sample(&mut rng)),
        b1: Array1::zeros(s.hidden),
        w2: Array1::from_shape_simple_fn(s.hidden, || init2.sample(&mut rng)),
        b2: 0.0,
    };
    let x_all = Array2::from_shape_fn((n, d), |(i, j)| rows[i][j]);
    let mean_weight = weights.iter().sum::<f64>() / n as f64;
    let mut v_w1 = Array2::<f64>::zeros((s.hidden, d));
    let mut v_b1 = Array1::<f64>::zeros(s.hidden);
    let mut v_w2 = Array1::<f64>::zeros(s.hidden);
    let mut v_b2 = 0.0;
    let mut order: Vec<usize> = (0..n).collect();
    for _ in 0..s.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(s.batch_size.max(1)) {
            let xb = x_all.select(Axis(0), chunk);
            let z1 = xb.dot(&m.w1.t()) + &m.b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            let logits = a1.dot(&m.w2) + m.b2;
            // d loss / d logit = c * (p - y)
            let dz2: Array1<f64> = chunk
                .iter()
                .zip(logits.iter())
                .map(|(&i, &z)| {
                    let y = if labels[i] { 1.0 } else { 0.0 };
                    weights[i] / mean_weight * (sigmoid(z) - y) / chunk.len() as f64
                })
                .collect();
            let g_w2 = a1.t().dot(&dz2) + &(&m.w2 * s.l2);
            let g_b2 = dz2.sum();
            let mut dz1 = dz2.view().insert_axis(Axis(1)).dot(&m.w2.view().insert_axis(Axis(0)));
            dz1.zip_mut_with(&z1, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let g_w1 = dz1.t().dot(&xb) + &(&m.w1 * s.l2);
            let g_b1 = dz1.sum_axis(Axis(0));
            v_w1 = &v_w1 * s.momentum - &(g_w1 * s.learning_rate);
            v_b1 = &v_b1 * s.momentum - &(g_b1 * s.learning_rate);
            v_w2 = &v_w2 * s.momentum - &(g_w2 * s.learning_rate);
            v_b2 = v_b2 * s.momentum - g_b2 * s.learning_rate;
            m.w1 += &v_w1;
            m.b1 += &v_b1;
            m.w2 += &v_w2;
            m.b2 += v_b2;
        }
    }
    m
}
