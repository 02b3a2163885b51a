//! A small fully differentiable classifier trained in-repo:
//! flatten -> dense(h) -> ReLU -> dense(K) -> softmax.
//!
//! The file layout written by [`DeskModel::to_bytes`] is documented in
//! `docs/formats.md`.

use std::path::Path;

use ndarray::{s, Array1, Array2, ArrayView1, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::binio::{self, Reader, Writer};
use crate::error::{GatewayError, ModelError};
use crate::gateway::{Classifier, Differentiable, Top5};
use crate::image::Image;
use crate::ops;
use crate::synth::LabeledImage;

const MAGIC: &[u8; 4] = b"ADDM";
const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    pub momentum: f64,
    pub batch_size: usize,
    pub hidden: usize,
    pub weight_decay: f64,
    pub seed: u64,
    /// Label-space size; defaults to `max label + 1`.
    pub num_labels: Option<usize>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 20,
            learning_rate: 0.01,
            momentum: 0.9,
            batch_size: 32,
            hidden: 128,
            weight_decay: 0.0,
            seed: 0,
            num_labels: None,
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Accuracy {
    pub top1: f64,
    pub top5: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub epoch_losses: Vec<f64>,
    pub train: Accuracy,
    pub validation: Option<Accuracy>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeskModel {
    id: String,
    width: u32,
    height: u32,
    num_labels: usize,
    hidden: usize,
    seed: u64,
    provenance: String,
    w1: Array2<f64>,
    b1: Array1<f64>,
    w2: Array2<f64>,
    b2: Array1<f64>,
}

fn softmax_in_place(z: &mut [f64]) {
    let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in z.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    for v in z.iter_mut() {
        *v /= sum;
    }
}

fn flatten(img: &Image) -> Array1<f64> {
    img.as_slice().iter().map(|v| v - 0.5).collect()
}

impl DeskModel {
    /// Seeded He-normal initialization.
    pub fn initialize(width: u32, height: u32, num_labels: usize, hidden: usize, seed: u64) -> Self {
        let dim = width as usize * height as usize * 3;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n1 = Normal::new(0.0, (2.0 / dim as f64).sqrt()).expect("finite");
        let n2 = Normal::new(0.0, (2.0 / hidden as f64).sqrt()).expect("finite");
        let w1 = Array2::from_shape_simple_fn((hidden, dim), || n1.sample(&mut rng));
        let w2 = Array2::from_shape_simple_fn((num_labels, hidden), || n2.sample(&mut rng));
        let mut model = Self {
            id: String::new(),
            width,
            height,
            num_labels,
            hidden,
            seed,
            provenance: String::new(),
            w1,
            b1: Array1::zeros(hidden),
            w2,
            b2: Array1::zeros(num_labels),
        };
        model.refresh_id();
        model
    }

    fn refresh_id(&mut self) {
        let mut w = Writer::default();
        w.f64s(self.w1.as_slice().expect("standard layout"));
        w.f64s(self.b1.as_slice().expect("standard layout"));
        w.f64s(self.w2.as_slice().expect("standard layout"));
        w.f64s(self.b2.as_slice().expect("standard layout"));
        let digest = binio::sha256_hex(&w.finish());
        self.id = format!("desk-{}", &digest[..12]);
    }

    pub fn num_labels(&self) -> usize {
        self.num_labels
    }

    pub fn hidden(&self) -> usize {
        self.hidden
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn input_dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    pub fn provenance(&self) -> &str {
        &self.provenance
    }

    pub fn set_provenance(&mut self, provenance: impl Into<String>) {
        self.provenance = provenance.into();
    }

    /// Weight matrices in file order, for inspection and tests.
    pub fn weights(&self) -> [&[f64]; 4] {
        [
            self.w1.as_slice().expect("standard layout"),
            self.b1.as_slice().expect("standard layout"),
            self.w2.as_slice().expect("standard layout"),
            self.b2.as_slice().expect("standard layout"),
        ]
    }

    fn check_dims(&self, img: &Image) -> Result<(), ModelError> {
        if img.dims() != (self.width, self.height) {
            return Err(ModelError::DimensionMismatch {
                expected: (self.width, self.height),
                found: img.dims(),
            });
        }
        Ok(())
    }

    fn hidden_pre(&self, x: ArrayView1<f64>) -> Array1<f64> {
        self.w1.dot(&x) + &self.b1
    }

    fn logits_from_hidden(&self, z1: &Array1<f64>) -> Array1<f64> {
        let a1 = z1.mapv(|v| v.max(0.0));
        self.w2.dot(&a1) + &self.b2
    }

    /// Class probabilities for an image of exactly the input size.
    pub fn forward(&self, img: &Image) -> Result<Vec<f64>, ModelError> {
        self.check_dims(img)?;
        let x = flatten(img);
        let mut p = self.logits_from_hidden(&self.hidden_pre(x.view())).to_vec();
        softmax_in_place(&mut p);
        Ok(p)
    }

    /// Exact gradient of `-log p[label]` with respect to the input intensities.
    pub fn input_gradient(&self, img: &Image, label: u32) -> Result<Vec<f64>, ModelError> {
        self.check_dims(img)?;
        if label as usize >= self.num_labels {
            return Err(ModelError::LabelOutOfRange { label, num_labels: self.num_labels });
        }
        let x = flatten(img);
        let z1 = self.hidden_pre(x.view());
        let mut p = self.logits_from_hidden(&z1).to_vec();
        softmax_in_place(&mut p);
        p[label as usize] -= 1.0;
        let dz2 = Array1::from(p);
        let mut dz1 = self.w2.t().dot(&dz2);
        dz1.zip_mut_with(&z1, |g, &z| {
            if z <= 0.0 {
                *g = 0.0;
            }
        });
        Ok(self.w1.t().dot(&dz1).to_vec())
    }

    /// Backend preprocessing: center crop or pad to the input size when needed.
    fn preprocess(&self, img: &Image) -> Result<Image, GatewayError> {
        if img.dims() == (self.width, self.height) {
            Ok(img.clone())
        } else {
            Ok(ops::center_crop_or_pad(img, self.width, self.height))
        }
    }

    pub fn accuracy(&self, set: &[LabeledImage]) -> Result<Accuracy, ModelError> {
        let (mut top1, mut top5) = (0usize, 0usize);
        for s in set {
            let t = Top5::from_probabilities(&self.forward(&s.image)?)
                .map_err(|e| ModelError::Format(e.to_string()))?;
            top1 += usize::from(t.top1() == s.label);
            top5 += usize::from(t.contains(s.label));
        }
        let n = set.len().max(1) as f64;
        Ok(Accuracy { top1: top1 as f64 / n, top5: top5 as f64 / n, count: set.len() })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut w = Writer::new(MAGIC, FORMAT_VERSION);
        w.u32(self.num_labels as u32);
        w.u32(self.hidden as u32);
        w.u32(self.width);
        w.u32(self.height);
        w.u32(3);
        w.u64(self.seed);
        w.str(&self.provenance);
        for m in self.weights() {
            w.f64s(m);
        }
        w.finish()
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self, ModelError> {
        let fmt = ModelError::Format;
        let (mut r, version) = Reader::open(bytes, MAGIC).map_err(fmt)?;
        if version != FORMAT_VERSION {
            return Err(ModelError::Format(format!("unsupported version {version}")));
        }
        let k = r.u32().map_err(fmt)? as usize;
        let h = r.u32().map_err(fmt)? as usize;
        let width = r.u32().map_err(fmt)?;
        let height = r.u32().map_err(fmt)?;
        let channels = r.u32().map_err(fmt)?;
        if channels != 3 {
            return Err(ModelError::Format(format!("expected 3 channels, found {channels}")));
        }
        let seed = r.u64().map_err(fmt)?;
        let provenance = r.str().map_err(fmt)?;
        let dim = width as usize * height as usize * 3;
        let w1 = Array2::from_shape_vec((h, dim), r.f64s(h * dim).map_err(fmt)?)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let b1 = Array1::from(r.f64s(h).map_err(fmt)?);
        let w2 = Array2::from_shape_vec((k, h), r.f64s(k * h).map_err(fmt)?)
            .map_err(|e| ModelError::Format(e.to_string()))?;
        let b2 = Array1::from(r.f64s(k).map_err(fmt)?);
        r.expect_end().map_err(fmt)?;
        let all_finite = [&w1.view(), &w2.view()].iter().all(|m| m.iter().all(|v| v.is_finite()))
            && b1.iter().chain(b2.iter()).all(|v| v.is_finite());
        if !all_finite {
            return Err(ModelError::Format("non-finite weight".into()));
        }
        let mut model = Self {
            id: String::new(),
            width,
            height,
            num_labels: k,
            hidden: h,
            seed,
            provenance,
            w1,
            b1,
            w2,
            b2,
        };
        model.refresh_id();
        Ok(model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        Ok(std::fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, ModelError> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

/// Minibatch SGD with momentum on cross-entropy. Single-threaded and fully
/// determined by `(train, config)`.
pub fn train(
    train: &[LabeledImage],
    validation: &[LabeledImage],
    config: &TrainConfig,
) -> Result<(DeskModel, TrainReport), ModelError> {
    let first = train.first().ok_or(ModelError::EmptyDataset)?;
    let (width, height) = first.image.dims();
    if let Some(bad) = train.iter().chain(validation).find(|s| s.image.dims() != (width, height)) {
        return Err(ModelError::DimensionMismatch { expected: (width, height), found: bad.image.dims() });
    }
    let max_label = train.iter().map(|s| s.label).max().unwrap_or(0) as usize;
    let num_labels = config.num_labels.unwrap_or(max_label + 1);
    if let Some(s) = train.iter().find(|s| s.label as usize >= num_labels) {
        return Err(ModelError::LabelOutOfRange { label: s.label, num_labels });
    }
    let distinct = {
        let mut seen = vec![false; num_labels];
        train.iter().for_each(|s| seen[s.label as usize] = true);
        seen.iter().filter(|&&b| b).count()
    };
    if distinct < 2 {
        return Err(ModelError::TooFewLabels(distinct));
    }

    let mut model = DeskModel::initialize(width, height, num_labels, config.hidden, config.seed);
    let dim = width as usize * height as usize * 3;
    let n = train.len();
    let mut x_all = Array2::<f64>::zeros((n, dim));
    for (mut row, s) in x_all.axis_iter_mut(Axis(0)).zip(train) {
        row.assign(&flatten(&s.image));
    }

    let mut v_w1 = Array2::<f64>::zeros(model.w1.raw_dim());
    let mut v_b1 = Array1::<f64>::zeros(model.hidden);
    let mut v_w2 = Array2::<f64>::zeros(model.w2.raw_dim());
    let mut v_b2 = Array1::<f64>::zeros(num_labels);
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x005e_ed0f_5eed);
    let batch = config.batch_size.max(1);
    let (lr, mu, wd) = (config.learning_rate, config.momentum, config.weight_decay);
    let mut epoch_losses = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        for chunk in order.chunks(batch) {
            let b = chunk.len();
            let mut xb = Array2::<f64>::zeros((b, dim));
            for (mut row, &i) in xb.axis_iter_mut(Axis(0)).zip(chunk) {
                row.assign(&x_all.slice(s![i, ..]));
            }
            let z1 = xb.dot(&model.w1.t()) + &model.b1;
            let a1 = z1.mapv(|v| v.max(0.0));
            let mut p = a1.dot(&model.w2.t()) + &model.b2;
            for (mut row, &i) in p.axis_iter_mut(Axis(0)).zip(chunk) {
                let slice = row.as_slice_mut().expect("row-major");
                softmax_in_place(slice);
                let y = train[i].label as usize;
                loss_sum -= slice[y].ln();
                slice[y] -= 1.0;
            }
            let dz2 = p / b as f64;
            let g_w2 = dz2.t().dot(&a1) + &(&model.w2 * wd);
            let g_b2 = dz2.sum_axis(Axis(0));
            let mut dz1 = dz2.dot(&model.w2);
            dz1.zip_mut_with(&z1, |g, &z| {
                if z <= 0.0 {
                    *g = 0.0;
                }
            });
            let g_w1 = dz1.t().dot(&xb) + &(&model.w1 * wd);
            let g_b1 = dz1.sum_axis(Axis(0));

            v_w1 = &v_w1 * mu - &(g_w1 * lr);
            v_b1 = &v_b1 * mu - &(g_b1 * lr);
            v_w2 = &v_w2 * mu - &(g_w2 * lr);
            v_b2 = &v_b2 * mu - &(g_b2 * lr);
            model.w1 += &v_w1;
            model.b1 += &v_b1;
            model.w2 += &v_w2;
            model.b2 += &v_b2;
        }
        let mean_loss = loss_sum / n as f64;
        if !mean_loss.is_finite() {
            return Err(ModelError::NonFiniteLoss { epoch });
        }
        epoch_losses.push(mean_loss);
    }
    model.refresh_id();

    let train_acc = model.accuracy(train)?;
    let validation = if validation.is_empty() { None } else { Some(model.accuracy(validation)?) };
    Ok((model, TrainReport { epoch_losses, train: train_acc, validation }))
}

impl Differentiable for DeskModel {
    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn input_dims(&self) -> (u32, u32) {
        (self.width, self.height)
    }

    fn probabilities(&self, img: &Image) -> Result<Vec<f64>, ModelError> {
        self.forward(img)
    }

    fn loss_gradient(&self, img: &Image, label: u32) -> Result<Vec<f64>, ModelError> {
        self.input_gradient(img, label)
    }
}

impl Classifier for DeskModel {
    fn id(&self) -> &str {
        &self.id
    }

    fn num_labels(&self) -> usize {
        self.num_labels
    }

    fn input_contract(&self) -> String {
        format!(
            "center crop or black pad to {}x{}, intensities shifted by -0.5",
            self.width, self.height
        )
    }

    fn classify_top5(&self, img: &Image) -> Result<Top5, GatewayError> {
        let x = self.preprocess(img)?;
        let probs = self
            .forward(&x)
            .map_err(|e| GatewayError::BackendUnavailable(e.to_string()))?;
        Top5::from_probabilities(&probs)
    }

    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        Some(self)
    }
}
