//! Gradient-based adversarial generation against a differentiable backend.
//!
//! Non-targeted attacks ascend the cross-entropy at the original top-1 label
//! and succeed once that label leaves the top five. Targeted attacks descend
//! the cross-entropy at a shifted target label and succeed once the target's
//! confidence reaches `target_confidence`.

use std::fmt;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::AttackError;
use crate::gateway::{Classifier, Differentiable, Top5};
use crate::image::Image;
use crate::ops;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackFamily {
    Fgsm,
    Gradient,
    Bim,
    Pgd,
    L1Iter,
    L2Iter,
}

impl AttackFamily {
    pub const ALL: [AttackFamily; 6] = [
        AttackFamily::Fgsm,
        AttackFamily::Gradient,
        AttackFamily::Bim,
        AttackFamily::Pgd,
        AttackFamily::L1Iter,
        AttackFamily::L2Iter,
    ];

    pub fn name(self) -> &'static str {
        match self {
            AttackFamily::Fgsm => "fgsm",
            AttackFamily::Gradient => "gradient",
            AttackFamily::Bim => "bim",
            AttackFamily::Pgd => "pgd",
            AttackFamily::L1Iter => "l1-iter",
            AttackFamily::L2Iter => "l2-iter",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|f| f.name() == s)
    }

    pub fn is_single_step(self) -> bool {
        matches!(self, AttackFamily::Fgsm | AttackFamily::Gradient)
    }
}

impl fmt::Display for AttackFamily {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AttackMode {
    Targeted,
    NonTargeted,
}

impl AttackMode {
    pub fn name(self) -> &'static str {
        match self {
            AttackMode::Targeted => "targeted",
            AttackMode::NonTargeted => "non-targeted",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttackConfig {
    pub family: AttackFamily,
    pub mode: AttackMode,
    /// L-infinity budget in intensity units.
    pub epsilon: f64,
    pub step_size: f64,
    pub max_iterations: usize,
    pub target_confidence: f64,
    /// Uniform start inside the epsilon ball (PGD only).
    pub random_start: bool,
    /// Label shift used to pick targets, `(top1 + shift) mod K`.
    pub target_shift: u64,
    pub seed: u64,
}

impl AttackConfig {
    /// Library-convention budgets: eps 8/255, step 2/255, 20 iterations.
    pub fn new(family: AttackFamily, mode: AttackMode) -> Self {
        Self {
            family,
            mode,
            epsilon: 8.0 / 255.0,
            step_size: 2.0 / 255.0,
            max_iterations: 20,
            target_confidence: 0.99,
            random_start: family == AttackFamily::Pgd,
            target_shift: 100,
            seed: 0,
        }
    }

    /// Checks the configuration invariants. A zero budget is accepted and
    /// yields an unsuccessful outcome.
    pub fn validate(&self) -> Result<(), AttackError> {
        let bad = |m: &str| Err(AttackError::InvalidConfig(m.to_string()));
        if !(0.0..=1.0).contains(&self.epsilon) {
            return bad("epsilon must lie in (0, 1]");
        }
        if self.epsilon == 0.0 {
            return Ok(());
        }
        if !(self.step_size > 0.0 && self.step_size <= self.epsilon) && !self.family.is_single_step() {
            return bad("step size must lie in (0, epsilon]");
        }
        if self.max_iterations == 0 {
            return bad("max iterations must be at least 1");
        }
        if !(self.target_confidence > 0.0 && self.target_confidence <= 1.0) {
            return bad("target confidence must lie in (0, 1]");
        }
        Ok(())
    }

    /// Short digest identifying this configuration in manifests.
    pub fn digest(&self) -> String {
        let json = serde_json::to_vec(self).expect("config serializes");
        crate::binio::sha256_hex(&json)[..16].to_string()
    }
}

/// What counts as a successful attack.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "kebab-case")]
pub enum SuccessCriterion {
    Targeted { target: u32, confidence: f64 },
    NonTargeted { original_top1: u32 },
}

impl SuccessCriterion {
    pub fn holds(&self, t: &Top5) -> bool {
        match *self {
            SuccessCriterion::Targeted { target, confidence } => {
                t.confidence_of(target).is_some_and(|c| c >= confidence)
            }
            SuccessCriterion::NonTargeted { original_top1 } => !t.contains(original_top1),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct PerturbationNorms {
    pub l1: f64,
    pub l2: f64,
    pub linf: f64,
}

impl PerturbationNorms {
    pub fn between(original: &Image, perturbed: &Image) -> Self {
        let mut n = Self::default();
        for (a, b) in original.as_slice().iter().zip(perturbed.as_slice()) {
            let d = (b - a).abs();
            n.l1 += d;
            n.l2 += d * d;
            n.linf = n.linf.max(d);
        }
        n.l2 = n.l2.sqrt();
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AttackOutcome {
    pub success: bool,
    /// Present iff `success`.
    pub adversarial: Option<Image>,
    /// Final iterate whether or not the attack succeeded.
    pub last_iterate: Image,
    pub iterations_used: usize,
    pub criterion: SuccessCriterion,
    pub original_top5: Top5,
    pub final_top5: Top5,
    pub norms: PerturbationNorms,
}

/// `(top1 + shift) mod K`.
pub fn shifted_target(top1: u32, num_labels: usize, shift: u64) -> u32 {
    ((u64::from(top1) + shift) % num_labels as u64) as u32
}

/// The shift actually used: when `shift` is a multiple of K the rule is
/// degenerate, so `max(1, round(K / 10))` is used instead.
pub fn effective_shift(num_labels: usize, shift: u64) -> u64 {
    if shift.is_multiple_of(num_labels as u64) {
        ((num_labels as f64 / 10.0).round() as u64).max(1)
    } else {
        shift
    }
}

pub fn attack_target(top1: u32, num_labels: usize, shift: u64) -> Result<u32, AttackError> {
    let target = shifted_target(top1, num_labels, effective_shift(num_labels, shift));
    if target == top1 {
        return Err(AttackError::DegenerateTarget { target });
    }
    Ok(target)
}

#[inline]
fn sign(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else if v < 0.0 {
        -1.0
    } else {
        0.0
    }
}

/// Per-pixel step direction. The L1 and L2 directions are rescaled by the
/// mean absolute value and the root mean square respectively, so a step of
/// size `s` moves an average pixel by about `s`.
fn direction(family: AttackFamily, g: &[f64]) -> Vec<f64> {
    let n = g.len() as f64;
    match family {
        AttackFamily::Fgsm | AttackFamily::Bim | AttackFamily::Pgd => g.iter().map(|&v| sign(v)).collect(),
        AttackFamily::L1Iter => {
            let scale = g.iter().map(|v| v.abs()).sum::<f64>() / n;
            g.iter().map(|&v| if scale > 0.0 { v / scale } else { 0.0 }).collect()
        }
        AttackFamily::Gradient | AttackFamily::L2Iter => {
            let rms = (g.iter().map(|v| v * v).sum::<f64>() / n).sqrt();
            g.iter().map(|&v| if rms > 0.0 { v / rms } else { 0.0 }).collect()
        }
    }
}

fn classify(model: &dyn Differentiable, img: &Image) -> Result<Top5, AttackError> {
    Ok(Top5::from_probabilities(&model.probabilities(img)?)?)
}

pub fn run_attack(cfg: &AttackConfig, backend: &dyn Classifier, img: &Image) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let model = backend
        .as_differentiable()
        .ok_or_else(|| AttackError::GradientUnavailable(backend.id().to_string()))?;
    run_attack_on(cfg, model, img)
}

/// Same as [`run_attack`] for a backend already known to be differentiable.
pub fn run_attack_on(cfg: &AttackConfig, model: &dyn Differentiable, img: &Image) -> Result<AttackOutcome, AttackError> {
    cfg.validate()?;
    let original_top5 = classify(model, img)?;
    let top1 = original_top5.top1();
    let (criterion, loss_label, ascend) = match cfg.mode {
        AttackMode::Targeted => {
            let target = attack_target(top1, model.num_labels(), cfg.target_shift)?;
            (SuccessCriterion::Targeted { target, confidence: cfg.target_confidence }, target, false)
        }
        AttackMode::NonTargeted => (SuccessCriterion::NonTargeted { original_top1: top1 }, top1, true),
    };

    if cfg.epsilon == 0.0 {
        return Ok(AttackOutcome {
            success: false,
            adversarial: None,
            last_iterate: img.clone(),
            iterations_used: 0,
            criterion,
            final_top5: original_top5.clone(),
            original_top5,
            norms: PerturbationNorms::default(),
        });
    }

    let eps = cfg.epsilon;
    let x0 = img.as_slice();
    let mut x = if cfg.family == AttackFamily::Pgd && cfg.random_start {
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        img.map_clipped(|_, v| v + rng.random_range(-eps..=eps))
    } else {
        img.clone()
    };
    let (step, iterations) = if cfg.family.is_single_step() {
        (eps, 1)
    } else {
        (cfg.step_size, cfg.max_iterations)
    };
    let signed_step = if ascend { step } else { -step };

    let mut final_top5 = original_top5.clone();
    let mut used = 0;
    let mut success = false;
    for _ in 0..iterations {
        used += 1;
        let g = model.loss_gradient(&x, loss_label)?;
        let d = direction(cfg.family, &g);
        x = match cfg.family {
            AttackFamily::Fgsm => x.map_clipped(|i, v| v + signed_step * d[i]),
            _ => x.map_clipped(|i, v| (v + signed_step * d[i]).clamp(x0[i] - eps, x0[i] + eps)),
        };
        final_top5 = classify(model, &x)?;
        if criterion.holds(&final_top5) {
            success = true;
            break;
        }
    }

    Ok(AttackOutcome {
        success,
        adversarial: success.then(|| x.clone()),
        norms: PerturbationNorms::between(img, &x),
        last_iterate: x,
        iterations_used: used,
        criterion,
        original_top5,
        final_top5,
    })
}

/// Result of saving an image as JPEG quality 100 and classifying the reload.
#[derive(Debug, Clone, PartialEq)]
pub struct Persisted {
    pub jpeg: Vec<u8>,
    pub reloaded: Image,
    pub top5: Top5,
}

pub fn persist_and_reclassify(img: &Image, backend: &dyn Classifier) -> Result<Persisted, AttackError> {
    let jpeg = ops::encode_jpeg(img, 100)?;
    let reloaded = ops::decode_image(&jpeg)?;
    let top5 = backend.classify_top5(&reloaded)?;
    Ok(Persisted { jpeg, reloaded, top5 })
}

/// Whether a successful outcome survives the JPEG-100 save and reload.
pub fn verify_persisted(outcome: &AttackOutcome, backend: &dyn Classifier) -> Result<bool, AttackError> {
    let Some(adv) = outcome.adversarial.as_ref().filter(|_| outcome.success) else {
        return Ok(false);
    };
    let persisted = persist_and_reclassify(adv, backend)?;
    Ok(outcome.criterion.holds(&persisted.top5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shift_rule() {
        assert_eq!(shifted_target(5, 1000, 100), 105);
        assert_eq!(shifted_target(950, 1000, 100), 50);
        assert_eq!(shifted_target(3, 10, 100), 3);
        assert_eq!(effective_shift(10, 100), 1);
        assert_eq!(effective_shift(1000, 100), 100);
        assert_eq!(effective_shift(40, 100), 100);
        assert_eq!(effective_shift(50, 100), 5);
        assert_eq!(attack_target(3, 10, 100).unwrap(), 4);
        assert_eq!(attack_target(9, 10, 100).unwrap(), 0);
        assert_eq!(attack_target(950, 1000, 100).unwrap(), 50);
    }

    #[test]
    fn config_validation() {
        let mut c = AttackConfig::new(AttackFamily::Bim, AttackMode::NonTargeted);
        c.validate().unwrap();
        c.step_size = 1.0;
        assert!(c.validate().is_err());
        c.step_size = 0.001;
        c.max_iterations = 0;
        assert!(c.validate().is_err());
        c.max_iterations = 5;
        c.epsilon = 1.5;
        assert!(c.validate().is_err());
        c.epsilon = 0.0;
        c.validate().unwrap();
    }

    #[test]
    fn criteria() {
        let t = Top5::new([4, 1, 2, 3, 5], [0.995, 0.002, 0.001, 0.001, 0.001]).unwrap();
        assert!(SuccessCriterion::Targeted { target: 4, confidence: 0.99 }.holds(&t));
        assert!(!SuccessCriterion::Targeted { target: 1, confidence: 0.99 }.holds(&t));
        assert!(!SuccessCriterion::Targeted { target: 9, confidence: 0.99 }.holds(&t));
        assert!(SuccessCriterion::NonTargeted { original_top1: 9 }.holds(&t));
        assert!(!SuccessCriterion::NonTargeted { original_top1: 3 }.holds(&t));
    }

    #[test]
    fn sign_of_zero_is_zero() {
        assert_eq!(direction(AttackFamily::Fgsm, &[0.0, -2.0, 3.0]), vec![0.0, -1.0, 1.0]);
        assert_eq!(direction(AttackFamily::L2Iter, &[0.0, 0.0]), vec![0.0, 0.0]);
        let d = direction(AttackFamily::L1Iter, &[1.0, -3.0]);
        assert_eq!(d, vec![0.5, -1.5]);
    }
}
