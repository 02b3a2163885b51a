use std::path::PathBuf;

use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use advdetect_core::detectors::oracle_support::gini;
use advdetect_core::detectors::{
    evaluate, train_detector, DetectorConfig, DetectorKind, DetectorModel, LabeledRow, MaxFeatures, Verdict,
};
use advdetect_core::features::{FeatureKind, FeatureVector};
use advdetect_core::DetectorError;

fn fv(values: Vec<u32>) -> FeatureVector {
    FeatureVector { kind: FeatureKind::Differences, values, subset_id: "all".into(), backend_id: "test".into() }
}

/// Binary difference vectors; adversarial rows flip more often.
fn noisy(seed: u64, n: usize, d: usize, p_normal: f64, p_adv: f64) -> (Vec<FeatureVector>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    for i in 0..n {
        let y = i % 3 == 0;
        let p = if y { p_adv } else { p_normal };
        rows.push(fv((0..d).map(|_| u32::from(rng.random::<f64>() < p)).collect()));
        labels.push(y);
    }
    (rows, labels)
}

fn separable(n: usize, d: usize) -> (Vec<FeatureVector>, Vec<bool>) {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let labels: Vec<bool> = (0..n).map(|i| i % 2 == 1).collect();
    let rows = labels
        .iter()
        .map(|&y| fv((0..d).map(|_| if y { rng.random_range(10..14) } else { rng.random_range(0..4) }).collect()))
        .collect();
    (rows, labels)
}

fn predictions(m: &DetectorModel, rows: &[FeatureVector]) -> Vec<Verdict> {
    rows.iter().map(|r| m.predict(r).unwrap()).collect()
}

fn as_verdict(adversarial: bool) -> Verdict {
    if adversarial {
        Verdict::Adversarial
    } else {
        Verdict::Normal
    }
}

#[test]
fn separable_clusters_are_learned_by_every_kind() {
    let (rows, labels) = separable(60, 6);
    for kind in DetectorKind::ALL {
        let m = train_detector(kind, &rows, &labels, &DetectorConfig::default()).unwrap();
        let expected: Vec<Verdict> = labels.iter().map(|&y| as_verdict(y)).collect();
        assert_eq!(predictions(&m, &rows), expected, "{}", kind.name());
    }
}

#[test]
fn training_input_errors() {
    let (rows, labels) = separable(10, 3);
    let config = DetectorConfig::default();
    for kind in DetectorKind::ALL {
        assert!(matches!(train_detector(kind, &rows, &[true; 10], &config), Err(DetectorError::ClassMissing)));
        assert!(matches!(train_detector(kind, &[], &[], &config), Err(DetectorError::NoRows)));
        let mut mixed = rows.clone();
        mixed[4].subset_id = "jpeg".into();
        assert!(matches!(train_detector(kind, &mixed, &labels, &config), Err(DetectorError::FeatureMismatch(_))));
    }
    let m = train_detector(DetectorKind::Lda, &rows, &labels, &config).unwrap();
    let mut probe = rows[0].clone();
    probe.subset_id = "blur".into();
    assert!(matches!(m.predict(&probe), Err(DetectorError::FeatureMismatch(_))));
    probe = fv(vec![0; 4]);
    assert!(matches!(m.decision_value(&probe), Err(DetectorError::FeatureMismatch(_))));
}

#[test]
fn same_seed_same_model() {
    let (rows, labels) = noisy(3, 90, 8, 0.3, 0.6);
    for kind in DetectorKind::ALL {
        let config = DetectorConfig { seed: 17, ..DetectorConfig::default() };
        let a = train_detector(kind, &rows, &labels, &config).unwrap();
        let b = train_detector(kind, &rows, &labels, &config).unwrap();
        assert_eq!(a.to_bytes(), b.to_bytes(), "{}", kind.name());
        assert_eq!(predictions(&a, &rows), predictions(&b, &rows));
    }
}

#[test]
fn file_roundtrip_preserves_decisions_and_rejects_corruption() {
    let (rows, labels) = noisy(4, 90, 8, 0.3, 0.6);
    let dir = tempfile::tempdir().unwrap();
    for kind in DetectorKind::ALL {
        let m = train_detector(kind, &rows, &labels, &DetectorConfig::default()).unwrap();
        let path = dir.path().join(format!("{}.addt", kind.name()));
        m.save(&path).unwrap();
        let back = DetectorModel::load(&path).unwrap();
        assert_eq!(back, m);
        for r in &rows {
            assert_eq!(back.decision_value(r).unwrap().to_bits(), m.decision_value(r).unwrap().to_bits());
        }
        let mut bytes = m.to_bytes();
        let mid = bytes.len() / 2;
        bytes[mid] ^= 0x40;
        assert!(DetectorModel::from_bytes(&bytes).is_err(), "{}", kind.name());
        assert!(DetectorModel::from_bytes(&bytes[..mid]).is_err());
    }
}

#[test]
fn svm_kept_objective_never_increases() {
    for seed in 0..10 {
        let (rows, labels) = noisy(seed, 120, 10, 0.3, 0.6);
        let config = DetectorConfig { seed, ..DetectorConfig::default() };
        let m = train_detector(DetectorKind::Svm, &rows, &labels, &config).unwrap();
        let h = &m.training_history;
        assert_eq!(h.len(), config.svm_epochs);
        for w in h.windows(2) {
            assert!(w[1] <= w[0] + 1e-6, "seed {seed}: {} after {}", w[1], w[0]);
        }
    }
}

/// Exhaustive stump: every feature, every threshold `x <= v` over observed
/// values, unit weights. Ties keep the earliest candidate.
fn stump_oracle(rows: &[Vec<u32>], labels: &[bool]) -> Vec<bool> {
    let mass = |members: &[usize]| {
        let m1 = members.iter().filter(|&&i| labels[i]).count() as f64;
        (members.len() as f64 - m1, m1)
    };
    let majority = |members: &[usize]| {
        let (m0, m1) = mass(members);
        m1 >= m0
    };
    let all: Vec<usize> = (0..rows.len()).collect();
    let mut best: Option<(f64, usize, u32)> = None;
    for f in 0..rows[0].len() {
        let mut values: Vec<u32> = rows.iter().map(|r| r[f]).collect();
        values.sort_unstable();
        values.dedup();
        for &v in &values[..values.len().saturating_sub(1)] {
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| rows[i][f] <= v);
            let ((l0, l1), (r0, r1)) = (mass(&l), mass(&r));
            let impurity = (l0 + l1) * gini(l0, l1) + (r0 + r1) * gini(r0, r1);
            if best.is_none_or(|(b, _, _)| impurity < b) {
                best = Some((impurity, f, v));
            }
        }
    }
    match best {
        None => vec![majority(&all); rows.len()],
        Some((_, f, v)) => {
            let (l, r): (Vec<usize>, Vec<usize>) = all.iter().partition(|&&i| rows[i][f] <= v);
            let (left, right) = (majority(&l), majority(&r));
            rows.iter().map(|row| if row[f] <= v { left } else { right }).collect()
        }
    }
}

fn stump_config() -> DetectorConfig {
    DetectorConfig {
        class_weighted: false,
        forest_trees: 1,
        forest_max_depth: 1,
        forest_bootstrap: false,
        forest_max_features: MaxFeatures::All,
        ..DetectorConfig::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn one_tree_forest_is_the_exhaustive_stump(
        data in (2usize..200, 1usize..5).prop_flat_map(|(n, d)| {
            (prop::collection::vec(prop::collection::vec(0u32..6, d), n), prop::collection::vec(any::<bool>(), n))
        })
    ) {
        let (values, labels) = data;
        prop_assume!(labels.iter().any(|&y| y) && labels.iter().any(|&y| !y));
        let rows: Vec<FeatureVector> = values.iter().cloned().map(fv).collect();
        let m = train_detector(DetectorKind::Forest, &rows, &labels, &stump_config()).unwrap();
        let expected: Vec<Verdict> = stump_oracle(&values, &labels).into_iter().map(as_verdict).collect();
        prop_assert_eq!(predictions(&m, &rows), expected);
    }

    #[test]
    fn lda_ignores_affine_rescaling_of_a_feature(
        seed in 0u64..1000,
        column in 0usize..6,
        scale in 2u32..50,
        shift in 0u32..100,
    ) {
        let (rows, labels) = noisy(seed, 80, 6, 0.3, 0.6);
        let rescaled: Vec<FeatureVector> = rows
            .iter()
            .map(|r| {
                let mut r = r.clone();
                r.values[column] = r.values[column] * scale + shift;
                r
            })
            .collect();
        let config = DetectorConfig::default();
        let a = train_detector(DetectorKind::Lda, &rows, &labels, &config).unwrap();
        let b = train_detector(DetectorKind::Lda, &rescaled, &labels, &config).unwrap();
        for (r, s) in rows.iter().zip(&rescaled) {
            let (da, db) = (a.decision_value(r).unwrap(), b.decision_value(s).unwrap());
            prop_assert!((da - db).abs() <= 1e-9 * (1.0 + da.abs()), "{} vs {}", da, db);
            if da.abs() > 1e-9 {
                prop_assert_eq!(a.predict(r).unwrap(), b.predict(s).unwrap());
            }
        }
    }

    #[test]
    fn accuracy_is_the_confusion_trace(seed in 0u64..500, n in 1usize..80) {
        let (rows, labels) = noisy(seed, 90, 5, 0.3, 0.6);
        let m = train_detector(DetectorKind::Lda, &rows, &labels, &DetectorConfig::default()).unwrap();
        let (probe, truth) = noisy(seed + 1, n, 5, 0.3, 0.6);
        let eval: Vec<LabeledRow> = probe
            .into_iter()
            .zip(truth)
            .enumerate()
            .map(|(i, (features, y))| LabeledRow {
                image_id: format!("p{i}"),
                features,
                is_adversarial: y,
                family: if y { "bim".into() } else { "normal".into() },
            })
            .collect();
        let r = evaluate(&m, &eval, "eval").unwrap();
        prop_assert_eq!(r.confusion.total(), n);
        prop_assert_eq!(r.count, n);
        prop_assert_eq!(r.accuracy, r.confusion.correct() as f64 / n as f64);
        let per_family: usize = r.per_family.values().map(|s| s.count).sum();
        prop_assert_eq!(per_family, n);
    }
}

fn row(id: &str, values: Vec<u32>, adversarial: bool) -> LabeledRow {
    LabeledRow {
        image_id: id.into(),
        features: fv(values),
        is_adversarial: adversarial,
        family: if adversarial { "pgd".into() } else { "normal".into() },
    }
}

#[test]
fn evaluation_fixtures() {
    let (rows, labels) = separable(40, 2);
    let m = train_detector(DetectorKind::Lda, &rows, &labels, &DetectorConfig::default()).unwrap();
    let (lo, hi) = (vec![1, 2], vec![12, 11]);
    let right = [row("a", lo.clone(), false), row("b", hi.clone(), true)];
    assert_eq!(evaluate(&m, &right, "eval").unwrap().accuracy, 1.0);
    let wrong = [row("a", lo.clone(), true), row("b", hi.clone(), false)];
    assert_eq!(evaluate(&m, &wrong, "eval").unwrap().accuracy, 0.0);

    let four = [row("tn", lo.clone(), false), row("fp", hi.clone(), false), row("fn", lo, true), row("tp", hi, true)];
    let r = evaluate(&m, &four, "dev").unwrap();
    let c = r.confusion;
    assert_eq!((c.true_negative, c.false_positive, c.false_negative, c.true_positive), (1, 1, 1, 1));
    assert_eq!((r.accuracy, r.precision, r.recall, r.false_positive_rate), (0.5, 0.5, 0.5, 0.5));
    assert_eq!(r.split, "dev");
    assert_eq!(r.per_family["pgd"].correct, 1);
    assert!(matches!(evaluate(&m, &[], "eval"), Err(DetectorError::EmptySplit)));
}

// ------------------------------------------------------------ golden

fn golden_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/detectors")
}

/// Normal rows are mostly zero; adversarial rows light up many positions.
fn golden_data() -> (Vec<FeatureVector>, Vec<bool>) {
    noisy(2024, 150, 12, 0.05, 0.5)
}

fn golden_probe() -> Vec<FeatureVector> {
    let mut probe = noisy(2025, 30, 12, 0.05, 0.5).0;
    probe.push(fv(vec![0; 12]));
    probe
}

fn verdict_string(m: &DetectorModel) -> String {
    predictions(m, &golden_probe())
        .into_iter()
        .map(|v| if v == Verdict::Adversarial { '1' } else { '0' })
        .collect()
}

/// Set `ADVDETECT_BLESS=1` to rewrite the golden files after an intended
/// change to training.
#[test]
fn golden_models_are_stable() {
    let (rows, labels) = golden_data();
    let bless = std::env::var_os("ADVDETECT_BLESS").is_some();
    for kind in [DetectorKind::Lda, DetectorKind::Svm, DetectorKind::Forest] {
        let model_path = golden_dir().join(format!("{}.addt", kind.name()));
        let verdict_path = golden_dir().join(format!("{}.verdicts", kind.name()));
        let trained = train_detector(kind, &rows, &labels, &DetectorConfig { seed: 3, ..DetectorConfig::default() }).unwrap();
        if bless {
            std::fs::create_dir_all(golden_dir()).unwrap();
            trained.save(&model_path).unwrap();
            std::fs::write(&verdict_path, verdict_string(&trained) + "\n").unwrap();
        }
        let golden = DetectorModel::load(&model_path).unwrap();
        let verdicts = std::fs::read_to_string(&verdict_path).unwrap();
        assert_eq!(verdict_string(&golden), verdicts.trim(), "{} golden verdicts", kind.name());
        assert_eq!(trained.to_bytes(), golden.to_bytes(), "{} retrains to the golden bytes", kind.name());
        // the all-zero differences vector is what a stable normal image produces
        assert_eq!(golden.predict(&fv(vec![0; 12])).unwrap(), Verdict::Normal, "{}", kind.name());
    }
}
