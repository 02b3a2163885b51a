//! Attack and dataset behavior against a trained desk model.

use std::fs;
use std::sync::OnceLock;

use advdetect_core::attacks::{
    persist_and_reclassify, run_attack, verify_persisted, AttackConfig, AttackFamily, AttackMode, AttackOutcome,
    PerturbationNorms, SuccessCriterion,
};
use advdetect_core::dataset::{
    adversarial_id, assign_splits, generate_adversarial, import_external, pair_seed, select_normal, verify_entry,
    ManifestEntry, Origin, PairResult, SidecarRecord, Split, DEFAULT_RATIOS, SIDECAR_NAME,
};
use advdetect_core::desk_model::{train, DeskModel, TrainConfig};
use advdetect_core::gateway::ExecBackend;
use advdetect_core::pipeline::{build_dataset, manifest_dir, DatasetPlan};
use advdetect_core::synth::{self, LabeledImage};
use advdetect_core::{top5_correct, Classifier, DatasetError, Differentiable, GatewayError, Image, Top5};

fn model() -> &'static DeskModel {
    static MODEL: OnceLock<DeskModel> = OnceLock::new();
    MODEL.get_or_init(|| {
        let config = TrainConfig { seed: 1, ..TrainConfig::default() };
        train(&synth::generate(1, 0, 4000), &[], &config).unwrap().0
    })
}

fn test_images(n: usize) -> Vec<LabeledImage> {
    synth::generate(4, 0, n)
}

fn config(family: AttackFamily, epsilon: f64) -> AttackConfig {
    let mut c = AttackConfig::new(family, AttackMode::NonTargeted);
    c.epsilon = epsilon;
    c.step_size = c.step_size.min(epsilon);
    c
}

fn loss(img: &Image, label: u32) -> f64 {
    -model().probabilities(img).unwrap()[label as usize].ln()
}

#[test]
fn desk_model_is_accurate() {
    let acc = model().accuracy(&test_images(500)).unwrap();
    assert!(acc.top1 >= 0.95, "top-1 {}", acc.top1);
}

// ----------------------------------------------------------- attacks

#[test]
fn zero_budget_yields_nothing() {
    let img = &test_images(1)[0].image;
    for family in [AttackFamily::Fgsm, AttackFamily::Bim, AttackFamily::Pgd, AttackFamily::L2Iter] {
        let out = run_attack(&config(family, 0.0), model(), img).unwrap();
        assert!(!out.success);
        assert!(out.adversarial.is_none());
        assert_eq!(out.norms, PerturbationNorms::default());
    }
}

#[test]
fn fgsm_raises_the_loss_almost_always() {
    let images = test_images(200);
    let raised = images
        .iter()
        .filter(|s| {
            let out = run_attack(&config(AttackFamily::Fgsm, 0.1), model(), &s.image).unwrap();
            let top1 = out.original_top5.top1();
            loss(&out.last_iterate, top1) > loss(&s.image, top1)
        })
        .count();
    assert!(raised >= 190, "loss rose on {raised}/200");
}

#[test]
fn iterating_beats_a_single_step() {
    let images = test_images(200);
    let rate = |family| {
        images
            .iter()
            .filter(|s| run_attack(&config(family, 8.0 / 255.0), model(), &s.image).unwrap().success)
            .count()
    };
    let (fgsm, bim) = (rate(AttackFamily::Fgsm), rate(AttackFamily::Bim));
    assert!(bim >= fgsm, "bim {bim} < fgsm {fgsm}");
}

#[test]
fn attacks_are_deterministic_and_honor_their_criterion() {
    for s in test_images(15) {
        let mut targeted = AttackConfig::new(AttackFamily::Bim, AttackMode::Targeted);
        targeted.epsilon = 0.2;
        targeted.step_size = 0.02;
        targeted.max_iterations = 40;
        for cfg in [config(AttackFamily::Pgd, 8.0 / 255.0), config(AttackFamily::L1Iter, 0.1), targeted] {
            let a = run_attack(&cfg, model(), &s.image).unwrap();
            assert_eq!(a, run_attack(&cfg, model(), &s.image).unwrap());
            if a.success {
                assert!(a.criterion.holds(&a.final_top5));
                match a.criterion {
                    SuccessCriterion::Targeted { target, confidence } => {
                        assert!(a.final_top5.confidence_of(target).unwrap() >= confidence)
                    }
                    SuccessCriterion::NonTargeted { original_top1 } => assert!(!a.final_top5.contains(original_top1)),
                }
            }
        }
    }
}

#[test]
fn persistence_check() {
    let img = &test_images(1)[0].image;
    let top5 = model().classify_top5(img).unwrap();
    let untouched = AttackOutcome {
        success: true,
        adversarial: Some(img.clone()),
        last_iterate: img.clone(),
        iterations_used: 0,
        criterion: SuccessCriterion::NonTargeted { original_top1: top5.top1() },
        original_top5: top5.clone(),
        final_top5: top5.clone(),
        norms: PerturbationNorms::default(),
    };
    assert!(!verify_persisted(&untouched, model()).unwrap());

    // the scripted backend always answers 0..4
    let fixed = ExecBackend::spawn(env!("CARGO_BIN_EXE_mock-classifier"), &["fixed".to_string()], 1).unwrap();
    let absent = AttackOutcome { criterion: SuccessCriterion::NonTargeted { original_top1: 7 }, ..untouched.clone() };
    let present = AttackOutcome { criterion: SuccessCriterion::NonTargeted { original_top1: 2 }, ..untouched };
    assert!(verify_persisted(&absent, &fixed).unwrap());
    assert!(!verify_persisted(&present, &fixed).unwrap());

    let mut successes = 0;
    let mut survived = 0;
    for s in test_images(60) {
        let out = run_attack(&config(AttackFamily::Bim, 0.1), model(), &s.image).unwrap();
        if out.success {
            successes += 1;
            survived += usize::from(verify_persisted(&out, model()).unwrap());
        }
    }
    assert!(successes > 0 && survived > 0, "{survived}/{successes} survived");
}

// ----------------------------------------------------------- dataset

#[test]
fn normal_selection() {
    let pool = synth::generate(3, 0, 500);
    assert!(select_normal(&pool, model(), 0, 1).unwrap().is_empty());
    let chosen = select_normal(&pool, model(), 100, 1).unwrap();
    assert_eq!(chosen.len(), 100);
    assert!(chosen.iter().all(|s| top5_correct(&s.top5, s.image.label)));
    let index = |id: &str| pool.iter().position(|p| p.id == id).unwrap();
    assert!(chosen.windows(2).all(|w| index(&w[0].image.id) < index(&w[1].image.id)), "pool order kept");
    assert_eq!(chosen, select_normal(&pool, model(), 100, 1).unwrap());
    assert_ne!(chosen, select_normal(&pool, model(), 100, 2).unwrap());

    // relabel every image to a class outside its own top five
    let wrong: Vec<LabeledImage> = pool[..20]
        .iter()
        .map(|s| {
            let top5 = model().classify_top5(&s.image).unwrap();
            let label = (0..10).find(|l| !top5.contains(*l)).unwrap();
            LabeledImage { label, ..s.clone() }
        })
        .collect();
    assert!(matches!(
        select_normal(&wrong, model(), 1, 0),
        Err(DatasetError::InsufficientCorrectImages { needed: 1, available: 0 })
    ));
}

/// Gradients from the desk model, but every answer contains labels 0..4.
struct Sticky;

impl Classifier for Sticky {
    fn id(&self) -> &str {
        "sticky"
    }
    fn num_labels(&self) -> usize {
        10
    }
    fn input_contract(&self) -> String {
        model().input_contract()
    }
    fn classify_top5(&self, _: &Image) -> Result<Top5, GatewayError> {
        Ok(Top5::from_labels([0, 1, 2, 3, 4]))
    }
    fn as_differentiable(&self) -> Option<&dyn Differentiable> {
        Some(model())
    }
}

#[test]
fn nothing_is_kept_without_budget_or_without_a_label_change() {
    let pool = synth::generate(3, 0, 100);
    let chosen = select_normal(&pool, model(), 20, 0).unwrap();
    let report = generate_adversarial(&chosen, model(), &[config(AttackFamily::Bim, 0.0), config(AttackFamily::Fgsm, 0.0)]);
    assert_eq!(report.attempted(), 40);
    assert_eq!(report.kept().count(), 0);

    let sticky_pool: Vec<LabeledImage> = pool.iter().filter(|s| s.label < 5).cloned().collect();
    let chosen = select_normal(&sticky_pool, &Sticky, 10, 0).unwrap();
    let report = generate_adversarial(&chosen, &Sticky, &[config(AttackFamily::Bim, 0.1)]);
    assert_eq!(report.kept().count(), 0);
    // in-memory success is judged on the model's own scores; the sticky answer after saving rejects it
    assert!(report
        .outcomes
        .iter()
        .all(|o| matches!(o.result, PairResult::Unsuccessful | PairResult::LostInPersistence)));
}

#[test]
fn kept_count_matches_an_independent_recount() {
    let pool = synth::generate(3, 0, 300);
    let chosen = select_normal(&pool, model(), 100, 5).unwrap();
    let mut cfg = config(AttackFamily::Bim, 8.0 / 255.0);
    cfg.seed = 11;
    let report = generate_adversarial(&chosen, model(), std::slice::from_ref(&cfg));

    let mut recount = 0;
    for s in &chosen {
        let mut seeded = cfg.clone();
        seeded.seed = pair_seed(cfg.seed, &s.image.id);
        let out = run_attack(&seeded, model(), &s.image.image).unwrap();
        let Some(adv) = out.adversarial.as_ref().filter(|_| out.success) else { continue };
        let persisted = persist_and_reclassify(adv, model()).unwrap();
        if out.criterion.holds(&persisted.top5) && !persisted.top5.contains(s.top5.top1()) {
            recount += 1;
            let id = adversarial_id(&s.image.id, &cfg);
            let kept = report.kept().find(|r| r.image_id == id).expect("recounted image is kept");
            assert_eq!(kept.post_save_top5, persisted.top5);
        }
    }
    assert_eq!(report.kept().count(), recount);
    assert!(recount > 0);
}

fn synthetic_entry(id: String, base: &str, origin: Origin) -> ManifestEntry {
    ManifestEntry {
        path: format!("images/{id}.png"),
        image_id: id,
        base_id: base.into(),
        label: 0,
        backend_id: "b".into(),
        origin,
        original_top5: Top5::from_labels([0, 1, 2, 3, 4]),
        post_save_top5: Top5::from_labels([5, 6, 7, 8, 9]),
        split: None,
        sha256: String::new(),
    }
}

#[test]
fn families_are_balanced_across_splits() {
    use rand::{Rng, SeedableRng};
    let families = [AttackFamily::Bim, AttackFamily::Pgd, AttackFamily::Fgsm];
    for seed in 0..5 {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let mut entries = Vec::new();
        for b in 0..100 {
            let base = format!("base-{b}");
            entries.push(synthetic_entry(base.clone(), &base, Origin::Normal));
            for k in 0..2 {
                let family = families[rng.random_range(0..3)];
                let origin = Origin::Attack { family, mode: AttackMode::NonTargeted, config_digest: "d".into() };
                entries.push(synthetic_entry(format!("{base}.{k}"), &base, origin));
            }
        }
        assert_eq!(entries.len(), 300);
        assign_splits(&mut entries, DEFAULT_RATIOS, seed).unwrap();
        let total: f64 = DEFAULT_RATIOS.iter().sum();
        for family in ["normal", "bim", "pgd", "fgsm"] {
            let of_family: Vec<&ManifestEntry> = entries.iter().filter(|e| e.origin.family_name() == family).collect();
            for (k, split) in Split::ALL.into_iter().enumerate() {
                let got = of_family.iter().filter(|e| e.split == Some(split)).count() as f64;
                let want = of_family.len() as f64 * DEFAULT_RATIOS[k] / total;
                assert!((got - want).abs() <= 2.0, "seed {seed} {family} in {split}: {got} vs {want:.1}");
            }
        }
    }
}

#[test]
fn import_verifies_external_images() {
    let tmp = tempfile::tempdir().unwrap();
    let manifest_path = tmp.path().join("data/manifest.jsonl");
    let mut attack = config(AttackFamily::Bim, 8.0 / 255.0);
    attack.seed = 11;
    let plan = DatasetPlan {
        pool_seed: 3,
        pool_size: 120,
        normal_count: 40,
        select_seed: 5,
        attacks: vec![attack],
        split_seed: 7,
        ratios: DEFAULT_RATIOS,
    };
    let built = build_dataset(&manifest_path, &plan, model()).unwrap();
    let manifest = built.manifest;
    let root = manifest_dir(&manifest_path);
    for e in &manifest.entries {
        assert!(verify_entry(&root, e, model()).unwrap(), "{} re-verifies from disk", e.image_id);
    }

    let empty = tmp.path().join("empty");
    fs::create_dir_all(&empty).unwrap();
    assert!(import_external(&empty, &manifest, model()).unwrap().accepted.is_empty());

    // five stored adversarials, re-offered as external files
    let dir = tmp.path().join("incoming");
    fs::create_dir_all(&dir).unwrap();
    let adversarial: Vec<&ManifestEntry> = manifest.entries.iter().filter(|e| e.is_adversarial()).take(5).collect();
    assert_eq!(adversarial.len(), 5);
    let mut sidecar = String::new();
    for (i, e) in adversarial.iter().enumerate() {
        let file = format!("ext{i}.jpg");
        fs::copy(root.join(&e.path), dir.join(&file)).unwrap();
        let rec = SidecarRecord { file, original_id: e.base_id.clone(), attack: "outside-tool".into(), mode: AttackMode::NonTargeted };
        sidecar.push_str(&serde_json::to_string(&rec).unwrap());
        sidecar.push('\n');
    }
    fs::write(dir.join(SIDECAR_NAME), &sidecar).unwrap();
    let report = import_external(&dir, &manifest, model()).unwrap();
    assert_eq!(report.accepted.len(), 5, "{:?}", report.skipped);
    assert!(report.skipped.is_empty());

    // a clean image is not adversarial and gets skipped
    let normal = manifest.entries.iter().find(|e| !e.is_adversarial()).unwrap();
    fs::copy(root.join(&normal.path), dir.join("clean.png")).unwrap();
    let rec = SidecarRecord {
        file: "clean.png".into(),
        original_id: normal.image_id.clone(),
        attack: "none".into(),
        mode: AttackMode::NonTargeted,
    };
    sidecar.push_str(&serde_json::to_string(&rec).unwrap());
    sidecar.push('\n');
    fs::write(dir.join("stray.png"), fs::read(root.join(&normal.path)).unwrap()).unwrap();
    fs::write(dir.join(SIDECAR_NAME), &sidecar).unwrap();
    let report = import_external(&dir, &manifest, model()).unwrap();
    assert_eq!(report.accepted.len(), 5);
    let reasons: Vec<&str> = report.skipped.iter().map(|s| s.file.as_str()).collect();
    assert_eq!(reasons, ["stray.png", "clean.png"]);

    fs::remove_file(dir.join(SIDECAR_NAME)).unwrap();
    assert!(matches!(import_external(&dir, &manifest, model()), Err(DatasetError::MetadataMissing(_))));
}
