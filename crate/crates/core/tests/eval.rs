use std::collections::BTreeSet;
use std::sync::OnceLock;

use magread::dataio::*;
use magread::eval::*;
use magread::synth::*;
use magread::train::*;
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn sessions(n_subjects: usize) -> Vec<Session> {
    generate_sessions(&SynthConfig {
        n_subjects,
        session_len: 20.0,
        ..Default::default()
    })
    .unwrap()
}

fn small() -> &'static [Session] {
    static S: OnceLock<Vec<Session>> = OnceLock::new();
    S.get_or_init(|| sessions(4))
}

fn quick_cfg() -> EvalConfig {
    let train = TrainConfig {
        stride: 24,
        max_epochs: 1,
        batch_size: 64,
        ..Default::default()
    };
    EvalConfig {
        seed: 0,
        pretrain: TrainConfig {
            stage: Stage::Pretext,
            ..train.clone()
        },
        train,
        jobs: 1,
    }
}

#[test]
fn macro_f1_reproduces_published_triples() {
    for (r, s, overall) in [(91.27, 68.78, 80.02), (93.13, 78.80, 85.97), (68.39, 71.62, 70.01)] {
        let got = macro_f1(r, s);
        assert!((got - overall).abs() <= 0.05, "({r}, {s}) -> {got}, published {overall}");
    }
}

/// Second implementation: per-class precision and recall, combined as a
/// harmonic mean.
fn oracle_f1(pred: &[Intent], gold: &[Intent], class: Intent) -> f64 {
    let mut m = [[0usize; 2]; 2];
    for (p, g) in pred.iter().zip(gold) {
        m[g.class_id()][p.class_id()] += 1;
    }
    let k = class.class_id();
    let tp = m[k][k] as f64;
    let predicted = (m[0][k] + m[1][k]) as f64;
    let actual = m[k].iter().sum::<usize>() as f64;
    if predicted == 0.0 && actual == 0.0 {
        return 100.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let (p, r) = (tp / predicted, tp / actual);
    100.0 * 2.0 * p * r / (p + r)
}

fn random_labels(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<Intent> {
    (0..n)
        .map(|_| if rng.random_bool(p) { Intent::Reading } else { Intent::Scanning })
        .collect()
}

#[test]
fn f1_matches_confusion_matrix_oracle() {
    let mut rng = ChaCha8Rng::seed_from_u64(200);
    for p in [0.2, 0.5, 0.7] {
        let gold = random_labels(&mut rng, 200, p);
        let pred = random_labels(&mut rng, 200, 0.5);
        let (r, s) = f1_per_class(&pred, &gold).unwrap();
        assert!((r - oracle_f1(&pred, &gold, Intent::Reading)).abs() < 1e-9);
        assert!((s - oracle_f1(&pred, &gold, Intent::Scanning)).abs() < 1e-9);
        let c = ConfusionCounts::from_predictions(&pred, &gold, Intent::Reading);
        assert_eq!(c.total(), 200);
    }
}

proptest! {
    #[test]
    fn confusion_counts_cover_every_window(labels in prop::collection::vec((any::<bool>(), any::<bool>()), 1..300)) {
        let to = |b: bool| if b { Intent::Reading } else { Intent::Scanning };
        let pred: Vec<Intent> = labels.iter().map(|l| to(l.0)).collect();
        let gold: Vec<Intent> = labels.iter().map(|l| to(l.1)).collect();
        for c in Intent::ALL {
            let counts = ConfusionCounts::from_predictions(&pred, &gold, c);
            prop_assert_eq!(counts.total(), labels.len());
            prop_assert!((counts.f1() - oracle_f1(&pred, &gold, c)).abs() < 1e-9);
        }
        let (r, s) = f1_per_class(&pred, &gold).unwrap();
        let overall = macro_f1(r, s);
        prop_assert!((0.0..=100.0).contains(&overall));
        prop_assert!((overall - (r + s) / 2.0).abs() < 1e-4);
    }
}

#[test]
fn eight_subjects_give_eight_disjoint_folds() {
    let all = sessions(8);
    let folds = loso_folds(&all).unwrap();
    assert_eq!(folds.len(), 8);
    let mut tested = BTreeSet::new();
    for f in &folds {
        assert!(tested.insert(f.test_subject.clone()));
        assert!(f.test.iter().all(|s| s.meta.subject_id == f.test_subject));
        assert!(f.train.iter().all(|s| s.meta.subject_id != f.test_subject));
        assert_eq!(f.test.len() + f.train.len(), all.len());
    }
    let subjects: BTreeSet<String> = all.iter().map(|s| s.meta.subject_id.clone()).collect();
    assert_eq!(tested, subjects);
    assert!(loso_folds(&all[..4]).is_err());
}

#[test]
fn folds_never_train_on_the_test_subject() {
    let report = loso_evaluate(small(), Pipeline::Supervised, &quick_cfg()).unwrap();
    assert_eq!(report.folds.len(), 4);
    let all: BTreeSet<String> = small().iter().map(|s| session_checksum(s).unwrap()).collect();
    for f in &report.folds {
        let train: BTreeSet<&String> = f.train_session_checksums.iter().collect();
        let test: BTreeSet<&String> = f.test_session_checksums.iter().collect();
        assert!(train.is_disjoint(&test), "fold {}", f.test_subject);
        assert_eq!(train.len() + test.len(), all.len());
        assert_ne!(f.validation_subject.as_deref(), Some(f.test_subject.as_str()));
        assert_eq!(f.confusion_reading.total(), f.n_test_windows);
        assert!((f.f1_overall - (f.f1_reading + f.f1_scanning) / 2.0).abs() < 1e-4);
    }
    assert!((report.f1_overall - (report.f1_reading + report.f1_scanning) / 2.0).abs() < 1e-4);
    let mean = report.folds.iter().map(|f| f.f1_overall).sum::<f64>() / 4.0;
    assert!((report.f1_overall - mean).abs() < 1e-9);
}

#[test]
fn test_subject_data_cannot_reach_the_fold_model() {
    // Scrambling one subject's gaze must leave the model of the fold that
    // tests on it untouched, and change a fold that trains on it.
    let cfg = quick_cfg();
    let a = loso_evaluate(small(), Pipeline::SemiPartial, &cfg).unwrap();
    let (other, target) = a
        .folds
        .iter()
        .flat_map(|f| a.folds.iter().map(move |g| (f, g.test_subject.clone())))
        .find(|(f, s)| *s != f.test_subject && f.validation_subject.as_ref() != Some(s))
        .unwrap();
    let mut altered = small().to_vec();
    for s in altered.iter_mut().filter(|s| s.meta.subject_id == target) {
        for g in &mut s.gaze {
            g.lx = g.lx.map(|x| 1919.0 - x);
            g.rx = g.rx.map(|x| 1919.0 - x);
        }
    }
    let b = loso_evaluate(&altered, Pipeline::SemiPartial, &cfg).unwrap();
    let fa = a.folds.iter().find(|f| f.test_subject == target).unwrap();
    let fb = b.folds.iter().find(|f| f.test_subject == target).unwrap();
    assert_eq!(fa.model_checksum, fb.model_checksum);
    assert_ne!(fa.test_session_checksums, fb.test_session_checksums);
    let other_b = b.folds.iter().find(|f| f.test_subject == other.test_subject).unwrap();
    assert_ne!(other.model_checksum, other_b.model_checksum);
}

#[test]
fn permutation_preserves_the_label_multiset() {
    let mut ex = labeled_examples(small(), 12).unwrap();
    let before: Vec<Intent> = ex.iter().map(|e| e.gaze.label).collect();
    permute_labels(&mut ex, 5);
    let after: Vec<Intent> = ex.iter().map(|e| e.gaze.label).collect();
    let count = |v: &[Intent], c| v.iter().filter(|&&x| x == c).count();
    for c in Intent::ALL {
        assert_eq!(count(&before, c), count(&after, c));
    }
    assert_ne!(before, after);
}

/// Expected macro F1 of guessing labels at the test-set class frequency.
fn monte_carlo_chance(gold: &[Intent], rng: &mut ChaCha8Rng) -> f64 {
    let p = gold.iter().filter(|&&g| g == Intent::Reading).count() as f64 / gold.len() as f64;
    let trials = 500;
    (0..trials)
        .map(|_| {
            let pred = random_labels(rng, gold.len(), p);
            let (r, s) = f1_per_class(&pred, gold).unwrap();
            macro_f1(r, s)
        })
        .sum::<f64>()
        / trials as f64
}

#[test]
fn permuted_baseline_sits_at_chance() {
    let cfg = EvalConfig {
        train: TrainConfig {
            stride: 12,
            max_epochs: 10,
            patience: 10,
            ..quick_cfg().train
        },
        ..quick_cfg()
    };
    let report = loso_evaluate(small(), Pipeline::Random, &cfg).unwrap();
    assert_eq!(report.input_mode, magread::model::InputMode::GazeOnly);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut chance = 0.0;
    for f in &report.folds {
        let test: Vec<Session> = small()
            .iter()
            .filter(|s| s.meta.subject_id == f.test_subject)
            .cloned()
            .collect();
        let gold: Vec<Intent> = labeled_examples(&test, 12).unwrap().iter().map(|e| e.gaze.label).collect();
        assert_eq!(gold.len(), f.n_test_windows);
        chance += monte_carlo_chance(&gold, &mut rng) / report.folds.len() as f64;
    }
    assert!(
        (report.f1_overall - chance).abs() <= 10.0,
        "baseline {:.2}, chance {chance:.2}",
        report.f1_overall
    );
}

#[test]
fn subject_without_windows_is_skipped() {
    let mut data = small().to_vec();
    let target = data[0].meta.subject_id.clone();
    for s in data.iter_mut().filter(|s| s.meta.subject_id == target) {
        s.labels.clear();
    }
    let report = loso_evaluate(&data, Pipeline::Supervised, &quick_cfg()).unwrap();
    assert_eq!(report.skipped, vec![target.clone()]);
    assert_eq!(report.folds.len(), 3);
    assert!(report.table().contains(&target));
}

#[test]
fn semi_pipelines_need_matching_backbones() {
    let cfg = quick_cfg();
    assert!(loso_evaluate_pretrained(small(), Pipeline::SemiFull, &cfg, None).is_err());
    let pre = pretrain_folds(small(), &cfg).unwrap();
    assert!(loso_evaluate_pretrained(small(), Pipeline::SemiFull, &cfg, Some(&pre[..3])).is_err());
    let shared = loso_evaluate_pretrained(small(), Pipeline::SemiFull, &cfg, Some(&pre)).unwrap();
    let fresh = loso_evaluate(small(), Pipeline::SemiFull, &cfg).unwrap();
    assert_eq!(shared, fresh);
}

#[test]
fn reports_are_reproducible_and_parallel_safe() {
    let cfg = quick_cfg();
    let a = loso_evaluate(small(), Pipeline::Supervised, &cfg).unwrap();
    let b = loso_evaluate(small(), Pipeline::Supervised, &EvalConfig { jobs: 3, ..cfg.clone() }).unwrap();
    assert_eq!(a.folds, b.folds);
    assert_ne!(a.config_hash, b.config_hash);
    let json = serde_json::to_string(&a).unwrap();
    let back: F1Report = serde_json::from_str(&json).unwrap();
    assert_eq!(back, a);
    assert_eq!(json, serde_json::to_string(&loso_evaluate(small(), Pipeline::Supervised, &cfg).unwrap()).unwrap());
    assert!(a.table().lines().last().unwrap().starts_with("mean"));
}

#[test]
fn pipeline_names_round_trip() {
    for p in Pipeline::ALL {
        assert_eq!(Pipeline::parse(p.as_str()), Some(p));
    }
    assert_eq!(Pipeline::parse("semi"), None);
}
