use std::sync::OnceLock;

use magread::dataio::*;
use magread::model::*;
use magread::synth::*;
use magread::train::*;
use proptest::prelude::*;
use tempfile::tempdir;

/// Four subjects with 20 s sessions: small enough for debug-speed tests,
/// large enough that every subject has both classes.
fn fixture() -> &'static [Session] {
    static S: OnceLock<Vec<Session>> = OnceLock::new();
    S.get_or_init(|| {
        let cfg = SynthConfig {
            n_subjects: 4,
            session_len: 20.0,
            ..Default::default()
        };
        generate_sessions(&cfg).unwrap()
    })
}

fn pretext_cfg() -> TrainConfig {
    TrainConfig {
        stage: Stage::Pretext,
        stride: 24,
        max_epochs: 5,
        patience: 10,
        batch_size: 64,
        ..Default::default()
    }
}

fn without_labels(sessions: &[Session]) -> Vec<Session> {
    sessions
        .iter()
        .map(|s| Session {
            labels: Vec::new(),
            ..s.clone()
        })
        .collect()
}

fn pretrained() -> &'static TrainOutcome {
    static P: OnceLock<TrainOutcome> = OnceLock::new();
    P.get_or_init(|| {
        let ex = pretext_examples(fixture(), 24).unwrap();
        pretrain(&ex, &TrainConfig { max_epochs: 1, ..pretext_cfg() }).unwrap()
    })
}

#[test]
fn class_weight_examples() {
    let labels: Vec<Intent> = [Intent::Reading; 80].into_iter().chain([Intent::Scanning; 20]).collect();
    assert_eq!(compute_class_weights(&labels).unwrap(), [0.625, 2.5]);
    let balanced: Vec<Intent> = (0..100).map(|i| Intent::ALL[i % 2]).collect();
    assert_eq!(compute_class_weights(&balanced).unwrap(), [1.0, 1.0]);
    assert!(compute_class_weights(&[Intent::Reading; 5]).is_err());
}

proptest! {
    #[test]
    fn class_weights_reweight_to_n(r in 1usize..500, s in 1usize..500) {
        let labels: Vec<Intent> = std::iter::repeat_n(Intent::Reading, r)
            .chain(std::iter::repeat_n(Intent::Scanning, s))
            .collect();
        let w = compute_class_weights(&labels).unwrap();
        let total = r as f64 * w[0] + s as f64 * w[1];
        prop_assert!((total - (r + s) as f64).abs() < 1e-9 * (r + s) as f64);
    }
}

#[test]
fn pretraining_loss_decreases() {
    let ex = pretext_examples(fixture(), 24).unwrap();
    let out = pretrain(&ex, &pretext_cfg()).unwrap();
    let losses = out.train_losses();
    assert_eq!(losses.len(), 5);
    assert!(losses[4] < losses[0], "{losses:?}");
    assert!(losses[0] > losses[1] && losses[1] > losses[2], "{losses:?}");
    assert_eq!(out.params.head, HeadKind::VelocityRegressor);
    assert!(out.validation_subject.is_some());
    assert!(out.history.iter().any(|r| r.split == "val" && r.f1.is_none()));
}

/// Cursor drags at a constant per-session velocity and the gaze rides on
/// it, so the target is a deterministic function of the gaze slope.
fn drag_session(subject: &str, task: Task, v: (f64, f64)) -> Session {
    let meta = SessionMeta::new(subject, task, 1.0, 1920, 1080);
    let pos = |t: f64| (960.0 + v.0 * (t - 4.0), 540.0 + v.1 * (t - 4.0));
    let gaze = (0..960)
        .map(|i| {
            let t = i as f64 / 120.0;
            let (x, y) = pos(t);
            GazeSample {
                t: t as f32,
                lx: Some(x as f32),
                ly: Some(y as f32),
                rx: Some(x as f32),
                ry: Some(y as f32),
                vx: 0.0,
                vy: 0.0,
            }
        })
        .collect();
    let mouse = (0..80)
        .map(|i| {
            let t = i as f64 / 10.0;
            let (x, y) = pos(t);
            MouseSample {
                t: t as f32,
                mx: x as f32,
                my: y as f32,
            }
        })
        .collect();
    Session {
        meta,
        gaze,
        mouse,
        labels: Vec::new(),
    }
}

#[test]
fn constant_velocity_toy_converges() {
    let velocities = [(-90.0, 40.0), (60.0, -50.0), (100.0, 20.0), (-30.0, -60.0), (20.0, 70.0), (-70.0, -10.0)];
    let sessions: Vec<Session> = velocities
        .iter()
        .enumerate()
        .map(|(i, &v)| drag_session(&subject_id(i / 2), [Task::Text, Task::Webpage][i % 2], v))
        .collect();
    let ex = pretext_examples(&sessions, 12).unwrap();
    assert!(ex.len() > 300);
    let cfg = TrainConfig {
        stage: Stage::Pretext,
        stride: 12,
        max_epochs: 30,
        patience: 30,
        batch_size: 32,
        ..Default::default()
    };
    let out = pretrain(&ex, &cfg).unwrap();
    let last = *out.train_losses().last().unwrap();
    assert!(last < 0.05, "final training MSE {last}");
}

#[test]
fn pretraining_never_reads_labels() {
    let cfg = TrainConfig { max_epochs: 2, ..pretext_cfg() };
    let a = pretrain(&pretext_examples(fixture(), 24).unwrap(), &cfg).unwrap();
    let b = pretrain(&pretext_examples(&without_labels(fixture()), 24).unwrap(), &cfg).unwrap();
    let dir = tempdir().unwrap();
    a.write(dir.path().join("a")).unwrap();
    b.write(dir.path().join("b")).unwrap();
    for f in [WEIGHTS_FILE, MANIFEST_FILE, HISTORY_FILE] {
        let read = |d: &str| std::fs::read(dir.path().join(d).join(f)).unwrap();
        assert_eq!(read("a"), read("b"), "{f}");
    }
}

#[test]
fn pretraining_requires_velocity_targets() {
    let no_mouse: Vec<Session> = fixture()
        .iter()
        .map(|s| Session {
            mouse: Vec::new(),
            ..s.clone()
        })
        .collect();
    let ex = pretext_examples(&no_mouse, 24).unwrap();
    assert!(ex.is_empty());
    let err = pretrain(&ex, &pretext_cfg()).unwrap_err();
    assert!(matches!(err, magread::Error::Training(_)), "{err}");
    let mouse_mode = TrainConfig {
        input_mode: InputMode::MouseOnly,
        ..pretext_cfg()
    };
    assert!(pretrain(&pretext_examples(fixture(), 24).unwrap(), &mouse_mode).is_err());
}

fn finetune_cfg(freeze: FreezeMode) -> TrainConfig {
    TrainConfig {
        stage: Stage::Finetune,
        stride: 24,
        max_epochs: 1,
        batch_size: 64,
        freeze,
        ..Default::default()
    }
}

#[test]
fn finetuning_consumes_no_cursor_data() {
    let stripped: Vec<Session> = fixture()
        .iter()
        .map(|s| Session {
            mouse: Vec::new(),
            ..s.clone()
        })
        .collect();
    let shifted: Vec<Session> = fixture()
        .iter()
        .map(|s| {
            let mut s = s.clone();
            for m in &mut s.mouse {
                m.mx = 1919.0 - m.mx;
                m.my *= 0.5;
            }
            s
        })
        .collect();
    let base = gaze_examples(fixture(), 24).unwrap();
    assert_eq!(base, gaze_examples(&stripped, 24).unwrap());
    assert_eq!(base, gaze_examples(&shifted, 24).unwrap());

    let p = pretrained();
    let cfg = finetune_cfg(FreezeMode::Partial);
    let a = finetune(&p.params, &p.stats, &base, &cfg).unwrap();
    let b = finetune(&p.params, &p.stats, &gaze_examples(&shifted, 24).unwrap(), &cfg).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
}

#[test]
fn partial_freeze_leaves_front_end_untouched() {
    let p = pretrained();
    let ex = gaze_examples(fixture(), 24).unwrap();
    let out = finetune(&p.params, &p.stats, &ex, &finetune_cfg(FreezeMode::Partial)).unwrap();
    let mut frozen = 0;
    for name in p.params.names() {
        let before = p.params.tensor_checksum(name).unwrap();
        let after = out.params.tensor_checksum(name).unwrap();
        if is_frozen_in_partial(name) {
            frozen += 1;
            assert_eq!(before, after, "{name} moved under partial fine-tuning");
            assert_eq!(p.params.get(name).unwrap(), out.params.get(name).unwrap());
        } else if !is_head(name) {
            assert_ne!(before, after, "{name} did not train");
        }
    }
    assert!(frozen > 0);
    assert_eq!(out.stats, p.stats);
}

#[test]
fn full_finetuning_moves_every_backbone_tensor() {
    let p = pretrained();
    let ex = gaze_examples(fixture(), 24).unwrap();
    let out = finetune(&p.params, &p.stats, &ex, &finetune_cfg(FreezeMode::Full)).unwrap();
    for name in p.params.names().filter(|n| !is_head(n)) {
        assert_ne!(
            p.params.tensor_checksum(name),
            out.params.tensor_checksum(name),
            "{name} unchanged after full fine-tuning"
        );
    }
}

#[test]
fn finetuning_starts_from_a_fresh_head() {
    let p = pretrained();
    let ex = gaze_examples(fixture(), 24).unwrap();
    let out = finetune(&p.params, &p.stats, &ex, &finetune_cfg(FreezeMode::Partial)).unwrap();
    assert_eq!(out.params.head, HeadKind::IntentClassifier);
    let pre = p.params.get("head.w").unwrap();
    let post = out.params.get("head.w").unwrap();
    assert_eq!(pre.shape(), post.shape());
    assert!(pre.data().iter().zip(post.data()).all(|(a, b)| a != b));
    assert_eq!(out.history[0].stage, Stage::Finetune);
    assert!(out.history.iter().any(|r| r.split == "val" && r.f1.is_some()));
}

#[test]
fn finetune_rejects_mismatched_backbone() {
    let p = pretrained();
    let ex = gaze_examples(fixture(), 24).unwrap();
    let cfg = TrainConfig {
        input_mode: InputMode::GazeOnly,
        ..finetune_cfg(FreezeMode::Full)
    };
    let err = finetune(&p.params, &p.stats, &ex, &cfg).unwrap_err();
    assert!(matches!(err, magread::Error::Checkpoint(_)), "{err}");
    let cfg = TrainConfig {
        model: ModelConfig {
            ffn_hidden: 64,
            ..Default::default()
        },
        ..finetune_cfg(FreezeMode::Full)
    };
    assert!(finetune(&p.params, &p.stats, &ex, &cfg).is_err());
}

fn supervised_cfg(mode: InputMode) -> TrainConfig {
    TrainConfig {
        input_mode: mode,
        stride: 12,
        max_epochs: 4,
        batch_size: 64,
        ..Default::default()
    }
}

/// Macro F1 on `test_subject` after training on the other subjects.
fn held_out_f1(cfg: &TrainConfig, test_subject: &str) -> (f64, Vec<Intent>) {
    let (test, train): (Vec<Session>, Vec<Session>) =
        fixture().iter().cloned().partition(|s| s.meta.subject_id == test_subject);
    let out = supervised_train(&labeled_examples(&train, cfg.stride).unwrap(), cfg).unwrap();
    let test = labeled_examples(&test, cfg.stride).unwrap();
    let refs: Vec<&LabeledExample> = test.iter().collect();
    let probs = predict_labeled(&out.params, &out.stats, &refs).unwrap();
    let pred: Vec<Intent> = probs
        .iter()
        .map(|p| if p[0] >= p[1] { Intent::Reading } else { Intent::Scanning })
        .collect();
    let gold: Vec<Intent> = test.iter().map(|e| e.gaze.label).collect();
    let (r, s) = magread::eval::f1_per_class(&pred, &gold).unwrap();
    (magread::eval::macro_f1(r, s), gold)
}

/// Expected macro F1 of guessing each label at its test-set frequency.
fn chance_f1(gold: &[Intent]) -> f64 {
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let p_reading = gold.iter().filter(|&&g| g == Intent::Reading).count() as f64 / gold.len() as f64;
    let trials = 200;
    (0..trials)
        .map(|_| {
            let pred: Vec<Intent> = gold
                .iter()
                .map(|_| if rng.random_bool(p_reading) { Intent::Reading } else { Intent::Scanning })
                .collect();
            let (r, s) = magread::eval::f1_per_class(&pred, gold).unwrap();
            magread::eval::macro_f1(r, s)
        })
        .sum::<f64>()
        / trials as f64
}

#[test]
fn mouse_only_learns_above_chance() {
    let cfg = TrainConfig {
        lr: 1e-3,
        max_epochs: 12,
        patience: 12,
        ..supervised_cfg(InputMode::MouseOnly)
    };
    let (mut model, mut chance) = (0.0, 0.0);
    for i in 0..4 {
        let (f1, gold) = held_out_f1(&cfg, &subject_id(i));
        model += f1 / 4.0;
        chance += chance_f1(&gold) / 4.0;
    }
    assert!(model > chance + 3.0, "mouse_only macro F1 {model:.2} vs chance {chance:.2}");
}

#[test]
fn mouse_modes_need_cursor_logs() {
    let mut ex = labeled_examples(fixture(), 24).unwrap();
    ex[0].m = None;
    let err = supervised_train(&ex, &supervised_cfg(InputMode::MouseGazeComp)).unwrap_err();
    assert!(matches!(err, magread::Error::Dataset(_)), "{err}");
}

#[test]
fn supervised_training_is_deterministic() {
    let ex = labeled_examples(fixture(), 24).unwrap();
    let cfg = TrainConfig {
        max_epochs: 2,
        ..supervised_cfg(InputMode::GazePlusComp)
    };
    let a = supervised_train(&ex, &cfg).unwrap();
    let b = supervised_train(&ex, &cfg).unwrap();
    assert_eq!(a.params.checksum(), b.params.checksum());
    assert_eq!(a.history, b.history);
    let c = supervised_train(&ex, &TrainConfig { seed: 1, ..cfg }).unwrap();
    assert_ne!(a.params.checksum(), c.params.checksum());
}

#[test]
fn early_stopping_keeps_the_best_validation_epoch() {
    let ex = labeled_examples(fixture(), 24).unwrap();
    let cfg = TrainConfig {
        max_epochs: 6,
        patience: 2,
        lr: 3e-3,
        ..supervised_cfg(InputMode::GazeOnly)
    };
    let out = supervised_train(&ex, &cfg).unwrap();
    let val: Vec<&EpochRecord> = out.history.iter().filter(|r| r.split == "val").collect();
    let best = val.iter().min_by(|a, b| a.loss.total_cmp(&b.loss)).unwrap();
    assert_eq!(out.best_epoch, best.epoch);
    // Stopping happened exactly `patience` epochs after the best, or the
    // budget ran out.
    let last = val.last().unwrap().epoch;
    assert!(last == cfg.max_epochs || last == best.epoch + cfg.patience, "{val:?}");

    // The kept parameters reproduce the best epoch's validation loss.
    let subject = out.validation_subject.clone().unwrap();
    let held: Vec<&LabeledExample> = ex.iter().filter(|e| e.gaze.subject_id == subject).collect();
    let probs = predict_labeled(&out.params, &out.stats, &held).unwrap();
    let train_labels: Vec<Intent> = ex
        .iter()
        .filter(|e| e.gaze.subject_id != subject)
        .map(|e| e.gaze.label)
        .collect();
    let w = compute_class_weights(&train_labels).unwrap();
    let (mut num, mut den) = (0.0, 0.0);
    for (p, e) in probs.iter().zip(&held) {
        let k = e.gaze.label.class_id();
        num -= w[k] * (p[k] as f64).ln();
        den += w[k];
    }
    assert!((num / den - best.loss).abs() < 1e-4, "{} vs {}", num / den, best.loss);
}

#[test]
fn history_round_trips_through_jsonl() {
    let p = pretrained();
    let dir = tempdir().unwrap();
    p.write(dir.path()).unwrap();
    let text = std::fs::read_to_string(dir.path().join(HISTORY_FILE)).unwrap();
    let parsed: Vec<EpochRecord> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(parsed, p.history);
    let (params, stats) = load_checkpoint(dir.path()).unwrap();
    assert_eq!(params, p.params);
    assert_eq!(stats.unwrap(), p.stats);
}

#[test]
fn label_fraction_keeps_both_classes_per_seed() {
    let ex = gaze_examples(fixture(), 24).unwrap();
    let kept = select_label_fraction(&ex, 0.1, 3);
    for c in Intent::ALL {
        let n = ex.iter().filter(|e| e.label == c).count();
        let k = kept.iter().filter(|e| e.label == c).count();
        assert_eq!(k, (n as f64 * 0.1).ceil() as usize, "{c:?}");
    }
    assert_eq!(kept, select_label_fraction(&ex, 0.1, 3));
    assert_ne!(kept, select_label_fraction(&ex, 0.1, 4));
}
