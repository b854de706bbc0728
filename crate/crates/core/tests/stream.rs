use std::sync::{Arc, OnceLock};
use std::time::Instant;

use magread::dataio::*;
use magread::model::{HeadKind, InputMode, ModelConfig, ModelParams};
use magread::stream::*;
use magread::synth::*;
use magread::train::*;

/// A briefly trained classifier, so probabilities vary across windows.
fn classifier() -> &'static Classifier {
    static C: OnceLock<Classifier> = OnceLock::new();
    C.get_or_init(|| {
        let sessions = generate_sessions(&SynthConfig {
            n_subjects: 3,
            session_len: 20.0,
            ..Default::default()
        })
        .unwrap();
        let cfg = TrainConfig {
            stride: 24,
            max_epochs: 2,
            batch_size: 64,
            ..Default::default()
        };
        let out = supervised_train(&labeled_examples(&sessions, 24).unwrap(), &cfg).unwrap();
        Classifier::new(out.params, out.stats).unwrap()
    })
}

fn meta() -> SessionMeta {
    SessionMeta::new("s01", Task::Text, 2.0, 1920, 1080)
}

fn sample(i: usize, valid: bool) -> GazeSample {
    let t = i as f32 / 120.0;
    let x = valid.then_some(500.0 + 3.0 * i as f32);
    let y = valid.then_some(400.0 + (i % 7) as f32);
    GazeSample {
        t,
        lx: x,
        ly: y,
        rx: x,
        ry: y,
        vx: 100.0,
        vy: 50.0,
    }
}

fn engine(stride: usize) -> Engine {
    Engine::with_classifier(meta(), Eye::Left, stride, classifier().clone()).unwrap()
}

#[test]
fn first_decision_follows_warm_up() {
    let mut e = engine(6);
    for i in 0..23 {
        assert!(e.push(&sample(i, true)).unwrap().is_none(), "push {i}");
    }
    let d = e.push(&sample(23, true)).unwrap().expect("24th push decides");
    assert_eq!(d.t, sample(23, true).t as f64);
    assert!((0.0..=1.0).contains(&d.p_reading));
    assert_eq!(d.label == Intent::Reading, d.p_reading >= 0.5);
    // Then every sixth sample.
    let emitted: Vec<usize> = (24..60).filter(|&i| e.push(&sample(i, true)).unwrap().is_some()).collect();
    assert_eq!(emitted, vec![29, 35, 41, 47, 53, 59]);
}

#[test]
fn window_with_thirteen_missing_is_withheld() {
    let mut e = engine(1);
    let valid = |i: usize| !(24..37).contains(&i);
    let out: Vec<Option<Decision>> = (0..60).map(|i| e.push(&sample(i, valid(i))).unwrap()).collect();
    // Windows ending at 36..=47 contain the whole burst.
    let expected: Vec<bool> = (0..60).map(|k| k >= 23 && !(36..48).contains(&k)).collect();
    let got: Vec<bool> = out.iter().map(Option::is_some).collect();
    assert_eq!(got, expected);
}

#[test]
fn reset_restarts_warm_up_and_replays_exactly() {
    let mut e = engine(2);
    let before = e.classifier().unwrap().params.checksum();
    let run = |e: &mut Engine| -> Vec<Option<Decision>> {
        (0..80).map(|i| e.push(&sample(i, i % 11 != 5)).unwrap()).collect()
    };
    let first = run(&mut e);
    e.reset();
    for i in 0..23 {
        assert!(e.push(&sample(i, true)).unwrap().is_none());
    }
    e.reset();
    assert_eq!(run(&mut e), first);
    assert_eq!(e.classifier().unwrap().params.checksum(), before);
}

#[test]
fn push_requires_a_model() {
    let mut e = Engine::new(meta(), Eye::Right, 6).unwrap();
    let err = e.push(&sample(0, true)).unwrap_err();
    assert!(matches!(err, magread::Error::Engine(_)), "{err}");
    e.load(classifier().clone());
    assert!(e.push(&sample(0, true)).unwrap().is_none());
}

#[test]
fn engine_rejects_bad_settings() {
    assert!(Engine::new(meta(), Eye::Left, 0).is_err());
    let mut m = meta();
    m.magnification = 0.5;
    assert!(Engine::new(m, Eye::Left, 1).is_err());

    let cfg = ModelConfig::default();
    let stats = classifier().stats.clone();
    let reg = ModelParams::init(&cfg, InputMode::GazePlusComp, HeadKind::VelocityRegressor, 0).unwrap();
    assert!(Classifier::new(reg, stats.clone()).is_err());
    let mouse = ModelParams::init(&cfg, InputMode::MouseGazeComp, HeadKind::IntentClassifier, 0).unwrap();
    assert!(Classifier::new(mouse, stats).is_err());
}

#[test]
fn engines_share_one_parameter_snapshot() {
    let a = engine(6);
    let b = engine(3);
    assert!(Arc::ptr_eq(&a.classifier().unwrap().params, &b.classifier().unwrap().params));
}

#[test]
fn decisions_serialize_as_json_lines() {
    let d = Decision {
        t: 1.5,
        label: Intent::Scanning,
        p_reading: 0.25,
    };
    assert_eq!(
        serde_json::to_string(&d).unwrap(),
        r#"{"t":1.5,"label":"scanning","p_reading":0.25}"#
    );
}

/// True when the window's final sample is missing and a valid sample
/// follows later, i.e. batch interpolation can see a right neighbor the
/// engine cannot.
fn open_trailing_gap(session: &Session, eye: Eye, end: usize) -> bool {
    session.gaze[end].eye(eye).is_none() && session.gaze[end..].iter().any(|s| s.eye(eye).is_some())
}

#[test]
fn stride_one_streaming_matches_batch() {
    let sessions = generate_sessions(&SynthConfig {
        seed: 77,
        n_subjects: 5,
        session_len: 8.0,
        ..Default::default()
    })
    .unwrap();
    assert_eq!(sessions.len(), 10);
    let c = classifier();
    let (mut compared, mut pushes, mut elapsed) = (0, 0, 0.0);
    for s in &sessions {
        let eye = select_eye(&s.gaze).unwrap();
        let windows = windowize_with_eye(s, eye, 1, WindowMode::Pretext).unwrap();
        let pairs: Vec<(Channels, Channels)> = windows.iter().map(|w| (w.g, w.c)).collect();
        let batch = c.classify(&pairs).unwrap();

        let mut e = Engine::with_classifier(s.meta.clone(), eye, 1, c.clone()).unwrap();
        let start = Instant::now();
        let streamed: Vec<(usize, Decision)> = s
            .gaze
            .iter()
            .enumerate()
            .filter_map(|(i, g)| e.push(g).unwrap().map(|d| (i, d)))
            .collect();
        elapsed += start.elapsed().as_secs_f64();
        pushes += s.gaze.len();

        assert_eq!(streamed.len(), windows.len(), "{}", s.meta.subject_id);
        for ((end, d), (w, p)) in streamed.iter().zip(windows.iter().zip(&batch)) {
            assert_eq!(*end, w.start + WINDOW_LEN - 1);
            assert_eq!(d.t, w.t_end);
            if open_trailing_gap(s, eye, *end) {
                continue;
            }
            assert!(
                (d.p_reading - p).abs() <= 1e-6,
                "{} window ending {end}: stream {} batch {p}",
                s.meta.subject_id,
                d.p_reading
            );
            compared += 1;
        }
    }
    assert!(compared > 5000, "{compared}");
    eprintln!("streaming throughput: {:.0} pushes/s", pushes as f64 / elapsed);
}
