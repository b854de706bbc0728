use magread::dataio::*;
use magread::synth::{generate_session, SynthConfig};
use magread::Error;
use proptest::prelude::*;

fn meta(m: f64) -> SessionMeta {
    SessionMeta::new("t01", Task::Text, m, 1920, 1080)
}

/// Gap-free session of `n` samples with a single reading label.
fn plain_session(n: usize) -> Session {
    let gaze = (0..n)
        .map(|i| GazeSample {
            t: i as f32 / 120.0,
            lx: Some(100.0 + i as f32),
            ly: Some(200.0),
            rx: Some(100.0 + i as f32),
            ry: Some(200.0),
            vx: 10.0,
            vy: 20.0,
        })
        .collect();
    let mouse = (0..n.div_ceil(12))
        .map(|i| MouseSample {
            t: i as f32 / 10.0,
            mx: 500.0,
            my: 500.0,
        })
        .collect();
    Session {
        meta: meta(2.0),
        gaze,
        mouse,
        labels: vec![LabelInterval {
            start: 0.0,
            end: n as f32 / 120.0 + 1.0,
            label: Intent::Reading,
        }],
    }
}

fn gaze_with_missing(left: &[bool], right: &[bool]) -> Vec<GazeSample> {
    left.iter()
        .zip(right)
        .enumerate()
        .map(|(i, (&l, &r))| GazeSample {
            t: i as f32 / 120.0,
            lx: (!l).then_some(1.0),
            ly: (!l).then_some(1.0),
            rx: (!r).then_some(1.0),
            ry: (!r).then_some(1.0),
            vx: 0.0,
            vy: 0.0,
        })
        .collect()
}

#[test]
fn ten_second_session_has_expected_row_counts() {
    let cfg = SynthConfig {
        session_len: 10.0,
        ..SynthConfig::default()
    };
    let s = generate_session(&cfg, 0, Task::Text).unwrap();
    let back = parse_session_str(&write_session_string(&s).unwrap()).unwrap();
    assert_eq!(back.gaze.len(), 1200);
    assert_eq!(back.mouse.len(), 100);
    assert_eq!(back, s);
}

#[test]
fn file_round_trip_through_disk() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.session");
    let s = plain_session(50);
    write_session(&s, &path).unwrap();
    assert_eq!(parse_session(&path).unwrap(), s);
    let err = parse_session(dir.path().join("absent.session")).unwrap_err();
    assert!(matches!(err, Error::Io { .. }));
    assert!(err.to_string().contains("absent.session"));
}

#[test]
fn select_eye_prefers_fewer_missing() {
    // N = 200, so the first 20 samples are inspected: left misses 1, right 2.
    let mut left = vec![false; 200];
    let mut right = vec![false; 200];
    left[3] = true;
    right[4] = true;
    right[5] = true;
    // Missing samples beyond the calibration span are ignored.
    for v in left.iter_mut().skip(20) {
        *v = true;
    }
    assert_eq!(select_eye(&gaze_with_missing(&left, &right)).unwrap(), Eye::Left);
    right[5] = false;
    assert_eq!(select_eye(&gaze_with_missing(&left, &right)).unwrap(), Eye::Left);
    left[6] = true;
    assert_eq!(select_eye(&gaze_with_missing(&left, &right)).unwrap(), Eye::Right);
}

#[test]
fn select_eye_inspects_ceiling_of_a_tenth() {
    // N = 1001 → 101 samples. Left is missing on samples 0..=100, right on
    // 0..=99 plus sample 101; counting 101 samples gives 101 vs 100.
    let mut left = vec![false; 1001];
    let mut right = vec![false; 1001];
    left[..101].fill(true);
    right[..100].fill(true);
    right[101] = true;
    assert_eq!(select_eye(&gaze_with_missing(&left, &right)).unwrap(), Eye::Right);
    // Both fully missing over the span.
    right[100] = true;
    assert!(matches!(
        select_eye(&gaze_with_missing(&left, &right)),
        Err(Error::Calibration(_))
    ));
}

#[test]
fn interpolation_examples() {
    let r = interpolate_missing(&[Some(1.0), None, Some(3.0)]);
    assert_eq!(r.values, vec![1.0, 2.0, 3.0]);
    assert_eq!(r.missing, vec![false, true, false]);
    assert_eq!(interpolate_missing(&[None, Some(2.0)]).values, vec![2.0, 2.0]);
    assert_eq!(
        interpolate_missing(&[Some(1.0), None, None, Some(4.0)]).values,
        vec![1.0, 2.0, 3.0, 4.0]
    );
    assert_eq!(interpolate_missing(&[Some(5.0), None, None]).values, vec![5.0; 3]);
    let all = interpolate_missing(&[None, None]);
    assert!(all.all_missing());
    assert!(all.values.iter().all(|v| v.is_nan()));
}

#[test]
fn remap_examples() {
    let screen = (1920.0, 1080.0);
    assert_eq!(remap_to_screen((400.0, 300.0), (0.0, 0.0), 1.0, screen).unwrap(), (400.0, 300.0));
    assert_eq!(remap_to_screen((400.0, 300.0), (100.0, 50.0), 2.0, screen).unwrap(), (300.0, 200.0));
    assert_eq!(remap_to_screen((1900.0, 0.0), (1800.0, 0.0), 2.0, screen).unwrap(), (1920.0, 0.0));
    assert!(matches!(
        remap_to_screen((1.0, 1.0), (0.0, 0.0), 0.9, screen),
        Err(Error::Config(_))
    ));
}

proptest! {
    #[test]
    fn remap_inverts_content_to_physical(
        cx in 0.0f64..1920.0, cy in 0.0f64..1080.0,
        vx in 0.0f64..900.0, vy in 0.0f64..500.0, m in 1.0f64..6.0,
    ) {
        let p = content_to_physical((cx, cy), (vx, vy), m);
        let back = remap_unclamped(p, (vx, vy), m);
        prop_assert!((back.0 - cx).abs() < 1e-9 && (back.1 - cy).abs() < 1e-9);
    }

    #[test]
    fn remap_is_monotone(
        p0 in 0.0f64..1920.0, dp in 0.0f64..500.0, y in 0.0f64..1080.0,
        vx in 0.0f64..900.0, m in 1.0f64..6.0,
    ) {
        let screen = (1920.0, 1080.0);
        let a = remap_to_screen((p0, y), (vx, 0.0), m, screen).unwrap();
        let b = remap_to_screen((p0 + dp, y + dp), (vx, 0.0), m, screen).unwrap();
        prop_assert!(b.0 >= a.0 && b.1 >= a.1);
    }
}

#[test]
fn mouse_velocity_examples() {
    let still = [
        MouseSample { t: 0.0, mx: 5.0, my: 5.0 },
        MouseSample { t: 1.0, mx: 5.0, my: 5.0 },
    ];
    assert_eq!(mouse_velocity(&still, 0.3, 0.5).unwrap(), (0.0, 0.0));
    let moving = [
        MouseSample { t: 0.0, mx: 0.0, my: 0.0 },
        MouseSample { t: 0.2, mx: 10.0, my: 20.0 },
    ];
    let (vx, vy) = mouse_velocity(&moving, 0.0, 0.2).unwrap();
    assert!((vx - 50.0).abs() < 1e-4 && (vy - 100.0).abs() < 1e-4);
    assert!(mouse_velocity(&moving, -0.1, 0.1).is_none());
    assert!(mouse_velocity(&moving, 0.1, 0.3).is_none());
    assert!(mouse_velocity(&[], 0.0, 0.2).is_none());
}

#[test]
fn mouse_velocity_matches_quadrature_of_instantaneous_velocity() {
    // Piecewise-linear trace with 10 Hz knots; the window straddles knots.
    let knots: Vec<MouseSample> = (0..30)
        .map(|i| {
            let t = i as f32 / 10.0;
            MouseSample {
                t,
                mx: 500.0 + 300.0 * (1.3 * t).sin(),
                my: 400.0 + 80.0 * t - 25.0 * (i % 3) as f32,
            }
        })
        .collect();
    let derivative = |t: f64| -> (f64, f64) {
        let i = knots.partition_point(|k| (k.t as f64) <= t) - 1;
        let (a, b) = (knots[i], knots[i + 1]);
        let dt = (b.t - a.t) as f64;
        (((b.mx - a.mx) as f64) / dt, ((b.my - a.my) as f64) / dt)
    };
    for &t_end in &[0.45, 1.0, 1.37, 2.05, 2.8] {
        let t_start = t_end - 0.2;
        // Composite midpoint rule on each piece between knots.
        let mut cuts = vec![t_start];
        cuts.extend(knots.iter().map(|k| k.t as f64).filter(|&t| t > t_start && t < t_end));
        cuts.push(t_end);
        let (mut sx, mut sy) = (0.0, 0.0);
        for piece in cuts.windows(2) {
            let steps = 1000;
            let h = (piece[1] - piece[0]) / steps as f64;
            for k in 0..steps {
                let (dx, dy) = derivative(piece[0] + (k as f64 + 0.5) * h);
                sx += dx * h;
                sy += dy * h;
            }
        }
        let (vx, vy) = mouse_velocity(&knots, t_start, t_end).unwrap();
        assert!((vx - sx / 0.2).abs() < 1e-6 * vx.abs().max(1.0), "{vx} vs {}", sx / 0.2);
        assert!((vy - sy / 0.2).abs() < 1e-6 * vy.abs().max(1.0), "{vy} vs {}", sy / 0.2);
    }
}

#[test]
fn window_counts_follow_stride_arithmetic() {
    let s = plain_session(120);
    assert_eq!(windowize(&s, 6, WindowMode::Labeled).unwrap().len(), 17);
    assert_eq!(windowize(&s, 1, WindowMode::Labeled).unwrap().len(), 120 - 23);
    assert!(windowize(&plain_session(23), 1, WindowMode::Labeled).unwrap().is_empty());
    assert_eq!(windowize(&plain_session(24), 1, WindowMode::Labeled).unwrap().len(), 1);
    assert!(matches!(windowize(&s, 0, WindowMode::Labeled), Err(Error::Config(_))));
}

#[test]
fn strict_majority_missing_excludes_window() {
    for (missing, kept) in [(12, true), (13, false)] {
        let mut s = plain_session(24);
        // Right eye stays fully tracked so calibration picks it unless forced.
        for g in s.gaze.iter_mut().skip(5).take(missing) {
            g.lx = None;
        }
        let w = windowize_with_eye(&s, Eye::Left, 1, WindowMode::Labeled).unwrap();
        assert_eq!(w.len() == 1, kept, "{missing} missing");
        if kept {
            assert_eq!(w[0].missing, 12);
        }
    }
}

#[test]
fn labeled_windows_take_the_label_at_their_final_sample() {
    let mut s = plain_session(120);
    // The boundary at 0.5 s is sample 60; half-open intervals give it to scanning.
    s.labels = vec![
        LabelInterval { start: 0.0, end: 0.5, label: Intent::Reading },
        LabelInterval { start: 0.5, end: 0.9, label: Intent::Scanning },
    ];
    let w = windowize(&s, 1, WindowMode::Labeled).unwrap();
    for win in &w {
        let covering = s.labels.iter().filter(|l| l.contains(win.t_end)).count();
        assert_eq!(covering, 1);
        assert_eq!(Some(win.label.unwrap()), s.label_at(win.t_end));
    }
    // Samples 108..119 lie past 0.9 s, so windows ending there are dropped.
    assert_eq!(w.last().unwrap().start + 23, 107);
    let first_scan = w.iter().find(|w| w.label == Some(Intent::Scanning)).unwrap();
    assert_eq!(first_scan.start + 23, 60);
}

#[test]
fn pretext_windows_carry_velocity_and_no_label() {
    let cfg = SynthConfig {
        session_len: 20.0,
        ..SynthConfig::default()
    };
    let s = generate_session(&cfg, 1, Task::Text).unwrap();
    let w = windowize(&s, 6, WindowMode::Pretext).unwrap();
    assert!(!w.is_empty());
    assert!(w.iter().all(|w| w.label.is_none()));
    for win in &w {
        let expected = mouse_velocity(&s.mouse, win.t_end - 0.2, win.t_end)
            .map(|(x, y)| [(x / 1920.0) as f32, (y / 1080.0) as f32]);
        assert_eq!(win.vel_target, expected);
    }
    // The first windows end before 0.2 s and have no target.
    assert!(w[0].vel_target.is_none());
    assert!(w.iter().filter(|w| w.vel_target.is_some()).count() > w.len() - 5);
}

#[test]
fn exclusion_uses_pre_interpolation_mask() {
    let mut s = plain_session(48);
    for g in s.gaze.iter_mut().skip(10).take(14) {
        g.lx = None;
        g.ly = None;
    }
    let w = windowize_with_eye(&s, Eye::Left, 1, WindowMode::Labeled).unwrap();
    // Any window containing 13 or more of samples 10..24 is dropped even
    // though interpolation fills every value.
    for win in &w {
        let overlap = (win.start..win.start + 24).filter(|i| (10..24).contains(i)).count();
        assert!(overlap <= 12);
    }
    assert_eq!(w.len(), 13);
}

#[test]
fn unit_magnification_duplicates_streams() {
    let mut s = plain_session(60);
    s.meta.magnification = 1.0;
    for g in &mut s.gaze {
        g.vx = 0.0;
        g.vy = 0.0;
    }
    for w in windowize(&s, 6, WindowMode::Labeled).unwrap() {
        assert_eq!(w.g, w.c);
    }
}

#[test]
fn normalization_standardizes_training_split_only() {
    let cfg = SynthConfig {
        session_len: 30.0,
        ..SynthConfig::default()
    };
    let train: Vec<Window> = (0..3)
        .flat_map(|s| windowize(&generate_session(&cfg, s, Task::Text).unwrap(), 6, WindowMode::Pretext).unwrap())
        .collect();
    let test = windowize(&generate_session(&cfg, 5, Task::Text).unwrap(), 6, WindowMode::Pretext).unwrap();
    let stats = NormStats::fit(&train);
    let normed = normalize(&train, &stats);
    let refit = NormStats::fit(&normed);
    for f in [refit.g, refit.c, refit.m, refit.vel].iter().flatten() {
        assert!(f.mean.abs() < 1e-3 && (f.std - 1.0).abs() < 1e-3, "{f:?}");
    }
    let test_normed = normalize(&test, &stats);
    let v = test[3].g[0][7] as f64;
    let expected = ((v - stats.g[0].mean) / stats.g[0].std) as f32;
    assert_eq!(test_normed[3].g[0][7], expected);
    // Fitting on the test split would give different statistics.
    assert_ne!(NormStats::fit(&test), stats);
}

#[test]
fn constant_feature_normalizes_to_zero() {
    let s = plain_session(60);
    let w = windowize(&s, 6, WindowMode::Labeled).unwrap();
    let stats = NormStats::fit(&w);
    assert_eq!(stats.g[1].std, 1.0);
    for win in normalize(&w, &stats) {
        assert!(win.g[1].iter().all(|&v| v == 0.0));
    }
}

#[test]
fn windows_export_round_trips() {
    let cfg = SynthConfig {
        session_len: 15.0,
        ..SynthConfig::default()
    };
    let s = generate_session(&cfg, 0, Task::Webpage).unwrap();
    let mut w = windowize(&s, 6, WindowMode::Pretext).unwrap();
    w.extend(windowize(&s, 12, WindowMode::Labeled).unwrap());
    w[2].m = None;
    let stats = NormStats::fit(&w);
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("w.bin");
    export_windows(&path, &w, Some(&stats)).unwrap();
    let (back, back_stats) = import_windows(&path).unwrap();
    assert_eq!(back, w);
    assert_eq!(back_stats, Some(stats));

    let mut bytes = std::fs::read(&path).unwrap();
    bytes.pop();
    std::fs::write(&path, bytes).unwrap();
    assert!(matches!(import_windows(&path), Err(Error::Dataset(_))));
}
