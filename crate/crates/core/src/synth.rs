//! Seeded simulator of magnified reading sessions.
//!
//! Content-space gaze follows fixation/saccade staircases along text lines
//! while reading and makes large erratic jumps while scanning. The cursor
//! drives a full-lens viewport (`v = m·(1 − 1/M)`) and chases the point
//! that would put the gaze at the subject's preferred screen position.
//! Physical gaze is `(content − v)·M` plus tracker noise, with per-eye
//! dropout bursts.

use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Exp, Normal};
use serde::{Deserialize, Serialize};

use crate::dataio::{
    write_session, GazeSample, Intent, LabelInterval, MouseSample, Session, SessionMeta, Task, GAZE_RATE_HZ,
    MOUSE_RATE_HZ,
};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_subjects: usize,
    /// Session length in seconds.
    pub session_len: f64,
    pub magnification: f64,
    pub screen_w: u32,
    pub screen_h: u32,
    pub fixation_ms_mean: f64,
    pub fixation_ms_std: f64,
    pub scan_fixation_ms_mean: f64,
    pub scan_fixation_ms_std: f64,
    /// Forward reading saccade in content pixels.
    pub saccade_px_mean: f64,
    pub saccade_px_std: f64,
    pub regression_prob: f64,
    /// Standard deviation of vertical scanning jumps, content pixels.
    pub scan_jump_px: f64,
    pub tracker_noise_px: f64,
    /// Dropout bursts per second of valid tracking, per eye.
    pub dropout_rate: f64,
    /// Mean dropout burst length in seconds.
    pub dropout_len: f64,
    /// Relative difference in dropout rate between the two eyes.
    pub eye_asymmetry: f64,
    pub min_segment: f64,
    pub reading_segment_mean: f64,
    pub scanning_segment_mean: f64,
    /// Multiplier on reading segment length for the webpage task.
    pub webpage_reading_factor: f64,
    /// Cursor chase gains in 1/s.
    pub reading_mouse_gain: f64,
    pub scanning_mouse_gain: f64,
    /// Spread of per-subject multipliers on behavioral parameters.
    pub subject_variation: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            seed: 0,
            n_subjects: 8,
            session_len: 120.0,
            magnification: 2.0,
            screen_w: 1920,
            screen_h: 1080,
            fixation_ms_mean: 225.0,
            fixation_ms_std: 50.0,
            scan_fixation_ms_mean: 170.0,
            scan_fixation_ms_std: 40.0,
            saccade_px_mean: 80.0,
            saccade_px_std: 20.0,
            regression_prob: 0.1,
            scan_jump_px: 300.0,
            tracker_noise_px: 6.0,
            dropout_rate: 0.4,
            dropout_len: 0.25,
            eye_asymmetry: 0.3,
            min_segment: 1.0,
            reading_segment_mean: 6.0,
            scanning_segment_mean: 2.0,
            webpage_reading_factor: 0.6,
            reading_mouse_gain: 2.5,
            scanning_mouse_gain: 7.0,
            subject_variation: 0.15,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("session_len", self.session_len),
            ("screen_w", self.screen_w as f64),
            ("screen_h", self.screen_h as f64),
            ("fixation_ms_mean", self.fixation_ms_mean),
            ("fixation_ms_std", self.fixation_ms_std),
            ("scan_fixation_ms_mean", self.scan_fixation_ms_mean),
            ("scan_fixation_ms_std", self.scan_fixation_ms_std),
            ("saccade_px_mean", self.saccade_px_mean),
            ("saccade_px_std", self.saccade_px_std),
            ("scan_jump_px", self.scan_jump_px),
            ("tracker_noise_px", self.tracker_noise_px),
            ("dropout_rate", self.dropout_rate),
            ("dropout_len", self.dropout_len),
            ("min_segment", self.min_segment),
            ("reading_segment_mean", self.reading_segment_mean),
            ("scanning_segment_mean", self.scanning_segment_mean),
            ("webpage_reading_factor", self.webpage_reading_factor),
            ("reading_mouse_gain", self.reading_mouse_gain),
            ("scanning_mouse_gain", self.scanning_mouse_gain),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return Err(Error::Config(format!("synth.{name} must be positive, got {v}")));
            }
        }
        if !(self.magnification.is_finite() && self.magnification >= 1.0) {
            return Err(Error::Config(format!(
                "synth.magnification must be ≥ 1, got {}",
                self.magnification
            )));
        }
        for (name, v) in [
            ("regression_prob", self.regression_prob),
            ("eye_asymmetry", self.eye_asymmetry),
            ("subject_variation", self.subject_variation),
        ] {
            if !(0.0..1.0).contains(&v) {
                return Err(Error::Config(format!("synth.{name} must lie in [0, 1), got {v}")));
            }
        }
        if self.n_subjects == 0 {
            return Err(Error::Config("synth.n_subjects must be at least 1".into()));
        }
        if self.session_len < self.min_segment {
            return Err(Error::Config(format!(
                "synth.session_len {} s is shorter than one segment ({} s)",
                self.session_len, self.min_segment
            )));
        }
        Ok(())
    }

    /// Long-run missing fraction of one eye dropping out at `rate` bursts/s.
    fn eye_missing_fraction(&self, rate: f64) -> f64 {
        self.dropout_len / (self.dropout_len + 1.0 / rate)
    }

    /// Expected share of missing samples, averaged over both eyes.
    pub fn expected_missing_fraction(&self) -> f64 {
        let a = self.eye_asymmetry;
        0.5 * (self.eye_missing_fraction(self.dropout_rate * (1.0 + a))
            + self.eye_missing_fraction(self.dropout_rate * (1.0 - a)))
    }

    pub fn gaze_samples(&self) -> usize {
        (self.session_len * GAZE_RATE_HZ as f64).round() as usize
    }
}

/// A stretch of homogeneous behavior; segments tile the session.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct BehaviorSegment {
    pub start: f64,
    pub end: f64,
    pub kind: Intent,
}

pub fn subject_id(idx: usize) -> String {
    format!("s{:02}", idx + 1)
}

/// Per-subject behavioral multipliers, shared across that subject's tasks.
#[derive(Clone, Debug)]
struct Profile {
    fixation: f64,
    saccade: f64,
    jump: f64,
    noise: f64,
    gain: f64,
    pref: (f64, f64),
    eye_offset: [(f64, f64); 2],
    /// +1 makes the left eye the worse tracked one.
    eye_sign: f64,
}

impl Profile {
    fn draw(cfg: &SynthConfig, subject: usize) -> Self {
        let mut rng = seed::rng(cfg.seed, &[0x5b, subject as u64]);
        let s = cfg.subject_variation;
        let mult = |rng: &mut ChaCha8Rng| 1.0 + rng.random_range(-s..=s);
        let (w, h) = (cfg.screen_w as f64, cfg.screen_h as f64);
        Profile {
            fixation: mult(&mut rng),
            saccade: mult(&mut rng),
            jump: mult(&mut rng),
            noise: mult(&mut rng),
            gain: mult(&mut rng),
            pref: (
                w * (0.5 + rng.random_range(-0.08..=0.08)),
                h * (0.5 + rng.random_range(-0.08..=0.08)),
            ),
            eye_offset: [
                (rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0)),
                (rng.random_range(-4.0..=4.0), rng.random_range(-4.0..=4.0)),
            ],
            eye_sign: if rng.random_bool(0.5) { 1.0 } else { -1.0 },
        }
    }
}

/// Page geometry in content pixels.
struct Layout {
    columns: Vec<(f64, f64)>,
    top: f64,
    line_height: f64,
    lines: usize,
    bounds: (f64, f64),
}

impl Layout {
    fn new(task: Task, w: f64, h: f64) -> Self {
        let sx = w / 1920.0;
        let sy = h / 1080.0;
        let columns = match task {
            Task::Text => vec![(120.0 * sx, 1800.0 * sx)],
            Task::Webpage => vec![(100.0 * sx, 900.0 * sx), (1020.0 * sx, 1820.0 * sx)],
        };
        let top = 120.0 * sy;
        let line_height = 36.0 * sy;
        let lines = ((h - 2.0 * top) / line_height).floor() as usize + 1;
        Layout {
            columns,
            top,
            line_height,
            lines,
            bounds: (w, h),
        }
    }

    fn line_y(&self, line: usize) -> f64 {
        self.top + line as f64 * self.line_height
    }

    fn nearest_line(&self, y: f64) -> usize {
        let l = ((y - self.top) / self.line_height).round();
        l.clamp(0.0, (self.lines - 1) as f64) as usize
    }

    fn nearest_column(&self, x: f64) -> usize {
        self.columns
            .iter()
            .enumerate()
            .min_by(|a, b| {
                let da = (x - 0.5 * (a.1 .0 + a.1 .1)).abs();
                let db = (x - 0.5 * (b.1 .0 + b.1 .1)).abs();
                da.total_cmp(&db)
            })
            .map(|(i, _)| i)
            .unwrap_or(0)
    }
}

/// Splits `[0, len]` into alternating segments starting with reading.
fn draw_segments(cfg: &SynthConfig, task: Task, rng: &mut ChaCha8Rng) -> Vec<BehaviorSegment> {
    let reading_mean = match task {
        Task::Text => cfg.reading_segment_mean,
        Task::Webpage => cfg.reading_segment_mean * cfg.webpage_reading_factor,
    };
    let mut out = Vec::new();
    let mut t = 0.0;
    let mut kind = Intent::Reading;
    while t < cfg.session_len {
        let mean = match kind {
            Intent::Reading => reading_mean,
            Intent::Scanning => cfg.scanning_segment_mean,
        };
        let extra = (mean - cfg.min_segment).max(1e-3);
        let d = cfg.min_segment + Exp::new(1.0 / extra).unwrap().sample(rng);
        let mut end = (t + d).min(cfg.session_len);
        // Fold a sliver shorter than one segment into the last one.
        if cfg.session_len - end < cfg.min_segment {
            end = cfg.session_len;
        }
        out.push(BehaviorSegment { start: t, end, kind });
        t = end;
        kind = match kind {
            Intent::Reading => Intent::Scanning,
            Intent::Scanning => Intent::Reading,
        };
    }
    out
}

/// Content-space eye movement generator.
struct Oculomotor<'a> {
    layout: &'a Layout,
    pos: (f64, f64),
    from: (f64, f64),
    target: (f64, f64),
    saccade_left: usize,
    saccade_total: usize,
    fixation_left: usize,
    column: usize,
    line: usize,
}

impl<'a> Oculomotor<'a> {
    fn new(layout: &'a Layout) -> Self {
        let (x0, _) = layout.columns[0];
        let start = (x0, layout.line_y(0));
        Oculomotor {
            layout,
            pos: start,
            from: start,
            target: start,
            saccade_left: 0,
            saccade_total: 0,
            fixation_left: 0,
            column: 0,
            line: 0,
        }
    }

    fn jump_to(&mut self, target: (f64, f64), samples: usize) {
        self.from = self.pos;
        self.target = target;
        self.saccade_total = samples.max(1);
        self.saccade_left = self.saccade_total;
    }

    fn start_reading(&mut self, rng: &mut ChaCha8Rng) {
        self.column = self.layout.nearest_column(self.pos.0);
        self.line = self.layout.nearest_line(self.pos.1);
        let (x0, x1) = self.layout.columns[self.column];
        let x = x0 + rng.random_range(0.0..0.3) * (x1 - x0);
        self.jump_to((x, self.layout.line_y(self.line)), 4);
        self.fixation_left = 0;
    }

    fn next_reading_target(&mut self, cfg: &SynthConfig, p: &Profile, rng: &mut ChaCha8Rng) -> ((f64, f64), usize) {
        let (x0, x1) = self.layout.columns[self.column];
        let y = self.layout.line_y(self.line);
        if rng.random_bool(cfg.regression_prob) {
            let back = Normal::new(0.5 * cfg.saccade_px_mean, 0.25 * cfg.saccade_px_mean)
                .unwrap()
                .sample(rng)
                .abs();
            return (((self.target.0 - back).max(x0), y), 2);
        }
        let step = Normal::new(cfg.saccade_px_mean * p.saccade, cfg.saccade_px_std)
            .unwrap()
            .sample(rng)
            .max(10.0);
        let x = self.target.0 + step;
        if x <= x1 {
            return ((x, y), 3);
        }
        // Return sweep to the start of the next line, moving to the next
        // column or back to the top at the end of the page.
        self.line += 1;
        if self.line >= self.layout.lines {
            self.line = 0;
            self.column = (self.column + 1) % self.layout.columns.len();
        }
        let (nx0, _) = self.layout.columns[self.column];
        let jitter = Normal::new(0.0, 8.0).unwrap().sample(rng);
        (((nx0 + jitter).max(0.0), self.layout.line_y(self.line)), 5)
    }

    fn next_scanning_target(&mut self, cfg: &SynthConfig, p: &Profile, rng: &mut ChaCha8Rng) -> ((f64, f64), usize) {
        let (w, h) = self.layout.bounds;
        let j = cfg.scan_jump_px * p.jump;
        // Mostly vertical search: occasionally relocate to an arbitrary
        // height, otherwise jump relative to the current fixation.
        let dx = Normal::new(0.0, 0.35 * j).unwrap().sample(rng);
        let target = if rng.random_bool(0.15) {
            (self.target.0 + dx, rng.random_range(0.05 * h..0.95 * h))
        } else {
            let dy = Normal::new(0.0, j).unwrap().sample(rng);
            (self.target.0 + dx, self.target.1 + dy)
        };
        let target = (target.0.clamp(0.02 * w, 0.98 * w), target.1.clamp(0.02 * h, 0.98 * h));
        let dist = ((target.0 - self.pos.0).powi(2) + (target.1 - self.pos.1).powi(2)).sqrt();
        (target, 3 + (dist / 150.0) as usize)
    }

    fn step(&mut self, kind: Intent, cfg: &SynthConfig, p: &Profile, rng: &mut ChaCha8Rng) {
        if self.saccade_left > 0 {
            self.saccade_left -= 1;
            let f = 1.0 - self.saccade_left as f64 / self.saccade_total as f64;
            self.pos = (
                self.from.0 + (self.target.0 - self.from.0) * f,
                self.from.1 + (self.target.1 - self.from.1) * f,
            );
            if self.saccade_left == 0 {
                let (mean, std) = match kind {
                    Intent::Reading => (cfg.fixation_ms_mean, cfg.fixation_ms_std),
                    Intent::Scanning => (cfg.scan_fixation_ms_mean, cfg.scan_fixation_ms_std),
                };
                let ms = Normal::new(mean * p.fixation, std).unwrap().sample(rng).max(60.0);
                self.fixation_left = (ms * 1e-3 * GAZE_RATE_HZ as f64).round() as usize;
            }
            return;
        }
        if self.fixation_left > 0 {
            self.fixation_left -= 1;
            self.pos = self.target;
            return;
        }
        let (target, samples) = match kind {
            Intent::Reading => self.next_reading_target(cfg, p, rng),
            Intent::Scanning => self.next_scanning_target(cfg, p, rng),
        };
        self.jump_to(target, samples);
        self.step(kind, cfg, p, rng);
    }
}

/// Two-state renewal process for one eye's tracking loss.
struct Dropout {
    rate: f64,
    mean_len: f64,
    remaining: usize,
    missing: bool,
}

impl Dropout {
    fn new(rate: f64, mean_len: f64, rng: &mut ChaCha8Rng) -> Self {
        let mut d = Dropout {
            rate,
            mean_len,
            remaining: 0,
            missing: false,
        };
        d.remaining = d.draw(false, rng);
        d
    }

    fn draw(&self, missing: bool, rng: &mut ChaCha8Rng) -> usize {
        let mean = if missing { self.mean_len } else { 1.0 / self.rate };
        let secs = Exp::new(1.0 / mean).unwrap().sample(rng);
        ((secs * GAZE_RATE_HZ as f64).round() as usize).max(1)
    }

    fn next(&mut self, rng: &mut ChaCha8Rng) -> bool {
        if self.remaining == 0 {
            self.missing = !self.missing;
            self.remaining = self.draw(self.missing, rng);
        }
        self.remaining -= 1;
        self.missing
    }
}

/// Simulates one subject × task session together with its behavior
/// segments.
pub fn generate_session_with_segments(
    cfg: &SynthConfig,
    subject_idx: usize,
    task: Task,
) -> Result<(Session, Vec<BehaviorSegment>)> {
    cfg.validate()?;
    let profile = Profile::draw(cfg, subject_idx);
    let task_part = match task {
        Task::Text => 1,
        Task::Webpage => 2,
    };
    let mut rng = seed::rng(cfg.seed, &[0x5e55, subject_idx as u64, task_part]);
    let segments = draw_segments(cfg, task, &mut rng);
    let (w, h) = (cfg.screen_w as f64, cfg.screen_h as f64);
    let m_fac = cfg.magnification;
    let shrink = 1.0 - 1.0 / m_fac;
    let layout = Layout::new(task, w, h);
    let mut eye = Oculomotor::new(&layout);
    let noise = Normal::new(0.0, cfg.tracker_noise_px * profile.noise).unwrap();
    let a = cfg.eye_asymmetry * profile.eye_sign;
    let mut dropout = [
        Dropout::new(cfg.dropout_rate * (1.0 + a), cfg.dropout_len, &mut rng),
        Dropout::new(cfg.dropout_rate * (1.0 - a), cfg.dropout_len, &mut rng),
    ];
    let dt = 1.0 / GAZE_RATE_HZ as f64;
    let mouse_every = (GAZE_RATE_HZ / MOUSE_RATE_HZ) as usize;

    let n = cfg.gaze_samples();
    let mut gaze = Vec::with_capacity(n);
    let mut mouse_log = Vec::with_capacity(n / mouse_every + 1);
    // Start with the cursor already placed for the first fixation.
    let mut cursor = if shrink > 0.0 {
        (
            ((eye.pos.0 - profile.pref.0 / m_fac) / shrink).clamp(0.0, w),
            ((eye.pos.1 - profile.pref.1 / m_fac) / shrink).clamp(0.0, h),
        )
    } else {
        eye.pos
    };
    let mut seg_idx = 0;
    let mut prev_kind = None;
    for i in 0..n {
        let t = i as f64 * dt;
        while seg_idx + 1 < segments.len() && t >= segments[seg_idx].end {
            seg_idx += 1;
        }
        let kind = segments[seg_idx].kind;
        if prev_kind != Some(kind) {
            if kind == Intent::Reading {
                eye.start_reading(&mut rng);
            } else {
                eye.fixation_left = 0;
            }
            prev_kind = Some(kind);
        }
        eye.step(kind, cfg, &profile, &mut rng);
        let content = eye.pos;

        // Cursor position that would show `content` at the preferred spot.
        let desired = if shrink > 0.0 {
            (
                (content.0 - profile.pref.0 / m_fac) / shrink,
                (content.1 - profile.pref.1 / m_fac) / shrink,
            )
        } else {
            content
        };
        let gain = profile.gain
            * match kind {
                Intent::Reading => cfg.reading_mouse_gain,
                Intent::Scanning => cfg.scanning_mouse_gain,
            };
        let alpha = 1.0 - (-gain * dt).exp();
        cursor.0 = (cursor.0 + alpha * (desired.0 - cursor.0)).clamp(0.0, w);
        cursor.1 = (cursor.1 + alpha * (desired.1 - cursor.1)).clamp(0.0, h);
        let viewport = (cursor.0 * shrink, cursor.1 * shrink);

        let mut eyes = [None, None];
        for (k, slot) in eyes.iter_mut().enumerate() {
            let gone = dropout[k].next(&mut rng);
            let off = profile.eye_offset[k];
            let px = (content.0 - viewport.0) * m_fac + off.0 + noise.sample(&mut rng);
            let py = (content.1 - viewport.1) * m_fac + off.1 + noise.sample(&mut rng);
            if !gone {
                *slot = Some((px.clamp(0.0, w) as f32, py.clamp(0.0, h) as f32));
            }
        }
        gaze.push(GazeSample {
            t: t as f32,
            lx: eyes[0].map(|p| p.0),
            ly: eyes[0].map(|p| p.1),
            rx: eyes[1].map(|p| p.0),
            ry: eyes[1].map(|p| p.1),
            vx: viewport.0 as f32,
            vy: viewport.1 as f32,
        });
        if i % mouse_every == 0 {
            mouse_log.push(MouseSample {
                t: t as f32,
                mx: cursor.0 as f32,
                my: cursor.1 as f32,
            });
        }
    }

    let labels = segments
        .iter()
        .map(|s| LabelInterval {
            start: s.start as f32,
            end: s.end as f32,
            label: s.kind,
        })
        .collect();
    let meta = SessionMeta::new(subject_id(subject_idx), task, m_fac, cfg.screen_w, cfg.screen_h);
    Ok((
        Session {
            meta,
            gaze,
            mouse: mouse_log,
            labels,
        },
        segments,
    ))
}

pub fn generate_session(cfg: &SynthConfig, subject_idx: usize, task: Task) -> Result<Session> {
    generate_session_with_segments(cfg, subject_idx, task).map(|(s, _)| s)
}

pub fn session_file_name(subject_idx: usize, task: Task) -> String {
    format!("{}_{}.session", subject_id(subject_idx), task.as_str())
}

/// Writes one file per subject × task into `out_dir` and returns the paths.
pub fn generate_dataset(cfg: &SynthConfig, out_dir: impl AsRef<Path>) -> Result<Vec<PathBuf>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let out_dir = out_dir.as_ref();
    std::fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let jobs: Vec<(usize, Task)> = (0..cfg.n_subjects)
        .flat_map(|s| [(s, Task::Text), (s, Task::Webpage)])
        .collect();
    jobs.par_iter()
        .map(|&(s, task)| {
            let path = out_dir.join(session_file_name(s, task));
            write_session(&generate_session(cfg, s, task)?, &path)?;
            Ok(path)
        })
        .collect()
}

/// Generates all sessions in memory, ordered by subject then task.
pub fn generate_sessions(cfg: &SynthConfig) -> Result<Vec<Session>> {
    use rayon::prelude::*;
    cfg.validate()?;
    let jobs: Vec<(usize, Task)> = (0..cfg.n_subjects)
        .flat_map(|s| [(s, Task::Text), (s, Task::Webpage)])
        .collect();
    jobs.par_iter().map(|&(s, task)| generate_session(cfg, s, task)).collect()
}
