use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::preprocess::{interpolate_missing, mouse_position_held, mouse_velocity, remap_to_screen, select_eye};
use super::session::{Eye, Intent, Session};
use crate::error::{Error, Result};

/// Steps per window (0.2 s at 120 Hz).
pub const WINDOW_LEN: usize = 24;
/// A window is dropped when strictly more than this many samples are missing.
pub const MAX_MISSING: usize = WINDOW_LEN / 2;
/// Span used for the mouse-velocity target.
pub const WINDOW_SECONDS: f64 = 0.2;
/// Default training stride in samples.
pub const DEFAULT_STRIDE: usize = 6;

/// Two coordinate channels over the window, `[x, y]`.
pub type Channels = [[f32; WINDOW_LEN]; 2];

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WindowMode {
    Labeled,
    Pretext,
}

/// One 24-step window. Coordinates are screen fractions until
/// [`NormStats::apply`] standardizes them.
#[derive(Clone, Debug, PartialEq)]
pub struct Window {
    pub g: Channels,
    pub c: Channels,
    /// Cursor position resampled to the gaze clock; absent when the session
    /// has no mouse log.
    pub m: Option<Channels>,
    pub label: Option<Intent>,
    pub vel_target: Option<[f32; 2]>,
    pub t_end: f64,
    pub subject_id: String,
    /// Index of the window's first source sample.
    pub start: usize,
    /// Source samples missing before interpolation.
    pub missing: usize,
}

/// Whole-session streams after eye selection, interpolation and remapping,
/// in pixels.
#[derive(Clone, Debug)]
pub struct PreparedSession {
    pub eye: Eye,
    pub t: Vec<f64>,
    pub raw: [Vec<f64>; 2],
    pub comp: [Vec<f64>; 2],
    pub mouse: Option<[Vec<f64>; 2]>,
    pub missing: Vec<bool>,
}

impl PreparedSession {
    pub fn new(session: &Session, eye: Eye) -> Result<Self> {
        let meta = &session.meta;
        let screen = (meta.screen_w as f64, meta.screen_h as f64);
        let coord = |pick: fn((f32, f32)) -> f32| -> Vec<Option<f64>> {
            session
                .gaze
                .iter()
                .map(|s| {
                    let (x, y) = match eye {
                        Eye::Left => (s.lx, s.ly),
                        Eye::Right => (s.rx, s.ry),
                    };
                    x.zip(y).map(|p| pick(p) as f64)
                })
                .collect()
        };
        // A sample counts as missing when either coordinate is, so both
        // channels are interpolated from the same set of valid samples.
        let xs = interpolate_missing(&coord(|p| p.0));
        let ys = interpolate_missing(&coord(|p| p.1));
        let n = session.gaze.len();
        let mut comp = [Vec::with_capacity(n), Vec::with_capacity(n)];
        for (i, s) in session.gaze.iter().enumerate() {
            let (cx, cy) = if xs.values[i].is_nan() {
                (f64::NAN, f64::NAN)
            } else {
                remap_to_screen(
                    (xs.values[i], ys.values[i]),
                    (s.vx as f64, s.vy as f64),
                    meta.magnification,
                    screen,
                )?
            };
            comp[0].push(cx);
            comp[1].push(cy);
        }
        let t: Vec<f64> = session.gaze.iter().map(|s| s.t as f64).collect();
        let mouse = if session.mouse.is_empty() {
            None
        } else {
            let mut m = [Vec::with_capacity(n), Vec::with_capacity(n)];
            for &ti in &t {
                let (x, y) = mouse_position_held(&session.mouse, ti).expect("non-empty mouse log");
                m[0].push(x);
                m[1].push(y);
            }
            Some(m)
        };
        Ok(PreparedSession {
            eye,
            t,
            raw: [xs.values, ys.values],
            comp,
            mouse,
            missing: xs.missing,
        })
    }

    pub fn len(&self) -> usize {
        self.t.len()
    }

    pub fn is_empty(&self) -> bool {
        self.t.is_empty()
    }
}

fn channels(src: &[Vec<f64>; 2], start: usize, scale: (f64, f64)) -> Channels {
    let mut out = [[0f32; WINDOW_LEN]; 2];
    for k in 0..WINDOW_LEN {
        out[0][k] = (src[0][start + k] / scale.0) as f32;
        out[1][k] = (src[1][start + k] / scale.1) as f32;
    }
    out
}

/// Slices a session into windows using the eye picked by [`select_eye`].
pub fn windowize(session: &Session, stride: usize, mode: WindowMode) -> Result<Vec<Window>> {
    if session.gaze.len() < WINDOW_LEN {
        return Ok(Vec::new());
    }
    let eye = select_eye(&session.gaze)?;
    windowize_with_eye(session, eye, stride, mode)
}

pub fn windowize_with_eye(session: &Session, eye: Eye, stride: usize, mode: WindowMode) -> Result<Vec<Window>> {
    if stride == 0 {
        return Err(Error::Config("window stride must be at least 1".into()));
    }
    let n = session.gaze.len();
    if n < WINDOW_LEN {
        return Ok(Vec::new());
    }
    let prep = PreparedSession::new(session, eye)?;
    let screen = (session.meta.screen_w as f64, session.meta.screen_h as f64);
    let mut out = Vec::new();
    for start in (0..=n - WINDOW_LEN).step_by(stride) {
        let end = start + WINDOW_LEN;
        let missing = prep.missing[start..end].iter().filter(|&&m| m).count();
        if missing > MAX_MISSING {
            continue;
        }
        let t_end = prep.t[end - 1];
        let (label, vel_target) = match mode {
            WindowMode::Labeled => match session.label_at(t_end) {
                Some(l) => (Some(l), None),
                None => continue,
            },
            WindowMode::Pretext => {
                let v = mouse_velocity(&session.mouse, t_end - WINDOW_SECONDS, t_end)
                    .map(|(vx, vy)| [(vx / screen.0) as f32, (vy / screen.1) as f32]);
                (None, v)
            }
        };
        out.push(Window {
            g: channels(&prep.raw, start, screen),
            c: channels(&prep.comp, start, screen),
            m: prep.mouse.as_ref().map(|m| channels(m, start, screen)),
            label,
            vel_target,
            t_end,
            subject_id: session.meta.subject_id.clone(),
            start,
            missing,
        });
    }
    Ok(out)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeatureStats {
    pub mean: f64,
    pub std: f64,
}

impl Default for FeatureStats {
    fn default() -> Self {
        FeatureStats { mean: 0.0, std: 1.0 }
    }
}

impl FeatureStats {
    pub fn fit(name: &str, values: impl Iterator<Item = f64>) -> Self {
        let (mut n, mut sum, mut sq) = (0usize, 0.0f64, 0.0f64);
        for v in values {
            n += 1;
            sum += v;
            sq += v * v;
        }
        if n == 0 {
            return FeatureStats::default();
        }
        let mean = sum / n as f64;
        let var = (sq / n as f64 - mean * mean).max(0.0);
        let mut std = var.sqrt();
        if !(std > 1e-12) {
            log::warn!("feature {name} has zero variance in the training split; using std 1");
            std = 1.0;
        }
        FeatureStats { mean, std }
    }

    #[inline]
    pub fn apply(&self, v: f32) -> f32 {
        ((v as f64 - self.mean) / self.std) as f32
    }
}

/// Per-feature standardization fitted on training windows. Velocity targets
/// carry their own statistics.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct NormStats {
    pub g: [FeatureStats; 2],
    pub c: [FeatureStats; 2],
    pub m: [FeatureStats; 2],
    pub vel: [FeatureStats; 2],
}

impl NormStats {
    pub fn fit(windows: &[Window]) -> Self {
        let chan = |name: &str, pick: &dyn Fn(&Window) -> Option<&Channels>, axis: usize| {
            FeatureStats::fit(
                name,
                windows
                    .iter()
                    .filter_map(|w| pick(w))
                    .flat_map(move |ch| ch[axis].iter().map(|&v| v as f64)),
            )
        };
        let vel = |name: &str, axis: usize| {
            FeatureStats::fit(name, windows.iter().filter_map(|w| w.vel_target.map(|v| v[axis] as f64)))
        };
        NormStats {
            g: [chan("g_x", &|w| Some(&w.g), 0), chan("g_y", &|w| Some(&w.g), 1)],
            c: [chan("c_x", &|w| Some(&w.c), 0), chan("c_y", &|w| Some(&w.c), 1)],
            m: [chan("m_x", &|w| w.m.as_ref(), 0), chan("m_y", &|w| w.m.as_ref(), 1)],
            vel: [vel("vel_x", 0), vel("vel_y", 1)],
        }
    }

    pub fn apply(&self, w: &mut Window) {
        fn each(ch: &mut Channels, s: &[FeatureStats; 2]) {
            for (axis, row) in ch.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = s[axis].apply(*v);
                }
            }
        }
        each(&mut w.g, &self.g);
        each(&mut w.c, &self.c);
        if let Some(m) = w.m.as_mut() {
            each(m, &self.m);
        }
        if let Some(v) = w.vel_target.as_mut() {
            v[0] = self.vel[0].apply(v[0]);
            v[1] = self.vel[1].apply(v[1]);
        }
    }
}

/// Standardized copies of `windows` under fixed statistics.
pub fn normalize(windows: &[Window], stats: &NormStats) -> Vec<Window> {
    windows
        .iter()
        .map(|w| {
            let mut w = w.clone();
            stats.apply(&mut w);
            w
        })
        .collect()
}

const WINDOWS_MAGIC: &[u8; 8] = b"MGRWIN01";
/// g, c and m channels plus the 2-vector velocity target.
pub const FLOATS_PER_WINDOW: usize = 3 * 2 * WINDOW_LEN + 2;

#[derive(Debug, Serialize, Deserialize)]
struct WindowRecord {
    subject_id: String,
    t_end: f64,
    start: usize,
    missing: usize,
    label: Option<Intent>,
    has_mouse: bool,
    has_vel: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct WindowsManifest {
    format: String,
    version: u32,
    count: usize,
    window_len: usize,
    floats_per_window: usize,
    stats: Option<NormStats>,
    windows: Vec<WindowRecord>,
}

/// Writes windows as `magic | u64 manifest length | JSON manifest | f32 LE payload`.
pub fn export_windows(path: impl AsRef<Path>, windows: &[Window], stats: Option<&NormStats>) -> Result<()> {
    let path = path.as_ref();
    let manifest = WindowsManifest {
        format: "magread-windows".into(),
        version: 1,
        count: windows.len(),
        window_len: WINDOW_LEN,
        floats_per_window: FLOATS_PER_WINDOW,
        stats: stats.cloned(),
        windows: windows
            .iter()
            .map(|w| WindowRecord {
                subject_id: w.subject_id.clone(),
                t_end: w.t_end,
                start: w.start,
                missing: w.missing,
                label: w.label,
                has_mouse: w.m.is_some(),
                has_vel: w.vel_target.is_some(),
            })
            .collect(),
    };
    let json = serde_json::to_vec(&manifest)?;
    let mut buf = Vec::with_capacity(16 + json.len() + windows.len() * FLOATS_PER_WINDOW * 4);
    buf.extend_from_slice(WINDOWS_MAGIC);
    buf.extend_from_slice(&(json.len() as u64).to_le_bytes());
    buf.extend_from_slice(&json);
    let zeros = [[0f32; WINDOW_LEN]; 2];
    for w in windows {
        for ch in [&w.g, &w.c, w.m.as_ref().unwrap_or(&zeros)] {
            for v in ch.iter().flatten() {
                buf.extend_from_slice(&v.to_le_bytes());
            }
        }
        for v in w.vel_target.unwrap_or([0.0; 2]) {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    let mut f = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    f.write_all(&buf).map_err(|e| Error::io(path, e))
}

pub fn import_windows(path: impl AsRef<Path>) -> Result<(Vec<Window>, Option<NormStats>)> {
    let path = path.as_ref();
    let mut bytes = Vec::new();
    fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |msg: String| Error::Dataset(format!("{}: {msg}", path.display()));
    if bytes.len() < 16 || &bytes[..8] != WINDOWS_MAGIC {
        return Err(bad("not a windows export".into()));
    }
    let len = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = bytes.get(16..16 + len).ok_or_else(|| bad("truncated manifest".into()))?;
    let manifest: WindowsManifest = serde_json::from_slice(body)?;
    if manifest.window_len != WINDOW_LEN || manifest.floats_per_window != FLOATS_PER_WINDOW {
        return Err(bad("unsupported window shape".into()));
    }
    let payload = &bytes[16 + len..];
    let expected = manifest.count * FLOATS_PER_WINDOW * 4;
    if payload.len() != expected || manifest.windows.len() != manifest.count {
        return Err(bad(format!("payload holds {} bytes, expected {expected}", payload.len())));
    }
    let floats: Vec<f32> = payload
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    let read_ch = |src: &[f32]| -> Channels {
        let mut ch = [[0f32; WINDOW_LEN]; 2];
        ch[0].copy_from_slice(&src[..WINDOW_LEN]);
        ch[1].copy_from_slice(&src[WINDOW_LEN..2 * WINDOW_LEN]);
        ch
    };
    let windows = manifest
        .windows
        .into_iter()
        .zip(floats.chunks_exact(FLOATS_PER_WINDOW))
        .map(|(r, f)| {
            let step = 2 * WINDOW_LEN;
            Window {
                g: read_ch(&f[..step]),
                c: read_ch(&f[step..2 * step]),
                m: r.has_mouse.then(|| read_ch(&f[2 * step..3 * step])),
                label: r.label,
                vel_target: r.has_vel.then(|| [f[3 * step], f[3 * step + 1]]),
                t_end: r.t_end,
                subject_id: r.subject_id,
                start: r.start,
                missing: r.missing,
            }
        })
        .collect();
    Ok((windows, manifest.stats))
}
