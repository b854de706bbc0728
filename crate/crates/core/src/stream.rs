//! Sliding-window classification over a live gaze feed.
//!
//! The engine keeps the last 24 samples of the selected eye, fills interior
//! gaps once the next valid sample arrives, and classifies every `stride`
//! samples. Trailing gaps that are still open at an emission are filled with
//! the last valid value; batch preprocessing would interpolate them if the
//! gap closes later, which is the only source of disagreement with
//! [`windowize`](crate::dataio::windowize).

use std::collections::VecDeque;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::dataio::{
    remap_to_screen, Channels, Eye, GazeSample, Intent, NormStats, SessionMeta, MAX_MISSING, WINDOW_LEN,
};
use crate::error::{Error, Result};
use crate::model::{load_checkpoint, predict, HeadKind, ModelInput, ModelParams, Stream};

/// Classification of the window ending at `t`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub t: f64,
    pub label: Intent,
    pub p_reading: f32,
}

#[derive(Clone, Copy, Debug)]
struct Slot {
    t: f64,
    /// Interpolated raw gaze in pixels; NaN while a gap is still open.
    raw: (f64, f64),
    viewport: (f64, f64),
    missing: bool,
}

/// Model snapshot shared between engines.
#[derive(Clone, Debug)]
pub struct Classifier {
    pub params: Arc<ModelParams<f32>>,
    pub stats: NormStats,
}

impl Classifier {
    pub fn new(params: ModelParams<f32>, stats: NormStats) -> Result<Self> {
        if params.head != HeadKind::IntentClassifier {
            return Err(Error::Engine("checkpoint has no intent-classifier head".into()));
        }
        if params.input_mode.uses_mouse() {
            return Err(Error::Engine(format!(
                "input mode {} needs the cursor stream; streaming inference reads gaze only",
                params.input_mode.as_str()
            )));
        }
        Ok(Classifier {
            params: Arc::new(params),
            stats,
        })
    }

    pub fn from_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let (params, stats) = load_checkpoint(dir)?;
        let stats = stats.ok_or_else(|| {
            Error::Engine(format!("checkpoint {} has no normalization statistics", dir.display()))
        })?;
        Self::new(params, stats)
    }

    /// `p_reading` for each window of `(g, c)` channels in screen fractions.
    pub fn classify(&self, windows: &[(Channels, Channels)]) -> Result<Vec<f32>> {
        if windows.is_empty() {
            return Ok(Vec::new());
        }
        let std = |ch: &Channels, s: &[crate::dataio::FeatureStats; 2]| {
            let mut out = *ch;
            for (axis, row) in out.iter_mut().enumerate() {
                for v in row.iter_mut() {
                    *v = s[axis].apply(*v);
                }
            }
            out
        };
        let g: Vec<Channels> = windows.iter().map(|(g, _)| std(g, &self.stats.g)).collect();
        let c: Vec<Channels> = windows.iter().map(|(_, c)| std(c, &self.stats.c)).collect();
        let mut input = ModelInput::new(windows.len());
        for &s in self.params.input_mode.streams() {
            let src = if s == Stream::Gaze { &g } else { &c };
            input = input.with(s, ModelInput::stream_tensor(src.iter()));
        }
        Ok(predict(&self.params, &input)?.into_iter().map(|p| p[0]).collect())
    }
}

/// Streaming state for one gaze feed.
#[derive(Clone, Debug)]
pub struct Engine {
    classifier: Option<Classifier>,
    meta: SessionMeta,
    eye: Eye,
    stride: usize,
    ring: VecDeque<Slot>,
    /// Samples pushed since the last reset.
    count: usize,
    /// Index and raw value of the most recent valid sample.
    last_valid: Option<(usize, (f64, f64))>,
}

impl Engine {
    /// Engine without a model; [`Engine::push`] fails until
    /// [`Engine::load`] is called.
    pub fn new(meta: SessionMeta, eye: Eye, stride: usize) -> Result<Self> {
        if stride == 0 {
            return Err(Error::Config("emission stride must be at least 1".into()));
        }
        if !(meta.magnification >= 1.0) {
            return Err(Error::Config(format!(
                "magnification must be ≥ 1, got {}",
                meta.magnification
            )));
        }
        Ok(Engine {
            classifier: None,
            meta,
            eye,
            stride,
            ring: VecDeque::with_capacity(WINDOW_LEN),
            count: 0,
            last_valid: None,
        })
    }

    pub fn with_classifier(meta: SessionMeta, eye: Eye, stride: usize, classifier: Classifier) -> Result<Self> {
        let mut e = Self::new(meta, eye, stride)?;
        e.load(classifier);
        Ok(e)
    }

    pub fn load(&mut self, classifier: Classifier) {
        self.classifier = Some(classifier);
    }

    pub fn classifier(&self) -> Option<&Classifier> {
        self.classifier.as_ref()
    }

    pub fn eye(&self) -> Eye {
        self.eye
    }

    /// Clears buffers and counters; the model stays loaded.
    pub fn reset(&mut self) {
        self.ring.clear();
        self.count = 0;
        self.last_valid = None;
    }

    /// Appends one sample and returns a decision when a window is due and
    /// passes the missing-sample rule.
    pub fn push(&mut self, sample: &GazeSample) -> Result<Option<Decision>> {
        if self.classifier.is_none() {
            return Err(Error::Engine("push before a checkpoint was loaded".into()));
        }
        let index = self.count;
        let point = sample.eye(self.eye).map(|(x, y)| (x as f64, y as f64));
        if self.ring.len() == WINDOW_LEN {
            self.ring.pop_front();
        }
        self.ring.push_back(Slot {
            t: sample.t as f64,
            raw: point.unwrap_or((f64::NAN, f64::NAN)),
            viewport: (sample.vx as f64, sample.vy as f64),
            missing: point.is_none(),
        });
        self.count += 1;
        if let Some(p) = point {
            self.close_gap(index, p);
            self.last_valid = Some((index, p));
        }

        if self.count < WINDOW_LEN || (self.count - WINDOW_LEN) % self.stride != 0 {
            return Ok(None);
        }
        let missing = self.ring.iter().filter(|s| s.missing).count();
        if missing > MAX_MISSING {
            return Ok(None);
        }
        let (g, c) = self.window_channels()?;
        let p_reading = self.classifier.as_ref().expect("checked above").classify(&[(g, c)])?[0];
        Ok(Some(Decision {
            t: self.ring.back().expect("full ring").t,
            label: if p_reading >= 0.5 { Intent::Reading } else { Intent::Scanning },
            p_reading,
        }))
    }

    /// Fills buffered samples between the previous valid sample and the new
    /// one at `index`: linearly by index, or with the new value when there
    /// was no earlier valid sample.
    fn close_gap(&mut self, index: usize, p: (f64, f64)) {
        let first = self.count - self.ring.len();
        for (k, slot) in self.ring.iter_mut().enumerate() {
            let i = first + k;
            if i >= index || !slot.raw.0.is_nan() {
                continue;
            }
            slot.raw = match self.last_valid {
                None => p,
                Some((a, pa)) => {
                    let f = (i - a) as f64 / (index - a) as f64;
                    (pa.0 + (p.0 - pa.0) * f, pa.1 + (p.1 - pa.1) * f)
                }
            };
        }
    }

    fn window_channels(&self) -> Result<(Channels, Channels)> {
        let screen = (self.meta.screen_w as f64, self.meta.screen_h as f64);
        let trailing = self.last_valid.map(|(_, p)| p);
        let mut g = [[0f32; WINDOW_LEN]; 2];
        let mut c = [[0f32; WINDOW_LEN]; 2];
        for (k, slot) in self.ring.iter().enumerate() {
            let raw = if slot.raw.0.is_nan() {
                trailing.ok_or_else(|| Error::Engine("window has no valid sample".into()))?
            } else {
                slot.raw
            };
            let comp = remap_to_screen(raw, slot.viewport, self.meta.magnification, screen)?;
            g[0][k] = (raw.0 / screen.0) as f32;
            g[1][k] = (raw.1 / screen.1) as f32;
            c[0][k] = (comp.0 / screen.0) as f32;
            c[1][k] = (comp.1 / screen.1) as f32;
        }
        Ok((g, c))
    }
}
