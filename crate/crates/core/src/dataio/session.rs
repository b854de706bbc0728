use serde::{Deserialize, Serialize};

/// Eye-tracker sampling rate of v1 session files.
pub const GAZE_RATE_HZ: u32 = 120;
/// Mouse log sampling rate of v1 session files.
pub const MOUSE_RATE_HZ: u32 = 10;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Text,
    Webpage,
}

impl Task {
    pub fn as_str(self) -> &'static str {
        match self {
            Task::Text => "text",
            Task::Webpage => "webpage",
        }
    }
}

/// Intent class. Class id 0 is reading, 1 is scanning.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Intent {
    Reading,
    Scanning,
}

impl Intent {
    pub const ALL: [Intent; 2] = [Intent::Reading, Intent::Scanning];

    pub fn class_id(self) -> usize {
        match self {
            Intent::Reading => 0,
            Intent::Scanning => 1,
        }
    }

    pub fn from_class_id(id: usize) -> Option<Self> {
        match id {
            0 => Some(Intent::Reading),
            1 => Some(Intent::Scanning),
            _ => None,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Intent::Reading => "reading",
            Intent::Scanning => "scanning",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "reading" => Some(Intent::Reading),
            "scanning" => Some(Intent::Scanning),
            _ => None,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SessionMeta {
    pub subject_id: String,
    pub task: Task,
    /// Full-lens magnification factor `M ≥ 1`.
    pub magnification: f64,
    pub screen_w: u32,
    pub screen_h: u32,
    pub gaze_rate: u32,
    pub mouse_rate: u32,
}

impl SessionMeta {
    pub fn new(subject_id: impl Into<String>, task: Task, magnification: f64, screen_w: u32, screen_h: u32) -> Self {
        SessionMeta {
            subject_id: subject_id.into(),
            task,
            magnification,
            screen_w,
            screen_h,
            gaze_rate: GAZE_RATE_HZ,
            mouse_rate: MOUSE_RATE_HZ,
        }
    }

    /// Largest admissible viewport origin along each axis, `dim·(1 − 1/M)`.
    pub fn viewport_limit(&self) -> (f64, f64) {
        let f = 1.0 - 1.0 / self.magnification;
        (self.screen_w as f64 * f, self.screen_h as f64 * f)
    }
}

/// One binocular eye-tracker sample. Gaze coordinates are physical-screen
/// pixels while magnified; the viewport origin is in content pixels.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct GazeSample {
    pub t: f32,
    pub lx: Option<f32>,
    pub ly: Option<f32>,
    pub rx: Option<f32>,
    pub ry: Option<f32>,
    pub vx: f32,
    pub vy: f32,
}

impl GazeSample {
    pub fn eye(&self, eye: Eye) -> Option<(f32, f32)> {
        match eye {
            Eye::Left => self.lx.zip(self.ly),
            Eye::Right => self.rx.zip(self.ry),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Eye {
    Left,
    Right,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct MouseSample {
    pub t: f32,
    pub mx: f32,
    pub my: f32,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LabelInterval {
    pub start: f32,
    pub end: f32,
    pub label: Intent,
}

impl LabelInterval {
    /// Half-open membership `start ≤ t < end`, so tiling intervals never
    /// both claim a boundary instant.
    pub fn contains(&self, t: f64) -> bool {
        (self.start as f64) <= t && t < self.end as f64
    }
}

/// One subject × task recording.
#[derive(Clone, Debug, PartialEq)]
pub struct Session {
    pub meta: SessionMeta,
    pub gaze: Vec<GazeSample>,
    pub mouse: Vec<MouseSample>,
    pub labels: Vec<LabelInterval>,
}

impl Session {
    /// Annotation covering time `t`, if any.
    pub fn label_at(&self, t: f64) -> Option<Intent> {
        let idx = self.labels.partition_point(|l| (l.end as f64) <= t);
        self.labels.get(idx).filter(|l| l.contains(t)).map(|l| l.label)
    }

    pub fn duration(&self) -> f64 {
        match (self.gaze.first(), self.gaze.last()) {
            (Some(a), Some(b)) => (b.t - a.t) as f64,
            _ => 0.0,
        }
    }
}
