//! The v1 session container.
//!
//! ```text
//! #meta {"subject_id":"s01","task":"text",...}
//! #gaze
//! t,lx,ly,rx,ry,vx,vy
//! 0,812.5,402.25,,,0,0
//! #mouse
//! t,mx,my
//! 0,960,540
//! #labels
//! start,end,label
//! 0,6.5,reading
//! ```
//!
//! Missing gaze coordinates are empty fields. Every float is written with
//! 9 significant digits, which round-trips any `f32` exactly.

use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use sha2::{Digest, Sha256};

use super::session::{
    GazeSample, Intent, LabelInterval, MouseSample, Session, SessionMeta, GAZE_RATE_HZ, MOUSE_RATE_HZ,
};
use crate::error::{Error, Result};

pub const GAZE_HEADER: &str = "t,lx,ly,rx,ry,vx,vy";
pub const MOUSE_HEADER: &str = "t,mx,my";
pub const LABEL_HEADER: &str = "start,end,label";

/// Slack, in pixels, allowed on coordinate range checks for values that
/// were clamped in 64-bit and then stored as `f32`.
const RANGE_SLACK: f64 = 0.01;

/// Formats like C's `%.9g`: 9 significant digits, trailing zeros dropped,
/// scientific notation outside `1e-5 ≤ |x| < 1e9`.
pub fn format_sig9(x: f32) -> String {
    if x == 0.0 {
        return if x.is_sign_negative() { "-0".into() } else { "0".into() };
    }
    if !x.is_finite() {
        return x.to_string();
    }
    let sci = format!("{x:.8e}");
    let (mantissa, exp) = sci.split_once('e').expect("exponent present");
    let exp: i32 = exp.parse().expect("integer exponent");
    let negative = mantissa.starts_with('-');
    let digits: String = mantissa.chars().filter(char::is_ascii_digit).collect();
    let mut out = String::with_capacity(16);
    if negative {
        out.push('-');
    }
    if (-5..9).contains(&exp) {
        let (int_part, frac_part) = if exp >= 0 {
            let split = exp as usize + 1;
            (digits[..split].to_string(), digits[split..].to_string())
        } else {
            ("0".to_string(), "0".repeat((-exp - 1) as usize) + &digits)
        };
        out.push_str(&int_part);
        let frac = frac_part.trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
    } else {
        out.push_str(&digits[..1]);
        let frac = digits[1..].trim_end_matches('0');
        if !frac.is_empty() {
            out.push('.');
            out.push_str(frac);
        }
        let _ = write!(out, "e{exp}");
    }
    out
}

fn opt(x: Option<f32>) -> String {
    x.map(format_sig9).unwrap_or_default()
}

/// Serializes a session into the v1 container.
pub fn write_session_string(session: &Session) -> Result<String> {
    let mut out = String::with_capacity(64 * (session.gaze.len() + 16));
    out.push_str("#meta ");
    out.push_str(&serde_json::to_string(&session.meta)?);
    out.push_str("\n#gaze\n");
    out.push_str(GAZE_HEADER);
    out.push('\n');
    for g in &session.gaze {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{}",
            format_sig9(g.t),
            opt(g.lx),
            opt(g.ly),
            opt(g.rx),
            opt(g.ry),
            format_sig9(g.vx),
            format_sig9(g.vy)
        );
    }
    out.push_str("#mouse\n");
    out.push_str(MOUSE_HEADER);
    out.push('\n');
    for m in &session.mouse {
        let _ = writeln!(out, "{},{},{}", format_sig9(m.t), format_sig9(m.mx), format_sig9(m.my));
    }
    out.push_str("#labels\n");
    out.push_str(LABEL_HEADER);
    out.push('\n');
    for l in &session.labels {
        let _ = writeln!(out, "{},{},{}", format_sig9(l.start), format_sig9(l.end), l.label.as_str());
    }
    Ok(out)
}

pub fn write_session(session: &Session, path: impl AsRef<Path>) -> Result<()> {
    let path = path.as_ref();
    let text = write_session_string(session)?;
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// SHA-256 of the serialized container, hex encoded.
pub fn session_checksum(session: &Session) -> Result<String> {
    Ok(hex::encode(Sha256::digest(write_session_string(session)?.as_bytes())))
}

pub fn parse_session(path: impl AsRef<Path>) -> Result<Session> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_session_str(&text)
}

struct Lines<'a> {
    inner: std::iter::Peekable<std::iter::Enumerate<std::str::Lines<'a>>>,
    last: usize,
}

impl<'a> Lines<'a> {
    fn next(&mut self) -> Option<(usize, &'a str)> {
        let (i, l) = self.inner.next()?;
        self.last = i + 1;
        Some((i + 1, l.strip_suffix('\r').unwrap_or(l)))
    }

    fn peek_is_section(&mut self) -> bool {
        matches!(self.inner.peek(), Some((_, l)) if l.starts_with('#'))
    }

    fn expect(&mut self, want: &str) -> Result<usize> {
        match self.next() {
            Some((n, l)) if l == want => Ok(n),
            Some((n, l)) => Err(Error::parse(n, format!("malformed header: expected `{want}`, found `{l}`"))),
            None => Err(Error::parse(self.last + 1, format!("malformed header: missing `{want}`"))),
        }
    }
}

fn field(line: usize, raw: &str, name: &str) -> Result<f32> {
    let v: f32 = raw
        .trim()
        .parse()
        .map_err(|_| Error::parse(line, format!("{name}: cannot parse `{raw}` as a number")))?;
    if !v.is_finite() {
        return Err(Error::parse(line, format!("{name}: non-finite value `{raw}`")));
    }
    Ok(v)
}

fn opt_field(line: usize, raw: &str, name: &str) -> Result<Option<f32>> {
    if raw.trim().is_empty() {
        Ok(None)
    } else {
        field(line, raw, name).map(Some)
    }
}

fn split_exact<'a>(line: usize, text: &'a str, n: usize) -> Result<Vec<&'a str>> {
    let parts: Vec<&str> = text.split(',').collect();
    if parts.len() != n {
        return Err(Error::parse(
            line,
            format!("expected {n} comma-separated fields, found {}", parts.len()),
        ));
    }
    Ok(parts)
}

fn check_range(line: usize, name: &str, v: f32, hi: f64) -> Result<()> {
    let v = v as f64;
    if v < -RANGE_SLACK || v > hi + RANGE_SLACK {
        return Err(Error::parse(
            line,
            format!("{name} = {v} out of range [0, {hi}]"),
        ));
    }
    Ok(())
}

fn validate_meta(line: usize, meta: &SessionMeta) -> Result<()> {
    if !(meta.magnification.is_finite() && meta.magnification >= 1.0) {
        return Err(Error::parse(line, format!("magnification must be ≥ 1, got {}", meta.magnification)));
    }
    if meta.screen_w == 0 || meta.screen_h == 0 {
        return Err(Error::parse(line, "screen dimensions must be positive"));
    }
    if meta.gaze_rate != GAZE_RATE_HZ || meta.mouse_rate != MOUSE_RATE_HZ {
        return Err(Error::parse(
            line,
            format!(
                "v1 files require gaze_rate {GAZE_RATE_HZ} and mouse_rate {MOUSE_RATE_HZ}, got {} and {}",
                meta.gaze_rate, meta.mouse_rate
            ),
        ));
    }
    if meta.subject_id.is_empty() {
        return Err(Error::parse(line, "subject_id is empty"));
    }
    Ok(())
}

/// Parses and validates a v1 container held in memory.
pub fn parse_session_str(text: &str) -> Result<Session> {
    let mut lines = Lines {
        inner: text.lines().enumerate().peekable(),
        last: 0,
    };
    let (n, first) = lines.next().ok_or_else(|| Error::parse(1, "malformed header: empty file"))?;
    let json = first
        .strip_prefix("#meta ")
        .ok_or_else(|| Error::parse(n, "malformed header: first line must be `#meta {json}`"))?;
    let meta: SessionMeta =
        serde_json::from_str(json).map_err(|e| Error::parse(n, format!("malformed header: meta json: {e}")))?;
    validate_meta(n, &meta)?;
    let (w, h) = (meta.screen_w as f64, meta.screen_h as f64);
    let (vlim_x, vlim_y) = meta.viewport_limit();

    lines.expect("#gaze")?;
    lines.expect(GAZE_HEADER)?;
    let mut gaze = Vec::new();
    let mut prev_t = f32::NEG_INFINITY;
    while !lines.peek_is_section() {
        let Some((n, l)) = lines.next() else { break };
        let p = split_exact(n, l, 7)?;
        let s = GazeSample {
            t: field(n, p[0], "t")?,
            lx: opt_field(n, p[1], "lx")?,
            ly: opt_field(n, p[2], "ly")?,
            rx: opt_field(n, p[3], "rx")?,
            ry: opt_field(n, p[4], "ry")?,
            vx: field(n, p[5], "vx")?,
            vy: field(n, p[6], "vy")?,
        };
        if s.t <= prev_t {
            return Err(Error::parse(n, format!("non-monotonic timestamp {} after {}", s.t, prev_t)));
        }
        prev_t = s.t;
        for (name, v, hi) in [("lx", s.lx, w), ("ly", s.ly, h), ("rx", s.rx, w), ("ry", s.ry, h)] {
            if let Some(v) = v {
                check_range(n, name, v, hi)?;
            }
        }
        check_range(n, "vx", s.vx, vlim_x)?;
        check_range(n, "vy", s.vy, vlim_y)?;
        gaze.push(s);
    }

    lines.expect("#mouse")?;
    lines.expect(MOUSE_HEADER)?;
    let mut mouse = Vec::new();
    let mut prev_t = f32::NEG_INFINITY;
    while !lines.peek_is_section() {
        let Some((n, l)) = lines.next() else { break };
        let p = split_exact(n, l, 3)?;
        let m = MouseSample {
            t: field(n, p[0], "t")?,
            mx: field(n, p[1], "mx")?,
            my: field(n, p[2], "my")?,
        };
        if m.t <= prev_t {
            return Err(Error::parse(n, format!("non-monotonic timestamp {} after {}", m.t, prev_t)));
        }
        prev_t = m.t;
        check_range(n, "mx", m.mx, w)?;
        check_range(n, "my", m.my, h)?;
        mouse.push(m);
    }

    lines.expect("#labels")?;
    lines.expect(LABEL_HEADER)?;
    let mut labels: Vec<LabelInterval> = Vec::new();
    while let Some((n, l)) = lines.next() {
        if l.starts_with('#') {
            return Err(Error::parse(n, format!("malformed header: unexpected section `{l}`")));
        }
        if l.is_empty() {
            continue;
        }
        let p = split_exact(n, l, 3)?;
        let start = field(n, p[0], "start")?;
        let end = field(n, p[1], "end")?;
        let label = Intent::parse(p[2].trim())
            .ok_or_else(|| Error::parse(n, format!("unknown label `{}`", p[2])))?;
        if start >= end {
            return Err(Error::parse(n, format!("label interval start {start} is not before end {end}")));
        }
        if let Some(prev) = labels.last() {
            if start < prev.end {
                return Err(Error::parse(n, format!("label interval starting at {start} overlaps or precedes the previous one")));
            }
        }
        labels.push(LabelInterval { start, end, label });
    }

    Ok(Session {
        meta,
        gaze,
        mouse,
        labels,
    })
}
