//! Streaming inference over a session file or a live gaze feed.
//!
//! A live feed is one sample per line, `t,x_left,y_left,x_right,y_right,vx,vy`,
//! with empty coordinate fields for missing samples. Lines starting with `#`,
//! blank lines and a leading header line are skipped.

use std::fs::File;
use std::io::{self, BufRead, BufReader, Read, Write};

use anyhow::Context;
use magread::dataio::{parse_session_str, select_eye, Eye, GazeSample, SessionMeta, Task};
use magread::stream::{Classifier, Decision, Engine};

use crate::commands::require_checkpoint;
use crate::{EyeArg, InferArgs, Usage};

fn parse_screen(s: &str) -> anyhow::Result<(u32, u32)> {
    let bad = || Usage(format!("--screen expects WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let w: u32 = w.trim().parse().map_err(|_| bad())?;
    let h: u32 = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad().into());
    }
    Ok((w, h))
}

fn number(line: usize, raw: &str, name: &str) -> magread::Result<f32> {
    let v: f32 = raw.trim().parse().map_err(|_| magread::Error::Parse {
        line,
        msg: format!("{name}: cannot parse `{raw}` as a number"),
    })?;
    if !v.is_finite() {
        return Err(magread::Error::Parse {
            line,
            msg: format!("{name}: non-finite value `{raw}`"),
        });
    }
    Ok(v)
}

fn optional(line: usize, raw: &str, name: &str) -> magread::Result<Option<f32>> {
    if raw.trim().is_empty() {
        Ok(None)
    } else {
        number(line, raw, name).map(Some)
    }
}

/// Parses one live-feed line; `None` for lines to skip.
fn parse_feed_line(line: usize, text: &str, first_data: bool) -> magread::Result<Option<GazeSample>> {
    let text = text.trim();
    if text.is_empty() || text.starts_with('#') {
        return Ok(None);
    }
    let parts: Vec<&str> = text.split(',').collect();
    if first_data && parts.first().is_some_and(|p| p.trim().parse::<f32>().is_err()) {
        return Ok(None);
    }
    if parts.len() != 7 {
        return Err(magread::Error::Parse {
            line,
            msg: format!("expected 7 comma-separated fields, found {}", parts.len()),
        });
    }
    let (lx, ly) = (optional(line, parts[1], "x_left")?, optional(line, parts[2], "y_left")?);
    let (rx, ry) = (optional(line, parts[3], "x_right")?, optional(line, parts[4], "y_right")?);
    if lx.is_some() != ly.is_some() || rx.is_some() != ry.is_some() {
        return Err(magread::Error::Parse {
            line,
            msg: "an eye needs both coordinates or neither".into(),
        });
    }
    Ok(Some(GazeSample {
        t: number(line, parts[0], "t")?,
        lx,
        ly,
        rx,
        ry,
        vx: number(line, parts[5], "vx")?,
        vy: number(line, parts[6], "vy")?,
    }))
}

fn forced_eye(arg: EyeArg) -> Option<Eye> {
    match arg {
        EyeArg::Auto => None,
        EyeArg::Left => Some(Eye::Left),
        EyeArg::Right => Some(Eye::Right),
    }
}

/// Eye with fewer missing samples in `head`; ties go to the left eye.
fn calibrate(head: &[GazeSample]) -> magread::Result<Eye> {
    let left = head.iter().filter(|s| s.eye(Eye::Left).is_none()).count();
    let right = head.iter().filter(|s| s.eye(Eye::Right).is_none()).count();
    if head.is_empty() || (left == head.len() && right == head.len()) {
        return Err(magread::Error::Calibration(format!(
            "both eyes are missing for all {} calibration samples",
            head.len()
        )));
    }
    Ok(if left <= right { Eye::Left } else { Eye::Right })
}

struct Emitter<W: Write> {
    out: W,
}

impl<W: Write> Emitter<W> {
    fn emit(&mut self, d: Option<Decision>) -> anyhow::Result<()> {
        if let Some(d) = d {
            serde_json::to_writer(&mut self.out, &d)?;
            self.out.write_all(b"\n")?;
            self.out.flush()?;
        }
        Ok(())
    }
}

pub fn run(args: InferArgs) -> anyhow::Result<()> {
    if args.stride == 0 {
        return Err(Usage("--stride must be at least 1".into()).into());
    }
    require_checkpoint(&args.ckpt)?;
    let classifier = Classifier::from_checkpoint(&args.ckpt).map_err(|e| match e {
        magread::Error::Engine(msg) => anyhow::Error::from(Usage(format!("{}: {msg}", args.ckpt.display()))),
        other => other.into(),
    })?;

    let mut reader: Box<dyn BufRead> = if args.input == "-" {
        Box::new(BufReader::new(io::stdin().lock()))
    } else {
        let f = File::open(&args.input).map_err(|e| Usage(format!("cannot open {}: {e}", args.input)))?;
        Box::new(BufReader::new(f))
    };
    let stdout = io::stdout();
    let mut emitter = Emitter { out: stdout.lock() };

    let mut first = String::new();
    reader.read_line(&mut first).with_context(|| format!("reading {}", args.input))?;
    if first.starts_with("#meta") {
        let mut text = first;
        reader.read_to_string(&mut text).with_context(|| format!("reading {}", args.input))?;
        let session = parse_session_str(&text)?;
        let eye = match forced_eye(args.eye) {
            Some(e) => e,
            None => select_eye(&session.gaze)?,
        };
        log::info!("session {} {}: tracking the {:?} eye", session.meta.subject_id, session.meta.task.as_str(), eye);
        let mut engine = Engine::with_classifier(session.meta.clone(), eye, args.stride, classifier)?;
        for g in &session.gaze {
            emitter.emit(engine.push(g)?)?;
        }
        return Ok(());
    }

    let (w, h) = parse_screen(&args.screen)?;
    let meta = SessionMeta::new("live", Task::Text, args.magnification, w, h);
    let calibration = args.calibration.max(1);
    let mut engine: Option<Engine> = match forced_eye(args.eye) {
        Some(eye) => Some(Engine::with_classifier(meta.clone(), eye, args.stride, classifier.clone())?),
        None => None,
    };
    let mut pending: Vec<GazeSample> = Vec::new();
    let start = |pending: &mut Vec<GazeSample>, emitter: &mut Emitter<_>| -> anyhow::Result<Engine> {
        let eye = calibrate(pending)?;
        log::info!("live feed: tracking the {eye:?} eye after {} samples", pending.len());
        let mut e = Engine::with_classifier(meta.clone(), eye, args.stride, classifier.clone())?;
        for g in pending.drain(..) {
            emitter.emit(e.push(&g)?)?;
        }
        Ok(e)
    };

    let mut line_no = 1;
    let mut text = first;
    let mut seen_data = false;
    loop {
        if line_no > 1 {
            text.clear();
            if reader.read_line(&mut text).with_context(|| format!("reading {}", args.input))? == 0 {
                break;
            }
        } else if text.is_empty() {
            break;
        }
        let parsed = parse_feed_line(line_no, &text, !seen_data)?;
        line_no += 1;
        let Some(sample) = parsed else { continue };
        seen_data = true;
        match engine.as_mut() {
            Some(e) => emitter.emit(e.push(&sample)?)?,
            None => {
                pending.push(sample);
                if pending.len() == calibration {
                    engine = Some(start(&mut pending, &mut emitter)?);
                }
            }
        }
    }
    if engine.is_none() && !pending.is_empty() {
        start(&mut pending, &mut emitter)?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feed_lines_parse() {
        let s = parse_feed_line(2, "0.5,10,20,,,1,2\n", false).unwrap().unwrap();
        assert_eq!(s.eye(Eye::Left), Some((10.0, 20.0)));
        assert_eq!(s.eye(Eye::Right), None);
        assert_eq!((s.vx, s.vy), (1.0, 2.0));
        assert!(parse_feed_line(1, "t,x_left,y_left,x_right,y_right,vx,vy", true).unwrap().is_none());
        assert!(parse_feed_line(3, "# comment", false).unwrap().is_none());
        assert!(matches!(
            parse_feed_line(4, "0.5,10,20,1,2", false),
            Err(magread::Error::Parse { line: 4, .. })
        ));
        assert!(parse_feed_line(5, "0.5,10,,,,1,2", false).is_err());
        assert!(parse_feed_line(6, "t,x", false).is_err());
    }

    #[test]
    fn calibration_prefers_fewer_missing() {
        let s = |l: bool, r: bool| GazeSample {
            t: 0.0,
            lx: l.then_some(1.0),
            ly: l.then_some(1.0),
            rx: r.then_some(1.0),
            ry: r.then_some(1.0),
            vx: 0.0,
            vy: 0.0,
        };
        assert_eq!(calibrate(&[s(true, true), s(false, true)]).unwrap(), Eye::Right);
        assert_eq!(calibrate(&[s(true, false), s(false, true)]).unwrap(), Eye::Left);
        assert!(calibrate(&[s(false, false)]).is_err());
    }

    #[test]
    fn screen_sizes_parse() {
        assert_eq!(parse_screen("1920x1080").unwrap(), (1920, 1080));
        assert!(parse_screen("1920").is_err());
        assert!(parse_screen("0x5").is_err());
    }
}
