use super::session::{Eye, GazeSample, MouseSample};
use crate::error::{Error, Result};

/// Number of leading samples inspected by [`select_eye`], `⌈0.1·n⌉`.
pub fn calibration_span(n: usize) -> usize {
    n.div_ceil(10)
}

/// Picks the eye with fewer missing samples over the first tenth of the
/// session. Ties go to the left eye.
pub fn select_eye(gaze: &[GazeSample]) -> Result<Eye> {
    if gaze.is_empty() {
        return Err(Error::Calibration("session has no gaze samples".into()));
    }
    let span = calibration_span(gaze.len());
    let head = &gaze[..span];
    let left = head.iter().filter(|s| s.eye(Eye::Left).is_none()).count();
    let right = head.iter().filter(|s| s.eye(Eye::Right).is_none()).count();
    if left == span && right == span {
        return Err(Error::Calibration(format!(
            "both eyes are missing for all {span} calibration samples"
        )));
    }
    Ok(if left <= right { Eye::Left } else { Eye::Right })
}

/// A gap-free series plus the pre-interpolation missing mask.
#[derive(Clone, Debug, PartialEq)]
pub struct Interpolated {
    pub values: Vec<f64>,
    pub missing: Vec<bool>,
}

impl Interpolated {
    pub fn all_missing(&self) -> bool {
        self.missing.iter().all(|&m| m)
    }
}

/// Linearly interpolates interior gaps by sample index and fills leading or
/// trailing gaps with the nearest valid value. An all-missing series comes
/// back as NaN with an all-true mask.
pub fn interpolate_missing(series: &[Option<f64>]) -> Interpolated {
    let missing: Vec<bool> = series.iter().map(Option::is_none).collect();
    let mut values = vec![f64::NAN; series.len()];
    let valid: Vec<usize> = (0..series.len()).filter(|&i| !missing[i]).collect();
    let (Some(&first), Some(&last)) = (valid.first(), valid.last()) else {
        return Interpolated { values, missing };
    };
    for v in values.iter_mut().take(first) {
        *v = series[first].unwrap();
    }
    for pair in valid.windows(2) {
        let (a, b) = (pair[0], pair[1]);
        let (ya, yb) = (series[a].unwrap(), series[b].unwrap());
        values[a] = ya;
        let span = (b - a) as f64;
        for (k, v) in values.iter_mut().enumerate().take(b).skip(a + 1) {
            let f = (k - a) as f64 / span;
            *v = ya + (yb - ya) * f;
        }
    }
    values[last] = series[last].unwrap();
    for v in values.iter_mut().skip(last + 1) {
        *v = series[last].unwrap();
    }
    Interpolated { values, missing }
}

/// Full-lens remap without clamping: `v + p / M`.
pub fn remap_unclamped(p: (f64, f64), v: (f64, f64), m: f64) -> (f64, f64) {
    (v.0 + p.0 / m, v.1 + p.1 / m)
}

/// Content point to physical-screen point for a given viewport, the
/// algebraic inverse of [`remap_unclamped`].
pub fn content_to_physical(c: (f64, f64), v: (f64, f64), m: f64) -> (f64, f64) {
    ((c.0 - v.0) * m, (c.1 - v.1) * m)
}

/// Maps a magnified-screen gaze point back to unmagnified content
/// coordinates, clamped to the screen.
pub fn remap_to_screen(p: (f64, f64), v: (f64, f64), m: f64, screen: (f64, f64)) -> Result<(f64, f64)> {
    if !(m >= 1.0) {
        return Err(Error::Config(format!("magnification must be ≥ 1, got {m}")));
    }
    let (x, y) = remap_unclamped(p, v, m);
    Ok((x.clamp(0.0, screen.0), y.clamp(0.0, screen.1)))
}

/// Cursor position at `t` by linear interpolation between log entries, or
/// `None` outside the logged span.
pub fn mouse_position_at(mouse: &[MouseSample], t: f64) -> Option<(f64, f64)> {
    let first = mouse.first()?;
    let last = mouse.last()?;
    if t < first.t as f64 || t > last.t as f64 {
        return None;
    }
    let i = mouse.partition_point(|s| (s.t as f64) <= t);
    if i == 0 {
        return Some((first.mx as f64, first.my as f64));
    }
    if i == mouse.len() {
        return Some((last.mx as f64, last.my as f64));
    }
    let (a, b) = (&mouse[i - 1], &mouse[i]);
    let (ta, tb) = (a.t as f64, b.t as f64);
    let f = (t - ta) / (tb - ta);
    Some((
        a.mx as f64 + (b.mx as f64 - a.mx as f64) * f,
        a.my as f64 + (b.my as f64 - a.my as f64) * f,
    ))
}

/// Like [`mouse_position_at`] but holds the first/last logged position
/// outside the record. `None` only for an empty log.
pub fn mouse_position_held(mouse: &[MouseSample], t: f64) -> Option<(f64, f64)> {
    let first = mouse.first()?;
    let last = mouse.last()?;
    let t = t.clamp(first.t as f64, last.t as f64);
    mouse_position_at(mouse, t)
}

/// Mean cursor velocity in px/s over `[t_start, t_end]`.
pub fn mouse_velocity(mouse: &[MouseSample], t_start: f64, t_end: f64) -> Option<(f64, f64)> {
    let a = mouse_position_at(mouse, t_start)?;
    let b = mouse_position_at(mouse, t_end)?;
    let dt = t_end - t_start;
    Some(((b.0 - a.0) / dt, (b.1 - a.1) / dt))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(l: bool, r: bool) -> GazeSample {
        GazeSample {
            t: 0.0,
            lx: l.then_some(1.0),
            ly: l.then_some(1.0),
            rx: r.then_some(1.0),
            ry: r.then_some(1.0),
            vx: 0.0,
            vy: 0.0,
        }
    }

    #[test]
    fn span_is_ceiling_of_a_tenth() {
        assert_eq!(calibration_span(1001), 101);
        assert_eq!(calibration_span(1000), 100);
        assert_eq!(calibration_span(1), 1);
    }

    #[test]
    fn empty_gaze_is_a_calibration_error() {
        assert!(matches!(select_eye(&[]), Err(Error::Calibration(_))));
    }

    #[test]
    fn half_missing_coordinate_counts_as_missing() {
        let mut s = sample(true, true);
        s.ly = None;
        assert_eq!(select_eye(&[s]).unwrap(), Eye::Right);
    }
}
