//! Central finite differences for checking tape gradients.

use crate::tensor::Tensor;

/// `|a − n| / max(|a|, |n|, floor)`. The floor keeps coordinates whose true
/// gradient is ~0 from dominating the comparison.
pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central-difference estimate of `∂f/∂params[t][i]` for every `(t, i)` in
/// `coords`, evaluated in 64-bit.
pub fn central_difference<F>(mut f: F, params: &[Tensor<f64>], coords: &[(usize, usize)], h: f64) -> Vec<f64>
where
    F: FnMut(&[Tensor<f64>]) -> f64,
{
    let mut work = params.to_vec();
    coords
        .iter()
        .map(|&(t, i)| {
            let orig = work[t].data()[i];
            work[t].data_mut()[i] = orig + h;
            let up = f(&work);
            work[t].data_mut()[i] = orig - h;
            let down = f(&work);
            work[t].data_mut()[i] = orig;
            (up - down) / (2.0 * h)
        })
        .collect()
}

#[derive(Clone, Debug, Default)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    /// `(coordinate index, analytic, numeric)` of the worst coordinate.
    pub worst: Option<(usize, f64, f64)>,
}

impl GradCheckReport {
    pub fn compare(analytic: &[f64], numeric: &[f64], floor: f64) -> Self {
        let mut report = GradCheckReport {
            checked: analytic.len(),
            ..Default::default()
        };
        for (i, (&a, &n)) in analytic.iter().zip(numeric).enumerate() {
            let e = relative_error(a, n, floor);
            if e > report.max_rel_err || report.worst.is_none() {
                report.max_rel_err = report.max_rel_err.max(e);
                report.worst = Some((i, a, n));
            }
        }
        report
    }
}
