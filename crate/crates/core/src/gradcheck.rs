//! Central finite-difference checks against the analytic backward passes.

use crate::tensor::Parameters;

/// Every scalar of a parameter set, in visiting order.
pub fn flatten<P: Parameters + ?Sized>(params: &P) -> Vec<f64> {
    let mut out = Vec::with_capacity(params.parameter_count());
    params.visit("", &mut |_, t| out.extend_from_slice(t.data()));
    out
}

/// Name of the tensor holding flat index `index`.
pub fn name_of<P: Parameters + ?Sized>(params: &P, index: usize) -> String {
    let mut seen = 0;
    let mut found = String::new();
    params.visit("", &mut |name, t| {
        if index >= seen && index < seen + t.len() {
            found = format!("{name}[{}]", index - seen);
        }
        seen += t.len();
    });
    found
}

/// Adds `delta` to the scalar at flat index `index`.
pub fn nudge<P: Parameters + ?Sized>(params: &mut P, index: usize, delta: f64) {
    let mut seen = 0;
    params.visit_mut("", &mut |_, t| {
        if index >= seen && index < seen + t.len() {
            t.data_mut()[index - seen] += delta;
        }
        seen += t.len();
    });
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64, floor: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(floor)
}

/// Central difference of `f` w.r.t. the scalar at `index`, restoring the
/// parameter afterwards.
pub fn central_difference<P, F>(params: &mut P, index: usize, step: f64, mut f: F) -> f64
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    nudge(params, index, step);
    let plus = f(params);
    nudge(params, index, -2.0 * step);
    let minus = f(params);
    nudge(params, index, step);
    (plus - minus) / (2.0 * step)
}

/// Result of comparing an analytic gradient with finite differences.
#[derive(Clone, Debug)]
pub struct GradReport {
    pub checked: usize,
    pub max_relative_error: f64,
    pub worst: Option<String>,
}

/// Compares `analytic` (flattened like `params`) with central differences of
/// `f` over every scalar parameter.
pub fn check_all<P, F>(params: &mut P, analytic: &[f64], step: f64, floor: f64, mut f: F) -> GradReport
where
    P: Parameters + ?Sized,
    F: FnMut(&P) -> f64,
{
    let n = params.parameter_count();
    assert_eq!(n, analytic.len());
    let mut report = GradReport {
        checked: n,
        max_relative_error: 0.0,
        worst: None,
    };
    for i in 0..n {
        let fd = central_difference(params, i, step, &mut f);
        let err = relative_error(analytic[i], fd, floor);
        if err > report.max_relative_error || err.is_nan() {
            report.max_relative_error = err;
            report.worst = Some(format!(
                "{} analytic={:e} fd={:e}",
                name_of(params, i),
                analytic[i],
                fd
            ));
        }
    }
    report
}
