use rand::seq::index;

use crate::rng;

/// Denominator floor for the relative error.
///
/// Central differences with step 1e-5 carry roughly `1e-16 |f| / 1e-5`
/// roundoff, so coordinates whose true gradient is near zero would report
/// meaningless relative errors. Below the floor the comparison is absolute:
/// a 1e-5 threshold then means an absolute error under 1e-9.
pub const REL_ERR_FLOOR: f64 = 1e-4;

/// Coordinates beyond this count are checked on a seeded random subset.
const MAX_CHECKED: usize = 10_000;

#[derive(Clone, Debug, PartialEq)]
pub struct GradReport {
    pub max_rel_err: f64,
    /// Coordinate with the largest relative error.
    pub worst_param: usize,
    pub checked: usize,
}

/// Compare the analytic gradient returned by `f` at `params` with central
/// differences of its loss.
pub fn grad_check<F>(mut f: F, params: &[f64], step: f64, seed: u64) -> GradReport
where
    F: FnMut(&[f64]) -> (f64, Vec<f64>),
{
    let (_, analytic) = f(params);
    assert_eq!(
        analytic.len(),
        params.len(),
        "gradient length differs from params"
    );
    let coords: Vec<usize> = if params.len() > MAX_CHECKED {
        let mut r = rng::stream(seed, "grad_check");
        let mut c = index::sample(&mut r, params.len(), MAX_CHECKED).into_vec();
        c.sort_unstable();
        c
    } else {
        (0..params.len()).collect()
    };
    let mut p = params.to_vec();
    let mut report = GradReport {
        max_rel_err: 0.0,
        worst_param: 0,
        checked: coords.len(),
    };
    for &i in &coords {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p).0;
        p[i] = orig - step;
        let down = f(&p).0;
        p[i] = orig;
        let numeric = (up - down) / (2.0 * step);
        let a = analytic[i];
        let denom = a.abs().max(numeric.abs()).max(REL_ERR_FLOOR);
        let err = (a - numeric).abs() / denom;
        if err > report.max_rel_err || err.is_nan() {
            report.max_rel_err = if err.is_nan() { f64::INFINITY } else { err };
            report.worst_param = i;
        }
    }
    report
}
