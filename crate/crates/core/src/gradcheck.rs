//! Central finite differences, used as an independent oracle for gradients.
//!
//! Nothing here touches the reverse sweep: the checker perturbs parameter
//! entries and re-evaluates a plain `f64` objective.

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Gradients, Params};
use crate::error::Result;

/// Step used for all finite-difference checks.
pub const FD_STEP: f64 = 1e-5;

/// Result of comparing analytic and numeric gradients.
#[derive(Debug, Clone)]
pub struct FdReport {
    pub max_rel_error: f64,
    pub worst: Option<(String, usize, f64, f64)>,
    pub checked: usize,
}

/// `|a - n| / max(|a|, |n|, floor)`.
pub fn rel_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Central difference of `f` with respect to one entry of `params`.
pub fn central_difference<F>(f: &F, params: &Params, name: &str, index: usize, h: f64) -> Result<f64>
where
    F: Fn(&Params) -> Result<f64>,
{
    let mut plus = params.clone();
    plus.get_mut(name).expect("known parameter").data_mut()[index] += h;
    let mut minus = params.clone();
    minus.get_mut(name).expect("known parameter").data_mut()[index] -= h;
    Ok((f(&plus)? - f(&minus)?) / (2.0 * h))
}

/// Checks up to `per_param` entries of every parameter (all entries if the
/// tensor is smaller), choosing entries with a seeded RNG.
pub fn check_gradients<F>(
    f: F,
    params: &Params,
    analytic: &Gradients,
    per_param: usize,
    floor: f64,
    seed: u64,
) -> Result<FdReport>
where
    F: Fn(&Params) -> Result<f64>,
{
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut report = FdReport {
        max_rel_error: 0.0,
        worst: None,
        checked: 0,
    };
    for (name, t) in params.iter() {
        let indices: Vec<usize> = if t.len() <= per_param {
            (0..t.len()).collect()
        } else {
            sample(&mut rng, t.len(), per_param).into_vec()
        };
        for i in indices {
            let numeric = central_difference(&f, params, name, i, FD_STEP)?;
            let a = analytic.get(name).map_or(0.0, |g| g.data()[i]);
            let e = rel_error(a, numeric, floor);
            report.checked += 1;
            if e > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(e);
                if e >= report.max_rel_error {
                    report.worst = Some((name.clone(), i, a, numeric));
                }
            }
        }
    }
    Ok(report)
}
