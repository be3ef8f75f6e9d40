use crate::data::{uniform_index, Rng};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GradCheckReport {
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub checked: usize,
    /// Coordinates left out because the loss is not smooth within `±h` there.
    pub skipped: usize,
}

pub fn rel_err(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-8)
}

/// Compares `analytic` against central differences of `loss` around `theta`.
///
/// With `subset = Some((k, rng))` only `k` distinct coordinates drawn from `rng`
/// are perturbed; otherwise all of them.
pub fn grad_check(
    loss: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    subset: Option<(usize, &mut Rng)>,
) -> Result<GradCheckReport> {
    check(loss, theta, analytic, h, subset, None)
}

/// [`grad_check`] for piecewise-smooth losses (ReLU, absolute error).
///
/// A coordinate whose second difference `|f(θ+h) − 2f(θ) + f(θ−h)|` exceeds
/// `max_second_diff` straddles a kink, where the central difference says nothing
/// about the derivative; it is counted in `skipped` instead of compared. The
/// decision looks only at loss values, never at `analytic`.
pub fn grad_check_piecewise(
    loss: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    subset: Option<(usize, &mut Rng)>,
    max_second_diff: f64,
) -> Result<GradCheckReport> {
    check(loss, theta, analytic, h, subset, Some(max_second_diff))
}

fn check(
    mut loss: impl FnMut(&[f64]) -> Result<f64>,
    theta: &[f64],
    analytic: &[f64],
    h: f64,
    subset: Option<(usize, &mut Rng)>,
    max_second_diff: Option<f64>,
) -> Result<GradCheckReport> {
    if analytic.len() != theta.len() {
        return Err(Error::length("analytic gradient", analytic.len(), theta.len()));
    }
    let coords: Vec<usize> = match subset {
        Some((k, rng)) if k < theta.len() => {
            let mut idx: Vec<usize> = (0..theta.len()).collect();
            for i in 0..k {
                let j = i + uniform_index(rng, idx.len() - i);
                idx.swap(i, j);
            }
            idx.truncate(k);
            idx
        }
        _ => (0..theta.len()).collect(),
    };
    let mut work = theta.to_vec();
    let mut report = GradCheckReport {
        max_rel_err: 0.0,
        worst_index: 0,
        checked: 0,
        skipped: 0,
    };
    let f0 = match max_second_diff {
        Some(_) => loss(&work)?,
        None => 0.0,
    };
    for &i in &coords {
        let orig = work[i];
        work[i] = orig + h;
        let fp = loss(&work)?;
        work[i] = orig - h;
        let fm = loss(&work)?;
        work[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::NonFinite(format!("loss at coordinate {i}")));
        }
        if let Some(limit) = max_second_diff {
            if (fp - 2.0 * f0 + fm).abs() > limit {
                report.skipped += 1;
                continue;
            }
        }
        report.checked += 1;
        let numeric = (fp - fm) / (2.0 * h);
        let e = rel_err(analytic[i], numeric);
        if e > report.max_rel_err {
            report.max_rel_err = e;
            report.worst_index = i;
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let theta = [0.3, -1.7, 2.2];
        let loss = |t: &[f64]| Ok(t[0] * t[0] + 3.0 * t[1] * t[1] - t[0] * t[2]);
        let grad = [2.0 * 0.3 - 2.2, 6.0 * -1.7, -0.3];
        let r = grad_check(loss, &theta, &grad, 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-9, "{r:?}");
    }

    #[test]
    fn unused_coordinate_has_zero_gradient() {
        let loss = |t: &[f64]| Ok(t[0].sin());
        let theta = [0.4, 7.0];
        let mut fd = theta;
        fd[1] += 1e-5;
        let a = loss(&fd).unwrap();
        fd[1] -= 2e-5;
        let b = loss(&fd).unwrap();
        assert!(((a - b) / 2e-5).abs() < 1e-8);
        let r = grad_check(loss, &theta, &[0.4f64.cos(), 0.0], 1e-5, None).unwrap();
        assert!(r.max_rel_err < 1e-8);
    }

    #[test]
    fn non_finite_loss_errors() {
        let loss = |t: &[f64]| Ok(if t[0] > 0.0 { f64::NAN } else { 0.0 });
        assert!(grad_check(loss, &[0.0], &[0.0], 1e-5, None).is_err());
    }

    #[test]
    fn kinks_are_skipped_not_compared() {
        let loss = |t: &[f64]| Ok(t[0].abs() + t[1] * t[1]);
        let theta = [3e-6, 0.5];
        let r = grad_check(loss, &theta, &[1.0, 1.0], 1e-5, None).unwrap();
        assert!(r.max_rel_err > 0.5);
        let r = grad_check_piecewise(loss, &theta, &[1.0, 1.0], 1e-5, None, 1e-8).unwrap();
        assert_eq!((r.checked, r.skipped), (1, 1));
        assert!(r.max_rel_err < 1e-9);
    }
}
