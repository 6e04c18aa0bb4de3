use crate::error::{Error, Result};

/// Central finite-difference check of an analytic gradient.
///
/// `f` returns the function value and its analytic gradient at the given
/// point. The result is the maximum over coordinates of
/// `|analytic - numeric| / max(1, |numeric|)`, where the numeric derivative is
/// `(f(p + h e_i) - f(p - h e_i)) / 2h`.
///
/// Points sitting exactly on a ReLU kink are the caller's responsibility to
/// avoid; the check itself cannot tell a kink from a wrong gradient.
pub fn finite_diff_check<F>(f: F, params: &[f64], h: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) {
        return Err(Error::Config(format!("finite-difference step must be positive, got {h}")));
    }
    let (value, analytic) = f(params)?;
    if !value.is_finite() {
        return Err(Error::NonFinite("finite_diff_check objective".into()));
    }
    if analytic.len() != params.len() {
        return Err(Error::Dimension(format!(
            "{} gradient entries for {} parameters",
            analytic.len(),
            params.len()
        )));
    }
    let mut point = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        point[i] = params[i] + h;
        let (plus, _) = f(&point)?;
        point[i] = params[i] - h;
        let (minus, _) = f(&point)?;
        point[i] = params[i];
        if !plus.is_finite() || !minus.is_finite() {
            return Err(Error::NonFinite(format!("objective at coordinate {i}")));
        }
        let numeric = (plus - minus) / (2.0 * h);
        worst = worst.max((analytic[i] - numeric).abs() / numeric.abs().max(1.0));
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let f = |p: &[f64]| Ok((p.iter().map(|v| v * v).sum(), p.iter().map(|v| 2.0 * v).collect()));
        let err = finite_diff_check(f, &[1.0, 2.0], 1e-6).unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let f = |p: &[f64]| Ok((p[0] * p[0], vec![p[0]]));
        // analytic 3 against numeric 6
        assert!((finite_diff_check(f, &[3.0], 1e-6).unwrap() - 0.5).abs() < 1e-6);
    }

    #[test]
    fn rejects_bad_step_and_non_finite() {
        let f = |p: &[f64]| Ok((p[0], vec![1.0]));
        assert!(finite_diff_check(f, &[0.0], 0.0).is_err());
        let g = |p: &[f64]| Ok((p[0].ln(), vec![1.0 / p[0]]));
        assert!(finite_diff_check(g, &[-1.0], 1e-6).is_err());
    }
}
