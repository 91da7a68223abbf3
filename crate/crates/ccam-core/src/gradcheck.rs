//! Central finite-difference verification of analytic gradients.

/// Per-run result of a finite-difference sweep.
#[derive(Debug, Clone)]
pub struct GradCheckReport {
    /// max over checked coordinates of |analytic - numeric| / max(|analytic|, |numeric|, 1e-6)
    pub max_rel_error: f32,
    /// max over checked coordinates of |analytic - numeric|
    pub max_abs_diff: f32,
    pub coords_checked: usize,
    /// coordinates excluded because the probe straddled a non-smooth point
    /// (relu/|.| kinks), where a central difference measures nothing
    pub coords_skipped_kinks: usize,
}

/// Evaluate `f` at `theta` once for the analytic gradient, then probe each
/// coordinate in `coords` with central differences at step `eps`.
///
/// `f` returns the scalar value and the full analytic gradient with respect
/// to theta; only the gradient from the unperturbed call is used. The
/// difference quotient is formed in f64 to avoid losing the few significant
/// bits an f32 subtraction would leave. Coordinates whose absolute
/// disagreement is below `abs_floor` are excluded from the relative-error
/// maximum (finite differences lose meaning once f32 forward noise dominates
/// the signal); pass 0.0 to keep every coordinate.
pub fn gradient_check_coords(
    f: &mut dyn FnMut(&[f32]) -> (f32, Vec<f32>),
    theta: &[f32],
    eps: f32,
    coords: &[usize],
    abs_floor: f32,
) -> GradCheckReport {
    let (f_zero, analytic) = f(theta);
    assert_eq!(
        analytic.len(),
        theta.len(),
        "analytic gradient length must match theta"
    );
    let mut max_rel = 0.0f32;
    let mut max_abs = 0.0f32;
    let mut kinks = 0usize;
    let mut work = theta.to_vec();
    for &i in coords {
        let orig = work[i];
        work[i] = orig + eps;
        let (f_plus, _) = f(&work);
        work[i] = orig - eps;
        let (f_minus, _) = f(&work);
        work[i] = orig;
        let first = f_plus as f64 - f_minus as f64;
        let numeric = (first / (2.0 * eps as f64)) as f32;
        let a = analytic[i];
        let abs_diff = (a - numeric).abs();
        if abs_diff < abs_floor {
            max_abs = max_abs.max(abs_diff);
            continue;
        }
        // A large second difference relative to the first means the +/- eps
        // probe straddled a kink: the quotient is a mix of two one-sided
        // slopes and says nothing about the gradient at theta.
        let second = (f_plus as f64 + f_minus as f64 - 2.0 * f_zero as f64).abs();
        if second > 0.3 * first.abs() && second > 1e-5 {
            kinks += 1;
            continue;
        }
        max_abs = max_abs.max(abs_diff);
        let rel = abs_diff / a.abs().max(numeric.abs()).max(1e-6);
        max_rel = max_rel.max(rel);
    }
    GradCheckReport {
        max_rel_error: max_rel,
        max_abs_diff: max_abs,
        coords_checked: coords.len(),
        coords_skipped_kinks: kinks,
    }
}

/// Check every coordinate. Returns the max relative error
/// `|analytic - numeric| / max(|analytic|, |numeric|, 1e-6)`.
pub fn gradient_check(
    f: &mut dyn FnMut(&[f32]) -> (f32, Vec<f32>),
    theta: &[f32],
    eps: f32,
) -> f32 {
    let coords: Vec<usize> = (0..theta.len()).collect();
    gradient_check_coords(f, theta, eps, &coords, 0.0).max_rel_error
}
