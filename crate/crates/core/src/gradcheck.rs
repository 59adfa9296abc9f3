//! Central finite differences for checking analytic gradients.
//!
//! Nothing here touches the tape's backward pass; the oracle only evaluates
//! the forward function at perturbed points.

/// Step used by the gradient checks.
pub const FD_STEP: f64 = 1e-4;
pub const REL_TOL: f64 = 1e-4;
pub const ABS_TOL: f64 = 1e-6;

/// `(f(x + h e_i) - f(x - h e_i)) / 2h` for every coordinate `i`.
pub fn central_difference<F>(point: &[f64], step: f64, mut f: F) -> Vec<f64>
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let plus = f(&x);
            x[i] = point[i] - step;
            let minus = f(&x);
            x[i] = point[i];
            (plus - minus) / (2.0 * step)
        })
        .collect()
}

/// Central difference for a single coordinate.
pub fn central_difference_at<F>(point: &[f64], index: usize, step: f64, mut f: F) -> f64
where
    F: FnMut(&[f64]) -> f64,
{
    let mut x = point.to_vec();
    x[index] = point[index] + step;
    let plus = f(&x);
    x[index] = point[index] - step;
    let minus = f(&x);
    (plus - minus) / (2.0 * step)
}

/// Which ReLU inputs of a recorded pass are positive.
pub fn activation_pattern(tape: &crate::tape::Tape) -> Vec<bool> {
    tape.relu_inputs()
        .iter()
        .flat_map(|t| t.data().iter().map(|v| *v > 0.0))
        .collect()
}

/// Central differences where `f` also returns an activation pattern.
/// Coordinates whose stencil changes the pattern come back as `None`: the
/// function is not differentiable along that segment.
pub fn central_difference_smooth<F>(point: &[f64], step: f64, mut f: F) -> Vec<Option<f64>>
where
    F: FnMut(&[f64]) -> (f64, Vec<bool>),
{
    let (_, base) = f(point);
    let mut x = point.to_vec();
    (0..point.len())
        .map(|i| {
            x[i] = point[i] + step;
            let (plus, p) = f(&x);
            x[i] = point[i] - step;
            let (minus, m) = f(&x);
            x[i] = point[i];
            (p == base && m == base).then(|| (plus - minus) / (2.0 * step))
        })
        .collect()
}

/// `|analytic - numeric| <= max(REL_TOL * |analytic|, ABS_TOL)`.
pub fn within_tolerance(analytic: f64, numeric: f64) -> bool {
    (analytic - numeric).abs() <= (REL_TOL * analytic.abs()).max(ABS_TOL)
}

/// One coordinate where analytic and numeric gradients disagree.
#[derive(Debug, Clone, PartialEq)]
pub struct Mismatch {
    pub index: usize,
    pub analytic: f64,
    pub numeric: f64,
}

pub fn compare(analytic: &[f64], numeric: &[f64]) -> Vec<Mismatch> {
    assert_eq!(analytic.len(), numeric.len());
    analytic
        .iter()
        .zip(numeric)
        .enumerate()
        .filter(|(_, (a, n))| !within_tolerance(**a, **n))
        .map(|(index, (&analytic, &numeric))| Mismatch {
            index,
            analytic,
            numeric,
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic() {
        let g = central_difference(&[1.0, 2.0], FD_STEP, |v| v[0] * v[0] + 3.0 * v[0] * v[1]);
        assert!((g[0] - 8.0).abs() < 1e-8);
        assert!((g[1] - 3.0).abs() < 1e-8);
    }

    #[test]
    fn kinks_are_reported() {
        let relu = |v: &[f64]| (v[0].max(0.0) + v[1].max(0.0), vec![v[0] > 0.0, v[1] > 0.0]);
        let g = central_difference_smooth(&[1e-5, 2.0], FD_STEP, relu);
        assert_eq!(g[0], None);
        assert!((g[1].unwrap() - 1.0).abs() < 1e-9);
    }

    #[test]
    fn tolerance_is_the_looser_bound() {
        assert!(within_tolerance(0.0, 9e-7));
        assert!(!within_tolerance(0.0, 2e-6));
        assert!(within_tolerance(100.0, 100.009));
        assert!(!within_tolerance(100.0, 100.02));
    }
}
