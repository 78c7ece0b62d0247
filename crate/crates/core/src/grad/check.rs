//! Central finite differences as an independent check on the tape.

use crate::error::{Error, Result};

/// Denominator floor for relative errors.
pub const REL_ERROR_FLOOR: f64 = 1e-8;

/// Default finite-difference step.
pub const DEFAULT_STEP: f64 = 1e-5;

/// Step for [`Stencil::FivePoint`]. Its truncation error is `O(h⁴)`, so a
/// larger step keeps cancellation noise near `1e-13` on an `O(1)` loss.
pub const EXTRAPOLATED_STEP: f64 = 2e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum Stencil {
    /// `(f(x+h) − f(x−h)) / 2h`
    #[default]
    Central,
    /// `(8(f(x+h) − f(x−h)) − (f(x+2h) − f(x−2h))) / 12h`, the Richardson
    /// extrapolation of two central differences.
    FivePoint,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct FdReport {
    pub max_rel_error: f64,
    /// Coordinate with the largest relative error.
    pub worst: usize,
    pub analytic: f64,
    pub numeric: f64,
}

/// `|a − b| / max(|a|, |b|, floor)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERROR_FLOOR)
}

/// Central differences `(f(x + h eᵢ) − f(x − h eᵢ)) / 2h`, one per coordinate.
pub fn central_differences(f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64) -> Result<Vec<f64>> {
    differences(f, point, h, Stencil::Central)
}

pub fn differences(mut f: impl FnMut(&[f64]) -> f64, point: &[f64], h: f64, stencil: Stencil) -> Result<Vec<f64>> {
    let mut x = point.to_vec();
    let mut out = Vec::with_capacity(point.len());
    let mut at = |x: &mut Vec<f64>, c: usize, step: f64| {
        let orig = x[c];
        x[c] = orig + step;
        let up = f(x);
        x[c] = orig - step;
        let down = f(x);
        x[c] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite { coord: c, what: format!("f(x ± {step}) = ({up}, {down})") });
        }
        Ok(up - down)
    };
    for c in 0..point.len() {
        let d = match stencil {
            Stencil::Central => at(&mut x, c, h)? / (2.0 * h),
            Stencil::FivePoint => (8.0 * at(&mut x, c, h)? - at(&mut x, c, 2.0 * h)?) / (12.0 * h),
        };
        out.push(d);
    }
    Ok(out)
}

/// Compares `analytic` against central differences of `f` at `point`.
pub fn finite_diff_check(f: impl FnMut(&[f64]) -> f64, point: &[f64], analytic: &[f64], h: f64) -> Result<FdReport> {
    finite_diff_check_with(f, point, analytic, h, Stencil::Central)
}

pub fn finite_diff_check_with(
    f: impl FnMut(&[f64]) -> f64,
    point: &[f64],
    analytic: &[f64],
    h: f64,
    stencil: Stencil,
) -> Result<FdReport> {
    assert_eq!(point.len(), analytic.len(), "one analytic gradient per coordinate");
    if let Some(c) = analytic.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFinite { coord: c, what: format!("analytic gradient {}", analytic[c]) });
    }
    let numeric = differences(f, point, h, stencil)?;
    let mut report = FdReport { max_rel_error: 0.0, worst: 0, analytic: 0.0, numeric: 0.0 };
    for (c, (&a, &b)) in analytic.iter().zip(&numeric).enumerate() {
        let e = relative_error(a, b);
        if e > report.max_rel_error || c == 0 {
            report = FdReport { max_rel_error: e.max(report.max_rel_error), worst: c, analytic: a, numeric: b };
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_matches_to_machine_precision() {
        let f = |x: &[f64]| x.iter().enumerate().map(|(i, v)| (i as f64 + 1.0) * v * v).sum::<f64>();
        let point = [0.5, -1.5, 2.0];
        let grad: Vec<f64> = point.iter().enumerate().map(|(i, v)| 2.0 * (i as f64 + 1.0) * v).collect();
        let rep = finite_diff_check(f, &point, &grad, 1e-4).unwrap();
        assert!(rep.max_rel_error < 1e-10, "{rep:?}");
    }

    #[test]
    fn five_point_is_exact_on_quartics() {
        let f = |x: &[f64]| x[0].powi(4) - 3.0 * x[0].powi(3);
        let x = 1.3;
        let exact = 4.0 * x * x * x - 9.0 * x * x;
        let two = central_differences(f, &[x], 1e-2).unwrap()[0];
        let five = differences(f, &[x], 1e-2, Stencil::FivePoint).unwrap()[0];
        assert!((five - exact).abs() < 1e-10);
        assert!((two - exact).abs() > 1e-5);
    }

    #[test]
    fn reports_wrong_gradient() {
        let f = |x: &[f64]| x[0] * x[0] + x[1];
        let rep = finite_diff_check(f, &[1.0, 1.0], &[2.0, 2.0], 1e-5).unwrap();
        assert_eq!(rep.worst, 1);
        assert!((rep.max_rel_error - 0.5).abs() < 1e-6);
    }

    #[test]
    fn non_finite_values_name_the_coordinate() {
        let f = |x: &[f64]| if x[1] > 0.0 { f64::NAN } else { 0.0 };
        let err = finite_diff_check(f, &[0.0, 0.0], &[0.0, 0.0], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { coord: 1, .. }));
        let err = finite_diff_check(|_: &[f64]| 0.0, &[0.0], &[f64::INFINITY], 1e-3).unwrap_err();
        assert!(matches!(err, Error::NonFinite { coord: 0, .. }));
    }
}
