//! Clamped B-spline least-squares fitting and evaluation.

use nalgebra::DMatrix;

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub type Point<S> = [S; 2];

#[derive(Debug, Clone, PartialEq)]
pub struct SplineCurve<S> {
    pub degree: usize,
    /// Clamped: `degree + 1` zeros, interior knots, `degree + 1` ones.
    pub knots: Vec<S>,
    pub control: Vec<Point<S>>,
    pub fit_mse: S,
}

/// Default control-point count for `samples` points.
pub fn default_control_count(samples: usize) -> usize {
    samples.div_ceil(2).max(4).min(samples)
}

/// Chord-length parameters in [0, 1]; uniform when all points coincide.
pub fn chord_parameters<S: Scalar>(points: &[Point<S>]) -> Vec<S> {
    let mut u = Vec::with_capacity(points.len());
    u.push(S::zero());
    let mut acc = S::zero();
    for w in points.windows(2) {
        acc += ((w[1][0] - w[0][0]).powi(2) + (w[1][1] - w[0][1]).powi(2)).sqrt();
        u.push(acc);
    }
    let n = points.len();
    if acc > S::zero() {
        for v in u.iter_mut() {
            *v /= acc;
        }
    } else if n > 1 {
        for (i, v) in u.iter_mut().enumerate() {
            *v = S::from_usize(i).unwrap() / S::from_usize(n - 1).unwrap();
        }
    }
    if let Some(last) = u.last_mut() {
        *last = S::one();
    }
    u
}

/// Clamped knot vector for `n_control` control points whose interior knots
/// average the parameters, so every span holds at least one parameter.
pub fn averaged_knots<S: Scalar>(params: &[S], degree: usize, n_control: usize) -> Vec<S> {
    let m = params.len();
    let mut knots = vec![S::zero(); degree + 1];
    let inner = n_control - degree - 1;
    let d = m as f64 / (n_control - degree) as f64;
    for j in 1..=inner {
        let i = (j as f64 * d).floor() as usize;
        let a = S::lit(j as f64 * d - i as f64);
        knots.push((S::one() - a) * params[i - 1] + a * params[i]);
    }
    knots.extend(std::iter::repeat_n(S::one(), degree + 1));
    knots
}

/// Index of the knot span holding `u` (last non-empty span for `u = 1`).
pub fn find_span<S: Scalar>(knots: &[S], degree: usize, u: S) -> usize {
    let n = knots.len() - degree - 2;
    if u >= knots[n + 1] {
        return n;
    }
    if u <= knots[degree] {
        return degree;
    }
    let (mut lo, mut hi) = (degree, n + 1);
    while hi - lo > 1 {
        let mid = (lo + hi) / 2;
        if u < knots[mid] {
            hi = mid;
        } else {
            lo = mid;
        }
    }
    lo
}

/// The `degree + 1` non-vanishing basis values `N_{span-degree..=span}(u)`.
pub fn basis_functions<S: Scalar>(knots: &[S], degree: usize, span: usize, u: S) -> Vec<S> {
    let mut n = vec![S::zero(); degree + 1];
    let mut left = vec![S::zero(); degree + 1];
    let mut right = vec![S::zero(); degree + 1];
    n[0] = S::one();
    for j in 1..=degree {
        left[j] = u - knots[span + 1 - j];
        right[j] = knots[span + j] - u;
        let mut saved = S::zero();
        for r in 0..j {
            let denom = right[r + 1] + left[j - r];
            let t = if denom == S::zero() { S::zero() } else { n[r] / denom };
            n[r] = saved + right[r + 1] * t;
            saved = left[j - r] * t;
        }
        n[j] = saved;
    }
    n
}

impl<S: Scalar> SplineCurve<S> {
    pub fn new(degree: usize, knots: Vec<S>, control: Vec<Point<S>>) -> Result<Self> {
        if control.len() < degree + 1 {
            return Err(Error::Validation(format!("{} control points for degree {degree}", control.len())));
        }
        if knots.len() != control.len() + degree + 1 {
            return Err(Error::Validation(format!(
                "knot count {} != control points {} + degree {degree} + 1",
                knots.len(),
                control.len()
            )));
        }
        if knots.windows(2).any(|w| w[1] < w[0]) {
            return Err(Error::Validation("knots must be non-decreasing".into()));
        }
        Ok(SplineCurve { degree, knots, control, fit_mse: S::zero() })
    }

    pub fn start(&self) -> Point<S> {
        self.control[0]
    }

    pub fn end(&self) -> Point<S> {
        self.control[self.control.len() - 1]
    }

    /// de Boor evaluation at `u` in [0, 1].
    pub fn eval(&self, u: S) -> Point<S> {
        let p = self.degree;
        let u = u.max(S::zero()).min(S::one());
        let k = find_span(&self.knots, p, u);
        let mut d: Vec<Point<S>> = (0..=p).map(|j| self.control[j + k - p]).collect();
        for r in 1..=p {
            for j in (r..=p).rev() {
                let i = j + k - p;
                let denom = self.knots[i + p + 1 - r] - self.knots[i];
                let a = if denom == S::zero() { S::zero() } else { (u - self.knots[i]) / denom };
                for c in 0..2 {
                    d[j][c] = (S::one() - a) * d[j - 1][c] + a * d[j][c];
                }
            }
        }
        d[p]
    }
}

/// Least-squares B-spline through `points` at chord-length parameters with
/// the first and last samples interpolated. `n_control = None` uses
/// [`default_control_count`]. Fewer than `degree + 1` samples give the
/// straight segment between the first and last sample.
pub fn fit_bspline<S: Scalar>(points: &[Point<S>], degree: usize, n_control: Option<usize>) -> Result<SplineCurve<S>> {
    let s = points.len();
    if s < 2 {
        return Err(Error::Validation(format!("need at least 2 samples to fit a curve, got {s}")));
    }
    if degree == 0 {
        return Err(Error::Validation("spline degree must be >= 1".into()));
    }
    if points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(Error::Validation("non-finite sample".into()));
    }
    let params = chord_parameters(points);
    if s < degree + 1 {
        log::warn!("{s} samples for degree {degree}; fitting a straight segment");
        let knots = vec![S::zero(), S::zero(), S::one(), S::one()];
        let mut c = SplineCurve::new(1, knots, vec![points[0], points[s - 1]])?;
        c.fit_mse = mse(&c, points, &params);
        return Ok(c);
    }
    let n = n_control.unwrap_or_else(|| default_control_count(s));
    if n < degree + 1 || n > s {
        return Err(Error::Validation(format!("n_control {n} outside [{}, {s}]", degree + 1)));
    }
    let knots = averaged_knots(&params, degree, n);
    let mut control = vec![points[0]; n];
    control[n - 1] = points[s - 1];
    if n > 2 {
        let rows = s - 2;
        let cols = n - 2;
        let mut a = DMatrix::<f64>::zeros(rows, cols);
        let mut rhs = DMatrix::<f64>::zeros(rows, 2);
        for (row, k) in (1..s - 1).enumerate() {
            let span = find_span(&knots, degree, params[k]);
            let basis = basis_functions(&knots, degree, span, params[k]);
            let mut r = [points[k][0].to_f64_lossy(), points[k][1].to_f64_lossy()];
            for (j, b) in basis.iter().enumerate() {
                let i = span - degree + j;
                let b = b.to_f64_lossy();
                if i == 0 || i == n - 1 {
                    let fixed = control[i];
                    r[0] -= b * fixed[0].to_f64_lossy();
                    r[1] -= b * fixed[1].to_f64_lossy();
                } else {
                    a[(row, i - 1)] = b;
                }
            }
            rhs[(row, 0)] = r[0];
            rhs[(row, 1)] = r[1];
        }
        let qr = a.qr();
        let qtb = qr.q().transpose() * rhs;
        let sol = qr
            .r()
            .solve_upper_triangular(&qtb)
            .ok_or_else(|| Error::Validation("singular spline fitting system".into()))?;
        for i in 0..cols {
            control[i + 1] = [S::lit(sol[(i, 0)]), S::lit(sol[(i, 1)])];
        }
    }
    let mut c = SplineCurve::new(degree, knots, control)?;
    c.fit_mse = mse(&c, points, &params);
    Ok(c)
}

fn mse<S: Scalar>(c: &SplineCurve<S>, points: &[Point<S>], params: &[S]) -> S {
    let total: S = points
        .iter()
        .zip(params)
        .map(|(p, &u)| {
            let q = c.eval(u);
            (q[0] - p[0]).powi(2) + (q[1] - p[1]).powi(2)
        })
        .sum();
    total / S::from_usize(points.len()).unwrap()
}

/// `n >= 2` points at uniform parameters; endpoints are the curve endpoints.
pub fn sample_curve<S: Scalar>(curve: &SplineCurve<S>, n: usize) -> Result<Vec<Point<S>>> {
    if n < 2 {
        return Err(Error::Validation(format!("need n >= 2 samples, got {n}")));
    }
    let last = S::from_usize(n - 1).unwrap();
    let mut out: Vec<Point<S>> = (0..n).map(|i| curve.eval(S::from_usize(i).unwrap() / last)).collect();
    out[0] = curve.start();
    out[n - 1] = curve.end();
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_counts() {
        assert_eq!(default_control_count(2), 2);
        assert_eq!(default_control_count(6), 4);
        assert_eq!(default_control_count(12), 6);
        assert_eq!(default_control_count(13), 7);
        assert_eq!(default_control_count(3), 3);
    }

    #[test]
    fn two_samples_make_a_segment() {
        let c = fit_bspline(&[[0.1f64, 0.2], [0.7, 0.5]], 3, None).unwrap();
        assert_eq!(c.degree, 1);
        let pts = sample_curve(&c, 3).unwrap();
        assert_eq!(pts[0], [0.1, 0.2]);
        assert_eq!(pts[2], [0.7, 0.5]);
        assert!((pts[1][0] - 0.4).abs() < 1e-15 && (pts[1][1] - 0.35).abs() < 1e-15);
        assert_eq!(c.knots.len(), c.control.len() + c.degree + 1);
    }

    #[test]
    fn collinear_samples_stay_on_line() {
        let pts: Vec<[f64; 2]> = [0.0, 0.05, 0.2, 0.22, 0.5, 0.61, 0.8, 1.0]
            .iter()
            .map(|&t| [0.1 + 0.6 * t, 0.3 + 0.2 * t])
            .collect();
        let c = fit_bspline(&pts, 3, None).unwrap();
        for p in sample_curve(&c, 200).unwrap() {
            // distance to the line through (0.1,0.3) with direction (0.6,0.2)
            let d = ((p[0] - 0.1) * 0.2 - (p[1] - 0.3) * 0.6).abs() / (0.04f64 + 0.36).sqrt();
            assert!(d < 1e-9, "{d}");
        }
    }

    #[test]
    fn rejects_bad_input() {
        assert!(fit_bspline::<f64>(&[[0.0, 0.0]], 3, None).is_err());
        let pts: Vec<[f64; 2]> = (0..6).map(|i| [i as f64, 0.0]).collect();
        assert!(fit_bspline(&pts, 3, Some(7)).is_err());
        assert!(fit_bspline(&pts, 3, Some(3)).is_err());
        assert!(fit_bspline(&[[0.0, f64::NAN], [1.0, 1.0]], 3, None).is_err());
        assert!(sample_curve(&fit_bspline(&pts, 3, None).unwrap(), 1).is_err());
    }

    #[test]
    fn f32_fit_interpolates_endpoints() {
        let pts: Vec<[f32; 2]> = (0..8).map(|i| [i as f32 / 7.0, (i as f32 * 0.7).sin() * 0.3 + 0.5]).collect();
        let c = fit_bspline(&pts, 3, None).unwrap();
        assert_eq!(c.eval(0.0), pts[0]);
        assert_eq!(c.eval(1.0), pts[7]);
    }
}
