//! Trapezoidal line integrals of a score field.

use super::ScoreField;
use crate::{Error, Point, Result};

/// `K` equally spaced points from `a` to `b`, endpoints included.
pub fn straight_line_path(a: Point, b: Point, k: usize) -> Result<Vec<Point>> {
    if k < 2 {
        return Err(Error::Path(format!(
            "a path needs at least 2 points, got {k}"
        )));
    }
    let last = (k - 1) as f64;
    Ok((0..k)
        .map(|i| {
            if i == k - 1 {
                return b;
            }
            let s = i as f64 / last;
            [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
        })
        .collect())
}

/// Interior points of [`straight_line_path`] (the `k - 2` non-endpoints).
pub(crate) fn interior_points(a: Point, b: Point, k: usize) -> impl Iterator<Item = Point> {
    let last = (k - 1) as f64;
    (1..k.saturating_sub(1)).map(move |i| {
        let s = i as f64 / last;
        [a[0] + s * (b[0] - a[0]), a[1] + s * (b[1] - a[1])]
    })
}

/// `sum_k 1/2 (g(p_k) + g(p_{k+1})) . (p_{k+1} - p_k)` for precomputed field
/// values `g(p_k)`. With a score field this estimates
/// `log p(end) - log p(start)`.
pub fn trapezoid(points: &[Point], values: &[Point]) -> Result<f64> {
    if points.len() < 2 {
        return Err(Error::Path(format!(
            "a path needs at least 2 points, got {}",
            points.len()
        )));
    }
    if points.len() != values.len() {
        return Err(Error::SizeMismatch(points.len(), values.len()));
    }
    let mut total = 0.0;
    for k in 0..points.len() - 1 {
        let (p, q) = (points[k], points[k + 1]);
        let (gp, gq) = (values[k], values[k + 1]);
        total += 0.5 * ((gp[0] + gq[0]) * (q[0] - p[0]) + (gp[1] + gq[1]) * (q[1] - p[1]));
    }
    Ok(total)
}

/// Evaluates `field` along `path` at step `t` and integrates it.
pub fn line_energy_diff<F: ScoreField + ?Sized>(
    field: &F,
    path: &[Point],
    t: usize,
) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::Path(format!(
            "a path needs at least 2 points, got {}",
            path.len()
        )));
    }
    let eval = field.evaluate(path, t)?;
    trapezoid(path, &eval.score)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::FnField;

    #[test]
    fn straight_path_points() {
        let p = straight_line_path([0.0, 0.0], [1.0, 1.0], 3).unwrap();
        assert_eq!(p, vec![[0.0, 0.0], [0.5, 0.5], [1.0, 1.0]]);
        let p = straight_line_path([0.2, -1.0], [3.0, 4.0], 2).unwrap();
        assert_eq!(p, vec![[0.2, -1.0], [3.0, 4.0]]);
        let p = straight_line_path([0.0, 1.0], [2.0, -3.0], 9).unwrap();
        let d0 = [p[1][0] - p[0][0], p[1][1] - p[0][1]];
        for w in p.windows(2) {
            assert!((w[1][0] - w[0][0] - d0[0]).abs() < 1e-15);
            assert!((w[1][1] - w[0][1] - d0[1]).abs() < 1e-15);
        }
        assert!(straight_line_path([0.0, 0.0], [1.0, 1.0], 1).is_err());
        let inner: Vec<Point> = interior_points([0.0, 0.0], [1.0, 1.0], 5).collect();
        assert_eq!(
            inner,
            straight_line_path([0.0, 0.0], [1.0, 1.0], 5).unwrap()[1..4].to_vec()
        );
    }

    #[test]
    fn constant_field_is_exact() {
        let c = [0.7, -1.3];
        let field = FnField::new(move |_x: Point| c);
        let (a, b) = ([0.1, 0.2], [-0.4, 0.9]);
        let exact = c[0] * (b[0] - a[0]) + c[1] * (b[1] - a[1]);
        for k in [2, 3, 7, 20] {
            let f = line_energy_diff(&field, &straight_line_path(a, b, k).unwrap(), 1).unwrap();
            assert!((f - exact).abs() < 1e-15);
        }
        // a polyline detour gives the same value for a constant field
        let f = line_energy_diff(&field, &[a, [3.0, 3.0], [-2.0, 0.5], b], 1).unwrap();
        assert!((f - exact).abs() < 1e-14);
    }

    #[test]
    fn gaussian_score_straight_line_is_exact() {
        let field = FnField::new(|x: Point| [-x[0], -x[1]]);
        let (a, b) = ([0.3, -1.2], [1.5, 0.4]);
        let exact = 0.5 * ((a[0] * a[0] + a[1] * a[1]) - (b[0] * b[0] + b[1] * b[1]));
        for k in 2..12 {
            let f = line_energy_diff(&field, &straight_line_path(a, b, k).unwrap(), 1).unwrap();
            assert!((f - exact).abs() < 1e-14, "k={k}");
        }
    }

    #[test]
    fn closed_single_segment_is_zero() {
        let field = FnField::new(|x: Point| [x[1].sin(), x[0] * x[0]]);
        let a = [0.4, 0.1];
        assert_eq!(line_energy_diff(&field, &[a, a], 3).unwrap(), 0.0);
        assert!(line_energy_diff(&field, &[a], 3).is_err());
    }
}
