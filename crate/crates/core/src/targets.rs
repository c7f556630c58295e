//! The 2D toy distributions: a ring of Gaussians, a uniform bar, and their
//! product.

use rand::Rng;
use statrs::distribution::{ContinuousCDF, Normal};

use crate::diffusion::standard_normal_point;
use crate::{Error, Point, Result};

/// Log density assigned to points outside the evaluation support.
pub const FLOOR_LOG_DENSITY: f64 = -69.0;

/// Equal-weight mixture of isotropic Gaussians.
#[derive(Debug, Clone, PartialEq)]
pub struct CircleGmm {
    pub means: Vec<Point>,
    pub std: f64,
}

impl Default for CircleGmm {
    /// 8 modes on the circle of radius 0.5, standard deviation 0.03.
    fn default() -> Self {
        Self::on_circle(8, 0.5, 0.03)
    }
}

impl CircleGmm {
    pub fn on_circle(modes: usize, radius: f64, std: f64) -> Self {
        let means = (0..modes)
            .map(|i| {
                let a = 2.0 * std::f64::consts::PI * i as f64 / modes as f64;
                [radius * a.cos(), radius * a.sin()]
            })
            .collect();
        Self { means, std }
    }

    pub fn weight(&self) -> f64 {
        1.0 / self.means.len() as f64
    }

    /// Log density and its gradient.
    pub fn logpdf_score(&self, x: Point) -> (f64, Point) {
        let var = self.std * self.std;
        let log_norm = self.weight().ln() - (2.0 * std::f64::consts::PI * var).ln();
        let logs: Vec<f64> = self
            .means
            .iter()
            .map(|m| {
                let d = [x[0] - m[0], x[1] - m[1]];
                log_norm - (d[0] * d[0] + d[1] * d[1]) / (2.0 * var)
            })
            .collect();
        let max = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        let mut score = [0.0; 2];
        for (l, m) in logs.iter().zip(&self.means) {
            let r = (l - max).exp();
            total += r;
            score[0] += r * (m[0] - x[0]) / var;
            score[1] += r * (m[1] - x[1]) / var;
        }
        (max + total.ln(), [score[0] / total, score[1] / total])
    }

    pub fn logpdf(&self, x: Point) -> f64 {
        self.logpdf_score(x).0
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        (0..n)
            .map(|_| {
                let m = self.means[rng.random_range(0..self.means.len())];
                let z = standard_normal_point(rng);
                [m[0] + self.std * z[0], m[1] + self.std * z[1]]
            })
            .collect()
    }

    /// Probability mass inside the box `[-half[0], half[0]] x [-half[1], half[1]]`.
    pub fn box_mass(&self, half: Point) -> f64 {
        let normal = Normal::new(0.0, self.std).expect("positive std");
        let interval = |lo: f64, hi: f64| normal.cdf(hi) - normal.cdf(lo);
        self.means
            .iter()
            .map(|m| {
                interval(-half[0] - m[0], half[0] - m[0])
                    * interval(-half[1] - m[1], half[1] - m[1])
            })
            .sum::<f64>()
            * self.weight()
    }

    /// Index of the nearest mode.
    pub fn nearest_mode(&self, x: Point) -> usize {
        let mut best = (0, f64::INFINITY);
        for (i, m) in self.means.iter().enumerate() {
            let d = (x[0] - m[0]).powi(2) + (x[1] - m[1]).powi(2);
            if d < best.1 {
                best = (i, d);
            }
        }
        best.0
    }
}

/// Uniform density on `[-half[0], half[0]] x [-half[1], half[1]]`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BarUniform {
    pub half: Point,
}

impl Default for BarUniform {
    fn default() -> Self {
        Self { half: [0.2, 1.0] }
    }
}

impl BarUniform {
    pub fn area(&self) -> f64 {
        4.0 * self.half[0] * self.half[1]
    }

    pub fn contains(&self, x: Point) -> bool {
        x[0].abs() <= self.half[0] && x[1].abs() <= self.half[1]
    }

    pub fn density(&self, x: Point) -> f64 {
        if self.contains(x) {
            1.0 / self.area()
        } else {
            0.0
        }
    }

    pub fn sample<R: Rng + ?Sized>(&self, n: usize, rng: &mut R) -> Vec<Point> {
        (0..n)
            .map(|_| {
                [
                    rng.random_range(-self.half[0]..=self.half[0]),
                    rng.random_range(-self.half[1]..=self.half[1]),
                ]
            })
            .collect()
    }
}

/// The bar with a small share of its mass spread over a larger square, so
/// the likelihood of points just outside the bar stays finite.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExtendedSupportUniform {
    pub inner: BarUniform,
    pub outer_half: f64,
    pub inner_mass: f64,
}

impl Default for ExtendedSupportUniform {
    fn default() -> Self {
        Self {
            inner: BarUniform::default(),
            outer_half: 1.1,
            inner_mass: 0.99,
        }
    }
}

impl ExtendedSupportUniform {
    pub fn outer_area(&self) -> f64 {
        4.0 * self.outer_half * self.outer_half
    }

    pub fn inner_density(&self) -> f64 {
        self.inner_mass / self.inner.area()
    }

    pub fn extension_density(&self) -> f64 {
        (1.0 - self.inner_mass) / (self.outer_area() - self.inner.area())
    }

    pub fn in_support(&self, x: Point) -> bool {
        x[0].abs() <= self.outer_half && x[1].abs() <= self.outer_half
    }

    /// `None` outside the outer square.
    pub fn density(&self, x: Point) -> Option<f64> {
        if self.inner.contains(x) {
            Some(self.inner_density())
        } else if self.in_support(x) {
            Some(self.extension_density())
        } else {
            None
        }
    }
}

/// Normalised product of the ring and the extended bar.
#[derive(Debug, Clone, PartialEq)]
pub struct ProductTarget {
    pub gmm: CircleGmm,
    pub support: ExtendedSupportUniform,
    log_z: f64,
}

impl Default for ProductTarget {
    fn default() -> Self {
        Self::new(CircleGmm::default(), ExtendedSupportUniform::default())
    }
}

impl ProductTarget {
    pub fn new(gmm: CircleGmm, support: ExtendedSupportUniform) -> Self {
        let m_in = gmm.box_mass(support.inner.half);
        let m_big = gmm.box_mass([support.outer_half, support.outer_half]);
        let z = support.inner_density() * m_in + support.extension_density() * (m_big - m_in);
        Self {
            gmm,
            support,
            log_z: z.ln(),
        }
    }

    pub fn normaliser(&self) -> f64 {
        self.log_z.exp()
    }

    /// `log(gmm(x) u(x) / Z)`, or `None` outside the support.
    pub fn log_density(&self, x: Point) -> Option<f64> {
        let u = self.support.density(x)?;
        Some(self.gmm.logpdf(x) + u.ln() - self.log_z)
    }
}

/// Exact samples of `gmm x bar` by rejection. Also returns the number of
/// proposals used.
pub fn sample_true_product<R: Rng + ?Sized>(
    gmm: &CircleGmm,
    bar: &BarUniform,
    n: usize,
    rng: &mut R,
) -> Result<(Vec<Point>, usize)> {
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    if gmm.box_mass(bar.half) < 1e-12 {
        return Err(Error::Config("the product has no mass".into()));
    }
    let mut out = Vec::with_capacity(n);
    let mut proposals = 0;
    while out.len() < n {
        let x = gmm.sample(1, rng)[0];
        proposals += 1;
        if bar.contains(x) {
            out.push(x);
        }
    }
    Ok((out, proposals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn gmm_mode_density() {
        let g = CircleGmm::default();
        let (l, s) = g.logpdf_score([0.5, 0.0]);
        let dominant = (1.0f64 / 8.0).ln() - (2.0 * std::f64::consts::PI * 9e-4).ln();
        assert!((l - dominant).abs() < 1e-12);
        assert!(s[0].abs() < 1e-9 && s[1].abs() < 1e-9);
        let single = CircleGmm {
            means: vec![[0.1, 0.2]],
            std: 0.5,
        };
        let (_, s) = single.logpdf_score([0.6, -0.3]);
        assert!((s[0] + 0.5 / 0.25).abs() < 1e-12 && (s[1] - 0.5 / 0.25).abs() < 1e-12);
    }

    #[test]
    fn gmm_score_matches_finite_differences() {
        let g = CircleGmm::default();
        let h = 1e-6;
        for x in [[0.4, 0.1], [0.0, 0.47], [-0.3, -0.3]] {
            let (_, s) = g.logpdf_score(x);
            let dx = (g.logpdf([x[0] + h, x[1]]) - g.logpdf([x[0] - h, x[1]])) / (2.0 * h);
            let dy = (g.logpdf([x[0], x[1] + h]) - g.logpdf([x[0], x[1] - h])) / (2.0 * h);
            assert!((s[0] - dx).abs() < 1e-4 * (1.0 + dx.abs()), "{s:?} {dx}");
            assert!((s[1] - dy).abs() < 1e-4 * (1.0 + dy.abs()));
        }
    }

    #[test]
    fn gmm_integrates_to_one() {
        let g = CircleGmm::default();
        let n = 800;
        let h = 2.0 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-1.0 + (i as f64 + 0.5) * h, -1.0 + (j as f64 + 0.5) * h];
                total += g.logpdf(x).exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3);
    }

    #[test]
    fn box_mass_matches_quadrature() {
        let g = CircleGmm::default();
        let half = [0.2, 1.0];
        for (k, m) in g.means.iter().enumerate() {
            let single = CircleGmm {
                means: vec![*m],
                std: g.std,
            };
            // midpoint rule in each dimension separately (the mode factorises)
            let n = 20000;
            let quad = |lo: f64, hi: f64, mu: f64| {
                let h = (hi - lo) / n as f64;
                (0..n)
                    .map(|i| {
                        let z = (lo + (i as f64 + 0.5) * h - mu) / g.std;
                        (-0.5 * z * z).exp() / (g.std * (2.0 * std::f64::consts::PI).sqrt())
                    })
                    .sum::<f64>()
                    * h
            };
            let q = quad(-half[0], half[0], m[0]) * quad(-half[1], half[1], m[1]);
            assert!((single.box_mass(half) - q).abs() < 1e-6, "mode {k}");
        }
        let inside = g.box_mass(half);
        assert!((inside - 0.25).abs() < 1e-6);
    }

    #[test]
    fn support_densities() {
        let u = ExtendedSupportUniform::default();
        assert!((u.inner_density() - 1.2375).abs() < 1e-15);
        assert!((u.extension_density() - 0.01 / 4.04).abs() < 1e-15);
        assert_eq!(u.density([5.0, 5.0]), None);
        assert_eq!(u.density([0.5, 0.5]), Some(u.extension_density()));
        let mass = u.inner_density() * u.inner.area()
            + u.extension_density() * (u.outer_area() - u.inner.area());
        assert!((mass - 1.0).abs() < 1e-12);
    }

    #[test]
    fn product_density_integrates_to_one() {
        let p = ProductTarget::default();
        let n = 1100;
        let h = 2.2 / n as f64;
        let mut total = 0.0;
        for i in 0..n {
            for j in 0..n {
                let x = [-1.1 + (i as f64 + 0.5) * h, -1.1 + (j as f64 + 0.5) * h];
                total += p.log_density(x).unwrap().exp();
            }
        }
        assert!((total * h * h - 1.0).abs() < 1e-3, "{}", total * h * h);
    }

    #[test]
    fn component_sampling() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let bar = BarUniform::default();
        assert!(bar.sample(5000, &mut rng).iter().all(|&x| bar.contains(x)));
        let g = CircleGmm::default();
        let n = 80000;
        let xs = g.sample(n, &mut rng);
        let mut counts = [0usize; 8];
        for &x in &xs {
            counts[g.nearest_mode(x)] += 1;
        }
        let p = 1.0 / 8.0;
        let se = (p * (1.0 - p) / n as f64).sqrt();
        for c in counts {
            assert!((c as f64 / n as f64 - p).abs() < 3.0 * se, "{counts:?}");
        }
        let again = g.sample(10, &mut ChaCha8Rng::seed_from_u64(9));
        assert_eq!(again, g.sample(10, &mut ChaCha8Rng::seed_from_u64(9)));
    }

    #[test]
    fn true_product_by_rejection() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let g = CircleGmm::default();
        let bar = BarUniform::default();
        let n = 20000;
        let (xs, proposals) = sample_true_product(&g, &bar, n, &mut rng).unwrap();
        assert!(xs.iter().all(|&x| bar.contains(x)));
        let rate = n as f64 / proposals as f64;
        let p = g.box_mass(bar.half);
        let se = (p * (1.0 - p) / proposals as f64).sqrt();
        assert!((rate - p).abs() < 3.0 * se + 1e-3, "{rate}");
        let mean = [
            xs.iter().map(|x| x[0]).sum::<f64>() / n as f64,
            xs.iter().map(|x| x[1]).sum::<f64>() / n as f64,
        ];
        // x-spread is 0.03, y-spread is about 0.5
        assert!(mean[0].abs() < 3.0 * 0.03 / (n as f64).sqrt());
        assert!(mean[1].abs() < 3.0 * 0.5 / (n as f64).sqrt());
    }
}
