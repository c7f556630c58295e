//! Randomised invariants.

use std::sync::Arc;

use proptest::prelude::*;
use scorecomp::composition::{ComponentModel, GaussianComponent};
use scorecomp::experiment::{parse_points_csv, points_csv, ExperimentConfig, GridEntry};
use scorecomp::metrics::{
    ll_metric, solve_assignment, squared_distance_matrix, w2_metric, W2Convention,
};
use scorecomp::samplers::{mala_log_acceptance, straight_line_path, trapezoid};
use scorecomp::targets::{ProductTarget, FLOOR_LOG_DENSITY};
use scorecomp::{CompositionSpec, NoiseSchedule, Parameterisation};

type Point = [f64; 2];

fn point(r: f64) -> impl Strategy<Value = Point> {
    (-r..r, -r..r).prop_map(|(a, b)| [a, b])
}

fn cloud(n: usize) -> impl Strategy<Value = Vec<Point>> {
    prop::collection::vec(point(1.0), n)
}

proptest! {
    #[test]
    fn trapezoid_is_exact_for_affine_gradients(
        a in point(2.0), b in point(2.0), k in 2usize..30,
        m in prop::array::uniform4(-3.0f64..3.0), c in point(3.0),
    ) {
        // symmetric linear part so the field is a gradient
        let (m00, m01, m11) = (m[0], m[1], m[2]);
        let f = |x: Point| [m00 * x[0] + m01 * x[1] + c[0], m01 * x[0] + m11 * x[1] + c[1]];
        let phi = |x: Point| 0.5 * (m00 * x[0] * x[0] + 2.0 * m01 * x[0] * x[1] + m11 * x[1] * x[1]) + c[0] * x[0] + c[1] * x[1];
        let path = straight_line_path(a, b, k).unwrap();
        let values: Vec<Point> = path.iter().map(|&p| f(p)).collect();
        let got = trapezoid(&path, &values).unwrap();
        let want = phi(b) - phi(a);
        prop_assert!((got - want).abs() <= 1e-12 * (1.0 + want.abs()), "{got} vs {want}");
    }

    #[test]
    fn straight_paths_are_even_with_exact_endpoints(a in point(5.0), b in point(5.0), k in 2usize..20) {
        let p = straight_line_path(a, b, k).unwrap();
        prop_assert_eq!(p.len(), k);
        prop_assert_eq!(p[0], a);
        prop_assert_eq!(p[k - 1], b);
        let d = |u: Point, v: Point| ((u[0] - v[0]).powi(2) + (u[1] - v[1]).powi(2)).sqrt();
        let seg = d(a, b) / (k - 1) as f64;
        for w in p.windows(2) {
            prop_assert!((d(w[0], w[1]) - seg).abs() < 1e-12);
        }
    }

    #[test]
    fn mala_acceptance_is_a_log_probability(
        x in point(1.0), y in point(1.0), sx in point(5.0), sy in point(5.0),
        f in -5.0f64..5.0, var in 1e-4f64..0.5,
    ) {
        let a = mala_log_acceptance(x, sx, y, sy, f, var);
        prop_assert!(a <= 0.0);
        prop_assert_eq!(mala_log_acceptance(x, sx, x, sx, 0.0, var), 0.0);
    }

    #[test]
    fn w2_is_a_lower_bound_and_symmetric(
        a in cloud(12), b in cloud(12), perm in Just((0..12usize).collect::<Vec<_>>()).prop_shuffle(),
    ) {
        let w = w2_metric(&a, &b, W2Convention::Sum).unwrap();
        let cost = squared_distance_matrix(&a, &b);
        let permuted: f64 = perm.iter().enumerate().map(|(i, &j)| cost[i * 12 + j]).sum();
        prop_assert!(w * w <= permuted + 1e-12);
        let back = w2_metric(&b, &a, W2Convention::Sum).unwrap();
        prop_assert!((w - back).abs() < 1e-12);
        let mean = w2_metric(&a, &b, W2Convention::Mean).unwrap();
        prop_assert!((mean - w / 12f64.sqrt()).abs() < 1e-12);
        prop_assert_eq!(w2_metric(&a, &a, W2Convention::Sum).unwrap(), 0.0);
        let assign = solve_assignment(&cost, 12).unwrap();
        let mut seen = assign.clone();
        seen.sort_unstable();
        prop_assert_eq!(seen, (0..12).collect::<Vec<_>>());
    }

    #[test]
    fn w2_ignores_common_translations(a in cloud(10), b in cloud(10), s in point(3.0)) {
        let shift = |v: &[Point]| v.iter().map(|p| [p[0] + s[0], p[1] + s[1]]).collect::<Vec<_>>();
        let w = w2_metric(&a, &b, W2Convention::Sum).unwrap();
        let ws = w2_metric(&shift(&a), &shift(&b), W2Convention::Sum).unwrap();
        prop_assert!((w - ws).abs() < 1e-9 * (1.0 + w));
    }

    #[test]
    fn ll_floors_exactly_the_points_outside_the_support(xs in prop::collection::vec(point(3.0), 1..50)) {
        let target = ProductTarget::default();
        let r = ll_metric(&xs, &target).unwrap();
        let outside = xs.iter().filter(|p| p[0].abs() > 1.1 || p[1].abs() > 1.1).count();
        prop_assert_eq!(r.out_of_support, outside);
        let want = xs
            .iter()
            .map(|&p| target.log_density(p).unwrap_or(FLOOR_LOG_DENSITY))
            .sum::<f64>()
            / xs.len() as f64;
        prop_assert!((r.mean - want).abs() <= 1e-12 * want.abs());
    }

    #[test]
    fn points_csv_round_trips(xs in prop::collection::vec((any::<f64>(), any::<f64>()), 0..30)) {
        let xs: Vec<Point> = xs.into_iter().filter(|(a, b)| a.is_finite() && b.is_finite()).map(|(a, b)| [a, b]).collect();
        prop_assert_eq!(parse_points_csv(&points_csv(&xs)).unwrap(), xs);
    }

    #[test]
    fn schedule_identities(steps in 2usize..400) {
        let s = NoiseSchedule::cosine(steps).unwrap();
        let mut prod = 1.0;
        for t in 1..=steps {
            let b = s.beta(t);
            prop_assert!(b > 0.0 && b <= 0.999);
            prop_assert_eq!(s.alpha(t), 1.0 - b);
            prod *= 1.0 - b;
            prop_assert!((s.alpha_bar(t) - prod).abs() <= 1e-12 * prod.max(1e-300) + 1e-15);
            prop_assert!(s.alpha_bar(t) < s.alpha_bar(t - 1));
            prop_assert_eq!(s.sigma(t), (1.0 - s.alpha_bar(t)).sqrt());
            let pv = b * (1.0 - s.alpha_bar(t - 1)) / (1.0 - s.alpha_bar(t));
            prop_assert!((s.posterior_variance(t) - pv).abs() <= 1e-15 * pv.max(1.0));
        }
    }

    #[test]
    fn composition_is_linear_in_the_weights(
        w1 in 0.1f64..3.0, w2 in 0.1f64..3.0, xs in prop::collection::vec(point(1.0), 1..10),
        t in 1usize..20, factor in 0.1f64..4.0,
    ) {
        let schedule = NoiseSchedule::cosine(20).unwrap();
        let g = |m: Point| -> Arc<dyn ComponentModel> {
            Arc::new(GaussianComponent { mean: m, var: 0.2, parameterisation: Parameterisation::Energy, timesteps: 20 })
        };
        let (a, b) = (g([0.3, 0.0]), g([0.0, -0.4]));
        let spec = CompositionSpec::weighted(vec![(a.clone(), w1), (b.clone(), w2)]).unwrap();
        let out = spec.evaluate(&xs, t, &schedule).unwrap();
        let ea = a.evaluate(&xs, t, &schedule).unwrap();
        let eb = b.evaluate(&xs, t, &schedule).unwrap();
        for i in 0..xs.len() {
            for d in 0..2 {
                let want = w1 * ea.eps[i][d] + w2 * eb.eps[i][d];
                prop_assert!((out.eps[i][d] - want).abs() < 1e-12);
            }
        }
        let scaled = spec.scaled(factor).unwrap().evaluate(&xs, t, &schedule).unwrap();
        let e = out.energy.unwrap();
        let es = scaled.energy.unwrap();
        for i in 0..xs.len() {
            prop_assert!((es[i] - factor * e[i]).abs() < 1e-10 * (1.0 + e[i].abs()));
        }
    }

    #[test]
    fn grid_entries_round_trip(idx in 0usize..15) {
        let e = scorecomp::experiment::default_grid()[idx];
        let back: GridEntry = e.to_string().parse().unwrap();
        prop_assert_eq!(back, e);
    }

    #[test]
    fn config_text_round_trips(seed in any::<u64>(), runs in 1usize..50, samples in 1usize..5000, damping in 0.0f64..1.0) {
        let mut cfg = ExperimentConfig::default();
        cfg.seed = seed;
        cfg.runs = runs;
        cfg.samples = samples;
        cfg.mcmc.damping = damping;
        let back = ExperimentConfig::parse(&cfg.to_text()).unwrap();
        prop_assert_eq!(back, cfg);
    }
}
