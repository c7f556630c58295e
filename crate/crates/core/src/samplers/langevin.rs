//! Unadjusted and Metropolis-adjusted Langevin steps.

use rand::Rng;

use super::line::{interior_points, trapezoid};
use super::{check_eval, Estimator, EvalCounts, ParticleState, PathKind, ScoreField};
use crate::diffusion::standard_normal_point;
use crate::{Error, Point, Result};

/// `x + (delta^2 / 2) score + delta xi`.
pub fn mala_propose(x: Point, score: Point, xi: Point, step_var: f64) -> Point {
    let drift = 0.5 * step_var;
    let delta = step_var.sqrt();
    [
        x[0] + drift * score[0] + delta * xi[0],
        x[1] + drift * score[1] + delta * xi[1],
    ]
}

/// `min(0, f + log q(x | x_hat) - log q(x_hat | x))` for the Langevin
/// kernel `q(y | x) = N(y; x + delta^2/2 score(x), delta^2 I)`.
pub fn mala_log_acceptance(
    x: Point,
    score_x: Point,
    x_hat: Point,
    score_hat: Point,
    f: f64,
    step_var: f64,
) -> f64 {
    let drift = 0.5 * step_var;
    let back = [
        x[0] - x_hat[0] - drift * score_hat[0],
        x[1] - x_hat[1] - drift * score_hat[1],
    ];
    let fwd = [
        x_hat[0] - x[0] - drift * score_x[0],
        x_hat[1] - x[1] - drift * score_x[1],
    ];
    let log_ratio = -((back[0] * back[0] + back[1] * back[1])
        - (fwd[0] * fwd[0] + fwd[1] * fwd[1]))
        / (2.0 * step_var);
    (f + log_ratio).min(0.0)
}

/// One U-LA step on every particle. Always accepts.
pub fn ula_step<F, R>(
    field: &F,
    state: &mut ParticleState,
    t: usize,
    step_var: f64,
    rng: &mut R,
) -> Result<(usize, EvalCounts)>
where
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.len();
    let moved: Vec<Point> = state
        .x
        .iter()
        .zip(&state.score)
        .map(|(&x, &s)| mala_propose(x, s, standard_normal_point(rng), step_var))
        .collect();
    *state = ParticleState::evaluate(field, moved, t)?;
    Ok((
        n,
        EvalCounts {
            dynamics: n,
            acceptance: 0,
        },
    ))
}

/// Energy-difference estimates `log p(x_hat) - log p(x)` for a batch of
/// proposals whose endpoint scores are already known.
pub(crate) fn estimate_log_ratio<F: ScoreField + ?Sized>(
    field: &F,
    estimator: Estimator,
    t: usize,
    start: (&[Point], &[Point], Option<&[f64]>),
    end: (&[Point], &[Point], Option<&[f64]>),
) -> Result<(Vec<f64>, usize)> {
    let (x0, s0, e0) = start;
    let (x1, s1, e1) = end;
    match estimator {
        Estimator::Direct => {
            let (e0, e1) = e0
                .zip(e1)
                .ok_or_else(|| Error::Config("the direct estimator needs energies".into()))?;
            Ok((e0.iter().zip(e1).map(|(a, b)| a - b).collect(), 0))
        }
        Estimator::LineIntegral { points: k, path } => {
            if path != PathKind::StraightLine {
                return Err(Error::Config(
                    "only straight lines are available here".into(),
                ));
            }
            let inner = k - 2;
            let interior: Vec<Point> = x0
                .iter()
                .zip(x1)
                .flat_map(|(&a, &b)| interior_points(a, b, k))
                .collect();
            let interior_scores = if inner > 0 {
                let eval = field.evaluate(&interior, t)?;
                check_eval(&eval, interior.len())?;
                eval.score
            } else {
                Vec::new()
            };
            let mut out = Vec::with_capacity(x0.len());
            let mut path = Vec::with_capacity(k);
            let mut values = Vec::with_capacity(k);
            for i in 0..x0.len() {
                path.clear();
                values.clear();
                path.push(x0[i]);
                values.push(s0[i]);
                path.extend_from_slice(&interior[i * inner..(i + 1) * inner]);
                values.extend_from_slice(&interior_scores[i * inner..(i + 1) * inner]);
                path.push(x1[i]);
                values.push(s1[i]);
                out.push(trapezoid(&path, &values)?);
            }
            Ok((out, interior.len()))
        }
    }
}

/// One LA step: Langevin proposal, estimated energy difference, exact
/// kernel ratio, accept/reject. Returns the number of accepted particles.
pub fn mala_step<F, R>(
    field: &F,
    estimator: Estimator,
    state: &mut ParticleState,
    t: usize,
    step_var: f64,
    rng: &mut R,
) -> Result<(usize, EvalCounts)>
where
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.len();
    let xi: Vec<Point> = (0..n).map(|_| standard_normal_point(rng)).collect();
    let proposals: Vec<Point> = state
        .x
        .iter()
        .zip(&state.score)
        .zip(&xi)
        .map(|((&x, &s), &z)| mala_propose(x, s, z, step_var))
        .collect();
    let eval = field.evaluate(&proposals, t)?;
    check_eval(&eval, n)?;
    let (f, extra) = estimate_log_ratio(
        field,
        estimator,
        t,
        (&state.x, &state.score, state.energy.as_deref()),
        (&proposals, &eval.score, eval.energy.as_deref()),
    )?;
    let mut accepted = 0;
    for i in 0..n {
        let log_alpha = mala_log_acceptance(
            state.x[i],
            state.score[i],
            proposals[i],
            eval.score[i],
            f[i],
            step_var,
        );
        let u: f64 = rng.random();
        if u.ln() < log_alpha {
            accepted += 1;
            state.x[i] = proposals[i];
            state.score[i] = eval.score[i];
            if let (Some(e), Some(new)) = (state.energy.as_mut(), eval.energy.as_ref()) {
                e[i] = new[i];
            }
        }
    }
    Ok((
        accepted,
        EvalCounts {
            dynamics: n,
            acceptance: extra,
        },
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::samplers::{FnEnergyField, FnField};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn gaussian_energy(x: Point) -> (f64, Point) {
        (0.5 * (x[0] * x[0] + x[1] * x[1]), [-x[0], -x[1]])
    }

    /// Classical MALA acceptance for N(0, I) from explicit densities.
    fn closed_form_acceptance(x: Point, x_hat: Point, step_var: f64) -> f64 {
        let log_pi =
            |y: Point| -0.5 * (y[0] * y[0] + y[1] * y[1]) - (2.0 * std::f64::consts::PI).ln();
        let log_q = |to: Point, from: Point| {
            let m = [
                from[0] * (1.0 - 0.5 * step_var),
                from[1] * (1.0 - 0.5 * step_var),
            ];
            let d = [to[0] - m[0], to[1] - m[1]];
            -(d[0] * d[0] + d[1] * d[1]) / (2.0 * step_var)
                - (2.0 * std::f64::consts::PI * step_var).ln()
        };
        (log_pi(x_hat) + log_q(x, x_hat) - log_pi(x) - log_q(x_hat, x))
            .exp()
            .min(1.0)
    }

    #[test]
    fn ula_zero_field_no_noise_is_fixed_point() {
        assert_eq!(
            mala_propose([0.3, 0.4], [0.0, 0.0], [0.0, 0.0], 0.01),
            [0.3, 0.4]
        );
        let y = mala_propose([0.3, 0.4], [-0.3, -0.4], [0.0, 0.0], 0.01);
        assert!((y[0] - (0.3 - 0.005 * 0.3)).abs() < 1e-16);
        assert!((y[1] - (0.4 - 0.005 * 0.4)).abs() < 1e-16);
    }

    #[test]
    fn identical_proposal_accepts() {
        let s = [0.7, -0.2];
        let step_var: f64 = 0.04;
        let xi = [-0.5 * step_var.sqrt() * s[0], -0.5 * step_var.sqrt() * s[1]];
        let x = [1.0, 2.0];
        let x_hat = mala_propose(x, s, xi, step_var);
        assert!((x_hat[0] - x[0]).abs() < 1e-15 && (x_hat[1] - x[1]).abs() < 1e-15);
        assert_eq!(mala_log_acceptance(x, s, x, s, 0.0, step_var), 0.0);
    }

    fn acceptance_for(
        estimator: Estimator,
        with_energy: bool,
        pairs: &[(Point, Point)],
        step_var: f64,
    ) -> Vec<f64> {
        let energy_field = FnEnergyField::new(gaussian_energy);
        let score_field = FnField::new(|x: Point| [-x[0], -x[1]]);
        let field: &dyn ScoreField = if with_energy {
            &energy_field
        } else {
            &score_field
        };
        let xs: Vec<Point> = pairs.iter().map(|p| p.0).collect();
        let state = ParticleState::evaluate(field, xs, 1).unwrap();
        let proposals: Vec<Point> = state
            .x
            .iter()
            .zip(&state.score)
            .zip(pairs)
            .map(|((&x, &s), &(_, xi))| mala_propose(x, s, xi, step_var))
            .collect();
        let eval = field.evaluate(&proposals, 1).unwrap();
        let (f, _) = estimate_log_ratio(
            field,
            estimator,
            1,
            (&state.x, &state.score, state.energy.as_deref()),
            (&proposals, &eval.score, eval.energy.as_deref()),
        )
        .unwrap();
        (0..pairs.len())
            .map(|i| {
                mala_log_acceptance(
                    state.x[i],
                    state.score[i],
                    proposals[i],
                    eval.score[i],
                    f[i],
                    step_var,
                )
                .exp()
            })
            .collect()
    }

    #[test]
    fn matches_closed_form_mala_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let step_var = 0.3;
        let pairs: Vec<(Point, Point)> = (0..1000)
            .map(|_| {
                let x = standard_normal_point(&mut rng);
                let xi = standard_normal_point(&mut rng);
                ([2.0 * x[0], 2.0 * x[1]], xi)
            })
            .collect();
        let direct = acceptance_for(Estimator::Direct, true, &pairs, step_var);
        let line2 = acceptance_for(
            Estimator::LineIntegral {
                points: 2,
                path: PathKind::StraightLine,
            },
            false,
            &pairs,
            step_var,
        );
        for (i, &(x, xi)) in pairs.iter().enumerate() {
            let x_hat = mala_propose(x, [-x[0], -x[1]], xi, step_var);
            let oracle = closed_form_acceptance(x, x_hat, step_var);
            assert!(
                (direct[i] - oracle).abs() < 1e-12,
                "{} vs {}",
                direct[i],
                oracle
            );
            assert!((line2[i] - direct[i]).abs() < 1e-12);
        }
    }

    #[test]
    fn ula_chain_is_near_stationary() {
        // ULA on N(0, I) with delta^2 = 0.01 has stationary variance
        // 1 / (1 - delta^2 / 4), within 0.3% of 1.
        let field = FnField::new(|x: Point| [-x[0], -x[1]]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let n = 4000;
        let x0: Vec<Point> = (0..n).map(|_| [3.0, -3.0]).collect();
        let mut state = ParticleState::evaluate(&field, x0, 1).unwrap();
        for _ in 0..2000 {
            ula_step(&field, &mut state, 1, 0.01, &mut rng).unwrap();
        }
        let nf = n as f64;
        let mean: Point = [
            state.x.iter().map(|p| p[0]).sum::<f64>() / nf,
            state.x.iter().map(|p| p[1]).sum::<f64>() / nf,
        ];
        let var = state.x.iter().map(|p| p[0] * p[0]).sum::<f64>() / nf;
        let cov = state.x.iter().map(|p| p[0] * p[1]).sum::<f64>() / nf;
        let se_mean = (1.0 / nf).sqrt();
        assert!(
            mean[0].abs() < 3.0 * se_mean && mean[1].abs() < 3.0 * se_mean,
            "{mean:?}"
        );
        assert!((var - 1.0).abs() < 3.0 * (2.0 / nf).sqrt() + 0.003, "{var}");
        assert!(cov.abs() < 3.0 * se_mean, "{cov}");
    }
}
