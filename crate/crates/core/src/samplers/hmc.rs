//! Hamiltonian Monte Carlo with partial momentum refreshment.
//!
//! Each step refreshes `p <- d p + sqrt(1 - d^2) xi` (damping `d`), runs the
//! leapfrog integrator with force = score, and (for the adjusted variant)
//! accepts with `min(1, exp(f + K(p) - K(p')))`. A rejection keeps the
//! position and negates the refreshed momentum.

use rand::Rng;

use super::langevin::estimate_log_ratio;
use super::line::trapezoid;
use super::{check_eval, Estimator, EvalCounts, McmcConfig, ParticleState, PathKind, ScoreField};
use crate::diffusion::standard_normal_point;
use crate::{Point, Result};

/// Batched leapfrog trajectory. `positions[j][i]` is particle `i` after `j`
/// leapfrogs; index 0 is the start.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub positions: Vec<Vec<Point>>,
    pub scores: Vec<Vec<Point>>,
    /// Energies at the final position, when the field has them.
    pub final_energy: Option<Vec<f64>>,
    pub final_momentum: Vec<Point>,
}

/// Integrates `leapfrogs` steps of size `step` from `(x, p)` with unit-free
/// mass `mass`, reusing the known scores at the start.
pub fn leapfrog<F: ScoreField + ?Sized>(
    field: &F,
    x: &[Point],
    score: &[Point],
    momentum: &[Point],
    t: usize,
    config: &McmcConfig,
) -> Result<Trajectory> {
    let n = x.len();
    let eps = config.hmc_step_size;
    let inv_mass = 1.0 / config.mass;
    let mut positions = Vec::with_capacity(config.leapfrogs + 1);
    let mut scores = Vec::with_capacity(config.leapfrogs + 1);
    positions.push(x.to_vec());
    scores.push(score.to_vec());
    let mut p = momentum.to_vec();
    let mut final_energy = None;
    for _ in 0..config.leapfrogs {
        let (cur_x, cur_s) = (positions.last().unwrap(), scores.last().unwrap());
        let mut next = Vec::with_capacity(n);
        for i in 0..n {
            p[i][0] += 0.5 * eps * cur_s[i][0];
            p[i][1] += 0.5 * eps * cur_s[i][1];
            next.push([
                cur_x[i][0] + eps * inv_mass * p[i][0],
                cur_x[i][1] + eps * inv_mass * p[i][1],
            ]);
        }
        let eval = field.evaluate(&next, t)?;
        check_eval(&eval, n)?;
        for i in 0..n {
            p[i][0] += 0.5 * eps * eval.score[i][0];
            p[i][1] += 0.5 * eps * eval.score[i][1];
        }
        positions.push(next);
        scores.push(eval.score);
        final_energy = eval.energy;
    }
    Ok(Trajectory {
        positions,
        scores,
        final_energy,
        final_momentum: p,
    })
}

/// A proposal with its log acceptance probability.
#[derive(Debug, Clone)]
pub struct HmcProposal {
    pub trajectory: Trajectory,
    pub log_accept: Vec<f64>,
    pub evals: EvalCounts,
}

fn kinetic(p: Point, mass: f64) -> f64 {
    0.5 * (p[0] * p[0] + p[1] * p[1]) / mass
}

fn refresh<R: Rng + ?Sized>(momenta: &mut [Point], config: &McmcConfig, rng: &mut R) {
    let d = config.damping;
    let keep = (1.0 - d * d).sqrt() * config.mass.sqrt();
    for p in momenta.iter_mut() {
        let xi = standard_normal_point(rng);
        p[0] = d * p[0] + keep * xi[0];
        p[1] = d * p[1] + keep * xi[1];
    }
}

/// Proposes from already refreshed momenta and evaluates the acceptance.
pub(crate) fn hmc_proposal<F: ScoreField + ?Sized>(
    field: &F,
    estimator: Estimator,
    state: &ParticleState,
    momenta: &[Point],
    t: usize,
    config: &McmcConfig,
) -> Result<HmcProposal> {
    let n = state.len();
    let trajectory = leapfrog(field, &state.x, &state.score, momenta, t, config)?;
    let last = config.leapfrogs;
    let (f, extra) = match estimator {
        Estimator::LineIntegral {
            path: PathKind::LeapfrogCurve,
            ..
        } => {
            let mut f = Vec::with_capacity(n);
            let mut path = Vec::with_capacity(last + 1);
            let mut values = Vec::with_capacity(last + 1);
            for i in 0..n {
                path.clear();
                values.clear();
                for j in 0..=last {
                    path.push(trajectory.positions[j][i]);
                    values.push(trajectory.scores[j][i]);
                }
                f.push(trapezoid(&path, &values)?);
            }
            (f, 0)
        }
        _ => estimate_log_ratio(
            field,
            estimator,
            t,
            (&state.x, &state.score, state.energy.as_deref()),
            (
                &trajectory.positions[last],
                &trajectory.scores[last],
                trajectory.final_energy.as_deref(),
            ),
        )?,
    };
    let log_accept = (0..n)
        .map(|i| {
            let h = f[i] + kinetic(momenta[i], config.mass)
                - kinetic(trajectory.final_momentum[i], config.mass);
            h.min(0.0)
        })
        .collect();
    Ok(HmcProposal {
        trajectory,
        log_accept,
        evals: EvalCounts {
            dynamics: n * last,
            acceptance: extra,
        },
    })
}

/// One U-HMC step: refresh, integrate, always accept.
pub fn uhmc_step<F, R>(
    field: &F,
    state: &mut ParticleState,
    momenta: &mut [Point],
    t: usize,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<(usize, EvalCounts)>
where
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    let n = state.len();
    refresh(momenta, config, rng);
    let mut traj = leapfrog(field, &state.x, &state.score, momenta, t, config)?;
    state.x = traj.positions.pop().expect("at least one leapfrog");
    state.score = traj.scores.pop().expect("at least one leapfrog");
    state.energy = traj.final_energy;
    momenta.copy_from_slice(&traj.final_momentum);
    Ok((
        n,
        EvalCounts {
            dynamics: n * config.leapfrogs,
            acceptance: 0,
        },
    ))
}

/// One adjusted HMC step. Returns the number of accepted particles.
pub fn hmc_step<F, R>(
    field: &F,
    estimator: Estimator,
    state: &mut ParticleState,
    momenta: &mut [Point],
    t: usize,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<(usize, EvalCounts)>
where
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    refresh(momenta, config, rng);
    let mut proposal = hmc_proposal(field, estimator, state, momenta, t, config)?;
    let last = config.leapfrogs;
    let new_x = std::mem::take(&mut proposal.trajectory.positions[last]);
    let new_s = std::mem::take(&mut proposal.trajectory.scores[last]);
    let mut accepted = 0;
    for i in 0..state.len() {
        let u: f64 = rng.random();
        if u.ln() < proposal.log_accept[i] {
            accepted += 1;
            state.x[i] = new_x[i];
            state.score[i] = new_s[i];
            if let (Some(e), Some(new)) = (
                state.energy.as_mut(),
                proposal.trajectory.final_energy.as_ref(),
            ) {
                e[i] = new[i];
            }
            momenta[i] = proposal.trajectory.final_momentum[i];
        } else {
            momenta[i] = [-momenta[i][0], -momenta[i][1]];
        }
    }
    Ok((accepted, proposal.evals))
}
