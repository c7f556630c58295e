//! MCMC refinement run between reverse diffusion steps.
//!
//! Four samplers: unadjusted Langevin (U-LA), Metropolis-adjusted Langevin
//! (LA), unadjusted HMC (U-HMC) and adjusted HMC. The adjusted variants need
//! `log p(x_hat) - log p(x)`. An [`Estimator`] supplies it either directly
//! from energies or as a trapezoidal line integral of the score, along a
//! straight line or along the leapfrog trajectory.

mod hmc;
mod langevin;
mod line;

use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;

use crate::{Error, Point, Result};

pub use hmc::{hmc_step, leapfrog, uhmc_step, HmcProposal, Trajectory};
pub use langevin::{mala_log_acceptance, mala_propose, mala_step, ula_step};
pub use line::{line_energy_diff, straight_line_path, trapezoid};

/// Score (and optionally energy) of a distribution at diffusion step `t`.
///
/// `energy` is `-log p` up to a constant, so `score = -grad energy`.
pub trait ScoreField: Sync {
    fn evaluate(&self, points: &[Point], t: usize) -> Result<FieldEval>;

    fn has_energy(&self) -> bool {
        false
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldEval {
    pub score: Vec<Point>,
    pub energy: Option<Vec<f64>>,
}

/// A score field from a plain function of position.
pub struct FnField<F> {
    f: F,
}

impl<F: Fn(Point) -> Point + Sync> FnField<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F: Fn(Point) -> Point + Sync> ScoreField for FnField<F> {
    fn evaluate(&self, points: &[Point], _t: usize) -> Result<FieldEval> {
        Ok(FieldEval {
            score: points.iter().map(|&p| (self.f)(p)).collect(),
            energy: None,
        })
    }
}

/// A field from a function returning `(energy, score)`.
pub struct FnEnergyField<F> {
    f: F,
}

impl<F: Fn(Point) -> (f64, Point) + Sync> FnEnergyField<F> {
    pub fn new(f: F) -> Self {
        Self { f }
    }
}

impl<F: Fn(Point) -> (f64, Point) + Sync> ScoreField for FnEnergyField<F> {
    fn evaluate(&self, points: &[Point], _t: usize) -> Result<FieldEval> {
        let (energy, score) = points.iter().map(|&p| (self.f)(p)).unzip();
        Ok(FieldEval {
            score,
            energy: Some(energy),
        })
    }

    fn has_energy(&self) -> bool {
        true
    }
}

/// Wraps a field and counts evaluated points.
pub struct CountingField<'a, F: ?Sized> {
    inner: &'a F,
    points: AtomicUsize,
    calls: AtomicUsize,
}

impl<'a, F: ScoreField + ?Sized> CountingField<'a, F> {
    pub fn new(inner: &'a F) -> Self {
        Self {
            inner,
            points: AtomicUsize::new(0),
            calls: AtomicUsize::new(0),
        }
    }

    pub fn points(&self) -> usize {
        self.points.load(Ordering::Relaxed)
    }

    pub fn calls(&self) -> usize {
        self.calls.load(Ordering::Relaxed)
    }
}

impl<F: ScoreField + ?Sized> ScoreField for CountingField<'_, F> {
    fn evaluate(&self, points: &[Point], t: usize) -> Result<FieldEval> {
        self.points.fetch_add(points.len(), Ordering::Relaxed);
        self.calls.fetch_add(1, Ordering::Relaxed);
        self.inner.evaluate(points, t)
    }

    fn has_energy(&self) -> bool {
        self.inner.has_energy()
    }
}

/// Sampler constants. Defaults are the values used for the 2D experiment:
/// 10 steps per diffusion step, 3 leapfrogs of size 0.03, damping 0.5,
/// unit mass, Langevin variance 0.001.
#[derive(Debug, Clone, PartialEq)]
pub struct McmcConfig {
    pub steps: usize,
    pub leapfrogs: usize,
    pub hmc_step_size: f64,
    pub damping: f64,
    /// Diagonal of the (isotropic) mass matrix.
    pub mass: f64,
    /// The Langevin variance `delta^2`.
    pub la_step_size: f64,
}

impl Default for McmcConfig {
    fn default() -> Self {
        Self {
            steps: 10,
            leapfrogs: 3,
            hmc_step_size: 0.03,
            damping: 0.5,
            mass: 1.0,
            la_step_size: 0.001,
        }
    }
}

impl McmcConfig {
    pub fn validate(&self) -> Result<()> {
        if self.leapfrogs == 0 {
            return Err(Error::Config("leapfrog count must be positive".into()));
        }
        if !(self.hmc_step_size > 0.0) || !(self.la_step_size > 0.0) {
            return Err(Error::Config("step sizes must be positive".into()));
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return Err(Error::Config("damping must lie in [0, 1]".into()));
        }
        if !(self.mass > 0.0) {
            return Err(Error::Config("mass must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum PathKind {
    StraightLine,
    /// The polyline through the HMC leapfrog positions.
    LeapfrogCurve,
}

/// How the adjusted samplers get `log p(x_hat) - log p(x)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Estimator {
    /// `E(x) - E(x_hat)` from an energy field.
    Direct,
    /// Trapezoidal integral of the score with `points` mesh points
    /// (endpoints included).
    LineIntegral { points: usize, path: PathKind },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum SamplerKind {
    Ula,
    Mala,
    Uhmc,
    Hmc,
}

impl SamplerKind {
    pub fn is_adjusted(self) -> bool {
        matches!(self, SamplerKind::Mala | SamplerKind::Hmc)
    }

    pub fn name(self) -> &'static str {
        match self {
            SamplerKind::Ula => "U-LA",
            SamplerKind::Mala => "LA",
            SamplerKind::Uhmc => "U-HMC",
            SamplerKind::Hmc => "HMC",
        }
    }
}

/// A sampler with its estimator (`None` for unadjusted samplers).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct SamplerSpec {
    pub kind: SamplerKind,
    pub estimator: Option<Estimator>,
}

impl SamplerSpec {
    pub fn new(kind: SamplerKind, estimator: Option<Estimator>) -> Result<Self> {
        let spec = Self { kind, estimator };
        spec.check_shape()?;
        Ok(spec)
    }

    fn check_shape(&self) -> Result<()> {
        match (self.kind.is_adjusted(), self.estimator) {
            (true, None) => Err(Error::Config(format!(
                "{} needs an estimator",
                self.kind.name()
            ))),
            (false, Some(_)) => Err(Error::Config(format!(
                "{} takes no estimator",
                self.kind.name()
            ))),
            (_, Some(Estimator::LineIntegral { points, path })) => {
                if points < 2 {
                    return Err(Error::Config(
                        "line integral needs at least 2 points".into(),
                    ));
                }
                if path == PathKind::LeapfrogCurve && self.kind != SamplerKind::Hmc {
                    return Err(Error::Config("curve paths exist only for HMC".into()));
                }
                Ok(())
            }
            _ => Ok(()),
        }
    }

    /// Full validation against a configuration.
    pub fn validate(&self, config: &McmcConfig) -> Result<()> {
        self.check_shape()?;
        if let Some(Estimator::LineIntegral {
            points,
            path: PathKind::LeapfrogCurve,
        }) = self.estimator
        {
            if points != config.leapfrogs + 1 {
                return Err(Error::Config(format!(
                    "curve path has {} points with {} leapfrogs",
                    points, config.leapfrogs
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for SamplerSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self.estimator {
            None | Some(Estimator::Direct) => f.write_str(self.kind.name()),
            Some(Estimator::LineIntegral { points, path }) => {
                let p = match path {
                    PathKind::StraightLine => "line",
                    PathKind::LeapfrogCurve => "curve",
                };
                write!(f, "{}-{}-{}", self.kind.name(), points, p)
            }
        }
    }
}

impl FromStr for SamplerSpec {
    type Err = Error;

    /// Parses `U-LA`, `LA`, `LA-5-line`, `U-HMC`, `HMC`, `HMC-4-curve`, ...
    /// Bare `LA`/`HMC` use the direct estimator.
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::Config(format!("unknown sampler `{s}`"));
        let (kind, rest) = if let Some(r) = s.strip_prefix("U-LA") {
            (SamplerKind::Ula, r)
        } else if let Some(r) = s.strip_prefix("U-HMC") {
            (SamplerKind::Uhmc, r)
        } else if let Some(r) = s.strip_prefix("LA") {
            (SamplerKind::Mala, r)
        } else if let Some(r) = s.strip_prefix("HMC") {
            (SamplerKind::Hmc, r)
        } else {
            return Err(bad());
        };
        let estimator = if rest.is_empty() {
            kind.is_adjusted().then_some(Estimator::Direct)
        } else {
            let rest = rest.strip_prefix('-').ok_or_else(bad)?;
            let (k, path) = rest.split_once('-').ok_or_else(bad)?;
            let points = k.parse().map_err(|_| bad())?;
            let path = match path {
                "line" => PathKind::StraightLine,
                "curve" => PathKind::LeapfrogCurve,
                _ => return Err(bad()),
            };
            Some(Estimator::LineIntegral { points, path })
        };
        Self::new(kind, estimator)
    }
}

/// Point evaluations split by purpose.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct EvalCounts {
    /// Evaluations the dynamics need anyway (proposal drift, leapfrog forces).
    pub dynamics: usize,
    /// Extra evaluations only for the acceptance test (interior path points).
    pub acceptance: usize,
}

impl std::ops::AddAssign for EvalCounts {
    fn add_assign(&mut self, rhs: Self) {
        self.dynamics += rhs.dynamics;
        self.acceptance += rhs.acceptance;
    }
}

/// Current particles with their cached score (and energy).
#[derive(Debug, Clone)]
pub struct ParticleState {
    pub x: Vec<Point>,
    pub score: Vec<Point>,
    pub energy: Option<Vec<f64>>,
}

impl ParticleState {
    pub fn evaluate<F: ScoreField + ?Sized>(field: &F, x: Vec<Point>, t: usize) -> Result<Self> {
        let eval = field.evaluate(&x, t)?;
        check_eval(&eval, x.len())?;
        Ok(Self {
            x,
            score: eval.score,
            energy: eval.energy,
        })
    }

    pub fn len(&self) -> usize {
        self.x.len()
    }

    pub fn is_empty(&self) -> bool {
        self.x.is_empty()
    }
}

pub(crate) fn check_eval(eval: &FieldEval, n: usize) -> Result<()> {
    if eval.score.len() != n {
        return Err(Error::SizeMismatch(eval.score.len(), n));
    }
    if let Some(e) = &eval.energy {
        if e.len() != n {
            return Err(Error::SizeMismatch(e.len(), n));
        }
    }
    Ok(())
}

/// Result of one MCMC phase.
#[derive(Debug, Clone, PartialEq)]
pub struct PhaseStats {
    /// Mean over steps and particles of the accept indicator (1 for
    /// unadjusted samplers).
    pub mean_acceptance: f64,
    pub evals: EvalCounts,
}

/// Runs `config.steps` sampler steps on every particle at diffusion step `t`.
/// HMC momenta start from fresh standard normals and persist across the
/// steps of this phase.
pub fn run_mcmc_phase<F, R>(
    field: &F,
    spec: SamplerSpec,
    batch: &mut Vec<Point>,
    t: usize,
    config: &McmcConfig,
    rng: &mut R,
) -> Result<PhaseStats>
where
    F: ScoreField + ?Sized,
    R: Rng + ?Sized,
{
    config.validate()?;
    spec.validate(config)?;
    if spec.estimator == Some(Estimator::Direct) && !field.has_energy() {
        return Err(Error::Config(
            "the direct estimator needs an energy field".into(),
        ));
    }
    if config.steps == 0 || batch.is_empty() {
        return Ok(PhaseStats {
            mean_acceptance: 1.0,
            evals: EvalCounts::default(),
        });
    }
    let n = batch.len();
    let mut state = ParticleState::evaluate(field, std::mem::take(batch), t)?;
    let mut evals = EvalCounts {
        dynamics: n,
        acceptance: 0,
    };
    let mut accepted = 0usize;
    let mut momenta: Vec<Point> = Vec::new();
    if matches!(spec.kind, SamplerKind::Uhmc | SamplerKind::Hmc) {
        let sd = config.mass.sqrt();
        momenta = (0..n)
            .map(|_| {
                let p = crate::diffusion::standard_normal_point(rng);
                [sd * p[0], sd * p[1]]
            })
            .collect();
    }
    for _ in 0..config.steps {
        let (acc, used) = match spec.kind {
            SamplerKind::Ula => ula_step(field, &mut state, t, config.la_step_size, rng)?,
            SamplerKind::Mala => mala_step(
                field,
                spec.estimator.expect("validated"),
                &mut state,
                t,
                config.la_step_size,
                rng,
            )?,
            SamplerKind::Uhmc => uhmc_step(field, &mut state, &mut momenta, t, config, rng)?,
            SamplerKind::Hmc => hmc_step(
                field,
                spec.estimator.expect("validated"),
                &mut state,
                &mut momenta,
                t,
                config,
                rng,
            )?,
        };
        accepted += acc;
        evals += used;
    }
    *batch = state.x;
    Ok(PhaseStats {
        mean_acceptance: accepted as f64 / (n * config.steps) as f64,
        evals,
    })
}

/// Renders acceptance statistics as `t,sampler,mean_acceptance` CSV.
pub fn acceptance_csv(sampler: &str, rows: &[(usize, f64)]) -> String {
    let mut out = String::from("t,sampler,mean_acceptance\n");
    for (t, a) in rows {
        out.push_str(&format!("{t},{sampler},{a}\n"));
    }
    out
}
