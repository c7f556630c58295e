//! Weighted compositions of diffusion models.
//!
//! A composition with weights `w_i` has energy `sum_i w_i E_i` and score
//! `sum_i w_i score_i`, so the composed noise prediction is
//! `sum_i w_i eps_i`. A product uses unit weights; a negation gives one
//! component the weight `-gamma`.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use crate::diffusion::NoiseSchedule;
use crate::models::{DiffusionModel, ModelOutput, Parameterisation};
use crate::samplers::{line_energy_diff, FieldEval, ScoreField};
use crate::{Error, Point, Result};

/// Anything that can act as one factor of a composition.
pub trait ComponentModel: Send + Sync {
    fn parameterisation(&self) -> Parameterisation;
    fn timesteps(&self) -> usize;
    fn evaluate(&self, xs: &[Point], t: usize, schedule: &NoiseSchedule) -> Result<ModelOutput>;
}

impl ComponentModel for DiffusionModel {
    fn parameterisation(&self) -> Parameterisation {
        self.parameterisation
    }

    fn timesteps(&self) -> usize {
        self.arch.timesteps
    }

    fn evaluate(&self, xs: &[Point], t: usize, schedule: &NoiseSchedule) -> Result<ModelOutput> {
        DiffusionModel::evaluate(self, xs, t, schedule)
    }
}

/// Isotropic Gaussian `N(mean, var I)` posing as a model at every step:
/// `eps = sigma_t (x - mean) / var`, `E = |x - mean|^2 / (2 var)`.
#[derive(Debug, Clone, PartialEq)]
pub struct GaussianComponent {
    pub mean: Point,
    pub var: f64,
    pub parameterisation: Parameterisation,
    pub timesteps: usize,
}

impl ComponentModel for GaussianComponent {
    fn parameterisation(&self) -> Parameterisation {
        self.parameterisation
    }

    fn timesteps(&self) -> usize {
        self.timesteps
    }

    fn evaluate(&self, xs: &[Point], t: usize, schedule: &NoiseSchedule) -> Result<ModelOutput> {
        schedule.check_step(t)?;
        let sigma = schedule.sigma(t);
        let eps = xs
            .iter()
            .map(|x| {
                [
                    sigma * (x[0] - self.mean[0]) / self.var,
                    sigma * (x[1] - self.mean[1]) / self.var,
                ]
            })
            .collect();
        let energy = (self.parameterisation == Parameterisation::Energy).then(|| {
            xs.iter()
                .map(|x| {
                    let d = [x[0] - self.mean[0], x[1] - self.mean[1]];
                    (d[0] * d[0] + d[1] * d[1]) / (2.0 * self.var)
                })
                .collect()
        });
        Ok(ModelOutput { eps, energy })
    }
}

/// How components are combined.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum CompositionKind {
    Product,
    /// `p_0 * p_1^(-gamma)`.
    Negation {
        gamma: f64,
    },
    Mixture,
}

impl fmt::Display for CompositionKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CompositionKind::Product => f.write_str("product"),
            CompositionKind::Negation { gamma } => write!(f, "negation:{gamma}"),
            CompositionKind::Mixture => f.write_str("mixture"),
        }
    }
}

impl FromStr for CompositionKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "product" => Ok(CompositionKind::Product),
            "mixture" => Ok(CompositionKind::Mixture),
            "negation" => Ok(CompositionKind::Negation { gamma: 1.0 }),
            _ => match s.strip_prefix("negation:") {
                Some(g) => g
                    .parse()
                    .map(|gamma| CompositionKind::Negation { gamma })
                    .map_err(|_| Error::Config(format!("bad negation exponent in `{s}`"))),
                None => Err(Error::Config(format!("unknown composition `{s}`"))),
            },
        }
    }
}

/// Weighted set of components sharing one noise schedule.
#[derive(Clone)]
pub struct CompositionSpec {
    components: Vec<(Arc<dyn ComponentModel>, f64)>,
}

impl fmt::Debug for CompositionSpec {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CompositionSpec")
            .field("weights", &self.weights())
            .field("all_energy", &self.all_energy())
            .finish()
    }
}

impl CompositionSpec {
    pub fn weighted(components: Vec<(Arc<dyn ComponentModel>, f64)>) -> Result<Self> {
        if components.is_empty() {
            return Err(Error::Composition("no components".into()));
        }
        if !components.iter().any(|(_, w)| *w > 0.0) {
            return Err(Error::Composition(
                "at least one weight must be positive".into(),
            ));
        }
        if let Some((_, w)) = components.iter().find(|(_, w)| !w.is_finite()) {
            return Err(Error::Composition(format!("weight {w} is not finite")));
        }
        let steps = components[0].0.timesteps();
        if let Some((c, _)) = components.iter().find(|(c, _)| c.timesteps() != steps) {
            return Err(Error::ScheduleMismatch(format!(
                "components have T={steps} and T={}",
                c.timesteps()
            )));
        }
        Ok(Self { components })
    }

    pub fn product(models: Vec<Arc<dyn ComponentModel>>) -> Result<Self> {
        Self::weighted(models.into_iter().map(|m| (m, 1.0)).collect())
    }

    /// Builds the composition of `kind`. Mixtures are not supported.
    pub fn new(kind: CompositionKind, models: Vec<Arc<dyn ComponentModel>>) -> Result<Self> {
        match kind {
            CompositionKind::Product => Self::product(models),
            CompositionKind::Negation { gamma } => {
                if models.len() != 2 {
                    return Err(Error::Composition(format!(
                        "negation needs 2 components, got {}",
                        models.len()
                    )));
                }
                let mut it = models.into_iter();
                let (base, negated) = (it.next().unwrap(), it.next().unwrap());
                Self::weighted(vec![(base, 1.0), (negated, -gamma)])
            }
            CompositionKind::Mixture => Err(Error::Composition(
                "mixtures cannot be sampled through summed scores".into(),
            )),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.components.iter().map(|(_, w)| *w).collect()
    }

    pub fn len(&self) -> usize {
        self.components.len()
    }

    pub fn is_empty(&self) -> bool {
        self.components.is_empty()
    }

    pub fn timesteps(&self) -> usize {
        self.components[0].0.timesteps()
    }

    /// True when every component exposes an energy.
    pub fn all_energy(&self) -> bool {
        self.components
            .iter()
            .all(|(c, _)| c.parameterisation() == Parameterisation::Energy)
    }

    /// Same components with every weight multiplied by `factor`.
    pub fn scaled(&self, factor: f64) -> Result<Self> {
        Self::weighted(
            self.components
                .iter()
                .map(|(c, w)| (Arc::clone(c), w * factor))
                .collect(),
        )
    }

    /// `sum_i w_i eps_i` and, for all-energy specs, `sum_i w_i E_i`.
    pub fn evaluate(
        &self,
        xs: &[Point],
        t: usize,
        schedule: &NoiseSchedule,
    ) -> Result<ModelOutput> {
        if schedule.steps() != self.timesteps() {
            return Err(Error::ScheduleMismatch(format!(
                "composition has T={} but schedule has T={}",
                self.timesteps(),
                schedule.steps()
            )));
        }
        let all_energy = self.all_energy();
        let mut eps = vec![[0.0; 2]; xs.len()];
        let mut energy = all_energy.then(|| vec![0.0; xs.len()]);
        for (c, w) in &self.components {
            let out = c.evaluate(xs, t, schedule)?;
            if out.eps.len() != xs.len() {
                return Err(Error::SizeMismatch(xs.len(), out.eps.len()));
            }
            for (acc, e) in eps.iter_mut().zip(&out.eps) {
                acc[0] += w * e[0];
                acc[1] += w * e[1];
            }
            if let Some(total) = energy.as_mut() {
                let ce = out.energy.ok_or_else(|| {
                    Error::Composition("energy component returned no energy".into())
                })?;
                for (acc, e) in total.iter_mut().zip(ce) {
                    *acc += w * e;
                }
            }
        }
        Ok(ModelOutput { eps, energy })
    }
}

/// Composed noise prediction `sum_i w_i eps_i(x, t)`.
pub fn composed_eps(
    spec: &CompositionSpec,
    xs: &[Point],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<Vec<Point>> {
    Ok(spec.evaluate(xs, t, schedule)?.eps)
}

/// Estimate of `log p(end) - log p(start)` for the composition: exact
/// energy difference when every component has an energy, otherwise the
/// trapezoid integral of the composed score along `path`.
pub fn composed_energy_diff(
    spec: &CompositionSpec,
    path: &[Point],
    t: usize,
    schedule: &NoiseSchedule,
) -> Result<f64> {
    if path.len() < 2 {
        return Err(Error::Path(format!(
            "a path needs at least 2 points, got {}",
            path.len()
        )));
    }
    let field = ComposedField::new(spec, schedule);
    if spec.all_energy() {
        let ends = [path[0], path[path.len() - 1]];
        let e = spec
            .evaluate(&ends, t, schedule)?
            .energy
            .expect("all-energy spec");
        return Ok(e[0] - e[1]);
    }
    line_energy_diff(&field, path, t)
}

/// Score field `-eps/sigma_t` of a composition, with energies when every
/// component has one.
#[derive(Debug, Clone, Copy)]
pub struct ComposedField<'a> {
    spec: &'a CompositionSpec,
    schedule: &'a NoiseSchedule,
    step_override: Option<usize>,
}

impl<'a> ComposedField<'a> {
    pub fn new(spec: &'a CompositionSpec, schedule: &'a NoiseSchedule) -> Self {
        Self {
            spec,
            schedule,
            step_override: None,
        }
    }

    /// Evaluates the models at step `t` whatever step the sampler asks for.
    pub fn at_step(mut self, t: usize) -> Self {
        self.step_override = Some(t);
        self
    }
}

impl ScoreField for ComposedField<'_> {
    fn evaluate(&self, points: &[Point], t: usize) -> Result<FieldEval> {
        let t = self.step_override.unwrap_or(t);
        let out = self.spec.evaluate(points, t, self.schedule)?;
        let inv = -1.0 / self.schedule.sigma(t);
        Ok(FieldEval {
            score: out.eps.iter().map(|e| [inv * e[0], inv * e[1]]).collect(),
            energy: out.energy,
        })
    }

    fn has_energy(&self) -> bool {
        self.spec.all_energy()
    }
}
