//! Per-step diffusion constants.

use crate::{Error, Result};

const COSINE_OFFSET: f64 = 0.008;
const MAX_BETA: f64 = 0.999;

/// Constants for steps `t = 0..=T`; index 0 holds the clean-data values
/// (`alpha_bar = 1`, `beta = 0`).
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    steps: usize,
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    posterior_variances: Vec<f64>,
    sigmas: Vec<f64>,
}

impl NoiseSchedule {
    /// Cosine schedule: `alpha_bar(t) = f(t)/f(0)` with
    /// `f(t) = cos^2(((t/T + s)/(1 + s)) * pi/2)`, `s = 0.008`, and each beta
    /// clipped to at most 0.999. The cumulative products are rebuilt from the
    /// clipped betas so `alpha_bar_t = alpha_bar_{t-1} * alpha_t` holds exactly.
    pub fn cosine(steps: usize) -> Result<Self> {
        if steps == 0 {
            return Err(Error::Config("schedule needs at least one step".into()));
        }
        let f = |t: usize| {
            let phase = ((t as f64 / steps as f64 + COSINE_OFFSET) / (1.0 + COSINE_OFFSET))
                * std::f64::consts::FRAC_PI_2;
            phase.cos().powi(2)
        };
        let f0 = f(0);
        let mut betas = vec![0.0; steps + 1];
        let mut alphas = vec![1.0; steps + 1];
        let mut alpha_bars = vec![1.0; steps + 1];
        for t in 1..=steps {
            let closed_prev = f(t - 1) / f0;
            let closed = f(t) / f0;
            let beta = (1.0 - closed / closed_prev).min(MAX_BETA);
            betas[t] = beta;
            alphas[t] = 1.0 - beta;
            alpha_bars[t] = alpha_bars[t - 1] * alphas[t];
        }
        let mut posterior_variances = vec![0.0; steps + 1];
        let mut sigmas = vec![0.0; steps + 1];
        for t in 1..=steps {
            posterior_variances[t] = betas[t] * (1.0 - alpha_bars[t - 1]) / (1.0 - alpha_bars[t]);
            sigmas[t] = (1.0 - alpha_bars[t]).sqrt();
        }
        Ok(Self {
            steps,
            betas,
            alphas,
            alpha_bars,
            posterior_variances,
            sigmas,
        })
    }

    /// Identifier recorded in checkpoints.
    pub fn identifier(&self) -> String {
        format!("cosine(T={},s={})", self.steps, COSINE_OFFSET)
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.betas[t]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alphas[t]
    }

    pub fn alpha_bar(&self, t: usize) -> f64 {
        self.alpha_bars[t]
    }

    /// Reverse-process variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> f64 {
        self.posterior_variances[t]
    }

    /// `sqrt(1 - alpha_bar_t)`, the noise scale linking eps and the score.
    pub fn sigma(&self, t: usize) -> f64 {
        self.sigmas[t]
    }

    pub fn check_step(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.steps {
            return Err(Error::StepOutOfRange {
                t,
                steps: self.steps,
            });
        }
        Ok(())
    }
}
