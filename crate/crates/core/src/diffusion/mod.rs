//! Forward corruption, the training objective, and the ancestral reverse
//! sampler.

mod schedule;

use rand::Rng;
use rand_distr::StandardNormal;

use crate::adgraph::{Graph, RealArray};
use crate::models::{DiffusionModel, NoisePredictor};
use crate::{Error, Point, Result};

pub use schedule::NoiseSchedule;

/// `sqrt(alpha_bar_t) x0 + sqrt(1 - alpha_bar_t) noise`.
pub fn q_sample(x0: Point, t: usize, noise: Point, schedule: &NoiseSchedule) -> Point {
    let a = schedule.alpha_bar(t).sqrt();
    let s = schedule.sigma(t);
    [a * x0[0] + s * noise[0], a * x0[1] + s * noise[1]]
}

pub fn standard_normal_point<R: Rng + ?Sized>(rng: &mut R) -> Point {
    [rng.sample(StandardNormal), rng.sample(StandardNormal)]
}

/// The random quantities behind one loss evaluation.
#[derive(Debug, Clone)]
pub struct LossDraw {
    pub steps: Vec<usize>,
    pub noise: Vec<Point>,
    pub noisy: Vec<Point>,
}

impl LossDraw {
    /// Per example: `t` uniform in `1..=T`, then standard normal noise.
    pub fn sample<R: Rng + ?Sized>(x0: &[Point], schedule: &NoiseSchedule, rng: &mut R) -> Self {
        let mut steps = Vec::with_capacity(x0.len());
        let mut noise = Vec::with_capacity(x0.len());
        let mut noisy = Vec::with_capacity(x0.len());
        for &x in x0 {
            let t = rng.random_range(1..=schedule.steps());
            let e = standard_normal_point(rng);
            noisy.push(q_sample(x, t, e, schedule));
            steps.push(t);
            noise.push(e);
        }
        Self {
            steps,
            noise,
            noisy,
        }
    }
}

/// Mean over the batch of `|eps - eps_pred(q_sample(x0, t, eps), t)|^2`.
pub fn diffusion_loss<P, R>(
    predictor: &P,
    x0: &[Point],
    schedule: &NoiseSchedule,
    rng: &mut R,
) -> Result<f64>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    if x0.is_empty() {
        return Err(Error::Config("empty batch".into()));
    }
    let draw = LossDraw::sample(x0, schedule, rng);
    let pred = predictor.predict_eps(&draw.noisy, &draw.steps, schedule)?;
    let total: f64 = pred
        .iter()
        .zip(&draw.noise)
        .map(|(p, e)| (p[0] - e[0]).powi(2) + (p[1] - e[1]).powi(2))
        .sum();
    Ok(total / x0.len() as f64)
}

/// Loss value and parameter gradients (layout order) for one draw.
pub fn loss_and_gradients(
    model: &DiffusionModel,
    draw: &LossDraw,
    schedule: &NoiseSchedule,
) -> Result<(f64, Vec<RealArray>)> {
    let n = draw.noisy.len();
    let mut g = Graph::new();
    let built = model.build_eps(&mut g, &draw.noisy, &draw.steps, schedule)?;
    let target = g.constant(crate::models::points_to_array(&draw.noise));
    let diff = g.sub(built.eps, target)?;
    let sq = g.sum_of_squares(diff)?;
    let loss = g.scale(sq, 1.0 / n as f64)?;
    let grads = g.gradients(loss, &built.params)?;
    let value = g.value(loss).item().expect("scalar loss");
    Ok((
        value,
        grads.into_iter().map(|id| g.value(id).clone()).collect(),
    ))
}

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub dataset_size: usize,
    pub batch_size: usize,
    pub steps: usize,
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            dataset_size: 50_000,
            batch_size: 256,
            steps: 10_000,
            learning_rate: 1e-3,
            beta1: 0.9,
            beta2: 0.999,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dataset_size == 0 || self.batch_size == 0 || self.steps == 0 {
            return Err(Error::Config("train sizes must be positive".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::Config("learning rate must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return Err(Error::Config("adam betas must lie in [0, 1)".into()));
        }
        Ok(())
    }
}

/// Adam with bias correction.
pub struct Adam {
    lr: f64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    step: i32,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
}

impl Adam {
    pub fn new(sizes: impl IntoIterator<Item = usize>, lr: f64, beta1: f64, beta2: f64) -> Self {
        let sizes: Vec<usize> = sizes.into_iter().collect();
        Self {
            lr,
            beta1,
            beta2,
            eps: 1e-8,
            step: 0,
            m: sizes.iter().map(|&n| vec![0.0; n]).collect(),
            v: sizes.iter().map(|&n| vec![0.0; n]).collect(),
        }
    }

    pub fn update(&mut self, model: &mut DiffusionModel, grads: &[RealArray]) {
        self.step += 1;
        let c1 = 1.0 - self.beta1.powi(self.step);
        let c2 = 1.0 - self.beta2.powi(self.step);
        for (i, grad) in grads.iter().enumerate() {
            let param = model.params.array_mut(i);
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (((p, &g), m), v) in param.data_mut().iter_mut().zip(grad.data()).zip(m).zip(v) {
                *m = self.beta1 * *m + (1.0 - self.beta1) * g;
                *v = self.beta2 * *v + (1.0 - self.beta2) * g * g;
                *p -= self.lr * (*m / c1) / ((*v / c2).sqrt() + self.eps);
            }
        }
    }
}

/// Trains `model` in place for `config.steps` Adam steps on minibatches
/// drawn with replacement from `dataset`. Returns the per-step loss trace.
pub fn train_model<R: Rng + ?Sized>(
    model: &mut DiffusionModel,
    dataset: &[Point],
    schedule: &NoiseSchedule,
    config: &TrainConfig,
    rng: &mut R,
    mut progress: impl FnMut(usize, f64),
) -> Result<Vec<f64>> {
    config.validate()?;
    if dataset.is_empty() {
        return Err(Error::Config("empty training set".into()));
    }
    let mut adam = Adam::new(
        model.params.iter().map(|(_, a)| a.len()),
        config.learning_rate,
        config.beta1,
        config.beta2,
    );
    let mut trace = Vec::with_capacity(config.steps);
    let mut batch = Vec::with_capacity(config.batch_size);
    for step in 0..config.steps {
        batch.clear();
        batch.extend((0..config.batch_size).map(|_| dataset[rng.random_range(0..dataset.len())]));
        let draw = LossDraw::sample(&batch, schedule, rng);
        let (loss, grads) = loss_and_gradients(model, &draw, schedule)?;
        if !loss.is_finite() {
            return Err(Error::NonFiniteLoss { step, loss });
        }
        adam.update(model, &grads);
        trace.push(loss);
        progress(step, loss);
    }
    if !model.params.all_finite() {
        return Err(Error::NonFiniteLoss {
            step: config.steps,
            loss: f64::NAN,
        });
    }
    Ok(trace)
}

/// Renders a loss trace as `step,loss` CSV.
pub fn loss_trace_csv(trace: &[f64]) -> String {
    let mut out = String::from("step,loss\n");
    for (i, l) in trace.iter().enumerate() {
        out.push_str(&format!("{i},{l}\n"));
    }
    out
}

/// Reverse mean `(x_t - beta_t/sqrt(1-alpha_bar_t) eps)/sqrt(1 - beta_t)`.
pub fn reverse_mean(x: Point, eps: Point, beta: f64, alpha_bar: f64) -> Point {
    let coef = beta / (1.0 - alpha_bar).sqrt();
    let inv_sqrt_alpha = 1.0 / (1.0 - beta).sqrt();
    [
        (x[0] - coef * eps[0]) * inv_sqrt_alpha,
        (x[1] - coef * eps[1]) * inv_sqrt_alpha,
    ]
}

/// One ancestral step `x_{t-1} = mu + sqrt(beta_tilde_t) noise`, with the
/// noise dropped at `t = 1`.
pub fn reverse_step_with(
    x: Point,
    eps: Point,
    t: usize,
    noise: Point,
    schedule: &NoiseSchedule,
) -> Point {
    let mu = reverse_mean(x, eps, schedule.beta(t), schedule.alpha_bar(t));
    let std = if t > 1 {
        schedule.posterior_variance(t).sqrt()
    } else {
        0.0
    };
    [mu[0] + std * noise[0], mu[1] + std * noise[1]]
}

/// Batched [`reverse_step_with`] using `eps_fn(x, t)` for the noise prediction.
pub fn reverse_step<F>(
    eps_fn: &F,
    xs: &[Point],
    t: usize,
    noise: &[Point],
    schedule: &NoiseSchedule,
) -> Result<Vec<Point>>
where
    F: Fn(&[Point], usize) -> Result<Vec<Point>> + ?Sized,
{
    schedule.check_step(t)?;
    let eps = eps_fn(xs, t)?;
    Ok(xs
        .iter()
        .zip(&eps)
        .zip(noise)
        .map(|((x, e), z)| reverse_step_with(*x, *e, t, *z, schedule))
        .collect())
}

/// Ancestral sampling from `x_T ~ N(0, I)`. After every step the hook gets
/// the batch at `t - 1` and may modify it in place (the MCMC phase).
pub fn reverse_sample<F, R, H>(
    eps_fn: &F,
    n: usize,
    schedule: &NoiseSchedule,
    rng: &mut R,
    mut hook: H,
) -> Result<Vec<Point>>
where
    F: Fn(&[Point], usize) -> Result<Vec<Point>> + ?Sized,
    R: Rng + ?Sized,
    H: FnMut(&mut Vec<Point>, usize) -> Result<()>,
{
    if n == 0 {
        return Err(Error::Config("sample count must be positive".into()));
    }
    let mut xs: Vec<Point> = (0..n).map(|_| standard_normal_point(rng)).collect();
    for t in (1..=schedule.steps()).rev() {
        let noise: Vec<Point> = if t > 1 {
            (0..n).map(|_| standard_normal_point(rng)).collect()
        } else {
            vec![[0.0; 2]; n]
        };
        xs = reverse_step(eps_fn, &xs, t, &noise, schedule)?;
        hook(&mut xs, t - 1)?;
    }
    Ok(xs)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::models::{ArchConfig, Parameterisation};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn q_sample_edge_cases() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let x0 = [0.3, -0.4];
        let y = q_sample(x0, 40, [0.0, 0.0], &s);
        assert_eq!(
            y,
            [s.alpha_bar(40).sqrt() * 0.3, s.alpha_bar(40).sqrt() * -0.4]
        );
        let z = q_sample([0.0, 0.0], 100, [1.2, -0.7], &s);
        assert!((z[0] - 1.2).abs() < 1e-3 && (z[1] + 0.7).abs() < 1e-3);
    }

    #[test]
    fn q_sample_covariance_monte_carlo() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let n = 100_000;
        let t = 30;
        let (mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0);
        for _ in 0..n {
            let e = standard_normal_point(&mut rng);
            let y = q_sample([0.0, 0.0], t, e, &s);
            sxx += y[0] * y[0];
            syy += y[1] * y[1];
            sxy += y[0] * y[1];
        }
        let var = 1.0 - s.alpha_bar(t);
        let nf = n as f64;
        // the variance estimator has std var*sqrt(2/n); the covariance var/sqrt(n)
        let se_var = var * (2.0 / nf).sqrt();
        let se_cov = var / nf.sqrt();
        assert!((sxx / nf - var).abs() < 3.0 * se_var);
        assert!((syy / nf - var).abs() < 3.0 * se_var);
        assert!((sxy / nf).abs() < 3.0 * se_cov);
    }

    struct TrueNoise {
        x0: Vec<Point>,
    }

    impl NoisePredictor for TrueNoise {
        fn predict_eps(
            &self,
            xs: &[Point],
            steps: &[usize],
            s: &NoiseSchedule,
        ) -> Result<Vec<Point>> {
            Ok(xs
                .iter()
                .zip(steps)
                .zip(&self.x0)
                .map(|((x, &t), x0)| {
                    let a = s.alpha_bar(t).sqrt();
                    [
                        (x[0] - a * x0[0]) / s.sigma(t),
                        (x[1] - a * x0[1]) / s.sigma(t),
                    ]
                })
                .collect())
        }
    }

    struct Zero;

    impl NoisePredictor for Zero {
        fn predict_eps(&self, xs: &[Point], _: &[usize], _: &NoiseSchedule) -> Result<Vec<Point>> {
            Ok(vec![[0.0; 2]; xs.len()])
        }
    }

    #[test]
    fn loss_with_oracle_predictors() {
        let s = NoiseSchedule::cosine(100).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x0: Vec<Point> = (0..50_000).map(|i| [(i % 7) as f64 * 0.1, -0.2]).collect();
        let l = diffusion_loss(&TrueNoise { x0: x0.clone() }, &x0, &s, &mut rng).unwrap();
        assert!(l < 1e-20, "{l}");
        let l = diffusion_loss(&Zero, &x0, &s, &mut rng).unwrap();
        // |eps|^2 ~ chi^2_2: mean 2, variance 4
        let se = (4.0 / x0.len() as f64).sqrt();
        assert!((l - 2.0).abs() < 3.0 * se, "{l}");
        assert!(diffusion_loss(&Zero, &[], &s, &mut rng).is_err());
    }

    #[test]
    fn graph_loss_matches_predictor_loss() {
        let arch = ArchConfig {
            hidden: 8,
            inner: 8,
            blocks: 1,
            time_dim: 4,
            timesteps: 20,
            ..ArchConfig::default()
        };
        let s = NoiseSchedule::cosine(20).unwrap();
        for p in [Parameterisation::Score, Parameterisation::Energy] {
            let m = DiffusionModel::new(arch.clone(), p, 4).unwrap();
            let x0 = vec![[0.1, 0.2], [-0.5, 0.3], [0.9, -0.9]];
            let mut r1 = ChaCha8Rng::seed_from_u64(2);
            let mut r2 = ChaCha8Rng::seed_from_u64(2);
            let a = diffusion_loss(&m, &x0, &s, &mut r1).unwrap();
            let draw = LossDraw::sample(&x0, &s, &mut r2);
            let (b, _) = loss_and_gradients(&m, &draw, &s).unwrap();
            assert!((a - b).abs() < 1e-12 * a.max(1.0));
            assert!(a >= 0.0);
        }
    }

    #[test]
    fn reverse_step_hand_computed() {
        let s = NoiseSchedule::cosine(100).unwrap();
        // eps = 0 and no noise divides by sqrt(alpha_t)
        let y = reverse_step_with([1.0, 2.0], [0.0, 0.0], 50, [0.0, 0.0], &s);
        let a = s.alpha(50).sqrt();
        assert!((y[0] - 1.0 / a).abs() < 1e-15 && (y[1] - 2.0 / a).abs() < 1e-15);
        // t = 1 ignores the noise argument
        let y1 = reverse_step_with([0.5, 0.5], [0.1, 0.2], 1, [9.0, -9.0], &s);
        let y2 = reverse_step_with([0.5, 0.5], [0.1, 0.2], 1, [0.0, 0.0], &s);
        assert_eq!(y1, y2);
    }

    #[test]
    fn reverse_mean_plugged_values() {
        // beta = 0.1, alpha_bar = 0.5, x = (1, 0), eps = (1, 0)
        let mu = reverse_mean([1.0, 0.0], [1.0, 0.0], 0.1, 0.5);
        assert!((mu[0] - 0.9050213548894739).abs() < 1e-14);
        assert_eq!(mu[1], 0.0);
    }

    #[test]
    fn reverse_sample_zero_eps_matches_variance_recursion() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let eps_fn =
            |xs: &[Point], _t: usize| -> Result<Vec<Point>> { Ok(vec![[0.0; 2]; xs.len()]) };
        let n = 20_000;
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut hook_calls = Vec::new();
        let out = reverse_sample(&eps_fn, n, &s, &mut rng, |xs, t| {
            hook_calls.push((xs.len(), t));
            Ok(())
        })
        .unwrap();
        assert_eq!(out.len(), n);
        assert!(out.iter().flatten().all(|v| v.is_finite()));
        assert_eq!(hook_calls.first(), Some(&(n, 9)));
        assert_eq!(hook_calls.last(), Some(&(n, 0)));

        // direct simulation of the same linear recursion, independent stream
        let mut sim_rng = ChaCha8Rng::seed_from_u64(99);
        let mut var_emp = 0.0;
        for _ in 0..n {
            let mut x: f64 = sim_rng.sample(StandardNormal);
            for t in (1..=10).rev() {
                let z: f64 = sim_rng.sample(StandardNormal);
                let sd = if t > 1 {
                    s.posterior_variance(t).sqrt()
                } else {
                    0.0
                };
                x = x / s.alpha(t).sqrt() + sd * z;
            }
            var_emp += x * x;
        }
        let sim_var = var_emp / n as f64;
        let got_var = out.iter().map(|p| p[0] * p[0]).sum::<f64>() / n as f64;
        // two independent variance estimates, each with relative se sqrt(2/n)
        let se = sim_var * (2.0 * 2.0 / n as f64).sqrt();
        assert!(
            (sim_var - got_var).abs() < 3.0 * se,
            "{sim_var} vs {got_var}"
        );
    }

    #[test]
    fn reverse_sample_is_reproducible() {
        let s = NoiseSchedule::cosine(10).unwrap();
        let eps_fn = |xs: &[Point], _t: usize| -> Result<Vec<Point>> {
            Ok(xs.iter().map(|p| [0.1 * p[0], 0.0]).collect())
        };
        let a = reverse_sample(
            &eps_fn,
            50,
            &s,
            &mut ChaCha8Rng::seed_from_u64(8),
            |_, _| Ok(()),
        )
        .unwrap();
        let b = reverse_sample(
            &eps_fn,
            50,
            &s,
            &mut ChaCha8Rng::seed_from_u64(8),
            |_, _| Ok(()),
        )
        .unwrap();
        assert_eq!(a, b);
    }
}
