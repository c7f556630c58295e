//! Training, sampling and evaluation jobs and their on-disk layout.

use std::fmt;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Instant;

use rand::Rng;

use super::report::{parse_points_csv, points_csv};
use super::{ExperimentConfig, GridEntry};
use crate::composition::{ComponentModel, ComposedField, CompositionSpec};
use crate::diffusion::{loss_trace_csv, reverse_sample, train_model, NoiseSchedule};
use crate::metrics::{gmm_cov_metric, ll_metric, w2_metric, EmConfig, MetricReport};
use crate::models::{load_checkpoint, save_checkpoint, DiffusionModel, Parameterisation};
use crate::rng::{name_key, Stream};
use crate::samplers::{acceptance_csv, run_mcmc_phase, EvalCounts, McmcConfig};
use crate::targets::{sample_true_product, BarUniform, CircleGmm, ProductTarget};
use crate::{Error, Point, Result};

/// The two factors of the product.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Component {
    Gmm,
    Bar,
}

impl Component {
    pub const ALL: [Component; 2] = [Component::Gmm, Component::Bar];

    pub fn name(self) -> &'static str {
        match self {
            Component::Gmm => "gmm",
            Component::Bar => "bar",
        }
    }

    fn index(self) -> u64 {
        match self {
            Component::Gmm => 0,
            Component::Bar => 1,
        }
    }

    pub fn sample<R: Rng + ?Sized>(self, n: usize, rng: &mut R) -> Vec<Point> {
        match self {
            Component::Gmm => CircleGmm::default().sample(n, rng),
            Component::Bar => BarUniform::default().sample(n, rng),
        }
    }
}

impl fmt::Display for Component {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

fn param_index(p: Parameterisation) -> u64 {
    match p {
        Parameterisation::Score => 0,
        Parameterisation::Energy => 1,
    }
}

/// File locations under an output directory.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    root: PathBuf,
}

impl Layout {
    pub fn new(root: &Path) -> Self {
        Self {
            root: root.to_path_buf(),
        }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }

    pub fn run_dir(&self, run: usize) -> PathBuf {
        self.root.join(format!("run_{run:02}"))
    }

    pub fn checkpoint(&self, run: usize, p: Parameterisation, c: Component) -> PathBuf {
        self.run_dir(run)
            .join("models")
            .join(format!("{p}_{c}.ckpt"))
    }

    pub fn loss_trace(&self, run: usize, p: Parameterisation, c: Component) -> PathBuf {
        self.run_dir(run)
            .join("models")
            .join(format!("{p}_{c}_loss.csv"))
    }

    pub fn samples(&self, run: usize, entry: &GridEntry) -> PathBuf {
        self.run_dir(run)
            .join("samples")
            .join(format!("{}.csv", entry.slug()))
    }

    pub fn stats(&self, run: usize, entry: &GridEntry) -> PathBuf {
        self.run_dir(run)
            .join("samples")
            .join(format!("{}.stats", entry.slug()))
    }

    pub fn acceptance(&self, run: usize, entry: &GridEntry) -> PathBuf {
        self.run_dir(run)
            .join("acceptance")
            .join(format!("{}.csv", entry.slug()))
    }

    pub fn reference(&self, run: usize) -> PathBuf {
        self.run_dir(run).join("reference.csv")
    }

    pub fn results(&self) -> PathBuf {
        self.root.join("results.csv")
    }

    pub fn table_csv(&self) -> PathBuf {
        self.root.join("table1.csv")
    }

    pub fn table_text(&self) -> PathBuf {
        self.root.join("table1.txt")
    }

    pub fn config(&self) -> PathBuf {
        self.root.join("config.txt")
    }
}

/// Writes via a temporary sibling and a rename.
pub fn write_atomic(path: &Path, contents: &[u8]) -> Result<()> {
    let io = |source| Error::Io {
        path: path.to_path_buf(),
        source,
    };
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(io)?;
    }
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    std::fs::write(&tmp, contents).map_err(io)?;
    std::fs::rename(&tmp, path).map_err(io)
}

fn read_text(path: &Path) -> Result<String> {
    std::fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })
}

/// Trains the models of run `run` that are not on disk yet. Returns the
/// checkpoint paths.
pub fn train_run(cfg: &ExperimentConfig, run: usize) -> Result<Vec<PathBuf>> {
    cfg.validate()?;
    let layout = cfg.layout();
    let schedule = cfg.schedule()?;
    let seed = cfg.run_seed(run);
    let mut written = Vec::new();
    for c in Component::ALL {
        let mut data_rng = Stream::TrainData {
            component: c.index(),
        }
        .rng(seed);
        let data = c.sample(cfg.train.dataset_size, &mut data_rng);
        for p in cfg.parameterisations() {
            let path = layout.checkpoint(run, p, c);
            if path.exists() && load_checkpoint(&path).is_ok() {
                log::info!("run {run}: {} exists, skipping", path.display());
                written.push(path);
                continue;
            }
            let ids = (c.index(), param_index(p));
            let init_seed: u64 = Stream::Init {
                component: ids.0,
                parameterisation: ids.1,
            }
            .rng(seed)
            .random();
            let mut rng = Stream::Train {
                component: ids.0,
                parameterisation: ids.1,
            }
            .rng(seed);
            let mut model = DiffusionModel::new(cfg.model_arch(), p, init_seed)?;
            let started = Instant::now();
            let every = (cfg.train.steps / 10).max(1);
            let trace = train_model(
                &mut model,
                &data,
                &schedule,
                &cfg.train,
                &mut rng,
                |step, loss| {
                    if (step + 1) % every == 0 {
                        log::info!("run {run} {p}/{c}: step {} loss {loss:.4}", step + 1);
                    }
                },
            )?;
            log::info!(
                "run {run} {p}/{c}: trained in {:.0}s",
                started.elapsed().as_secs_f64()
            );
            write_atomic(
                &layout.loss_trace(run, p, c),
                loss_trace_csv(&trace).as_bytes(),
            )?;
            save_checkpoint(&model, &path)?;
            written.push(path);
        }
    }
    Ok(written)
}

/// Product (or other configured composition) of the run's trained models.
pub fn load_composition(
    cfg: &ExperimentConfig,
    run: usize,
    p: Parameterisation,
) -> Result<CompositionSpec> {
    let layout = cfg.layout();
    let mut models: Vec<Arc<dyn ComponentModel>> = Vec::new();
    for c in Component::ALL {
        let model = load_checkpoint(&layout.checkpoint(run, p, c))?;
        if model.parameterisation != p {
            return Err(Error::WrongParameterisation {
                expected: p,
                found: model.parameterisation,
            });
        }
        models.push(Arc::new(model));
    }
    CompositionSpec::new(cfg.composition, models)
}

/// Cost accounting for one sampled entry.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EntryStats {
    pub samples: usize,
    /// Point evaluations of the reverse process.
    pub reverse_evals: usize,
    pub evals: EvalCounts,
    pub seconds: f64,
}

impl EntryStats {
    pub fn to_text(&self) -> String {
        format!(
            "samples={}\nreverse_evals={}\ndynamics_evals={}\nacceptance_evals={}\nseconds={:.3}\n",
            self.samples,
            self.reverse_evals,
            self.evals.dynamics,
            self.evals.acceptance,
            self.seconds
        )
    }

    pub fn parse(text: &str) -> Result<Self> {
        let mut s = EntryStats {
            samples: 0,
            reverse_evals: 0,
            evals: EvalCounts::default(),
            seconds: 0.0,
        };
        for (i, line) in text.lines().enumerate() {
            let err = |msg: String| Error::Parse { line: i + 1, msg };
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| err(format!("expected key=value, found `{line}`")))?;
            let int = || {
                v.parse::<usize>()
                    .map_err(|_| err(format!("bad value `{v}`")))
            };
            match k {
                "samples" => s.samples = int()?,
                "reverse_evals" => s.reverse_evals = int()?,
                "dynamics_evals" => s.evals.dynamics = int()?,
                "acceptance_evals" => s.evals.acceptance = int()?,
                "seconds" => s.seconds = v.parse().map_err(|_| err(format!("bad value `{v}`")))?,
                _ => return Err(err(format!("unknown key `{k}`"))),
            }
        }
        Ok(s)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SampleOutcome {
    pub samples: Vec<Point>,
    /// `(t, mean acceptance)` per MCMC phase.
    pub acceptance: Vec<(usize, f64)>,
    pub stats: EntryStats,
}

/// Reverse diffusion of `spec` with the MCMC phase of `entry` after every
/// step. Streams are keyed by `seed` and the entry name.
pub fn sample_composition(
    spec: &CompositionSpec,
    schedule: &NoiseSchedule,
    entry: &GridEntry,
    mcmc: &McmcConfig,
    n: usize,
    mcmc_at_final: bool,
    seed: u64,
) -> Result<SampleOutcome> {
    let started = Instant::now();
    let key = name_key(&entry.to_string());
    let mut rng = Stream::Sample { entry: key }.rng(seed);
    let mut mcmc_rng = Stream::Mcmc { entry: key }.rng(seed);
    let reverse_evals = AtomicUsize::new(0);
    let eps_fn = |xs: &[Point], t: usize| {
        reverse_evals.fetch_add(xs.len(), Ordering::Relaxed);
        spec.evaluate(xs, t, schedule).map(|o| o.eps)
    };
    let mut acceptance = Vec::new();
    let mut evals = EvalCounts::default();
    let samples = reverse_sample(&eps_fn, n, schedule, &mut rng, |batch, s| {
        let Some(sampler) = entry.sampler else {
            return Ok(());
        };
        let field = ComposedField::new(spec, schedule);
        let stats = if s >= 1 {
            run_mcmc_phase(&field, sampler, batch, s, mcmc, &mut mcmc_rng)?
        } else if mcmc_at_final {
            run_mcmc_phase(&field.at_step(1), sampler, batch, 0, mcmc, &mut mcmc_rng)?
        } else {
            return Ok(());
        };
        acceptance.push((s, stats.mean_acceptance));
        evals += stats.evals;
        Ok(())
    })?;
    if samples
        .iter()
        .any(|p| !p[0].is_finite() || !p[1].is_finite())
    {
        return Err(Error::Config(format!(
            "`{entry}` produced non-finite samples"
        )));
    }
    Ok(SampleOutcome {
        samples,
        acceptance,
        stats: EntryStats {
            samples: n,
            reverse_evals: reverse_evals.into_inner(),
            evals,
            seconds: started.elapsed().as_secs_f64(),
        },
    })
}

/// Samples one grid entry of one run from its checkpoints and writes the
/// samples, acceptance trace and stats.
pub fn sample_entry(
    cfg: &ExperimentConfig,
    run: usize,
    entry: &GridEntry,
) -> Result<SampleOutcome> {
    entry.validate(&cfg.mcmc)?;
    let layout = cfg.layout();
    let spec = load_composition(cfg, run, entry.parameterisation)?;
    let schedule = cfg.schedule()?;
    let out = sample_composition(
        &spec,
        &schedule,
        entry,
        &cfg.mcmc,
        cfg.samples,
        cfg.mcmc_at_final,
        cfg.run_seed(run),
    )?;
    write_atomic(
        &layout.samples(run, entry),
        points_csv(&out.samples).as_bytes(),
    )?;
    write_atomic(
        &layout.acceptance(run, entry),
        acceptance_csv(&entry.sampler_name(), &out.acceptance).as_bytes(),
    )?;
    write_atomic(&layout.stats(run, entry), out.stats.to_text().as_bytes())?;
    log::info!(
        "run {run} {entry}: {:.0}s, {} dynamics + {} acceptance evaluations",
        out.stats.seconds,
        out.stats.evals.dynamics,
        out.stats.evals.acceptance
    );
    Ok(out)
}

/// Samples several entries, `cfg.jobs` at a time. Results keep the input
/// order.
pub fn sample_entries(
    cfg: &ExperimentConfig,
    run: usize,
    entries: &[GridEntry],
) -> Vec<Result<SampleOutcome>> {
    let next = AtomicUsize::new(0);
    let results: Mutex<Vec<Option<Result<SampleOutcome>>>> =
        Mutex::new((0..entries.len()).map(|_| None).collect());
    std::thread::scope(|scope| {
        for _ in 0..cfg.jobs.min(entries.len()).max(1) {
            scope.spawn(|| loop {
                let i = next.fetch_add(1, Ordering::SeqCst);
                if i >= entries.len() {
                    break;
                }
                let r = sample_entry(cfg, run, &entries[i]);
                results.lock().expect("no panics while holding the lock")[i] = Some(r);
            });
        }
    });
    results
        .into_inner()
        .expect("workers finished")
        .into_iter()
        .map(|r| r.expect("every entry visited"))
        .collect()
}

/// Exact samples of the true product for run `run`; written to the layout.
pub fn reference_samples(cfg: &ExperimentConfig, run: usize) -> Result<Vec<Point>> {
    let mut rng = Stream::Reference.rng(cfg.run_seed(run));
    let (xs, _) = sample_true_product(
        &CircleGmm::default(),
        &BarUniform::default(),
        cfg.samples,
        &mut rng,
    )?;
    write_atomic(&cfg.layout().reference(run), points_csv(&xs).as_bytes())?;
    Ok(xs)
}

/// Metrics for every grid entry of a run whose samples exist. Entries
/// without a sample file are returned separately.
pub fn evaluate_run(
    cfg: &ExperimentConfig,
    run: usize,
) -> Result<(Vec<MetricReport>, Vec<GridEntry>)> {
    let layout = cfg.layout();
    let reference = reference_samples(cfg, run)?;
    let target = ProductTarget::default();
    let em = EmConfig::default();
    let mut reports = Vec::new();
    let mut missing = Vec::new();
    for entry in &cfg.grid {
        let path = layout.samples(run, entry);
        if !path.exists() {
            missing.push(*entry);
            continue;
        }
        let samples = parse_points_csv(&read_text(&path)?)?;
        if samples.len() != reference.len() {
            return Err(Error::SizeMismatch(samples.len(), reference.len()));
        }
        let ll = ll_metric(&samples, &target)?;
        reports.push(MetricReport {
            run_id: run,
            parameterisation: entry.parameterisation.to_string(),
            sampler: entry.sampler_name(),
            estimator: entry.estimator_label().to_string(),
            points: entry.mesh_points(),
            path: entry.path_label().to_string(),
            ll: ll.mean,
            w2: w2_metric(&samples, &reference, cfg.w2_convention)?,
            gmm: gmm_cov_metric(&samples, &reference, &em)?,
            oos_count: ll.out_of_support,
        });
    }
    Ok((reports, missing))
}
