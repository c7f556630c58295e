//! Experiment configuration, the sampler grid and run orchestration.
//!
//! Config files are flat `key=value` lines; `#` starts a comment. Keys:
//!
//! ```text
//! seed=0                 master seed; run r uses seed + r
//! runs=10
//! samples=2000
//! timesteps=100
//! out=results/default
//! grid=score:Reverse,score:HMC-5-line,energy:HMC,...
//! w2_convention=sum      sum | mean
//! mcmc_at_final=false    also run MCMC after the last reverse step
//! jobs=1                 grid entries sampled concurrently
//! composition=product    product | negation[:gamma]
//! mcmc.steps=10  mcmc.leapfrogs=3  mcmc.hmc_step_size=0.03
//! mcmc.damping=0.5  mcmc.mass=1  mcmc.la_step_size=0.001
//! train.dataset_size=50000  train.batch_size=256  train.steps=10000
//! train.learning_rate=0.001  train.beta1=0.9  train.beta2=0.999
//! arch.hidden=128  arch.inner=256  arch.blocks=4  arch.time_dim=32
//! arch.time_bias=true  arch.norm_eps=1e-5
//! ```

mod report;
mod run;

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::composition::CompositionKind;
use crate::diffusion::{NoiseSchedule, TrainConfig};
use crate::metrics::W2Convention;
use crate::models::{ArchConfig, Parameterisation};
use crate::samplers::{Estimator, McmcConfig, PathKind, SamplerSpec};
use crate::{Error, Result};

pub use report::{
    aggregate, parse_points_csv, points_csv, read_results_csv, results_csv, scatter_svg, table_csv,
    table_text, Aggregate, Summary,
};
pub use run::{
    evaluate_run, load_composition, reference_samples, sample_composition, sample_entries,
    sample_entry, train_run, write_atomic, Component, EntryStats, Layout, SampleOutcome,
};

/// One row of the sampler grid: a parameterisation and a sampler, or the
/// plain reverse process when `sampler` is `None`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct GridEntry {
    pub parameterisation: Parameterisation,
    pub sampler: Option<SamplerSpec>,
}

impl GridEntry {
    /// Name of the sampler column, e.g. `Reverse`, `HMC-5-line`, `LA`.
    pub fn sampler_name(&self) -> String {
        self.sampler
            .map_or_else(|| "Reverse".to_string(), |s| s.to_string())
    }

    /// File-name-safe identifier.
    pub fn slug(&self) -> String {
        format!("{}_{}", self.parameterisation, self.sampler_name())
    }

    /// `none`, `direct` or `line`.
    pub fn estimator_label(&self) -> &'static str {
        match self.sampler.and_then(|s| s.estimator) {
            None => "none",
            Some(Estimator::Direct) => "direct",
            Some(Estimator::LineIntegral { .. }) => "line",
        }
    }

    pub fn mesh_points(&self) -> Option<usize> {
        match self.sampler.and_then(|s| s.estimator) {
            Some(Estimator::LineIntegral { points, .. }) => Some(points),
            _ => None,
        }
    }

    pub fn path_label(&self) -> &'static str {
        match self.sampler.and_then(|s| s.estimator) {
            Some(Estimator::LineIntegral {
                path: PathKind::StraightLine,
                ..
            }) => "line",
            Some(Estimator::LineIntegral {
                path: PathKind::LeapfrogCurve,
                ..
            }) => "curve",
            _ => "",
        }
    }

    pub fn validate(&self, mcmc: &McmcConfig) -> Result<()> {
        if let Some(s) = self.sampler {
            s.validate(mcmc)?;
            if s.estimator == Some(Estimator::Direct)
                && self.parameterisation != Parameterisation::Energy
            {
                return Err(Error::Config(format!(
                    "`{self}`: the direct estimator needs energy models"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for GridEntry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.parameterisation, self.sampler_name())
    }
}

impl FromStr for GridEntry {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (p, sampler) = s.trim().split_once(':').ok_or_else(|| {
            Error::Config(format!(
                "grid entry `{s}` is not `parameterisation:sampler`"
            ))
        })?;
        let parameterisation = p.parse()?;
        let sampler = if sampler == "Reverse" {
            None
        } else {
            Some(sampler.parse()?)
        };
        Ok(Self {
            parameterisation,
            sampler,
        })
    }
}

/// The 15 rows of the results table.
pub fn default_grid() -> Vec<GridEntry> {
    [
        "energy:Reverse",
        "energy:U-LA",
        "energy:LA",
        "energy:U-HMC",
        "energy:HMC",
        "score:Reverse",
        "score:U-LA",
        "score:LA-3-line",
        "score:LA-5-line",
        "score:LA-10-line",
        "score:U-HMC",
        "score:HMC-3-line",
        "score:HMC-4-curve",
        "score:HMC-5-line",
        "score:HMC-10-line",
    ]
    .iter()
    .map(|s| s.parse().expect("default grid entries are valid"))
    .collect()
}

pub fn parse_grid(s: &str) -> Result<Vec<GridEntry>> {
    let grid: Vec<GridEntry> = s
        .split(',')
        .filter(|e| !e.trim().is_empty())
        .map(str::parse)
        .collect::<Result<_>>()?;
    if grid.is_empty() {
        return Err(Error::Config("empty grid".into()));
    }
    Ok(grid)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub runs: usize,
    pub samples: usize,
    pub timesteps: usize,
    pub out_dir: PathBuf,
    pub grid: Vec<GridEntry>,
    pub w2_convention: W2Convention,
    pub mcmc_at_final: bool,
    pub jobs: usize,
    pub composition: CompositionKind,
    pub mcmc: McmcConfig,
    pub train: TrainConfig,
    pub arch: ArchConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            runs: 10,
            samples: 2000,
            timesteps: 100,
            out_dir: PathBuf::from("results/default"),
            grid: default_grid(),
            w2_convention: W2Convention::Sum,
            mcmc_at_final: false,
            jobs: 1,
            composition: CompositionKind::Product,
            mcmc: McmcConfig::default(),
            train: TrainConfig::default(),
            arch: ArchConfig::default(),
        }
    }
}

fn parse_value<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| Error::Config(format!("bad value `{value}` for `{key}`")))
}

impl ExperimentConfig {
    /// Defaults overridden by the `key=value` lines of `text`.
    pub fn parse(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| Error::Parse {
                line: i + 1,
                msg: format!("expected key=value, found `{line}`"),
            })?;
            cfg.set(k.trim(), v.trim()).map_err(|e| Error::Parse {
                line: i + 1,
                msg: e.to_string(),
            })?;
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        Self::parse(&text)
    }

    /// Sets one key.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse_value(key, value)?,
            "runs" => self.runs = parse_value(key, value)?,
            "samples" => self.samples = parse_value(key, value)?,
            "timesteps" => self.timesteps = parse_value(key, value)?,
            "out" => self.out_dir = PathBuf::from(value),
            "grid" => self.grid = parse_grid(value)?,
            "w2_convention" => self.w2_convention = value.parse()?,
            "mcmc_at_final" => self.mcmc_at_final = parse_value(key, value)?,
            "jobs" => self.jobs = parse_value(key, value)?,
            "composition" => self.composition = value.parse()?,
            "mcmc.steps" => self.mcmc.steps = parse_value(key, value)?,
            "mcmc.leapfrogs" => self.mcmc.leapfrogs = parse_value(key, value)?,
            "mcmc.hmc_step_size" => self.mcmc.hmc_step_size = parse_value(key, value)?,
            "mcmc.damping" => self.mcmc.damping = parse_value(key, value)?,
            "mcmc.mass" => self.mcmc.mass = parse_value(key, value)?,
            "mcmc.la_step_size" => self.mcmc.la_step_size = parse_value(key, value)?,
            "train.dataset_size" => self.train.dataset_size = parse_value(key, value)?,
            "train.batch_size" => self.train.batch_size = parse_value(key, value)?,
            "train.steps" => self.train.steps = parse_value(key, value)?,
            "train.learning_rate" => self.train.learning_rate = parse_value(key, value)?,
            "train.beta1" => self.train.beta1 = parse_value(key, value)?,
            "train.beta2" => self.train.beta2 = parse_value(key, value)?,
            "arch.hidden" => self.arch.hidden = parse_value(key, value)?,
            "arch.inner" => self.arch.inner = parse_value(key, value)?,
            "arch.blocks" => self.arch.blocks = parse_value(key, value)?,
            "arch.time_dim" => self.arch.time_dim = parse_value(key, value)?,
            "arch.time_bias" => self.arch.time_bias = parse_value(key, value)?,
            "arch.norm_eps" => self.arch.norm_eps = parse_value(key, value)?,
            other => return Err(Error::Config(format!("unknown key `{other}`"))),
        }
        Ok(())
    }

    /// The resolved configuration in the file format.
    pub fn to_text(&self) -> String {
        let grid: Vec<String> = self.grid.iter().map(|g| g.to_string()).collect();
        let lines = [
            format!("seed={}", self.seed),
            format!("runs={}", self.runs),
            format!("samples={}", self.samples),
            format!("timesteps={}", self.timesteps),
            format!("out={}", self.out_dir.display()),
            format!("grid={}", grid.join(",")),
            format!("w2_convention={}", self.w2_convention),
            format!("mcmc_at_final={}", self.mcmc_at_final),
            format!("jobs={}", self.jobs),
            format!("composition={}", self.composition),
            format!("mcmc.steps={}", self.mcmc.steps),
            format!("mcmc.leapfrogs={}", self.mcmc.leapfrogs),
            format!("mcmc.hmc_step_size={}", self.mcmc.hmc_step_size),
            format!("mcmc.damping={}", self.mcmc.damping),
            format!("mcmc.mass={}", self.mcmc.mass),
            format!("mcmc.la_step_size={}", self.mcmc.la_step_size),
            format!("train.dataset_size={}", self.train.dataset_size),
            format!("train.batch_size={}", self.train.batch_size),
            format!("train.steps={}", self.train.steps),
            format!("train.learning_rate={}", self.train.learning_rate),
            format!("train.beta1={}", self.train.beta1),
            format!("train.beta2={}", self.train.beta2),
            format!("arch.hidden={}", self.arch.hidden),
            format!("arch.inner={}", self.arch.inner),
            format!("arch.blocks={}", self.arch.blocks),
            format!("arch.time_dim={}", self.arch.time_dim),
            format!("arch.time_bias={}", self.arch.time_bias),
            format!("arch.norm_eps={}", self.arch.norm_eps),
        ];
        let mut out = lines.join("\n");
        out.push('\n');
        out
    }

    pub fn validate(&self) -> Result<()> {
        if self.runs == 0 || self.samples == 0 || self.jobs == 0 {
            return Err(Error::Config(
                "runs, samples and jobs must be positive".into(),
            ));
        }
        self.mcmc.validate()?;
        self.train.validate()?;
        self.model_arch().validate()?;
        for g in &self.grid {
            g.validate(&self.mcmc)?;
        }
        if matches!(self.composition, CompositionKind::Mixture) {
            return Err(Error::Composition("mixtures are not supported".into()));
        }
        Ok(())
    }

    pub fn run_seed(&self, run: usize) -> u64 {
        self.seed.wrapping_add(run as u64)
    }

    pub fn model_arch(&self) -> ArchConfig {
        ArchConfig {
            timesteps: self.timesteps,
            ..self.arch.clone()
        }
    }

    pub fn schedule(&self) -> Result<NoiseSchedule> {
        NoiseSchedule::cosine(self.timesteps)
    }

    /// Parameterisations that some grid entry needs.
    pub fn parameterisations(&self) -> Vec<Parameterisation> {
        [Parameterisation::Score, Parameterisation::Energy]
            .into_iter()
            .filter(|p| self.grid.iter().any(|g| g.parameterisation == *p))
            .collect()
    }

    pub fn layout(&self) -> Layout {
        Layout::new(&self.out_dir)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_grid_has_fifteen_named_rows() {
        let g = default_grid();
        assert_eq!(g.len(), 15);
        let mcmc = McmcConfig::default();
        for e in &g {
            e.validate(&mcmc).unwrap();
            assert_eq!(e.to_string().parse::<GridEntry>().unwrap(), *e);
        }
        let curve: GridEntry = "score:HMC-4-curve".parse().unwrap();
        assert_eq!(
            (
                curve.estimator_label(),
                curve.mesh_points(),
                curve.path_label()
            ),
            ("line", Some(4), "curve")
        );
        let la: GridEntry = "energy:LA".parse().unwrap();
        assert_eq!(
            (la.estimator_label(), la.mesh_points(), la.path_label()),
            ("direct", None, "")
        );
        assert_eq!(la.slug(), "energy_LA");
    }

    #[test]
    fn invalid_entries_rejected() {
        let mcmc = McmcConfig::default();
        assert!("score:HMC"
            .parse::<GridEntry>()
            .unwrap()
            .validate(&mcmc)
            .is_err());
        assert!("score:HMC-5-curve"
            .parse::<GridEntry>()
            .unwrap()
            .validate(&mcmc)
            .is_err());
        assert!("score:LA-4-curve".parse::<GridEntry>().is_err());
        assert!("HMC".parse::<GridEntry>().is_err());
        assert!("score:NUTS".parse::<GridEntry>().is_err());
    }

    #[test]
    fn config_round_trip_and_errors() {
        let cfg = ExperimentConfig::parse("# comment\nseed=7\nruns=2 # trailing\ngrid=score:Reverse,energy:HMC\nmcmc.damping=0.25\n").unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.runs, 2);
        assert_eq!(cfg.grid.len(), 2);
        assert_eq!(cfg.mcmc.damping, 0.25);
        assert_eq!(ExperimentConfig::parse(&cfg.to_text()).unwrap(), cfg);
        cfg.validate().unwrap();
        assert_eq!(cfg.run_seed(3), 10);
        assert!(matches!(
            ExperimentConfig::parse("seed=1\nbogus=2"),
            Err(Error::Parse { line: 2, .. })
        ));
        assert!(matches!(
            ExperimentConfig::parse("runs"),
            Err(Error::Parse { line: 1, .. })
        ));
        assert!(ExperimentConfig::parse("composition=mixture")
            .unwrap()
            .validate()
            .is_err());
        assert_eq!(ExperimentConfig::default().parameterisations().len(), 2);
    }
}
