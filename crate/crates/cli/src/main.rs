use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use log::{error, info, warn};

use scorecomp::experiment::{
    aggregate, evaluate_run, parse_points_csv, read_results_csv, results_csv, sample_entries,
    scatter_svg, table_csv, table_text, train_run, write_atomic, ExperimentConfig, GridEntry,
};
use scorecomp::metrics::MetricReport;

#[derive(Parser)]
#[command(
    name = "scorecomp",
    version,
    about = "Compose 2D diffusion models and sample the product with MCMC"
)]
struct Cli {
    #[command(flatten)]
    opts: ConfigOpts,
    /// More log output (-v info, -vv debug)
    #[arg(short, long, action = clap::ArgAction::Count, global = true)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct ConfigOpts {
    /// key=value config file; flags below override it
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true)]
    runs: Option<usize>,
    /// Output directory
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated entries such as `score:HMC-5-line,energy:LA`
    #[arg(long, global = true)]
    grid: Option<String>,
    /// `sum` or `mean`
    #[arg(long = "w2-convention", global = true)]
    w2_convention: Option<String>,
    /// Any other config key, e.g. `--set train.steps=2000`
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    overrides: Vec<String>,
}

#[derive(Args)]
struct RunSel {
    /// Only this run (default: all)
    #[arg(long)]
    run: Option<usize>,
}

#[derive(Subcommand)]
enum Command {
    /// Train the four component models of each run (skips existing checkpoints)
    Train(RunSel),
    /// Sample the grid entries of each run from the trained models
    Sample {
        #[command(flatten)]
        sel: RunSel,
        /// Resample entries whose sample file already exists
        #[arg(long)]
        force: bool,
    },
    /// Compute metrics and write results.csv and the summary table
    Eval,
    /// Print the summary table from results.csv
    Table,
    /// Write SVG scatter plots of the samples of one run
    Plot {
        #[arg(long, default_value_t = 0)]
        run: usize,
    },
    /// Train, sample and evaluate in one go
    All,
    /// Print the effective configuration
    Config,
}

fn load_config(opts: &ConfigOpts) -> Result<ExperimentConfig> {
    let mut cfg = match &opts.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    let mut set = |k: &str, v: &str| cfg.set(k, v).with_context(|| format!("--{k}"));
    if let Some(s) = opts.seed {
        set("seed", &s.to_string())?;
    }
    if let Some(r) = opts.runs {
        set("runs", &r.to_string())?;
    }
    if let Some(o) = &opts.out {
        set("out", &o.to_string_lossy())?;
    }
    if let Some(g) = &opts.grid {
        set("grid", g)?;
    }
    if let Some(w) = &opts.w2_convention {
        set("w2_convention", w)?;
    }
    for kv in &opts.overrides {
        let (k, v) = kv
            .split_once('=')
            .with_context(|| format!("--set expects KEY=VALUE, got `{kv}`"))?;
        set(k.trim(), v.trim())?;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn runs(cfg: &ExperimentConfig, sel: &RunSel) -> Result<Vec<usize>> {
    match sel.run {
        Some(r) if r >= cfg.runs => bail!("run {r} out of range (runs={})", cfg.runs),
        Some(r) => Ok(vec![r]),
        None => Ok((0..cfg.runs).collect()),
    }
}

fn save_config(cfg: &ExperimentConfig) -> Result<()> {
    write_atomic(&cfg.layout().config(), cfg.to_text().as_bytes())?;
    Ok(())
}

fn train(cfg: &ExperimentConfig, runs: &[usize]) -> Result<()> {
    save_config(cfg)?;
    for &r in runs {
        let paths = train_run(cfg, r).with_context(|| format!("training run {r}"))?;
        info!("run {r}: {} checkpoints ready", paths.len());
    }
    Ok(())
}

fn sample(cfg: &ExperimentConfig, runs: &[usize], force: bool) -> Result<()> {
    let layout = cfg.layout();
    let mut failures = 0;
    for &r in runs {
        let todo: Vec<GridEntry> = cfg
            .grid
            .iter()
            .filter(|e| force || !layout.samples(r, e).exists())
            .copied()
            .collect();
        if todo.len() < cfg.grid.len() {
            info!(
                "run {r}: {} entries already sampled",
                cfg.grid.len() - todo.len()
            );
        }
        for (e, res) in todo.iter().zip(sample_entries(cfg, r, &todo)) {
            if let Err(err) = res {
                error!("run {r} {e}: {err}");
                failures += 1;
            }
        }
    }
    if failures > 0 {
        bail!("{failures} grid entries failed");
    }
    Ok(())
}

fn eval(cfg: &ExperimentConfig) -> Result<()> {
    let layout = cfg.layout();
    let mut reports: Vec<MetricReport> = Vec::new();
    let mut missing = 0;
    for r in 0..cfg.runs {
        let (rs, miss) = evaluate_run(cfg, r).with_context(|| format!("evaluating run {r}"))?;
        for m in &miss {
            warn!("run {r}: no samples for {m}");
        }
        missing += miss.len();
        reports.extend(rs);
    }
    write_atomic(&layout.results(), results_csv(&reports).as_bytes())?;
    let rows = aggregate(&reports);
    write_atomic(&layout.table_csv(), table_csv(&rows).as_bytes())?;
    let text = table_text(&rows);
    write_atomic(&layout.table_text(), text.as_bytes())?;
    print!("{text}");
    if missing > 0 {
        warn!("{missing} (run, entry) pairs have no samples yet");
    }
    Ok(())
}

fn table(cfg: &ExperimentConfig) -> Result<()> {
    let path = cfg.layout().results();
    let text =
        std::fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    print!("{}", table_text(&aggregate(&read_results_csv(&text)?)));
    Ok(())
}

fn plot(cfg: &ExperimentConfig, run: usize) -> Result<()> {
    let layout = cfg.layout();
    let dir = layout.root().join("plots").join(format!("run_{run:02}"));
    let mut sources: Vec<(String, PathBuf)> = vec![("reference".into(), layout.reference(run))];
    sources.extend(cfg.grid.iter().map(|e| (e.slug(), layout.samples(run, e))));
    let mut written = 0;
    for (name, path) in sources {
        if !path.exists() {
            continue;
        }
        let pts = read_points(&path)?;
        write_atomic(
            &dir.join(format!("{name}.svg")),
            scatter_svg(&pts, &name).as_bytes(),
        )?;
        written += 1;
    }
    if written == 0 {
        bail!(
            "nothing to plot for run {run} under {}",
            layout.root().display()
        );
    }
    info!("wrote {written} plots to {}", dir.display());
    Ok(())
}

fn read_points(path: &Path) -> Result<Vec<[f64; 2]>> {
    let text =
        std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    parse_points_csv(&text).with_context(|| format!("parsing {}", path.display()))
}

/// Large temporary arrays otherwise go through mmap/munmap on every
/// evaluation; keeping them on the heap is markedly faster.
#[cfg(all(target_os = "linux", target_env = "gnu"))]
fn tune_allocator() {
    // SAFETY: mallopt only adjusts allocator thresholds.
    unsafe {
        libc::mallopt(libc::M_MMAP_THRESHOLD, 1 << 30);
        libc::mallopt(libc::M_TRIM_THRESHOLD, i32::MAX);
    }
}

#[cfg(not(all(target_os = "linux", target_env = "gnu")))]
fn tune_allocator() {}

fn run(cli: Cli) -> Result<()> {
    let cfg = load_config(&cli.opts)?;
    match cli.command {
        Command::Train(sel) => train(&cfg, &runs(&cfg, &sel)?),
        Command::Sample { sel, force } => sample(&cfg, &runs(&cfg, &sel)?, force),
        Command::Eval => eval(&cfg),
        Command::Table => table(&cfg),
        Command::Plot { run } => plot(&cfg, run),
        Command::All => {
            let all: Vec<usize> = (0..cfg.runs).collect();
            for r in all {
                train(&cfg, &[r])?;
                sample(&cfg, &[r], false)?;
            }
            eval(&cfg)
        }
        Command::Config => {
            print!("{}", cfg.to_text());
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    tune_allocator();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
