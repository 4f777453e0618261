//! `mwr`: generate data, train ρ-regressors, build reference databases and
//! run moving window regression from the command line.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use mwr_core::harness::dataset::LoadOptions;
use mwr_core::harness::manifest::{ExperimentManifest, MANIFEST_FILE};
use mwr_core::harness::pipeline::{self, SweepCell, SweepMode, REFDB_FILE};
use mwr_core::{
    generate_synthetic, Dataset, Nonlinearity, OracleRegressor, PartitionKind, RankDomain, RankScale,
    ReferenceDatabase, ScaleKind, SchemeKind, SelectionScheme, SyntheticSpec,
};

#[derive(Parser)]
#[command(
    name = "mwr",
    version,
    about = "Moving window regression for ordinal rank estimation"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic dataset (and, with --out-dir, a default manifest for it).
    Gen(GenArgs),
    /// Train the global and local ρ-regressors.
    Train(RunArgs),
    /// Extract features and γ tables from trained checkpoints.
    BuildRefdb(RunArgs),
    /// Run MWR with trained models over the evaluation split.
    Eval(EvalArgs),
    /// Run MWR with an oracle ρ-regressor (no learning).
    Simulate(SimulateArgs),
    /// One metrics row per (τ, selection scheme) cell.
    Sweep(SweepArgs),
    /// Print a manifest, its partition and database statistics.
    Inspect(RunArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum ScaleArg {
    Ari,
    Geo,
}

#[derive(Clone, Copy, ValueEnum)]
enum PartitionArg {
    Golden5,
    Equal3,
    None,
}

#[derive(Clone, Copy, ValueEnum)]
enum SchemeArg {
    Min,
    Max,
    Random,
}

#[derive(Clone, Copy, ValueEnum)]
enum NonlinearityArg {
    Linear,
    Log,
    Sigmoid,
}

/// Flags that locate the experiment and override manifest fields.
#[derive(Args)]
struct Common {
    /// Manifest to start from; otherwise `<out-dir>/manifest.json`, otherwise defaults.
    #[arg(long)]
    manifest: Option<PathBuf>,
    /// Dataset CSV (defaults to the path recorded in the manifest).
    #[arg(long)]
    dataset: Option<PathBuf>,
    #[arg(long, default_value = "mwr-run")]
    out_dir: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_enum)]
    scale: Option<ScaleArg>,
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, value_enum)]
    partition: Option<PartitionArg>,
    #[arg(long, value_enum)]
    scheme: Option<SchemeArg>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    alpha: Option<i32>,
}

#[derive(Args)]
struct RunArgs {
    #[command(flatten)]
    common: Common,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    common: Common,
    /// Directory holding checkpoints and refdb.bin (defaults to --out-dir).
    #[arg(long)]
    models: Option<PathBuf>,
}

#[derive(Args)]
struct GenArgs {
    /// Where to write the dataset CSV.
    #[arg(long)]
    dataset: PathBuf,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long, default_value_t = 7)]
    seed: u64,
    #[arg(long, default_value_t = 4000)]
    n: usize,
    #[arg(long, default_value_t = 1)]
    min_rank: i32,
    #[arg(long, default_value_t = 80)]
    max_rank: i32,
    #[arg(long, default_value_t = 16)]
    dim: usize,
    #[arg(long, default_value_t = 0.15)]
    noise: f64,
    #[arg(long)]
    hetero: bool,
    #[arg(long, value_enum, default_value = "log")]
    nonlinearity: NonlinearityArg,
}

#[derive(Args)]
struct OracleArgs {
    /// Standard deviation of the oracle's ρ error.
    #[arg(long, default_value_t = 0.0)]
    noise: f64,
    /// Seed of the oracle's error stream.
    #[arg(long, default_value_t = 0)]
    oracle_seed: u64,
}

#[derive(Args)]
struct SimulateArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Follow the global phase with local oracles.
    #[arg(long)]
    local: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    common: Common,
    #[command(flatten)]
    oracle: OracleArgs,
    /// Comma-separated τ values (defaults to the manifest's τ).
    #[arg(long, value_delimiter = ',')]
    taus: Vec<f64>,
    /// Comma-separated selection schemes (defaults to the manifest's).
    #[arg(long, value_enum, value_delimiter = ',')]
    schemes: Vec<SchemeArg>,
    /// Train and evaluate learned models per cell instead of using the oracle.
    #[arg(long)]
    learned: bool,
}

struct Experiment {
    manifest: ExperimentManifest,
    dataset: Dataset,
}

fn dataset_path(c: &Common, m: Option<&ExperimentManifest>) -> Result<PathBuf> {
    if let Some(p) = &c.dataset {
        return Ok(p.clone());
    }
    match m.and_then(|m| m.dataset.path.as_ref()) {
        Some(p) => Ok(PathBuf::from(p)),
        None => bail!("no dataset given: pass --dataset or a manifest that records one"),
    }
}

fn scheme(arg: SchemeArg, seed: u64) -> SelectionScheme {
    let kind = match arg {
        SchemeArg::Min => SchemeKind::MinGamma,
        SchemeArg::Max => SchemeKind::MaxGamma,
        SchemeArg::Random => SchemeKind::Random,
    };
    SelectionScheme { kind, seed }
}

fn apply_overrides(m: &mut ExperimentManifest, c: &Common) -> Result<()> {
    if let Some(seed) = c.seed {
        m.reseed(seed);
    }
    if c.scale.is_some() || c.tau.is_some() {
        let kind = match c.scale {
            Some(ScaleArg::Ari) => ScaleKind::Arithmetic,
            Some(ScaleArg::Geo) => ScaleKind::Geometric,
            None => m.train.scale.kind,
        };
        let tau = match (c.tau, kind == m.train.scale.kind) {
            (Some(t), _) => t,
            (None, true) => m.train.scale.tau,
            (None, false) if kind == ScaleKind::Geometric => 0.1,
            (None, false) => 3.0,
        };
        m.train.scale = RankScale::new(kind, tau)?;
    }
    if let Some(s) = c.scheme {
        m.selection = scheme(s, m.seed);
    }
    if let Some(k) = c.k {
        m.k = k;
    }
    if let Some(n) = c.max_iter {
        m.max_iter = n;
    }
    if let Some(e) = c.epochs {
        m.train.epochs = e;
    }
    if let Some(b) = c.batch_size {
        m.train.batch_size = b;
    }
    if let Some(lr) = c.lr {
        m.train.lr = lr;
    }
    let mut kind = m.partition.kind;
    if let Some(p) = c.partition {
        kind = match p {
            PartitionArg::Golden5 => PartitionKind::Golden5,
            PartitionArg::Equal3 => PartitionKind::Equal3,
            PartitionArg::None => PartitionKind::None,
        };
    }
    if let Some(a) = c.alpha {
        m.train.alpha = a;
    }
    if c.partition.is_some() || c.alpha.is_some() {
        m.rebuild_partition(kind)?;
    }
    m.validate()?;
    Ok(())
}

/// Resolves the manifest (explicit, from the output directory, or defaults)
/// and loads its dataset.
fn load_experiment(c: &Common, manifest_dir: &Path) -> Result<Experiment> {
    let found = c.manifest.clone().or_else(|| {
        let p = manifest_dir.join(MANIFEST_FILE);
        p.exists().then_some(p)
    });
    let (mut manifest, dataset) = match found {
        Some(p) => {
            let m = ExperimentManifest::load(&p).with_context(|| format!("loading manifest {}", p.display()))?;
            let path = dataset_path(c, Some(&m))?;
            let ds = m
                .load_dataset(&path)
                .with_context(|| format!("loading dataset {}", path.display()))?;
            (m, ds)
        }
        None => {
            let path = dataset_path(c, None)?;
            let ds = Dataset::load_csv(&path, &LoadOptions::default())
                .with_context(|| format!("loading dataset {}", path.display()))?;
            let m = ExperimentManifest::for_dataset(&ds, Some(&path), c.seed.unwrap_or(0))?;
            (m, ds)
        }
    };
    apply_overrides(&mut manifest, c)?;
    Ok(Experiment { manifest, dataset })
}

fn ensure_dir(p: &Path) -> Result<()> {
    fs::create_dir_all(p).with_context(|| format!("creating {}", p.display()))
}

fn print_row(label: &str, run_id: &str, mae: f64, cs5: f64, converged: f64, iters: f64) {
    println!("{label} run {run_id}: mae {mae:.4} cs5 {cs5:.4} converged {converged:.1}% mean iterations {iters:.2}");
}

fn gen(a: &GenArgs) -> Result<()> {
    let nonlinearity = match a.nonlinearity {
        NonlinearityArg::Linear => Nonlinearity::Linear,
        NonlinearityArg::Log => Nonlinearity::Log,
        NonlinearityArg::Sigmoid => Nonlinearity::Sigmoid,
    };
    let ds = generate_synthetic(&SyntheticSpec {
        n: a.n,
        rank_domain: RankDomain::new(a.min_rank, a.max_rank)?,
        feature_dim: a.dim,
        nonlinearity,
        noise_std: a.noise,
        hetero: a.hetero,
        seed: a.seed,
    })?;
    if let Some(parent) = a.dataset.parent().filter(|p| !p.as_os_str().is_empty()) {
        ensure_dir(parent)?;
    }
    ds.write_csv(&a.dataset)?;
    println!("wrote {} instances to {}", ds.len(), a.dataset.display());
    if let Some(dir) = &a.out_dir {
        ensure_dir(dir)?;
        let m = ExperimentManifest::for_dataset(&ds, Some(&a.dataset), 0)?;
        m.save(&dir.join(MANIFEST_FILE))?;
        println!("manifest {} in {}", m.run_id(), dir.display());
    }
    Ok(())
}

fn train(a: &RunArgs) -> Result<()> {
    let c = &a.common;
    let e = load_experiment(c, &c.out_dir)?;
    ensure_dir(&c.out_dir)?;
    let models = pipeline::run_train(&e.manifest, &e.dataset, &c.out_dir)?;
    println!(
        "run {}: trained global + {} local regressors into {}",
        e.manifest.run_id(),
        models.locals.len(),
        c.out_dir.display()
    );
    Ok(())
}

fn build_refdb(a: &RunArgs) -> Result<()> {
    let c = &a.common;
    let e = load_experiment(c, &c.out_dir)?;
    let db = pipeline::run_build_refdb(&e.manifest, &e.dataset, &c.out_dir)?;
    println!(
        "run {}: {} references, {} window sets in {}",
        e.manifest.run_id(),
        db.len(),
        db.sets.len(),
        c.out_dir.join(REFDB_FILE).display()
    );
    Ok(())
}

fn eval(a: &EvalArgs) -> Result<()> {
    let c = &a.common;
    let models = a.models.clone().unwrap_or_else(|| c.out_dir.clone());
    let e = load_experiment(c, &models)?;
    ensure_dir(&c.out_dir)?;
    let row = pipeline::run_eval(&e.manifest, &e.dataset, &models, &c.out_dir)?;
    print_row("eval", &row.run_id, row.mae, row.cs5, row.converged_pct, row.mean_iters);
    Ok(())
}

fn oracle(a: &OracleArgs) -> OracleRegressor {
    OracleRegressor::noisy(a.noise, a.oracle_seed)
}

fn simulate(a: &SimulateArgs) -> Result<()> {
    let c = &a.common;
    let e = load_experiment(c, &c.out_dir)?;
    ensure_dir(&c.out_dir)?;
    let row = pipeline::run_simulate(&e.manifest, &e.dataset, oracle(&a.oracle), a.local, &c.out_dir)?;
    print_row(
        "simulate",
        &row.run_id,
        row.mae,
        row.cs5,
        row.converged_pct,
        row.mean_iters,
    );
    Ok(())
}

fn sweep(a: &SweepArgs) -> Result<()> {
    let c = &a.common;
    let e = load_experiment(c, &c.out_dir)?;
    let m = &e.manifest;
    let taus = if a.taus.is_empty() {
        vec![m.train.scale.tau]
    } else {
        a.taus.clone()
    };
    let schemes: Vec<SelectionScheme> = if a.schemes.is_empty() {
        vec![m.selection]
    } else {
        a.schemes.iter().map(|&s| scheme(s, m.seed)).collect()
    };
    let mut cells = Vec::new();
    for &tau in &taus {
        for &s in &schemes {
            cells.push(SweepCell {
                scale: RankScale::new(m.train.scale.kind, tau)?,
                scheme: s,
            });
        }
    }
    let mode = if a.learned {
        SweepMode::Learned
    } else {
        SweepMode::Oracle(oracle(&a.oracle))
    };
    ensure_dir(&c.out_dir)?;
    let rows = pipeline::run_sweep(m, &e.dataset, &cells, mode, &c.out_dir)?;
    for r in &rows {
        println!(
            "{} tau {} {}: mae {:.4} converged {:.1}% (run {})",
            r.scale, r.tau, r.scheme, r.mae, r.converged_pct, r.run_id
        );
    }
    Ok(())
}

fn inspect(a: &RunArgs) -> Result<()> {
    let c = &a.common;
    let path = c.manifest.clone().unwrap_or_else(|| c.out_dir.join(MANIFEST_FILE));
    let m = ExperimentManifest::load(&path).with_context(|| format!("loading manifest {}", path.display()))?;
    let refdb = c.out_dir.join(REFDB_FILE);
    let db = if refdb.exists() {
        Some(ReferenceDatabase::load(&refdb)?)
    } else {
        None
    };
    print!("{}", pipeline::inspect(&m, db.as_ref()));
    Ok(())
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::Gen(a) => gen(&a),
        Command::Train(a) => train(&a),
        Command::BuildRefdb(a) => build_refdb(&a),
        Command::Eval(a) => eval(&a),
        Command::Simulate(a) => simulate(&a),
        Command::Sweep(a) => sweep(&a),
        Command::Inspect(a) => inspect(&a),
    }
}
