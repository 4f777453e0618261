//! Run stages behind the CLI: train, build-refdb, eval, simulate, sweep.
//!
//! Every stage writes the manifest it ran under into its output directory and
//! tags each output with that manifest's run id.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::engine::{infer, MwrSettings, MwrTrace, OracleRegressor, Regressors};
use crate::error::{config, MwrError, Result};
use crate::harness::dataset::{Dataset, Split};
use crate::harness::io::write_atomic;
use crate::harness::manifest::{ExperimentManifest, MANIFEST_FILE};
use crate::metrics::{accuracy, cumulative_score, epsilon_error, mae, EvalRecord};
use crate::neural::{Checkpoint, RhoRegressor};
use crate::refdb::{GammaTables, RefDbBuilder, ReferenceDatabase, SelectionScheme};
use crate::rho::RankScale;
use crate::trainer::{model_label, train, EpochLog, TrainedModels};

pub const REFDB_FILE: &str = "refdb.bin";
pub const METRICS_CSV: &str = "metrics.csv";
pub const METRICS_TXT: &str = "metrics.txt";
pub const TRACES_FILE: &str = "traces.jsonl";
pub const CONVERGENCE_CSV: &str = "convergence.csv";
pub const TRAIN_LOG_CSV: &str = "train_log.csv";
pub const SWEEP_CSV: &str = "sweep.csv";

pub fn checkpoint_path(dir: &Path, stream: u64) -> PathBuf {
    dir.join(format!("{}.ckpt.json", model_label(stream)))
}

/// One row of `metrics.csv`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRow {
    pub run_id: String,
    pub split: String,
    pub mae: f64,
    pub cs5: f64,
    /// Empty when the dataset has no sigma column.
    pub eps_error: Option<f64>,
    pub accuracy: f64,
    pub mean_iters: f64,
    pub converged_pct: f64,
}

/// Global-phase error and converged fraction after a given number of iterations.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConvergencePoint {
    pub run_id: String,
    pub iteration: usize,
    pub mae: f64,
    pub eps_error: Option<f64>,
    pub converged_pct: f64,
}

fn csv_bytes<T: Serialize>(rows: &[T]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    w.into_inner().map_err(|e| MwrError::Io(e.into_error()))
}

fn save_manifest(m: &ExperimentManifest, dir: &Path) -> Result<()> {
    m.save(&dir.join(MANIFEST_FILE))
}

fn prepare(m: &ExperimentManifest, ds: &Dataset) -> Result<()> {
    m.validate()?;
    m.check_dataset(ds)
}

/// Trains the global and local regressors and writes their checkpoints and
/// the per-epoch log.
pub fn run_train(m: &ExperimentManifest, ds: &Dataset, out: &Path) -> Result<TrainedModels> {
    prepare(m, ds)?;
    let run_id = m.run_id();
    let models = train(ds, &m.train, &m.model, &m.partition.groups)?;
    let all = std::iter::once(&models.global).chain(&models.locals);
    for (stream, t) in all.enumerate() {
        let mut ckpt = Checkpoint::from_model(&t.model, Some(&t.optimizer));
        ckpt.run_id = Some(run_id.clone());
        ckpt.save(&checkpoint_path(out, stream as u64))?;
    }
    write_train_log(&run_id, &models.log, out)?;
    save_manifest(m, out)?;
    Ok(models)
}

#[derive(Serialize)]
struct TrainLogRow<'a> {
    run_id: &'a str,
    model: &'a str,
    epoch: usize,
    split: &'static str,
    mean_loss: f64,
    triplets: usize,
}

fn write_train_log(run_id: &str, log: &[EpochLog], out: &Path) -> Result<()> {
    let rows: Vec<TrainLogRow<'_>> = log
        .iter()
        .map(|e| TrainLogRow {
            run_id,
            model: &e.model,
            epoch: e.epoch,
            split: Split::Train.as_str(),
            mean_loss: e.mean_loss,
            triplets: e.triplets,
        })
        .collect();
    write_atomic(&out.join(TRAIN_LOG_CSV), &csv_bytes(&rows)?)
}

/// Loads the global checkpoint and one local checkpoint per partition group.
pub fn load_models(m: &ExperimentManifest, dir: &Path) -> Result<(RhoRegressor, Vec<RhoRegressor>)> {
    let load = |stream: u64| -> Result<RhoRegressor> {
        let path = checkpoint_path(dir, stream);
        if !path.exists() {
            return config(format!("missing model checkpoint {}", path.display()));
        }
        let (model, _) = Checkpoint::load(&path)?.into_model()?;
        if model.spec != m.model {
            return config(format!(
                "checkpoint {} does not match the manifest architecture",
                path.display()
            ));
        }
        Ok(model)
    };
    let global = load(0)?;
    let locals = (1..=m.partition.groups.len() as u64)
        .map(load)
        .collect::<Result<Vec<_>>>()?;
    Ok((global, locals))
}

fn builder<'a>(m: &ExperimentManifest, ds: &'a Dataset, scale: RankScale) -> RefDbBuilder<'a> {
    RefDbBuilder {
        dataset: ds,
        scale,
        alpha: m.train.alpha,
        groups: m.partition.groups.clone(),
        config: m.refdb,
    }
}

/// γ tables from trained models; select a scheme from them with
/// [`GammaTables::select`].
pub fn gamma_tables(
    m: &ExperimentManifest,
    ds: &Dataset,
    global: &RhoRegressor,
    locals: &[RhoRegressor],
) -> Result<GammaTables> {
    prepare(m, ds)?;
    let locals: Vec<&RhoRegressor> = locals.iter().collect();
    builder(m, ds, m.scale()).neural(global, &locals)
}

pub fn run_build_refdb(m: &ExperimentManifest, ds: &Dataset, dir: &Path) -> Result<ReferenceDatabase> {
    let (global, locals) = load_models(m, dir)?;
    let mut db = gamma_tables(m, ds, &global, &locals)?.select(m.selection)?;
    db.run_id = Some(m.run_id());
    db.save(&dir.join(REFDB_FILE))?;
    save_manifest(m, dir)?;
    Ok(db)
}

/// Runs inference on every instance of `split`, in instance order.
pub fn evaluate(
    db: &ReferenceDatabase,
    regressors: &Regressors<'_>,
    settings: &MwrSettings,
    ds: &Dataset,
    split: Split,
) -> Result<Vec<MwrTrace>> {
    let members = ds.require_split(split)?;
    members
        .par_iter()
        .map(|&i| {
            let inst = &ds.instances[i];
            infer(db, regressors, settings, inst.id, &inst.features, Some(inst.rank))
        })
        .collect()
}

/// Evaluation records using `pick` to choose the prediction from each trace.
pub fn records(traces: &[MwrTrace], ds: &Dataset, pick: impl Fn(&MwrTrace) -> i32) -> Result<Vec<EvalRecord>> {
    let by_id: std::collections::HashMap<u64, &crate::harness::dataset::Instance> =
        ds.instances.iter().map(|i| (i.id, i)).collect();
    traces
        .iter()
        .map(|t| {
            let id = t
                .instance_id
                .ok_or_else(|| MwrError::Inference("trace without instance id".into()))?;
            let inst = by_id
                .get(&id)
                .ok_or_else(|| MwrError::Data(format!("trace for unknown instance {id}")))?;
            Ok(EvalRecord {
                id,
                truth: inst.rank,
                prediction: pick(t),
                sigma: inst.sigma,
            })
        })
        .collect()
}

fn optional_eps(recs: &[EvalRecord]) -> Result<Option<f64>> {
    if recs.iter().all(|r| r.sigma.is_some()) {
        epsilon_error(recs).map(Some)
    } else {
        Ok(None)
    }
}

pub fn summarize(run_id: &str, split: Split, traces: &[MwrTrace], ds: &Dataset) -> Result<MetricsRow> {
    let recs = records(traces, ds, MwrTrace::prediction)?;
    let n = traces.len() as f64;
    Ok(MetricsRow {
        run_id: run_id.to_string(),
        split: split.as_str().to_string(),
        mae: mae(&recs)?,
        cs5: cumulative_score(&recs, 5)?,
        eps_error: optional_eps(&recs)?,
        accuracy: accuracy(&recs)?,
        mean_iters: traces.iter().map(|t| t.total_iterations() as f64).sum::<f64>() / n,
        converged_pct: 100.0 * traces.iter().filter(|t| t.converged).count() as f64 / n,
    })
}

/// Per-iteration global-phase curve, `t = 0` being the kNN start.
pub fn convergence_curve(
    run_id: &str,
    traces: &[MwrTrace],
    ds: &Dataset,
    max_iter: usize,
) -> Result<Vec<ConvergencePoint>> {
    let n = traces.len() as f64;
    (0..=max_iter)
        .map(|t| {
            let recs = records(traces, ds, |tr| tr.global_estimate_at(t))?;
            let done = traces
                .iter()
                .filter(|tr| tr.global.converged && tr.global.iterations.len() <= t)
                .count();
            Ok(ConvergencePoint {
                run_id: run_id.to_string(),
                iteration: t,
                mae: mae(&recs)?,
                eps_error: optional_eps(&recs)?,
                converged_pct: 100.0 * done as f64 / n,
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TraceLine<'a> {
    run_id: &'a str,
    #[serde(flatten)]
    trace: &'a MwrTrace,
}

fn metrics_text(row: &MetricsRow) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run_id={}", row.run_id);
    let _ = writeln!(s, "split={}", row.split);
    let _ = writeln!(s, "mae={}", row.mae);
    let _ = writeln!(s, "cs5={}", row.cs5);
    match row.eps_error {
        Some(e) => {
            let _ = writeln!(s, "eps_error={e}");
        }
        None => s.push_str("eps_error=\n"),
    }
    let _ = writeln!(s, "accuracy={}", row.accuracy);
    let _ = writeln!(s, "mean_iters={}", row.mean_iters);
    let _ = writeln!(s, "converged_pct={}", row.converged_pct);
    s
}

/// Writes metrics, traces and the convergence curve for one evaluation.
pub fn write_eval_outputs(
    m: &ExperimentManifest,
    row: &MetricsRow,
    traces: &[MwrTrace],
    curve: &[ConvergencePoint],
    out: &Path,
) -> Result<()> {
    write_atomic(&out.join(METRICS_CSV), &csv_bytes(std::slice::from_ref(row))?)?;
    write_atomic(&out.join(METRICS_TXT), metrics_text(row).as_bytes())?;
    let mut lines = Vec::new();
    for t in traces {
        serde_json::to_writer(
            &mut lines,
            &TraceLine {
                run_id: &row.run_id,
                trace: t,
            },
        )?;
        lines.push(b'\n');
    }
    write_atomic(&out.join(TRACES_FILE), &lines)?;
    write_atomic(&out.join(CONVERGENCE_CSV), &csv_bytes(curve)?)?;
    save_manifest(m, out)
}

fn settings(m: &ExperimentManifest) -> MwrSettings {
    MwrSettings {
        k: m.k,
        max_iter: m.max_iter,
    }
}

/// Evaluates trained models from `dir` on the manifest's evaluation split.
///
/// The reference database must have been built from exactly these checkpoints.
pub fn run_eval(m: &ExperimentManifest, ds: &Dataset, dir: &Path, out: &Path) -> Result<MetricsRow> {
    prepare(m, ds)?;
    let (global, locals) = load_models(m, dir)?;
    let mut all = vec![&global];
    all.extend(locals.iter());
    let path = dir.join(REFDB_FILE);
    if !path.exists() {
        return config(format!("missing reference database {}", path.display()));
    }
    let db = ReferenceDatabase::load_verified(&path, &all)?;
    if db.scale != m.scale() || db.domain != m.dataset.rank_domain {
        return config("reference database was built for a different scale or domain");
    }
    let regs = Regressors::Neural {
        global: &global,
        locals: locals.iter().collect(),
    };
    let run_id = m.run_id();
    let traces = evaluate(&db, &regs, &settings(m), ds, m.eval_split)?;
    let row = summarize(&run_id, m.eval_split, &traces, ds)?;
    let curve = convergence_curve(&run_id, &traces, ds, m.max_iter)?;
    write_eval_outputs(m, &row, &traces, &curve, out)?;
    Ok(row)
}

/// Oracle-driven run: the true rank stands in for a learned ρ-regressor.
pub fn simulate(
    m: &ExperimentManifest,
    ds: &Dataset,
    oracle: OracleRegressor,
    use_local: bool,
) -> Result<(MetricsRow, Vec<MwrTrace>, Vec<ConvergencePoint>)> {
    prepare(m, ds)?;
    let db = builder(m, ds, m.scale()).oracle()?.select(m.selection)?;
    let regs = Regressors::Oracle { oracle, use_local };
    let run_id = m.run_id();
    let traces = evaluate(&db, &regs, &settings(m), ds, m.eval_split)?;
    let row = summarize(&run_id, m.eval_split, &traces, ds)?;
    let curve = convergence_curve(&run_id, &traces, ds, m.max_iter)?;
    Ok((row, traces, curve))
}

pub fn run_simulate(
    m: &ExperimentManifest,
    ds: &Dataset,
    oracle: OracleRegressor,
    use_local: bool,
    out: &Path,
) -> Result<MetricsRow> {
    let (row, traces, curve) = simulate(m, ds, oracle, use_local)?;
    write_eval_outputs(m, &row, &traces, &curve, out)?;
    Ok(row)
}

/// How sweep cells obtain their ρ estimates.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum SweepMode {
    Oracle(OracleRegressor),
    /// Train, build and evaluate every cell from scratch.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepCell {
    pub scale: RankScale,
    pub scheme: SelectionScheme,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub run_id: String,
    pub scale: String,
    pub tau: f64,
    pub scheme: String,
    pub split: String,
    pub mae: f64,
    pub cs5: f64,
    pub eps_error: Option<f64>,
    pub accuracy: f64,
    pub mean_iters: f64,
    pub converged_pct: f64,
}

/// One metrics row per cell, in cell order. Each cell's manifest is written
/// to `out/cell-<n>/`.
pub fn run_sweep(
    base: &ExperimentManifest,
    ds: &Dataset,
    cells: &[SweepCell],
    mode: SweepMode,
    out: &Path,
) -> Result<Vec<SweepRow>> {
    if cells.is_empty() {
        return config("sweep needs at least one cell");
    }
    let mut rows = Vec::with_capacity(cells.len());
    for (i, cell) in cells.iter().enumerate() {
        let mut m = base.clone();
        m.train.scale = cell.scale;
        m.selection = cell.scheme;
        let dir = out.join(format!("cell-{i}"));
        let row = match mode {
            SweepMode::Oracle(oracle) => {
                let (row, _, _) = simulate(&m, ds, oracle, !m.partition.groups.is_empty())?;
                save_manifest(&m, &dir)?;
                row
            }
            SweepMode::Learned => {
                let models = run_train(&m, ds, &dir)?;
                let locals: Vec<RhoRegressor> = models.locals.into_iter().map(|t| t.model).collect();
                let db = gamma_tables(&m, ds, &models.global.model, &locals)?.select(m.selection)?;
                let regs = Regressors::Neural {
                    global: &models.global.model,
                    locals: locals.iter().collect(),
                };
                let traces = evaluate(&db, &regs, &settings(&m), ds, m.eval_split)?;
                summarize(&m.run_id(), m.eval_split, &traces, ds)?
            }
        };
        rows.push(SweepRow {
            run_id: row.run_id,
            scale: cell.scale.kind.as_str().to_string(),
            tau: cell.scale.tau,
            scheme: cell.scheme.kind.as_str().to_string(),
            split: row.split,
            mae: row.mae,
            cs5: row.cs5,
            eps_error: row.eps_error,
            accuracy: row.accuracy,
            mean_iters: row.mean_iters,
            converged_pct: row.converged_pct,
        });
    }
    write_atomic(&out.join(SWEEP_CSV), &csv_bytes(&rows)?)?;
    Ok(rows)
}

/// Human-readable summary of a manifest and, when given, its database.
pub fn inspect(m: &ExperimentManifest, db: Option<&ReferenceDatabase>) -> String {
    let mut s = String::new();
    let _ = writeln!(s, "run_id      {}", m.run_id());
    let _ = writeln!(
        s,
        "dataset     {} ({})",
        m.dataset.path.as_deref().unwrap_or("-"),
        &m.dataset.digest[..12.min(m.dataset.digest.len())]
    );
    let _ = writeln!(s, "domain      {}", m.dataset.rank_domain);
    let _ = writeln!(s, "scale       {} tau={}", m.scale().kind.as_str(), m.scale().tau);
    let _ = writeln!(
        s,
        "selection   {} (seed {})",
        m.selection.kind.as_str(),
        m.selection.seed
    );
    let _ = writeln!(s, "k           {}", m.k);
    let _ = writeln!(s, "max_iter    {}", m.max_iter);
    let _ = writeln!(
        s,
        "train       epochs={} batch={} lr={} alpha={} seed={}",
        m.train.epochs, m.train.batch_size, m.train.lr, m.train.alpha, m.train.seed
    );
    let _ = writeln!(s, "partition   {:?}", m.partition.kind);
    for g in &m.partition.groups {
        let _ = writeln!(
            s,
            "  group {}   [{}, {}] extended [{}, {}]",
            g.index, g.theta_min, g.theta_max, g.extended_min, g.extended_max
        );
    }
    if let Some(db) = db {
        let _ = writeln!(
            s,
            "refdb       {} references, scheme {}",
            db.len(),
            db.scheme.kind.as_str()
        );
        let _ = writeln!(
            s,
            "  pool cap {}, candidates per rank {}",
            db.config.pool_cap, db.config.candidates_per_rank
        );
        for set in &db.sets {
            let with_gamma = set.windows.iter().filter(|w| w.pair.gamma.is_some()).count();
            let _ = writeln!(
                s,
                "  {:<10} {} windows ({} with gamma)",
                set.label,
                set.windows.len(),
                with_gamma
            );
        }
    }
    s
}
