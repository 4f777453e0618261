//! The moving-window inference loop.
//!
//! Starting from a kNN estimate, each step builds a window around the current
//! estimate, looks up its stored reference pair, estimates ρ against that pair
//! and maps it back to a rank. The loop stops at a fixed point (the estimate
//! sits at the centre of its own window) or after `max_iter` steps.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{config, MwrError, Result};
use crate::harness::io::mix_seed;
use crate::neural::{Branch, RhoRegressor};
use crate::partition::groups_containing;
use crate::refdb::{FeatureCache, ReferenceDatabase};
use crate::rho::{make_window, reconstruct_rank, rho_rank, RankScale, RhoRank, SearchWindow};

/// Estimates ρ of the current query against two database references.
pub trait RhoEstimator {
    fn estimate(&mut self, db: &ReferenceDatabase, y1: usize, y2: usize) -> Result<f64>;
}

/// Learned estimator: the query is encoded once and projected through the
/// first head layer; reference features come from the database cache.
pub struct NeuralEstimator<'a> {
    model: &'a RhoRegressor,
    cache: &'a FeatureCache,
    query_projection: Vec<f64>,
}

impl<'a> NeuralEstimator<'a> {
    pub fn new(model: &'a RhoRegressor, cache: &'a FeatureCache, raw_query: &[f64]) -> Result<Self> {
        let feature = model.encode(raw_query)?;
        Ok(Self {
            model,
            cache,
            query_projection: model.project(Branch::Input, &feature),
        })
    }
}

impl RhoEstimator for NeuralEstimator<'_> {
    fn estimate(&mut self, _db: &ReferenceDatabase, y1: usize, y2: usize) -> Result<f64> {
        let p1 = self.model.project(Branch::Lower, self.cache.row(y1));
        let p2 = self.model.project(Branch::Upper, self.cache.row(y2));
        Ok(self.model.rho_from_projections(&self.query_projection, &p1, &p2))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OracleRegressor {
    /// Total standard deviation of the ρ error.
    pub noise_std: f64,
    /// Fraction of the error variance shared by every triplet of one query.
    #[serde(default = "default_shared")]
    pub shared: f64,
    pub seed: u64,
}

/// Share of a trained regressor's near-truth error variance that stays
/// constant across reference pairs for a fixed query (measured at about 0.69).
pub const DEFAULT_SHARED_NOISE: f64 = 0.7;

fn default_shared() -> f64 {
    DEFAULT_SHARED_NOISE
}

impl OracleRegressor {
    pub fn exact() -> Self {
        Self::noisy(0.0, 0)
    }

    pub fn noisy(noise_std: f64, seed: u64) -> Self {
        Self {
            noise_std,
            shared: DEFAULT_SHARED_NOISE,
            seed,
        }
    }
}

/// Returns the true clamped ρ of a known rank, plus optional Gaussian noise.
///
/// The error has a per-query part, drawn once, and a per-triplet part that is
/// a fixed function of `(seed, query, y1, y2)`. Like a trained regressor the
/// oracle answers the same question the same way, and its mistakes for one
/// query lean the same direction.
pub struct OracleEstimator {
    truth: i32,
    scale: RankScale,
    noise: Option<Normal<f64>>,
    query_offset: f64,
    seed: u64,
    query: u64,
}

impl OracleEstimator {
    pub fn new(oracle: &OracleRegressor, truth: i32, scale: RankScale, query: u64) -> Result<Self> {
        if !(oracle.noise_std.is_finite() && oracle.noise_std >= 0.0) {
            return config(format!("oracle noise_std must be >= 0, got {}", oracle.noise_std));
        }
        if !(0.0..=1.0).contains(&oracle.shared) {
            return config(format!(
                "oracle shared fraction must be in [0, 1], got {}",
                oracle.shared
            ));
        }
        let mut query_offset = 0.0;
        let mut noise = None;
        if oracle.noise_std > 0.0 {
            let shared = Normal::new(0.0, oracle.noise_std * oracle.shared.sqrt()).expect("valid std");
            let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[oracle.seed, query]));
            query_offset = shared.sample(&mut rng);
            noise = Some(Normal::new(0.0, oracle.noise_std * (1.0 - oracle.shared).sqrt()).expect("valid std"));
        }
        Ok(Self {
            truth,
            scale,
            noise,
            query_offset,
            seed: oracle.seed,
            query,
        })
    }
}

impl RhoEstimator for OracleEstimator {
    fn estimate(&mut self, db: &ReferenceDatabase, y1: usize, y2: usize) -> Result<f64> {
        let rho = rho_rank(self.truth as f64, db.rank(y1) as f64, db.rank(y2) as f64, &self.scale)?.value();
        Ok(match &self.noise {
            Some(dist) => {
                let key = [self.seed, self.query, db.instances[y1].id, db.instances[y2].id];
                let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&key));
                (rho + self.query_offset + dist.sample(&mut rng)).clamp(-1.0, 1.0)
            }
            None => rho,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Global,
    Local,
}

/// One regressor's contribution to an iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StepDetail {
    pub group: Option<usize>,
    pub window: SearchWindow,
    pub y1_id: u64,
    pub y2_id: u64,
    pub y1_rank: i32,
    pub y2_rank: i32,
    pub rho_hat: f64,
    pub estimate: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRecord {
    pub iteration: usize,
    pub phase: Phase,
    pub steps: Vec<StepDetail>,
    pub estimate: i32,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhaseResult {
    pub estimate: i32,
    pub converged: bool,
    /// Set when the loop stopped on a revisited, non-fixed estimate.
    pub cycled: bool,
    pub iterations: Vec<IterationRecord>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MwrTrace {
    pub instance_id: Option<u64>,
    pub truth: Option<i32>,
    pub initial_estimate: i32,
    pub global: PhaseResult,
    pub local: Option<PhaseResult>,
    pub final_global: i32,
    pub final_local: Option<i32>,
    /// Convergence of the last phase that ran.
    pub converged: bool,
}

impl MwrTrace {
    pub fn prediction(&self) -> i32 {
        self.final_local.unwrap_or(self.final_global)
    }

    pub fn total_iterations(&self) -> usize {
        self.global.iterations.len() + self.local.as_ref().map_or(0, |l| l.iterations.len())
    }

    /// Global-phase estimate after `t` iterations (`t = 0` is the kNN start),
    /// held constant once the phase has stopped.
    pub fn global_estimate_at(&self, t: usize) -> i32 {
        if t == 0 {
            return self.initial_estimate;
        }
        self.global
            .iterations
            .get(t - 1)
            .map_or(self.final_global, |r| r.estimate)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MwrSettings {
    pub k: usize,
    pub max_iter: usize,
}

impl Default for MwrSettings {
    fn default() -> Self {
        Self { k: 5, max_iter: 10 }
    }
}

/// `round(mean(ranks of the k nearest references))`, clipped to the domain.
pub fn initial_estimate(db: &ReferenceDatabase, knn_feature: &[f64], k: usize) -> Result<i32> {
    let ranks = db.knn_ranks(knn_feature, k)?;
    Ok(initial_from_ranks(&ranks, db))
}

fn initial_from_ranks(ranks: &[i32], db: &ReferenceDatabase) -> i32 {
    let mean = ranks.iter().map(|&r| r as f64).sum::<f64>() / ranks.len() as f64;
    db.domain.clamp(mean.round() as i32)
}

/// One window move using reference set `set` (0 = global).
///
/// The new rank is reconstructed from the selected references' actual ranks,
/// so substituted endpoints keep the reconstruction exact.
pub fn mwr_step(
    estimate: i32,
    estimator: &mut dyn RhoEstimator,
    db: &ReferenceDatabase,
    set: usize,
) -> Result<(i32, StepDetail)> {
    if !db.domain.contains(estimate) {
        return Err(MwrError::Domain(format!("estimate {estimate} outside {}", db.domain)));
    }
    let bounds = db
        .sets
        .get(set)
        .ok_or_else(|| MwrError::Inference(format!("no reference set {set}")))?
        .bounds;
    let window = make_window(bounds.clamp(estimate), &db.scale, &bounds)?;
    let window = SearchWindow {
        center: estimate,
        ..window
    };
    let pair = db.select_references(set, &window)?;
    let (r1, r2) = (db.rank(pair.y1), db.rank(pair.y2));
    let raw = estimator.estimate(db, pair.y1, pair.y2)?;
    let rho = RhoRank::clamped(raw).map_err(|_| MwrError::Numerical {
        layer: "rho estimate".into(),
        detail: format!("estimator returned {raw}"),
    })?;
    let theta = reconstruct_rank(rho, r1 as f64, r2 as f64, &db.scale)?;
    let next = db.domain.clamp(theta.round() as i32);
    Ok((
        next,
        StepDetail {
            group: db.sets[set].group.map(|g| g.index),
            window,
            y1_id: db.instances[pair.y1].id,
            y2_id: db.instances[pair.y2].id,
            y1_rank: r1,
            y2_rank: r2,
            rho_hat: rho.value(),
            estimate: next,
        },
    ))
}

/// Iterates `step` from `start` until a fixed point, a revisited estimate, or
/// `max_iter` steps.
///
/// On a revisit the loop returns the cycle member whose own step had the
/// smallest mean `|rho_hat|` (closest to its window centre).
fn iterate(
    start: i32,
    max_iter: usize,
    phase: Phase,
    mut step: impl FnMut(i32) -> Result<(i32, Vec<StepDetail>)>,
) -> Result<PhaseResult> {
    if max_iter == 0 {
        return config("max_iter must be at least 1");
    }
    let mut current = start;
    let mut visited: Vec<(i32, f64)> = Vec::new();
    let mut iterations = Vec::new();
    for t in 1..=max_iter {
        let (next, steps) = step(current)?;
        let strength = steps.iter().map(|s| s.rho_hat.abs()).sum::<f64>() / steps.len() as f64;
        visited.push((current, strength));
        iterations.push(IterationRecord {
            iteration: t,
            phase,
            steps,
            estimate: next,
        });
        if next == current {
            return Ok(PhaseResult {
                estimate: next,
                converged: true,
                cycled: false,
                iterations,
            });
        }
        if let Some(first) = visited.iter().position(|(e, _)| *e == next) {
            let best = visited[first..]
                .iter()
                .min_by(|a, b| a.1.total_cmp(&b.1))
                .expect("cycle is nonempty")
                .0;
            return Ok(PhaseResult {
                estimate: best,
                converged: false,
                cycled: true,
                iterations,
            });
        }
        current = next;
    }
    Ok(PhaseResult {
        estimate: current,
        converged: false,
        cycled: false,
        iterations,
    })
}

/// Global phase: repeated [`mwr_step`] with reference set 0.
pub fn run_global(
    init: i32,
    estimator: &mut dyn RhoEstimator,
    db: &ReferenceDatabase,
    max_iter: usize,
) -> Result<PhaseResult> {
    iterate(db.domain.clamp(init), max_iter, Phase::Global, |c| {
        let (next, detail) = mwr_step(c, estimator, db, 0)?;
        Ok((next, vec![detail]))
    })
}

/// Local phase starting from the global estimate. When the estimate lies in
/// two groups, both local steps run and their results are averaged, with
/// halves rounded up.
pub fn run_local(
    theta_global: i32,
    estimators: &mut [&mut dyn RhoEstimator],
    db: &ReferenceDatabase,
    max_iter: usize,
) -> Result<PhaseResult> {
    let groups = db.groups();
    if groups.is_empty() || estimators.len() != groups.len() {
        return config(format!(
            "{} local estimators for {} groups",
            estimators.len(),
            groups.len()
        ));
    }
    iterate(db.domain.clamp(theta_global), max_iter, Phase::Local, |c| {
        let members = groups_containing(c, &groups)?;
        let mut details = Vec::with_capacity(members.len());
        for g in &members {
            let (_, d) = mwr_step(c, &mut *estimators[*g], db, g + 1)?;
            details.push(d);
        }
        let sum: i32 = details.iter().map(|d| d.estimate).sum();
        let n = details.len() as i32;
        // ceil on exact halves
        let next = (sum + n / 2).div_euclid(n);
        Ok((db.domain.clamp(next), details))
    })
}

/// Which regressors drive inference.
pub enum Regressors<'a> {
    Neural {
        global: &'a RhoRegressor,
        locals: Vec<&'a RhoRegressor>,
    },
    Oracle {
        oracle: OracleRegressor,
        /// Run the local phase with per-group oracles.
        use_local: bool,
    },
}

/// Full inference: kNN start, global phase, then the local phase when local
/// regressors are available.
pub fn infer(
    db: &ReferenceDatabase,
    regressors: &Regressors<'_>,
    settings: &MwrSettings,
    id: u64,
    raw: &[f64],
    truth: Option<i32>,
) -> Result<MwrTrace> {
    let knn_feature = match regressors {
        Regressors::Neural { global, .. } => db.knn_feature(raw, Some(global))?,
        Regressors::Oracle { .. } => db.knn_feature(raw, None)?,
    };
    let init = initial_estimate(db, &knn_feature, settings.k)?;
    run_from(db, regressors, settings, id, raw, truth, init)
}

/// Like [`infer`] but from a given initial estimate.
pub fn run_from(
    db: &ReferenceDatabase,
    regressors: &Regressors<'_>,
    settings: &MwrSettings,
    id: u64,
    raw: &[f64],
    truth: Option<i32>,
    init: i32,
) -> Result<MwrTrace> {
    let (global, local) = match regressors {
        Regressors::Neural { global, locals } => {
            let cache = db
                .features
                .first()
                .ok_or_else(|| MwrError::Inference("database has no model features".into()))?;
            let mut est = NeuralEstimator::new(global, cache, raw)?;
            let global_res = run_global(init, &mut est, db, settings.max_iter)?;
            let local_res = if locals.is_empty() {
                None
            } else {
                let mut ests = locals
                    .iter()
                    .enumerate()
                    .map(|(g, m)| NeuralEstimator::new(m, &db.features[g + 1], raw))
                    .collect::<Result<Vec<_>>>()?;
                let mut dyns: Vec<&mut dyn RhoEstimator> =
                    ests.iter_mut().map(|e| e as &mut dyn RhoEstimator).collect();
                Some(run_local(global_res.estimate, &mut dyns, db, settings.max_iter)?)
            };
            (global_res, local_res)
        }
        Regressors::Oracle { oracle, use_local } => {
            let truth = truth.ok_or_else(|| MwrError::Inference("oracle inference needs the true rank".into()))?;
            let mut est = OracleEstimator::new(oracle, truth, db.scale, id)?;
            let global_res = run_global(init, &mut est, db, settings.max_iter)?;
            let local_res = if *use_local && !db.groups().is_empty() {
                let mut ests = (0..db.groups().len())
                    .map(|g| OracleEstimator::new(oracle, truth, db.scale, mix_seed(&[id, g as u64 + 1])))
                    .collect::<Result<Vec<_>>>()?;
                let mut dyns: Vec<&mut dyn RhoEstimator> =
                    ests.iter_mut().map(|e| e as &mut dyn RhoEstimator).collect();
                Some(run_local(global_res.estimate, &mut dyns, db, settings.max_iter)?)
            } else {
                None
            };
            (global_res, local_res)
        }
    };
    let converged = local.as_ref().map_or(global.converged, |l| l.converged);
    Ok(MwrTrace {
        instance_id: Some(id),
        truth,
        initial_estimate: init,
        final_global: global.estimate,
        final_local: local.as_ref().map(|l| l.estimate),
        global,
        local,
        converged,
    })
}
