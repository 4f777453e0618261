//! Fixed-width triplet sampling and the training loops for the global and
//! local ρ-regressors.

use rand::seq::{IndexedRandom, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, MwrError, Result};
use crate::harness::dataset::{Dataset, Split};
use crate::harness::io::mix_seed;
use crate::neural::{adam_step, AdamConfig, AdamState, RegressorSpec, RhoRegressor, TripletInput};
use crate::partition::{RankGroup, DEFAULT_ALPHA};
use crate::rank_index::RankIndex;
use crate::rho::{nominal_window, rho_rank, RankDomain, RankScale};

const STREAM_INIT: u64 = 1;
const STREAM_TRIPLETS: u64 = 2;
const STREAM_SHUFFLE: u64 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub scale: RankScale,
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub alpha: i32,
    pub seed: u64,
    pub triplets_per_instance: usize,
    /// Window centres are drawn within this many `tau` of the instance rank
    /// (log-rank distance under the geometric scale).
    pub center_radius: f64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            scale: RankScale::geometric(0.1).expect("valid tau"),
            epochs: 30,
            batch_size: 18,
            lr: 1e-4,
            alpha: DEFAULT_ALPHA,
            seed: 0,
            triplets_per_instance: 4,
            center_radius: 2.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        RankScale::new(self.scale.kind, self.scale.tau)?;
        if self.batch_size == 0 || self.triplets_per_instance == 0 {
            return config("batch_size and triplets_per_instance must be positive");
        }
        if !(self.lr.is_finite() && self.lr > 0.0) {
            return config(format!("learning rate must be positive, got {}", self.lr));
        }
        if self.alpha < 0 {
            return config(format!("alpha must be non-negative, got {}", self.alpha));
        }
        if !(self.center_radius.is_finite() && self.center_radius > 0.0) {
            return config(format!("center_radius must be positive, got {}", self.center_radius));
        }
        Ok(())
    }
}

/// Indices refer to `Dataset::instances`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TripletSample {
    pub x: usize,
    pub y1: usize,
    pub y2: usize,
    pub rho_true: f64,
}

/// Training-split instances of a dataset, indexed by rank.
#[derive(Debug, Clone)]
pub struct TrainingPool<'a> {
    pub dataset: &'a Dataset,
    pub members: Vec<usize>,
    pub index: RankIndex,
}

impl<'a> TrainingPool<'a> {
    pub fn new(dataset: &'a Dataset, split: Split) -> Result<Self> {
        let members = dataset.require_split(split)?;
        Ok(Self::from_members(dataset, members))
    }

    pub fn from_members(dataset: &'a Dataset, members: Vec<usize>) -> Self {
        let index = RankIndex::build(members.iter().map(|&i| (dataset.instances[i].rank, i)));
        Self {
            dataset,
            members,
            index,
        }
    }

    fn rank(&self, i: usize) -> i32 {
        self.dataset.instances[i].rank
    }
}

/// A fixed-width window whose endpoint ranks are both populated.
#[derive(Debug, Clone, Copy)]
struct TrainWindow {
    center: i32,
    low: i32,
    high: i32,
}

fn valid_windows(
    pool: &TrainingPool<'_>,
    scale: &RankScale,
    domain: &RankDomain,
    eligible: &RankDomain,
) -> Result<Vec<TrainWindow>> {
    let mut out = Vec::new();
    for c in domain.ranks() {
        if scale.kind == crate::rho::ScaleKind::Geometric && c < 1 {
            continue;
        }
        let (low, high) = nominal_window(c, scale)?;
        if low >= high || !domain.contains(low) || !domain.contains(high) {
            continue;
        }
        if high < eligible.min || low > eligible.max {
            continue;
        }
        if pool.index.is_populated(low) && pool.index.is_populated(high) {
            out.push(TrainWindow { center: c, low, high });
        }
    }
    Ok(out)
}

/// Draws `triplets_per_instance` triplets for every eligible instance.
///
/// Eligible instances are the whole pool, or those inside the group's
/// extended range for a local regressor. Windows always have their full
/// nominal width, so `high - low` is `2 tau` (arithmetic) or the geometric
/// analog; labels are clamped when `x` lies outside the window. An instance
/// with no window centre within `center_radius * tau` uses the nearest valid
/// centres instead.
pub fn sample_triplets(
    pool: &TrainingPool<'_>,
    cfg: &TrainConfig,
    group: Option<&RankGroup>,
    stream: u64,
    epoch: u64,
) -> Result<Vec<TripletSample>> {
    let domain = pool.dataset.rank_domain;
    let scale = cfg.scale;
    scale.validate_domain(&domain)?;
    let eligible = group.map_or(domain, RankGroup::extended);
    let windows = valid_windows(pool, &scale, &domain, &eligible)?;
    if windows.is_empty() {
        let sparse: Vec<i32> = domain.ranks().filter(|r| !pool.index.is_populated(*r)).collect();
        return config(format!(
            "no fixed-width window with populated endpoints for {scale} over {eligible}; empty ranks: {sparse:?}"
        ));
    }
    let work: Vec<f64> = windows
        .iter()
        .map(|w| scale.to_working(w.center as f64))
        .collect::<Result<_>>()?;
    let radius = cfg.center_radius * scale.tau + 1e-9;

    let mut out = Vec::with_capacity(pool.members.len() * cfg.triplets_per_instance);
    for &x in &pool.members {
        let theta = pool.rank(x);
        if !eligible.contains(theta) {
            continue;
        }
        let wx = scale.to_working(theta as f64)?;
        // endpoints need at least one instance other than x
        let usable = |w: &TrainWindow| {
            pool.index.members(w.low).iter().any(|&i| i != x) && pool.index.members(w.high).iter().any(|&i| i != x)
        };
        let mut candidates: Vec<usize> = (0..windows.len())
            .filter(|&k| (work[k] - wx).abs() <= radius && usable(&windows[k]))
            .collect();
        if candidates.is_empty() {
            let best = (0..windows.len())
                .filter(|&k| usable(&windows[k]))
                .map(|k| (work[k] - wx).abs())
                .fold(f64::INFINITY, f64::min);
            candidates = (0..windows.len())
                .filter(|&k| usable(&windows[k]) && (work[k] - wx).abs() <= best + 1e-12)
                .collect();
        }
        if candidates.is_empty() {
            continue;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_TRIPLETS, stream, epoch, x as u64]));
        for _ in 0..cfg.triplets_per_instance {
            let w = windows[*candidates.choose(&mut rng).expect("nonempty")];
            let lows: Vec<usize> = pool.index.members(w.low).iter().copied().filter(|&i| i != x).collect();
            let highs: Vec<usize> = pool.index.members(w.high).iter().copied().filter(|&i| i != x).collect();
            let y1 = *lows.choose(&mut rng).expect("usable window");
            let y2 = *highs.choose(&mut rng).expect("usable window");
            let rho = rho_rank(theta as f64, w.low as f64, w.high as f64, &scale)?;
            out.push(TripletSample {
                x,
                y1,
                y2,
                rho_true: rho.value(),
            });
        }
    }
    if out.is_empty() {
        return config(format!("no instance in {eligible} could form a training triplet"));
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochLog {
    pub model: String,
    pub epoch: usize,
    pub mean_loss: f64,
    pub triplets: usize,
}

/// A model with its optimizer state, ready to checkpoint.
#[derive(Debug, Clone)]
pub struct TrainedRegressor {
    pub model: RhoRegressor,
    pub optimizer: AdamState,
}

#[derive(Debug, Clone)]
pub struct TrainedModels {
    pub global: TrainedRegressor,
    pub locals: Vec<TrainedRegressor>,
    pub log: Vec<EpochLog>,
}

impl TrainedModels {
    pub fn local_models(&self) -> Vec<&RhoRegressor> {
        self.locals.iter().map(|t| &t.model).collect()
    }
}

pub fn model_label(stream: u64) -> String {
    if stream == 0 {
        "global".to_string()
    } else {
        format!("local-{}", stream - 1)
    }
}

/// Trains one regressor. `stream` 0 is the global model, `i + 1` local group `i`.
pub fn train_regressor(
    pool: &TrainingPool<'_>,
    cfg: &TrainConfig,
    spec: &RegressorSpec,
    group: Option<&RankGroup>,
    stream: u64,
) -> Result<(TrainedRegressor, Vec<EpochLog>)> {
    cfg.validate()?;
    if spec.encoder.input_dim != pool.dataset.feature_dim {
        return Err(MwrError::Shape {
            context: "train_regressor input",
            expected: spec.encoder.input_dim,
            got: pool.dataset.feature_dim,
        });
    }
    let mut model = RhoRegressor::new(spec.clone(), mix_seed(&[cfg.seed, STREAM_INIT, stream]))?;
    let mut state = AdamState::for_model(&model);
    let adam = AdamConfig::with_lr(cfg.lr);
    let label = model_label(stream);
    let instances = &pool.dataset.instances;
    let mut log = Vec::with_capacity(cfg.epochs);
    for epoch in 0..cfg.epochs {
        let mut triplets = sample_triplets(pool, cfg, group, stream, epoch as u64)?;
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[cfg.seed, STREAM_SHUFFLE, stream, epoch as u64]));
        triplets.shuffle(&mut rng);
        let mut total = 0.0;
        for (b, chunk) in triplets.chunks(cfg.batch_size).enumerate() {
            let batch: Vec<TripletInput<'_>> = chunk
                .iter()
                .map(|t| TripletInput {
                    x: &instances[t.x].features,
                    y1: &instances[t.y1].features,
                    y2: &instances[t.y2].features,
                    rho: t.rho_true,
                })
                .collect();
            let (loss, grads) = model.loss_and_gradients(&batch).map_err(|e| match e {
                MwrError::Numerical { layer, detail } => MwrError::Numerical {
                    layer,
                    detail: format!("{detail} ({label}, epoch {epoch}, batch {b})"),
                },
                other => other,
            })?;
            adam_step(&mut model, &grads, &mut state, &adam)?;
            total += loss * chunk.len() as f64;
        }
        log.push(EpochLog {
            model: label.clone(),
            epoch,
            mean_loss: total / triplets.len() as f64,
            triplets: triplets.len(),
        });
    }
    Ok((
        TrainedRegressor {
            model,
            optimizer: state,
        },
        log,
    ))
}

/// Trains the global regressor and one local regressor per group.
///
/// Local models are independent and trained in parallel; results are
/// identical for any thread count.
pub fn train(
    dataset: &Dataset,
    cfg: &TrainConfig,
    spec: &RegressorSpec,
    groups: &[RankGroup],
) -> Result<TrainedModels> {
    cfg.validate()?;
    let pool = TrainingPool::new(dataset, Split::Train)?;
    let jobs: Vec<Option<&RankGroup>> = std::iter::once(None).chain(groups.iter().map(Some)).collect();
    let mut results = jobs
        .par_iter()
        .enumerate()
        .map(|(stream, group)| train_regressor(&pool, cfg, spec, *group, stream as u64))
        .collect::<Result<Vec<_>>>()?;
    let mut log = Vec::new();
    let mut trained = Vec::with_capacity(results.len());
    for (model, mut entries) in results.drain(..) {
        trained.push(model);
        log.append(&mut entries);
    }
    let global = trained.remove(0);
    Ok(TrainedModels {
        global,
        locals: trained,
        log,
    })
}

/// Mean `|rho_hat - rho|` of `model` over `triplets`.
pub fn mean_abs_rho_error(model: &RhoRegressor, dataset: &Dataset, triplets: &[TripletSample]) -> Result<f64> {
    if triplets.is_empty() {
        return config("no triplets to evaluate");
    }
    let mut total = 0.0;
    for t in triplets {
        let f = |i: usize| model.encode(&dataset.instances[i].features);
        let rho = model.regress_rho(&f(t.x)?, &f(t.y1)?, &f(t.y2)?)?;
        total += (rho.value() - t.rho_true).abs();
    }
    Ok(total / triplets.len() as f64)
}
