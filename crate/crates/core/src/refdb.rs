//! Reference database: cached training features, an exact kNN index, and the
//! reference pair chosen offline for every search window.
//!
//! One [`ReferenceSet`] exists per regressor (index 0 global, `i + 1` local
//! group `i`). Each set maps a resolved window `(low, high)` to the pair used
//! at inference. Pairs are ranked by their γ-error: the mean absolute ρ error
//! of the set's model over training instances near the window.

use std::fs;
use std::path::Path;

use rand::seq::{index, IndexedRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{config, MwrError, Result};
use crate::harness::dataset::{Dataset, Split};
use crate::harness::io::{mix_seed, write_atomic};
use crate::neural::{Branch, RhoRegressor};
use crate::partition::RankGroup;
use crate::rank_index::RankIndex;
use crate::rho::{make_window, rho_rank, RankDomain, RankScale, SearchWindow};

pub const REFDB_FORMAT_VERSION: u32 = 1;
const REFDB_MAGIC: &[u8; 8] = b"MWRREFDB";

const STREAM_CANDIDATES: u64 = 11;
const STREAM_POOL: u64 = 12;
const STREAM_RANDOM: u64 = 13;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SchemeKind {
    Random,
    MinGamma,
    MaxGamma,
}

impl SchemeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            SchemeKind::Random => "random",
            SchemeKind::MinGamma => "min",
            SchemeKind::MaxGamma => "max",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SelectionScheme {
    pub kind: SchemeKind,
    /// Only used by [`SchemeKind::Random`].
    pub seed: u64,
}

impl SelectionScheme {
    pub fn min_gamma() -> Self {
        Self {
            kind: SchemeKind::MinGamma,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefDbConfig {
    /// Maximum γ pool size per window (subsampled with a fixed seed).
    pub pool_cap: usize,
    /// Maximum candidate references per endpoint rank.
    pub candidates_per_rank: usize,
    pub seed: u64,
}

impl Default for RefDbConfig {
    fn default() -> Self {
        Self {
            pool_cap: 256,
            candidates_per_rank: 8,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RefInstance {
    pub id: u64,
    pub rank: i32,
}

/// Row-major feature matrix for all reference instances under one encoder.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureCache {
    pub label: String,
    /// Digest of the model that produced the features, or `"raw"`.
    pub digest: String,
    pub dim: usize,
    pub rows: usize,
    #[serde(skip)]
    pub data: Vec<f64>,
}

impl FeatureCache {
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    fn raw(dataset: &Dataset, members: &[usize]) -> Self {
        let data = members
            .iter()
            .flat_map(|&i| dataset.instances[i].features.iter().copied())
            .collect();
        Self {
            label: "raw".into(),
            digest: "raw".into(),
            dim: dataset.feature_dim,
            rows: members.len(),
            data,
        }
    }

    fn encoded(label: &str, model: &RhoRegressor, dataset: &Dataset, members: &[usize]) -> Result<Self> {
        let rows = members
            .par_iter()
            .map(|&i| model.encode(&dataset.instances[i].features))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            label: label.into(),
            digest: model.digest(),
            dim: model.feature_dim(),
            rows: members.len(),
            data: rows.concat(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KnnSpace {
    /// Raw input features (oracle runs).
    Raw,
    /// Features from the global regressor's encoder.
    Global,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SelectedPair {
    pub y1: usize,
    pub y2: usize,
    pub gamma: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct WindowEntry {
    pub low: i32,
    pub high: i32,
    pub pair: SelectedPair,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSet {
    pub label: String,
    pub group: Option<RankGroup>,
    /// Windows are clipped into this range.
    pub bounds: RankDomain,
    /// Sorted by `(low, high)`.
    pub windows: Vec<WindowEntry>,
}

impl ReferenceSet {
    pub fn lookup(&self, low: i32, high: i32) -> Option<&SelectedPair> {
        self.windows
            .binary_search_by(|e| (e.low, e.high).cmp(&(low, high)))
            .ok()
            .map(|k| &self.windows[k].pair)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceDatabase {
    pub format_version: u32,
    pub scale: RankScale,
    pub alpha: i32,
    pub domain: RankDomain,
    pub scheme: SelectionScheme,
    pub config: RefDbConfig,
    pub knn_space: KnnSpace,
    /// Sorted by id, so index order is id order.
    pub instances: Vec<RefInstance>,
    pub rank_index: RankIndex,
    pub knn: FeatureCache,
    /// One cache per set when built from trained models; empty for oracle runs.
    pub features: Vec<FeatureCache>,
    pub sets: Vec<ReferenceSet>,
    /// Run that built the database.
    #[serde(default)]
    pub run_id: Option<String>,
}

/// Nearest populated ranks for a window's endpoints, keeping `low < high`.
///
/// Each endpoint first looks outward (down for `low`, up for `high`), then
/// inward, staying inside `bounds`.
pub fn resolve_endpoints(index: &RankIndex, window: &SearchWindow, bounds: &RankDomain) -> Result<(i32, i32)> {
    let low = index
        .populated_at_or_below(window.low_rank, bounds)
        .or_else(|| index.populated_at_or_above(window.low_rank, bounds));
    let high = index
        .populated_at_or_above(window.high_rank, bounds)
        .or_else(|| index.populated_at_or_below(window.high_rank, bounds));
    let (Some(mut low), Some(mut high)) = (low, high) else {
        return Err(MwrError::Inference(format!(
            "no populated reference rank in {bounds} for window [{}, {}]",
            window.low_rank, window.high_rank
        )));
    };
    if low >= high {
        if let Some(h) = index.populated_at_or_above(low + 1, bounds) {
            high = h;
        } else if let Some(l) = index.populated_at_or_below(high - 1, bounds) {
            low = l;
        }
    }
    if low >= high {
        return Err(MwrError::Inference(format!(
            "fewer than two populated ranks in {bounds} for window [{}, {}]",
            window.low_rank, window.high_rank
        )));
    }
    Ok((low, high))
}

/// γ-error of the pair `(y1, y2)`: mean `|rho_hat - rho|` over `pool`,
/// skipping the references themselves. Indices refer to the database.
pub fn gamma_error(
    model: &RhoRegressor,
    features: &FeatureCache,
    ranks: &[i32],
    scale: &RankScale,
    y1: usize,
    y2: usize,
    pool: &[usize],
) -> Result<f64> {
    let (r1, r2) = (ranks[y1] as f64, ranks[y2] as f64);
    let mut total = 0.0;
    let mut n = 0usize;
    for &x in pool.iter().filter(|&&x| x != y1 && x != y2) {
        let hat = model.regress_rho(features.row(x), features.row(y1), features.row(y2))?;
        let truth = rho_rank(ranks[x] as f64, r1, r2, scale)?;
        total += (hat.value() - truth.value()).abs();
        n += 1;
    }
    if n == 0 {
        return Err(MwrError::Selection(format!(
            "empty gamma pool for references {y1} and {y2}"
        )));
    }
    Ok(total / n as f64)
}

#[derive(Debug, Clone)]
struct WindowCandidates {
    low: i32,
    high: i32,
    /// `(y1, y2, gamma)` in lexicographic index order; gamma is `None` when the
    /// pool is empty or no model was supplied.
    pairs: Vec<(usize, usize, Option<f64>)>,
}

/// Every candidate pair of every window with its γ-error. Selecting a
/// scheme from the same tables is cheap, so sweeps build this once.
#[derive(Debug, Clone)]
pub struct GammaTables {
    base: ReferenceDatabase,
    candidates: Vec<Vec<WindowCandidates>>,
}

pub struct RefDbBuilder<'a> {
    pub dataset: &'a Dataset,
    pub scale: RankScale,
    pub alpha: i32,
    pub groups: Vec<RankGroup>,
    pub config: RefDbConfig,
}

impl<'a> RefDbBuilder<'a> {
    fn skeleton(&self, knn_space: KnnSpace, knn: FeatureCache, members: &[usize]) -> Result<ReferenceDatabase> {
        let instances: Vec<RefInstance> = members
            .iter()
            .map(|&i| RefInstance {
                id: self.dataset.instances[i].id,
                rank: self.dataset.instances[i].rank,
            })
            .collect();
        let rank_index = RankIndex::build(instances.iter().enumerate().map(|(k, r)| (r.rank, k)));
        let mut sets = vec![ReferenceSet {
            label: "global".into(),
            group: None,
            bounds: self.dataset.rank_domain,
            windows: Vec::new(),
        }];
        for g in &self.groups {
            sets.push(ReferenceSet {
                label: format!("local-{}", g.index),
                group: Some(*g),
                bounds: g.extended(),
                windows: Vec::new(),
            });
        }
        Ok(ReferenceDatabase {
            format_version: REFDB_FORMAT_VERSION,
            scale: self.scale,
            alpha: self.alpha,
            domain: self.dataset.rank_domain,
            scheme: SelectionScheme::min_gamma(),
            config: self.config,
            knn_space,
            instances,
            rank_index,
            knn,
            features: Vec::new(),
            sets,
            run_id: None,
        })
    }

    /// Training members sorted by id.
    fn members(&self) -> Result<Vec<usize>> {
        let mut members = self.dataset.require_split(Split::Train)?;
        members.sort_by_key(|&i| self.dataset.instances[i].id);
        Ok(members)
    }

    fn check(&self) -> Result<()> {
        self.scale.validate_domain(&self.dataset.rank_domain)?;
        if self.config.pool_cap == 0 || self.config.candidates_per_rank == 0 {
            return config("pool_cap and candidates_per_rank must be positive");
        }
        Ok(())
    }

    /// Tables for oracle runs: kNN over raw features, no γ values.
    pub fn oracle(&self) -> Result<GammaTables> {
        self.check()?;
        let members = self.members()?;
        let base = self.skeleton(KnnSpace::Raw, FeatureCache::raw(self.dataset, &members), &members)?;
        let candidates = (0..base.sets.len())
            .map(|s| {
                base.window_keys(s)?
                    .into_iter()
                    .map(|(low, high)| {
                        let (lows, highs) = base.capped_candidates(low, high);
                        let pairs = lows
                            .iter()
                            .flat_map(|&a| highs.iter().map(move |&b| (a, b, None)))
                            .collect();
                        Ok(WindowCandidates { low, high, pairs })
                    })
                    .collect::<Result<Vec<_>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(GammaTables { base, candidates })
    }

    /// Tables from trained models: features cached per model, γ for every
    /// candidate pair.
    pub fn neural(&self, global: &RhoRegressor, locals: &[&RhoRegressor]) -> Result<GammaTables> {
        self.check()?;
        if locals.len() != self.groups.len() {
            return config(format!(
                "{} local models for {} groups",
                locals.len(),
                self.groups.len()
            ));
        }
        let members = self.members()?;
        let knn = FeatureCache::encoded("global", global, self.dataset, &members)?;
        let mut base = self.skeleton(KnnSpace::Global, knn.clone(), &members)?;
        let models: Vec<&RhoRegressor> = std::iter::once(global).chain(locals.iter().copied()).collect();
        base.features.push(knn);
        for (k, m) in models.iter().enumerate().skip(1) {
            base.features
                .push(FeatureCache::encoded(&base.sets[k].label, m, self.dataset, &members)?);
        }
        let ranks: Vec<i32> = base.instances.iter().map(|r| r.rank).collect();
        let mut candidates = Vec::with_capacity(models.len());
        for (s, model) in models.iter().enumerate() {
            let cache = &base.features[s];
            let project = |b: Branch| -> Vec<Vec<f64>> {
                (0..cache.rows)
                    .into_par_iter()
                    .map(|i| model.project(b, cache.row(i)))
                    .collect()
            };
            let (px, p1, p2) = (project(Branch::Input), project(Branch::Lower), project(Branch::Upper));
            let keys = base.window_keys(s)?;
            let scale = self.scale;
            let alpha = self.alpha;
            let base_ref = &base;
            let tables = keys
                .par_iter()
                .map(|&(low, high)| {
                    let pool = base_ref.gamma_pool(s, low, high, alpha);
                    let (lows, highs) = base_ref.capped_candidates(low, high);
                    let mut pairs = Vec::with_capacity(lows.len() * highs.len());
                    for &y1 in &lows {
                        for &y2 in &highs {
                            let mut total = 0.0;
                            let mut n = 0usize;
                            for &x in pool.iter().filter(|&&x| x != y1 && x != y2) {
                                let hat = model.rho_from_projections(&px[x], &p1[y1], &p2[y2]).clamp(-1.0, 1.0);
                                let truth = rho_rank(ranks[x] as f64, low as f64, high as f64, &scale)?.value();
                                total += (hat - truth).abs();
                                n += 1;
                            }
                            pairs.push((y1, y2, (n > 0).then(|| total / n as f64)));
                        }
                    }
                    Ok(WindowCandidates { low, high, pairs })
                })
                .collect::<Result<Vec<_>>>()?;
            candidates.push(tables);
        }
        Ok(GammaTables { base, candidates })
    }
}

impl GammaTables {
    pub fn database(&self) -> &ReferenceDatabase {
        &self.base
    }

    /// Picks one pair per window under `scheme`.
    pub fn select(&self, scheme: SelectionScheme) -> Result<ReferenceDatabase> {
        let mut db = self.base.clone();
        db.scheme = scheme;
        for (s, windows) in self.candidates.iter().enumerate() {
            let mut entries = Vec::with_capacity(windows.len());
            for w in windows {
                let pair = match scheme.kind {
                    SchemeKind::Random => {
                        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
                            scheme.seed,
                            STREAM_RANDOM,
                            s as u64,
                            w.low as u64,
                            w.high as u64,
                        ]));
                        let y1 = *db.rank_index.members(w.low).choose(&mut rng).expect("populated");
                        let y2 = *db.rank_index.members(w.high).choose(&mut rng).expect("populated");
                        let gamma = w.pairs.iter().find(|p| p.0 == y1 && p.1 == y2).and_then(|p| p.2);
                        SelectedPair { y1, y2, gamma }
                    }
                    SchemeKind::MinGamma | SchemeKind::MaxGamma => {
                        pick_extreme(&w.pairs, scheme.kind).ok_or_else(|| {
                            MwrError::Selection(format!("window [{}, {}] has no candidates", w.low, w.high))
                        })?
                    }
                };
                entries.push(WindowEntry {
                    low: w.low,
                    high: w.high,
                    pair,
                });
            }
            db.sets[s].windows = entries;
        }
        Ok(db)
    }

    /// All candidates of one window, for inspection and tests.
    pub fn candidates(&self, set: usize, low: i32, high: i32) -> Option<&[(usize, usize, Option<f64>)]> {
        self.candidates
            .get(set)?
            .iter()
            .find(|w| w.low == low && w.high == high)
            .map(|w| w.pairs.as_slice())
    }
}

/// Min or max γ, ties broken by the lowest `(y1, y2)`. Pairs without γ are
/// used only when no pair has one.
fn pick_extreme(pairs: &[(usize, usize, Option<f64>)], kind: SchemeKind) -> Option<SelectedPair> {
    let mut best: Option<(usize, usize, f64)> = None;
    for &(y1, y2, g) in pairs {
        let Some(g) = g else { continue };
        let better = match best {
            None => true,
            Some((_, _, b)) => match kind {
                SchemeKind::MaxGamma => g > b,
                _ => g < b,
            },
        };
        if better {
            best = Some((y1, y2, g));
        }
    }
    match best {
        Some((y1, y2, g)) => Some(SelectedPair { y1, y2, gamma: Some(g) }),
        None => pairs.first().map(|&(y1, y2, _)| SelectedPair { y1, y2, gamma: None }),
    }
}

impl ReferenceDatabase {
    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    pub fn rank(&self, i: usize) -> i32 {
        self.instances[i].rank
    }

    pub fn groups(&self) -> Vec<RankGroup> {
        self.sets.iter().filter_map(|s| s.group).collect()
    }

    /// Resolved window keys reachable from each centre of set `s`.
    fn window_keys(&self, s: usize) -> Result<Vec<(i32, i32)>> {
        let set = &self.sets[s];
        let centers = set.group.map_or(self.domain, |g| g.range());
        let mut keys = Vec::new();
        for c in centers.ranks() {
            let w = make_window(c, &self.scale, &set.bounds)?;
            keys.push(resolve_endpoints(&self.rank_index, &w, &set.bounds)?);
        }
        keys.sort_unstable();
        keys.dedup();
        Ok(keys)
    }

    fn capped(&self, rank: i32) -> Vec<usize> {
        let members = self.rank_index.members(rank);
        let cap = self.config.candidates_per_rank;
        if members.len() <= cap {
            return members.to_vec();
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[self.config.seed, STREAM_CANDIDATES, rank as u64]));
        let mut picked: Vec<usize> = index::sample(&mut rng, members.len(), cap)
            .into_iter()
            .map(|k| members[k])
            .collect();
        picked.sort_unstable();
        picked
    }

    fn capped_candidates(&self, low: i32, high: i32) -> (Vec<usize>, Vec<usize>) {
        (self.capped(low), self.capped(high))
    }

    /// Training instances with rank in `[low - alpha, high + alpha]`,
    /// subsampled to `pool_cap`.
    pub fn gamma_pool(&self, set: usize, low: i32, high: i32, alpha: i32) -> Vec<usize> {
        let all = self.rank_index.members_in(low - alpha, high + alpha);
        let cap = self.config.pool_cap;
        if all.len() <= cap {
            return all;
        }
        let mut rng = ChaCha8Rng::seed_from_u64(mix_seed(&[
            self.config.seed,
            STREAM_POOL,
            set as u64,
            low as u64,
            high as u64,
        ]));
        let mut picked: Vec<usize> = index::sample(&mut rng, all.len(), cap)
            .into_iter()
            .map(|k| all[k])
            .collect();
        picked.sort_unstable();
        picked
    }

    /// The stored reference pair for `window` in set `set`.
    pub fn select_references(&self, set: usize, window: &SearchWindow) -> Result<SelectedPair> {
        let s = self
            .sets
            .get(set)
            .ok_or_else(|| MwrError::Inference(format!("no reference set {set}")))?;
        let (low, high) = resolve_endpoints(&self.rank_index, window, &s.bounds)?;
        s.lookup(low, high)
            .copied()
            .ok_or_else(|| MwrError::Inference(format!("no stored pair for window [{low}, {high}] in set {}", s.label)))
    }

    /// Ranks of the `k` nearest references by Euclidean distance; ties by id.
    pub fn knn_ranks(&self, feature: &[f64], k: usize) -> Result<Vec<i32>> {
        if k == 0 || k > self.len() {
            return config(format!("k = {k} but the database has {} instances", self.len()));
        }
        if feature.len() != self.knn.dim {
            return Err(MwrError::Shape {
                context: "knn query",
                expected: self.knn.dim,
                got: feature.len(),
            });
        }
        let mut dist: Vec<(f64, usize)> = (0..self.len())
            .map(|i| {
                let d = self
                    .knn
                    .row(i)
                    .iter()
                    .zip(feature)
                    .map(|(a, b)| (a - b) * (a - b))
                    .sum::<f64>();
                (d, i)
            })
            .collect();
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        dist.select_nth_unstable_by(k - 1, cmp);
        dist.truncate(k);
        dist.sort_by(cmp);
        Ok(dist.into_iter().map(|(_, i)| self.rank(i)).collect())
    }

    /// Query feature in the kNN space for a raw input.
    pub fn knn_feature(&self, raw: &[f64], global: Option<&RhoRegressor>) -> Result<Vec<f64>> {
        match (self.knn_space, global) {
            (KnnSpace::Raw, _) => Ok(raw.to_vec()),
            (KnnSpace::Global, Some(m)) => m.encode(raw),
            (KnnSpace::Global, None) => Err(MwrError::Inference("kNN space needs the global model".into())),
        }
    }

    /// Refuses models whose digests differ from those the caches were built with.
    pub fn verify_models(&self, models: &[&RhoRegressor]) -> Result<()> {
        if models.len() != self.features.len() {
            return config(format!(
                "database holds {} model caches, {} models supplied",
                self.features.len(),
                models.len()
            ));
        }
        for (cache, m) in self.features.iter().zip(models) {
            let d = m.digest();
            if d != cache.digest {
                return Err(MwrError::StaleDigest {
                    expected: cache.digest.clone(),
                    found: d,
                });
            }
        }
        Ok(())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let header = serde_json::to_vec(self)?;
        let mut out = Vec::with_capacity(24 + header.len());
        out.extend_from_slice(REFDB_MAGIC);
        out.extend_from_slice(&REFDB_FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        for cache in std::iter::once(&self.knn).chain(&self.features) {
            for v in &cache.data {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| MwrError::Format(format!("reference database: {m}"));
        if bytes.len() < 20 || &bytes[..8] != REFDB_MAGIC {
            return Err(bad("missing magic"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != REFDB_FORMAT_VERSION {
            return Err(bad(&format!("unsupported version {version}")));
        }
        let header_len = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(header_len)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let mut db: ReferenceDatabase = serde_json::from_slice(&bytes[20..header_end])?;
        let mut cursor = header_end;
        for cache in std::iter::once(&mut db.knn).chain(db.features.iter_mut()) {
            let n = cache.rows * cache.dim;
            let end = cursor + n * 8;
            if end > bytes.len() {
                return Err(bad("truncated feature block"));
            }
            cache.data = bytes[cursor..end]
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            cursor = end;
        }
        if cursor != bytes.len() {
            return Err(bad("trailing bytes"));
        }
        Ok(db)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Loads and checks that `models` match the cached features.
    pub fn load_verified(path: &Path, models: &[&RhoRegressor]) -> Result<Self> {
        let db = Self::load(path)?;
        db.verify_models(models)?;
        Ok(db)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::dataset::Instance;
    use crate::neural::{EncoderSpec, RegressionHeadSpec, RegressorSpec};

    fn dataset(ranks: &[i32], domain: (i32, i32)) -> Dataset {
        let instances = ranks
            .iter()
            .enumerate()
            .map(|(k, &r)| Instance {
                id: 100 + k as u64,
                rank: r,
                sigma: None,
                split: Split::Train,
                features: vec![r as f64, (k % 3) as f64 * 0.1],
            })
            .collect();
        Dataset::new(instances, RankDomain::new(domain.0, domain.1).unwrap()).unwrap()
    }

    fn builder(ds: &Dataset) -> RefDbBuilder<'_> {
        RefDbBuilder {
            dataset: ds,
            scale: RankScale::arithmetic(3),
            alpha: 6,
            groups: Vec::new(),
            config: RefDbConfig::default(),
        }
    }

    fn spec() -> RegressorSpec {
        RegressorSpec {
            encoder: EncoderSpec {
                input_dim: 2,
                hidden_dims: vec![5],
                output_dim: 3,
            },
            head: RegressionHeadSpec { layer_dims: [6, 4, 1] },
        }
    }

    #[test]
    fn endpoint_fallback() {
        let idx = RankIndex::build([(10, 0), (14, 1), (20, 2)]);
        let b = RankDomain::new(1, 30).unwrap();
        let w = |lo, hi| SearchWindow {
            low_rank: lo,
            high_rank: hi,
            center: (lo + hi) / 2,
        };
        assert_eq!(resolve_endpoints(&idx, &w(11, 17), &b).unwrap(), (10, 20));
        assert_eq!(resolve_endpoints(&idx, &w(10, 14), &b).unwrap(), (10, 14));
        assert_eq!(resolve_endpoints(&idx, &w(21, 25), &b).unwrap(), (14, 20));
        assert_eq!(resolve_endpoints(&idx, &w(1, 5), &b).unwrap(), (10, 14));
        let single = RankIndex::build([(10, 0), (10, 1)]);
        assert!(resolve_endpoints(&single, &w(8, 12), &b).is_err());
    }

    #[test]
    fn knn_matches_exhaustive_sort() {
        let ranks = [5, 9, 2, 7, 7, 1, 3, 8, 6, 4];
        let ds = dataset(&ranks, (1, 10));
        let db = builder(&ds)
            .oracle()
            .unwrap()
            .select(SelectionScheme::min_gamma())
            .unwrap();
        let q = [6.4, 0.05];
        let mut brute: Vec<(f64, u64, i32)> = ds
            .instances
            .iter()
            .map(|i| {
                let d = ((i.features[0] - q[0]).powi(2) + (i.features[1] - q[1]).powi(2)).sqrt();
                (d, i.id, i.rank)
            })
            .collect();
        brute.sort_by(|a, b| a.0.partial_cmp(&b.0).unwrap().then(a.1.cmp(&b.1)));
        let expect: Vec<i32> = brute.iter().take(5).map(|b| b.2).collect();
        assert_eq!(db.knn_ranks(&q, 5).unwrap(), expect);
        assert_eq!(db.knn_ranks(&ds.instances[3].features, 1).unwrap(), vec![7]);
        let mut all = db.knn_ranks(&q, 10).unwrap();
        all.sort_unstable();
        let mut sorted = ranks.to_vec();
        sorted.sort_unstable();
        assert_eq!(all, sorted);
        assert!(db.knn_ranks(&q, 11).is_err());
        assert!(db.knn_ranks(&q, 0).is_err());
        assert!(db.knn_ranks(&[1.0], 1).is_err());
    }

    #[test]
    fn gamma_matches_brute_force_mean() {
        let ds = dataset(&[10, 11, 12, 13, 14, 15, 16, 10, 16], (10, 16));
        let tables = builder(&ds)
            .neural(&RhoRegressor::new(spec(), 3).unwrap(), &[])
            .unwrap();
        let db = tables.database();
        let model = RhoRegressor::new(spec(), 3).unwrap();
        let ranks: Vec<i32> = db.instances.iter().map(|r| r.rank).collect();
        let (y1, y2) = (0usize, 6usize);
        let pool = [1, 2, 3, 4, 5];
        let g = gamma_error(&model, &db.features[0], &ranks, &db.scale, y1, y2, &pool).unwrap();
        let mut manual = 0.0;
        for &x in &pool {
            let f = |i: usize| model.encode(&ds.instances[i].features).unwrap();
            let hat = model.regress_rho(&f(x), &f(y1), &f(y2)).unwrap().value();
            let truth = (ranks[x] as f64 - 13.0) / 3.0;
            manual += (hat - truth).abs();
        }
        assert!((g - manual / 5.0).abs() < 1e-12);
        assert!((0.0..=2.0).contains(&g));
        assert!(matches!(
            gamma_error(&model, &db.features[0], &ranks, &db.scale, y1, y2, &[y1, y2]),
            Err(MwrError::Selection(_))
        ));
    }

    #[test]
    fn gamma_edge_values() {
        // A zero head outputs 0, so gamma is the mean |rho| of the pool.
        let ds = dataset(&[10, 16, 20, 20], (10, 20));
        let zero = RhoRegressor::zeros(spec()).unwrap();
        let tables = builder(&ds).neural(&zero, &[]).unwrap();
        let db = tables.database();
        let ranks: Vec<i32> = db.instances.iter().map(|r| r.rank).collect();
        let g = gamma_error(&zero, &db.features[0], &ranks, &db.scale, 0, 1, &[2, 3]).unwrap();
        assert_eq!(g, 1.0);
    }

    #[test]
    fn min_gamma_is_minimal_and_max_is_maximal() {
        let ranks: Vec<i32> = (0..120).map(|k| 1 + k % 20).collect();
        let ds = dataset(&ranks, (1, 20));
        let model = RhoRegressor::new(spec(), 5).unwrap();
        let tables = builder(&ds).neural(&model, &[]).unwrap();
        let min = tables.select(SelectionScheme::min_gamma()).unwrap();
        let max = tables
            .select(SelectionScheme {
                kind: SchemeKind::MaxGamma,
                seed: 0,
            })
            .unwrap();
        for (a, b) in min.sets[0].windows.iter().zip(&max.sets[0].windows) {
            let all = tables.candidates(0, a.low, a.high).unwrap();
            let gammas: Vec<f64> = all.iter().filter_map(|p| p.2).collect();
            let lo = gammas.iter().copied().fold(f64::INFINITY, f64::min);
            let hi = gammas.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(a.pair.gamma, Some(lo));
            assert_eq!(b.pair.gamma, Some(hi));
            // stored gamma agrees with the reference implementation
            let pool = min.gamma_pool(0, a.low, a.high, min.alpha);
            let ranks: Vec<i32> = min.instances.iter().map(|r| r.rank).collect();
            let direct = gamma_error(
                &model,
                &min.features[0],
                &ranks,
                &min.scale,
                a.pair.y1,
                a.pair.y2,
                &pool,
            )
            .unwrap();
            assert!((direct - lo).abs() < 1e-12);
        }
    }

    #[test]
    fn extreme_pick_rules() {
        let pairs = [(0, 5, Some(0.3)), (1, 5, Some(0.1)), (2, 5, Some(0.1)), (3, 5, None)];
        assert_eq!(pick_extreme(&pairs, SchemeKind::MinGamma).unwrap().y1, 1);
        assert_eq!(pick_extreme(&pairs, SchemeKind::MaxGamma).unwrap().y1, 0);
        let one = [(4, 9, Some(0.7))];
        for k in [SchemeKind::MinGamma, SchemeKind::MaxGamma] {
            assert_eq!(pick_extreme(&one, k).unwrap().y1, 4);
        }
        assert_eq!(pick_extreme(&[(1, 2, None)], SchemeKind::MinGamma).unwrap().gamma, None);
    }

    #[test]
    fn random_scheme_is_reproducible() {
        let ranks: Vec<i32> = (0..120).map(|k| 1 + k % 20).collect();
        let ds = dataset(&ranks, (1, 20));
        let tables = builder(&ds).oracle().unwrap();
        let scheme = SelectionScheme {
            kind: SchemeKind::Random,
            seed: 17,
        };
        assert_eq!(tables.select(scheme).unwrap(), tables.select(scheme).unwrap());
        let other = tables.select(SelectionScheme { seed: 18, ..scheme }).unwrap();
        assert_ne!(other.sets[0].windows, tables.select(scheme).unwrap().sets[0].windows);
    }

    #[test]
    fn file_round_trip_and_staleness() {
        let ranks: Vec<i32> = (0..60).map(|k| 1 + k % 20).collect();
        let ds = dataset(&ranks, (1, 20));
        let model = RhoRegressor::new(spec(), 5).unwrap();
        let db = builder(&ds)
            .neural(&model, &[])
            .unwrap()
            .select(SelectionScheme::min_gamma())
            .unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("refdb.bin");
        db.save(&path).unwrap();
        let back = ReferenceDatabase::load_verified(&path, &[&model]).unwrap();
        assert_eq!(back, db);
        // cached features equal fresh encodings bit for bit
        for (k, inst) in back.instances.iter().enumerate() {
            let src = ds.instances.iter().find(|i| i.id == inst.id).unwrap();
            let fresh = model.encode(&src.features).unwrap();
            assert!(fresh
                .iter()
                .zip(back.features[0].row(k))
                .all(|(a, b)| a.to_bits() == b.to_bits()));
        }
        let other = RhoRegressor::new(spec(), 6).unwrap();
        assert!(matches!(
            ReferenceDatabase::load_verified(&path, &[&other]),
            Err(MwrError::StaleDigest { .. })
        ));
        let mut bytes = db.to_bytes().unwrap();
        bytes.pop();
        assert!(ReferenceDatabase::from_bytes(&bytes).is_err());
        assert!(ReferenceDatabase::from_bytes(b"garbage").is_err());
    }
}
