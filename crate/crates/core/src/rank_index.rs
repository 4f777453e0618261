use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::rho::RankDomain;

/// Rank -> member indices, each list in ascending index order.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankIndex(BTreeMap<i32, Vec<usize>>);

impl RankIndex {
    pub fn build(entries: impl IntoIterator<Item = (i32, usize)>) -> Self {
        let mut map: BTreeMap<i32, Vec<usize>> = BTreeMap::new();
        for (rank, idx) in entries {
            map.entry(rank).or_default().push(idx);
        }
        for v in map.values_mut() {
            v.sort_unstable();
        }
        Self(map)
    }

    pub fn members(&self, rank: i32) -> &[usize] {
        self.0.get(&rank).map_or(&[], Vec::as_slice)
    }

    pub fn is_populated(&self, rank: i32) -> bool {
        !self.members(rank).is_empty()
    }

    pub fn ranks(&self) -> impl Iterator<Item = i32> + '_ {
        self.0.keys().copied()
    }

    /// Members whose rank lies in `[lo, hi]`, ascending by rank then index.
    pub fn members_in(&self, lo: i32, hi: i32) -> Vec<usize> {
        if lo > hi {
            return Vec::new();
        }
        self.0.range(lo..=hi).flat_map(|(_, v)| v.iter().copied()).collect()
    }

    /// Largest populated rank `<= rank` inside `bounds`.
    pub fn populated_at_or_below(&self, rank: i32, bounds: &RankDomain) -> Option<i32> {
        let hi = rank.min(bounds.max);
        if hi < bounds.min {
            return None;
        }
        self.0.range(bounds.min..=hi).next_back().map(|(r, _)| *r)
    }

    /// Smallest populated rank `>= rank` inside `bounds`.
    pub fn populated_at_or_above(&self, rank: i32, bounds: &RankDomain) -> Option<i32> {
        let lo = rank.max(bounds.min);
        if lo > bounds.max {
            return None;
        }
        self.0.range(lo..=bounds.max).next().map(|(r, _)| *r)
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }
}
