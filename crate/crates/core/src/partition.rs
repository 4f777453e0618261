//! Overlapping rank-group partitions for local regressors.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, Result};
use crate::rho::RankDomain;

/// Default margin added on each side of a group for local training.
pub const DEFAULT_ALPHA: i32 = 6;

/// One closed rank interval owning a local regressor.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct RankGroup {
    pub index: usize,
    pub theta_min: i32,
    pub theta_max: i32,
    pub extended_min: i32,
    pub extended_max: i32,
}

impl RankGroup {
    fn new(index: usize, theta_min: i32, theta_max: i32, alpha: i32, domain: &RankDomain) -> Self {
        Self {
            index,
            theta_min,
            theta_max,
            extended_min: (theta_min - alpha).max(domain.min),
            extended_max: (theta_max + alpha).min(domain.max),
        }
    }

    pub fn contains(&self, rank: i32) -> bool {
        self.theta_min <= rank && rank <= self.theta_max
    }

    pub fn span(&self) -> i32 {
        self.theta_max - self.theta_min
    }

    pub fn range(&self) -> RankDomain {
        RankDomain {
            min: self.theta_min,
            max: self.theta_max,
        }
    }

    /// The rank range used for local training and local windows.
    pub fn extended(&self) -> RankDomain {
        RankDomain {
            min: self.extended_min,
            max: self.extended_max,
        }
    }
}

/// Partition schemes selectable from experiment configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PartitionKind {
    None,
    Golden5,
    Equal3,
}

impl PartitionKind {
    pub fn build(self, domain: &RankDomain, alpha: i32) -> Result<Vec<RankGroup>> {
        match self {
            PartitionKind::None => Ok(Vec::new()),
            PartitionKind::Golden5 => partition_golden(domain, alpha),
            PartitionKind::Equal3 => partition_equal(domain, 3, alpha),
        }
    }
}

fn round_half_up(x: f64) -> i32 {
    (x + 0.5).floor() as i32
}

/// Five overlapping groups whose spans grow geometrically with ratio `sqrt(phi)`.
///
/// The even groups tile the domain and the last one covers the upper half;
/// the odd groups bridge neighbouring even groups. For `[3, 85]` this yields
/// `[3,18] [10,29] [19,44] [30,62] [45,85]`.
pub fn partition_golden(domain_: &RankDomain, alpha: i32) -> Result<Vec<RankGroup>> {
    let (a, b) = (domain_.min, domain_.max);
    if b - a < 10 {
        return config(format!("golden partition needs a domain of width >= 10, got {domain_}"));
    }
    check_alpha(alpha)?;
    let phi = (1.0 + 5f64.sqrt()) / 2.0;
    let ratio = phi.sqrt();
    // s0 (1 + r^2 + r^4) = b - a - 2 with r^2 = phi
    let s0_exact = (b - a - 2) as f64 / (1.0 + phi + phi * phi);
    let s0 = round_half_up(s0_exact);
    let s2 = round_half_up(s0_exact * phi);
    let s1 = round_half_up(s0 as f64 * ratio);
    let s3 = round_half_up(s2 as f64 * ratio);

    let g0 = (a, a + s0);
    let g2 = (g0.1 + 1, g0.1 + 1 + s2);
    let g4 = (g2.1 + 1, b);
    let g1_start = (g0.0 + g0.1).div_euclid(2);
    let g1 = (g1_start, g1_start + s1);
    let g3 = (g1.1 + 1, g1.1 + 1 + s3);

    let bounds = [g0, g1, g2, g3, g4];
    let groups: Vec<RankGroup> = bounds
        .iter()
        .enumerate()
        .map(|(i, &(lo, hi))| RankGroup::new(i, lo, hi, alpha, domain_))
        .collect();
    validate_groups(&groups, domain_, true)?;
    Ok(groups)
}

/// `count` contiguous, non-overlapping groups of near-equal size. Leftover
/// ranks go to the lowest-index groups.
pub fn partition_equal(domain_: &RankDomain, count: usize, alpha: i32) -> Result<Vec<RankGroup>> {
    if count < 2 {
        return config(format!("equal partition needs at least 2 groups, got {count}"));
    }
    check_alpha(alpha)?;
    let n = domain_.len();
    if n < 2 * count {
        return config(format!(
            "equal partition of {domain_} into {count} groups leaves fewer than 2 ranks per group"
        ));
    }
    let base = n / count;
    let extra = n % count;
    let mut start = domain_.min;
    let mut groups = Vec::with_capacity(count);
    for i in 0..count {
        let size = (base + usize::from(i < extra)) as i32;
        groups.push(RankGroup::new(i, start, start + size - 1, alpha, domain_));
        start += size;
    }
    validate_groups(&groups, domain_, false)?;
    Ok(groups)
}

fn check_alpha(alpha: i32) -> Result<()> {
    if alpha < 0 {
        return config(format!("alpha must be non-negative, got {alpha}"));
    }
    Ok(())
}

fn validate_groups(groups: &[RankGroup], domain_: &RankDomain, overlapping: bool) -> Result<()> {
    for g in groups {
        if g.theta_min >= g.theta_max || !domain_.contains(g.theta_min) || !domain_.contains(g.theta_max) {
            return config(format!(
                "degenerate group {} [{}, {}] in {domain_}",
                g.index, g.theta_min, g.theta_max
            ));
        }
    }
    for pair in groups.windows(2) {
        let ok = if overlapping {
            pair[1].theta_min <= pair[0].theta_max && pair[1].theta_min > pair[0].theta_min
        } else {
            pair[1].theta_min == pair[0].theta_max + 1
        };
        if !ok {
            return config(format!(
                "groups {} and {} do not chain over {domain_}",
                pair[0].index, pair[1].index
            ));
        }
    }
    for rank in domain_.ranks() {
        if !groups.iter().any(|g| g.contains(rank)) {
            return config(format!("rank {rank} not covered by any group"));
        }
    }
    Ok(())
}

/// Indices of every group whose core range holds `rank`.
pub fn groups_containing(rank: i32, groups: &[RankGroup]) -> Result<Vec<usize>> {
    let hits: Vec<usize> = groups.iter().filter(|g| g.contains(rank)).map(|g| g.index).collect();
    if hits.is_empty() {
        return domain(format!("rank {rank} is not covered by any group"));
    }
    Ok(hits)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn d(a: i32, b: i32) -> RankDomain {
        RankDomain::new(a, b).unwrap()
    }

    fn bounds(groups: &[RankGroup]) -> Vec<(i32, i32)> {
        groups.iter().map(|g| (g.theta_min, g.theta_max)).collect()
    }

    #[test]
    fn golden_reproduces_clap_groups() {
        let groups = partition_golden(&d(3, 85), DEFAULT_ALPHA).unwrap();
        assert_eq!(bounds(&groups), vec![(3, 18), (10, 29), (19, 44), (30, 62), (45, 85)]);
        let spans: Vec<i32> = groups.iter().map(RankGroup::span).collect();
        assert_eq!(spans, vec![15, 19, 25, 32, 40]);
        for w in spans.windows(2) {
            let r = w[1] as f64 / w[0] as f64;
            assert!((1.24..=1.32).contains(&r), "ratio {r}");
        }
    }

    #[test]
    fn golden_is_translation_equivariant() {
        let base = partition_golden(&d(3, 85), 6).unwrap();
        let shifted = partition_golden(&d(1, 83), 6).unwrap();
        for (g, h) in base.iter().zip(&shifted) {
            assert_eq!((g.theta_min - 2, g.theta_max - 2), (h.theta_min, h.theta_max));
        }
    }

    #[test]
    fn golden_extended_ranges() {
        let groups = partition_golden(&d(3, 85), 6).unwrap();
        assert_eq!((groups[0].extended_min, groups[0].extended_max), (3, 24));
        assert_eq!((groups[2].extended_min, groups[2].extended_max), (13, 50));
        assert_eq!((groups[4].extended_min, groups[4].extended_max), (39, 85));
    }

    #[test]
    fn golden_small_domains() {
        assert!(partition_golden(&d(1, 10), 6).is_err());
        for width in 10..200 {
            let groups = partition_golden(&d(1, 1 + width), 6).unwrap();
            assert_eq!(groups.len(), 5);
        }
    }

    #[test]
    fn equal_partitions() {
        let g = partition_equal(&d(0, 7), 3, 6).unwrap();
        assert_eq!(bounds(&g), vec![(0, 2), (3, 5), (6, 7)]);
        let g = partition_equal(&d(1, 6), 3, 6).unwrap();
        assert_eq!(bounds(&g), vec![(1, 2), (3, 4), (5, 6)]);
        assert!(partition_equal(&d(1, 5), 5, 6).is_err());
        assert!(partition_equal(&d(1, 50), 1, 6).is_err());
    }

    #[test]
    fn containing_groups() {
        let g = partition_golden(&d(3, 85), 6).unwrap();
        assert_eq!(groups_containing(15, &g).unwrap(), vec![0, 1]);
        assert_eq!(groups_containing(5, &g).unwrap(), vec![0]);
        assert_eq!(groups_containing(3, &g).unwrap(), vec![0]);
        assert_eq!(groups_containing(85, &g).unwrap(), vec![4]);
        assert!(groups_containing(2, &g).is_err());
        for rank in 3..=85 {
            let n = groups_containing(rank, &g).unwrap().len();
            assert!(n == 1 || n == 2);
        }
        let eq = partition_equal(&d(1, 80), 3, 6).unwrap();
        for rank in 1..=80 {
            assert_eq!(groups_containing(rank, &eq).unwrap().len(), 1);
        }
    }
}
