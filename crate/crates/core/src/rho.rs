//! Relative-rank arithmetic.
//!
//! A ρ-rank places an instance relative to a pair of references: `-1` at the
//! lower reference, `+1` at the upper one, `0` halfway. Under the geometric
//! scale every rank is replaced by its natural logarithm before the
//! arithmetic, so windows widen as ranks grow.

use serde::{Deserialize, Serialize};

use crate::error::{config, domain, MwrError, Result};

/// Closed integer rank interval `[min, max]`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct RankDomain {
    pub min: i32,
    pub max: i32,
}

impl RankDomain {
    pub fn new(min: i32, max: i32) -> Result<Self> {
        if min > max {
            return domain(format!("empty rank domain [{min}, {max}]"));
        }
        Ok(Self { min, max })
    }

    pub fn contains(&self, rank: i32) -> bool {
        self.min <= rank && rank <= self.max
    }

    pub fn clamp(&self, rank: i32) -> i32 {
        rank.clamp(self.min, self.max)
    }

    /// Number of integer ranks in the interval.
    pub fn len(&self) -> usize {
        (self.max - self.min + 1) as usize
    }

    pub fn is_empty(&self) -> bool {
        self.max < self.min
    }

    pub fn ranks(&self) -> std::ops::RangeInclusive<i32> {
        self.min..=self.max
    }
}

impl std::fmt::Display for RankDomain {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "[{}, {}]", self.min, self.max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScaleKind {
    Arithmetic,
    Geometric,
}

impl ScaleKind {
    /// Short name used on the command line and in sweep output.
    pub fn as_str(self) -> &'static str {
        match self {
            ScaleKind::Arithmetic => "ari",
            ScaleKind::Geometric => "geo",
        }
    }
}

/// Rank scale plus the fixed half-window `tau`.
///
/// `tau` is in rank units for [`ScaleKind::Arithmetic`] (and must be a whole
/// number there) and in natural-log units for [`ScaleKind::Geometric`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RankScale {
    pub kind: ScaleKind,
    pub tau: f64,
}

impl RankScale {
    pub fn new(kind: ScaleKind, tau: f64) -> Result<Self> {
        if !(tau.is_finite() && tau > 0.0) {
            return config(format!("tau must be positive and finite, got {tau}"));
        }
        if kind == ScaleKind::Arithmetic && tau.fract() != 0.0 {
            return config(format!("arithmetic tau must be a whole number, got {tau}"));
        }
        Ok(Self { kind, tau })
    }

    pub fn arithmetic(tau: u32) -> Self {
        Self::new(ScaleKind::Arithmetic, tau as f64).expect("positive integer tau")
    }

    pub fn geometric(tau: f64) -> Result<Self> {
        Self::new(ScaleKind::Geometric, tau)
    }

    /// Checks that the scale can operate over `domain`.
    pub fn validate_domain(&self, domain: &RankDomain) -> Result<()> {
        if self.kind == ScaleKind::Geometric && domain.min < 1 {
            return config(format!("geometric scale needs ranks >= 1, domain is {domain}"));
        }
        Ok(())
    }

    /// Maps a rank into the working space (identity or natural log).
    pub fn to_working(&self, theta: f64) -> Result<f64> {
        if !theta.is_finite() {
            return domain(format!("non-finite rank {theta}"));
        }
        match self.kind {
            ScaleKind::Arithmetic => Ok(theta),
            ScaleKind::Geometric => {
                if theta < 1.0 {
                    return domain(format!("geometric scale needs ranks >= 1, got {theta}"));
                }
                Ok(theta.ln())
            }
        }
    }

    pub fn from_working(&self, value: f64) -> f64 {
        match self.kind {
            ScaleKind::Arithmetic => value,
            ScaleKind::Geometric => value.exp(),
        }
    }
}

impl std::fmt::Display for RankScale {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self.kind {
            ScaleKind::Arithmetic => write!(f, "ari(tau={})", self.tau),
            ScaleKind::Geometric => write!(f, "geo(tau={})", self.tau),
        }
    }
}

/// A relative rank in `[-1, 1]`.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize)]
pub struct RhoRank(f64);

impl RhoRank {
    pub fn new(value: f64) -> Result<Self> {
        if !(-1.0..=1.0).contains(&value) {
            return domain(format!("rho-rank {value} outside [-1, 1]"));
        }
        Ok(Self(value))
    }

    /// Clamps into `[-1, 1]`; NaN is rejected.
    pub fn clamped(value: f64) -> Result<Self> {
        if value.is_nan() {
            return domain("rho-rank is NaN");
        }
        Ok(Self(value.clamp(-1.0, 1.0)))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

fn reference_stats(theta_y1: f64, theta_y2: f64, scale: &RankScale) -> Result<(f64, f64)> {
    if !(theta_y1 < theta_y2) {
        return domain(format!(
            "references must satisfy y1 < y2, got {theta_y1} and {theta_y2}"
        ));
    }
    let lo = scale.to_working(theta_y1)?;
    let hi = scale.to_working(theta_y2)?;
    Ok(((lo + hi) / 2.0, (hi - lo) / 2.0))
}

/// ρ-rank of `theta_x` against references `theta_y1 < theta_y2`, clamped to
/// `[-1, 1]` when `theta_x` falls outside the reference interval.
pub fn rho_rank(theta_x: f64, theta_y1: f64, theta_y2: f64, scale: &RankScale) -> Result<RhoRank> {
    let (mean, half) = reference_stats(theta_y1, theta_y2, scale)?;
    let x = scale.to_working(theta_x)?;
    RhoRank::clamped((x - mean) / half)
}

/// Inverse of [`rho_rank`] inside the reference interval. No rounding.
pub fn reconstruct_rank(rho: RhoRank, theta_y1: f64, theta_y2: f64, scale: &RankScale) -> Result<f64> {
    let (mean, half) = reference_stats(theta_y1, theta_y2, scale)?;
    Ok(scale.from_working(rho.value() * half + mean))
}

/// Search window `[low_rank, high_rank]` around the previous estimate.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct SearchWindow {
    pub low_rank: i32,
    pub high_rank: i32,
    pub center: i32,
}

impl SearchWindow {
    pub fn span(&self) -> i32 {
        self.high_rank - self.low_rank
    }
}

/// Nominal (unclipped) window endpoints around `center`.
pub fn nominal_window(center: i32, scale: &RankScale) -> Result<(i32, i32)> {
    match scale.kind {
        ScaleKind::Arithmetic => {
            let tau = scale.tau as i32;
            Ok((center - tau, center + tau))
        }
        ScaleKind::Geometric => {
            if center < 1 {
                return domain(format!("geometric window needs center >= 1, got {center}"));
            }
            let ln_c = (center as f64).ln();
            // at small centres rounding can swallow the offset; keep each
            // endpoint at least one rank away so the estimate can move both ways
            let low = ((ln_c - scale.tau).exp().round() as i32).min(center - 1);
            let high = ((ln_c + scale.tau).exp().round() as i32).max(center + 1);
            Ok((low.max(1), high))
        }
    }
}

/// Builds the search window around `center`, clipped into `domain`.
///
/// If clipping leaves fewer than two distinct ranks, the window is widened
/// inward to two adjacent ranks.
pub fn make_window(center: i32, scale: &RankScale, domain_: &RankDomain) -> Result<SearchWindow> {
    if !domain_.contains(center) {
        return domain(format!("window center {center} outside {domain_}"));
    }
    if domain_.len() < 2 {
        return Err(MwrError::Domain(format!(
            "rank domain {domain_} cannot hold a two-rank window"
        )));
    }
    let (low, high) = nominal_window(center, scale)?;
    let mut low = low.max(domain_.min);
    let mut high = high.min(domain_.max);
    if low >= high {
        if low < domain_.max {
            high = low + 1;
        } else {
            low = high - 1;
        }
    }
    Ok(SearchWindow {
        low_rank: low,
        high_rank: high,
        center,
    })
}
