//! Feature-vector datasets and their delimited text format.
//!
//! Columns: `id`, `rank`, optional `sigma`, optional `split`, then
//! `f0 .. f{d-1}`. When no split column is present, splits are assigned by a
//! seeded hash of the instance id (70/10/20 by default).

use std::collections::{BTreeMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{MwrError, Result};
use crate::harness::io::{mix_seed, write_atomic};
use crate::neural::hex_digest;
use crate::rho::RankDomain;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = MwrError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "train" => Ok(Split::Train),
            "val" | "valid" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(MwrError::Data(format!("unknown split tag '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub id: u64,
    pub rank: i32,
    pub sigma: Option<f64>,
    pub split: Split,
    pub features: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitRatios {
    pub train: f64,
    pub val: f64,
}

impl Default for SplitRatios {
    fn default() -> Self {
        Self { train: 0.7, val: 0.1 }
    }
}

impl SplitRatios {
    pub fn assign(&self, id: u64, seed: u64) -> Split {
        let u = (mix_seed(&[seed, id]) >> 11) as f64 / (1u64 << 53) as f64;
        if u < self.train {
            Split::Train
        } else if u < self.train + self.val {
            Split::Val
        } else {
            Split::Test
        }
    }
}

#[derive(Debug, Clone, Default)]
pub struct LoadOptions {
    /// Declared rank domain; inferred from the data when absent.
    pub domain: Option<RankDomain>,
    pub split_seed: u64,
    pub ratios: SplitRatios,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub instances: Vec<Instance>,
    pub rank_domain: RankDomain,
    pub feature_dim: usize,
}

impl Dataset {
    pub fn new(instances: Vec<Instance>, rank_domain: RankDomain) -> Result<Self> {
        let feature_dim = instances.first().map_or(0, |i| i.features.len());
        let ds = Self {
            instances,
            rank_domain,
            feature_dim,
        };
        ds.validate()?;
        Ok(ds)
    }

    fn validate(&self) -> Result<()> {
        if self.instances.is_empty() {
            return Err(MwrError::Data("dataset has no instances".into()));
        }
        if self.feature_dim == 0 {
            return Err(MwrError::Data("dataset has no feature columns".into()));
        }
        let mut seen = HashSet::new();
        for (row, inst) in self.instances.iter().enumerate() {
            if !seen.insert(inst.id) {
                return Err(MwrError::Data(format!("row {}: duplicate id {}", row + 1, inst.id)));
            }
            if !self.rank_domain.contains(inst.rank) {
                return Err(MwrError::Data(format!(
                    "row {}: rank {} outside domain {}",
                    row + 1,
                    inst.rank,
                    self.rank_domain
                )));
            }
            if inst.features.len() != self.feature_dim {
                return Err(MwrError::Data(format!(
                    "row {}: {} features, expected {}",
                    row + 1,
                    inst.features.len(),
                    self.feature_dim
                )));
            }
            if inst.features.iter().any(|v| !v.is_finite()) {
                return Err(MwrError::Data(format!("row {}: non-finite feature", row + 1)));
            }
            if let Some(s) = inst.sigma {
                if !(s.is_finite() && s > 0.0) {
                    return Err(MwrError::Data(format!(
                        "row {}: sigma must be positive, got {s}",
                        row + 1
                    )));
                }
            }
        }
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.instances.len()
    }

    pub fn is_empty(&self) -> bool {
        self.instances.is_empty()
    }

    /// Indices of instances in `split`, in file order.
    pub fn split_indices(&self, split: Split) -> Vec<usize> {
        self.instances
            .iter()
            .enumerate()
            .filter(|(_, i)| i.split == split)
            .map(|(k, _)| k)
            .collect()
    }

    /// Like [`split_indices`](Self::split_indices) but errors on an empty split.
    pub fn require_split(&self, split: Split) -> Result<Vec<usize>> {
        let idx = self.split_indices(split);
        if idx.is_empty() {
            return Err(MwrError::Data(format!("split '{}' is empty", split.as_str())));
        }
        Ok(idx)
    }

    pub fn has_sigma(&self) -> bool {
        self.instances.iter().all(|i| i.sigma.is_some())
    }

    /// SHA-256 over ids, ranks, sigmas, splits and feature bit patterns.
    pub fn digest(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.rank_domain.min.to_le_bytes());
        h.update(self.rank_domain.max.to_le_bytes());
        for inst in &self.instances {
            h.update(inst.id.to_le_bytes());
            h.update(inst.rank.to_le_bytes());
            h.update(inst.sigma.map_or(u64::MAX, f64::to_bits).to_le_bytes());
            h.update([inst.split as u8]);
            for v in &inst.features {
                h.update(v.to_bits().to_le_bytes());
            }
        }
        hex_digest(h)
    }

    pub fn rank_counts(&self, split: Split) -> BTreeMap<i32, usize> {
        let mut counts = BTreeMap::new();
        for inst in self.instances.iter().filter(|i| i.split == split) {
            *counts.entry(inst.rank).or_insert(0) += 1;
        }
        counts
    }

    pub fn load_csv(path: &Path, opts: &LoadOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new().trim(csv::Trim::All).from_path(path)?;
        Self::from_reader(&mut reader, opts)
    }

    pub fn from_csv_str(text: &str, opts: &LoadOptions) -> Result<Self> {
        let mut reader = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .from_reader(text.as_bytes());
        Self::from_reader(&mut reader, opts)
    }

    fn from_reader<R: std::io::Read>(reader: &mut csv::Reader<R>, opts: &LoadOptions) -> Result<Self> {
        let header = reader.headers()?.clone();
        let col = |name: &str| header.iter().position(|h| h == name);
        let id_col = col("id").ok_or_else(|| MwrError::Data("missing 'id' column".into()))?;
        let rank_col = col("rank").ok_or_else(|| MwrError::Data("missing 'rank' column".into()))?;
        let sigma_col = col("sigma");
        let split_col = col("split");
        let mut feature_cols = Vec::new();
        while let Some(c) = col(&format!("f{}", feature_cols.len())) {
            feature_cols.push(c);
        }
        if feature_cols.is_empty() {
            return Err(MwrError::Data("no feature columns f0..".into()));
        }
        let known = 2 + usize::from(sigma_col.is_some()) + usize::from(split_col.is_some()) + feature_cols.len();
        if known != header.len() {
            return Err(MwrError::Data(format!(
                "header has {} columns but only {known} are recognised (feature columns must be f0..f{{d-1}} without gaps)",
                header.len()
            )));
        }

        let mut instances = Vec::new();
        for (k, rec) in reader.records().enumerate() {
            // header is line 1
            let line = k + 2;
            let rec = rec.map_err(|e| MwrError::Data(format!("row {line}: {e}")))?;
            if rec.len() != header.len() {
                return Err(MwrError::Data(format!(
                    "row {line}: {} fields, header has {}",
                    rec.len(),
                    header.len()
                )));
            }
            let field = |c: usize, what: &str| -> Result<&str> {
                rec.get(c)
                    .ok_or_else(|| MwrError::Data(format!("row {line}: missing {what}")))
            };
            let parse_err = |what: &str, raw: &str| MwrError::Data(format!("row {line}: bad {what} '{raw}'"));
            let id_raw = field(id_col, "id")?;
            let id: u64 = id_raw.parse().map_err(|_| parse_err("id", id_raw))?;
            let rank_raw = field(rank_col, "rank")?;
            let rank: i32 = rank_raw.parse().map_err(|_| parse_err("rank", rank_raw))?;
            let sigma = match sigma_col {
                Some(c) => {
                    let raw = field(c, "sigma")?;
                    if raw.is_empty() {
                        None
                    } else {
                        Some(raw.parse::<f64>().map_err(|_| parse_err("sigma", raw))?)
                    }
                }
                None => None,
            };
            let split = match split_col {
                Some(c) => field(c, "split")?
                    .parse::<Split>()
                    .map_err(|e| MwrError::Data(format!("row {line}: {e}")))?,
                None => opts.ratios.assign(id, opts.split_seed),
            };
            let features = feature_cols
                .iter()
                .map(|&c| {
                    let raw = field(c, "feature")?;
                    raw.parse::<f64>().map_err(|_| parse_err("feature", raw))
                })
                .collect::<Result<Vec<f64>>>()?;
            instances.push(Instance {
                id,
                rank,
                sigma,
                split,
                features,
            });
        }
        let domain = match opts.domain {
            Some(d) => d,
            None => {
                let min = instances.iter().map(|i| i.rank).min();
                let max = instances.iter().map(|i| i.rank).max();
                match (min, max) {
                    (Some(a), Some(b)) => RankDomain::new(a, b)?,
                    _ => return Err(MwrError::Data("dataset has no rows".into())),
                }
            }
        };
        Self::new(instances, domain)
    }

    /// Serializes with an explicit split column so reloading is exact.
    pub fn to_csv_string(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let with_sigma = self.instances.iter().any(|i| i.sigma.is_some());
        let mut header = vec!["id".to_string(), "rank".to_string()];
        if with_sigma {
            header.push("sigma".into());
        }
        header.push("split".into());
        header.extend((0..self.feature_dim).map(|j| format!("f{j}")));
        w.write_record(&header)?;
        for inst in &self.instances {
            let mut row = vec![inst.id.to_string(), inst.rank.to_string()];
            if with_sigma {
                row.push(inst.sigma.map(|s| s.to_string()).unwrap_or_default());
            }
            row.push(inst.split.as_str().to_string());
            row.extend(inst.features.iter().map(|v| v.to_string()));
            w.write_record(&row)?;
        }
        let bytes = w.into_inner().map_err(|e| MwrError::Io(e.into_error()))?;
        String::from_utf8(bytes).map_err(|e| MwrError::Format(e.to_string()))
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_atomic(path, self.to_csv_string()?.as_bytes())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const SMALL: &str = "id,rank,f0,f1\n1,20,0.5,1.0\n2,22,0.25,-1.0\n3,30,1e-3,2\n";

    #[test]
    fn loads_well_formed_file() {
        let ds = Dataset::from_csv_str(SMALL, &LoadOptions::default()).unwrap();
        assert_eq!(ds.len(), 3);
        assert_eq!(ds.feature_dim, 2);
        assert_eq!(ds.rank_domain, RankDomain::new(20, 30).unwrap());
        assert!(!ds.has_sigma());
    }

    #[test]
    fn duplicate_id_names_row() {
        let text = "id,rank,f0\n1,2,0\n1,3,0\n";
        let err = Dataset::from_csv_str(text, &LoadOptions::default()).unwrap_err();
        assert!(
            err.to_string().contains("row 2") && err.to_string().contains("duplicate"),
            "{err}"
        );
    }

    #[test]
    fn rejects_bad_rows() {
        let opts = LoadOptions {
            domain: Some(RankDomain::new(1, 10).unwrap()),
            ..Default::default()
        };
        let err = Dataset::from_csv_str("id,rank,f0\n1,11,0\n", &opts).unwrap_err();
        assert!(err.to_string().contains("outside domain"), "{err}");
        let err = Dataset::from_csv_str("id,rank,f0,f1\n1,2,0\n", &opts).unwrap_err();
        assert!(err.to_string().contains("row 2"), "{err}");
        let err = Dataset::from_csv_str("id,rank,f0\n1,x,0\n", &opts).unwrap_err();
        assert!(err.to_string().contains("bad rank"), "{err}");
        assert!(Dataset::from_csv_str("id,rank,f1\n1,2,0\n", &opts).is_err());
        assert!(Dataset::from_csv_str("id,rank,f0,sigma\n1,2,0,-1\n", &opts).is_err());
    }

    #[test]
    fn sigma_and_split_columns() {
        let text = "id,rank,sigma,split,f0\n1,2,1.5,train,0\n2,3,2.0,test,1\n";
        let ds = Dataset::from_csv_str(text, &LoadOptions::default()).unwrap();
        assert!(ds.has_sigma());
        assert_eq!(ds.instances[0].sigma, Some(1.5));
        assert_eq!(ds.split_indices(Split::Test), vec![1]);
        assert!(ds.require_split(Split::Val).is_err());
    }

    #[test]
    fn csv_round_trip_preserves_digest() {
        let text = "id,rank,sigma,split,f0,f1\n1,2,1.5,train,0.1,0.30000000000000004\n2,3,2.0,val,1,-7e-9\n";
        let ds = Dataset::from_csv_str(text, &LoadOptions::default()).unwrap();
        let again = Dataset::from_csv_str(&ds.to_csv_string().unwrap(), &LoadOptions::default()).unwrap();
        assert_eq!(ds, again);
        assert_eq!(ds.digest(), again.digest());
    }

    #[test]
    fn hashed_split_is_deterministic_and_roughly_proportional() {
        let r = SplitRatios::default();
        let mut counts = [0usize; 3];
        for id in 0..10_000 {
            let s = r.assign(id, 42);
            assert_eq!(s, r.assign(id, 42));
            counts[s as usize] += 1;
        }
        assert!((6700..7300).contains(&counts[0]), "{counts:?}");
        assert!((800..1200).contains(&counts[1]), "{counts:?}");
    }
}
