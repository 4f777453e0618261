//! Experiment manifests: everything needed to reproduce a run from a dataset file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{config, MwrError, Result};
use crate::harness::dataset::{Dataset, LoadOptions, Split};
use crate::harness::io::write_atomic;
use crate::neural::{EncoderSpec, RegressionHeadSpec, RegressorSpec};
use crate::partition::{PartitionKind, RankGroup};
use crate::refdb::{RefDbConfig, SelectionScheme};
use crate::rho::{RankDomain, RankScale};
use crate::trainer::TrainConfig;

pub const MANIFEST_FORMAT_VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRef {
    /// Path as given when the manifest was created; informational.
    pub path: Option<String>,
    pub digest: String,
    pub rank_domain: RankDomain,
    pub split_seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub kind: PartitionKind,
    /// Explicit intervals, so a run does not depend on how they were derived.
    pub groups: Vec<RankGroup>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentManifest {
    pub format_version: u32,
    pub dataset: DatasetRef,
    pub train: TrainConfig,
    pub partition: PartitionConfig,
    pub model: RegressorSpec,
    pub selection: SelectionScheme,
    pub refdb: RefDbConfig,
    pub k: usize,
    pub max_iter: usize,
    pub eval_split: Split,
    pub seed: u64,
}

/// Default architecture for a given input width.
pub fn default_model(input_dim: usize) -> RegressorSpec {
    RegressorSpec {
        encoder: EncoderSpec {
            input_dim,
            hidden_dims: vec![64],
            output_dim: 32,
        },
        head: RegressionHeadSpec::default(),
    }
}

impl ExperimentManifest {
    /// Defaults for `dataset`: golden-5 partition, min-γ selection, K = 5,
    /// ten iterations, every seed derived from `seed`.
    pub fn for_dataset(dataset: &Dataset, path: Option<&Path>, seed: u64) -> Result<Self> {
        let train = TrainConfig {
            seed,
            ..TrainConfig::default()
        };
        let mut m = Self {
            format_version: MANIFEST_FORMAT_VERSION,
            dataset: DatasetRef {
                path: path.map(|p| p.display().to_string()),
                digest: dataset.digest(),
                rank_domain: dataset.rank_domain,
                split_seed: 0,
            },
            partition: PartitionConfig {
                kind: PartitionKind::Golden5,
                groups: Vec::new(),
            },
            model: default_model(dataset.feature_dim),
            selection: SelectionScheme::min_gamma(),
            refdb: RefDbConfig {
                seed,
                ..RefDbConfig::default()
            },
            k: 5,
            max_iter: 10,
            eval_split: Split::Test,
            seed,
            train,
        };
        m.rebuild_partition(m.partition.kind)?;
        Ok(m)
    }

    pub fn scale(&self) -> RankScale {
        self.train.scale
    }

    /// Recomputes the explicit groups for `kind` from the current domain and alpha.
    pub fn rebuild_partition(&mut self, kind: PartitionKind) -> Result<()> {
        self.partition = PartitionConfig {
            kind,
            groups: kind.build(&self.dataset.rank_domain, self.train.alpha)?,
        };
        Ok(())
    }

    /// Sets every derived seed from `seed`.
    pub fn reseed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
        self.refdb.seed = seed;
        if self.selection.kind == crate::refdb::SchemeKind::Random {
            self.selection.seed = seed;
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.format_version != MANIFEST_FORMAT_VERSION {
            return Err(MwrError::Format(format!(
                "unsupported manifest version {}",
                self.format_version
            )));
        }
        self.train.validate()?;
        self.model.validate()?;
        self.scale().validate_domain(&self.dataset.rank_domain)?;
        if self.k == 0 || self.max_iter == 0 {
            return config("k and max_iter must be at least 1");
        }
        let d = self.dataset.rank_domain;
        let groups = &self.partition.groups;
        for (i, g) in groups.iter().enumerate() {
            let ok = g.index == i
                && d.min <= g.extended_min
                && g.extended_min <= g.theta_min
                && g.theta_min < g.theta_max
                && g.theta_max <= g.extended_max
                && g.extended_max <= d.max;
            if !ok {
                return config(format!("partition group {i} {g:?} is not a valid interval in {d}"));
            }
        }
        if !groups.is_empty() {
            if let Some(r) = d.ranks().find(|&r| !groups.iter().any(|g| g.contains(r))) {
                return config(format!("rank {r} is not covered by any partition group"));
            }
        }
        Ok(())
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// First 12 hex digits of the SHA-256 of the canonical JSON form.
    pub fn run_id(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("manifest serializes");
        let digest = crate::neural::hex_digest(Sha256::new_with_prefix(bytes));
        digest[..12].to_string()
    }

    /// Writes the manifest with its run id as a leading, informational field.
    pub fn save(&self, path: &Path) -> Result<()> {
        #[derive(Serialize)]
        struct Stamped<'a> {
            run_id: String,
            #[serde(flatten)]
            manifest: &'a ExperimentManifest,
        }
        let mut text = serde_json::to_string_pretty(&Stamped {
            run_id: self.run_id(),
            manifest: self,
        })?;
        text.push('\n');
        write_atomic(path, text.as_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let m: Self = serde_json::from_slice(&fs::read(path)?)?;
        m.validate()?;
        Ok(m)
    }

    /// Loads the dataset file and checks it against the recorded digest.
    pub fn load_dataset(&self, path: &Path) -> Result<Dataset> {
        let ds = Dataset::load_csv(
            path,
            &LoadOptions {
                domain: Some(self.dataset.rank_domain),
                split_seed: self.dataset.split_seed,
                ..LoadOptions::default()
            },
        )?;
        self.check_dataset(&ds)?;
        Ok(ds)
    }

    pub fn check_dataset(&self, ds: &Dataset) -> Result<()> {
        let found = ds.digest();
        if found != self.dataset.digest {
            return Err(MwrError::StaleDigest {
                expected: self.dataset.digest.clone(),
                found,
            });
        }
        if ds.feature_dim != self.model.encoder.input_dim {
            return Err(MwrError::Shape {
                context: "dataset features vs model input",
                expected: self.model.encoder.input_dim,
                got: ds.feature_dim,
            });
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::harness::synthetic::{generate_synthetic, SyntheticSpec};
    use crate::partition::partition_golden;

    fn small() -> Dataset {
        generate_synthetic(&SyntheticSpec {
            n: 900,
            ..SyntheticSpec::default()
        })
        .unwrap()
    }

    #[test]
    fn defaults_carry_explicit_groups() {
        let ds = small();
        let m = ExperimentManifest::for_dataset(&ds, None, 3).unwrap();
        assert_eq!(m.partition.groups, partition_golden(&ds.rank_domain, 6).unwrap());
        assert_eq!((m.train.seed, m.refdb.seed), (3, 3));
        m.validate().unwrap();
    }

    #[test]
    fn run_id_tracks_content() {
        let ds = small();
        let a = ExperimentManifest::for_dataset(&ds, None, 1).unwrap();
        let b = ExperimentManifest::for_dataset(&ds, None, 1).unwrap();
        assert_eq!(a.run_id(), b.run_id());
        assert_eq!(a.run_id().len(), 12);
        let mut c = a.clone();
        c.k = 7;
        assert_ne!(a.run_id(), c.run_id());
    }

    #[test]
    fn round_trips_through_file() {
        let ds = small();
        let m = ExperimentManifest::for_dataset(&ds, None, 9).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join(MANIFEST_FILE);
        m.save(&p).unwrap();
        let back = ExperimentManifest::load(&p).unwrap();
        assert_eq!(back, m);
        assert_eq!(back.run_id(), m.run_id());
    }

    #[test]
    fn rejects_bad_manifests() {
        let ds = small();
        let mut m = ExperimentManifest::for_dataset(&ds, None, 0).unwrap();
        m.k = 0;
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::for_dataset(&ds, None, 0).unwrap();
        m.partition.groups[1].theta_min = 200;
        assert!(m.validate().is_err());
        let mut m = ExperimentManifest::for_dataset(&ds, None, 0).unwrap();
        m.dataset.digest = "x".into();
        assert!(matches!(m.check_dataset(&ds), Err(MwrError::StaleDigest { .. })));
    }
}
