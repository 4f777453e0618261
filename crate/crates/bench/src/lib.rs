//! Shared fixtures for the benchmarks.

use mwr_core::harness::manifest::ExperimentManifest;
use mwr_core::harness::pipeline::gamma_tables;
use mwr_core::neural::TripletInput;
use mwr_core::{
    generate_synthetic, Dataset, RankDomain, RefDbBuilder, RefDbConfig, ReferenceDatabase, RhoRegressor, Split,
    SyntheticSpec,
};

pub struct Fixture {
    pub dataset: Dataset,
    pub manifest: ExperimentManifest,
    pub global: RhoRegressor,
    pub locals: Vec<RhoRegressor>,
    /// Reference database selected from the (untrained) models' γ tables.
    pub neural_db: ReferenceDatabase,
    /// Reference database for oracle runs.
    pub oracle_db: ReferenceDatabase,
    pub test: Vec<usize>,
}

impl Fixture {
    /// A 1200-instance dataset over ranks 1 to 40 with freshly initialised
    /// models. Inference cost does not depend on how well the models are trained.
    pub fn new() -> Fixture {
        let dataset = generate_synthetic(&SyntheticSpec {
            n: 1200,
            rank_domain: RankDomain { min: 1, max: 40 },
            ..SyntheticSpec::default()
        })
        .expect("valid synthetic spec");
        let manifest = ExperimentManifest::for_dataset(&dataset, None, 0).expect("default manifest");
        let global = RhoRegressor::new(manifest.model.clone(), 1).expect("valid spec");
        let locals: Vec<RhoRegressor> = (0..manifest.partition.groups.len() as u64)
            .map(|i| RhoRegressor::new(manifest.model.clone(), 2 + i).expect("valid spec"))
            .collect();
        let neural_db = gamma_tables(&manifest, &dataset, &global, &locals)
            .and_then(|t| t.select(manifest.selection))
            .expect("γ tables");
        let oracle_db = RefDbBuilder {
            dataset: &dataset,
            scale: manifest.scale(),
            alpha: manifest.train.alpha,
            groups: manifest.partition.groups.clone(),
            config: RefDbConfig::default(),
        }
        .oracle()
        .and_then(|t| t.select(manifest.selection))
        .expect("oracle database");
        let test = dataset.split_indices(Split::Test);
        Fixture {
            dataset,
            manifest,
            global,
            locals,
            neural_db,
            oracle_db,
            test,
        }
    }

    pub fn features(&self, i: usize) -> &[f64] {
        &self.dataset.instances[i].features
    }

    /// A training-sized batch of triplets over consecutive instances.
    pub fn batch(&self, size: usize) -> Vec<TripletInput<'_>> {
        let n = self.dataset.len();
        (0..size)
            .map(|i| TripletInput {
                x: self.features(i % n),
                y1: self.features((i + 1) % n),
                y2: self.features((i + 2) % n),
                rho: (i as f64 / size as f64) * 2.0 - 1.0,
            })
            .collect()
    }
}

impl Default for Fixture {
    fn default() -> Self {
        Self::new()
    }
}
