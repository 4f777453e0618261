//! Moving window regression for ordinal rank estimation.
//!
//! A query's rank is refined iteratively: a search window is centred on the
//! current estimate, a learned ρ-regressor compares the query against two
//! reference instances at the window ends, and the resulting relative rank
//! is mapped back to an absolute rank that becomes the next window centre.

pub mod engine;
pub mod error;
pub mod harness;
pub mod metrics;
pub mod neural;
pub mod partition;
pub mod rank_index;
pub mod refdb;
pub mod rho;
pub mod trainer;

pub use engine::{
    infer, initial_estimate, mwr_step, run_global, run_local, MwrSettings, MwrTrace, OracleRegressor, Regressors,
    RhoEstimator,
};
pub use error::{MwrError, Result};
pub use harness::dataset::{Dataset, Instance, Split};
pub use harness::synthetic::{generate_synthetic, Nonlinearity, SyntheticSpec};
pub use metrics::{accuracy, cumulative_score, epsilon_error, mae, EvalRecord};
pub use neural::{AdamConfig, Checkpoint, EncoderSpec, RegressionHeadSpec, RegressorSpec, RhoRegressor, TripletInput};
pub use partition::{partition_equal, partition_golden, PartitionKind, RankGroup};
pub use refdb::{RefDbBuilder, RefDbConfig, ReferenceDatabase, SchemeKind, SelectionScheme};
pub use rho::{make_window, reconstruct_rank, rho_rank, RankDomain, RankScale, RhoRank, ScaleKind, SearchWindow};
pub use trainer::{train, TrainConfig, TrainedModels};
