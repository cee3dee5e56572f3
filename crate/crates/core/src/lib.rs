//! Clustering of irregularly sampled multivariate time series with a mixture
//! of linear Gaussian state space models, fitted by expectation maximization.
//!
//! Each cluster is a continuous-time linear model discretized at the series'
//! own sampling gaps: `x_k = (Id + Δ_k A) x_{k−1} + w_k` with
//! `w_k ~ N(0, Δ_k Γ)` and `y_k = C x_k + v_k` with `v_k ~ N(0, Σ / Δ_k)`.
//!
//! The numerical core is generic over [`Real`] (implemented for `f32` and
//! `f64`); the aliases below fix the scalar to `f64` or `f32`.

pub mod accumulator;
pub mod em_mixture;
pub mod em_single;
pub mod error;
pub mod ingest;
pub mod init;
pub mod kalman;
pub mod linalg;
pub mod model;
pub mod preprocess;
pub mod rng;
pub mod scalar;
pub mod selection;
pub mod simgen;

pub use accumulator::SufficientStatsAccumulator;
pub use em_mixture::{assign_clusters, fit_mixture, mixture_mstep_from_stats, responsibilities, Responsibilities};
pub use em_single::{fit_single, single_estep, single_mstep, SingleFitResult};
pub use error::{Error, Result};
pub use ingest::{load_dataset, read_csv_long, read_json, read_labels, write_csv_long, write_json, DataFormat};
pub use init::{init_identity, init_kmeans, init_random};
pub use kalman::{kalman_filter, log_marginal, rts_smooth, smooth, FilterOutput, SmoothedStats};
pub use model::{
    param_delta, validate_dataset, Dataset, DatasetSummary, FitOptions, FitReport, InitMethod, LgssmParams,
    MixtureModel, ParamBlock, TimeSeriesSample, TraceEntry,
};
pub use preprocess::{parse_transforms, preprocess, Transform};
pub use scalar::Real;
pub use selection::{abic, cluster_similarity, free_param_count, grid_select, GridResult, Similarity};
pub use simgen::{generate_benchmark, noiseless_trajectory, sample_series, Benchmark};

pub type Series = TimeSeriesSample<f64>;
pub type Params = LgssmParams<f64>;
pub type Model = MixtureModel<f64>;
pub type Report = FitReport<f64>;

pub type Series32 = TimeSeriesSample<f32>;
pub type Params32 = LgssmParams<f32>;
pub type Model32 = MixtureModel<f32>;
pub type Report32 = FitReport<f32>;
