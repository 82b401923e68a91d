//! Pattern-aware preprocessing and training orchestration for univariate
//! time-series imputation.
//!
//! The pipeline windows raw series, clusters the complete windows, assigns
//! incomplete ones to clusters, projects their missingness patterns onto
//! complete data, searches for a minimal artificial mask per cluster and
//! trains one imputer per cluster, then checks a PAC-style validation bound.

pub mod assignment;
pub mod clustering;
pub mod distance;
pub mod error;
pub mod imputers;
pub mod ingest;
pub mod masksearch;
pub mod pac;
pub mod patterns;
pub mod pipeline;
pub mod seed;
pub mod types;
pub mod windowing;

pub use error::{Error, Result};
pub use seed::RunSeed;
pub use types::{apply_mask, mask_and, MaskVector, PacConfig, RawSeries, SeriesWindow, MISSING};
