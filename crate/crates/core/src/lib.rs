//! Robust Q-learning for two-stage treatment regimes with universal
//! post-selection inference (UPoSI).
//!
//! The pipeline: cross-fitted nuisance regressions ([`nuisance`]), centered
//! gram summaries and normal equations per stage ([`stage_engine`]),
//! data-driven submodel choice ([`selection`]), a perturbation bootstrap of
//! the gram deviations ([`bootstrap`]), and confidence regions, intervals and
//! a null test built from the bootstrap quantiles ([`inference`]). The
//! [`simulation`] module generates the benchmark scenarios and scores
//! coverage; [`cli`] wires everything to a batch command-line tool.

pub mod bootstrap;
pub mod cli;
pub mod data_model;
pub mod error;
pub mod inference;
pub mod linalg;
pub mod nuisance;
pub mod rng;
pub mod selection;
pub mod simulation;
pub mod stage_engine;

pub use data_model::{Dataset, FeatureDictionary, FoldPartition, ModelSet, Stage, Term, Trajectory};
pub use error::{Error, Result};

pub const VERSION: &str = env!("CARGO_PKG_VERSION");
