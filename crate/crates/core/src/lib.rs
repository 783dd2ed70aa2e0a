//! Benchmark harness for anatomy-conditioned counterfactual generation of 3D volumes.
//!
//! The crate is organised bottom-up:
//!
//! - [`phantoms`]: labeled synthetic brain volumes, the oracle segmenter and the scan store.
//! - [`attributes`]: region-volume attributes, normalization, do-interventions, Fourier embeddings.
//! - [`nn`]: a small reverse-mode autodiff with 3D convolutions, used by every model family.
//! - [`models`]: six conditional generative families behind one encode/decode interface.
//! - [`engine`]: abduction / action / prediction passes and intervention cycles.
//! - [`metrics`]: composition, reversibility, realism, effectiveness, minimality, generalizability.
//! - [`harness`]: configuration, dataset materialization, splitting, staged runs and reports.
//!
//! Data-parallel loops go through [`exec`], which uses rayon when the `parallel`
//! feature is enabled and falls back to plain iteration otherwise.

pub mod attributes;
pub mod engine;
pub mod exec;
pub mod harness;
pub mod metrics;
pub mod models;
pub mod nn;
pub mod phantoms;
pub mod region;

pub use engine::{CounterfactualRequest, CycleTrace};
pub use harness::{BenchmarkConfig, BenchmarkReport};
pub use attributes::{AttributeVector, Intervention, Normalizer, Space};
pub use models::{CounterfactualModel, IdentityModel, LatentState, ModelCheckpoint, ModelConfig, ModelFamily};
pub use phantoms::{CohortId, LabelMap, SubjectSpec, Volume3D};
pub use region::{RegionId, RegionMap};
