//! Contrastive adaptation network training at desk scale.
//!
//! The crate is organised bottom-up:
//!
//! - [`kernels`]: multi-bandwidth Gaussian RBF kernel matrices and their input gradients.
//! - [`discrepancy`]: empirical MMD, class-conditional discrepancies, the contrastive
//!   domain discrepancy (CDD) and its analytic gradient.
//! - [`clustering`]: spherical k-means seeded from source class centres plus the
//!   sample/class filters that produce target pseudo-labels.
//! - [`sampling`]: class-aware and uniform mini-batch construction on split RNG streams.
//! - [`model`]: a small MLP with hand-written backward pass and momentum SGD.
//! - [`data`]: synthetic two-domain generators and the CSV dataset format.
//! - [`trainer`]: the alternating optimisation loop, ablation variants and diagnostics.
//! - [`gradcheck`]: finite-difference verification of every analytic gradient.
//! - [`run`]: run-directory artifacts (metrics stream, summary, manifest).

pub mod clustering;
pub mod data;
pub mod discrepancy;
mod error;
pub mod gradcheck;
pub mod kernels;
pub mod model;
pub mod run;
pub mod sampling;
pub mod trainer;

pub use clustering::{ClusterState, FilterResult, PseudoLabeled};
pub use data::{Dataset, Domain, GeneratedPair, GeneratorMeta};
pub use discrepancy::{CddMode, CddValue, LabeledBatch};
pub use error::{Error, Result};
pub use kernels::KernelSpec;
pub use model::{LrSchedule, Mlp, MlpShape};
pub use sampling::{BatchPlan, Sampler};
pub use trainer::{LoopMetrics, Method, Summary, TrainConfig};

/// Row-major dense matrix used throughout the crate.
pub type Matrix = ndarray::Array2<f64>;
