//! Bayesian quadratic discriminant analysis with a meta-learned
//! Normal-Inverse-Wishart prior over class-conditional Gaussians.
//!
//! The crate covers the full pipeline on fixed feature vectors: conjugate
//! posterior updates ([`niw`]), MAP / fully-Bayesian / tied-covariance
//! classifiers ([`classifier`]), episodic meta-training of the prior
//! ([`trainer`]), episode sampling and synthetic tasks ([`episodes`]),
//! calibration ([`calibration`]), file formats ([`format`]) and the
//! evaluation protocols ([`protocol`]).

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::needless_range_loop)]

pub mod calibration;
pub mod classifier;
pub mod episodes;
pub mod error;
pub mod format;
pub mod niw;
pub mod numerics;
pub mod protocol;
pub mod trainer;

pub use classifier::{ClassId, Mode, Prediction, QdaModel};
pub use episodes::{episode_rng, Episode, FeatureDataset, SyntheticTaskSpec};
pub use error::{Error, Result};
pub use niw::{ClassPosterior, GaussianParams, NiwPrior, Ridge};
pub use numerics::{LowerTriangular, Matrix};
pub use trainer::{LossKind, TrainerConfig};
