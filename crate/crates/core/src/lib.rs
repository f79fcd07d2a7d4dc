//! Language-grounded 3D semantic segmentation at desk scale: synthetic
//! long-tail corpora, sparse voxelization, text-anchored contrastive
//! pre-training, class-balanced fine-tuning, instance-sampling
//! augmentation, and benchmark evaluators — all deterministic given a seed.

pub mod augment;
pub mod catalog;
pub mod embed;
pub mod error;
pub mod eval;
pub mod experiment;
pub mod geom;
pub mod losses;
pub mod model;
pub mod rng;
pub mod scene;
pub mod synth;
pub mod voxelize;

pub use error::{Error, Result};
pub use scene::{PointRecord, Scene, NO_INSTANCE, UNLABELED};
