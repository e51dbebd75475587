//! Metric-embedding toolkit for retrieval-based place recognition.
//!
//! The crate implements the stochastic attraction-repulsion embedding
//! (SARE) objective with Gaussian, Cauchy and Exponential kernels, in
//! independent and joint multi-negative forms, next to the triplet ranking
//! and contrastive baselines, all with closed-form gradients. Around the
//! losses sit a finite-difference gradient oracle, a small trainable
//! embedder with momentum SGD, hard-negative tuple mining on geo-tagged
//! data, synthetic dataset generation, recall@N / mAP / PCA evaluation, and
//! gradient-magnitude field generation.
//!
//! ```
//! use sare_core::{losses, Kernel, NegativeMode};
//!
//! let q = [1.0, 0.0];
//! let p = [0.8, 0.6];
//! let negs = [[0.0, 1.0], [-0.6, 0.8]];
//! let g = losses::sare(&q, &p, &negs, Kernel::Gaussian, NegativeMode::Joint).unwrap();
//! assert!(g.loss > 0.0);
//! assert!(g.translation_residual() < 1e-12);
//! ```

pub mod dataset;
mod dd;
pub mod embedder;
pub mod embedding;
pub mod error;
pub mod eval;
pub mod gradcheck;
pub mod gradfield;
pub mod losses;
pub mod mining;

pub use dataset::{Descriptor, PlaceDataset, Split, SynthConfig};
pub use embedder::{Architecture, EmbedderModel, TrainConfig};
pub use embedding::{
    l2_distance_squared, l2_normalize, Embedding, Kernel, LossFamily, LossGrad, LossSpec,
    MatchDistribution, NegativeMode, TensorName, TrainingTuple,
};
pub use error::{Error, Result};
pub use mining::MiningConfig;

/// Crate version, recorded in run metadata.
pub const VERSION: &str = env!("CARGO_PKG_VERSION");
