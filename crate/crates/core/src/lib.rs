//! Semantically constrained audio-visual co-factorization.
//!
//! Audio token features `X_A` (N_T × C_A) and image patch features `X_I`
//! (HW × C_I) are factorized jointly as `X_A ≈ σ(Ũ_A) V_A` and
//! `X_I ≈ σ(Ũ_I) V_I`. A cross-modal penalty compares the two
//! decompositions through paired text anchors, and the factor pair that
//! agrees best (`k*`) is read out as the sounding object: column `k*` of
//! `σ(Ũ_I)` is a soft segmentation of it.

pub mod error;
pub mod fixtures;
pub mod metrics;
pub mod nmfcore;
pub mod segment;
pub mod semantics;
pub mod solver;
pub mod tensorio;

pub use error::{Error, Result};
pub use nmfcore::{DecompositionState, LossBreakdown, ModalityState, ReconReduction};
pub use semantics::{AnchorBank, ComponentMode, DescriptorSet, MinMode, PenaltyKind};
pub use solver::{decompose, decompose_sequence, DecompositionResult, SolverConfig};
pub use tensorio::{FeatureMatrix, FramePair, Manifest, ManifestSample, Modality};
