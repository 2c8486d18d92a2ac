//! Contextual speech-enhancement frontend for noise-robust ASR.
//!
//! A conformer mask estimator that jointly handles echo cancellation, noise
//! suppression and target-speaker separation. The model is conditioned on
//! three optional side inputs: the playback reference signal, a noise-only
//! context segment preceding the utterance, and a speaker embedding.
//!
//! The crate is organised bottom-up:
//!
//! - [`features`]: STFT, mel filterbank, log compression and frame stacking.
//! - [`datagen`]: synthetic scenes (echo, noise, competing speaker), ideal
//!   ratio mask targets and the on-disk dataset format.
//! - [`autodiff`]: a small tape-based reverse-mode differentiation engine
//!   with a finite-difference checker.
//! - [`model`]: modulated conformer blocks, the noise-context encoder, the
//!   modulated cross-attention blocks and the projection decoder.
//! - [`losses`], [`trainer`], [`inference`]: training objective, Adam loop,
//!   mask scaling and evaluation.
//! - [`diagnostics`]: the finite-difference gradient suite.

pub mod autodiff;
pub mod config;
pub mod datagen;
pub mod diagnostics;
pub mod error;
pub mod features;
pub mod inference;
pub mod losses;
pub mod model;
pub mod trainer;

pub use autodiff::{grad_check, Gradients, Real, Tape, Tensor, Var};
pub use datagen::{Condition, Dataset, SceneConfig, UtteranceExample};
pub use error::{Error, Result};
pub use features::{AudioBuffer, FeatureDomain, FeatureMatrix, Matrix};
pub use inference::MaskPolicy;
pub use losses::{FrozenEncoder, RampSchedule};
pub use model::{ArchConfig, FrontendModel};
pub use trainer::TrainConfig;
