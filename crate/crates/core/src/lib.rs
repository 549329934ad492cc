//! Multimodal discrete-time survival prediction, desk scale.
//!
//! The crate builds everything from the numeric substrate up: a dense
//! tensor type with reverse-mode autodiff, volumetric residual encoders
//! with channel/spatial attention gating, a max-fusion layer across
//! modality embeddings, a parametric discrete-time hazard head trained
//! by censoring-aware negative log-likelihood, survival metrics
//! (time-dependent concordance, Harrell's C, Kaplan-Meier), and a
//! synthetic-cohort generator plus training/checkpoint machinery that
//! make the whole pipeline verifiable end to end.

pub mod cbam;
pub mod error;
pub mod fusion;
pub mod metrics;
pub mod nn;
pub mod survival;
pub mod tensor;

pub use error::{Error, Result};
pub use tensor::{Element, Tape, Tensor};
