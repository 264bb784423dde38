//! Desk-scale many-to-many speech-to-text translation.
//!
//! The pipeline turns a waveform into a fixed 30-row speech prompt
//! (mel frontend -> frozen encoder -> query-token adapter -> pooling -> MLP),
//! prepends it to an instruction, and trains a small decoder-only LM with
//! LoRA through a staged multilingual curriculum. Everything numeric is
//! generic over [`Scalar`]; the shipped pipeline uses the [`Real`] alias.

pub mod adapter;
pub mod audio;
pub mod bench;
pub mod checkpoint;
pub mod config;
pub mod corpus;
pub mod curriculum;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod graph;
pub mod lang;
pub mod llm;
pub mod manifest;
pub mod matrix;
pub mod params;
pub mod pipeline;
pub mod plot;
pub mod scalar;
pub mod tasks;
pub mod tokenizer;
pub mod trainer;

pub use error::{Error, Result};
pub use scalar::Scalar;

/// Element type of the shipped pipeline. Tests instantiate `f64` directly
/// where the extra precision matters (finite-difference gradient checks).
pub type Real = f32;

/// Matrix of [`Real`] values, the working tensor type of the CLI pipeline.
pub type RealMatrix = matrix::Matrix<Real>;
