//! Crosscoder-based model diffing.
//!
//! Trains L1 and BatchTopK crosscoders on paired base/chat activations,
//! classifies latents by relative decoder norm, runs the Latent Scaling
//! diagnostic for Complete Shrinkage and Latent Decoupling, and measures the
//! causal effect of latent patches through a toy readout model. Everything is
//! exercised on synthetic worlds with a planted ground-truth dictionary.

pub mod cli;
pub mod crosscoder;
pub mod diffing;
pub mod error;
pub mod io;
pub mod linalg;
pub mod patching;
pub mod scaling;
pub mod trainer;
pub mod world;

pub use crosscoder::{CrosscoderParams, LatentCodes, LossBreakdown, Variant, Weights};
pub use error::{Result, XdiffError};
pub use world::{PairedActivationBatch, PlantedWorld, WorldConfig};
