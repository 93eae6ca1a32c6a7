//! # sublab
//!
//! A self-contained laboratory for studying jailbreaking attacks and defenses
//! on unlearned text-conditioned diffusion models, at desk scale.
//!
//! The lab replaces the usual heavyweight stack (latent diffusion over images,
//! a CLIP text encoder, pretrained concept classifiers) with a toy universe
//! that keeps every mechanism intact:
//!
//! * a 2-D Gaussian-mixture "image" space with a handful of named concepts,
//! * a token-embedding table plus a small frozen mixing network standing in
//!   for the text encoder,
//! * a conditional denoising diffusion model trained from scratch in seconds,
//! * an unlearning procedure that fine-tunes the denoiser to suppress one
//!   concept while retaining the others.
//!
//! On top of that stack the crate implements the subspace attack (learning a
//! sequence of mutually orthogonal attack token embeddings, each a nonnegative
//! combination of vocabulary embeddings, via iterative deflation) and the
//! subspace defense (blocking the learned attack subspace out of the token
//! embedding table, plus an input filter for foreign embeddings), together
//! with an evaluation harness: verified (prompt, seed) datasets, attack
//! success rates under an any-of-K rule, transfer evaluation across models,
//! and utility proxies for defended models.
//!
//! Everything is deterministic given a root seed; checkpoints, attack bases
//! and reports round-trip through a small binary container format.

pub mod attack;
pub mod config;
pub mod container;
pub mod defense;
pub mod diffusion;
pub mod embedding;
pub mod encoder;
pub mod error;
pub mod eval;
pub mod factory;
pub mod nn;
pub mod opt;
pub mod pipeline;
pub mod report;
pub mod rng;

pub use error::{Error, Result};
