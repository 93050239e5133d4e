//! Prototype-quantized feature classification at desk scale.
//!
//! The library builds class prototypes from learnable prompts pushed through
//! a frozen encoder surrogate (with centroid and free-codebook baselines),
//! assigns continuous features to prototypes through a differentiable
//! Gumbel-Softmax relaxation, fuses quantized and raw features with a
//! cross-attention block, and trains the whole stack against a three-term
//! objective: contrastive alignment, compactness toward assigned prototypes,
//! and a separation penalty over prototype pairs.
//!
//! Everything is driven by a small reverse-mode tape over dense matrices
//! ([`diffcore`]), so each trainable block is checked against central finite
//! differences. Evaluation harnesses (temperature sweeps, loss and strategy
//! ablations, few-shot curves, 2-D projections) live in [`evalkit`] and are
//! bit-deterministic per seed regardless of worker count.

pub mod datasim;
pub mod diffcore;
pub mod error;
pub mod evalkit;
pub mod fusion;
pub mod losses;
pub mod model;
pub mod protogen;
pub mod quantizer;
pub mod rng;
pub mod trainer;

pub use error::{Error, Result};
