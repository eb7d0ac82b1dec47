//! Adversarial data programming: joint image–label generation from weak
//! labeling functions.
//!
//! A generator emits an image together with two dependency parameter sets for
//! a block of labeling functions: per-function relative accuracies `Θ` and an
//! inter-function dependency matrix `Φ`. The labeling-function block (LFB)
//! aggregates the functions' probabilistic votes on the generated image into
//! a single soft label, and two discriminators (one on image–label pairs, one
//! on dependency matrices) drive the minimax game. Variants cover rotation
//! self-supervision over unlabeled data, attribute-conditioned zero-shot
//! generation, and transfer by fine-tuning the image head alone.
//!
//! Everything runs at desk scale on synthetic glyph datasets with 64-bit
//! floats and a single-threaded, seed-deterministic training loop.

pub mod adam;
pub mod autodiff;
pub mod baselines;
pub mod config;
pub mod container;
pub mod data;
pub mod features;
pub mod gan;
pub mod lfb;
pub mod lfs;
pub mod metrics;
pub mod nn;
pub mod rng;
pub mod selfsup;
pub mod theory;
pub mod zeroshot;

mod error;

pub use error::AdpError;

/// Crate-wide result alias.
pub type Result<T> = std::result::Result<T, AdpError>;
