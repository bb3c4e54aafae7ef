//! Desk-scale face swapping built on a style-based generator with an
//! injectable intermediate feature map.
//!
//! The crate is organized around the pieces of the swap pipeline:
//!
//! - [`ad`] — reverse-mode automatic differentiation over `f64` ndarrays,
//!   plus the parameter store and Adam optimizer everything trains with.
//! - [`sg_core`] — the style-based generator whose forward pass can run
//!   fully from an extended latent or resume from an injected feature map
//!   at a block boundary, and the co-trained discriminator.
//! - [`latent_probe`] — the latent-subspace probing experiment: fix a
//!   feature map at a level, randomize the latent tail, score divergence.
//! - [`encoders`] — target attribute encoder, source identity encoder,
//!   shape mapper, and the swap composition.
//! - [`morphable`] — linear 3D morphable face model and the mixed-mesh
//!   construction for the partial landmark loss.
//! - [`objectives`] — the training losses and their weighted total.
//! - [`perception`] — the pluggable estimator bundle (identity embedder,
//!   pose/expression estimator, gaze estimator, face parser, perceptual
//!   features) with seeded stub implementations.
//! - [`metrics`] — the evaluation suite, including masked-L1 and eye-gaze
//!   error and a Fréchet-distance kernel.
//! - [`pipeline`] — dataset ingestion, trainer, checkpointing and the CLI.

pub mod ad;
pub mod container;
pub mod encoders;
pub mod error;
pub mod image;
pub mod latent_probe;
pub mod metrics;
pub mod morphable;
pub mod objectives;
pub mod perception;
pub mod pipeline;
pub mod sg_core;

pub use error::{Error, Result};
