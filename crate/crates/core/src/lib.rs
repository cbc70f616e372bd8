//! Explainer networks for CNN feature disentanglement.
//!
//! A frozen performer CNN is tapped at a mid-level conv layer. An explainer
//! (two-track encoder plus a two-layer FC decoder) is distilled from it so
//! that the interpretable track's filters each fire on a single object part
//! while the decoder still reconstructs the performer's FC features.
//!
//! This crate holds the pure numerical machinery and is `no_std` (it needs
//! `alloc`). File formats, checkpoints and the command line live in the
//! `explainer` crate.

#![cfg_attr(not(test), no_std)]

extern crate alloc;

pub mod error;
pub mod explainer;
pub mod losses;
pub mod metrics;
pub mod nn;
pub mod optim;
pub mod performer;
pub mod rng;
pub mod synth;
pub mod tensor;
pub mod training;

pub use error::{Error, Result};
pub use explainer::{ExplainerArch, ExplainerParams, NormStats};
pub use losses::{FilterAssignment, TemplateBank, TemplateConstants};
pub use performer::{PerformerArch, PerformerParams, TapBundle};
pub use tensor::FeatureMap;
