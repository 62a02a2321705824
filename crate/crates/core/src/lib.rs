//! Person identification from facial micro-expressions.
//!
//! The crate covers the whole pipeline: apex-centred clip preparation
//! ([`data`]), a synthetic motion-signature dataset ([`synth`]), a
//! dual-pathway (slow/fast) 3D convolutional classifier ([`model`]), its
//! training loop and grid search ([`training`]), ensemble voting
//! ([`ensemble`]), rank-1 evaluation ([`evaluation`]) and Grad-CAM saliency
//! ([`gradcam`]).

pub mod data;
pub mod ensemble;
pub mod error;
pub mod evaluation;
pub mod gradcam;
pub mod model;
pub mod nn;
pub mod presets;
pub mod seed;
pub mod synth;
pub mod training;

pub use error::{Error, Result};
