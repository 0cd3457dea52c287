//! Weakly-supervised audio-visual video parsing.
//!
//! Given per-second audio and visual snippet features and only video-level
//! labels for training, the model predicts for every second which event
//! classes are audible, visible, or both. The pipeline is: per-modality
//! projection, hybrid attention ([`han`]), a shared snippet classifier and
//! attentive multimodal MIL pooling ([`mmil`]), trained with a
//! weak-supervision loss plus a per-modality guided loss ([`losses`]).

pub mod cli;
pub mod datamodel;
pub mod error;
pub mod han;
pub mod losses;
pub mod metrics;
pub mod mmil;
pub mod model;
pub mod numeric;
pub mod trainer;

pub use error::{Error, Result};
